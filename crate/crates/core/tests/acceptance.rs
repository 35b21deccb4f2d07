//! Acceptance suite. Runs every criterion in order and prints one PASS/FAIL
//! line per criterion. Set `SAS_ACCEPTANCE=1,4,7` to run a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sas_core::audio::{frame_count, griffin_lim, waveform_to_logmel, AudioConfig, Waveform};
use sas_core::autodiff::Tape;
use sas_core::checkpoint::load_checkpoint;
use sas_core::config::RunConfig;
use sas_core::corpus::{generate_synthetic_corpus, CorpusData, Example, FeatureMode, GeneratorConfig, RegionFeatureSet, TrainingBatch};
use sas_core::decoder::{infer_greedy, postnet_refine, AttentionMemory};
use sas_core::encoder::encode_batch;
use sas_core::eval::{bleu, cider_d, evaluate, meteor_exact, rouge_l, EvalOutput, MetricReport, TemplateTranscriber};
use sas_core::losses::LossWeights;
use sas_core::model::{batch_loss, ModelConfig, SasModel};
use sas_core::trainer::{checkpoint_path, fit, learning_rate, teacher_forcing_ratio, TrainConfig};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg()) }
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("SAS_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome); 7] = [
        (1, "gradient check", gradient_suite),
        (2, "loss identities", loss_identities),
        (3, "schedules", schedule_suite),
        (4, "metric oracles", metric_suite),
        (5, "desk-scale end-to-end", end_to_end),
        (6, "ablation runs", ablations),
        (7, "audio suite", audio_suite),
    ];
    let mut failed = 0;
    for (n, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1}s] {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- helpers

fn micro_items(rng: &mut ChaCha8Rng, n: usize, regions: usize, dim: usize, classes: usize) -> Vec<Arc<RegionFeatureSet>> {
    (0..n)
        .map(|i| {
            Arc::new(RegionFeatureSet {
                image_id: format!("im{i}"),
                f: Array2::from_shape_fn((regions, dim), |_| rng.random_range(-1.0..1.0)),
                p: Array2::from_shape_fn((regions, 5), |_| rng.random_range(0.0..1.0)),
                c: (0..regions).map(|_| rng.random_range(0..classes as u16)).collect(),
                s: (0..regions).map(|_| rng.random_range(0.1..1.0)).collect(),
            })
        })
        .collect()
}

/// Batch of micro examples with the given lengths; log-mels sit near the floor.
fn micro_batch(seed: u64, lengths: &[usize], same_image: bool) -> TrainingBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = micro_items(&mut rng, lengths.len(), 3, 6, 5);
    let examples: Vec<Example> = lengths
        .iter()
        .enumerate()
        .map(|(i, &len)| {
            let src = if same_image { 0 } else { i };
            Example {
                image_id: items[src].image_id.clone(),
                features: Arc::clone(&items[src]),
                tokens: vec![],
                mel: Arc::new(Array2::from_shape_fn((len, 4), |_| rng.random_range(-1.5..0.5))),
            }
        })
        .collect();
    let refs: Vec<&Example> = examples.iter().collect();
    TrainingBatch::from_examples(&refs)
}

fn loss_value(model: &SasModel<f64>, batch: &TrainingBatch, weights: &LossWeights, mask: &Array2<bool>) -> f64 {
    let mut tape = Tape::new(&model.store);
    let fwd = batch_loss(&mut tape, model, batch, weights, mask, None).expect("forward");
    tape.scalar(fwd.losses.total)
}

// ------------------------------------------------------------- criterion 1

fn gradient_suite() -> Outcome {
    let mut model = SasModel::<f64>::new(ModelConfig::micro(6, 5), 11).map_err(|e| e.to_string())?;
    // Zero-initialized biases put ReLU pre-activations of the go frame exactly
    // on the kink; check at a jittered point instead.
    let mut jitter = ChaCha8Rng::seed_from_u64(12);
    for id in model.store.ids().collect::<Vec<_>>() {
        model.store.get_mut(id).mapv_inplace(|v| v + jitter.random_range(-0.1..0.1));
    }
    let batch = micro_batch(5, &[5, 3], false);
    let weights = LossWeights::default();
    // mixed feeding so fed-back predictions are differentiated too
    let mask = Array2::from_shape_vec((2, 5), vec![true, false, true, false, true, true, true, false, true, true]).unwrap();

    let mut tape = Tape::new(&model.store);
    let fwd = batch_loss(&mut tape, &model, &batch, &weights, &mask, None).map_err(|e| e.to_string())?;
    let grads = tape.backward(fwd.losses.total);
    drop(tape);

    let h = 2e-4;
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    let mut probe = model.clone();
    for id in model.store.ids() {
        let name = model.store.name(id).to_string();
        let shape = model.store.get(id).dim();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = model.store.get(id)[[r, c]];
                let mut at = |delta: f64| {
                    probe.store.get_mut(id)[[r, c]] = orig + delta;
                    loss_value(&probe, &batch, &weights, &mask)
                };
                // fourth-order central difference
                let numeric = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
                probe.store.get_mut(id)[[r, c]] = orig;
                let analytic = grads.get(id).map_or(0.0, |g| g[[r, c]]);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                if std::env::var("SAS_GRAD_DEBUG").is_ok() && rel > 1e-4 {
                    eprintln!("{name}[{r},{c}] a {analytic:.4e} n {numeric:.4e} rel {rel:.2e}");
                }
                if rel > worst.0 {
                    worst = (rel, format!("{name}[{r},{c}] analytic {analytic:.3e} numeric {numeric:.3e}"));
                }
                checked += 1;
            }
        }
    }
    let detail = format!(
        "{checked} scalars in {} tensors, worst rel err {:.2e} at {}",
        model.store.len(),
        worst.0,
        worst.1
    );
    ensure(worst.0 < 1e-4, || detail.clone())?;
    Ok(detail)
}

// ------------------------------------------------------------- criterion 2

fn loss_identities() -> Outcome {
    let model = SasModel::<f64>::new(ModelConfig::micro(6, 5), 3).map_err(|e| e.to_string())?;
    let batch = micro_batch(9, &[5, 3, 4], false);
    let mask = Array2::from_elem((3, 5), true);
    let e = |x: sas_core::SasError| x.to_string();

    // lambda = 0 reduces the objective to the spectrogram and stop terms
    let no_ec = LossWeights { lambda_ec: 0.0, ..Default::default() };
    let mut tape = Tape::new(&model.store);
    let l = batch_loss(&mut tape, &model, &batch, &no_ec, &mask, None).map_err(e)?.losses.breakdown(&tape);
    ensure(l.total == l.l_s + l.l_st, || format!("lambda 0: total {} vs {}", l.total, l.l_s + l.l_st))?;
    ensure(l.l_ec > 0.0, || "embedder not evaluated at lambda 0".into())?;

    // one-item batch has no negatives
    let single = micro_batch(9, &[4], false);
    let mut tape = Tape::new(&model.store);
    let one = batch_loss(&mut tape, &model, &single, &LossWeights::default(), &Array2::from_elem((1, 4), true), None)
        .map_err(e)?
        .losses
        .breakdown(&tape);
    ensure(one.l_ec.abs() < 1e-12, || format!("B = 1 MMS {}", one.l_ec))?;

    // padding frames never reach the loss
    let base = loss_value(&model, &batch, &LossWeights::default(), &mask);
    let mut noisy = batch.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (item, &len) in batch.lengths.iter().enumerate() {
        for t in len..batch.t_max {
            for m in 0..4 {
                noisy.targets[[item * batch.t_max + t, m]] = rng.random_range(-50.0..50.0);
            }
        }
    }
    let masked = loss_value(&model, &noisy, &LossWeights::default(), &mask);
    ensure((masked - base).abs() < 1e-6, || format!("padding changed loss {base} → {masked}"))?;

    // zero post-net parameters give the identity
    let mut zeroed = model.clone();
    for layer in &model.ids.decoder.postnet {
        zeroed.store.get_mut(layer.w).fill(0.0);
        zeroed.store.get_mut(layer.b).fill(0.0);
    }
    let mut tape = Tape::new(&zeroed.store);
    let x = tape.constant(Array2::from_shape_fn((10, 4), |(i, j)| (i * 4 + j) as f64 * 0.1 - 2.0));
    let y = postnet_refine(&mut tape, &zeroed.ids.decoder, &zeroed.config.decoder, x, &[5, 3], 5);
    let gap = (tape.value(y) - tape.value(x)).iter().fold(0.0f64, |a, v| a.max(v.abs()));
    ensure(gap == 0.0, || format!("post-net identity off by {gap}"))?;

    // attention stays on the simplex for 50 free-running steps
    let items = micro_items(&mut ChaCha8Rng::seed_from_u64(2), 2, 3, 6, 5);
    let refs: Vec<&RegionFeatureSet> = items.iter().map(|a| a.as_ref()).collect();
    let mut tape = Tape::inference(&model.store);
    let enc = encode_batch(&mut tape, &model.ids.encoder, &model.config.encoder, &refs).map_err(e)?;
    let mem = AttentionMemory::new(&mut tape, &model.ids.decoder, enc.seq, enc.batch);
    let out = infer_greedy(&mut tape, &model.ids.decoder, &model.config.decoder, &mem, 50, true).map_err(e)?;
    let mut worst = 0.0f32;
    for a in &out.alignments {
        ensure(a.nrows() == 50, || format!("unroll produced {} steps", a.nrows()))?;
        ensure(a.iter().all(|&w| w >= 0.0), || "negative attention weight".into())?;
        for row in a.rows() {
            worst = worst.max((row.sum() - 1.0).abs());
        }
    }
    ensure(worst < 1e-6, || format!("attention row sums off by {worst}"))?;
    Ok(format!("lambda-0 exact, B=1 MMS 0, padding Δ {:.1e}, post-net identity exact, simplex err {worst:.1e}", (masked - base).abs()))
}

// ------------------------------------------------------------- criterion 3

fn schedule_suite() -> Outcome {
    let cfg = TrainConfig::default();
    ensure(learning_rate(4000, &cfg) == 2e-3, || format!("lr(4000) = {}", learning_rate(4000, &cfg)))?;
    let mut prev = f64::INFINITY;
    let mut floor = f64::INFINITY;
    for it in 0..=60_000 {
        let r = teacher_forcing_ratio(it, &cfg);
        ensure(r <= prev, || format!("teacher forcing rose at {it}"))?;
        prev = r;
        floor = floor.min(r);
    }
    ensure(floor == 97.5, || format!("floor {floor}"))?;
    let fixed = TrainConfig { eps_min: 100.0, ..cfg };
    ensure((0..=60_000).all(|it| teacher_forcing_ratio(it, &fixed) == 100.0), || "eps_min 100 not constant".into())?;
    Ok("lr(4000) = 2e-3, ratio monotone to floor 97.5, constant at eps_min 100".into())
}

// ------------------------------------------------------------- criterion 4

fn metric_suite() -> Outcome {
    let golden: serde_json::Value =
        serde_json::from_str(include_str!("data/golden_metrics.json")).map_err(|e| e.to_string())?;
    let split = |s: &serde_json::Value| -> Vec<String> { s.as_str().unwrap().split_whitespace().map(String::from).collect() };
    let items = golden["items"].as_array().unwrap();
    let cands: Vec<Vec<String>> = items.iter().map(|i| split(&i["candidate"])).collect();
    let refs: Vec<Vec<Vec<String>>> = items
        .iter()
        .map(|i| i["references"].as_array().unwrap().iter().map(split).collect())
        .collect();
    let e = |x: sas_core::SasError| x.to_string();
    let b = bleu(&cands, &refs, 4).map_err(e)?;
    let ours = [b[0], b[1], b[2], b[3], meteor_exact(&cands, &refs).map_err(e)?, rouge_l(&cands, &refs, 1.2).map_err(e)?, cider_d(&cands, &refs).map_err(e)?];
    let mut worst = 0.0f64;
    for (key, v) in MetricReport::HEADER.iter().zip(ours) {
        let want = golden["scores"][key].as_f64().unwrap();
        ensure((v - want).abs() < 1e-6, || format!("{key}: {v} vs oracle {want}"))?;
        worst = worst.max((v - want).abs());
    }

    let vocab = ["a", "dog", "cat", "runs", "on", "grass", "ball", "red"];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let sent = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let n = rng.random_range(4..10);
        (0..n).map(|_| vocab[rng.random_range(0..vocab.len())].to_string()).collect()
    };
    for corpus in 0..100 {
        let n = rng.random_range(5..15);
        let c: Vec<Vec<String>> = (0..n).map(|_| sent(&mut rng)).collect();
        let r: Vec<Vec<Vec<String>>> = (0..n).map(|_| (0..rng.random_range(1..4)).map(|_| sent(&mut rng)).collect()).collect();
        let b = bleu(&c, &r, 4).map_err(e)?;
        ensure(b[0] >= b[1] && b[1] >= b[2] && b[2] >= b[3], || format!("corpus {corpus}: BLEU not ordered {b:?}"))?;
    }
    Ok(format!("golden max |Δ| {worst:.1e}; BLEU ordered on 100 random corpora"))
}

// ------------------------------------------------------- criteria 5 and 6

const DESK_CONFIG: &str = include_str!("../../../configs/desk.toml");
const ABLATION_CONFIG: &str = include_str!("../../../configs/ablation.toml");

// The grid variant draws from the same generator stream, so it is emitted to
// reproduce `sas gen-corpus --seed 1 --grid` exactly.
fn desk_corpus(dir: &Path) -> Result<CorpusData, String> {
    let gen = GeneratorConfig {
        seed: 1,
        vocab_size: 20,
        n_images: 500,
        noise_std: 0.0,
        emit_grid_variant: true,
        ..Default::default()
    };
    generate_synthetic_corpus(&gen, dir).map_err(|e| e.to_string())?;
    CorpusData::load(&dir.join("manifest.json"), FeatureMode::BottomUp).map_err(|e| e.to_string())
}

fn score(ckpt: &Path, data: &CorpusData) -> Result<MetricReport, String> {
    Ok(synthesize_split(ckpt, data)?.report)
}

fn synthesize_split(ckpt: &Path, data: &CorpusData) -> Result<EvalOutput, String> {
    let ck = load_checkpoint(ckpt).map_err(|e| e.to_string())?;
    let model = ck.model().map_err(|e| e.to_string())?;
    let transcriber = TemplateTranscriber::new(data.manifest.signature_bank().map_err(|e| e.to_string())?);
    evaluate(&model, data, "test", &transcriber, &ck.config.audio, 25).map_err(|e| e.to_string())
}

/// Share of test items whose emitted length is within `k` frames of the
/// closest reference rendering.
fn length_hit_rate(out: &EvalOutput, data: &CorpusData, k: usize) -> Result<f64, String> {
    let examples = data.examples("test").map_err(|e| e.to_string())?;
    let hits = out
        .per_image
        .iter()
        .filter(|item| {
            examples
                .iter()
                .filter(|e| e.image_id == item.image_id)
                .any(|e| e.mel.nrows().abs_diff(item.n_frames) <= k)
        })
        .count();
    Ok(hits as f64 / out.per_image.len() as f64)
}

fn end_to_end() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = desk_corpus(&tmp.path().join("corpus"))?;
    let cfg = RunConfig::from_toml_str(DESK_CONFIG).map_err(|e| e.to_string())?;
    let run = tmp.path().join("run");
    let summary = fit(&data, &cfg, &run, None).map_err(|e| e.to_string())?;
    let untrained = score(&checkpoint_path(&run, 0), &data)?;
    let synth = synthesize_split(&summary.final_checkpoint, &data)?;
    let trained = synth.report.clone();
    println!("  {:>10}{}", "", MetricReport::header_line());
    println!("  {:>10}{}", "untrained", untrained.row_line());
    println!("  {:>10}{}", "trained", trained.row_line());
    let k = data.manifest.frames_per_token;
    let length_rate = length_hit_rate(&synth, &data, k)?;
    let dev = &summary.dev_history;
    let (dev0, dev_end) = (dev[0].losses.l_s, dev[dev.len() - 1].losses.l_s);
    let detail = format!(
        "{} iters, B1 {:.1}, C {:.2}, length within ±{k} frames {:.0}%, dev L_s {dev0:.3} -> {dev_end:.3}",
        summary.final_iter,
        trained.b1,
        trained.c,
        100.0 * length_rate
    );
    ensure(dev_end < dev0, || format!("{detail}: dev L_s did not drop"))?;
    ensure(length_rate >= 0.8, || format!("{detail}: too few items end near the reference length"))?;
    ensure(trained.b1 >= 60.0, || format!("{detail}: B1 below 60"))?;
    ensure(trained.c >= 3.0, || format!("{detail}: CIDEr-D below 3"))?;
    for ((name, t), u) in MetricReport::HEADER.iter().zip(trained.values()).zip(untrained.values()) {
        ensure(t > u, || format!("{detail}: {name} {t:.2} does not beat untrained {u:.2}"))?;
    }
    Ok(detail)
}

fn valid_report(r: &MetricReport) -> bool {
    let v = r.values();
    v[..6].iter().all(|x| x.is_finite() && (0.0..=100.0).contains(x)) && v[6].is_finite() && (0.0..=10.0).contains(&v[6])
}

fn ablations() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = desk_corpus(&tmp.path().join("corpus"))?;
    let base = RunConfig::from_toml_str(ABLATION_CONFIG).map_err(|e| e.to_string())?;
    let variants: [(&str, &[&str]); 3] = [
        ("full", &[]),
        ("no-ec", &["losses.lambda_ec=0"]),
        ("eps-100", &["trainer.eps_min=100"]),
    ];
    let seeds = [1u64, 2, 3];
    let mut means = Vec::new();
    println!("  {:>10}{:>6}{}", "variant", "seed", MetricReport::header_line());
    for (name, ov) in variants {
        let mut sum = [0.0; 7];
        for seed in seeds {
            let mut overrides: Vec<String> = ov.iter().map(|s| s.to_string()).collect();
            overrides.push(format!("trainer.seed={seed}"));
            let cfg = base.with_overrides(&overrides).map_err(|e| e.to_string())?;
            let run = tmp.path().join(format!("{name}_{seed}"));
            let summary = fit(&data, &cfg, &run, None).map_err(|e| format!("{name} seed {seed}: {e}"))?;
            let report = score(&summary.final_checkpoint, &data)?;
            ensure(valid_report(&report), || format!("{name} seed {seed}: invalid report {report:?}"))?;
            println!("  {name:>10}{seed:>6}{}", report.row_line());
            for (s, v) in sum.iter_mut().zip(report.values()) {
                *s += v / seeds.len() as f64;
            }
        }
        println!("  {name:>10}{:>6}{}", "mean", sum.iter().map(|v| format!("{v:>7.1}")).collect::<String>());
        means.push(sum);
    }
    let ec_gap = means[0][6] - means[1][6];
    let ss_gap = means[0][3] - means[2][3];
    let verdict = |gap: f64| if gap > 0.0 { "as expected" } else { "reversed or tied" };
    Ok(format!(
        "9 runs completed; EC effect on CIDEr-D {ec_gap:+.3} ({}), eps 97.5 vs 100 on B4 {ss_gap:+.2} ({}); directions are evidence only",
        verdict(ec_gap),
        verdict(ss_gap)
    ))
}

// ------------------------------------------------------------- criterion 7

fn sine(freq: f64, secs: f64, amp: f64, cfg: &AudioConfig) -> Waveform {
    let n = (secs * cfg.sample_rate as f64) as usize;
    let sr = cfg.sample_rate as f64;
    Waveform::new((0..n).map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr).sin()) as f32).collect(), cfg.sample_rate)
}

fn audio_suite() -> Outcome {
    let cfg = AudioConfig::default();
    let e = |x: sas_core::SasError| x.to_string();
    let floor = cfg.log_floor.ln() as f32;

    let silence = waveform_to_logmel(&Waveform::new(vec![0.0; 8000], cfg.sample_rate), &cfg).map_err(e)?;
    ensure(silence.frames.iter().all(|&v| v == floor), || "silence is not at the floor".into())?;

    let wave = sine(440.0, 0.5, 0.3, &cfg);
    let base = waveform_to_logmel(&wave, &cfg).map_err(e)?;
    let mut shift_err = 0.0f64;
    for a in [0.5f64, 2.0] {
        let scaled = Waveform::new(wave.samples.iter().map(|&s| (s as f64 * a) as f32).collect(), cfg.sample_rate);
        let m = waveform_to_logmel(&scaled, &cfg).map_err(e)?;
        for (x, y) in base.frames.iter().zip(m.frames.iter()) {
            if *x > floor + 2.0 && *y > floor + 2.0 {
                shift_err = shift_err.max(((y - x) as f64 - a.ln()).abs());
            }
        }
    }
    ensure(shift_err < 1e-4, || format!("scaling shift error {shift_err}"))?;

    let rebuilt = griffin_lim(&base, &cfg).map_err(e)?;
    let again = waveform_to_logmel(&rebuilt, &cfg).map_err(e)?;
    let t = base.n_frames().min(again.n_frames());
    let mut errs: Vec<f64> = (0..t)
        .map(|i| {
            let d = &base.frames.slice(s![i, ..]) - &again.frames.slice(s![i, ..]);
            d.iter().map(|v| v.abs() as f64).sum::<f64>() / d.len() as f64
        })
        .collect();
    errs.sort_by(f64::total_cmp);
    let median = errs[errs.len() / 2];
    let (mut sig, mut noise) = (0.0f64, 0.0f64);
    for i in 0..t {
        for m in 0..cfg.n_mels {
            let x = (base.frames[[i, m]] as f64).exp();
            let y = (again.frames[[i, m]] as f64).exp();
            sig += x * x;
            noise += (x - y) * (x - y);
        }
    }
    let snr = 10.0 * (sig / noise).log10();
    ensure(median < 0.5, || format!("round-trip median log-mel error {median}"))?;

    for len in [1usize, 199, 200, 201, 16_000, 16_123] {
        let padded = len + cfg.fft_size;
        let mut windows = 0;
        let mut start = 0;
        while start + cfg.fft_size <= padded {
            windows += 1;
            start += cfg.hop_length;
        }
        ensure(frame_count(len, &cfg) == windows, || format!("frame count for {len}: {} vs {windows}", frame_count(len, &cfg)))?;
        let w = waveform_to_logmel(&Waveform::new(vec![0.1; len], cfg.sample_rate), &cfg).map_err(e)?;
        ensure(w.n_frames() == windows, || format!("analysis produced {} frames for {len}", w.n_frames()))?;
    }
    Ok(format!("scaling shift err {shift_err:.1e}, Griffin-Lim median log-mel err {median:.3} nats, mel SNR {snr:.1} dB"))
}
