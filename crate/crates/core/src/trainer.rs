//! Optimization loop: schedules, Adam with global-norm clipping, scheduled
//! sampling, logging and checkpointing.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::corpus::{CorpusData, Example, FeatureMode, TrainingBatch};
use crate::error::{Result, SasError};
use crate::losses::LossBreakdown;
use crate::model::{batch_loss, SasModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_iters: u64,
    pub decay_gamma: f64,
    /// Minimum teacher-forcing percentage.
    pub eps_min: f64,
    pub ss_k: f64,
    pub max_iters: u64,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub feature_mode: FeatureMode,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub checkpoint_interval: u64,
    pub eval_interval: u64,
    /// Upper bound on dev batches per evaluation (0 = whole split).
    pub dev_max_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 2e-3,
            warmup_iters: 4000,
            decay_gamma: 0.99995,
            eps_min: 97.5,
            ss_k: 2000.0,
            max_iters: 30_000,
            batch_size: 16,
            grad_clip_norm: 1.0,
            seed: 1,
            feature_mode: FeatureMode::BottomUp,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_interval: 1000,
            eval_interval: 500,
            dev_max_batches: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(SasError::Config(m));
        if !(self.eps_min > 0.0 && self.eps_min <= 100.0) {
            return err(format!("eps_min {} outside (0, 100]", self.eps_min));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return err("peak_lr must be positive".into());
        }
        if !(self.decay_gamma > 0.0 && self.decay_gamma <= 1.0) {
            return err("decay_gamma must be in (0, 1]".into());
        }
        if !(self.ss_k > 0.0 && self.ss_k.is_finite()) {
            return err("ss_k must be positive".into());
        }
        if self.batch_size == 0 {
            return err("batch_size must be ≥ 1".into());
        }
        if !(self.grad_clip_norm > 0.0) {
            return err("grad_clip_norm must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return err("Adam betas must be in [0, 1) and eps positive".into());
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr`, then exponential decay.
pub fn learning_rate(iter: u64, cfg: &TrainConfig) -> f64 {
    if iter < cfg.warmup_iters {
        cfg.peak_lr * iter as f64 / cfg.warmup_iters as f64
    } else {
        cfg.peak_lr * cfg.decay_gamma.powf((iter - cfg.warmup_iters) as f64)
    }
}

/// Percentage of ground-truth decoder inputs: inverse-sigmoid decay with a floor.
pub fn teacher_forcing_ratio(iter: u64, cfg: &TrainConfig) -> f64 {
    let k = cfg.ss_k;
    let raw = 100.0 * k / (k + (iter as f64 / k).exp());
    raw.max(cfg.eps_min).min(100.0)
}

/// Independent per-item, per-step Bernoulli draws; true feeds ground truth.
pub fn sample_feed_mask(batch: usize, t_max: usize, ratio_percent: f64, rng: &mut impl Rng) -> Array2<bool> {
    let p = ratio_percent / 100.0;
    if p >= 1.0 {
        return Array2::from_elem((batch, t_max), true);
    }
    Array2::from_shape_fn((batch, t_max), |_| rng.random::<f64>() < p)
}

fn iteration_rng(seed: u64, iter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_696e_5f73_7465);
    rng.set_stream(iter);
    rng
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Array2<f32>>,
    pub v: Vec<Array2<f32>>,
}

impl AdamState {
    pub fn zeros_like(model: &SasModel<f32>) -> Self {
        let zeros: Vec<_> = model.store.ids().map(|id| Array2::zeros(model.store.get(id).dim())).collect();
        Self { m: zeros.clone(), v: zeros }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: SasModel<f32>,
    pub adam: AdamState,
    /// Number of completed updates.
    pub iter: u64,
}

impl TrainState {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let model = SasModel::new(cfg.model(), cfg.trainer.seed)?;
        let adam = AdamState::zeros_like(&model);
        Ok(Self { model, adam, iter: 0 })
    }

    pub fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        Checkpoint {
            iter: self.iter,
            config: cfg.clone(),
            params: self.model.store.clone(),
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self {
            model: ckpt.model()?,
            adam: AdamState {
                m: ckpt.adam_m.clone(),
                v: ckpt.adam_v.clone(),
            },
            iter: ckpt.iter,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: u64,
    pub lr: f64,
    pub tf_ratio: f64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

/// One optimization step numbered `state.iter + 1`.
pub fn train_step(state: &mut TrainState, batch: &TrainingBatch, cfg: &RunConfig) -> Result<LogRecord> {
    let tc = &cfg.trainer;
    let iter = state.iter + 1;
    let lr = learning_rate(iter, tc);
    let ratio = teacher_forcing_ratio(iter, tc);
    let mut rng = iteration_rng(tc.seed, iter);
    let mask = sample_feed_mask(batch.len(), batch.t_max, ratio, &mut rng);
    let dropout = (cfg.decoder.prenet_dropout > 0.0).then_some(&mut rng);

    let (losses, mut grads) = {
        let mut tape = Tape::new(&state.model.store);
        let fwd = batch_loss(&mut tape, &state.model, batch, &cfg.losses, &mask, dropout)?;
        tape.check_finite(fwd.losses.total, "training loss")?;
        let grads = tape.backward(fwd.losses.total);
        (fwd.losses.breakdown(&tape), grads)
    };
    if !grads.all_finite() {
        return Err(SasError::Numerical(format!("non-finite gradient at iteration {iter}")));
    }
    let norm = grads.global_norm();
    if norm > tc.grad_clip_norm {
        grads.scale((tc.grad_clip_norm / norm) as f32);
    }

    let (b1, b2) = (tc.adam_beta1, tc.adam_beta2);
    let c1 = 1.0 - b1.powf(iter as f64);
    let c2 = 1.0 - b2.powf(iter as f64);
    let step = (lr / c1) as f32;
    let c2 = c2 as f32;
    let (b1, b2, eps) = (b1 as f32, b2 as f32, tc.adam_eps as f32);
    for id in state.model.store.ids().collect::<Vec<_>>() {
        let m = &mut state.adam.m[id.0];
        let v = &mut state.adam.v[id.0];
        let p = state.model.store.get_mut(id);
        match grads.get(id) {
            Some(g) => ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / ((*v / c2).sqrt() + eps);
            }),
            None => ndarray::Zip::from(p).and(m).and(v).for_each(|p, m, v| {
                *m *= b1;
                *v *= b2;
                *p -= step * *m / ((*v / c2).sqrt() + eps);
            }),
        }
    }
    state.iter = iter;
    Ok(LogRecord { iter, lr, tf_ratio: ratio, losses })
}

/// Mean teacher-forced loss over a split without dropout.
pub fn evaluate_loss(model: &SasModel<f32>, data: &CorpusData, split: &str, cfg: &RunConfig) -> Result<LossBreakdown> {
    let examples = data.examples(split)?;
    if examples.is_empty() {
        return Err(SasError::Input(format!("split {split} is empty")));
    }
    let mut sum = LossBreakdown { l_s: 0.0, l_st: 0.0, l_ec: 0.0, total: 0.0 };
    let mut count = 0.0;
    for (i, chunk) in examples.chunks(cfg.trainer.batch_size).enumerate() {
        if cfg.trainer.dev_max_batches > 0 && i >= cfg.trainer.dev_max_batches {
            break;
        }
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = TrainingBatch::from_examples(&refs);
        let mask = Array2::from_elem((batch.len(), batch.t_max), true);
        let mut tape = Tape::inference(&model.store);
        let fwd = batch_loss(&mut tape, model, &batch, &cfg.losses, &mask, None)?;
        let b = fwd.losses.breakdown(&tape);
        let w = batch.len() as f64;
        sum.l_s += w * b.l_s;
        sum.l_st += w * b.l_st;
        sum.l_ec += w * b.l_ec;
        sum.total += w * b.total;
        count += w;
    }
    Ok(LossBreakdown {
        l_s: sum.l_s / count,
        l_st: sum.l_st / count,
        l_ec: sum.l_ec / count,
        total: sum.total / count,
    })
}

/// Deterministic batch schedule: each epoch reshuffles the training captions
/// with a seed derived from the run seed and the epoch number.
pub struct BatchSchedule {
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: Option<u64>,
    order: Vec<usize>,
}

impl BatchSchedule {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        Self { n, batch_size, seed, epoch: None, order: Vec::new() }
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.n.div_ceil(self.batch_size) as u64
    }

    /// Example indices for 1-based iteration `iter`.
    pub fn indices(&mut self, iter: u64) -> &[usize] {
        let per_epoch = self.batches_per_epoch();
        let epoch = (iter - 1) / per_epoch;
        if self.epoch != Some(epoch) {
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch));
            self.epoch = Some(epoch);
        }
        let start = ((iter - 1) % per_epoch) as usize * self.batch_size;
        &self.order[start..(start + self.batch_size).min(self.n)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DevRecord {
    pub iter: u64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct FitSummary {
    pub final_checkpoint: PathBuf,
    pub final_iter: u64,
    pub train_log: PathBuf,
    pub dev_log: PathBuf,
    pub dev_history: Vec<DevRecord>,
}

pub fn checkpoint_path(out_dir: &Path, iter: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("ckpt_{iter:07}.sasckpt"))
}

/// Keeps only records with `iter ≤ upto`, so a resumed run continues a clean log.
fn truncate_log(path: &Path, upto: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = File::open(path).map_err(|e| SasError::io(path, e))?;
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| SasError::io(path, e))?;
        let iter = serde_json::from_str::<serde_json::Value>(&line)
            .ok()
            .and_then(|v| v.get("iter").and_then(|i| i.as_u64()));
        if matches!(iter, Some(i) if i <= upto) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| SasError::io(path, e))
}

fn append_line<S: Serialize>(file: &mut File, path: &Path, record: &S) -> Result<()> {
    let line = serde_json::to_string(record).expect("record serializes");
    writeln!(file, "{line}").map_err(|e| SasError::io(path, e))
}

/// Trains for `trainer.max_iters` updates, writing checkpoints and logs to
/// `out_dir`. With `resume`, continues from that checkpoint's state.
pub fn fit(data: &CorpusData, cfg: &RunConfig, out_dir: &Path, resume: Option<&Path>) -> Result<FitSummary> {
    cfg.validate()?;
    if data.mode != cfg.trainer.feature_mode {
        return Err(SasError::Config(format!(
            "corpus loaded with {} features but trainer.feature_mode is {}",
            data.mode, cfg.trainer.feature_mode
        )));
    }
    let train = data.examples("train")?;
    data.examples("dev")?;
    if train.is_empty() {
        return Err(SasError::Input("train split is empty".into()));
    }
    let ckpt_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| SasError::io(&ckpt_dir, e))?;
    let train_log = out_dir.join("train_log.jsonl");
    let dev_log = out_dir.join("dev_log.jsonl");

    let mut state = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            ckpt.check_compatible(cfg)?;
            truncate_log(&train_log, ckpt.iter)?;
            truncate_log(&dev_log, ckpt.iter)?;
            TrainState::from_checkpoint(&ckpt)?
        }
        None => {
            for p in [&train_log, &dev_log] {
                if p.exists() {
                    fs::remove_file(p).map_err(|e| SasError::io(p, e))?;
                }
            }
            TrainState::new(cfg)?
        }
    };
    let open = |p: &Path| OpenOptions::new().create(true).append(true).open(p).map_err(|e| SasError::io(p, e));
    let mut train_file = open(&train_log)?;
    let mut dev_file = open(&dev_log)?;
    let mut dev_history = Vec::new();

    let mut dev_eval = |state: &TrainState, dev_file: &mut File| -> Result<()> {
        if data.examples("dev")?.is_empty() {
            return Ok(());
        }
        let losses = evaluate_loss(&state.model, data, "dev", cfg)?;
        let rec = DevRecord { iter: state.iter, losses };
        tracing::info!(iter = state.iter, dev_l_s = losses.l_s, dev_total = losses.total, "dev loss");
        append_line(dev_file, &dev_log, &rec)?;
        dev_history.push(rec);
        Ok(())
    };

    if resume.is_none() {
        save_checkpoint(&state.checkpoint(cfg), &checkpoint_path(out_dir, 0))?;
        if cfg.trainer.max_iters > 0 {
            dev_eval(&state, &mut dev_file)?;
        }
    }

    let mut schedule = BatchSchedule::new(train.len(), cfg.trainer.batch_size, cfg.trainer.seed);
    let tc = &cfg.trainer;
    while state.iter < tc.max_iters {
        let idx = schedule.indices(state.iter + 1).to_vec();
        let items: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
        let batch = TrainingBatch::from_examples(&items);
        let rec = train_step(&mut state, &batch, cfg)?;
        append_line(&mut train_file, &train_log, &rec)?;
        if rec.iter % 50 == 0 {
            tracing::info!(iter = rec.iter, lr = rec.lr, total = rec.losses.total, l_s = rec.losses.l_s, "train");
        }
        let last = state.iter == tc.max_iters;
        if tc.eval_interval > 0 && (state.iter % tc.eval_interval == 0 || last) {
            dev_eval(&state, &mut dev_file)?;
        }
        if (tc.checkpoint_interval > 0 && state.iter % tc.checkpoint_interval == 0) || last {
            save_checkpoint(&state.checkpoint(cfg), &checkpoint_path(out_dir, state.iter))?;
        }
    }
    train_file.flush().map_err(|e| SasError::io(&train_log, e))?;
    let final_checkpoint = checkpoint_path(out_dir, state.iter);
    if !final_checkpoint.exists() {
        save_checkpoint(&state.checkpoint(cfg), &final_checkpoint)?;
    }
    Ok(FitSummary {
        final_checkpoint,
        final_iter: state.iter,
        train_log,
        dev_log,
        dev_history,
    })
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| SasError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| SasError::format("train_log", e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(learning_rate(4000, &cfg), 2e-3);
        assert!((learning_rate(2000, &cfg) - 1e-3).abs() < 1e-18);
        assert_eq!(learning_rate(0, &cfg), 0.0);
        let mut expected = 2e-3;
        for n in 1..=500u64 {
            expected *= cfg.decay_gamma;
            let got = learning_rate(4000 + n, &cfg);
            assert!((got - expected).abs() <= 1e-12 * expected, "n={n}");
        }
        let below = learning_rate(3999, &cfg);
        assert!((learning_rate(4000, &cfg) - below) < 1e-6);
    }

    #[test]
    fn teacher_forcing_schedule() {
        let cfg = TrainConfig::default();
        assert!((teacher_forcing_ratio(0, &cfg) - 100.0).abs() < 0.1);
        assert_eq!(teacher_forcing_ratio(1_000_000, &cfg), 97.5);
        let mut prev = f64::INFINITY;
        for it in (0..60_000).step_by(7) {
            let r = teacher_forcing_ratio(it, &cfg);
            assert!(r <= prev && r >= 97.5);
            prev = r;
        }
        let pure = TrainConfig { eps_min: 100.0, ..Default::default() };
        assert!((0..50_000).step_by(97).all(|it| teacher_forcing_ratio(it, &pure) == 100.0));
    }

    #[test]
    fn floor_crossover_matches_linear_scan() {
        let cfg = TrainConfig::default();
        let k = cfg.ss_k;
        let closed = k * (k * (100.0 / cfg.eps_min - 1.0)).ln();
        let scan = (0u64..).find(|&i| 100.0 * k / (k + (i as f64 / k).exp()) < cfg.eps_min).unwrap();
        assert_eq!(scan, closed.floor() as u64 + 1);
        assert_eq!(teacher_forcing_ratio(scan, &cfg), 97.5);
        assert!(teacher_forcing_ratio(scan - 1, &cfg) > 97.5);
    }

    #[test]
    fn feed_mask_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_feed_mask(3, 5, 100.0, &mut rng).iter().all(|&b| b));
        let m = sample_feed_mask(100, 100, 90.0, &mut rng);
        let frac = m.iter().filter(|&&b| b).count() as f64 / 10_000.0;
        assert!((frac - 0.9).abs() < 0.02);
    }

    #[test]
    fn batch_schedule_covers_each_epoch() {
        let mut s = BatchSchedule::new(10, 4, 3);
        assert_eq!(s.batches_per_epoch(), 3);
        let mut seen: Vec<usize> = (1..=3).flat_map(|i| s.indices(i).to_vec()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let again = BatchSchedule::new(10, 4, 3).indices(5).to_vec();
        assert_eq!(s.indices(5), again.as_slice());
    }
}
