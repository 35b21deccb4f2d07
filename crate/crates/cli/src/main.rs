use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sas_core::audio::{griffin_lim, write_wav, MelSpectrogram};
use sas_core::checkpoint::load_checkpoint;
use sas_core::config::RunConfig;
use sas_core::corpus::{generate_synthetic_corpus, load_region_features, CorpusData, GeneratorConfig};
use sas_core::decoder::{write_alignment, AlignmentHeader};
use sas_core::eval::{evaluate, EvalOutput, MetricReport, OracleTranscriber, TemplateTranscriber, Transcriber};
use sas_core::model::{synthesize, SasModel};
use sas_core::trainer::fit;
use sas_core::SasError;
use tracing_subscriber::EnvFilter;

#[derive(Parser, Debug)]
#[command(name = "sas", version, about = "Image-to-speech synthesis toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic image/speech corpus.
    GenCorpus(GenCorpusArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Synthesize speech for region feature files.
    Synthesize(SynthesizeArgs),
    /// Synthesize, transcribe and score a corpus split.
    Evaluate(EvaluateArgs),
    /// Train and evaluate once per value of one config key.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct GenCorpusArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    vocab_size: usize,
    #[arg(long, default_value_t = 500)]
    images: usize,
    #[arg(long, default_value_t = 3)]
    captions_per_image: usize,
    #[arg(long, default_value_t = 8)]
    frames_per_token: usize,
    #[arg(long, default_value_t = 0.0)]
    noise_std: f64,
    /// Also write the 6×6 grid feature variant.
    #[arg(long)]
    grid: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus manifest or the directory holding manifest.json.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// `section.key=value`, repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct SynthesizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A region feature file or a directory of them.
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    max_frames: Option<usize>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
    /// Transcribe each image as its first reference caption.
    #[arg(long)]
    oracle: bool,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Config key to vary, e.g. `trainer.eps_min`.
    #[arg(long)]
    param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    seeds: Vec<u64>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Train(a) => train(a),
        Command::Synthesize(a) => synthesize_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Sweep(a) => sweep(a),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|e| {
        e.downcast_ref::<SasError>().is_some_and(SasError::is_config) || e.downcast_ref::<ConfigError>().is_some()
    });
    if config { 2 } else { 1 }
}

/// Usage problems detected by the CLI itself.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct ConfigError(String);

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() { data.join("manifest.json") } else { data.to_path_buf() }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(config_err(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn gen_corpus(a: GenCorpusArgs) -> Result<ExitCode> {
    let cfg = GeneratorConfig {
        seed: a.seed,
        vocab_size: a.vocab_size,
        n_images: a.images,
        captions_per_image: a.captions_per_image,
        frames_per_token: a.frames_per_token,
        noise_std: a.noise_std,
        emit_grid_variant: a.grid,
        ..Default::default()
    };
    generate_synthetic_corpus(&cfg, &a.out)?;
    println!("{}", a.out.join("manifest.json").display());
    Ok(ExitCode::SUCCESS)
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let base = match path {
        Some(p) => {
            require_file(p, "config")?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    Ok(base.with_overrides(overrides)?)
}

fn resolve_paths(cfg: &RunConfig, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<(PathBuf, PathBuf)> {
    let data = data
        .or_else(|| cfg.paths.data.as_ref().map(PathBuf::from))
        .ok_or_else(|| config_err("no corpus given (--data or paths.data)"))?;
    let out = out
        .or_else(|| cfg.paths.out.as_ref().map(PathBuf::from))
        .ok_or_else(|| config_err("no output directory given (--out or paths.out)"))?;
    let manifest = manifest_path(&data);
    require_file(&manifest, "corpus manifest")?;
    Ok((manifest, out))
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = load_config(a.config.as_deref(), &a.overrides)?;
    let (manifest, out) = resolve_paths(&cfg, a.data, a.out)?;
    if let Some(r) = &a.resume {
        require_file(r, "checkpoint")?;
    }
    let data = CorpusData::load(&manifest, cfg.trainer.feature_mode)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), cfg.to_toml()).context("writing config snapshot")?;
    let summary = fit(&data, &cfg, &out, a.resume.as_deref())?;
    println!("{}", summary.final_checkpoint.display());
    Ok(ExitCode::SUCCESS)
}

fn feature_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(config_err(format!("features path {} does not exist", path.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "sasrf"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .sasrf files in {}", path.display());
    }
    Ok(files)
}

fn load_model(path: &Path) -> Result<(RunConfig, SasModel<f32>)> {
    require_file(path, "checkpoint")?;
    let ckpt = load_checkpoint(path)?;
    let model = ckpt.model()?;
    Ok((ckpt.config, model))
}

fn synthesize_one(model: &SasModel<f32>, cfg: &RunConfig, file: &Path, out: &Path, max_frames: Option<usize>) -> Result<()> {
    let rfs = load_region_features(file)?;
    let synth = synthesize(model, &[&rfs], max_frames, false)?;
    let stem = &rfs.image_id;
    let mel = MelSpectrogram::new(synth.mel_post[0].clone(), &cfg.audio);
    mel.write(&out.join(format!("{stem}.sasmel")))?;
    let wave = griffin_lim(&mel, &cfg.audio)?;
    write_wav(&out.join(format!("{stem}.wav")), &wave)?;
    let align = &synth.alignments[0];
    let header = AlignmentHeader {
        image_id: stem.clone(),
        frames: align.nrows(),
        regions: align.ncols(),
        truncated: synth.truncated[0],
    };
    write_alignment(&out.join(format!("{stem}.align")), &header, align)?;
    tracing::info!(image = %stem, frames = synth.n_frames[0], truncated = synth.truncated[0], "synthesized");
    Ok(())
}

fn synthesize_cmd(a: SynthesizeArgs) -> Result<ExitCode> {
    let (cfg, model) = load_model(&a.checkpoint)?;
    let files = feature_files(&a.features)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut failed = 0;
    for file in &files {
        if let Err(e) = synthesize_one(&model, &cfg, file, &a.out, a.max_frames) {
            tracing::error!(file = %file.display(), error = %e, "synthesis failed");
            failed += 1;
        }
    }
    println!("{} of {} files synthesized into {}", files.len() - failed, files.len(), a.out.display());
    Ok(if failed > 0 { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn run_evaluation(
    model: &SasModel<f32>,
    cfg: &RunConfig,
    data: &CorpusData,
    split: &str,
    oracle: bool,
    batch_size: usize,
) -> Result<EvalOutput> {
    let transcriber: Box<dyn Transcriber> = if oracle {
        let answers: HashMap<String, Vec<String>> = data
            .images(split)?
            .iter()
            .map(|(f, caps)| (f.image_id.clone(), caps.first().cloned().unwrap_or_default()))
            .collect();
        Box::new(OracleTranscriber { answers })
    } else {
        Box::new(TemplateTranscriber::new(data.manifest.signature_bank()?))
    };
    Ok(evaluate(model, data, split, transcriber.as_ref(), &cfg.audio, batch_size)?)
}

fn write_eval(out: &Path, result: &EvalOutput) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("eval.json"), serde_json::to_string_pretty(result)?)?;
    fs::write(out.join("transcripts.txt"), result.transcript_dump())?;
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<ExitCode> {
    let (cfg, model) = load_model(&a.checkpoint)?;
    let manifest = manifest_path(&a.data);
    require_file(&manifest, "corpus manifest")?;
    let data = CorpusData::load(&manifest, cfg.trainer.feature_mode)?;
    let result = run_evaluation(&model, &cfg, &data, &a.split, a.oracle, a.batch_size)?;
    write_eval(&a.out, &result)?;
    println!("{}", MetricReport::header_line());
    println!("{}", result.report.row_line());
    Ok(ExitCode::SUCCESS)
}

fn sweep(a: SweepArgs) -> Result<ExitCode> {
    let base = load_config(a.config.as_deref(), &a.overrides)?;
    let manifest = manifest_path(&a.data);
    require_file(&manifest, "corpus manifest")?;
    // Reject a bad key or value before any training starts.
    let mut runs = Vec::new();
    for v in &a.values {
        for &seed in &a.seeds {
            let cfg = base.with_overrides(&[format!("{}={v}", a.param), format!("trainer.seed={seed}")])?;
            runs.push((v.clone(), seed, cfg));
        }
    }
    let mut loaded: Vec<CorpusData> = Vec::new();
    let mut rows = Vec::new();
    println!("{:>12}{:>6}{}", a.param, "seed", MetricReport::header_line());
    for (value, seed, cfg) in runs {
        let data = match loaded.iter().position(|d| d.mode == cfg.trainer.feature_mode) {
            Some(i) => &loaded[i],
            None => {
                loaded.push(CorpusData::load(&manifest, cfg.trainer.feature_mode)?);
                loaded.last().expect("just pushed")
            }
        };
        let dir = a.out.join(format!("{}={value}", a.param)).join(format!("seed{seed}"));
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("config.toml"), cfg.to_toml())?;
        let summary = fit(data, &cfg, &dir, None)?;
        let model = load_checkpoint(&summary.final_checkpoint)?.model()?;
        let result = run_evaluation(&model, &cfg, data, &a.split, false, cfg.trainer.batch_size)?;
        write_eval(&dir, &result)?;
        println!("{value:>12}{seed:>6}{}", result.report.row_line());
        rows.push(serde_json::json!({ "value": value, "seed": seed, "report": result.report }));
    }
    fs::write(a.out.join("sweep.json"), serde_json::to_string_pretty(&rows)?)?;
    Ok(ExitCode::SUCCESS)
}
