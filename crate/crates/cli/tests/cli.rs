use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[encoder]
fuse_units = 8
proj1_units = 8
embed_dim = 6

[decoder]
prenet_units = [8, 8]
attn_dim = 6
location_filters = 3
location_kernel = 5
rnn_units = 12
postnet_layers = 2
postnet_filters = 8
max_frames = 40

[embedder]
conv_filters = 8
gru_hidden = 3

[trainer]
max_iters = 4
batch_size = 4
warmup_iters = 2
checkpoint_interval = 2
eval_interval = 0
"#;

fn sas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sas"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn gen_corpus(dir: &Path) -> PathBuf {
    let out = sas(&["gen-corpus", "--seed", "2", "--vocab-size", "8", "--images", "12", "--grid", "--out", p(dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("manifest.json")
}

fn train_tiny(tmp: &Path, corpus: &Path) -> PathBuf {
    let cfg = tmp.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let run = tmp.join("run");
    let out = sas(&["train", "--config", p(&cfg), "--data", p(corpus), "--out", p(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = PathBuf::from(stdout(&out).trim());
    assert!(ckpt.exists(), "{ckpt:?}");
    ckpt
}

#[test]
fn gen_corpus_writes_a_manifest_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = gen_corpus(&tmp.path().join("a"));
    let b = gen_corpus(&tmp.path().join("b"));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(
        fs::read(tmp.path().join("a/mels/img_00000_c0.sasmel")).unwrap(),
        fs::read(tmp.path().join("b/mels/img_00000_c0.sasmel")).unwrap()
    );
}

#[test]
fn invalid_generator_parameters_exit_with_config_status() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sas(&["gen-corpus", "--images", "5", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("manifest.json").exists());
}

#[test]
fn train_records_config_and_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(&tmp.path().join("corpus"));
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let run = tmp.path().join("run");
    let out = sas(&[
        "train", "--config", p(&cfg), "--data", p(&corpus), "--out", p(&run),
        "--override", "trainer.eps_min=100", "--override", "losses.lambda_ec=0",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let saved = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(saved.contains("eps_min = 100"), "{saved}");
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["tf_ratio"], 100.0);
    }

    let bad = sas(&["train", "--config", p(&cfg), "--data", p(&corpus), "--out", p(&run), "--override", "trainer.nope=1"]);
    assert_eq!(bad.status.code(), Some(2));
    let missing = sas(&["train", "--config", p(&tmp.path().join("absent.toml")), "--data", p(&corpus), "--out", p(&run)]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn synthesize_writes_outputs_and_reports_bad_files() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(&tmp.path().join("corpus"));
    let ckpt = train_tiny(tmp.path(), &corpus);

    let feats = tmp.path().join("feats");
    fs::create_dir(&feats).unwrap();
    fs::copy(tmp.path().join("corpus/features/img_00011.sasrf"), feats.join("img_00011.sasrf")).unwrap();
    let out_dir = tmp.path().join("synth");
    let out = sas(&["synthesize", "--checkpoint", p(&ckpt), "--features", p(&feats), "--out", p(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for ext in ["sasmel", "wav", "align"] {
        assert!(out_dir.join(format!("img_00011.{ext}")).exists(), "missing .{ext}");
    }
    let wav = fs::read(out_dir.join("img_00011.wav")).unwrap();
    assert_eq!(&wav[..4], b"RIFF");

    fs::write(feats.join("broken.sasrf"), b"not a feature file").unwrap();
    let out = sas(&["synthesize", "--checkpoint", p(&ckpt), "--features", p(&feats), "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));

    let out = sas(&["synthesize", "--checkpoint", p(&tmp.path().join("none.sasckpt")), "--features", p(&feats), "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_prints_the_metric_table() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(&tmp.path().join("corpus"));
    let ckpt = train_tiny(tmp.path(), &corpus);
    let out_dir = tmp.path().join("eval");
    let out = sas(&["evaluate", "--checkpoint", p(&ckpt), "--data", p(&corpus), "--out", p(&out_dir), "--oracle"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["B1", "B2", "B3", "B4", "M", "R", "C"]);
    let row: Vec<f64> = lines.next().unwrap().split_whitespace().map(|v| v.parse().unwrap()).collect();
    assert_eq!(row.len(), 7);
    assert_eq!(row[0], 100.0);
    assert!(out_dir.join("eval.json").exists());
    assert!(out_dir.join("transcripts.txt").exists());
}

#[test]
fn sweep_runs_each_value_and_summarizes() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(&tmp.path().join("corpus"));
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let out_dir = tmp.path().join("sweep");
    let out = sas(&[
        "sweep", "--config", p(&cfg), "--data", p(&corpus), "--out", p(&out_dir),
        "--param", "trainer.eps_min", "--values", "97.5,100", "--override", "trainer.max_iters=2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);
    assert!(out_dir.join("trainer.eps_min=100/seed1").is_dir());

    let bad = sas(&["sweep", "--config", p(&cfg), "--data", p(&corpus), "--out", p(&out_dir), "--param", "trainer.eps_min", "--values", "0"]);
    assert_eq!(bad.status.code(), Some(2));
}
