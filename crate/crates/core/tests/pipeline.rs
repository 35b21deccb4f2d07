use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sas_core::checkpoint::load_checkpoint;
use sas_core::config::RunConfig;
use sas_core::corpus::{generate_synthetic_corpus, CorpusData, CorpusManifest, FeatureMode, GeneratorConfig};
use sas_core::trainer::{checkpoint_path, fit, read_log};
use sha2::{Digest, Sha256};

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
max_frames = 60

[embedder]
conv_filters = 8
gru_hidden = 3

[trainer]
max_iters = 6
batch_size = 4
warmup_iters = 3
ss_k = 2
eps_min = 60.0
checkpoint_interval = 3
eval_interval = 3
"#;

fn tiny_corpus(dir: &Path, seed: u64, grid: bool) -> CorpusManifest {
    let cfg = GeneratorConfig {
        seed,
        vocab_size: 8,
        n_images: 12,
        captions_per_image: 2,
        frames_per_token: 2,
        noise_std: 0.1,
        emit_grid_variant: grid,
        ..Default::default()
    };
    generate_synthetic_corpus(&cfg, dir).unwrap()
}

fn tree_digest(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, Sha256::digest(fs::read(&path).unwrap()).to_vec());
            }
        }
    }
    out
}

#[test]
fn corpus_bytes_depend_only_on_seed_and_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_corpus(&tmp.path().join("a"), 3, true);
    tiny_corpus(&tmp.path().join("b"), 3, true);
    tiny_corpus(&tmp.path().join("c"), 4, true);
    let a = tree_digest(&tmp.path().join("a"));
    assert!(a.len() > 20);
    assert_eq!(a, tree_digest(&tmp.path().join("b")));
    assert_ne!(a, tree_digest(&tmp.path().join("c")));
}

#[test]
fn splits_are_disjoint_and_complete() {
    let tmp = tempfile::tempdir().unwrap();
    for seed in 0..4 {
        let dir = tmp.path().join(format!("s{seed}"));
        let manifest = tiny_corpus(&dir, seed, false);
        let mut seen = std::collections::HashSet::new();
        for entries in manifest.splits.values() {
            for e in entries {
                assert!(seen.insert(e.image_id.clone()), "{} appears twice", e.image_id);
            }
        }
        assert_eq!(seen.len(), 12);
        assert_eq!(manifest.splits["train"].len(), 10);
    }
}

fn tiny_run(dir: &Path, extra: &[&str]) -> (CorpusData, RunConfig) {
    let corpus = dir.join("corpus");
    tiny_corpus(&corpus, 1, true);
    let cfg = RunConfig::from_toml_str(TINY).unwrap().with_overrides(extra).unwrap();
    let data = CorpusData::load(&corpus.join("manifest.json"), cfg.trainer.feature_mode).unwrap();
    (data, cfg)
}

#[test]
fn training_is_deterministic_and_logs_every_step() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, cfg) = tiny_run(tmp.path(), &[]);
    let a = fit(&data, &cfg, &tmp.path().join("a"), None).unwrap();
    let b = fit(&data, &cfg, &tmp.path().join("b"), None).unwrap();
    assert_eq!(fs::read(&a.final_checkpoint).unwrap(), fs::read(&b.final_checkpoint).unwrap());
    let log = read_log(&a.train_log).unwrap();
    assert_eq!(log.iter().map(|r| r.iter).collect::<Vec<_>>(), (1..=6).collect::<Vec<_>>());
    for r in &log {
        let l = r.losses;
        assert!((l.total - (l.l_s + l.l_st + 0.25 * l.l_ec)).abs() < 1e-5 * l.total.max(1.0), "{l:?}");
    }
    // untrained, mid-run and final checkpoints
    for it in [0, 3, 6] {
        assert!(checkpoint_path(&tmp.path().join("a"), it).exists());
    }
    assert_eq!(a.dev_history.iter().map(|d| d.iter).collect::<Vec<_>>(), vec![0, 3, 6]);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, cfg) = tiny_run(tmp.path(), &[]);
    let full = fit(&data, &cfg, &tmp.path().join("full"), None).unwrap();

    let part_dir = tmp.path().join("part");
    let short = cfg.with_overrides(&["trainer.max_iters=3"]).unwrap();
    fit(&data, &short, &part_dir, None).unwrap();
    let resumed = fit(&data, &cfg, &part_dir, Some(&checkpoint_path(&part_dir, 3))).unwrap();

    assert_eq!(read_log(&full.train_log).unwrap(), read_log(&resumed.train_log).unwrap());
    assert_eq!(
        fs::read(&full.final_checkpoint).unwrap(),
        fs::read(&resumed.final_checkpoint).unwrap()
    );
}

#[test]
fn lambda_zero_and_fixed_teacher_forcing_show_in_the_log() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, cfg) = tiny_run(tmp.path(), &["losses.lambda_ec=0", "trainer.eps_min=100"]);
    let summary = fit(&data, &cfg, &tmp.path().join("run"), None).unwrap();
    for r in read_log(&summary.train_log).unwrap() {
        assert_eq!(r.tf_ratio, 100.0);
        let l = r.losses;
        assert!((l.total - (l.l_s + l.l_st)).abs() < 1e-5 * l.total.max(1.0), "{l:?}");
    }
}

#[test]
fn resume_rejects_an_incompatible_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, cfg) = tiny_run(tmp.path(), &[]);
    let summary = fit(&data, &cfg, &tmp.path().join("run"), None).unwrap();
    let wider = cfg.with_overrides(&["decoder.rnn_units=16"]).unwrap();
    let err = fit(&data, &wider, &tmp.path().join("run"), Some(&summary.final_checkpoint)).unwrap_err();
    assert!(matches!(err, sas_core::SasError::Mismatch(_)), "{err}");
    let grid = cfg.with_overrides(&["trainer.feature_mode=baseline-grid"]).unwrap();
    let grid_data = CorpusData::load(&data.root.join("manifest.json"), FeatureMode::BaselineGrid).unwrap();
    let err = fit(&grid_data, &grid, &tmp.path().join("run"), Some(&summary.final_checkpoint)).unwrap_err();
    assert!(matches!(err, sas_core::SasError::Mismatch(_)), "{err}");
    // the checkpoint itself remains loadable
    assert_eq!(load_checkpoint(&summary.final_checkpoint).unwrap().iter, 6);
}
