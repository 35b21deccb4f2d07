//! Region-feature files, spoken-caption rendering, the synthetic corpus
//! generator and training batches.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{decode_mel_bytes, AudioConfig, MelSpectrogram};
use crate::error::{Result, SasError};

pub const N_REGIONS: usize = 36;
pub const FEATURE_DIM: usize = 2048;
pub const N_CLASSES: usize = 1601;
pub const GEOMETRY_DIM: usize = 5;
pub const REGION_MAGIC: &[u8; 6] = b"SASRF1";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
/// Minimum pairwise Euclidean distance between token signatures.
pub const SIGNATURE_MARGIN: f64 = 4.0;

/// Detector output for one image: appearance `f`, box geometry `p`
/// (`x1, y1, x2, y2, area ratio`), class index `c` and confidence `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeatureSet {
    pub image_id: String,
    pub f: Array2<f32>,
    pub p: Array2<f32>,
    pub c: Vec<u16>,
    pub s: Vec<f32>,
}

impl RegionFeatureSet {
    pub fn n_regions(&self) -> usize {
        self.c.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.f.ncols()
    }

    /// Checks internal consistency for any region count and feature width.
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        let l = self.c.len();
        if self.f.nrows() != l || self.p.nrows() != l || self.s.len() != l {
            return Err(SasError::format(
                "regions",
                format!(
                    "inconsistent region counts: f {}, p {}, c {}, s {}",
                    self.f.nrows(),
                    self.p.nrows(),
                    l,
                    self.s.len()
                ),
            ));
        }
        if self.p.ncols() != GEOMETRY_DIM {
            return Err(SasError::format("p", format!("expected {GEOMETRY_DIM} geometry values per region")));
        }
        if self.f.iter().any(|v| !v.is_finite()) {
            return Err(SasError::format("f", "non-finite appearance feature"));
        }
        for (i, row) in self.p.rows().into_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(SasError::format("p", format!("non-finite geometry in region {i}")));
            }
            if row[0] > row[2] || row[1] > row[3] {
                return Err(SasError::format("p", format!("region {i} has x1 > x2 or y1 > y2")));
            }
            if !(row[4] > 0.0 && row[4] <= 1.0) {
                return Err(SasError::format("p", format!("region {i} area ratio {} outside (0, 1]", row[4])));
            }
        }
        if let Some(i) = self.c.iter().position(|&c| c as usize >= n_classes) {
            return Err(SasError::format("c", format!("region {i} class {} ≥ {n_classes}", self.c[i])));
        }
        if let Some(i) = self.s.iter().position(|v| !(v.is_finite() && (0.0..=1.0).contains(v))) {
            return Err(SasError::format("s", format!("region {i} confidence {} outside [0, 1]", self.s[i])));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let l = self.n_regions();
        let mut out = Vec::with_capacity(14 + l * (self.feature_dim() * 4 + 26));
        out.extend_from_slice(REGION_MAGIC);
        out.extend((l as u32).to_le_bytes());
        out.extend((self.feature_dim() as u32).to_le_bytes());
        for v in self.f.iter().chain(self.p.iter()) {
            out.extend(v.to_le_bytes());
        }
        for c in &self.c {
            out.extend(c.to_le_bytes());
        }
        for v in &self.s {
            out.extend(v.to_le_bytes());
        }
        out
    }

    /// Parses the binary layout, requiring 36 regions of 2048 features.
    pub fn from_bytes(image_id: &str, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 14 || &bytes[..6] != REGION_MAGIC {
            return Err(SasError::format("magic", "expected SASRF1 header"));
        }
        let l = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        if l != N_REGIONS {
            return Err(SasError::format("l", format!("expected {N_REGIONS} regions, found {l}")));
        }
        if d != FEATURE_DIM {
            return Err(SasError::format("d", format!("expected feature dimension {FEATURE_DIM}, found {d}")));
        }
        let expected = 14 + l * d * 4 + l * GEOMETRY_DIM * 4 + l * 2 + l * 4;
        if bytes.len() != expected {
            return Err(SasError::format(
                "length",
                format!("expected {expected} bytes, found {}", bytes.len()),
            ));
        }
        let mut at = 14;
        let mut f32s = |n: usize| -> Vec<f32> {
            let v = bytes[at..at + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            at += 4 * n;
            v
        };
        let f = Array2::from_shape_vec((l, d), f32s(l * d)).expect("sized");
        let p = Array2::from_shape_vec((l, GEOMETRY_DIM), f32s(l * GEOMETRY_DIM)).expect("sized");
        let c_start = 14 + (l * d + l * GEOMETRY_DIM) * 4;
        let c = bytes[c_start..c_start + 2 * l]
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let s_start = c_start + 2 * l;
        let s = bytes[s_start..s_start + 4 * l]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let rfs = Self { image_id: image_id.to_string(), f, p, c, s };
        rfs.validate(N_CLASSES)?;
        Ok(rfs)
    }
}

pub fn write_region_features(rfs: &RegionFeatureSet, path: &Path) -> Result<()> {
    fs::write(path, rfs.to_bytes()).map_err(|e| SasError::io(path, e))
}

/// Loads a feature file; the image id is the file stem.
pub fn load_region_features(path: &Path) -> Result<RegionFeatureSet> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| SasError::io(path, e))?;
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    RegionFeatureSet::from_bytes(id, &bytes)
}

/// Deterministic per-token log-mel patterns standing in for recorded speech.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSignatureBank {
    pub vocab: Vec<String>,
    pub signatures: Vec<Array2<f32>>,
    pub silence_signature: Array2<f32>,
    pub frames_per_token: usize,
}

impl TokenSignatureBank {
    /// Each cell of a signature is the log floor or one nat above it, drawn
    /// from a seeded generator; candidates closer than [`SIGNATURE_MARGIN`] to
    /// an accepted signature (or to silence) are redrawn.
    pub fn generate(vocab: &[String], frames_per_token: usize, n_mels: usize, log_floor: f64, seed: u64) -> Result<Self> {
        if frames_per_token == 0 || n_mels == 0 {
            return Err(SasError::Config("signatures need K ≥ 1 and n_mels ≥ 1".into()));
        }
        let floor = log_floor.ln() as f32;
        let silence = Array2::from_elem((frames_per_token, n_mels), floor);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5157_4e41_5455_5245);
        let mut signatures: Vec<Array2<f32>> = Vec::with_capacity(vocab.len());
        for token in vocab {
            let mut attempts = 0;
            loop {
                let cand = Array2::from_shape_fn((frames_per_token, n_mels), |_| {
                    if rng.random::<bool>() { floor + 1.0 } else { floor }
                });
                let ok = std::iter::once(&silence)
                    .chain(signatures.iter())
                    .all(|other| distance(&cand, other) >= SIGNATURE_MARGIN);
                if ok {
                    signatures.push(cand);
                    break;
                }
                attempts += 1;
                if attempts > 10_000 {
                    return Err(SasError::Config(format!(
                        "cannot place a separated signature for token {token:?}; increase K or n_mels"
                    )));
                }
            }
        }
        Ok(Self {
            vocab: vocab.to_vec(),
            signatures,
            silence_signature: silence,
            frames_per_token,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.silence_signature.ncols()
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.vocab.iter().position(|t| t == token)
    }

    pub fn log_floor_value(&self) -> f32 {
        self.silence_signature[[0, 0]]
    }
}

pub fn distance(a: &Array2<f32>, b: &Array2<f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Stacks the signatures of `tokens` and adds Gaussian noise; values are
/// kept at or above the log floor.
pub fn render_caption_speech(
    tokens: &[String],
    bank: &TokenSignatureBank,
    noise_std: f64,
    rng: &mut impl Rng,
    config: &AudioConfig,
) -> Result<MelSpectrogram> {
    let k = bank.frames_per_token;
    let mut frames = Array2::zeros((k * tokens.len(), bank.n_mels()));
    for (i, tok) in tokens.iter().enumerate() {
        let idx = bank.index_of(tok).ok_or_else(|| SasError::Vocabulary(tok.clone()))?;
        frames.slice_mut(s![i * k..(i + 1) * k, ..]).assign(&bank.signatures[idx]);
    }
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).map_err(|e| SasError::Config(e.to_string()))?;
        let floor = bank.log_floor_value();
        frames.mapv_inplace(|v| (v + normal.sample(rng) as f32).max(floor));
    }
    Ok(MelSpectrogram::new(frames, config))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub tokens: Vec<String>,
    /// Spectrogram path relative to the manifest directory.
    pub mel: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub image_id: String,
    pub features: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_features: Option<String>,
    /// Latent object tokens the generator placed in the image.
    pub objects: Vec<String>,
    pub captions: Vec<CaptionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub vocab: Vec<String>,
    /// Detector class index of each object token (absent for function words).
    pub object_classes: BTreeMap<String, u16>,
    pub frames_per_token: usize,
    pub noise_std: f64,
    pub n_mels: usize,
    pub log_floor: f64,
    pub splits: BTreeMap<String, Vec<ImageEntry>>,
}

impl CorpusManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SasError::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| SasError::format("manifest", e.to_string()))?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(SasError::format(
                "schema_version",
                format!("unsupported manifest version {}", m.schema_version),
            ));
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn split(&self, name: &str) -> Result<&[ImageEntry]> {
        self.splits
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| SasError::Input(format!("split {name:?} not in manifest")))
    }

    pub fn signature_bank(&self) -> Result<TokenSignatureBank> {
        TokenSignatureBank::generate(&self.vocab, self.frames_per_token, self.n_mels, self.log_floor, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub vocab_size: usize,
    pub n_images: usize,
    pub captions_per_image: usize,
    pub split_fractions: [f64; 3],
    pub frames_per_token: usize,
    pub noise_std: f64,
    pub emit_grid_variant: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            vocab_size: 20,
            n_images: 500,
            captions_per_image: 3,
            split_fractions: [0.8, 0.1, 0.1],
            frames_per_token: 8,
            noise_std: 0.0,
            emit_grid_variant: false,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(SasError::Config(m));
        if self.vocab_size < 2 {
            return err(format!("vocab size must be ≥ 2, got {}", self.vocab_size));
        }
        if self.n_images < 10 {
            return err(format!("need at least 10 images, got {}", self.n_images));
        }
        if !(1..=5).contains(&self.captions_per_image) {
            return err(format!("captions per image must be in 1..=5, got {}", self.captions_per_image));
        }
        let f = self.split_fractions;
        if f.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return err(format!("split fractions {f:?} must be nonnegative and sum to 1"));
        }
        if self.frames_per_token == 0 {
            return err("frames per token must be ≥ 1".into());
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return err("noise_std must be finite and nonnegative".into());
        }
        if self.vocab_size - function_word_count(self.vocab_size) > N_CLASSES - 1 {
            return err("too many object tokens for the detector class space".into());
        }
        Ok(())
    }

    pub fn split_sizes(&self) -> [usize; 3] {
        let n = self.n_images;
        let train = (n as f64 * self.split_fractions[0]).round() as usize;
        let dev = ((n as f64 * self.split_fractions[1]).round() as usize).min(n - train);
        [train, dev, n - train - dev]
    }
}

const FUNCTION_WORDS: [&str; 4] = ["a", "and", "with", "near"];
const NOUNS: [&str; 24] = [
    "dog", "cat", "man", "woman", "child", "ball", "car", "tree", "bike", "horse", "bird", "boat",
    "grass", "water", "house", "hat", "girl", "boy", "road", "beach", "snow", "rock", "shirt", "bench",
];

fn function_word_count(vocab_size: usize) -> usize {
    if vocab_size >= 8 { 4 } else { 1 }
}

/// Function words first, then object tokens.
pub fn build_vocab(vocab_size: usize) -> Vec<String> {
    let nf = function_word_count(vocab_size);
    let mut vocab: Vec<String> = FUNCTION_WORDS[..nf].iter().map(|s| s.to_string()).collect();
    for i in 0..vocab_size - nf {
        vocab.push(NOUNS.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("obj{i}")));
    }
    vocab
}

/// Detector class assigned to the `i`-th object token.
pub fn object_class(i: usize) -> u16 {
    (1 + (i * 37) % (N_CLASSES - 1)) as u16
}

/// All template captions for objects given in canonical (vocabulary) order.
pub fn caption_templates(objects: &[&str], function_words: usize) -> Vec<Vec<String>> {
    let w = |s: &str| s.to_string();
    let templates: Vec<Vec<&str>> = match (objects, function_words >= 4) {
        ([x], _) => vec![vec!["a", x]],
        ([x, y], true) => vec![
            vec!["a", x, "and", "a", y],
            vec!["a", x, "with", "a", y],
            vec!["a", x, "near", "a", y],
        ],
        ([x, y, z], true) => vec![
            vec!["a", x, "a", y, "and", "a", z],
            vec!["a", x, "and", "a", y, "with", "a", z],
            vec!["a", x, "with", "a", y, "near", "a", z],
        ],
        _ => {
            let mut t = Vec::new();
            for o in objects {
                t.push("a");
                t.push(o);
            }
            vec![t]
        }
    };
    templates.into_iter().map(|t| t.into_iter().map(w).collect()).collect()
}

struct GenContext {
    prototypes: Vec<Vec<f32>>,
    distractors: Vec<Vec<f32>>,
    object_classes: Vec<u16>,
    distractor_classes: Vec<u16>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f32> {
    let normal = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| normal.sample(rng) as f32).collect()
}

fn random_box(rng: &mut ChaCha8Rng, min_side: f32) -> [f32; 5] {
    let w = rng.random_range(min_side..0.9f32);
    let h = rng.random_range(min_side..0.9f32);
    let x1 = rng.random_range(0.0..(1.0 - w));
    let y1 = rng.random_range(0.0..(1.0 - h));
    [x1, y1, x1 + w, y1 + h, w * h]
}

fn bottom_up_features(rng: &mut ChaCha8Rng, ctx: &GenContext, image_id: &str, objects: &[usize]) -> RegionFeatureSet {
    let mut rows: Vec<(Vec<f32>, [f32; 5], u16, f32)> = Vec::with_capacity(N_REGIONS);
    for &o in objects {
        let n = rng.random_range(2..=4);
        for _ in 0..n {
            let noise = gaussian_vec(rng, FEATURE_DIM, 0.5);
            let f = ctx.prototypes[o].iter().zip(noise).map(|(a, b)| a + b).collect();
            rows.push((f, random_box(rng, 0.2), ctx.object_classes[o], rng.random_range(0.8..=1.0)));
        }
    }
    while rows.len() < N_REGIONS {
        let d = rng.random_range(0..ctx.distractors.len());
        let noise = gaussian_vec(rng, FEATURE_DIM, 0.5);
        let f = ctx.distractors[d].iter().zip(noise).map(|(a, b)| a + b).collect();
        let class = ctx.distractor_classes[rng.random_range(0..ctx.distractor_classes.len())];
        rows.push((f, random_box(rng, 0.05), class, rng.random_range(0.05..0.45)));
    }
    rows.shuffle(rng);
    assemble(image_id, rows)
}

/// Raster-scanned 6×6 grid cells: appearance blends every object prototype
/// by its box overlap with the cell; no class or confidence information.
fn grid_features(rng: &mut ChaCha8Rng, ctx: &GenContext, image_id: &str, objects: &[usize]) -> RegionFeatureSet {
    let boxes: Vec<[f32; 5]> = objects.iter().map(|_| random_box(rng, 0.3)).collect();
    let side = 6;
    let cell = 1.0 / side as f32;
    let mut rows = Vec::with_capacity(N_REGIONS);
    for gy in 0..side {
        for gx in 0..side {
            let (x1, y1) = (gx as f32 * cell, gy as f32 * cell);
            let (x2, y2) = (x1 + cell, y1 + cell);
            let mut f = gaussian_vec(rng, FEATURE_DIM, 1.0);
            for (&o, b) in objects.iter().zip(&boxes) {
                let ox = (x2.min(b[2]) - x1.max(b[0])).max(0.0);
                let oy = (y2.min(b[3]) - y1.max(b[1])).max(0.0);
                let overlap = ox * oy / (cell * cell);
                for (v, p) in f.iter_mut().zip(&ctx.prototypes[o]) {
                    *v += overlap * 0.5 * p;
                }
            }
            rows.push((f, [x1, y1, x2, y2, cell * cell], 0u16, 1.0f32));
        }
    }
    assemble(image_id, rows)
}

fn assemble(image_id: &str, rows: Vec<(Vec<f32>, [f32; 5], u16, f32)>) -> RegionFeatureSet {
    let l = rows.len();
    let mut f = Array2::zeros((l, FEATURE_DIM));
    let mut p = Array2::zeros((l, GEOMETRY_DIM));
    let mut c = Vec::with_capacity(l);
    let mut s = Vec::with_capacity(l);
    for (i, (fi, pi, ci, si)) in rows.into_iter().enumerate() {
        f.row_mut(i).assign(&ndarray::Array1::from(fi));
        for (j, v) in pi.iter().enumerate() {
            p[[i, j]] = *v;
        }
        c.push(ci);
        s.push(si);
    }
    RegionFeatureSet { image_id: image_id.to_string(), f, p, c, s }
}

/// Writes a deterministic synthetic corpus under `out_dir` and returns its
/// manifest (also saved as `manifest.json`).
pub fn generate_synthetic_corpus(cfg: &GeneratorConfig, out_dir: &Path) -> Result<CorpusManifest> {
    cfg.validate()?;
    let audio = AudioConfig::default();
    let vocab = build_vocab(cfg.vocab_size);
    let nf = function_word_count(cfg.vocab_size);
    let nouns: Vec<&str> = vocab[nf..].iter().map(|s| s.as_str()).collect();
    let bank = TokenSignatureBank::generate(&vocab, cfg.frames_per_token, audio.n_mels, audio.log_floor, cfg.seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let object_classes: Vec<u16> = (0..nouns.len()).map(object_class).collect();
    let distractor_classes: Vec<u16> = (1..N_CLASSES as u16).filter(|c| !object_classes.contains(c)).collect();
    let ctx = GenContext {
        prototypes: (0..nouns.len()).map(|_| gaussian_vec(&mut rng, FEATURE_DIM, 1.0)).collect(),
        distractors: (0..32).map(|_| gaussian_vec(&mut rng, FEATURE_DIM, 1.0)).collect(),
        object_classes: object_classes.clone(),
        distractor_classes,
    };

    for sub in ["features", "mels"] {
        fs::create_dir_all(out_dir.join(sub)).map_err(|e| SasError::io(out_dir.join(sub), e))?;
    }
    if cfg.emit_grid_variant {
        fs::create_dir_all(out_dir.join("grid")).map_err(|e| SasError::io(out_dir.join("grid"), e))?;
    }

    let sizes = cfg.split_sizes();
    let names = ["train", "dev", "test"];
    let mut splits: BTreeMap<String, Vec<ImageEntry>> = names.iter().map(|n| (n.to_string(), Vec::new())).collect();
    for i in 0..cfg.n_images {
        let split = if i < sizes[0] { 0 } else if i < sizes[0] + sizes[1] { 1 } else { 2 };
        let image_id = format!("img_{i:05}");
        let n_obj = rng.random_range(1..=3usize.min(nouns.len()));
        let mut objects = rand::seq::index::sample(&mut rng, nouns.len(), n_obj).into_vec();
        objects.sort_unstable();

        let rfs = bottom_up_features(&mut rng, &ctx, &image_id, &objects);
        let features = format!("features/{image_id}.sasrf");
        write_region_features(&rfs, &out_dir.join(&features))?;
        let grid = if cfg.emit_grid_variant {
            let g = grid_features(&mut rng, &ctx, &image_id, &objects);
            let path = format!("grid/{image_id}.sasrf");
            write_region_features(&g, &out_dir.join(&path))?;
            Some(path)
        } else {
            None
        };

        let names_of: Vec<&str> = objects.iter().map(|&o| nouns[o]).collect();
        let templates = caption_templates(&names_of, nf);
        let start = rng.random_range(0..templates.len());
        let mut captions = Vec::with_capacity(cfg.captions_per_image);
        for c in 0..cfg.captions_per_image {
            let tokens = templates[(start + c) % templates.len()].clone();
            let mel = render_caption_speech(&tokens, &bank, cfg.noise_std, &mut rng, &audio)?;
            let mel_path = format!("mels/{image_id}_c{c}.sasmel");
            mel.write(&out_dir.join(&mel_path))?;
            captions.push(CaptionRecord { tokens, mel: mel_path });
        }
        splits.get_mut(names[split]).expect("split exists").push(ImageEntry {
            image_id,
            features,
            grid_features: grid,
            objects: names_of.iter().map(|s| s.to_string()).collect(),
            captions,
        });
    }

    let manifest = CorpusManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        seed: cfg.seed,
        vocab: vocab.clone(),
        object_classes: nouns.iter().zip(&object_classes).map(|(n, &c)| (n.to_string(), c)).collect(),
        frames_per_token: cfg.frames_per_token,
        noise_std: cfg.noise_std,
        n_mels: audio.n_mels,
        log_floor: audio.log_floor,
        splits,
    };
    let path = out_dir.join("manifest.json");
    let mut w = BufWriter::new(File::create(&path).map_err(|e| SasError::io(&path, e))?);
    w.write_all(manifest.to_json().as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| SasError::io(&path, e))?;
    Ok(manifest)
}

/// Which region stream feeds the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    BottomUp,
    BaselineGrid,
}

impl Default for FeatureMode {
    fn default() -> Self {
        FeatureMode::BottomUp
    }
}

impl std::fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FeatureMode::BottomUp => "bottom-up",
            FeatureMode::BaselineGrid => "baseline-grid",
        })
    }
}

/// One spoken caption paired with its image.
#[derive(Debug, Clone)]
pub struct Example {
    pub image_id: String,
    pub features: Arc<RegionFeatureSet>,
    pub tokens: Vec<String>,
    pub mel: Arc<Array2<f32>>,
}

/// A manifest with every referenced file loaded into memory.
#[derive(Debug, Clone)]
pub struct CorpusData {
    pub manifest: CorpusManifest,
    pub root: PathBuf,
    pub mode: FeatureMode,
    splits: BTreeMap<String, Vec<Example>>,
    images: BTreeMap<String, Vec<(Arc<RegionFeatureSet>, Vec<Vec<String>>)>>,
}

/// Worker count for data loading, bounded by `SAS_NUM_WORKERS`.
pub fn num_workers() -> usize {
    std::env::var("SAS_NUM_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

impl CorpusData {
    pub fn load(manifest_path: &Path, mode: FeatureMode) -> Result<Self> {
        let manifest = CorpusManifest::load(manifest_path)?;
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_manifest(manifest, root, mode)
    }

    pub fn from_manifest(manifest: CorpusManifest, root: PathBuf, mode: FeatureMode) -> Result<Self> {
        let mut splits = BTreeMap::new();
        let mut images = BTreeMap::new();
        for (name, entries) in &manifest.splits {
            let loaded = load_entries(&root, entries, mode)?;
            let mut examples = Vec::new();
            let mut per_image = Vec::new();
            for (entry, (rfs, mels)) in entries.iter().zip(loaded) {
                let rfs = Arc::new(rfs);
                for (cap, mel) in entry.captions.iter().zip(mels) {
                    examples.push(Example {
                        image_id: entry.image_id.clone(),
                        features: Arc::clone(&rfs),
                        tokens: cap.tokens.clone(),
                        mel: Arc::new(mel),
                    });
                }
                per_image.push((rfs, entry.captions.iter().map(|c| c.tokens.clone()).collect()));
            }
            splits.insert(name.clone(), examples);
            images.insert(name.clone(), per_image);
        }
        Ok(Self { manifest, root, mode, splits, images })
    }

    pub fn examples(&self, split: &str) -> Result<&[Example]> {
        self.splits
            .get(split)
            .map(|v| v.as_slice())
            .ok_or_else(|| SasError::Input(format!("split {split:?} not in manifest")))
    }

    /// Per-image features with every reference caption.
    pub fn images(&self, split: &str) -> Result<&[(Arc<RegionFeatureSet>, Vec<Vec<String>>)]> {
        self.images
            .get(split)
            .map(|v| v.as_slice())
            .ok_or_else(|| SasError::Input(format!("split {split:?} not in manifest")))
    }
}

type LoadedEntry = (RegionFeatureSet, Vec<Array2<f32>>);

fn load_entry(root: &Path, entry: &ImageEntry, mode: FeatureMode) -> Result<LoadedEntry> {
    let rel = match mode {
        FeatureMode::BottomUp => &entry.features,
        FeatureMode::BaselineGrid => entry.grid_features.as_ref().ok_or_else(|| {
            SasError::Input(format!("image {} has no grid features; regenerate with the grid variant", entry.image_id))
        })?,
    };
    let mut rfs = load_region_features(&root.join(rel))?;
    rfs.image_id = entry.image_id.clone();
    let mels = entry
        .captions
        .iter()
        .map(|c| {
            let path = root.join(&c.mel);
            let bytes = fs::read(&path).map_err(|e| SasError::io(&path, e))?;
            decode_mel_bytes(&bytes)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((rfs, mels))
}

fn load_entries(root: &Path, entries: &[ImageEntry], mode: FeatureMode) -> Result<Vec<LoadedEntry>> {
    let workers = num_workers().min(entries.len().max(1));
    if workers <= 1 {
        return entries.iter().map(|e| load_entry(root, e, mode)).collect();
    }
    let chunk = entries.len().div_ceil(workers);
    let results: Vec<Result<Vec<LoadedEntry>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = entries
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|e| load_entry(root, e, mode)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("loader thread")).collect()
    });
    let mut out = Vec::with_capacity(entries.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Padded training batch. Frame rows are laid out as `item · t_max + t`.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub image_ids: Vec<String>,
    pub features: Vec<Arc<RegionFeatureSet>>,
    pub targets: Array2<f32>,
    pub lengths: Vec<usize>,
    pub t_max: usize,
    /// `B × t_max`, 1 on valid frames.
    pub frame_mask: Array2<f32>,
    /// `B × t_max`, 1 on the final valid frame and on all padding.
    pub stop_targets: Array2<f32>,
    /// `same_image[i][j]`: items `i` and `j` describe the same image.
    pub same_image: Vec<Vec<bool>>,
}

impl TrainingBatch {
    pub fn from_examples(examples: &[&Example]) -> Self {
        let b = examples.len();
        let n_mels = examples.first().map(|e| e.mel.ncols()).unwrap_or(0);
        let lengths: Vec<usize> = examples.iter().map(|e| e.mel.nrows()).collect();
        let t_max = lengths.iter().copied().max().unwrap_or(0);
        let mut targets = Array2::zeros((b * t_max, n_mels));
        let mut frame_mask = Array2::zeros((b, t_max));
        let mut stop_targets = Array2::ones((b, t_max));
        for (i, e) in examples.iter().enumerate() {
            let len = lengths[i];
            targets.slice_mut(s![i * t_max..i * t_max + len, ..]).assign(&e.mel);
            for t in 0..len {
                frame_mask[[i, t]] = 1.0;
                stop_targets[[i, t]] = if t + 1 == len { 1.0 } else { 0.0 };
            }
        }
        let same_image = examples
            .iter()
            .map(|a| examples.iter().map(|b| a.image_id == b.image_id).collect())
            .collect();
        Self {
            image_ids: examples.iter().map(|e| e.image_id.clone()).collect(),
            features: examples.iter().map(|e| Arc::clone(&e.features)).collect(),
            targets,
            lengths,
            t_max,
            frame_mask,
            stop_targets,
            same_image,
        }
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// Ground-truth spectrogram of one item without padding.
    pub fn target(&self, item: usize) -> ndarray::ArrayView2<'_, f32> {
        let start = item * self.t_max;
        self.targets.slice(s![start..start + self.lengths[item], ..])
    }
}

/// Batches over a split's captions, optionally shuffled with a fixed seed.
pub fn batch_iterator<'a>(
    data: &'a CorpusData,
    split: &str,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<impl Iterator<Item = TrainingBatch> + 'a> {
    let examples = data.examples(split)?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let batch_size = batch_size.max(1);
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    Ok(chunks.into_iter().map(move |idx| {
        let items: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
        TrainingBatch::from_examples(&items)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example(id: &str, frames: usize) -> Example {
        Example {
            image_id: id.into(),
            features: Arc::new(RegionFeatureSet {
                image_id: id.into(),
                f: Array2::zeros((1, 2)),
                p: Array2::from_shape_vec((1, 5), vec![0.0, 0.0, 1.0, 1.0, 1.0]).unwrap(),
                c: vec![0],
                s: vec![1.0],
            }),
            tokens: vec![],
            mel: Arc::new(Array2::from_elem((frames, 3), 1.0)),
        }
    }

    #[test]
    fn padding_mask_and_stop_targets() {
        let a = example("x", 16);
        let b = example("y", 24);
        let batch = TrainingBatch::from_examples(&[&a, &b]);
        assert_eq!(batch.t_max, 24);
        assert_eq!(batch.frame_mask.row(0).sum(), 16.0);
        assert_eq!(batch.frame_mask.row(1).sum(), 24.0);
        let stop: Vec<f32> = batch.stop_targets.row(0).to_vec();
        assert!(stop[..15].iter().all(|&v| v == 0.0));
        assert!(stop[15..].iter().all(|&v| v == 1.0));
        assert_eq!(batch.stop_targets[[1, 23]], 1.0);
        assert_eq!(batch.stop_targets.row(1).sum(), 1.0);
        assert_eq!(batch.same_image, vec![vec![true, false], vec![false, true]]);
    }

    #[test]
    fn split_sizes_follow_fractions() {
        let cfg = GeneratorConfig { n_images: 100, ..Default::default() };
        assert_eq!(cfg.split_sizes(), [80, 10, 10]);
        let bad = GeneratorConfig { split_fractions: [0.5, 0.1, 0.1], ..Default::default() };
        assert!(matches!(bad.validate(), Err(SasError::Config(_))));
        let few = GeneratorConfig { n_images: 5, ..Default::default() };
        assert!(few.validate().is_err());
        let tiny_vocab = GeneratorConfig { vocab_size: 1, ..Default::default() };
        assert!(tiny_vocab.validate().is_err());
    }

    #[test]
    fn vocab_layout() {
        let v = build_vocab(20);
        assert_eq!(v.len(), 20);
        assert_eq!(&v[..4], &["a", "and", "with", "near"]);
        let small = build_vocab(2);
        assert_eq!(small, vec!["a", "dog"]);
        let big = build_vocab(40);
        assert_eq!(big[39], "obj35");
    }

    #[test]
    fn signatures_are_separated() {
        let vocab = build_vocab(20);
        let bank = TokenSignatureBank::generate(&vocab, 8, 80, 1e-5, 3).unwrap();
        for i in 0..bank.signatures.len() {
            assert!(distance(&bank.signatures[i], &bank.silence_signature) >= SIGNATURE_MARGIN);
            for j in 0..i {
                assert!(distance(&bank.signatures[i], &bank.signatures[j]) >= SIGNATURE_MARGIN);
            }
        }
    }

    #[test]
    fn render_rejects_unknown_tokens() {
        let vocab = build_vocab(8);
        let bank = TokenSignatureBank::generate(&vocab, 2, 80, 1e-5, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = render_caption_speech(&["zebra".to_string()], &bank, 0.0, &mut rng, &AudioConfig::default());
        assert!(matches!(err, Err(SasError::Vocabulary(t)) if t == "zebra"));
        let empty = render_caption_speech(&[], &bank, 0.0, &mut rng, &AudioConfig::default()).unwrap();
        assert_eq!(empty.n_frames(), 0);
    }
}
