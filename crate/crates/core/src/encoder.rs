//! Region feature fusion and image embedding.
//!
//! Each region row becomes `f ⊕ FC(p ⊕ onehot(c) ⊕ s)`; two linear layers
//! then project the fused rows to the embedding width. The fuse layer is
//! stored as three blocks (geometry, class, confidence) of one affine map so
//! the one-hot product becomes a row gather.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::corpus::{RegionFeatureSet, FEATURE_DIM, GEOMETRY_DIM, N_CLASSES};
use crate::error::{Result, SasError};
use crate::params::{glorot, ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub feature_dim: usize,
    pub n_classes: usize,
    pub fuse_units: usize,
    pub proj1_units: usize,
    pub embed_dim: usize,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            feature_dim: FEATURE_DIM,
            n_classes: N_CLASSES,
            fuse_units: 1024,
            proj1_units: 1025,
            embed_dim: 512,
            activation: Activation::Relu,
        }
    }
}

impl EncoderConfig {
    pub fn fused_dim(&self) -> usize {
        self.feature_dim + self.fuse_units
    }

    pub fn validate(&self) -> Result<()> {
        if [self.feature_dim, self.n_classes, self.fuse_units, self.proj1_units, self.embed_dim].contains(&0) {
            return Err(SasError::Config("encoder widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub fuse_geom: ParamId,
    pub fuse_class: ParamId,
    pub fuse_conf: ParamId,
    pub fuse_b: ParamId,
    pub proj1_w: ParamId,
    pub proj1_b: ParamId,
    pub proj2_w: ParamId,
    pub proj2_b: ParamId,
    pub global_w: ParamId,
    pub global_b: ParamId,
}

impl EncoderParams {
    pub fn register<T: Real>(store: &mut ParamStore<T>, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = GEOMETRY_DIM + cfg.n_classes + 1;
        // Draw the full fuse matrix once so its scale matches a single affine map.
        let full: Array2<T> = glorot(fan_in, cfg.fuse_units, rng);
        let rows = |a: usize, b: usize| full.slice(ndarray::s![a..b, ..]).to_owned();
        let fuse_geom = store.add("encoder.fc_fuse.w_geom", rows(0, GEOMETRY_DIM));
        let fuse_class = store.add("encoder.fc_fuse.w_class", rows(GEOMETRY_DIM, GEOMETRY_DIM + cfg.n_classes));
        let fuse_conf = store.add("encoder.fc_fuse.w_conf", rows(GEOMETRY_DIM + cfg.n_classes, fan_in));
        let fuse_b = store.add_constant("encoder.fc_fuse.b", 1, cfg.fuse_units, 0.0);
        let proj1_w = store.add_glorot("encoder.proj1.w", cfg.fused_dim(), cfg.proj1_units, rng);
        let proj1_b = store.add_constant("encoder.proj1.b", 1, cfg.proj1_units, 0.0);
        let proj2_w = store.add_glorot("encoder.proj2.w", cfg.proj1_units, cfg.embed_dim, rng);
        let proj2_b = store.add_constant("encoder.proj2.b", 1, cfg.embed_dim, 0.0);
        let global_w = store.add_glorot("encoder.global_proj.w", cfg.embed_dim, cfg.embed_dim, rng);
        let global_b = store.add_constant("encoder.global_proj.b", 1, cfg.embed_dim, 0.0);
        Self {
            fuse_geom,
            fuse_class,
            fuse_conf,
            fuse_b,
            proj1_w,
            proj1_b,
            proj2_w,
            proj2_b,
            global_w,
            global_b,
        }
    }
}

/// Encoded batch: `seq` stacks every item's region embeddings
/// (`(B · L) × E`, rows `item · L + region`), `global` is `B × E`.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    pub seq: Var,
    pub global: Var,
    pub batch: usize,
    pub regions: usize,
}

fn check_batch(cfg: &EncoderConfig, items: &[&RegionFeatureSet]) -> Result<usize> {
    let first = items.first().ok_or_else(|| SasError::Input("empty encoder batch".into()))?;
    let l = first.n_regions();
    if l == 0 {
        return Err(SasError::Input("image has no regions".into()));
    }
    for rfs in items {
        if rfs.n_regions() != l {
            return Err(SasError::Input(format!(
                "image {} has {} regions, batch expects {l}",
                rfs.image_id,
                rfs.n_regions()
            )));
        }
        if rfs.feature_dim() != cfg.feature_dim {
            return Err(SasError::Input(format!(
                "image {} has feature width {}, encoder expects {}",
                rfs.image_id,
                rfs.feature_dim(),
                cfg.feature_dim
            )));
        }
        if let Some(&c) = rfs.c.iter().find(|&&c| c as usize >= cfg.n_classes) {
            return Err(SasError::Input(format!(
                "image {} has class index {c} ≥ {}",
                rfs.image_id, cfg.n_classes
            )));
        }
    }
    Ok(l)
}

/// Fused region rows `f ⊕ FC(p ⊕ onehot(c) ⊕ s)`, shape `(B · L) × (D + F)`.
pub fn fuse_region_features<T: Real>(
    tape: &mut Tape<T>,
    p: &EncoderParams,
    cfg: &EncoderConfig,
    items: &[&RegionFeatureSet],
) -> Result<Var> {
    let l = check_batch(cfg, items)?;
    let n = items.len() * l;
    let mut f = Array2::<T>::zeros((n, cfg.feature_dim));
    let mut geom = Array2::<T>::zeros((n, GEOMETRY_DIM));
    let mut conf = Array2::<T>::zeros((n, 1));
    let mut classes = Vec::with_capacity(n);
    for (b, rfs) in items.iter().enumerate() {
        for r in 0..l {
            let row = b * l + r;
            f.row_mut(row).assign(&rfs.f.row(r).mapv(|v| T::lit(v as f64)));
            geom.row_mut(row).assign(&rfs.p.row(r).mapv(|v| T::lit(v as f64)));
            conf[[row, 0]] = T::lit(rfs.s[r] as f64);
            classes.push(rfs.c[r] as usize);
        }
    }
    let f = tape.constant(f);
    let geom = tape.constant(geom);
    let conf = tape.constant(conf);
    let w_geom = tape.param(p.fuse_geom);
    let w_class = tape.param(p.fuse_class);
    let w_conf = tape.param(p.fuse_conf);
    let bias = tape.param(p.fuse_b);
    let g = tape.matmul(geom, w_geom);
    let c = tape.gather_rows(w_class, classes);
    let s = tape.matmul(conf, w_conf);
    let gc = tape.add(g, c);
    let gcs = tape.add(gc, s);
    let tail = tape.add_row_bias(gcs, bias);
    Ok(tape.concat_cols(&[f, tail]))
}

fn activate<T: Real>(tape: &mut Tape<T>, x: Var, act: Activation) -> Var {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Identity => x,
    }
}

/// Region embeddings `act(proj2(act(proj1(fused))))`, shape `(B · L) × E`.
pub fn encode<T: Real>(
    tape: &mut Tape<T>,
    p: &EncoderParams,
    cfg: &EncoderConfig,
    items: &[&RegionFeatureSet],
) -> Result<Var> {
    let fused = fuse_region_features(tape, p, cfg, items)?;
    let h = tape.affine(fused, p.proj1_w, p.proj1_b);
    let h = activate(tape, h, cfg.activation);
    let e = tape.affine(h, p.proj2_w, p.proj2_b);
    Ok(activate(tape, e, cfg.activation))
}

/// `global_proj` applied to each item's mean region embedding, `B × E`.
pub fn image_global_vector<T: Real>(tape: &mut Tape<T>, p: &EncoderParams, seq: Var, batch: usize) -> Var {
    let mean = mean_blocks(tape, seq, batch);
    tape.affine(mean, p.global_w, p.global_b)
}

/// Mean of each consecutive block of `rows / batch` rows.
pub fn mean_blocks<T: Real>(tape: &mut Tape<T>, x: Var, batch: usize) -> Var {
    let n = tape.shape(x).0 / batch;
    let alpha = tape.constant(Array2::from_elem((batch, n), T::one() / T::lit(n as f64)));
    tape.block_weighted_sum(alpha, x)
}

pub fn encode_batch<T: Real>(
    tape: &mut Tape<T>,
    p: &EncoderParams,
    cfg: &EncoderConfig,
    items: &[&RegionFeatureSet],
) -> Result<EncoderOutput> {
    let seq = encode(tape, p, cfg, items)?;
    let global = image_global_vector(tape, p, seq, items.len());
    Ok(EncoderOutput {
        seq,
        global,
        batch: items.len(),
        regions: items[0].n_regions(),
    })
}
