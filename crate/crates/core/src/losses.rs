//! Training objectives and the speech embedder used by the embedding constraint.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{conv_out_len, PatchSpec, Tape, Var};
use crate::decoder::Dense;
use crate::error::{Result, SasError};
use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_ec: f64,
    pub stop_positive_weight: f64,
    pub mms_margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ec: 0.25,
            stop_positive_weight: 5.0,
            mms_margin: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_ec.is_finite() && self.lambda_ec >= 0.0) {
            return Err(SasError::Config(format!("lambda_ec {} must be ≥ 0", self.lambda_ec)));
        }
        if !(self.stop_positive_weight.is_finite() && self.stop_positive_weight > 0.0) {
            return Err(SasError::Config("stop_positive_weight must be > 0".into()));
        }
        if !self.mms_margin.is_finite() {
            return Err(SasError::Config("mms_margin must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_s")]
    pub l_s: f64,
    #[serde(rename = "L_st")]
    pub l_st: f64,
    #[serde(rename = "L_ec")]
    pub l_ec: f64,
    pub total: f64,
}

/// Loss terms as tape nodes plus their scalar values.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_s: Var,
    pub l_st: Var,
    pub l_ec: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<T: Real>(&self, tape: &Tape<T>) -> LossBreakdown {
        LossBreakdown {
            l_s: tape.scalar(self.l_s).as_f64(),
            l_st: tape.scalar(self.l_st).as_f64(),
            l_ec: tape.scalar(self.l_ec).as_f64(),
            total: tape.scalar(self.total).as_f64(),
        }
    }
}

fn valid_rows<T: Real>(frame_mask: &Array2<T>) -> Result<(Vec<T>, usize)> {
    let weights: Vec<T> = frame_mask.iter().copied().collect();
    let n = weights.iter().filter(|&&w| w != T::zero()).count();
    if n == 0 {
        return Err(SasError::Input("no valid frames in batch".into()));
    }
    Ok((weights, n))
}

/// Masked MSE of both spectrogram predictions, each averaged over valid
/// frame × channel cells. `frame_mask` is `B × t_max`, frames are item-major.
pub fn spectrogram_loss<T: Real>(
    tape: &mut Tape<T>,
    mel_pre: Var,
    mel_post: Var,
    target: &Array2<T>,
    frame_mask: &Array2<T>,
) -> Result<Var> {
    let (weights, n) = valid_rows(frame_mask)?;
    let denom = T::lit((n * target.ncols()) as f64);
    let pre = tape.masked_mse(mel_pre, target.clone(), weights.clone(), denom);
    let post = tape.masked_mse(mel_post, target.clone(), weights, denom);
    Ok(tape.add(pre, post))
}

/// BCE on stop logits with the positive class weighted, averaged over valid frames.
pub fn stop_token_loss<T: Real>(
    tape: &mut Tape<T>,
    stop_logits: Var,
    stop_targets: &Array2<T>,
    frame_mask: &Array2<T>,
    positive_weight: f64,
) -> Result<Var> {
    let (weights, n) = valid_rows(frame_mask)?;
    let targets: Vec<T> = stop_targets.iter().copied().collect();
    Ok(tape.bce_logits(stop_logits, targets, weights, T::lit(positive_weight), T::lit(n as f64)))
}

/// Masked margin softmax over `image · speechᵀ`, averaged over both
/// retrieval directions. `same[i][j]` marks known positives, which are
/// excluded from the negatives.
pub fn mms_loss<T: Real>(tape: &mut Tape<T>, image: Var, speech: Var, margin: f64, same: &[Vec<bool>]) -> Result<Var> {
    let b = tape.shape(image).0;
    if b == 0 {
        return Err(SasError::Input("MMS needs a nonempty batch".into()));
    }
    if tape.shape(speech).0 != b || same.len() != b {
        return Err(SasError::Input("MMS batch sizes disagree".into()));
    }
    Ok(tape.mms(image, speech, T::lit(margin), same.to_vec()))
}

/// `L_s + L_st + λ · L_ec`.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, l_s: Var, l_st: Var, l_ec: Var, weights: &LossWeights) -> LossVars {
    let base = tape.add(l_s, l_st);
    let ec = tape.scale(l_ec, T::lit(weights.lambda_ec));
    let total = tape.add(base, ec);
    LossVars { l_s, l_st, l_ec, total }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub conv_filters: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    /// Hidden units per direction; the embedding is twice this wide.
    pub gru_hidden: usize,
    pub gru_layers: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            conv_filters: 512,
            conv_kernel: 9,
            conv_stride: 2,
            gru_hidden: 256,
            gru_layers: 2,
        }
    }
}

impl EmbedderConfig {
    pub fn output_dim(&self) -> usize {
        2 * self.gru_hidden
    }

    pub fn validate(&self) -> Result<()> {
        if [self.conv_filters, self.conv_kernel, self.conv_stride, self.gru_hidden, self.gru_layers].contains(&0) {
            return Err(SasError::Config("embedder widths must be positive".into()));
        }
        Ok(())
    }

    /// Sequence length after the strided convolution.
    pub fn conv_len(&self, t: usize) -> usize {
        conv_out_len(t, self.conv_kernel, self.conv_stride, self.conv_kernel / 2)
    }
}

#[derive(Debug, Clone)]
pub struct GruParams {
    /// `input × 3H`, gate blocks `r, z, n`.
    pub w_ih: Dense,
    /// `H × 3H`.
    pub w_hh: Dense,
}

#[derive(Debug, Clone)]
pub struct EmbedderParams {
    pub conv: Dense,
    /// Per layer: forward then backward direction.
    pub gru: Vec<[GruParams; 2]>,
}

impl EmbedderParams {
    pub fn register<T: Real>(store: &mut ParamStore<T>, cfg: &EmbedderConfig, n_mels: usize, rng: &mut ChaCha8Rng) -> Self {
        let conv = Dense {
            w: store.add_glorot("embedder.conv.w", cfg.conv_kernel * n_mels, cfg.conv_filters, rng),
            b: store.add_constant("embedder.conv.b", 1, cfg.conv_filters, 0.0),
        };
        let h = cfg.gru_hidden;
        let mut gru = Vec::new();
        for layer in 0..cfg.gru_layers {
            let input = if layer == 0 { cfg.conv_filters } else { 2 * h };
            let mut dir = |d: &str| GruParams {
                w_ih: Dense {
                    w: store.add_glorot(format!("embedder.gru.{layer}.{d}.w_ih"), input, 3 * h, rng),
                    b: store.add_constant(format!("embedder.gru.{layer}.{d}.b_ih"), 1, 3 * h, 0.0),
                },
                w_hh: Dense {
                    w: store.add_glorot(format!("embedder.gru.{layer}.{d}.w_hh"), h, 3 * h, rng),
                    b: store.add_constant(format!("embedder.gru.{layer}.{d}.b_hh"), 1, 3 * h, 0.0),
                },
            };
            let fwd = dir("fwd");
            let bwd = dir("bwd");
            gru.push([fwd, bwd]);
        }
        Self { conv, gru }
    }
}

/// One GRU direction over a time-major sequence (`(t_len · B) × in`, rows
/// `t · B + b`). Steps at or past an item's length leave its state unchanged.
fn gru_direction<T: Real>(
    tape: &mut Tape<T>,
    g: &GruParams,
    h_units: usize,
    x: Var,
    batch: usize,
    lengths: &[usize],
    reverse: bool,
) -> Vec<Var> {
    let t_len = tape.shape(x).0 / batch;
    let xi = tape.affine(x, g.w_ih.w, g.w_ih.b);
    let mut h = tape.constant(Array2::zeros((batch, h_units)));
    let mut outputs = vec![h; t_len];
    let steps: Vec<usize> = if reverse { (0..t_len).rev().collect() } else { (0..t_len).collect() };
    for t in steps {
        let xt = tape.gather_rows(xi, (t * batch..(t + 1) * batch).collect());
        let hh = tape.affine(h, g.w_hh.w, g.w_hh.b);
        let xr = tape.slice_cols(xt, 0, h_units);
        let xz = tape.slice_cols(xt, h_units, 2 * h_units);
        let xn = tape.slice_cols(xt, 2 * h_units, 3 * h_units);
        let hr = tape.slice_cols(hh, 0, h_units);
        let hz = tape.slice_cols(hh, h_units, 2 * h_units);
        let hn = tape.slice_cols(hh, 2 * h_units, 3 * h_units);
        let r = tape.add(xr, hr);
        let r = tape.sigmoid(r);
        let z = tape.add(xz, hz);
        let z = tape.sigmoid(z);
        let rh = tape.mul(r, hn);
        let n = tape.add(xn, rh);
        let n = tape.tanh(n);
        // h' = (1 − z)·n + z·h = n + z·(h − n)
        let diff = tape.sub(h, n);
        let zd = tape.mul(z, diff);
        let cand = tape.add(n, zd);
        h = if lengths.iter().all(|&len| t < len) {
            cand
        } else {
            let m = Array2::from_shape_fn((batch, h_units), |(b, _)| if t < lengths[b] { T::one() } else { T::zero() });
            let m = tape.constant(m);
            let delta = tape.sub(cand, h);
            let md = tape.mul(m, delta);
            tape.add(h, md)
        };
        outputs[t] = h;
    }
    outputs
}

/// Mean-pooled bidirectional GRU features of each ground-truth spectrogram.
///
/// `mels` is `(B · t_max) × M` item-major; returns `B × 2H`.
pub fn speech_embedding<T: Real>(
    tape: &mut Tape<T>,
    p: &EmbedderParams,
    cfg: &EmbedderConfig,
    mels: Var,
    lengths: &[usize],
    frame_center: f64,
) -> Result<Var> {
    let batch = lengths.len();
    if batch == 0 || lengths.contains(&0) {
        return Err(SasError::Input("speech embedding needs nonempty spectrograms".into()));
    }
    let (rows, n_mels) = tape.shape(mels);
    let t_max = rows / batch;
    let x = tape.offset(mels, T::lit(-frame_center));
    let spec = PatchSpec {
        lengths: lengths.to_vec(),
        t_in: t_max,
        channels: n_mels,
        kernel: cfg.conv_kernel,
        stride: cfg.conv_stride,
        pad: cfg.conv_kernel / 2,
    };
    let t_conv = spec.t_out();
    let conv_lengths: Vec<usize> = lengths.iter().map(|&l| cfg.conv_len(l)).collect();
    if conv_lengths.contains(&0) {
        return Err(SasError::Input("spectrogram too short for the embedder convolution".into()));
    }
    let patches = tape.patches(x, spec);
    let conv = tape.affine(patches, p.conv.w, p.conv.b);
    let conv = tape.relu(conv);
    let to_time_major: Vec<usize> = (0..t_conv).flat_map(|t| (0..batch).map(move |b| b * t_conv + t)).collect();
    let mut seq = tape.gather_rows(conv, to_time_major);
    for layer in &p.gru {
        let fwd = gru_direction(tape, &layer[0], cfg.gru_hidden, seq, batch, &conv_lengths, false);
        let bwd = gru_direction(tape, &layer[1], cfg.gru_hidden, seq, batch, &conv_lengths, true);
        let steps: Vec<Var> = fwd.iter().zip(&bwd).map(|(&f, &b)| tape.concat_cols(&[f, b])).collect();
        seq = tape.concat_rows(&steps);
    }
    let to_item_major: Vec<usize> = (0..batch).flat_map(|b| (0..t_conv).map(move |t| t * batch + b)).collect();
    let seq = tape.gather_rows(seq, to_item_major);
    let alpha = Array2::from_shape_fn((batch, t_conv), |(b, t)| {
        if t < conv_lengths[b] { T::one() / T::lit(conv_lengths[b] as f64) } else { T::zero() }
    });
    let alpha = tape.constant(alpha);
    Ok(tape.block_weighted_sum(alpha, seq))
}
