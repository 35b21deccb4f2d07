//! Autoregressive mel-frame decoder with location-sensitive attention and a
//! residual convolutional post-net.
//!
//! All functions work on batches: recurrent state is `B × units`, attention
//! weights are `B × L`, and the region memory is `(B · L) × E`. Frames enter
//! the network centered by `frame_center` (a point just above the log floor),
//! and the frame projection bias starts at that center.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, PatchSpec, Tape, Var};
use crate::error::{Result, SasError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub n_mels: usize,
    pub prenet_units: Vec<usize>,
    pub attn_dim: usize,
    pub location_filters: usize,
    pub location_kernel: usize,
    pub rnn_units: usize,
    pub rnn_layers: usize,
    pub postnet_layers: usize,
    pub postnet_filters: usize,
    pub postnet_kernel: usize,
    pub stop_threshold: f64,
    pub max_frames: usize,
    pub prenet_dropout: f64,
    /// Log-mel value subtracted from frames before they enter the network.
    pub frame_center: f64,
}

pub fn default_frame_center() -> f64 {
    1e-5f64.ln() + 0.5
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            prenet_units: vec![256, 256],
            attn_dim: 128,
            location_filters: 32,
            location_kernel: 31,
            rnn_units: 1024,
            rnn_layers: 2,
            postnet_layers: 5,
            postnet_filters: 512,
            postnet_kernel: 5,
            stop_threshold: 0.5,
            max_frames: 400,
            prenet_dropout: 0.5,
            frame_center: default_frame_center(),
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.n_mels,
            self.attn_dim,
            self.location_filters,
            self.location_kernel,
            self.rnn_units,
            self.rnn_layers,
            self.postnet_filters,
            self.postnet_kernel,
            self.max_frames,
        ];
        if positive.contains(&0) || self.prenet_units.is_empty() || self.prenet_units.contains(&0) {
            return Err(SasError::Config("decoder widths and counts must be positive".into()));
        }
        if self.postnet_layers < 2 {
            return Err(SasError::Config("post-net needs at least 2 layers".into()));
        }
        if self.location_kernel % 2 == 0 || self.postnet_kernel % 2 == 0 {
            return Err(SasError::Config("same-padded kernels must have odd length".into()));
        }
        if !(self.stop_threshold > 0.0 && self.stop_threshold < 1.0) {
            return Err(SasError::Config(format!("stop_threshold {} outside (0, 1)", self.stop_threshold)));
        }
        if !(0.0..1.0).contains(&self.prenet_dropout) {
            return Err(SasError::Config(format!("prenet_dropout {} outside [0, 1)", self.prenet_dropout)));
        }
        if !self.frame_center.is_finite() {
            return Err(SasError::Config("frame_center must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    fn register<T: Real>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, bias: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: store.add_glorot(format!("{name}.w"), fan_in, fan_out, rng),
            b: store.add_constant(format!("{name}.b"), 1, fan_out, bias),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub prenet: Vec<Dense>,
    /// Gates `i, f, g, o` from `[input, h]`.
    pub lstm: Vec<Dense>,
    pub query_w: ParamId,
    pub memory_w: ParamId,
    /// `(kernel · 2) × filters`, columns ordered `k · 2 + channel`.
    pub location_conv: ParamId,
    pub location_dense: ParamId,
    pub attn_b: ParamId,
    pub attn_v: ParamId,
    pub frame: Dense,
    pub stop: Dense,
    pub postnet: Vec<Dense>,
}

impl DecoderParams {
    pub fn register<T: Real>(store: &mut ParamStore<T>, cfg: &DecoderConfig, embed_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut prenet = Vec::new();
        let mut fan_in = cfg.n_mels;
        for (i, &u) in cfg.prenet_units.iter().enumerate() {
            prenet.push(Dense::register(store, &format!("decoder.prenet.{i}"), fan_in, u, 0.0, rng));
            fan_in = u;
        }
        let u = cfg.rnn_units;
        let mut lstm = Vec::new();
        for layer in 0..cfg.rnn_layers {
            let input = if layer == 0 { fan_in + embed_dim } else { u };
            let cell = Dense::register(store, &format!("decoder.lstm.{layer}"), input + u, 4 * u, 0.0, rng);
            // forget-gate bias starts at 1
            store.get_mut(cell.b).slice_mut(ndarray::s![.., u..2 * u]).fill(T::one());
            lstm.push(cell);
        }
        let a = cfg.attn_dim;
        let query_w = store.add_glorot("decoder.attention.query_w", u, a, rng);
        let memory_w = store.add_glorot("decoder.attention.memory_w", embed_dim, a, rng);
        let location_conv = store.add_glorot("decoder.attention.location_conv", 2 * cfg.location_kernel, cfg.location_filters, rng);
        let location_dense = store.add_glorot("decoder.attention.location_dense", cfg.location_filters, a, rng);
        let attn_b = store.add_constant("decoder.attention.b", 1, a, 0.0);
        let attn_v = store.add_glorot("decoder.attention.v", a, 1, rng);
        let frame = Dense::register(store, "decoder.frame_proj", u + embed_dim, cfg.n_mels, cfg.frame_center, rng);
        let stop = Dense::register(store, "decoder.stop_proj", u + embed_dim, 1, 0.0, rng);
        let mut postnet = Vec::new();
        let mut channels = cfg.n_mels;
        for layer in 0..cfg.postnet_layers {
            let out = if layer + 1 == cfg.postnet_layers { cfg.n_mels } else { cfg.postnet_filters };
            postnet.push(Dense::register(store, &format!("postnet.{layer}"), cfg.postnet_kernel * channels, out, 0.0, rng));
            channels = out;
        }
        Self {
            prenet,
            lstm,
            query_w,
            memory_w,
            location_conv,
            location_dense,
            attn_b,
            attn_v,
            frame,
            stop,
            postnet,
        }
    }
}

/// Encoder output prepared for attention.
#[derive(Debug, Clone, Copy)]
pub struct AttentionMemory {
    pub seq: Var,
    /// `seq · memory_w`, computed once per unroll.
    pub keys: Var,
    pub batch: usize,
    pub regions: usize,
}

impl AttentionMemory {
    pub fn new<T: Real>(tape: &mut Tape<T>, p: &DecoderParams, seq: Var, batch: usize) -> Self {
        let regions = tape.shape(seq).0 / batch;
        let w = tape.param(p.memory_w);
        let keys = tape.matmul(seq, w);
        Self { seq, keys, batch, regions }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
    pub weights: Var,
    pub cum: Var,
    pub context: Var,
}

/// Zero recurrent state, uniform attention, zero cumulative weights and the
/// context those uniform weights produce (the mean region embedding).
pub fn init_state<T: Real>(tape: &mut Tape<T>, cfg: &DecoderConfig, mem: &AttentionMemory) -> DecoderState {
    let (b, l) = (mem.batch, mem.regions);
    let zeros = |tape: &mut Tape<T>| tape.constant(Array2::zeros((b, cfg.rnn_units)));
    let h = (0..cfg.rnn_layers).map(|_| zeros(tape)).collect();
    let c = (0..cfg.rnn_layers).map(|_| zeros(tape)).collect();
    let weights = tape.constant(Array2::from_elem((b, l), T::one() / T::lit(l as f64)));
    let cum = tape.constant(Array2::zeros((b, l)));
    let context = tape.block_weighted_sum(weights, mem.seq);
    DecoderState { h, c, weights, cum, context }
}

/// Location-sensitive attention; returns `(context B × E, weights B × L)`.
pub fn attention_step<T: Real>(
    tape: &mut Tape<T>,
    p: &DecoderParams,
    cfg: &DecoderConfig,
    mem: &AttentionMemory,
    query: Var,
    prev_weights: Var,
    cum_weights: Var,
) -> (Var, Var) {
    let (b, l) = (mem.batch, mem.regions);
    let qw = tape.param(p.query_w);
    let q = tape.matmul(query, qw);
    let expand: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, l)).collect();
    let q = tape.gather_rows(q, expand);

    let prev = tape.reshape(prev_weights, b * l, 1);
    let cum = tape.reshape(cum_weights, b * l, 1);
    let stacked = tape.concat_cols(&[prev, cum]);
    let spec = PatchSpec {
        lengths: vec![l; b],
        t_in: l,
        channels: 2,
        kernel: cfg.location_kernel,
        stride: 1,
        pad: cfg.location_kernel / 2,
    };
    let patches = tape.patches(stacked, spec);
    let conv_w = tape.param(p.location_conv);
    let loc = tape.matmul(patches, conv_w);
    let dense_w = tape.param(p.location_dense);
    let loc = tape.matmul(loc, dense_w);

    let qk = tape.add(q, mem.keys);
    let pre = tape.add(qk, loc);
    let bias = tape.param(p.attn_b);
    let pre = tape.add_row_bias(pre, bias);
    let act = tape.tanh(pre);
    let v = tape.param(p.attn_v);
    let energies = tape.matmul(act, v);
    let energies = tape.reshape(energies, b, l);
    let weights = tape.softmax_rows(energies);
    let context = tape.block_weighted_sum(weights, mem.seq);
    (context, weights)
}

fn lstm_cell<T: Real>(tape: &mut Tape<T>, cell: &Dense, units: usize, x: Var, h: Var, c: Var) -> (Var, Var) {
    let xh = tape.concat_cols(&[x, h]);
    let gates = tape.affine(xh, cell.w, cell.b);
    let i = tape.slice_cols(gates, 0, units);
    let f = tape.slice_cols(gates, units, 2 * units);
    let g = tape.slice_cols(gates, 2 * units, 3 * units);
    let o = tape.slice_cols(gates, 3 * units, 4 * units);
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let fc = tape.mul(f, c);
    let ig = tape.mul(i, g);
    let c_new = tape.add(fc, ig);
    let tc = tape.tanh(c_new);
    (tape.mul(o, tc), c_new)
}

/// Pre-Net on centered frames; dropout masks are drawn from `dropout` when given.
pub fn prenet<T: Real>(
    tape: &mut Tape<T>,
    p: &DecoderParams,
    cfg: &DecoderConfig,
    centered: Var,
    dropout: Option<&mut ChaCha8Rng>,
) -> Var {
    let mut x = centered;
    let rate = cfg.prenet_dropout;
    let mut rng = dropout;
    for layer in &p.prenet {
        let z = tape.affine(x, layer.w, layer.b);
        x = tape.relu(z);
        if let Some(rng) = rng.as_deref_mut() {
            if rate > 0.0 {
                let keep = T::lit(1.0 / (1.0 - rate));
                let mask = Array2::from_shape_fn(tape.shape(x), |_| {
                    if rng.random::<f64>() < rate { T::zero() } else { keep }
                });
                let mask = tape.constant(mask);
                x = tape.mul(x, mask);
            }
        }
    }
    x
}

/// One decoder step on a centered input frame; returns `(frame B × M, stop B × 1, state)`.
pub fn decode_step<T: Real>(
    tape: &mut Tape<T>,
    p: &DecoderParams,
    cfg: &DecoderConfig,
    mem: &AttentionMemory,
    state: &DecoderState,
    centered_input: Var,
    dropout: Option<&mut ChaCha8Rng>,
) -> (Var, Var, DecoderState) {
    let x = prenet(tape, p, cfg, centered_input, dropout);
    let mut input = tape.concat_cols(&[x, state.context]);
    let mut h = Vec::with_capacity(cfg.rnn_layers);
    let mut c = Vec::with_capacity(cfg.rnn_layers);
    for (layer, cell) in p.lstm.iter().enumerate() {
        let (hn, cn) = lstm_cell(tape, cell, cfg.rnn_units, input, state.h[layer], state.c[layer]);
        h.push(hn);
        c.push(cn);
        input = hn;
    }
    let y = input;
    let (context, weights) = attention_step(tape, p, cfg, mem, y, state.weights, state.cum);
    let cum = tape.add(state.cum, weights);
    let out = tape.concat_cols(&[y, context]);
    let frame = tape.affine(out, p.frame.w, p.frame.b);
    let stop = tape.affine(out, p.stop.w, p.stop.b);
    (frame, stop, DecoderState { h, c, weights, cum, context })
}

/// Residual post-net over `(B · t_max) × M` frames; positions at or past
/// each item's length are treated as padding by the convolutions.
pub fn postnet_refine<T: Real>(
    tape: &mut Tape<T>,
    p: &DecoderParams,
    cfg: &DecoderConfig,
    mel_pre: Var,
    lengths: &[usize],
    t_max: usize,
) -> Var {
    let mut x = tape.offset(mel_pre, T::lit(-cfg.frame_center));
    let mut channels = cfg.n_mels;
    let last = p.postnet.len() - 1;
    for (i, layer) in p.postnet.iter().enumerate() {
        let spec = PatchSpec {
            lengths: lengths.to_vec(),
            t_in: t_max,
            channels,
            kernel: cfg.postnet_kernel,
            stride: 1,
            pad: cfg.postnet_kernel / 2,
        };
        let patches = tape.patches(x, spec);
        let z = tape.affine(patches, layer.w, layer.b);
        x = if i == last { z } else { tape.tanh(z) };
        channels = tape.shape(x).1;
    }
    tape.add(mel_pre, x)
}

#[derive(Debug, Clone)]
pub struct UnrollOutput {
    /// `(B · t_max) × M`, rows `item · t_max + t`.
    pub mel_pre: Var,
    pub mel_post: Var,
    /// `(B · t_max) × 1`.
    pub stop_logits: Var,
    /// Attention weights per step, each `B × L`.
    pub weights: Vec<Var>,
    pub t_max: usize,
}

impl UnrollOutput {
    /// `t_max × L` alignment of one item.
    pub fn alignment<T: Real>(&self, tape: &Tape<T>, item: usize) -> Array2<f32> {
        let l = tape.shape(self.weights[0]).1;
        let mut out = Array2::zeros((self.weights.len(), l));
        for (t, &w) in self.weights.iter().enumerate() {
            for j in 0..l {
                out[[t, j]] = tape.value(w)[[item, j]].as_f64() as f32;
            }
        }
        out
    }
}

fn time_to_item_major(batch: usize, t_max: usize) -> Vec<usize> {
    (0..batch).flat_map(|b| (0..t_max).map(move |t| t * batch + b)).collect()
}

/// Scheduled-sampling unroll over `t_max` steps.
///
/// `targets` is `(B · t_max) × M` (rows `item · t_max + t`). Step `t > 0`
/// receives ground-truth frame `t − 1` where `feed_mask[[b, t]]` is true and
/// the model's own previous `frame_pre` otherwise; step 0 receives the go
/// frame (zero after centering).
#[allow(clippy::too_many_arguments)]
pub fn unroll_teacher_forced<T: Real>(
    tape: &mut Tape<T>,
    p: &DecoderParams,
    cfg: &DecoderConfig,
    mem: &AttentionMemory,
    targets: &Array2<T>,
    lengths: &[usize],
    feed_mask: &Array2<bool>,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<UnrollOutput> {
    let b = mem.batch;
    if b == 0 || lengths.len() != b {
        return Err(SasError::Input("unroll needs one length per batch item".into()));
    }
    let t_max = targets.nrows() / b;
    if t_max == 0 {
        return Err(SasError::Input("cannot unroll zero frames".into()));
    }
    if feed_mask.dim() != (b, t_max) {
        return Err(SasError::Input(format!("feed mask must be {b}×{t_max}")));
    }
    let center = T::lit(cfg.frame_center);
    let centered_targets = targets.mapv(|v| v - center);
    let mut state = init_state(tape, cfg, mem);
    let mut input = tape.constant(Array2::zeros((b, cfg.n_mels)));
    let mut frames = Vec::with_capacity(t_max);
    let mut stops = Vec::with_capacity(t_max);
    let mut weights = Vec::with_capacity(t_max);
    for t in 0..t_max {
        if t > 0 {
            let prev = *frames.last().expect("step t-1 exists");
            input = feed_input(tape, &centered_targets, t_max, t - 1, feed_mask.column(t), prev, center);
        }
        let (frame, stop, next) = decode_step(tape, p, cfg, mem, &state, input, dropout.as_deref_mut());
        frames.push(frame);
        stops.push(stop);
        weights.push(next.weights);
        state = next;
    }
    let order = time_to_item_major(b, t_max);
    let stacked = tape.concat_rows(&frames);
    let mel_pre = tape.gather_rows(stacked, order.clone());
    let stacked = tape.concat_rows(&stops);
    let stop_logits = tape.gather_rows(stacked, order);
    let mel_post = postnet_refine(tape, p, cfg, mel_pre, lengths, t_max);
    Ok(UnrollOutput { mel_pre, mel_post, stop_logits, weights, t_max })
}

fn feed_input<T: Real>(
    tape: &mut Tape<T>,
    centered_targets: &Array2<T>,
    t_max: usize,
    src_t: usize,
    mask: ndarray::ArrayView1<bool>,
    prev_frame: Var,
    center: T,
) -> Var {
    let b = mask.len();
    let m = centered_targets.ncols();
    let mut truth = Array2::zeros((b, m));
    for i in 0..b {
        truth.row_mut(i).assign(&centered_targets.row(i * t_max + src_t));
    }
    if mask.iter().all(|&x| x) {
        return tape.constant(truth);
    }
    let centered_pred = tape.offset(prev_frame, -center);
    if mask.iter().all(|&x| !x) {
        return centered_pred;
    }
    let keep_pred = Array2::from_shape_fn((b, m), |(i, _)| if mask[i] { T::zero() } else { T::one() });
    for i in 0..b {
        if !mask[i] {
            truth.row_mut(i).fill(T::zero());
        }
    }
    let keep = tape.constant(keep_pred);
    let own = tape.mul(centered_pred, keep);
    let truth = tape.constant(truth);
    tape.add(own, truth)
}

#[derive(Debug, Clone)]
pub struct GreedyOutput {
    /// Refined spectrogram per item, `n_frames[b] × M`.
    pub mel_post: Vec<Array2<f32>>,
    pub mel_pre: Vec<Array2<f32>>,
    /// `n_frames[b] × L` per item.
    pub alignments: Vec<Array2<f32>>,
    pub n_frames: Vec<usize>,
    pub truncated: Vec<bool>,
}

/// Free-running decoding. Each item stops after the first frame whose stop
/// probability exceeds the threshold; with `ignore_stop` every item runs to
/// `max_frames`.
pub fn infer_greedy<T: Real>(
    tape: &mut Tape<T>,
    p: &DecoderParams,
    cfg: &DecoderConfig,
    mem: &AttentionMemory,
    max_frames: usize,
    ignore_stop: bool,
) -> Result<GreedyOutput> {
    let b = mem.batch;
    let max_frames = max_frames.max(1);
    let mut state = init_state(tape, cfg, mem);
    let mut input = tape.constant(Array2::zeros((b, cfg.n_mels)));
    let center = T::lit(cfg.frame_center);
    let mut frames = Vec::new();
    let mut weights = Vec::new();
    let mut n_frames: Vec<Option<usize>> = vec![None; b];
    for t in 0..max_frames {
        let (frame, stop, next) = decode_step(tape, p, cfg, mem, &state, input, None);
        tape.check_finite(frame, "decoder frame")?;
        frames.push(frame);
        weights.push(next.weights);
        if !ignore_stop {
            for (i, n) in n_frames.iter_mut().enumerate() {
                if n.is_none() && sigmoid(tape.value(stop)[[i, 0]]).as_f64() > cfg.stop_threshold {
                    *n = Some(t + 1);
                }
            }
            if n_frames.iter().all(Option::is_some) {
                break;
            }
        }
        input = tape.offset(frame, -center);
        state = next;
    }
    let t_max = frames.len();
    let truncated: Vec<bool> = n_frames.iter().map(Option::is_none).collect();
    let lengths: Vec<usize> = n_frames.iter().map(|n| n.unwrap_or(t_max)).collect();
    let stacked = tape.concat_rows(&frames);
    let mel_pre = tape.gather_rows(stacked, time_to_item_major(b, t_max));
    let mel_post = postnet_refine(tape, p, cfg, mel_pre, &lengths, t_max);
    tape.check_finite(mel_post, "refined spectrogram")?;

    let slice = |v: Var, i: usize, n: usize| -> Array2<f32> {
        tape.value(v)
            .slice(ndarray::s![i * t_max..i * t_max + n, ..])
            .mapv(|x| x.as_f64() as f32)
    };
    let mut out = GreedyOutput {
        mel_post: Vec::with_capacity(b),
        mel_pre: Vec::with_capacity(b),
        alignments: Vec::with_capacity(b),
        n_frames: lengths.clone(),
        truncated,
    };
    for (i, &n) in lengths.iter().enumerate() {
        out.mel_post.push(slice(mel_post, i, n));
        out.mel_pre.push(slice(mel_pre, i, n));
        let l = mem.regions;
        out.alignments.push(Array2::from_shape_fn((n, l), |(t, j)| {
            tape.value(weights[t])[[i, j]].as_f64() as f32
        }));
    }
    Ok(out)
}

/// Header of an alignment dump: `u32` header length, this JSON, then
/// `frames × regions` little-endian f32 weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentHeader {
    pub image_id: String,
    pub frames: usize,
    pub regions: usize,
    pub truncated: bool,
}

pub fn write_alignment(path: &std::path::Path, header: &AlignmentHeader, weights: &Array2<f32>) -> Result<()> {
    if weights.dim() != (header.frames, header.regions) {
        return Err(SasError::Input(format!(
            "alignment is {:?}, header says {}×{}",
            weights.dim(),
            header.frames,
            header.regions
        )));
    }
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(4 + json.len() + weights.len() * 4);
    out.extend((json.len() as u32).to_le_bytes());
    out.extend(&json);
    for v in weights.iter() {
        out.extend(v.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| SasError::io(path, e))
}

pub fn read_alignment(path: &std::path::Path) -> Result<(AlignmentHeader, Array2<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| SasError::io(path, e))?;
    if bytes.len() < 4 {
        return Err(SasError::format("alignment", "missing header length"));
    }
    let n = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let json = bytes.get(4..4 + n).ok_or_else(|| SasError::format("alignment", "truncated header"))?;
    let header: AlignmentHeader =
        serde_json::from_slice(json).map_err(|e| SasError::format("alignment", e.to_string()))?;
    let body = &bytes[4 + n..];
    if body.len() != header.frames * header.regions * 4 {
        return Err(SasError::format("alignment", "body size does not match header"));
    }
    let values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let weights = Array2::from_shape_vec((header.frames, header.regions), values).expect("sized");
    Ok((header, weights))
}
