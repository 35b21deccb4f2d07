//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! Every value on the tape is a 2-D matrix; vectors are `1 × n` rows and
//! batched sequences are stacked as `(batch · time) × channels`. Operations
//! are evaluated eagerly when recorded, so autoregressive loops can inspect
//! intermediate values (e.g. stop probabilities) while the graph is built.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis};

use crate::error::{Result, SasError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 1-D convolution unfolded into patches.
///
/// Input rows are laid out as `item · t_in + t`; output rows as
/// `item · t_out + t'`. Output column `k · channels + c` holds input position
/// `t' · stride + k − pad`, or zero when that position falls outside
/// `[0, lengths[item])`.
#[derive(Debug, Clone)]
pub struct PatchSpec {
    pub lengths: Vec<usize>,
    pub t_in: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PatchSpec {
    pub fn t_out(&self) -> usize {
        conv_out_len(self.t_in, self.kernel, self.stride, self.pad)
    }

    fn source(&self, item: usize, t_out: usize, k: usize) -> Option<usize> {
        let pos = (t_out * self.stride + k) as isize - self.pad as isize;
        if pos < 0 || pos as usize >= self.lengths[item] {
            None
        } else {
            Some(item * self.t_in + pos as usize)
        }
    }
}

/// Output length of a padded, strided 1-D convolution.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    if len + 2 * pad < kernel {
        0
    } else {
        (len + 2 * pad - kernel) / stride + 1
    }
}

#[derive(Debug, Clone)]
enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    SoftmaxRows(Var),
    BlockWeightedSum { alpha: Var, memory: Var },
    Patches(Var, PatchSpec),
    SumAll(Var),
    MaskedMse { pred: Var, target: Array2<T>, row_weights: Vec<T>, denom: T },
    BceLogits { logits: Var, targets: Vec<T>, row_weights: Vec<T>, pos_weight: T, denom: T },
    Mms { image: Var, speech: Var, margin: T, excluded: Vec<Vec<bool>> },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::Reshape(..) => "reshape",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::BlockWeightedSum { .. } => "block_weighted_sum",
            Op::Patches(..) => "patches",
            Op::SumAll(..) => "sum_all",
            Op::MaskedMse { .. } => "masked_mse",
            Op::BceLogits { .. } => "bce_logits",
            Op::Mms { .. } => "mms",
        }
    }
}

struct Node<T: Real> {
    value: Array2<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients accumulated for every parameter touched by a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    grads: HashMap<ParamId, Array2<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Array2<T>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Array2<T>)> {
        self.grads.iter()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.iter())
            .map(|v| {
                let v = v.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.grads.values_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(crate::tensor::all_finite)
    }
}

pub struct Tape<'p, T: Real> {
    nodes: Vec<Node<T>>,
    store: &'p ParamStore<T>,
    param_vars: HashMap<ParamId, Var>,
    track_params: bool,
}

impl<'p, T: Real> Tape<'p, T> {
    /// A tape whose parameter leaves receive gradients.
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self {
            nodes: Vec::new(),
            store,
            param_vars: HashMap::new(),
            track_params: true,
        }
    }

    /// A tape for pure evaluation: parameters enter as constants.
    pub fn inference(store: &'p ParamStore<T>) -> Self {
        Self {
            track_params: false,
            ..Self::new(store)
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradients; used to differentiate w.r.t. inputs.
    pub fn input(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.track_params {
            self.push(value, Op::Param(id), true)
        } else {
            self.push(value, Op::Leaf, false)
        };
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Adds a `1 × n` row to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let value = self.value(x) + self.value(bias);
        let ng = self.ng(x) || self.ng(bias);
        self.push(value, Op::AddRowBias(x, bias), ng)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).mapv(|v| v * factor);
        let ng = self.ng(x);
        self.push(value, Op::Scale(x, factor), ng)
    }

    pub fn offset(&mut self, x: Var, shift: T) -> Var {
        let value = self.value(x).mapv(|v| v + shift);
        let ng = self.ng(x);
        self.push(value, Op::Offset(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.tanh());
        let ng = self.ng(x);
        self.push(value, Op::Tanh(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        let ng = self.ng(x);
        self.push(value, Op::Sigmoid(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.ng(x);
        self.push(value, Op::Relu(x), ng)
    }

    /// `x · w + b` with `w: in × out` and `b: 1 × out`.
    pub fn affine(&mut self, x: Var, weight: ParamId, bias: ParamId) -> Var {
        let w = self.param(weight);
        let b = self.param(bias);
        let xw = self.matmul(x, w);
        self.add_row_bias(xw, b)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice(s![.., start..end]).to_owned();
        let ng = self.ng(x);
        self.push(value, Op::SliceCols(x, start), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Output row `i` is input row `index[i]`; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Var {
        let src = self.value(x);
        let mut value = Array2::zeros((index.len(), src.ncols()));
        for (i, &r) in index.iter().enumerate() {
            value.row_mut(i).assign(&src.row(r));
        }
        let ng = self.ng(x);
        self.push(value, Op::GatherRows(x, index), ng)
    }

    /// Row-major reshape preserving element order.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(x);
        let flat: Vec<T> = src.iter().copied().collect();
        let value = Array2::from_shape_vec((rows, cols), flat).expect("element count preserved");
        let ng = self.ng(x);
        self.push(value, Op::Reshape(x), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum: T = row.iter().copied().sum();
            row.mapv_inplace(|v| v / sum);
        }
        let ng = self.ng(x);
        self.push(value, Op::SoftmaxRows(x), ng)
    }

    /// `out[b] = Σ_j alpha[b, j] · memory[b · n + j]` for `alpha: B × n`.
    pub fn block_weighted_sum(&mut self, alpha: Var, memory: Var) -> Var {
        let a = self.value(alpha);
        let m = self.value(memory);
        let (batch, n) = a.dim();
        assert_eq!(m.nrows(), batch * n, "memory rows must equal batch × positions");
        let mut value = Array2::zeros((batch, m.ncols()));
        for b in 0..batch {
            let block = m.slice(s![b * n..(b + 1) * n, ..]);
            let weighted = a.row(b).dot(&block);
            value.row_mut(b).assign(&weighted);
        }
        let ng = self.ng(alpha) || self.ng(memory);
        self.push(value, Op::BlockWeightedSum { alpha, memory }, ng)
    }

    pub fn patches(&mut self, x: Var, spec: PatchSpec) -> Var {
        let src = self.value(x);
        assert_eq!(src.ncols(), spec.channels);
        assert_eq!(src.nrows(), spec.lengths.len() * spec.t_in);
        let t_out = spec.t_out();
        let items = spec.lengths.len();
        let c = spec.channels;
        let mut value = Array2::zeros((items * t_out, spec.kernel * c));
        for item in 0..items {
            for t in 0..t_out {
                let mut row = value.row_mut(item * t_out + t);
                for k in 0..spec.kernel {
                    if let Some(r) = spec.source(item, t, k) {
                        row.slice_mut(s![k * c..(k + 1) * c]).assign(&src.row(r));
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(value, Op::Patches(x, spec), ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total: T = self.value(x).iter().copied().sum();
        let ng = self.ng(x);
        self.push(Array2::from_elem((1, 1), total), Op::SumAll(x), ng)
    }

    /// `Σ_r w_r Σ_c (pred − target)² / denom` as a `1 × 1` value.
    pub fn masked_mse(&mut self, pred: Var, target: Array2<T>, row_weights: Vec<T>, denom: T) -> Var {
        let p = self.value(pred);
        assert_eq!(p.dim(), target.dim());
        assert_eq!(row_weights.len(), p.nrows());
        let mut total = T::zero();
        for ((prow, trow), &w) in p.rows().into_iter().zip(target.rows()).zip(&row_weights) {
            if w == T::zero() {
                continue;
            }
            let sq: T = prow.iter().zip(trow.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum();
            total += w * sq;
        }
        let ng = self.ng(pred);
        self.push(
            Array2::from_elem((1, 1), total / denom),
            Op::MaskedMse { pred, target, row_weights, denom },
            ng,
        )
    }

    /// Weighted binary cross-entropy on an `N × 1` column of logits.
    pub fn bce_logits(
        &mut self,
        logits: Var,
        targets: Vec<T>,
        row_weights: Vec<T>,
        pos_weight: T,
        denom: T,
    ) -> Var {
        let x = self.value(logits);
        assert_eq!(x.ncols(), 1);
        assert_eq!(targets.len(), x.nrows());
        let mut total = T::zero();
        for i in 0..x.nrows() {
            let w = row_weights[i];
            if w == T::zero() {
                continue;
            }
            let z = x[[i, 0]];
            let y = targets[i];
            total += w * (pos_weight * y * softplus(-z) + (T::one() - y) * softplus(z));
        }
        let ng = self.ng(logits);
        self.push(
            Array2::from_elem((1, 1), total / denom),
            Op::BceLogits { logits, targets, row_weights, pos_weight, denom },
            ng,
        )
    }

    /// Symmetric masked-margin softmax over the dot-product similarity
    /// matrix of two `B × E` embedding batches. `excluded[i][j]` removes the
    /// pair from the negatives of row `i` (and of column `j`).
    pub fn mms(&mut self, image: Var, speech: Var, margin: T, excluded: Vec<Vec<bool>>) -> Var {
        let sim = self.value(image).dot(&self.value(speech).t());
        let (loss, _) = mms_forward(&sim, margin, &excluded);
        let ng = self.ng(image) || self.ng(speech);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::Mms { image, speech, margin, excluded },
            ng,
        )
    }

    /// First node holding a non-finite value, reported by op name.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            if crate::tensor::all_finite(&n.value) {
                None
            } else {
                let what = match &n.op {
                    Op::Param(id) => format!("parameter {}", self.store.name(*id)),
                    op => format!("op {}", op.name()),
                };
                Some(format!("node #{i} ({what}, shape {:?})", n.value.dim()))
            }
        })
    }

    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if crate::tensor::all_finite(self.value(v)) {
            Ok(())
        } else {
            let first = self.first_non_finite().unwrap_or_else(|| "unknown".into());
            Err(SasError::Numerical(format!("non-finite {what}; first non-finite tensor: {first}")))
        }
    }

    /// Backpropagates from a `1 × 1` value and returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        self.backward_inner(loss, &[]).0
    }

    /// Backpropagates and additionally returns gradients for the given vars
    /// (zeros when a var does not influence the loss).
    pub fn backward_wrt(&self, loss: Var, wrt: &[Var]) -> (Gradients<T>, Vec<Array2<T>>) {
        self.backward_inner(loss, wrt)
    }

    fn backward_inner(&self, loss: Var, wrt: &[Var]) -> (Gradients<T>, Vec<Array2<T>>) {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut keep = vec![false; self.nodes.len()];
        for v in wrt {
            keep[v.0] = true;
        }
        let mut grads: Vec<Option<Array2<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::from_elem((1, 1), T::one()));
        let mut param_grads: HashMap<ParamId, Array2<T>> = HashMap::new();
        let mut kept: HashMap<usize, Array2<T>> = HashMap::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad && !keep[i] {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if keep[i] {
                kept.insert(i, g.clone());
            }
            self.propagate(node, g, &mut grads, &mut param_grads);
        }
        let wrt_grads = wrt
            .iter()
            .map(|v| {
                kept.remove(&v.0)
                    .unwrap_or_else(|| Array2::zeros(self.value(*v).dim()))
            })
            .collect();
        (Gradients { grads: param_grads }, wrt_grads)
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: Array2<T>,
        grads: &mut [Option<Array2<T>>],
        param_grads: &mut HashMap<ParamId, Array2<T>>,
    ) {
        let val = |v: Var| &self.nodes[v.0].value;
        let send = |v: Var, d: Array2<T>, grads: &mut [Option<Array2<T>>]| {
            if self.nodes[v.0].needs_grad {
                accumulate(&mut grads[v.0], d);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => match param_grads.get_mut(id) {
                Some(acc) => *acc += &g,
                None => {
                    param_grads.insert(*id, g);
                }
            },
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    send(*a, g.dot(&val(*b).t()), grads);
                }
                if self.ng(*b) {
                    send(*b, val(*a).t().dot(&g), grads);
                }
            }
            Op::Add(a, b) => {
                if self.ng(*b) {
                    send(*b, g.clone(), grads);
                }
                send(*a, g, grads);
            }
            Op::Sub(a, b) => {
                if self.ng(*b) {
                    send(*b, g.mapv(|v| -v), grads);
                }
                send(*a, g, grads);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    send(*a, &g * val(*b), grads);
                }
                if self.ng(*b) {
                    send(*b, &g * val(*a), grads);
                }
            }
            Op::AddRowBias(x, b) => {
                if self.ng(*b) {
                    send(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)), grads);
                }
                send(*x, g, grads);
            }
            Op::Scale(x, f) => {
                let f = *f;
                send(*x, g.mapv(|v| v * f), grads);
            }
            Op::Offset(x) => send(*x, g, grads),
            Op::Tanh(x) => {
                let mut d = g;
                ndarray::Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| *d = *d * (T::one() - y * y));
                send(*x, d, grads);
            }
            Op::Sigmoid(x) => {
                let mut d = g;
                ndarray::Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| *d = *d * y * (T::one() - y));
                send(*x, d, grads);
            }
            Op::Relu(x) => {
                let mut d = g;
                ndarray::Zip::from(&mut d).and(&node.value).for_each(|d, &y| {
                    if y <= T::zero() {
                        *d = T::zero()
                    }
                });
                send(*x, d, grads);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).ncols();
                    if self.ng(p) {
                        send(p, g.slice(s![.., start..start + w]).to_owned(), grads);
                    }
                    start += w;
                }
            }
            Op::SliceCols(x, start) => {
                let mut d = Array2::zeros(val(*x).dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                send(*x, d, grads);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = val(p).nrows();
                    if self.ng(p) {
                        send(p, g.slice(s![start..start + h, ..]).to_owned(), grads);
                    }
                    start += h;
                }
            }
            Op::GatherRows(x, index) => {
                let mut d = Array2::zeros(val(*x).dim());
                for (i, &r) in index.iter().enumerate() {
                    let mut row = d.row_mut(r);
                    row += &g.row(i);
                }
                send(*x, d, grads);
            }
            Op::Reshape(x) => {
                let dim = val(*x).dim();
                let flat: Vec<T> = g.iter().copied().collect();
                send(*x, Array2::from_shape_vec(dim, flat).expect("shape"), grads);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut d = Array2::zeros(y.dim());
                for r in 0..y.nrows() {
                    let dot: T = g.row(r).iter().zip(y.row(r).iter()).map(|(&a, &b)| a * b).sum();
                    for c in 0..y.ncols() {
                        d[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                    }
                }
                send(*x, d, grads);
            }
            Op::BlockWeightedSum { alpha, memory } => {
                let a = val(*alpha);
                let m = val(*memory);
                let (batch, n) = a.dim();
                if self.ng(*alpha) {
                    let mut da = Array2::zeros(a.dim());
                    for b in 0..batch {
                        let block = m.slice(s![b * n..(b + 1) * n, ..]);
                        da.row_mut(b).assign(&block.dot(&g.row(b)));
                    }
                    send(*alpha, da, grads);
                }
                if self.ng(*memory) {
                    let mut dm = Array2::zeros(m.dim());
                    for b in 0..batch {
                        for j in 0..n {
                            let w = a[[b, j]];
                            dm.row_mut(b * n + j).assign(&g.row(b).mapv(|v| v * w));
                        }
                    }
                    send(*memory, dm, grads);
                }
            }
            Op::Patches(x, spec) => {
                let mut d = Array2::zeros(val(*x).dim());
                let t_out = spec.t_out();
                let c = spec.channels;
                for item in 0..spec.lengths.len() {
                    for t in 0..t_out {
                        let grow = g.row(item * t_out + t);
                        for k in 0..spec.kernel {
                            if let Some(r) = spec.source(item, t, k) {
                                let mut drow = d.row_mut(r);
                                drow += &grow.slice(s![k * c..(k + 1) * c]);
                            }
                        }
                    }
                }
                send(*x, d, grads);
            }
            Op::SumAll(x) => {
                let g0 = g[[0, 0]];
                send(*x, Array2::from_elem(val(*x).dim(), g0), grads);
            }
            Op::MaskedMse { pred, target, row_weights, denom } => {
                let g0 = g[[0, 0]];
                let p = val(*pred);
                let two = T::lit(2.0);
                let mut d = p - target;
                for (mut row, &w) in d.rows_mut().into_iter().zip(row_weights) {
                    let f = two * w * g0 / *denom;
                    row.mapv_inplace(|v| v * f);
                }
                send(*pred, d, grads);
            }
            Op::BceLogits { logits, targets, row_weights, pos_weight, denom } => {
                let g0 = g[[0, 0]];
                let x = val(*logits);
                let mut d = Array2::zeros(x.dim());
                for i in 0..x.nrows() {
                    let w = row_weights[i];
                    if w == T::zero() {
                        continue;
                    }
                    let s = sigmoid(x[[i, 0]]);
                    let y = targets[i];
                    let dz = *pos_weight * y * (s - T::one()) + (T::one() - y) * s;
                    d[[i, 0]] = w * dz * g0 / *denom;
                }
                send(*logits, d, grads);
            }
            Op::Mms { image, speech, margin, excluded } => {
                let g0 = g[[0, 0]];
                let im = val(*image);
                let sp = val(*speech);
                let sim = im.dot(&sp.t());
                let (_, mut dsim) = mms_forward(&sim, *margin, excluded);
                dsim.mapv_inplace(|v| v * g0);
                if self.ng(*image) {
                    send(*image, dsim.dot(sp), grads);
                }
                if self.ng(*speech) {
                    send(*speech, dsim.t().dot(im), grads);
                }
            }
        }
    }
}

fn accumulate<T: Real>(slot: &mut Option<Array2<T>>, d: Array2<T>) {
    match slot {
        Some(acc) => *acc += &d,
        None => *slot = Some(d),
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Loss value and its gradient w.r.t. the similarity matrix.
fn mms_forward<T: Real>(sim: &Array2<T>, margin: T, excluded: &[Vec<bool>]) -> (T, Array2<T>) {
    let n = sim.nrows();
    let mut dsim = Array2::zeros((n, n));
    if n == 0 {
        return (T::zero(), dsim);
    }
    let scale = T::one() / (T::lit(2.0) * T::lit(n as f64));
    let mut total = T::zero();
    // direction 0: image i against all speech j; direction 1: speech i against images.
    for dir in 0..2 {
        for i in 0..n {
            let at = |j: usize| if dir == 0 { (i, j) } else { (j, i) };
            let logits: Vec<(usize, T)> = (0..n)
                .filter(|&j| j == i || !excluded[at(j).0][at(j).1])
                .map(|j| {
                    let s = sim[at(j)];
                    (j, if j == i { s - margin } else { s })
                })
                .collect();
            let max = logits.iter().fold(T::neg_infinity(), |m, &(_, z)| m.max(z));
            let sum: T = logits.iter().map(|&(_, z)| (z - max).exp()).sum();
            let lse = max + sum.ln();
            let pos = sim[(i, i)] - margin;
            total += lse - pos;
            for &(j, z) in &logits {
                let p = (z - lse).exp();
                let target = if j == i { T::one() } else { T::zero() };
                dsim[at(j)] += (p - target) * scale;
            }
        }
    }
    (total * scale, dsim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_check(build: impl Fn(&mut Tape<f64>, Var) -> Var, x0: Array2<f64>) {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(x0.clone());
        let y = build(&mut tape, x);
        let (_, g) = tape.backward_wrt(y, &[x]);
        let h = 1e-6;
        for idx in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.as_slice_mut().unwrap()[idx] += delta;
                let mut t = Tape::new(&store);
                let xv = t.input(xp);
                let yv = build(&mut t, xv);
                t.scalar(yv)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = g[0].as_slice().unwrap()[idx];
            assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "idx {idx}: fd {fd} an {an}");
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let x0 = array![[0.3, -0.7, 1.1], [0.2, 0.5, -1.4]];
        fd_check(
            |t, x| {
                let a = t.tanh(x);
                let b = t.sigmoid(x);
                let c = t.mul(a, b);
                let d = t.softmax_rows(c);
                let e = t.mul(d, x);
                t.sum_all(e)
            },
            x0,
        );
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let x0 = array![[0.3, -0.7, 1.1, 0.4], [0.2, 0.5, -1.4, 0.9], [1.0, -0.2, 0.3, 0.1]];
        fd_check(
            |t, x| {
                let a = t.slice_cols(x, 1, 3);
                let b = t.concat_cols(&[x, a]);
                let c = t.gather_rows(b, vec![2, 0, 0, 1]);
                let r = t.reshape(c, 6, 4);
                let cr = t.concat_rows(&[r, x]);
                let sq = t.mul(cr, cr);
                let th = t.tanh(sq);
                t.sum_all(th)
            },
            x0,
        );
    }

    #[test]
    fn patches_and_block_sum_match_finite_differences() {
        // two items of 3 positions, 2 channels; second item has length 2
        let x0 = array![[0.1, 0.2], [0.3, -0.4], [0.5, 0.6], [-0.7, 0.8], [0.9, 1.0], [1.1, -1.2]];
        fd_check(
            |t, x| {
                let spec = PatchSpec { lengths: vec![3, 2], t_in: 3, channels: 2, kernel: 3, stride: 1, pad: 1 };
                let p = t.patches(x, spec);
                let sq = t.mul(p, p);
                let alpha = t.slice_cols(sq, 0, 3);
                let alpha = t.gather_rows(alpha, vec![0, 3]);
                let alpha = t.softmax_rows(alpha);
                let out = t.block_weighted_sum(alpha, x);
                let th = t.tanh(out);
                t.sum_all(th)
            },
            x0,
        );
    }

    #[test]
    fn losses_match_finite_differences() {
        let x0 = array![[0.3, -0.7], [0.2, 0.5], [1.0, -0.2]];
        fd_check(
            |t, x| {
                let m = t.masked_mse(x, array![[0.0, 1.0], [0.5, 0.5], [9.0, 9.0]], vec![1.0, 1.0, 0.0], 4.0);
                let col = t.slice_cols(x, 0, 1);
                let b = t.bce_logits(col, vec![0.0, 1.0, 1.0], vec![1.0, 1.0, 1.0], 5.0, 3.0);
                let sp = t.tanh(x);
                let e = t.mms(x, sp, 0.7, vec![vec![true, false, false], vec![false, true, true], vec![false, true, true]]);
                let s = t.add(m, b);
                t.add(s, e)
            },
            x0,
        );
    }

    #[test]
    fn patch_geometry_with_stride() {
        assert_eq!(conv_out_len(10, 9, 2, 4), 5);
        assert_eq!(conv_out_len(9, 9, 2, 4), 5);
        assert_eq!(conv_out_len(36, 31, 1, 15), 36);
        assert_eq!(conv_out_len(0, 3, 1, 0), 0);
    }

    #[test]
    fn inference_tape_has_no_param_gradients() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", array![[2.0]]);
        let mut tape = Tape::inference(&store);
        let x = tape.constant(array![[3.0]]);
        let wv = tape.param(w);
        let y = tape.matmul(x, wv);
        assert_eq!(tape.scalar(y), 6.0);
        assert!(tape.backward(y).get(w).is_none());
    }
}
