//! Reverse-mode automatic differentiation over a fixed kernel set.
//!
//! The tape is an append-only arena of nodes. Parameters are leaves
//! registered once and marked persistent; every forward pass appends
//! intermediate nodes on top and [`Tape::reset`] drops them again, so
//! a training loop reuses one tape for its whole life.
//!
//! Gradient semantics: [`Tape::backward`] *accumulates* into `grad`
//! buffers. Repeated calls without [`Tape::zero_grad`] sum their
//! contributions; the optimizer is expected to zero grads between
//! steps. This is deliberate (it makes batch-of-sequences loss sums
//! trivial) and is pinned by a test.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, usage_err, Result};
use crate::kernels as kn;
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

impl Var {
    /// Stable node index; optimizer state is keyed on it.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    /// [r,c] + [c], bias broadcast over rows.
    AddBias(Var, Var),
    /// Row i scaled by a constant factor; factors carry no gradient.
    ScaleRows(Var, Vec<T>),
    MatMul(Var, Var),
    /// A @ B^T where B is stored [n,k].
    MatMulNT(Var, Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        eps: T,
    },
    Gelu(Var),
    Silu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    /// Rows of `src` placed at `positions` of a [rows, d] zero matrix.
    ScatterRows {
        src: Var,
        positions: Vec<usize>,
    },
    SliceRows {
        input: Var,
        start: usize,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    MaskedCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        count: usize,
    },
    Detach,
    /// im2col over an [h,w,c] map: output [oh*ow, k*k*c].
    Unfold {
        input: Var,
        k: usize,
        stride: usize,
        pad: usize,
    },
    /// Nearest-neighbor 2x upsampling of an [h,w,c] map.
    Upsample2x(Var),
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    persistent: usize,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            persistent: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf. `requires_grad` marks it as a parameter.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Marks everything registered so far as surviving [`Tape::reset`].
    pub fn mark_persistent(&mut self) {
        self.persistent = self.nodes.len();
    }

    /// Drops all nodes added after [`Tape::mark_persistent`].
    pub fn reset(&mut self) {
        self.nodes.truncate(self.persistent);
    }

    /// Drops nodes past an explicit high-water mark (never below the
    /// persistent prefix).
    pub fn truncate_to(&mut self, mark: usize) {
        debug_assert!(mark >= self.persistent);
        self.nodes.truncate(mark);
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn grad_mut(&mut self, v: Var) -> Option<&mut Tensor<T>> {
        self.nodes[v.0].grad.as_mut()
    }

    /// Overwrites a leaf's value in place (optimizer updates).
    pub fn set_value(&mut self, v: Var, value: Tensor<T>) {
        debug_assert_eq!(self.nodes[v.0].value.shape(), value.shape());
        self.nodes[v.0].value = value;
    }

    pub fn value_mut(&mut self, v: Var) -> &mut Tensor<T> {
        &mut self.nodes[v.0].value
    }

    pub fn zero_grad(&mut self, v: Var) {
        self.nodes[v.0].grad = None;
    }

    pub fn zero_all_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        #[cfg(debug_assertions)]
        debug_assert!(
            value.all_finite(),
            "non-finite values produced by {:?}",
            core::mem::discriminant(&op)
        );
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- kernels ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err!("add {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let mut out = ta.clone();
        for (o, &x) in out.data_mut().iter_mut().zip(tb.data()) {
            *o += x;
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err!("sub {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let mut out = ta.clone();
        for (o, &x) in out.data_mut().iter_mut().zip(tb.data()) {
            *o -= x;
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err!("mul {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let mut out = ta.clone();
        for (o, &x) in out.data_mut().iter_mut().zip(tb.data()) {
            *o *= x;
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o *= factor;
        }
        let rg = self.needs(a);
        self.push(out, rg, Op::Scale(a, factor))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if ta.shape().len() != 2 || tb.shape() != [ta.cols()] {
            return Err(shape_err!(
                "add_bias {:?} + {:?}",
                ta.shape(),
                tb.shape()
            ));
        }
        let cols = ta.cols();
        let mut out = ta.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += tb.data()[i % cols];
        }
        let rg = self.needs(a) || self.needs(bias);
        Ok(self.push(out, rg, Op::AddBias(a, bias)))
    }

    /// Multiplies row i of a 2-d tensor by `factors[i]` (no gradient
    /// into the factors; used for masking rows in and out).
    pub fn scale_rows(&mut self, a: Var, factors: Vec<T>) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 || ta.rows() != factors.len() {
            return Err(shape_err!(
                "scale_rows {:?} with {} factors",
                ta.shape(),
                factors.len()
            ));
        }
        let cols = ta.cols();
        let mut out = ta.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o *= factors[i / cols];
        }
        let rg = self.needs(a);
        Ok(self.push(out, rg, Op::ScaleRows(a, factors)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(shape_err!("matmul {:?} @ {:?}", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Tensor::zeros(vec![m, n]);
        kn::mm_nn(out.data_mut(), ta.data(), tb.data(), m, k, n);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, rg, Op::MatMul(a, b)))
    }

    /// a @ b^T with b stored [n,k]; the layout attention wants.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.cols() {
            return Err(shape_err!("matmul_nt {:?} @ {:?}^T", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = Tensor::zeros(vec![m, n]);
        kn::mm_nt(out.data_mut(), ta.data(), tb.data(), m, k, n);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, rg, Op::MatMulNT(a, b)))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.shape().len() {
            return Err(usage_err!(
                "softmax axis {} out of range for shape {:?}",
                axis,
                ta.shape()
            ));
        }
        let mut out = ta.clone();
        for_each_lane_mut(out.shape().to_vec(), axis, out.data_mut(), |lane, stride| {
            if stride == 1 {
                kn::softmax_lane(lane);
            } else {
                softmax_strided(lane, stride);
            }
        });
        let rg = self.needs(a);
        Ok(self.push(out, rg, Op::Softmax { input: a, axis }))
    }

    /// Layer norm over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, input: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (tx, tg, tb) = (self.value(input), self.value(gain), self.value(bias));
        let last = *tx.shape().last().unwrap();
        if tg.shape() != [last] || tb.shape() != [last] {
            return Err(shape_err!(
                "layer_norm over {:?} with gain {:?} bias {:?}",
                tx.shape(),
                tg.shape(),
                tb.shape()
            ));
        }
        let mut out = tx.clone();
        let (gd, bd) = (tg.data(), tb.data());
        for lane in out.data_mut().chunks_mut(last) {
            kn::layer_norm_lane(lane, eps);
            for (j, v) in lane.iter_mut().enumerate() {
                *v = *v * gd[j] + bd[j];
            }
        }
        let rg = self.needs(input) || self.needs(gain) || self.needs(bias);
        Ok(self.push(out, rg, Op::LayerNorm { input, gain, bias, eps }))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v = kn::gelu(*v);
        }
        let rg = self.needs(a);
        self.push(out, rg, Op::Gelu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v = kn::silu(*v);
        }
        let rg = self.needs(a);
        self.push(out, rg, Op::Silu(a))
    }

    /// Row lookup: out[i] = table[ids[i]].
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.shape().len() != 2 {
            return Err(shape_err!("embedding table must be 2-d, got {:?}", tt.shape()));
        }
        let (rows, d) = (tt.rows(), tt.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(usage_err!("embedding id {} out of range (table rows {})", bad, rows));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(tt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.needs(table);
        Ok(self.push(
            out,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Places row i of `src` at row `positions[i]` of a [rows, d]
    /// zero matrix. Positions must be distinct and in range.
    pub fn scatter_rows(&mut self, src: Var, positions: &[usize], rows: usize) -> Result<Var> {
        let ts = self.value(src);
        if ts.shape().len() != 2 || ts.rows() != positions.len() {
            return Err(shape_err!(
                "scatter_rows src {:?} with {} positions",
                ts.shape(),
                positions.len()
            ));
        }
        let d = ts.cols();
        let mut seen = vec![false; rows];
        for &p in positions {
            if p >= rows {
                return Err(usage_err!("scatter position {} out of range {}", p, rows));
            }
            if seen[p] {
                return Err(usage_err!("duplicate scatter position {}", p));
            }
            seen[p] = true;
        }
        let mut out = Tensor::zeros(vec![rows, d]);
        for (i, &p) in positions.iter().enumerate() {
            out.data_mut()[p * d..(p + 1) * d].copy_from_slice(ts.row(i));
        }
        let rg = self.needs(src);
        Ok(self.push(
            out,
            rg,
            Op::ScatterRows {
                src,
                positions: positions.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 || start + len > ta.rows() {
            return Err(shape_err!(
                "slice_rows [{start}, {start}+{len}) of {:?}",
                ta.shape()
            ));
        }
        let d = ta.cols();
        let data = ta.data()[start * d..(start + len) * d].to_vec();
        let out = Tensor::new(vec![len, d], data)?;
        let rg = self.needs(a);
        Ok(self.push(out, rg, Op::SliceRows { input: a, start }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 || start + len > ta.cols() {
            return Err(shape_err!(
                "slice_cols [{start}, {start}+{len}) of {:?}",
                ta.shape()
            ));
        }
        let (rows, cols) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&ta.data()[i * cols + start..i * cols + start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        let rg = self.needs(a);
        Ok(self.push(out, rg, Op::SliceCols { input: a, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(usage_err!("concat_rows of zero parts"));
        }
        let d = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            let tp = self.value(p);
            if tp.shape().len() != 2 || tp.cols() != d {
                return Err(shape_err!("concat_rows mixes widths"));
            }
            rows += tp.rows();
        }
        let mut data = Vec::with_capacity(rows * d);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, d], data)?;
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(usage_err!("concat_cols of zero parts"));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let tp = self.value(p);
            if tp.shape().len() != 2 || tp.rows() != rows {
                return Err(shape_err!("concat_cols mixes heights"));
            }
            cols += tp.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, rg, Op::ConcatCols(parts.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.needs(a);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let s = ta.data().iter().copied().sum::<T>() / T::from_usize(ta.numel());
        let rg = self.needs(a);
        self.push(Tensor::scalar(s), rg, Op::Mean(a))
    }

    /// Mean of -log softmax(logits)[target] over masked rows.
    /// Returns the scalar loss and the masked-row count; an empty mask
    /// yields (0, 0) by definition.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<(Var, usize)> {
        let tl = self.value(logits);
        if tl.shape().len() != 2 || tl.rows() != targets.len() || tl.rows() != mask.len() {
            return Err(shape_err!(
                "masked_cross_entropy logits {:?}, {} targets, {} mask bits",
                tl.shape(),
                targets.len(),
                mask.len()
            ));
        }
        let vocab = tl.cols();
        for (i, &t) in targets.iter().enumerate() {
            if mask[i] && t >= vocab {
                return Err(usage_err!("target {} out of vocabulary {} at row {}", t, vocab, i));
            }
        }
        let count = mask.iter().filter(|&&m| m).count();
        let mut loss = T::ZERO;
        if count > 0 {
            for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                if m {
                    let row = tl.row(i);
                    loss += kn::log_sum_exp(row) - row[t];
                }
            }
            loss /= T::from_usize(count);
        }
        let rg = self.needs(logits);
        let var = self.push(
            Tensor::scalar(loss),
            rg,
            Op::MaskedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
        );
        Ok((var, count))
    }

    /// Identity forward, zero backward: the stop-gradient primitive.
    pub fn detach(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(out, false, Op::Detach)
    }

    /// im2col: [h,w,c] -> [oh*ow, k*k*c] with zero padding.
    pub fn unfold(&mut self, a: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 3 {
            return Err(shape_err!("unfold wants [h,w,c], got {:?}", ta.shape()));
        }
        let (h, w, c) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (oh, ow) = conv_out_dims(h, w, k, stride, pad)?;
        let mut data = vec![T::ZERO; oh * ow * k * k * c];
        let src = ta.data();
        let mut idx = 0;
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..k {
                    let y = (oy * stride + ky) as isize - pad as isize;
                    for kx in 0..k {
                        let x = (ox * stride + kx) as isize - pad as isize;
                        if y >= 0 && (y as usize) < h && x >= 0 && (x as usize) < w {
                            let off = (y as usize * w + x as usize) * c;
                            data[idx..idx + c].copy_from_slice(&src[off..off + c]);
                        }
                        idx += c;
                    }
                }
            }
        }
        let out = Tensor::new(vec![oh * ow, k * k * c], data)?;
        let rg = self.needs(a);
        Ok(self.push(out, rg, Op::Unfold { input: a, k, stride, pad }))
    }

    /// Nearest-neighbor 2x upsample of an [h,w,c] map.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 3 {
            return Err(shape_err!("upsample2x wants [h,w,c], got {:?}", ta.shape()));
        }
        let (h, w, c) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let mut data = vec![T::ZERO; 4 * h * w * c];
        let src = ta.data();
        for y in 0..2 * h {
            for x in 0..2 * w {
                let s = ((y / 2) * w + x / 2) * c;
                let d = (y * 2 * w + x) * c;
                data[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
        let out = Tensor::new(vec![2 * h, 2 * w, c], data)?;
        let rg = self.needs(a);
        Ok(self.push(out, rg, Op::Upsample2x(a)))
    }

    /// Reinterprets a node under a new shape (same buffer length).
    /// Gradients flow through unchanged, so this is recorded as a
    /// zero-cost view op via Detach-like passthrough.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let rg = self.needs(a);
        // Scale-by-one reuses the Scale backward, which is shape-blind.
        Ok(self.push(out, rg, Op::Scale(a, T::ONE)))
    }

    // ---- backward -----------------------------------------------------

    /// Backpropagates from a scalar node, accumulating into `grad`
    /// buffers of every `requires_grad` node on the path.
    ///
    /// Intermediate (non-leaf) grads are cleared first so that calling
    /// `backward` twice adds exactly two passes into the leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(usage_err!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        // Seed d(loss)/d(loss) = 1.
        {
            let node = &mut self.nodes[loss.0];
            let g = node
                .grad
                .get_or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
            g.data_mut()[0] += T::ONE;
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let grad = node.grad.as_ref().unwrap();
            backward_op(&node.op, &node.value, grad, before);
        }
        Ok(())
    }
}

fn conv_out_dims(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<(usize, usize)> {
    let eh = h + 2 * pad;
    let ew = w + 2 * pad;
    if eh < k || ew < k || (eh - k) % stride != 0 || (ew - k) % stride != 0 {
        return Err(shape_err!(
            "conv geometry h={h} w={w} k={k} stride={stride} pad={pad} does not tile exactly"
        ));
    }
    Ok(((eh - k) / stride + 1, (ew - k) / stride + 1))
}

/// Applies `f` to every lane along `axis`. Lanes are materialized
/// contiguously only when needed; `stride == 1` means the lane is a
/// contiguous slice.
fn for_each_lane_mut<T: Real>(
    shape: Vec<usize>,
    axis: usize,
    data: &mut [T],
    mut f: impl FnMut(&mut [T], usize),
) {
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    if inner == 1 {
        for chunk in data.chunks_mut(lane) {
            f(chunk, 1);
        }
    } else {
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                // strided lane view: elements base, base+inner, ...
                let slice = &mut data[base..base + (lane - 1) * inner + 1];
                f(slice, inner);
            }
        }
    }
}

/// Softmax over a strided lane laid out as slice[0], slice[stride], ...
fn softmax_strided<T: Real>(slice: &mut [T], stride: usize) {
    let mut max = T::MIN_FINITE;
    let mut i = 0;
    while i < slice.len() {
        max = max.max(slice[i]);
        i += stride;
    }
    let mut sum = T::ZERO;
    i = 0;
    while i < slice.len() {
        slice[i] = (slice[i] - max).exp();
        sum += slice[i];
        i += stride;
    }
    i = 0;
    while i < slice.len() {
        slice[i] /= sum;
        i += stride;
    }
}

fn ensure_grad<T: Real>(node: &mut Node<T>) -> &mut Tensor<T> {
    let shape = node.value.shape().to_vec();
    node.grad.get_or_insert_with(|| Tensor::zeros(shape))
}

fn backward_op<T: Real>(op: &Op<T>, out_val: &Tensor<T>, g: &Tensor<T>, before: &mut [Node<T>]) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &v in [a, b] {
                if before[v.0].requires_grad {
                    let gv = ensure_grad(&mut before[v.0]);
                    kn::axpy(gv.data_mut(), T::ONE, g.data());
                }
            }
        }
        Op::Sub(a, b) => {
            if before[a.0].requires_grad {
                let ga = ensure_grad(&mut before[a.0]);
                kn::axpy(ga.data_mut(), T::ONE, g.data());
            }
            if before[b.0].requires_grad {
                let gb = ensure_grad(&mut before[b.0]);
                kn::axpy(gb.data_mut(), -T::ONE, g.data());
            }
        }
        Op::Mul(a, b) => {
            if before[a.0].requires_grad {
                let bv = before[b.0].value.data().to_vec();
                let ga = ensure_grad(&mut before[a.0]);
                for ((gi, &gg), &bv) in ga.data_mut().iter_mut().zip(g.data()).zip(&bv) {
                    *gi += gg * bv;
                }
            }
            if before[b.0].requires_grad {
                let av = before[a.0].value.data().to_vec();
                let gb = ensure_grad(&mut before[b.0]);
                for ((gi, &gg), &av) in gb.data_mut().iter_mut().zip(g.data()).zip(&av) {
                    *gi += gg * av;
                }
            }
        }
        Op::Scale(a, factor) => {
            if before[a.0].requires_grad {
                let ga = ensure_grad(&mut before[a.0]);
                kn::axpy(ga.data_mut(), *factor, g.data());
            }
        }
        Op::AddBias(a, bias) => {
            if before[a.0].requires_grad {
                let ga = ensure_grad(&mut before[a.0]);
                kn::axpy(ga.data_mut(), T::ONE, g.data());
            }
            if before[bias.0].requires_grad {
                let cols = before[bias.0].value.numel();
                let gb = ensure_grad(&mut before[bias.0]);
                for (i, &gg) in g.data().iter().enumerate() {
                    gb.data_mut()[i % cols] += gg;
                }
            }
        }
        Op::ScaleRows(a, factors) => {
            if before[a.0].requires_grad {
                let cols = g.cols();
                let ga = ensure_grad(&mut before[a.0]);
                for (i, (gi, &gg)) in ga.data_mut().iter_mut().zip(g.data()).enumerate() {
                    *gi += gg * factors[i / cols];
                }
            }
        }
        Op::MatMul(a, b) => {
            let (m, n) = (g.rows(), g.cols());
            let k = before[a.0].value.cols();
            if before[a.0].requires_grad {
                let bv = before[b.0].value.data().to_vec();
                let ga = ensure_grad(&mut before[a.0]);
                kn::mm_nt(ga.data_mut(), g.data(), &bv, m, n, k);
            }
            if before[b.0].requires_grad {
                let av = before[a.0].value.data().to_vec();
                let gb = ensure_grad(&mut before[b.0]);
                kn::mm_tn(gb.data_mut(), &av, g.data(), m, k, n);
            }
        }
        Op::MatMulNT(a, b) => {
            let (m, n) = (g.rows(), g.cols());
            let k = before[a.0].value.cols();
            if before[a.0].requires_grad {
                let bv = before[b.0].value.data().to_vec();
                let ga = ensure_grad(&mut before[a.0]);
                kn::mm_nn(ga.data_mut(), g.data(), &bv, m, n, k);
            }
            if before[b.0].requires_grad {
                let av = before[a.0].value.data().to_vec();
                let gb = ensure_grad(&mut before[b.0]);
                kn::mm_tn(gb.data_mut(), g.data(), &av, m, n, k);
            }
        }
        Op::Softmax { input, axis } => {
            if before[input.0].requires_grad {
                let shape = out_val.shape().to_vec();
                let lane = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let y = out_val.data();
                let gi = ensure_grad(&mut before[input.0]);
                let gd = gi.data_mut();
                for o in 0..outer {
                    for inn in 0..inner {
                        let base = o * lane * inner + inn;
                        let mut dot = T::ZERO;
                        for l in 0..lane {
                            let idx = base + l * inner;
                            dot += g.data()[idx] * y[idx];
                        }
                        for l in 0..lane {
                            let idx = base + l * inner;
                            gd[idx] += y[idx] * (g.data()[idx] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm { input, gain, bias, eps } => {
            let x = before[input.0].value.clone();
            let gain_v = before[gain.0].value.data().to_vec();
            let last = *x.shape().last().unwrap();
            let n = T::from_usize(last);
            // Recompute per-lane stats; cheaper than saving them.
            let lanes = x.numel() / last;
            let mut xhat = vec![T::ZERO; last];
            for lane_i in 0..lanes {
                let xs = &x.data()[lane_i * last..(lane_i + 1) * last];
                let gs = &g.data()[lane_i * last..(lane_i + 1) * last];
                let mean = xs.iter().copied().sum::<T>() / n;
                let mut var = T::ZERO;
                for &v in xs {
                    let d = v - mean;
                    var += d * d;
                }
                var /= n;
                let inv_std = T::ONE / (var + *eps).sqrt();
                for j in 0..last {
                    xhat[j] = (xs[j] - mean) * inv_std;
                }
                if before[gain.0].requires_grad {
                    let gg = ensure_grad(&mut before[gain.0]);
                    for j in 0..last {
                        gg.data_mut()[j] += gs[j] * xhat[j];
                    }
                }
                if before[bias.0].requires_grad {
                    let gb = ensure_grad(&mut before[bias.0]);
                    for j in 0..last {
                        gb.data_mut()[j] += gs[j];
                    }
                }
                if before[input.0].requires_grad {
                    let mut mean_gy = T::ZERO;
                    let mut mean_gyx = T::ZERO;
                    for j in 0..last {
                        let gy = gs[j] * gain_v[j];
                        mean_gy += gy;
                        mean_gyx += gy * xhat[j];
                    }
                    mean_gy /= n;
                    mean_gyx /= n;
                    let gx = ensure_grad(&mut before[input.0]);
                    let gxd = &mut gx.data_mut()[lane_i * last..(lane_i + 1) * last];
                    for j in 0..last {
                        let gy = gs[j] * gain_v[j];
                        gxd[j] += inv_std * (gy - mean_gy - xhat[j] * mean_gyx);
                    }
                }
            }
        }
        Op::Gelu(a) => {
            if before[a.0].requires_grad {
                let xv = before[a.0].value.data().to_vec();
                let ga = ensure_grad(&mut before[a.0]);
                for ((gi, &gg), &x) in ga.data_mut().iter_mut().zip(g.data()).zip(&xv) {
                    *gi += gg * kn::gelu_grad(x);
                }
            }
        }
        Op::Silu(a) => {
            if before[a.0].requires_grad {
                let xv = before[a.0].value.data().to_vec();
                let ga = ensure_grad(&mut before[a.0]);
                for ((gi, &gg), &x) in ga.data_mut().iter_mut().zip(g.data()).zip(&xv) {
                    *gi += gg * kn::silu_grad(x);
                }
            }
        }
        Op::Embedding { table, ids } => {
            if before[table.0].requires_grad {
                let d = g.cols();
                let gt = ensure_grad(&mut before[table.0]);
                for (i, &id) in ids.iter().enumerate() {
                    kn::axpy(&mut gt.data_mut()[id * d..(id + 1) * d], T::ONE, g.row(i));
                }
            }
        }
        Op::ScatterRows { src, positions } => {
            if before[src.0].requires_grad {
                let d = g.cols();
                let gs = ensure_grad(&mut before[src.0]);
                for (i, &p) in positions.iter().enumerate() {
                    kn::axpy(&mut gs.data_mut()[i * d..(i + 1) * d], T::ONE, g.row(p));
                }
            }
        }
        Op::SliceRows { input, start } => {
            if before[input.0].requires_grad {
                let d = g.cols();
                let gi = ensure_grad(&mut before[input.0]);
                let dst = &mut gi.data_mut()[start * d..];
                kn::axpy(&mut dst[..g.numel()], T::ONE, g.data());
            }
        }
        Op::SliceCols { input, start } => {
            if before[input.0].requires_grad {
                let in_cols = before[input.0].value.cols();
                let gi = ensure_grad(&mut before[input.0]);
                let (rows, len) = (g.rows(), g.cols());
                for i in 0..rows {
                    let dst = &mut gi.data_mut()[i * in_cols + start..i * in_cols + start + len];
                    kn::axpy(dst, T::ONE, g.row(i));
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let rows = before[p.0].value.rows();
                let d = before[p.0].value.cols();
                if before[p.0].requires_grad {
                    let gp = ensure_grad(&mut before[p.0]);
                    kn::axpy(
                        gp.data_mut(),
                        T::ONE,
                        &g.data()[offset * d..(offset + rows) * d],
                    );
                }
                offset += rows;
            }
        }
        Op::ConcatCols(parts) => {
            let rows = g.rows();
            let total = g.cols();
            let mut offset = 0;
            for &p in parts {
                let cols = before[p.0].value.cols();
                if before[p.0].requires_grad {
                    let gp = ensure_grad(&mut before[p.0]);
                    for i in 0..rows {
                        let src = &g.data()[i * total + offset..i * total + offset + cols];
                        kn::axpy(&mut gp.data_mut()[i * cols..(i + 1) * cols], T::ONE, src);
                    }
                }
                offset += cols;
            }
        }
        Op::Sum(a) => {
            if before[a.0].requires_grad {
                let g0 = g.data()[0];
                let ga = ensure_grad(&mut before[a.0]);
                for v in ga.data_mut() {
                    *v += g0;
                }
            }
        }
        Op::Mean(a) => {
            if before[a.0].requires_grad {
                let n = T::from_usize(before[a.0].value.numel());
                let g0 = g.data()[0] / n;
                let ga = ensure_grad(&mut before[a.0]);
                for v in ga.data_mut() {
                    *v += g0;
                }
            }
        }
        Op::MaskedCrossEntropy {
            logits,
            targets,
            mask,
            count,
        } => {
            if before[logits.0].requires_grad && *count > 0 {
                let lv = before[logits.0].value.clone();
                let vocab = lv.cols();
                let scale = g.data()[0] / T::from_usize(*count);
                let gl = ensure_grad(&mut before[logits.0]);
                let mut probs = vec![T::ZERO; vocab];
                for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    probs.copy_from_slice(lv.row(i));
                    kn::softmax_lane(&mut probs);
                    let grow = &mut gl.data_mut()[i * vocab..(i + 1) * vocab];
                    for (j, &p) in probs.iter().enumerate() {
                        let delta = if j == t { T::ONE } else { T::ZERO };
                        grow[j] += scale * (p - delta);
                    }
                }
            }
        }
        Op::Detach => {}
        Op::Unfold { input, k, stride, pad } => {
            if before[input.0].requires_grad {
                let ishape = before[input.0].value.shape().to_vec();
                let (h, w, c) = (ishape[0], ishape[1], ishape[2]);
                let (oh, ow) = conv_out_dims(h, w, *k, *stride, *pad).expect("checked at forward");
                let gi = ensure_grad(&mut before[input.0]);
                let dst = gi.data_mut();
                let mut idx = 0;
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ky in 0..*k {
                            let y = (oy * stride + ky) as isize - *pad as isize;
                            for kx in 0..*k {
                                let x = (ox * stride + kx) as isize - *pad as isize;
                                if y >= 0 && (y as usize) < h && x >= 0 && (x as usize) < w {
                                    let off = (y as usize * w + x as usize) * c;
                                    kn::axpy(&mut dst[off..off + c], T::ONE, &g.data()[idx..idx + c]);
                                }
                                idx += c;
                            }
                        }
                    }
                }
            }
        }
        Op::Upsample2x(a) => {
            if before[a.0].requires_grad {
                let ishape = before[a.0].value.shape().to_vec();
                let (h, w, c) = (ishape[0], ishape[1], ishape[2]);
                let ga = ensure_grad(&mut before[a.0]);
                let dst = ga.data_mut();
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        let s = ((y / 2) * w + x / 2) * c;
                        let d = (y * 2 * w + x) * c;
                        kn::axpy(&mut dst[s..s + c], T::ONE, &g.data()[d..d + c]);
                    }
                }
            }
        }
    }
}
