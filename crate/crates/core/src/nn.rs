//! Neural building blocks over the tape: linear layers, multi-head
//! attention, and pre-norm transformer blocks. Shared by the ViT and
//! the language model.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Additive mask value for disallowed attention positions. Large
/// enough that softmax assigns exactly zero after max-subtraction,
/// small enough to stay finite in f32.
pub fn neg_mask<T: Real>() -> T {
    T::from_f64(-1e9)
}

/// Collects (name, Var) pairs as modules register their parameters.
#[derive(Debug, Default, Clone)]
pub struct ParamList {
    pub entries: Vec<(String, Var)>,
}

impl ParamList {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: String, var: Var) {
        self.entries.push((name, var));
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|&(_, v)| v).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    /// Gaussian init with std 1/sqrt(fan_in); biases start at zero.
    pub fn init<T: Real>(
        tape: &mut Tape<T>,
        params: &mut ParamList,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        let w = tape.leaf(Tensor::randn(alloc::vec![fan_in, fan_out], std, rng), true);
        let b = tape.leaf(Tensor::zeros(alloc::vec![fan_out]), true);
        params.push(format!("{name}.w"), w);
        params.push(format!("{name}.b"), b);
        Self { w, b }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.w)?;
        tape.add_bias(h, self.b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: Var,
    pub bias: Var,
}

impl LayerNorm {
    pub fn init<T: Real>(
        tape: &mut Tape<T>,
        params: &mut ParamList,
        name: &str,
        width: usize,
    ) -> Self {
        let gain = tape.leaf(Tensor::full(alloc::vec![width], T::ONE), true);
        let bias = tape.leaf(Tensor::zeros(alloc::vec![width]), true);
        params.push(format!("{name}.gain"), gain);
        params.push(format!("{name}.bias"), bias);
        Self { gain, bias }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gain, self.bias, T::from_f64(1e-5))
    }
}

/// Scaled dot-product attention over pre-projected q/k/v of shape
/// [T, d], split into `n_heads` column blocks. `causal` masks the
/// strict upper triangle.
pub fn multi_head_attention<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    causal: bool,
) -> Result<Var> {
    let d = tape.value(q).cols();
    let t_len = tape.value(q).rows();
    if d % n_heads != 0 {
        return Err(shape_err!("width {d} not divisible by {n_heads} heads"));
    }
    let hd = d / n_heads;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());

    let mask = if causal {
        let mut m = Tensor::zeros(alloc::vec![t_len, t_len]);
        for i in 0..t_len {
            for j in i + 1..t_len {
                m.data_mut()[i * t_len + j] = neg_mask::<T>();
            }
        }
        Some(tape.constant(m))
    } else {
        None
    };

    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * hd, hd)?;
        let kh = tape.slice_cols(k, h * hd, hd)?;
        let vh = tape.slice_cols(v, h * hd, hd)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scaled = tape.scale(scores, scale);
        let masked = match mask {
            Some(m) => tape.add(scaled, m)?,
            None => scaled,
        };
        let att = tape.softmax(masked, 1)?;
        heads.push(tape.matmul(att, vh)?);
    }
    tape.concat_cols(&heads)
}

/// Activation selector for MLPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Silu,
}

impl Activation {
    pub fn apply<T: Real>(self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Activation::Gelu => tape.gelu(x),
            Activation::Silu => tape.silu(x),
        }
    }
}

/// Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x)).
#[derive(Debug, Clone, Copy)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub n_heads: usize,
    pub act: Activation,
}

impl Block {
    pub fn init<T: Real>(
        tape: &mut Tape<T>,
        params: &mut ParamList,
        name: &str,
        width: usize,
        n_heads: usize,
        mlp_mult: usize,
        act: Activation,
        rng: &mut Rng,
    ) -> Self {
        Self {
            ln1: LayerNorm::init(tape, params, &format!("{name}.ln1"), width),
            wq: Linear::init(tape, params, &format!("{name}.wq"), width, width, rng),
            wk: Linear::init(tape, params, &format!("{name}.wk"), width, width, rng),
            wv: Linear::init(tape, params, &format!("{name}.wv"), width, width, rng),
            wo: Linear::init(tape, params, &format!("{name}.wo"), width, width, rng),
            ln2: LayerNorm::init(tape, params, &format!("{name}.ln2"), width),
            fc1: Linear::init(tape, params, &format!("{name}.fc1"), width, width * mlp_mult, rng),
            fc2: Linear::init(tape, params, &format!("{name}.fc2"), width * mlp_mult, width, rng),
            n_heads,
            act,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var, causal: bool) -> Result<Var> {
        let normed = self.ln1.forward(tape, x)?;
        let q = self.wq.forward(tape, normed)?;
        let k = self.wk.forward(tape, normed)?;
        let v = self.wv.forward(tape, normed)?;
        let ctx = multi_head_attention(tape, q, k, v, self.n_heads, causal)?;
        let proj = self.wo.forward(tape, ctx)?;
        let x = tape.add(x, proj)?;

        let normed2 = self.ln2.forward(tape, x)?;
        let h = self.fc1.forward(tape, normed2)?;
        let h = self.act.apply(tape, h);
        let h = self.fc2.forward(tape, h)?;
        tape.add(x, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attention_once(perturb_last_row: bool) -> Tensor<f32> {
        let mut rng = Rng::new(5);
        let qv = Tensor::randn(alloc::vec![6, 8], 1.0, &mut rng);
        let mut kv = Tensor::randn(alloc::vec![6, 8], 1.0, &mut rng);
        let mut vv = Tensor::randn(alloc::vec![6, 8], 1.0, &mut rng);
        if perturb_last_row {
            for c in 0..8 {
                kv.data_mut()[5 * 8 + c] += 3.0;
                vv.data_mut()[5 * 8 + c] -= 2.0;
            }
        }
        let mut tape = Tape::<f32>::new();
        let q = tape.leaf(qv, false);
        let k = tape.leaf(kv, false);
        let v = tape.leaf(vv, false);
        let out = multi_head_attention(&mut tape, q, k, v, 2, true).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn attention_is_causal() {
        let base = attention_once(false);
        let perturbed = attention_once(true);
        // Rows before the perturbed position are bit-identical;
        // the perturbed row itself must move.
        for i in 0..5 {
            assert_eq!(base.row(i), perturbed.row(i), "row {i}");
        }
        assert_ne!(base.row(5), perturbed.row(5));
    }

    #[test]
    fn block_shapes_roundtrip() {
        let mut tape = Tape::<f32>::new();
        let mut params = ParamList::new();
        let mut rng = Rng::new(1);
        let block = Block::init(
            &mut tape,
            &mut params,
            "b0",
            16,
            4,
            4,
            Activation::Gelu,
            &mut rng,
        );
        let x = tape.leaf(Tensor::randn(alloc::vec![5, 16], 1.0, &mut rng), false);
        let y = block.forward(&mut tape, x, true).unwrap();
        assert_eq!(tape.value(y).shape(), &[5, 16]);
        // 2 norms x2 + 4 attention linears x2 + 2 mlp linears x2
        assert_eq!(params.entries.len(), 16);
    }
}
