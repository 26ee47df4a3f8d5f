//! Central finite-difference gradient checking.
//!
//! The one oracle everything else is measured against: evaluate the
//! loss at `x ± h` per coordinate and compare `(f(x+h) - f(x-h)) / 2h`
//! with the tape's analytic gradient. Meant to run at `f64`, where the
//! truncation error sits far below the 1e-4 pass tolerance.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{usage_err, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Max relative error allowed per parameter.
    pub tol: f64,
    /// Both gradients below this magnitude count as matching zeros.
    pub zero_floor: f64,
    /// Absolute-difference floor: coordinates whose analytic/numeric
    /// gap is below this count as matching regardless of magnitude.
    /// Central differences at f64 carry ~1e-10 roundoff, so gradients
    /// of order 1e-6 would otherwise fail on noise alone.
    pub atol: f64,
    /// Check at most this many coordinates per parameter (seeded
    /// choice); `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            zero_floor: 1e-6,
            atol: 1e-8,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.params.iter().all(|p| p.pass)
    }

    pub fn worst(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }
}

/// Compares the analytic gradient of `f` against central differences.
///
/// The caller registers parameters on `tape`, calls
/// [`Tape::mark_persistent`], and hands over a builder that appends the
/// forward graph and returns the scalar loss. The checker re-evaluates
/// `f` under coordinate perturbations, restoring values afterwards.
///
/// A non-deterministic `f` (two evaluations at the same point disagree
/// bit-for-bit) invalidates the check and is reported as an error.
pub fn finite_diff_check<T: Real>(
    tape: &mut Tape<T>,
    params: &[(String, Var)],
    f: &mut dyn FnMut(&mut Tape<T>) -> Result<Var>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let eval = |tape: &mut Tape<T>, f: &mut dyn FnMut(&mut Tape<T>) -> Result<Var>| -> Result<T> {
        tape.reset();
        let loss = f(tape)?;
        if !tape.value(loss).is_scalar() {
            return Err(usage_err!("gradcheck loss must be scalar"));
        }
        Ok(tape.value(loss).data()[0])
    };

    let base = eval(tape, f)?;
    let again = eval(tape, f)?;
    if base.to_f64() != again.to_f64() {
        return Err(usage_err!(
            "f is not deterministic: {} vs {}; check invalid",
            base,
            again
        ));
    }

    // Analytic gradients.
    tape.reset();
    let loss = f(tape)?;
    for &(_, v) in params {
        tape.zero_grad(v);
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|&(_, v)| match tape.grad(v) {
            Some(g) => g.data().iter().map(|x| x.to_f64()).collect(),
            None => alloc::vec![0.0; tape.value(v).numel()],
        })
        .collect();

    let h = T::from_f64(cfg.h);
    let mut rng = Rng::stream(cfg.seed, 0x67726164);
    let mut checks = Vec::with_capacity(params.len());
    for (pi, (name, var)) in params.iter().enumerate() {
        let numel = tape.value(*var).numel();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(m) if m < numel => (0..m).map(|_| rng.below(numel)).collect(),
            _ => (0..numel).collect(),
        };
        let mut max_rel = 0.0f64;
        for &c in &coords {
            let orig = tape.value(*var).data()[c];
            tape.value_mut(*var).data_mut()[c] = orig + h;
            let up = eval(tape, f)?.to_f64();
            tape.value_mut(*var).data_mut()[c] = orig - h;
            let down = eval(tape, f)?.to_f64();
            tape.value_mut(*var).data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * cfg.h);
            let a = analytic[pi][c];
            let denom = a.abs().max(numeric.abs());
            let err = (a - numeric).abs();
            let rel = if denom < cfg.zero_floor || err <= cfg.atol {
                0.0
            } else {
                err / denom
            };
            if rel > max_rel {
                max_rel = rel;
            }
        }
        checks.push(ParamCheck {
            name: name.clone(),
            max_rel_err: max_rel,
            coords_checked: coords.len(),
            pass: max_rel <= cfg.tol,
        });
    }
    // Leave the tape clean for the caller.
    tape.reset();
    Ok(GradCheckReport {
        params: checks,
        tol: cfg.tol,
    })
}

/// Convenience wrapper: registers fresh leaf parameters on a new tape
/// and checks `f` over them.
pub fn check_scalar_fn<T: Real>(
    params: Vec<(String, crate::tensor::Tensor<T>)>,
    f: impl Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<(String, Var)> = params
        .into_iter()
        .map(|(name, t)| (name, tape.leaf(t, true)))
        .collect();
    tape.mark_persistent();
    let var_list: Vec<Var> = vars.iter().map(|&(_, v)| v).collect();
    let mut build = move |tape: &mut Tape<T>| f(tape, &var_list);
    finite_diff_check(&mut tape, &vars, &mut build, cfg)
}

/// One row of the per-kernel check table.
#[derive(Debug, Clone)]
pub struct KernelCheck {
    pub kernel: String,
    pub max_rel_err: f64,
    pub seeds: usize,
    pub pass: bool,
}

impl core::fmt::Display for KernelCheck {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(
            f,
            "{:<22} max_rel_err {:>12.3e}  seeds {:>3}  {}",
            self.kernel,
            self.max_rel_err,
            self.seeds,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

fn rand_dim(rng: &mut Rng) -> usize {
    2 + rng.below(7)
}

/// Runs the finite-difference oracle over every differentiable kernel
/// with random shapes and values, one run per seed. Returns a table
/// row per kernel.
pub fn kernel_suite<T: Real>(seeds: &[u64], cfg: &GradCheckConfig) -> Result<Vec<KernelCheck>> {
    use crate::tensor::Tensor;

    type Builder<T> = fn(&mut Tape<T>, &[Var]) -> Result<Var>;
    // Each entry: kernel name, param shapes generator, builder.
    let mut table: Vec<KernelCheck> = Vec::new();

    struct Case<T: Real> {
        name: &'static str,
        make: fn(&mut Rng) -> Vec<Tensor<T>>,
        build: Builder<T>,
    }

    fn two_same<T: Real>(rng: &mut Rng) -> Vec<Tensor<T>> {
        let shape = alloc::vec![rand_dim(rng), rand_dim(rng)];
        alloc::vec![
            Tensor::randn(shape.clone(), 1.0, rng),
            Tensor::randn(shape, 1.0, rng),
        ]
    }
    fn one_mat<T: Real>(rng: &mut Rng) -> Vec<Tensor<T>> {
        alloc::vec![Tensor::randn(alloc::vec![rand_dim(rng), rand_dim(rng)], 1.0, rng)]
    }

    let cases: Vec<Case<T>> = alloc::vec![
        Case {
            name: "add",
            make: two_same,
            build: |t, v| {
                let s = t.add(v[0], v[1])?;
                Ok(t.mean(s))
            },
        },
        Case {
            name: "sub",
            make: two_same,
            build: |t, v| {
                let s = t.sub(v[0], v[1])?;
                let sq = t.mul(s, s)?;
                Ok(t.mean(sq))
            },
        },
        Case {
            name: "mul",
            make: two_same,
            build: |t, v| {
                let s = t.mul(v[0], v[1])?;
                Ok(t.mean(s))
            },
        },
        Case {
            name: "scale",
            make: one_mat,
            build: |t, v| {
                let s = t.scale(v[0], T::from_f64(-2.5));
                Ok(t.mean(s))
            },
        },
        Case {
            name: "add_bias",
            make: |rng| {
                let (r, c) = (rand_dim(rng), rand_dim(rng));
                alloc::vec![
                    Tensor::randn(alloc::vec![r, c], 1.0, rng),
                    Tensor::randn(alloc::vec![c], 1.0, rng),
                ]
            },
            build: |t, v| {
                let s = t.add_bias(v[0], v[1])?;
                let sq = t.mul(s, s)?;
                Ok(t.mean(sq))
            },
        },
        Case {
            name: "matmul",
            make: |rng| {
                let (m, k, n) = (rand_dim(rng), rand_dim(rng), rand_dim(rng));
                alloc::vec![
                    Tensor::randn(alloc::vec![m, k], 1.0, rng),
                    Tensor::randn(alloc::vec![k, n], 1.0, rng),
                ]
            },
            build: |t, v| {
                let s = t.matmul(v[0], v[1])?;
                let sq = t.mul(s, s)?;
                Ok(t.mean(sq))
            },
        },
        Case {
            name: "matmul_nt",
            make: |rng| {
                let (m, k, n) = (rand_dim(rng), rand_dim(rng), rand_dim(rng));
                alloc::vec![
                    Tensor::randn(alloc::vec![m, k], 1.0, rng),
                    Tensor::randn(alloc::vec![n, k], 1.0, rng),
                ]
            },
            build: |t, v| {
                let s = t.matmul_nt(v[0], v[1])?;
                let sq = t.mul(s, s)?;
                Ok(t.mean(sq))
            },
        },
        Case {
            name: "softmax",
            make: one_mat,
            build: |t, v| {
                let s = t.softmax(v[0], 1)?;
                let sq = t.mul(s, s)?;
                Ok(t.mean(sq))
            },
        },
        Case {
            name: "softmax_axis0",
            make: one_mat,
            build: |t, v| {
                let s = t.softmax(v[0], 0)?;
                let sq = t.mul(s, s)?;
                Ok(t.mean(sq))
            },
        },
        Case {
            name: "layer_norm",
            make: |rng| {
                let (r, c) = (rand_dim(rng), rand_dim(rng));
                alloc::vec![
                    Tensor::randn(alloc::vec![r, c], 1.0, rng),
                    Tensor::randn(alloc::vec![c], 0.5, rng),
                    Tensor::randn(alloc::vec![c], 0.5, rng),
                ]
            },
            build: |t, v| {
                let s = t.layer_norm(v[0], v[1], v[2], T::from_f64(1e-5))?;
                let sq = t.mul(s, s)?;
                Ok(t.mean(sq))
            },
        },
        Case {
            name: "gelu",
            make: one_mat,
            build: |t, v| {
                let s = t.gelu(v[0]);
                Ok(t.mean(s))
            },
        },
        Case {
            name: "silu",
            make: one_mat,
            build: |t, v| {
                let s = t.silu(v[0]);
                Ok(t.mean(s))
            },
        },
        Case {
            name: "embedding",
            make: |rng| {
                let (v, d) = (3 + rng.below(6), rand_dim(rng));
                alloc::vec![Tensor::randn(alloc::vec![v, d], 1.0, rng)]
            },
            build: |t, v| {
                let rows = t.value(v[0]).rows();
                let ids: Vec<usize> = (0..2 * rows).map(|i| i % rows).collect();
                let e = t.embedding(v[0], &ids)?;
                let sq = t.mul(e, e)?;
                Ok(t.mean(sq))
            },
        },
        Case {
            name: "scatter_rows",
            make: |rng| {
                let d = rand_dim(rng);
                alloc::vec![Tensor::randn(alloc::vec![3, d], 1.0, rng)]
            },
            build: |t, v| {
                let s = t.scatter_rows(v[0], &[4, 0, 2], 6)?;
                let sq = t.mul(s, s)?;
                Ok(t.mean(sq))
            },
        },
        Case {
            name: "slice_rows",
            make: |rng| alloc::vec![Tensor::randn(alloc::vec![6, rand_dim(rng)], 1.0, rng)],
            build: |t, v| {
                let s = t.slice_rows(v[0], 1, 4)?;
                let sq = t.mul(s, s)?;
                Ok(t.mean(sq))
            },
        },
        Case {
            name: "slice_cols",
            make: |rng| alloc::vec![Tensor::randn(alloc::vec![rand_dim(rng), 6], 1.0, rng)],
            build: |t, v| {
                let s = t.slice_cols(v[0], 2, 3)?;
                let sq = t.mul(s, s)?;
                Ok(t.mean(sq))
            },
        },
        Case {
            name: "concat_rows",
            make: |rng| {
                let d = rand_dim(rng);
                alloc::vec![
                    Tensor::randn(alloc::vec![2, d], 1.0, rng),
                    Tensor::randn(alloc::vec![3, d], 1.0, rng),
                ]
            },
            build: |t, v| {
                let s = t.concat_rows(&[v[0], v[1], v[0]])?;
                let sq = t.mul(s, s)?;
                Ok(t.mean(sq))
            },
        },
        Case {
            name: "concat_cols",
            make: |rng| {
                let r = rand_dim(rng);
                alloc::vec![
                    Tensor::randn(alloc::vec![r, 2], 1.0, rng),
                    Tensor::randn(alloc::vec![r, 3], 1.0, rng),
                ]
            },
            build: |t, v| {
                let s = t.concat_cols(&[v[0], v[1]])?;
                let sq = t.mul(s, s)?;
                Ok(t.mean(sq))
            },
        },
        Case {
            name: "sum",
            make: one_mat,
            build: |t, v| {
                let s = t.sum(v[0]);
                let sq = t.mul(s, s)?;
                Ok(t.mean(sq))
            },
        },
        Case {
            name: "mean",
            make: one_mat,
            build: |t, v| {
                let s = t.mean(v[0]);
                let sq = t.mul(s, s)?;
                Ok(t.mean(sq))
            },
        },
        Case {
            name: "cross_entropy",
            make: |rng| {
                let (rows, vocab) = (2 + rng.below(5), 3 + rng.below(6));
                alloc::vec![Tensor::randn(alloc::vec![rows, vocab], 1.0, rng)]
            },
            build: |t, v| {
                let rows = t.value(v[0]).rows();
                let vocab = t.value(v[0]).cols();
                let targets: Vec<usize> = (0..rows).map(|i| (i * 7 + 1) % vocab).collect();
                let mask: Vec<bool> = (0..rows).map(|i| i % 3 != 2).collect();
                let (loss, _) = t.masked_cross_entropy(v[0], &targets, &mask)?;
                Ok(loss)
            },
        },
        Case {
            name: "unfold_conv",
            make: |rng| {
                alloc::vec![
                    Tensor::randn(alloc::vec![6, 6, 2], 1.0, rng),
                    Tensor::randn(alloc::vec![4 * 4 * 2, 3], 0.5, rng),
                ]
            },
            build: |t, v| {
                let cols = t.unfold(v[0], 4, 2, 1)?;
                let s = t.matmul(cols, v[1])?;
                let sq = t.mul(s, s)?;
                Ok(t.mean(sq))
            },
        },
        Case {
            name: "upsample2x",
            make: |rng| alloc::vec![Tensor::randn(alloc::vec![3, 3, 2], 1.0, rng)],
            build: |t, v| {
                let s = t.upsample2x(v[0])?;
                let sq = t.mul(s, s)?;
                Ok(t.mean(sq))
            },
        },
        Case {
            name: "attention",
            make: |rng| {
                let t_len = 3 + rng.below(4);
                alloc::vec![
                    Tensor::randn(alloc::vec![t_len, 8], 1.0, rng),
                    Tensor::randn(alloc::vec![8, 8], 0.5, rng),
                    Tensor::randn(alloc::vec![8, 8], 0.5, rng),
                    Tensor::randn(alloc::vec![8, 8], 0.5, rng),
                    Tensor::randn(alloc::vec![8, 8], 0.5, rng),
                ]
            },
            build: |t, v| {
                let q = t.matmul(v[0], v[1])?;
                let k = t.matmul(v[0], v[2])?;
                let val = t.matmul(v[0], v[3])?;
                let ctx = crate::nn::multi_head_attention(t, q, k, val, 2, true)?;
                let out = t.matmul(ctx, v[4])?;
                let sq = t.mul(out, out)?;
                Ok(t.mean(sq))
            },
        },
    ];

    for case in &cases {
        let mut worst = 0.0f64;
        for &seed in seeds {
            let mut rng = Rng::stream(seed, 0x6b65726e);
            let tensors = (case.make)(&mut rng);
            let named: Vec<(String, Tensor<T>)> = tensors
                .into_iter()
                .enumerate()
                .map(|(i, t)| (format!("{}#{}", case.name, i), t))
                .collect();
            let build = case.build;
            let report = check_scalar_fn(named, move |t, v| build(t, v), cfg)?;
            worst = worst.max(report.worst());
        }
        table.push(KernelCheck {
            kernel: String::from(case.name),
            max_rel_err: worst,
            seeds: seeds.len(),
            pass: worst <= cfg.tol,
        });
    }
    Ok(table)
}
