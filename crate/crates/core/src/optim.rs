//! AdamW with per-group learning rates, global-norm clipping, and the
//! cosine schedule used by every training stage.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{usage_err, Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Named set of parameters sharing a learning-rate treatment.
#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub name: String,
    pub entries: Vec<(String, Var)>,
    /// Multiplier on the stage learning rate assigned to this group.
    pub lr_scale: f64,
}

impl ParamGroup {
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.entries.iter().map(|&(_, v)| v)
    }
}

/// All parameter groups of one model. Groups are disjoint: a tensor
/// belongs to exactly one group.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub groups: Vec<ParamGroup>,
}

impl ParamSet {
    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn all_entries(&self) -> impl Iterator<Item = &(String, Var)> {
        self.groups.iter().flat_map(|g| g.entries.iter())
    }

    pub fn total_scalars<T: Real>(&self, tape: &Tape<T>) -> usize {
        self.all_entries()
            .map(|&(_, v)| tape.value(v).numel())
            .sum()
    }

    /// Verifies disjointness of the groups.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for g in &self.groups {
            if !g.lr_scale.is_finite() || g.lr_scale < 0.0 {
                return Err(usage_err!("group {} has bad lr_scale {}", g.name, g.lr_scale));
            }
            for &(ref n, v) in &g.entries {
                if let Some(prev) = seen.insert(v.index(), g.name.clone()) {
                    return Err(usage_err!(
                        "parameter {n} appears in groups {prev} and {}",
                        g.name
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Plain cosine decay from `lr_max` to zero over `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(usage_err!("cosine_lr with total_steps = 0"));
    }
    if step > total_steps {
        return Err(usage_err!("cosine_lr step {step} > total {total_steps}"));
    }
    let frac = step as f64 / total_steps as f64;
    Ok(0.5 * lr_max * (1.0 + libm::cos(core::f64::consts::PI * frac)))
}

/// Cosine schedule with an optional linear warmup prefix. With
/// `warmup_steps == 0` this is exactly [`cosine_lr`].
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub lr_max: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> Result<f64> {
        if step < self.warmup_steps {
            return Ok(self.lr_max * (step + 1) as f64 / self.warmup_steps as f64);
        }
        cosine_lr(
            step - self.warmup_steps,
            self.total_steps - self.warmup_steps,
            self.lr_max,
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

struct Moments<T> {
    m: Tensor<T>,
    v: Tensor<T>,
}

/// Bias-corrected AdamW with decoupled weight decay. Moment buffers
/// are created lazily per parameter; parameters not passed to a step
/// (frozen groups) are left bit-identical.
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    moments: BTreeMap<usize, Moments<T>>,
    step_count: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            moments: BTreeMap::new(),
            step_count: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step_count
    }

    /// Applies one update over `(var, lr)` pairs. A missing gradient
    /// counts as zero (momentum still decays). NaN/Inf gradients abort
    /// with a diagnostic naming the parameter index.
    pub fn step(&mut self, tape: &mut Tape<T>, updates: &[(Var, f64)]) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let eps = T::from_f64(self.cfg.eps);
        let bc1 = T::ONE - b1.powi(t);
        let bc2 = T::ONE - b2.powi(t);

        for &(var, lr) in updates {
            let lr = T::from_f64(lr);
            let wd = T::from_f64(self.cfg.weight_decay);
            let numel = tape.value(var).numel();
            let grad: Option<Vec<T>> = tape.grad(var).map(|g| g.data().to_vec());
            if let Some(g) = &grad {
                if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(alloc::format!(
                        "gradient of parameter node {} contains {bad}; aborting optimizer step",
                        var.index()
                    )));
                }
            }
            let shape = tape.value(var).shape().to_vec();
            let entry = self.moments.entry(var.index()).or_insert_with(|| Moments {
                m: Tensor::zeros(shape.clone()),
                v: Tensor::zeros(shape),
            });
            let value = tape.value_mut(var);
            let data = value.data_mut();
            let md = entry.m.data_mut();
            let vd = entry.v.data_mut();
            for i in 0..numel {
                let g = grad.as_ref().map_or(T::ZERO, |g| g[i]);
                md[i] = b1 * md[i] + (T::ONE - b1) * g;
                vd[i] = b2 * vd[i] + (T::ONE - b2) * g * g;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                data[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * data[i]);
            }
        }
        Ok(())
    }
}

/// Rescales gradients of `vars` so their joint L2 norm is at most
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm<T: Real>(tape: &mut Tape<T>, vars: &[Var], max_norm: f64) -> f64 {
    let mut total = 0.0f64;
    for &v in vars {
        if let Some(g) = tape.grad(v) {
            total += g.data().iter().map(|&x| x.to_f64() * x.to_f64()).sum::<f64>();
        }
    }
    let norm = libm::sqrt(total);
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64(max_norm / norm);
        for &v in vars {
            if let Some(g) = tape.grad_mut(v) {
                for x in g.data_mut() {
                    *x *= scale;
                }
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    #[test]
    fn cosine_schedule_endpoints() {
        // step 0 -> lr_max, midpoint -> lr_max/2, end -> 0
        assert!((cosine_lr(0, 100, 1e-3).unwrap() - 1e-3).abs() < 1e-12);
        assert!((cosine_lr(50, 100, 1e-3).unwrap() - 5e-4).abs() < 1e-12);
        assert!(cosine_lr(100, 100, 1e-3).unwrap().abs() < 1e-18);
        assert!(cosine_lr(1, 0, 1.0).is_err());
    }

    #[test]
    fn warmup_ramps_then_matches_cosine() {
        let s = LrSchedule {
            lr_max: 1.0,
            total_steps: 110,
            warmup_steps: 10,
        };
        assert!((s.at(0).unwrap() - 0.1).abs() < 1e-12);
        assert!((s.at(9).unwrap() - 1.0).abs() < 1e-12);
        assert!((s.at(10).unwrap() - 1.0).abs() < 1e-12);
        assert!((s.at(60).unwrap() - 0.5).abs() < 1e-12);
        // warmup 0 reproduces the bare schedule
        let s0 = LrSchedule {
            lr_max: 1.0,
            total_steps: 100,
            warmup_steps: 0,
        };
        assert_eq!(s0.at(25).unwrap(), cosine_lr(25, 100, 1.0).unwrap());
    }

    #[test]
    fn adamw_first_step_hand_computed() {
        // w=1, g=1, lr=0.1: m_hat=1, v_hat=1, delta = 0.1/(1+eps)
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::scalar(1.0), true);
        tape.mark_persistent();
        let loss = tape.sum(w); // d/dw = 1
        tape.backward(loss).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut tape, &[(w, 0.1)]).unwrap();
        let got = tape.value(w).data()[0];
        assert!((got - 0.9).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn zero_lr_leaves_params_bit_identical() {
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(Tensor::new(vec![2], vec![0.5, -1.5]).unwrap(), true);
        tape.mark_persistent();
        let before = tape.value(w).clone();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut tape, &[(w, 0.0)]).unwrap();
        assert_eq!(tape.value(w).data(), before.data());
    }

    #[test]
    fn weight_decay_acts_without_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::scalar(2.0), true);
        tape.mark_persistent();
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        });
        // No backward at all: grad is None, decay still applies.
        opt.step(&mut tape, &[(w, 0.5)]).unwrap();
        let got = tape.value(w).data()[0];
        assert!((got - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::scalar(1.0), true);
        tape.mark_persistent();
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        tape.grad_mut(w).unwrap().data_mut()[0] = f64::NAN;
        let mut opt = AdamW::new(AdamWConfig::default());
        assert!(matches!(
            opt.step(&mut tape, &[(w, 0.1)]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap(), true);
        tape.mark_persistent();
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5); // grad = w = [3,4], norm 5
        tape.backward(loss).unwrap();
        let norm = clip_global_norm(&mut tape, &[w], 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let g = tape.grad(w).unwrap();
        let new_norm = (g.data()[0].powi(2) + g.data()[1].powi(2)).sqrt();
        assert!((new_norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn param_set_rejects_overlap() {
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(Tensor::scalar(0.0), true);
        let set = ParamSet {
            groups: vec![
                ParamGroup {
                    name: "a".to_string(),
                    entries: vec![("w".to_string(), w)],
                    lr_scale: 1.0,
                },
                ParamGroup {
                    name: "b".to_string(),
                    entries: vec![("w2".to_string(), w)],
                    lr_scale: 1.0,
                },
            ],
        };
        assert!(set.validate().is_err());
    }
}
