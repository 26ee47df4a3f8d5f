//! Staged training: freeze/unfreeze groups per stage, per-group
//! learning rates on one cosine schedule, and mixture-controlled
//! batch sampling over the two task datasets.

use alloc::string::String;
use alloc::vec::Vec;

use crate::codec::{assemble_generation, assemble_understanding, TaskKind};
use crate::error::{usage_err, Result};
use crate::image::Image;
use crate::model::{LossReport, UnifiedModel};
use crate::optim::{clip_global_norm, AdamW, LrSchedule};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::vq::TokenGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StageId {
    I,
    II,
    III,
}

impl StageId {
    pub fn number(self) -> u8 {
        match self {
            StageId::I => 1,
            StageId::II => 2,
            StageId::III => 3,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(StageId::I),
            2 => Ok(StageId::II),
            3 => Ok(StageId::III),
            _ => Err(usage_err!("stage {n} not in 1..=3")),
        }
    }

    /// Groups unfrozen in this stage: Stage I aligns the continuous
    /// branch with a frozen LM; later stages train everything.
    pub fn trainable_groups(self) -> &'static [&'static str] {
        match self {
            StageId::I => &["vit", "adapter"],
            StageId::II | StageId::III => &["llm", "vit", "adapter"],
        }
    }
}

/// Realized LR for the ViT group above this bound draws a collapse
/// warning (large ViT learning rates destroy the encoder).
pub const VIT_LR_GUARD: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct StageConfig {
    pub stage: StageId,
    /// LR for every trainable group except "vit".
    pub global_lr: f64,
    /// LR for the "vit" group.
    pub vit_lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    /// Global-norm gradient clip; `None` disables.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Stop early once the running-mean loss drops below this.
    pub target_loss: Option<f64>,
    /// Probability of replacing a generation sample's prompt with the
    /// UNCOND placeholder, training the unconditional branch that
    /// classifier-free guidance extrapolates against.
    pub uncond_dropout: f64,
}

impl StageConfig {
    /// Stage defaults: Stage I runs the adapter at 1e-3 with the ViT
    /// held at 1e-5 (the global rate applies to the non-ViT trainable
    /// group); Stages II/III run everything at 1e-5.
    pub fn defaults_for(stage: StageId, steps: usize, seed: u64) -> Self {
        let (global_lr, vit_lr) = match stage {
            StageId::I => (1e-3, 1e-5),
            StageId::II | StageId::III => (1e-5, 1e-5),
        };
        Self {
            stage,
            global_lr,
            vit_lr,
            batch_size: 8,
            steps,
            warmup_steps: steps / 100,
            weight_decay: 0.0,
            grad_clip: Some(1.0),
            seed,
            target_loss: None,
            uncond_dropout: 0.1,
        }
    }
}

/// Understanding:generation sampling weights.
#[derive(Debug, Clone, Copy)]
pub struct MixtureSpec {
    pub und_weight: f64,
    pub gen_weight: f64,
}

impl MixtureSpec {
    pub fn new(und_weight: f64, gen_weight: f64) -> Result<Self> {
        if und_weight < 0.0 || gen_weight < 0.0 || (und_weight == 0.0 && gen_weight == 0.0) {
            return Err(usage_err!(
                "mixture weights {und_weight}:{gen_weight} must be nonnegative, not both zero"
            ));
        }
        Ok(Self {
            und_weight,
            gen_weight,
        })
    }

    pub fn p_understanding(&self) -> f64 {
        self.und_weight / (self.und_weight + self.gen_weight)
    }
}

/// One training example, image already tokenized by the frozen VQ
/// encoder.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub task: TaskKind,
    pub image: Image,
    pub grid: TokenGrid,
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainSet {
    pub und: Vec<TrainSample>,
    pub gen: Vec<TrainSample>,
}

/// Whether understanding sequences carry the continuous branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderMode {
    /// Discrete + continuous (the dual encoding).
    Unified,
    /// Codebook IDs only (the ablation baseline).
    DiscreteOnly,
}

/// Draws `batch_size` (task, index) pairs i.i.d. with task probability
/// proportional to the mixture weights. Deterministic given the rng
/// state.
pub fn sample_batch(
    mixture: &MixtureSpec,
    data: &TrainSet,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<(TaskKind, usize)>> {
    if mixture.und_weight > 0.0 && data.und.is_empty() {
        return Err(usage_err!("understanding weight > 0 but dataset empty"));
    }
    if mixture.gen_weight > 0.0 && data.gen.is_empty() {
        return Err(usage_err!("generation weight > 0 but dataset empty"));
    }
    let p_und = mixture.p_understanding();
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        if rng.bernoulli(p_und) {
            batch.push((TaskKind::Understanding, rng.below(data.und.len())));
        } else {
            batch.push((TaskKind::Generation, rng.below(data.gen.len())));
        }
    }
    Ok(batch)
}

#[derive(Debug, Clone)]
pub struct StepLog {
    pub step: usize,
    pub lr_factor: f64,
    pub loss: f64,
    pub und_loss: Option<f64>,
    pub gen_loss: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default)]
pub struct StageOutcome {
    pub logs: Vec<StepLog>,
    pub warnings: Vec<String>,
    pub steps_run: usize,
    pub final_loss: f64,
    /// Batch-sampler rng state at exit, for checkpointing.
    pub rng_state: [u64; 4],
}

/// Computes the loss node for one sample, running the continuous
/// branch when the mode and task ask for it.
pub fn sample_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &UnifiedModel,
    sample: &TrainSample,
    mode: EncoderMode,
    drop_prompt: bool,
) -> Result<(Var, LossReport)> {
    match sample.task {
        TaskKind::Understanding => {
            let cont = match mode {
                EncoderMode::Unified => {
                    Some(model.continuous_features(tape, &sample.image)?)
                }
                EncoderMode::DiscreteOnly => None,
            };
            let cont_values = cont.map(|v| tape.value(v).clone());
            let seq = assemble_understanding(
                &sample.grid,
                cont_values.as_ref(),
                &sample.prompt,
                &sample.answer,
                &model.vocab,
            )?;
            model.lm_loss(tape, &seq, cont)
        }
        TaskKind::Generation => {
            let prompt: &[usize] = if drop_prompt { &[] } else { &sample.prompt };
            let seq = assemble_generation::<T>(prompt, &sample.grid, &model.vocab)?;
            model.lm_loss(tape, &seq, None)
        }
    }
}

/// Runs one stage: only the stage's trainable groups move; everything
/// else stays bit-identical. Emits per-step logs and collapse
/// warnings. The caller owns checkpointing.
pub fn run_stage<T: Real>(
    tape: &mut Tape<T>,
    model: &UnifiedModel,
    opt: &mut AdamW<T>,
    stage: &StageConfig,
    mixture: &MixtureSpec,
    data: &TrainSet,
    mode: EncoderMode,
) -> Result<StageOutcome> {
    let mut outcome = StageOutcome::default();
    let trainable = stage.stage.trainable_groups();
    for name in trainable {
        if model.params().group(name).is_none() {
            return Err(usage_err!("unknown parameter group {name}"));
        }
    }
    if trainable.contains(&"vit") && stage.vit_lr > VIT_LR_GUARD * (1.0 + 1e-9) {
        outcome.warnings.push(alloc::format!(
            "vit learning rate {:.2e} exceeds the collapse guard {VIT_LR_GUARD:.0e}",
            stage.vit_lr
        ));
    }

    let schedule = LrSchedule {
        lr_max: 1.0,
        total_steps: stage.steps,
        warmup_steps: stage.warmup_steps,
    };
    let mut rng = Rng::stream(stage.seed, 0x62617463);
    let trainable_vars: Vec<Var> = trainable
        .iter()
        .filter_map(|name| model.params().group(name))
        .flat_map(|g| g.vars().collect::<Vec<_>>())
        .collect();

    let mut recent: Vec<f64> = Vec::new();
    for step in 0..stage.steps {
        let factor = schedule.at(step)?;
        let batch = sample_batch(mixture, data, stage.batch_size, &mut rng)?;

        tape.reset();
        for &(_, v) in model.params().all_entries() {
            tape.zero_grad(v);
        }

        let inv_b = T::from_f64(1.0 / batch.len() as f64);
        let mut total: Option<Var> = None;
        let mut und_sum = 0.0;
        let mut und_n = 0usize;
        let mut gen_sum = 0.0;
        let mut gen_n = 0usize;
        for &(task, idx) in &batch {
            let sample = match task {
                TaskKind::Understanding => &data.und[idx],
                TaskKind::Generation => &data.gen[idx],
            };
            let drop_prompt = task == TaskKind::Generation
                && stage.uncond_dropout > 0.0
                && rng.bernoulli(stage.uncond_dropout);
            let (loss, report) = sample_loss(tape, model, sample, mode, drop_prompt)?;
            match task {
                TaskKind::Understanding => {
                    und_sum += report.loss;
                    und_n += 1;
                }
                TaskKind::Generation => {
                    gen_sum += report.loss;
                    gen_n += 1;
                }
            }
            total = Some(match total {
                Some(acc) => tape.add(acc, loss)?,
                None => loss,
            });
        }
        let total = tape.scale(total.expect("batch non-empty"), inv_b);
        let loss_value = tape.value(total).data()[0].to_f64();
        tape.backward(total)?;

        let grad_norm = match stage.grad_clip {
            Some(max) => clip_global_norm(tape, &trainable_vars, max),
            None => clip_global_norm(tape, &trainable_vars, f64::INFINITY),
        };

        let mut updates = Vec::with_capacity(trainable_vars.len());
        for name in trainable {
            let group = model.params().group(name).expect("validated above");
            let base = if *name == "vit" {
                stage.vit_lr
            } else {
                stage.global_lr
            };
            let lr = base * group.lr_scale * factor;
            for v in group.vars() {
                updates.push((v, lr));
            }
        }
        opt.step(tape, &updates)?;

        outcome.logs.push(StepLog {
            step,
            lr_factor: factor,
            loss: loss_value,
            und_loss: (und_n > 0).then(|| und_sum / und_n as f64),
            gen_loss: (gen_n > 0).then(|| gen_sum / gen_n as f64),
            grad_norm,
        });
        outcome.steps_run = step + 1;
        outcome.final_loss = loss_value;

        if let Some(target) = stage.target_loss {
            recent.push(loss_value);
            if recent.len() > 10 {
                recent.remove(0);
            }
            let mean = recent.iter().sum::<f64>() / recent.len() as f64;
            if recent.len() >= 5 && mean < target {
                break;
            }
        }
    }
    tape.reset();
    outcome.rng_state = rng.state();
    Ok(outcome)
}
