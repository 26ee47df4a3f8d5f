//! Throwaway probe: step timing + overfit trajectory calibration.

use std::time::Instant;

use duovis_core::data::{make_dataset, prepare_training, DatasetSpec};
use duovis_core::model::{LmConfig, UnifiedModel};
use duovis_core::nn::Activation;
use duovis_core::optim::{AdamW, AdamWConfig};
use duovis_core::rng::Rng;
use duovis_core::tape::Tape;
use duovis_core::trainer::{
    run_stage, EncoderMode, MixtureSpec, StageConfig, StageId,
};
use duovis_core::vit::VitConfig;
use duovis_core::vq::{VqConfig, VqTokenizer};

#[test]
#[ignore]
fn probe_overfit_speed() {
    let t0 = Instant::now();
    // 1. quick VQ training
    let mut vq = VqTokenizer::<f32>::new(VqConfig::default(), 1234).unwrap();
    let mut vq_opt = AdamW::new(AdamWConfig::default());
    let vq_data = make_dataset(&DatasetSpec {
        n_und: 0,
        n_gen: 48,
        textread_frac: 0.0,
        seed: 99,
    });
    let vq_images: Vec<_> = vq_data
        .iter()
        .map(|s| duovis_core::scene::render(&s.scene))
        .collect();
    let mut rng = Rng::new(5);
    for step in 0..700 {
        let lr = duovis_core::optim::cosine_lr(step, 700, 3e-3).unwrap();
        let batch: Vec<_> = (0..8)
            .map(|_| vq_images[rng.below(vq_images.len())].clone())
            .collect();
        vq.train_step(&batch, &mut vq_opt, lr).unwrap();
    }
    eprintln!("vq trained in {:.1?}", t0.elapsed());

    // 2. 32-sample dataset
    let raw = make_dataset(&DatasetSpec {
        n_und: 16,
        n_gen: 16,
        textread_frac: 0.25,
        seed: 7,
    });
    let data = prepare_training(&raw, &mut vq).unwrap();

    // 3. model
    let cfg = LmConfig {
        dim: 64,
        blocks: 4,
        heads: 4,
        context: 256,
        mlp_mult: 4,
        act: Activation::Gelu,
        n_image: 64,
        vit: VitConfig::default(),
    };
    let mut tape = Tape::<f32>::new();
    let mut mrng = Rng::new(42);
    let model = UnifiedModel::init(&mut tape, cfg, &mut mrng).unwrap();
    tape.mark_persistent();
    eprintln!(
        "model params: {}",
        model.params().total_scalars(&tape)
    );

    // 4. timed training
    let mut opt = AdamW::new(AdamWConfig::default());
    let stage = StageConfig {
        global_lr: 3e-3,
        vit_lr: 1e-5,
        batch_size: 8,
        steps: 300,
        warmup_steps: 10,
        target_loss: None,
        ..StageConfig::defaults_for(StageId::II, 300, 2)
    };
    let mixture = MixtureSpec::new(1.0, 1.0).unwrap();
    let t1 = Instant::now();
    let out = run_stage(
        &mut tape,
        &model,
        &mut opt,
        &stage,
        &mixture,
        &data,
        EncoderMode::Unified,
    )
    .unwrap();
    let dt = t1.elapsed();
    eprintln!(
        "300 steps in {:.1?} ({:.0} ms/step); loss {:.4} -> {:.4}",
        dt,
        dt.as_millis() as f64 / 300.0,
        out.logs[0].loss,
        out.final_loss
    );
    for log in out.logs.iter().step_by(50) {
        eprintln!(
            "step {:>4} loss {:.4} und {:?} gen {:?}",
            log.step, log.loss, log.und_loss, log.gen_loss
        );
    }

    // 5. eval on the training set (overfit reproduction)
    let t2 = Instant::now();
    let und_scores =
        duovis_core::eval::eval_understanding(&mut tape, &model, &mut vq, &raw, 16).unwrap();
    eprintln!(
        "und eval in {:.1?}: overall {:.3} general {:?} textread {:?}",
        t2.elapsed(),
        und_scores.overall,
        und_scores.general,
        und_scores.textread
    );
    let t3 = Instant::now();
    let gen_scores = duovis_core::eval::eval_generation(
        &mut tape, &model, &mut vq, &raw, 6, 6, 5.0, 77,
    )
    .unwrap();
    eprintln!(
        "gen eval in {:.1?}: overall {:.3} attribute {:.3} undecodable {}",
        t3.elapsed(),
        gen_scores.overall,
        gen_scores.attribute,
        gen_scores.undecodable
    );
    eprintln!("total {:.1?}", t0.elapsed());
}
