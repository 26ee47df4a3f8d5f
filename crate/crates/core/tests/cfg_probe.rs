//! Throwaway probe: guidance-scale sweep on an overfit model.

use duovis_core::data::{make_dataset, prepare_training, DatasetSpec};
use duovis_core::eval::attribute_match;
use duovis_core::model::{LmConfig, UnifiedModel};
use duovis_core::optim::{AdamW, AdamWConfig};
use duovis_core::rng::Rng;
use duovis_core::sampler::{generate_image, DecodeMode, GenerationConfig};
use duovis_core::scene::Scene;
use duovis_core::tape::Tape;
use duovis_core::trainer::{run_stage, EncoderMode, MixtureSpec, StageConfig, StageId};
use duovis_core::vit::VitConfig;
use duovis_core::vq::{VqConfig, VqTokenizer};

#[test]
#[ignore]
fn probe_guidance_scales() {
    let mut vq = VqTokenizer::<f32>::new(VqConfig::default(), 1234).unwrap();
    let mut vq_opt = AdamW::new(AdamWConfig::default());
    let vq_raw = make_dataset(&DatasetSpec {
        n_und: 0,
        n_gen: 48,
        textread_frac: 0.0,
        seed: 99,
    });
    let vq_images: Vec<_> = vq_raw
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

    let raw = make_dataset(&DatasetSpec {
        n_und: 16,
        n_gen: 16,
        textread_frac: 0.25,
        seed: 7,
    });
    let data = prepare_training(&raw, &mut vq).unwrap();
    let cfg = LmConfig {
        dim: 64,
        blocks: 4,
        heads: 4,
        context: 256,
        n_image: 64,
        vit: VitConfig::default(),
        ..Default::default()
    };
    let mut tape = Tape::<f32>::new();
    let mut mrng = Rng::new(42);
    let model = UnifiedModel::init(&mut tape, cfg, &mut mrng).unwrap();
    tape.mark_persistent();
    let mut opt = AdamW::new(AdamWConfig::default());
    let stage = StageConfig {
        global_lr: 3e-3,
        vit_lr: 1e-5,
        batch_size: 8,
        steps: 300,
        warmup_steps: 10,
        ..StageConfig::defaults_for(StageId::II, 300, 2)
    };
    run_stage(
        &mut tape,
        &model,
        &mut opt,
        &stage,
        &MixtureSpec::new(1.0, 1.0).unwrap(),
        &data,
        EncoderMode::Unified,
    )
    .unwrap();

    for s in [0.0, 1.0, 2.0, 3.0, 5.0, 5.5] {
        let mut exact_grid = 0usize;
        let mut partial = 0.0;
        for (i, sample) in raw.iter().enumerate() {
            if sample.task != duovis_core::codec::TaskKind::Generation {
                continue;
            }
            let Scene::Shapes(expected) = &sample.scene else { continue };
            let gcfg = GenerationConfig {
                mode: DecodeMode::Sample,
                temperature: 1.0,
                guidance_scale: s,
                max_new_tokens: 0,
                seed: 1000 + i as u64,
            };
            let out =
                generate_image(&mut tape, &model, &mut vq, &sample.prompt, 6, 6, &gcfg).unwrap();
            let train_grid = &data.gen.iter().find(|t| {
                t.prompt == duovis_core::codec::encode_text(&sample.prompt)
            }).unwrap().grid;
            if out.grid.ids == train_grid.ids {
                exact_grid += 1;
            }
            let (p, c, pos) = attribute_match(expected, &out.image);
            partial += (p as u8 + c as u8 + pos as u8) as f64 / 3.0;
        }
        eprintln!(
            "s={s:<4} exact grids {exact_grid}/16  attribute {:.3}",
            partial / 16.0
        );
    }
}
