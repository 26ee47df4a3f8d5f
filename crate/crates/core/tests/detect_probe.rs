//! Throwaway probe: VQ capacity sweep for detector-clean closure.

use duovis_core::data::{make_dataset, DatasetSpec};
use duovis_core::optim::{AdamW, AdamWConfig};
use duovis_core::rng::Rng;
use duovis_core::scene::{detect, render, Scene};
use duovis_core::vq::{VqConfig, VqTokenizer};

fn sweep(cfg: VqConfig, steps: usize, lr: f64) {
    let label = format!(
        "K={} D={} ch={:?} steps={steps} lr={lr}",
        cfg.codebook_size, cfg.embed_dim, cfg.channels
    );
    let t0 = std::time::Instant::now();
    let mut vq = VqTokenizer::<f32>::new(cfg, 1234).unwrap();
    let mut vq_opt = AdamW::new(AdamWConfig::default());
    let vq_raw = make_dataset(&DatasetSpec {
        n_und: 0,
        n_gen: 128,
        textread_frac: 0.0,
        seed: 99,
    });
    let vq_images: Vec<_> = vq_raw.iter().map(|s| render(&s.scene)).collect();
    let mut rng = Rng::new(5);
    for step in 0..steps {
        let lr_t = duovis_core::optim::cosine_lr(step, steps, lr).unwrap();
        let batch: Vec<_> = (0..8)
            .map(|_| vq_images[rng.below(vq_images.len())].clone())
            .collect();
        vq.train_step(&batch, &mut vq_opt, lr_t).unwrap();
    }

    let eval_raw = make_dataset(&DatasetSpec {
        n_und: 0,
        n_gen: 32,
        textread_frac: 0.0,
        seed: 7,
    });
    let mut ok = 0;
    let mut mse_sum = 0.0;
    let mut worst: f64 = 0.0;
    for s in &eval_raw {
        let Scene::Shapes(expected) = &s.scene else { continue };
        let img = render(&s.scene);
        let rec = vq.reconstruct(&img).unwrap();
        let mse = img.mse(&rec).unwrap();
        mse_sum += mse;
        worst = worst.max(mse);
        let mut got = detect(&rec);
        got.sort_by_key(|p| p.cell);
        let mut want = expected.clone();
        want.sort_by_key(|p| p.cell);
        if got == want {
            ok += 1;
        }
    }
    eprintln!(
        "{label}: closure {ok}/32 mse mean {:.4} worst {:.4} ({:.0?})",
        mse_sum / 32.0,
        worst,
        t0.elapsed()
    );
}

#[test]
#[ignore]
fn probe_vq_capacity() {
    sweep(VqConfig::default(), 700, 3e-3);
    sweep(
        VqConfig {
            codebook_size: 128,
            embed_dim: 24,
            channels: vec![24, 48],
            ..Default::default()
        },
        900,
        3e-3,
    );
    sweep(
        VqConfig {
            codebook_size: 128,
            embed_dim: 32,
            channels: vec![32, 64],
            ..Default::default()
        },
        1200,
        2e-3,
    );
}
