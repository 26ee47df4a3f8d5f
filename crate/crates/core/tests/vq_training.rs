//! Seeded VQ tokenizer training run: reconstruction quality gate.

use duovis_core::image::Image;
use duovis_core::optim::{AdamW, AdamWConfig};
use duovis_core::rng::Rng;
use duovis_core::scene::{render, Placement, Scene, SHAPE_KINDS};
use duovis_core::vq::{VqConfig, VqTokenizer};

fn training_images(n: usize, seed: u64) -> Vec<Image> {
    let mut rng = Rng::stream(seed, 1);
    (0..n)
        .map(|_| {
            let count = 1 + rng.below(3);
            let mut cells: Vec<usize> = (0..9).collect();
            let mut items = Vec::new();
            for _ in 0..count {
                let ci = rng.below(cells.len());
                let cell = cells.remove(ci);
                items.push(Placement {
                    kind: SHAPE_KINDS[rng.below(3)],
                    color: rng.below(6),
                    cell,
                });
            }
            render(&Scene::Shapes(items))
        })
        .collect()
}

#[test]
fn tokenizer_reaches_low_reconstruction_error() {
    let mut tok = VqTokenizer::<f32>::new(VqConfig::default(), 1234).unwrap();
    let mut opt = AdamW::new(AdamWConfig::default());
    let images = training_images(48, 99);
    let mut rng = Rng::stream(1234, 2);

    let steps = 900;
    let batch = 8;
    for step in 0..steps {
        let lr = duovis_core::optim::cosine_lr(step, steps, 3e-3).unwrap();
        let chosen: Vec<Image> = (0..batch)
            .map(|_| images[rng.below(images.len())].clone())
            .collect();
        tok.train_step(&chosen, &mut opt, lr).unwrap();
    }

    let mut worst = 0.0f64;
    let mut mean = 0.0f64;
    for img in &images {
        let rec = tok.reconstruct(img).unwrap();
        let mse = img.mse(&rec).unwrap();
        mean += mse;
        worst = worst.max(mse);
    }
    mean /= images.len() as f64;
    eprintln!("vq recon mse: mean {mean:.5} worst {worst:.5}");
    assert!(mean < 0.01, "mean reconstruction MSE {mean} >= 0.01");
}
