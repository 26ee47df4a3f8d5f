//! Synthetic dataset construction: scenes paired with template QA for
//! understanding, captions paired with render targets for generation,
//! plus the text-reading subset.

use alloc::string::String;
use alloc::vec::Vec;

use crate::codec::{encode_text, TaskKind};
use crate::error::Result;
use crate::rng::Rng;
use crate::scene::{
    caption, render, Placement, Scene, COLOR_NAMES, POSITION_NAMES, SHAPE_KINDS,
};
use crate::trainer::{TrainSample, TrainSet};
use crate::vq::VqTokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UndKind {
    General,
    TextRead,
}

/// One sample before tokenization: the scene plus its text pair.
#[derive(Debug, Clone)]
pub struct RawSample {
    pub task: TaskKind,
    pub scene: Scene,
    pub prompt: String,
    /// Empty for generation samples.
    pub answer: String,
    pub und_kind: Option<UndKind>,
}

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub n_und: usize,
    pub n_gen: usize,
    /// Fraction of understanding samples that are text-reading.
    pub textread_frac: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_und: 64,
            n_gen: 64,
            textread_frac: 0.25,
            seed: 0,
        }
    }
}

/// Scene with 1..=3 shapes in distinct cells, with pairwise distinct
/// kinds and colors so the QA templates stay unambiguous.
fn sample_scene(rng: &mut Rng) -> Vec<Placement> {
    let count = 1 + rng.below(3);
    let mut cells: Vec<usize> = (0..9).collect();
    let mut kinds: Vec<usize> = (0..3).collect();
    let mut colors: Vec<usize> = (0..6).collect();
    let mut items = Vec::with_capacity(count);
    for _ in 0..count {
        let cell = cells.remove(rng.below(cells.len()));
        let kind = kinds.remove(rng.below(kinds.len()));
        let color = colors.remove(rng.below(colors.len()));
        items.push(Placement {
            kind: SHAPE_KINDS[kind],
            color,
            cell,
        });
    }
    items.sort_by_key(|p| p.cell);
    items
}

const COUNT_WORDS: [&str; 3] = ["one", "two", "three"];

fn qa_for(items: &[Placement], rng: &mut Rng) -> (String, String) {
    let target = &items[rng.below(items.len())];
    match rng.below(4) {
        0 => (
            alloc::format!("what color is the {}?", target.kind.name()),
            String::from(COLOR_NAMES[target.color]),
        ),
        1 => (
            alloc::format!("what shape is the {} object?", COLOR_NAMES[target.color]),
            String::from(target.kind.name()),
        ),
        2 => (
            String::from("how many objects are there?"),
            String::from(COUNT_WORDS[items.len() - 1]),
        ),
        _ => (
            alloc::format!("where is the {}?", target.kind.name()),
            String::from(POSITION_NAMES[target.cell]),
        ),
    }
}

fn sample_word(rng: &mut Rng) -> String {
    let len = 2 + rng.below(3);
    (0..len)
        .map(|_| (b'a' + rng.below(26) as u8) as char)
        .collect()
}

/// Deterministic dataset: the same (spec, seed) always produces the
/// same samples.
pub fn make_dataset(spec: &DatasetSpec) -> Vec<RawSample> {
    let mut rng = Rng::stream(spec.seed, 0x64617461);
    let mut samples = Vec::with_capacity(spec.n_und + spec.n_gen);
    for _ in 0..spec.n_und {
        if rng.bernoulli(spec.textread_frac) {
            let word = sample_word(&mut rng);
            samples.push(RawSample {
                task: TaskKind::Understanding,
                scene: Scene::Text(word.clone()),
                prompt: String::from("read the text"),
                answer: word,
                und_kind: Some(UndKind::TextRead),
            });
        } else {
            let items = sample_scene(&mut rng);
            let (prompt, answer) = qa_for(&items, &mut rng);
            samples.push(RawSample {
                task: TaskKind::Understanding,
                scene: Scene::Shapes(items),
                prompt,
                answer,
                und_kind: Some(UndKind::General),
            });
        }
    }
    for _ in 0..spec.n_gen {
        let items = sample_scene(&mut rng);
        let prompt = caption(&items);
        samples.push(RawSample {
            task: TaskKind::Generation,
            scene: Scene::Shapes(items),
            prompt,
            answer: String::new(),
            und_kind: None,
        });
    }
    samples
}

/// Renders and VQ-encodes raw samples into the trainer's shape. The
/// tokenizer is used frozen.
pub fn prepare_training<T: crate::real::Real>(
    raw: &[RawSample],
    vq: &mut VqTokenizer<T>,
) -> Result<TrainSet> {
    let mut set = TrainSet::default();
    for sample in raw {
        let image = render(&sample.scene);
        let grid = vq.encode_image(&image)?;
        let train = TrainSample {
            task: sample.task,
            image,
            grid,
            prompt: encode_text(&sample.prompt),
            answer: encode_text(&sample.answer),
        };
        match sample.task {
            TaskKind::Understanding => set.und.push(train),
            TaskKind::Generation => set.gen.push(train),
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_counted() {
        let spec = DatasetSpec {
            n_und: 100,
            n_gen: 50,
            textread_frac: 0.3,
            seed: 7,
        };
        let a = make_dataset(&spec);
        let b = make_dataset(&spec);
        assert_eq!(a.len(), 150);
        assert_eq!(
            a.iter().filter(|s| s.task == TaskKind::Understanding).count(),
            100
        );
        assert_eq!(a.iter().filter(|s| s.task == TaskKind::Generation).count(), 50);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.scene, y.scene);
            assert_eq!(x.prompt, y.prompt);
            assert_eq!(x.answer, y.answer);
        }
    }

    #[test]
    fn color_marginal_roughly_uniform() {
        let spec = DatasetSpec {
            n_und: 0,
            n_gen: 10_000,
            textread_frac: 0.0,
            seed: 3,
        };
        let data = make_dataset(&spec);
        let mut counts = [0usize; 6];
        let mut total = 0usize;
        for s in &data {
            if let Scene::Shapes(items) = &s.scene {
                for p in items {
                    counts[p.color] += 1;
                    total += 1;
                }
            }
        }
        // chi-square sanity against uniform: with ~20k draws the
        // statistic stays far below a catastrophic threshold.
        let expected = total as f64 / 6.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 30.0, "chi2 {chi2}, counts {counts:?}");
    }

    #[test]
    fn answers_match_templates() {
        let spec = DatasetSpec {
            n_und: 200,
            n_gen: 0,
            textread_frac: 0.0,
            seed: 11,
        };
        for s in make_dataset(&spec) {
            let Scene::Shapes(items) = &s.scene else {
                panic!("expected shapes")
            };
            if s.prompt.starts_with("what color is the ") {
                let kind = s
                    .prompt
                    .trim_start_matches("what color is the ")
                    .trim_end_matches('?');
                let hit = items
                    .iter()
                    .find(|p| p.kind.name() == kind)
                    .expect("target exists");
                assert_eq!(s.answer, COLOR_NAMES[hit.color]);
            } else if s.prompt == "how many objects are there?" {
                assert_eq!(s.answer, COUNT_WORDS[items.len() - 1]);
            }
        }
    }

    #[test]
    fn textread_samples_answer_their_word() {
        let spec = DatasetSpec {
            n_und: 50,
            n_gen: 0,
            textread_frac: 1.0,
            seed: 4,
        };
        for s in make_dataset(&spec) {
            assert_eq!(s.und_kind, Some(UndKind::TextRead));
            let Scene::Text(word) = &s.scene else {
                panic!("expected text scene")
            };
            assert_eq!(&s.answer, word);
            assert!((2..=4).contains(&word.len()));
        }
    }
}
