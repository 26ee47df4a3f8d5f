//! Toy evaluation metrics: exact-match accuracy for understanding and
//! rule-based attribute scoring (detector over generated images) for
//! generation.

use alloc::vec::Vec;

use crate::data::{RawSample, UndKind};
use crate::error::{usage_err, Result};
use crate::image::Image;
use crate::model::UnifiedModel;
use crate::real::Real;
use crate::sampler::{answer, generate_image, DecodeMode, GenerationConfig};
use crate::scene::{detect, render, Placement, Scene};
use crate::tape::Tape;
use crate::vq::VqTokenizer;

#[derive(Debug, Clone, Copy, Default)]
pub struct UndScores {
    /// Exact-match accuracy over general QA samples.
    pub general: Option<f64>,
    /// Exact-match accuracy over text-reading samples.
    pub textread: Option<f64>,
    pub overall: f64,
    pub n: usize,
}

/// Greedy-decodes every understanding sample and scores exact string
/// matches against the template answers.
pub fn eval_understanding<T: Real>(
    tape: &mut Tape<T>,
    model: &UnifiedModel,
    vq: &mut VqTokenizer<T>,
    samples: &[RawSample],
    max_new_tokens: usize,
) -> Result<UndScores> {
    let cfg = GenerationConfig {
        mode: DecodeMode::Greedy,
        max_new_tokens,
        ..Default::default()
    };
    let mut hit_general = 0usize;
    let mut n_general = 0usize;
    let mut hit_text = 0usize;
    let mut n_text = 0usize;
    for sample in samples {
        if sample.task != crate::codec::TaskKind::Understanding {
            continue;
        }
        let image = render(&sample.scene);
        let result = answer(tape, model, vq, &image, &sample.prompt, &cfg)?;
        let hit = result.text == sample.answer;
        match sample.und_kind {
            Some(UndKind::TextRead) => {
                n_text += 1;
                if hit {
                    hit_text += 1;
                }
            }
            _ => {
                n_general += 1;
                if hit {
                    hit_general += 1;
                }
            }
        }
    }
    let n = n_general + n_text;
    if n == 0 {
        return Err(usage_err!("no understanding samples to evaluate"));
    }
    Ok(UndScores {
        general: (n_general > 0).then(|| hit_general as f64 / n_general as f64),
        textread: (n_text > 0).then(|| hit_text as f64 / n_text as f64),
        overall: (hit_general + hit_text) as f64 / n as f64,
        n,
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GenScores {
    /// Fraction of prompts whose detected attributes match exactly.
    pub overall: f64,
    /// Mean per-prompt partial credit over presence/color/position.
    pub attribute: f64,
    pub n: usize,
    pub undecodable: usize,
}

/// Scores one generated image against the expected placements:
/// (presence, color, position) binaries.
pub fn attribute_match(expected: &[Placement], image: &Image) -> (bool, bool, bool) {
    let mut want = expected.to_vec();
    want.sort_by_key(|p| p.cell);
    let mut got = detect(image);
    got.sort_by_key(|p| p.cell);

    let mut want_kinds: Vec<_> = want.iter().map(|p| p.kind).collect();
    let mut got_kinds: Vec<_> = got.iter().map(|p| p.kind).collect();
    want_kinds.sort_unstable();
    got_kinds.sort_unstable();
    let presence = want_kinds == got_kinds;

    let mut want_colored: Vec<_> = want.iter().map(|p| (p.kind, p.color)).collect();
    let mut got_colored: Vec<_> = got.iter().map(|p| (p.kind, p.color)).collect();
    want_colored.sort_unstable();
    got_colored.sort_unstable();
    let color = want_colored == got_colored;

    let position = want == got;
    (presence, color, position)
}

/// Generates one image per prompt and runs the detector against the
/// sample's ground-truth placements.
#[allow(clippy::too_many_arguments)]
pub fn eval_generation<T: Real>(
    tape: &mut Tape<T>,
    model: &UnifiedModel,
    vq: &mut VqTokenizer<T>,
    samples: &[RawSample],
    grid_h: usize,
    grid_w: usize,
    guidance_scale: f64,
    seed: u64,
) -> Result<GenScores> {
    let mut n = 0usize;
    let mut exact = 0usize;
    let mut partial = 0.0f64;
    let mut undecodable = 0usize;
    for (i, sample) in samples.iter().enumerate() {
        if sample.task != crate::codec::TaskKind::Generation {
            continue;
        }
        let Scene::Shapes(expected) = &sample.scene else {
            continue;
        };
        n += 1;
        let cfg = GenerationConfig {
            mode: DecodeMode::Sample,
            temperature: 1.0,
            guidance_scale,
            max_new_tokens: 0,
            seed: seed.wrapping_add(i as u64),
        };
        match generate_image(tape, model, vq, &sample.prompt, grid_h, grid_w, &cfg) {
            Ok(out) => {
                let (presence, color, position) = attribute_match(expected, &out.image);
                if presence && color && position {
                    exact += 1;
                }
                partial +=
                    (presence as u8 + color as u8 + position as u8) as f64 / 3.0;
            }
            Err(_) => {
                // Undecodable output scores zero and is counted.
                undecodable += 1;
            }
        }
    }
    if n == 0 {
        return Err(usage_err!("no generation samples to evaluate"));
    }
    Ok(GenScores {
        overall: exact as f64 / n as f64,
        attribute: partial / n as f64,
        n,
        undecodable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::ShapeKind;
    use alloc::vec;

    #[test]
    fn detector_on_ground_truth_scores_full_marks() {
        let expected = vec![
            Placement {
                kind: ShapeKind::Square,
                color: 0,
                cell: 0,
            },
            Placement {
                kind: ShapeKind::Circle,
                color: 2,
                cell: 8,
            },
        ];
        let img = render(&Scene::Shapes(expected.clone()));
        let (p, c, pos) = attribute_match(&expected, &img);
        assert!(p && c && pos);
    }

    #[test]
    fn blank_image_scores_zero() {
        let expected = vec![Placement {
            kind: ShapeKind::Square,
            color: 0,
            cell: 0,
        }];
        let blank = Image::black(24, 24);
        let (p, c, pos) = attribute_match(&expected, &blank);
        assert!(!p && !c && !pos);
    }

    #[test]
    fn wrong_color_fails_color_only() {
        let expected = vec![Placement {
            kind: ShapeKind::Square,
            color: 0,
            cell: 4,
        }];
        let painted = render(&Scene::Shapes(vec![Placement {
            kind: ShapeKind::Square,
            color: 3,
            cell: 4,
        }]));
        let (p, c, pos) = attribute_match(&expected, &painted);
        assert!(p);
        assert!(!c);
        assert!(!pos);
    }

    #[test]
    fn wrong_cell_fails_position_only() {
        let expected = vec![Placement {
            kind: ShapeKind::Triangle,
            color: 1,
            cell: 0,
        }];
        let moved = render(&Scene::Shapes(vec![Placement {
            kind: ShapeKind::Triangle,
            color: 1,
            cell: 5,
        }]));
        let (p, c, pos) = attribute_match(&expected, &moved);
        assert!(p && c);
        assert!(!pos);
    }
}
