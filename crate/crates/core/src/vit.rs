//! Continuous visual encoding: a small patch ViT applied per grid
//! cell, plus the two-layer MLP adapter into LM width.
//!
//! Resolution scale-up partitions the input into one of a fixed set of
//! grid layouts; every cell is letterboxed to the base cell size and
//! encoded independently by the same ViT, then the per-cell token
//! blocks are concatenated row-major (no separators between blocks).

use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape_err, usage_err, Result};
use crate::image::{Image, CHANNELS};
use crate::nn::{Activation, Block, LayerNorm, Linear, ParamList};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridConfig {
    pub rows: usize,
    pub cols: usize,
}

impl GridConfig {
    pub const fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }
}

/// Grid layouts available when scale-up is enabled.
pub const SCALEUP_GRIDS: [GridConfig; 5] = [
    GridConfig::new(2, 2),
    GridConfig::new(1, 2),
    GridConfig::new(1, 3),
    GridConfig::new(2, 1),
    GridConfig::new(3, 1),
];

/// Fraction of the canvas left as padding when an image with the
/// given aspect ratio is letterboxed into a rows x cols cell layout.
pub fn padding_fraction(aspect: f64, grid: GridConfig) -> f64 {
    let layout_aspect = grid.cols as f64 / grid.rows as f64;
    let fill = if aspect >= layout_aspect {
        layout_aspect / aspect
    } else {
        aspect / layout_aspect
    };
    1.0 - fill
}

/// Picks the grid minimizing padded area for the aspect ratio; ties
/// break toward fewer cells, then enumeration order. Returns 1x1 when
/// scale-up is disabled.
pub fn select_grid(aspect_ratio: f64, scaleup_enabled: bool) -> GridConfig {
    if !scaleup_enabled {
        return GridConfig::new(1, 1);
    }
    let mut best = SCALEUP_GRIDS[0];
    let mut best_pad = padding_fraction(aspect_ratio, best);
    for &g in &SCALEUP_GRIDS[1..] {
        let pad = padding_fraction(aspect_ratio, g);
        if pad + 1e-12 < best_pad || ((pad - best_pad).abs() <= 1e-12 && g.cells() < best.cells())
        {
            best = g;
            best_pad = pad;
        }
    }
    best
}

/// Continuous token block produced by the encoder: [n, dim] vectors
/// and the grid they came from.
#[derive(Debug, Clone)]
pub struct PatchEmbeddingSeq<T> {
    pub vectors: Tensor<T>,
    pub source_grid: GridConfig,
}

#[derive(Debug, Clone)]
pub struct VitConfig {
    /// Base cell side S; each grid cell is letterboxed to S x S.
    pub cell_size: usize,
    /// Patch side p; each cell yields (S/p)^2 tokens.
    pub patch_size: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    /// LM width the adapter projects into.
    pub lm_width: usize,
    pub scaleup: bool,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            cell_size: 16,
            patch_size: 4,
            width: 32,
            blocks: 2,
            heads: 4,
            lm_width: 64,
            scaleup: false,
        }
    }
}

impl VitConfig {
    pub fn tokens_per_cell(&self) -> usize {
        let side = self.cell_size / self.patch_size;
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        if self.cell_size % self.patch_size != 0 {
            return Err(usage_err!(
                "cell size {} not divisible by patch size {}",
                self.cell_size,
                self.patch_size
            ));
        }
        if self.width % self.heads != 0 {
            return Err(usage_err!("width {} not divisible by heads {}", self.width, self.heads));
        }
        Ok(())
    }
}

/// ViT + adapter with parameters registered on a shared tape. The two
/// live in separate groups ("vit", "adapter") so the trainer can give
/// them distinct learning rates.
pub struct VisionEncoder {
    pub cfg: VitConfig,
    patch_embed: Linear,
    pos: Var,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    adapter_fc1: Linear,
    adapter_fc2: Linear,
    vit_params: ParamList,
    adapter_params: ParamList,
}

impl VisionEncoder {
    pub fn init<T: Real>(tape: &mut Tape<T>, cfg: VitConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut vit_params = ParamList::new();
        let mut adapter_params = ParamList::new();
        let patch_dim = cfg.patch_size * cfg.patch_size * CHANNELS;
        let patch_embed = Linear::init(
            tape,
            &mut vit_params,
            "vit.patch_embed",
            patch_dim,
            cfg.width,
            rng,
        );
        let pos = tape.leaf(
            Tensor::randn(alloc::vec![cfg.tokens_per_cell(), cfg.width], 0.02, rng),
            true,
        );
        vit_params.push("vit.pos".into(), pos);
        let blocks = (0..cfg.blocks)
            .map(|i| {
                Block::init(
                    tape,
                    &mut vit_params,
                    &format!("vit.block{i}"),
                    cfg.width,
                    cfg.heads,
                    4,
                    Activation::Gelu,
                    rng,
                )
            })
            .collect();
        let final_norm = LayerNorm::init(tape, &mut vit_params, "vit.final_norm", cfg.width);
        let adapter_fc1 = Linear::init(
            tape,
            &mut adapter_params,
            "adapter.fc1",
            cfg.width,
            cfg.lm_width,
            rng,
        );
        let adapter_fc2 = Linear::init(
            tape,
            &mut adapter_params,
            "adapter.fc2",
            cfg.lm_width,
            cfg.lm_width,
            rng,
        );
        Ok(Self {
            cfg,
            patch_embed,
            pos,
            blocks,
            final_norm,
            adapter_fc1,
            adapter_fc2,
            vit_params,
            adapter_params,
        })
    }

    pub fn vit_entries(&self) -> &[(alloc::string::String, Var)] {
        &self.vit_params.entries
    }

    pub fn adapter_entries(&self) -> &[(alloc::string::String, Var)] {
        &self.adapter_params.entries
    }

    /// Flattens one letterboxed cell into [tokens, p*p*3] patch rows.
    fn patchify<T: Real>(&self, cell: &Image) -> Tensor<T> {
        let s = self.cfg.cell_size;
        let p = self.cfg.patch_size;
        let side = s / p;
        let mut data = Vec::with_capacity(side * side * p * p * CHANNELS);
        for py in 0..side {
            for px in 0..side {
                for dy in 0..p {
                    for dx in 0..p {
                        let pix = cell.pixel(py * p + dy, px * p + dx);
                        for c in 0..CHANNELS {
                            data.push(T::from_f64(pix[c] as f64));
                        }
                    }
                }
            }
        }
        Tensor::new(alloc::vec![side * side, p * p * CHANNELS], data)
            .expect("patchify dims are consistent")
    }

    /// Runs one cell through the ViT trunk: [tokens_per_cell, width].
    fn encode_cell<T: Real>(&self, tape: &mut Tape<T>, cell: &Image) -> Result<Var> {
        let patches = tape.constant(self.patchify(cell));
        let mut x = self.patch_embed.forward(tape, patches)?;
        x = tape.add(x, self.pos)?;
        for block in &self.blocks {
            x = block.forward(tape, x, false)?;
        }
        self.final_norm.forward(tape, x)
    }

    /// Full continuous encoding: letterbox to the grid canvas, encode
    /// each cell independently, concatenate row-major.
    pub fn encode_continuous<T: Real>(
        &self,
        tape: &mut Tape<T>,
        image: &Image,
        grid: GridConfig,
    ) -> Result<Var> {
        if image.h == 0 || image.w == 0 {
            return Err(usage_err!("degenerate image {}x{}", image.h, image.w));
        }
        let s = self.cfg.cell_size;
        let canvas = image.letterbox(grid.rows * s, grid.cols * s)?;
        let mut cells = Vec::with_capacity(grid.cells());
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                let mut cell = Image::black(s, s);
                for y in 0..s {
                    for x in 0..s {
                        cell.set_pixel(y, x, canvas.pixel(r * s + y, c * s + x));
                    }
                }
                cells.push(self.encode_cell(tape, &cell)?);
            }
        }
        if cells.len() == 1 {
            Ok(cells[0])
        } else {
            tape.concat_rows(&cells)
        }
    }

    /// Two-layer MLP into LM width; token count unchanged.
    pub fn adapt<T: Real>(&self, tape: &mut Tape<T>, features: Var) -> Result<Var> {
        if tape.value(features).cols() != self.cfg.width {
            return Err(shape_err!(
                "adapter expects width {}, got {:?}",
                self.cfg.width,
                tape.value(features).shape()
            ));
        }
        let h = self.adapter_fc1.forward(tape, features)?;
        let h = tape.gelu(h);
        self.adapter_fc2.forward(tape, h)
    }

    /// encode + adapt, the full continuous branch.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        image: &Image,
        grid: GridConfig,
    ) -> Result<Var> {
        let feats = self.encode_continuous(tape, image, grid)?;
        self.adapt(tape, feats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enumerate_oracle(aspect: f64) -> GridConfig {
        // Independent enumeration: recompute padding per config and
        // argmin with the documented tie-breaks.
        let mut scored: Vec<(f64, usize, usize, GridConfig)> = SCALEUP_GRIDS
            .iter()
            .enumerate()
            .map(|(i, &g)| (padding_fraction(aspect, g), g.cells(), i, g))
            .collect();
        scored.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        scored[0].3
    }

    #[test]
    fn grid_selection_matches_enumeration_oracle() {
        // aspect 1.0 -> (2,2); aspect 3.0 -> (1,3)
        assert_eq!(select_grid(1.0, true), GridConfig::new(2, 2));
        assert_eq!(select_grid(3.0, true), GridConfig::new(1, 3));
        assert_eq!(select_grid(0.5, true), GridConfig::new(2, 1));
        // disabled -> (1,1) regardless
        assert_eq!(select_grid(7.3, false), GridConfig::new(1, 1));

        let mut aspect = 0.05f64;
        while aspect < 20.0 {
            assert_eq!(
                select_grid(aspect, true),
                enumerate_oracle(aspect),
                "aspect {aspect}"
            );
            aspect *= 1.07;
        }
    }

    #[test]
    fn token_counts_match_closed_form() {
        let mut tape = Tape::<f32>::new();
        let mut rng = Rng::new(3);
        let enc = VisionEncoder::init(&mut tape, VitConfig::default(), &mut rng).unwrap();
        tape.mark_persistent();
        let img = Image::black(24, 24);
        // S=16, p=4, (1,1) -> 16 tokens
        let v = enc
            .encode_continuous(&mut tape, &img, GridConfig::new(1, 1))
            .unwrap();
        assert_eq!(tape.value(v).shape(), &[16, 32]);
        tape.reset();
        // (2,2) -> 64 tokens
        let v = enc
            .encode_continuous(&mut tape, &img, GridConfig::new(2, 2))
            .unwrap();
        assert_eq!(tape.value(v).shape(), &[64, 32]);
        for &g in &SCALEUP_GRIDS {
            tape.reset();
            let v = enc.encode_continuous(&mut tape, &img, g).unwrap();
            assert_eq!(tape.value(v).rows(), g.cells() * enc.cfg.tokens_per_cell());
        }
    }

    #[test]
    fn cells_are_independent_blocks() {
        // Permuting cell contents permutes the corresponding token
        // blocks exactly. Build a 32x32 image from two distinct 16x16
        // halves arranged (1,2), then swap them.
        let mut tape = Tape::<f32>::new();
        let mut rng = Rng::new(9);
        let cfg = VitConfig {
            scaleup: true,
            ..Default::default()
        };
        let enc = VisionEncoder::init(&mut tape, cfg, &mut rng).unwrap();
        tape.mark_persistent();

        let mut left = Image::black(16, 32);
        for y in 0..16 {
            for x in 0..16 {
                left.set_pixel(y, x, [1.0, 0.0, 0.0]);
                left.set_pixel(y, x + 16, [0.0, 0.0, 1.0]);
            }
        }
        let mut right = Image::black(16, 32);
        for y in 0..16 {
            for x in 0..16 {
                right.set_pixel(y, x, [0.0, 0.0, 1.0]);
                right.set_pixel(y, x + 16, [1.0, 0.0, 0.0]);
            }
        }
        let grid = GridConfig::new(1, 2);
        let a = enc.encode_continuous(&mut tape, &left, grid).unwrap();
        let a_val = tape.value(a).clone();
        tape.reset();
        let b = enc.encode_continuous(&mut tape, &right, grid).unwrap();
        let b_val = tape.value(b).clone();
        let n = enc.cfg.tokens_per_cell();
        for i in 0..n {
            assert_eq!(a_val.row(i), b_val.row(n + i), "block swap row {i}");
            assert_eq!(a_val.row(n + i), b_val.row(i));
        }
    }

    #[test]
    fn adapter_is_tokenwise_and_degenerate_case() {
        let mut tape = Tape::<f64>::new();
        let mut rng = Rng::new(4);
        let enc = VisionEncoder::init(&mut tape, VitConfig::default(), &mut rng).unwrap();
        // zero the adapter weights, set fc2 bias: every token -> bias
        let zeros1 = Tensor::zeros(alloc::vec![32, 64]);
        tape.set_value(enc.adapter_fc1.w, zeros1);
        tape.set_value(enc.adapter_fc2.w, Tensor::zeros(alloc::vec![64, 64]));
        let mut bias = Tensor::zeros(alloc::vec![64]);
        bias.data_mut()[3] = 7.0;
        tape.set_value(enc.adapter_fc2.b, bias);
        tape.mark_persistent();

        let feats = tape.leaf(Tensor::randn(alloc::vec![5, 32], 1.0, &mut rng), false);
        let out = enc.adapt(&mut tape, feats).unwrap();
        assert_eq!(tape.value(out).shape(), &[5, 64]);
        for i in 0..5 {
            assert_eq!(tape.value(out).row(i)[3], 7.0);
            assert_eq!(tape.value(out).row(i)[0], 0.0);
        }

        // width mismatch -> usage error
        let bad = tape.leaf(Tensor::zeros(alloc::vec![5, 16]), false);
        assert!(enc.adapt(&mut tape, bad).is_err());
    }

    #[test]
    fn zero_sized_image_rejected() {
        let mut tape = Tape::<f32>::new();
        let mut rng = Rng::new(4);
        let enc = VisionEncoder::init(&mut tape, VitConfig::default(), &mut rng).unwrap();
        let img = Image::black(0, 4);
        assert!(enc
            .encode_continuous(&mut tape, &img, GridConfig::new(1, 1))
            .is_err());
    }
}
