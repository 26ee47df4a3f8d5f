//! Synthetic scenes: colored shapes on a 3x3 cell grid, plus short
//! rendered words for the text-reading task. The renderer is a pure
//! function of the scene description, and `detect` inverts it.

use alloc::string::String;
use alloc::vec::Vec;

use crate::image::Image;

/// Pixels per grid cell; the canvas is 3x3 cells.
pub const CELL: usize = 8;
pub const GRID: usize = 3;
/// Canvas side in pixels (24), divisible by the VQ downsample factor.
pub const CANVAS: usize = CELL * GRID;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

pub const SHAPE_KINDS: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    fn index(self) -> usize {
        match self {
            ShapeKind::Circle => 0,
            ShapeKind::Square => 1,
            ShapeKind::Triangle => 2,
        }
    }
}

/// 8x8 bitmaps, one row per byte, bit 7 = leftmost pixel.
const SHAPE_BITMAPS: [[u8; 8]; 3] = [
    // circle
    [
        0b00000000, 0b00111100, 0b01111110, 0b01111110, 0b01111110, 0b01111110, 0b00111100,
        0b00000000,
    ],
    // square
    [
        0b00000000, 0b01111110, 0b01111110, 0b01111110, 0b01111110, 0b01111110, 0b01111110,
        0b00000000,
    ],
    // triangle
    [
        0b00000000, 0b00011000, 0b00011000, 0b00111100, 0b00111100, 0b01111110, 0b01111110,
        0b00000000,
    ],
];

pub const COLOR_NAMES: [&str; 6] = ["red", "green", "blue", "yellow", "magenta", "cyan"];

pub const COLOR_VALUES: [[f32; 3]; 6] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
];

pub const POSITION_NAMES: [&str; 9] = [
    "top left",
    "top center",
    "top right",
    "middle left",
    "center",
    "middle right",
    "bottom left",
    "bottom center",
    "bottom right",
];

/// One shape: kind, color index into [`COLOR_NAMES`], cell in 0..9
/// (row-major over the 3x3 grid).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Placement {
    pub kind: ShapeKind,
    pub color: usize,
    pub cell: usize,
}

/// What gets rendered: 1-3 shapes in distinct cells, or a short word.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Scene {
    Shapes(Vec<Placement>),
    Text(String),
}

/// 3x5 glyphs for a-z, three bits per row, row-major from the top.
const FONT: [u16; 26] = [
    0b010_101_111_101_101, // a
    0b110_101_110_101_110, // b
    0b011_100_100_100_011, // c
    0b110_101_101_101_110, // d
    0b111_100_110_100_111, // e
    0b111_100_110_100_100, // f
    0b011_100_101_101_011, // g
    0b101_101_111_101_101, // h
    0b111_010_010_010_111, // i
    0b001_001_001_101_010, // j
    0b101_110_100_110_101, // k
    0b100_100_100_100_111, // l
    0b101_111_111_101_101, // m
    0b110_101_101_101_101, // n
    0b010_101_101_101_010, // o
    0b110_101_110_100_100, // p
    0b010_101_101_110_011, // q
    0b110_101_110_110_101, // r
    0b011_100_010_001_110, // s
    0b111_010_010_010_010, // t
    0b101_101_101_101_111, // u
    0b101_101_101_101_010, // v
    0b101_101_111_111_101, // w
    0b101_101_010_101_101, // x
    0b101_101_010_010_010, // y
    0b111_001_010_100_111, // z
];

/// Renders a scene onto a black 24x24 canvas. Deterministic: the
/// scene's attributes fully determine every pixel.
pub fn render(scene: &Scene) -> Image {
    let mut img = Image::black(CANVAS, CANVAS);
    match scene {
        Scene::Shapes(items) => {
            for p in items {
                let bitmap = &SHAPE_BITMAPS[p.kind.index()];
                let rgb = COLOR_VALUES[p.color];
                let cy = (p.cell / GRID) * CELL;
                let cx = (p.cell % GRID) * CELL;
                for (dy, row) in bitmap.iter().enumerate() {
                    for dx in 0..8 {
                        if row & (0x80 >> dx) != 0 {
                            img.set_pixel(cy + dy, cx + dx, rgb);
                        }
                    }
                }
            }
        }
        Scene::Text(word) => {
            let n = word.len();
            let width = n * 4 - 1;
            let x0 = (CANVAS - width) / 2;
            let y0 = (CANVAS - 5) / 2;
            for (i, ch) in word.bytes().enumerate() {
                debug_assert!(ch.is_ascii_lowercase());
                let glyph = FONT[(ch - b'a') as usize];
                for row in 0..5 {
                    for col in 0..3 {
                        let bit = 14 - (row * 3 + col);
                        if glyph & (1 << bit) != 0 {
                            img.set_pixel(y0 + row, x0 + i * 4 + col, [1.0, 1.0, 1.0]);
                        }
                    }
                }
            }
        }
    }
    img
}

/// Inverts [`render`] for shape scenes by nearest-template matching
/// on raw pixels: per grid cell, compare the 8x8 block against every
/// (shape, color) template plus the empty cell and keep the closest
/// in squared error. Continuous matching tolerates the blur a trained
/// VQ tokenizer leaves behind (a softened circle corner still sits
/// closer to the circle template than to the square's full corner).
pub fn detect(img: &Image) -> Vec<Placement> {
    let mut found = Vec::new();
    for cell in 0..GRID * GRID {
        let cy = (cell / GRID) * CELL;
        let cx = (cell % GRID) * CELL;
        // distance to the empty (all-black) cell
        let mut best_dist = 0.0f64;
        for dy in 0..CELL {
            for dx in 0..CELL {
                let p = img.pixel(cy + dy, cx + dx);
                best_dist += (0..3).map(|c| (p[c] as f64) * (p[c] as f64)).sum::<f64>();
            }
        }
        let mut best: Option<(ShapeKind, usize)> = None;
        for &kind in &SHAPE_KINDS {
            let bitmap = &SHAPE_BITMAPS[kind.index()];
            for (color, rgb) in COLOR_VALUES.iter().enumerate() {
                let mut dist = 0.0f64;
                for dy in 0..CELL {
                    for dx in 0..CELL {
                        let p = img.pixel(cy + dy, cx + dx);
                        let on = bitmap[dy] & (0x80 >> dx) != 0;
                        for c in 0..3 {
                            let want = if on { rgb[c] as f64 } else { 0.0 };
                            let d = p[c] as f64 - want;
                            dist += d * d;
                        }
                    }
                }
                if dist < best_dist {
                    best_dist = dist;
                    best = Some((kind, color));
                }
            }
        }
        if let Some((kind, color)) = best {
            found.push(Placement { kind, color, cell });
        }
    }
    found
}

/// Canonical caption, items in cell order:
/// "a red square at top left and a blue circle at center".
pub fn caption(items: &[Placement]) -> String {
    let mut sorted: Vec<&Placement> = items.iter().collect();
    sorted.sort_by_key(|p| p.cell);
    let parts: Vec<String> = sorted
        .iter()
        .map(|p| {
            alloc::format!(
                "a {} {} at {}",
                COLOR_NAMES[p.color],
                p.kind.name(),
                POSITION_NAMES[p.cell]
            )
        })
        .collect();
    parts.join(" and ")
}
