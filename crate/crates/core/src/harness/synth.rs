//! Synthetic segmentation scenes: a few coloured shapes on a textured background.
//!
//! Class 0 is background; classes 1..=8 are the combinations of two shapes
//! (square, disk) and four colours.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ModelConfig;
use crate::error::{EscError, Result};
use crate::rng::substream;

/// Background plus eight shape x colour classes.
pub const VOCABULARY_SIZE: usize = 9;

pub const COLORS: [(&str, [f32; 3]); 4] = [
    ("red", [0.85, 0.15, 0.15]),
    ("green", [0.15, 0.75, 0.2]),
    ("blue", [0.15, 0.25, 0.85]),
    ("yellow", [0.9, 0.85, 0.15]),
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Primitive {
    /// Axis-aligned square with integer corner and side.
    Square { x0: usize, y0: usize, side: usize },
    /// Disk with real centre; a pixel is inside when its centre is.
    Disk { cx: f64, cy: f64, r: f64 },
}

impl Primitive {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        match *self {
            Primitive::Square { x0, y0, side } => {
                (x0..x0 + side).contains(&col) && (y0..y0 + side).contains(&row)
            }
            Primitive::Disk { cx, cy, r } => {
                let dx = col as f64 + 0.5 - cx;
                let dy = row as f64 + 0.5 - cy;
                dx * dx + dy * dy <= r * r
            }
        }
    }

    /// Pixel bounding box `(r0, c0, r1, c1)`, exclusive end.
    fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Primitive::Square { x0, y0, side } => {
                (y0 as f64, x0 as f64, (y0 + side) as f64, (x0 + side) as f64)
            }
            Primitive::Disk { cx, cy, r } => (cy - r, cx - r, cy + r, cx + r),
        }
    }

    fn shape_index(&self) -> usize {
        match self {
            Primitive::Square { .. } => 0,
            Primitive::Disk { .. } => 1,
        }
    }
}

/// Class id of a (shape, colour) pair.
pub fn class_id(shape: usize, color: usize) -> usize {
    1 + shape * COLORS.len() + color
}

/// Human-readable class names, indexed by class id.
pub fn class_names() -> Vec<String> {
    let mut names = vec!["background".to_string()];
    for shape in ["square", "disk"] {
        for (color, _) in COLORS {
            names.push(format!("{color} {shape}"));
        }
    }
    names
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShapeSpec {
    pub class_id: usize,
    pub primitive: Primitive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// Channel-major `3 x S x S`, values in [0, 1].
    pub image: Vec<f32>,
    /// `S x S` class ids.
    pub gt: Vec<u8>,
    /// Sorted class ids present in `gt` (background included).
    pub class_ids: Vec<usize>,
    pub shapes: Vec<ShapeSpec>,
    pub size: usize,
}

fn random_primitive(rng: &mut ChaCha8Rng, size: usize) -> Primitive {
    // large enough that a disk and a square of the same extent differ visibly
    let lo = (size / 4).max(3);
    let hi = (size * 7 / 16).max(lo + 1);
    if rng.gen_bool(0.5) {
        let side = rng.gen_range(lo..=hi);
        Primitive::Square {
            x0: rng.gen_range(0..=size - side),
            y0: rng.gen_range(0..=size - side),
            side,
        }
    } else {
        let r = rng.gen_range(lo as f64 / 2.0 + 0.5..=hi as f64 / 2.0 + 0.5);
        Primitive::Disk {
            cx: rng.gen_range(r..=size as f64 - r),
            cy: rng.gen_range(r..=size as f64 - r),
            r,
        }
    }
}

fn separated(a: &Primitive, b: &Primitive) -> bool {
    let (ar0, ac0, ar1, ac1) = a.bounds();
    let (br0, bc0, br1, bc1) = b.bounds();
    ar1 + 1.0 <= br0 || br1 + 1.0 <= ar0 || ac1 + 1.0 <= bc0 || bc1 + 1.0 <= ac0
}

/// One scene, a pure function of `(seed, index)`.
pub fn sample(seed: u64, index: usize, size: usize) -> SyntheticSample {
    let mut rng = substream(seed, &format!("synth/{index}"));
    let count = rng.gen_range(1..=4);
    let mut shapes: Vec<ShapeSpec> = Vec::new();
    let mut attempts = 0;
    while shapes.len() < count && attempts < 200 {
        attempts += 1;
        let p = random_primitive(&mut rng, size);
        if shapes.iter().all(|s| separated(&s.primitive, &p)) {
            let color = rng.gen_range(0..COLORS.len());
            shapes.push(ShapeSpec {
                class_id: class_id(p.shape_index(), color),
                primitive: p,
            });
        }
    }

    // background: dim base colour, a random stripe pattern and pixel noise
    let base: [f32; 3] = [
        rng.gen_range(0.25..0.5),
        rng.gen_range(0.25..0.5),
        rng.gen_range(0.25..0.5),
    ];
    let freq = rng.gen_range(0.2f32..0.9);
    let phase = rng.gen_range(0.0f32..6.3);
    let angle = rng.gen_range(0.0f32..std::f32::consts::PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let plane = size * size;
    let mut image = vec![0f32; 3 * plane];
    let mut gt = vec![0u8; plane];
    for row in 0..size {
        for col in 0..size {
            let p = row * size + col;
            let stripe = 0.08 * (freq * (ca * col as f32 + sa * row as f32) + phase).sin();
            let owner = shapes.iter().find(|s| s.primitive.contains(row, col));
            let rgb = match owner {
                Some(s) => {
                    gt[p] = s.class_id as u8;
                    COLORS[(s.class_id - 1) % COLORS.len()].1
                }
                None => [base[0] + stripe, base[1] + stripe, base[2] + stripe],
            };
            for ch in 0..3 {
                let noise: f32 = rng.gen_range(-0.06..0.06);
                image[ch * plane + p] = (rgb[ch] + noise).clamp(0.0, 1.0);
            }
        }
    }
    let mut class_ids: Vec<usize> = gt.iter().map(|&g| g as usize).collect();
    class_ids.sort_unstable();
    class_ids.dedup();
    SyntheticSample {
        image,
        gt,
        class_ids,
        shapes,
        size,
    }
}

/// `count` scenes at the configured image size.
pub fn gen_synthetic(seed: u64, count: usize, cfg: &ModelConfig) -> Result<Vec<SyntheticSample>> {
    if count == 0 {
        return Err(EscError::Invalid("synthetic dataset needs at least one sample".into()));
    }
    Ok((0..count).map(|i| sample(seed, i, cfg.image_size)).collect())
}
