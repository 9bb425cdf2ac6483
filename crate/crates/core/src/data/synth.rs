//! Synthetic shape dataset: class-colored disks, rectangles, and triangles
//! on a noisy gray background, with semantic and instance label maps.
//!
//! Generation is deterministic: image `i` under seed `s` is drawn from an
//! rng seeded by `s` and `i` alone, so counts can change without perturbing
//! existing images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::netpbm::{LabelMap, RgbImage};

/// Semantic class ids. Background is a real class (and a real segment); the
/// shape classes follow.
pub const CLASS_NAMES: [&str; 4] = ["background", "disk", "rectangle", "triangle"];
pub const NUM_CLASSES: usize = CLASS_NAMES.len();

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Half-extent range in pixels (disk radius, rectangle/triangle size).
    pub size_min: usize,
    pub size_max: usize,
    pub allow_overlap: bool,
    pub seed: u64,
    pub count: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            image_size: 64,
            shapes_min: 1,
            shapes_max: 3,
            size_min: 9,
            size_max: 15,
            allow_overlap: false,
            seed: 0,
            count: 100,
        }
    }
}

/// One rendered sample: image plus semantic / instance maps. Instance 0 is
/// the background segment; shapes take 1..=n in painter's order.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedSample {
    pub image: RgbImage,
    pub semantic: LabelMap,
    pub instance: LabelMap,
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    class: usize, // 1..=3
    cx: f64,
    cy: f64,
    size: f64,
    angle: f64,
}

impl Shape {
    fn covers(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.class {
            1 => dx * dx + dy * dy <= self.size * self.size,
            2 => {
                // axis-aligned rectangle with aspect fixed by angle bits
                let (hx, hy) = (self.size, self.size * 0.7);
                dx.abs() <= hx && dy.abs() <= hy
            }
            3 => {
                // triangle: three vertices on the circumcircle, half-plane tests
                let v: Vec<(f64, f64)> = (0..3)
                    .map(|k| {
                        let a = self.angle + k as f64 * std::f64::consts::TAU / 3.0;
                        (self.cx + self.size * a.cos(), self.cy + self.size * a.sin())
                    })
                    .collect();
                let sign = |p: (f64, f64), a: (f64, f64), b: (f64, f64)| {
                    (p.0 - b.0) * (a.1 - b.1) - (a.0 - b.0) * (p.1 - b.1)
                };
                let d1 = sign((x, y), v[0], v[1]);
                let d2 = sign((x, y), v[1], v[2]);
                let d3 = sign((x, y), v[2], v[0]);
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(has_neg && has_pos)
            }
            _ => false,
        }
    }

    /// Conservative radius for the no-overlap rejection test.
    fn bound(&self) -> f64 {
        match self.class {
            2 => self.size * std::f64::consts::SQRT_2,
            _ => self.size,
        }
    }
}

// base colors per class (background, disk, rectangle, triangle)
const BASE_COLORS: [[f64; 3]; 4] = [
    [125.0, 125.0, 125.0],
    [200.0, 70.0, 70.0],
    [70.0, 190.0, 80.0],
    [75.0, 85.0, 205.0],
];

/// Render sample `index` of the spec.
pub fn render_sample(spec: &SyntheticSpec, index: usize) -> RenderedSample {
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed ^ (index as u64).wrapping_mul(0x9e3779b97f4a7c15));
    let s = spec.image_size;
    let n_shapes = rng.random_range(spec.shapes_min..=spec.shapes_max);

    let mut shapes: Vec<Shape> = Vec::new();
    for _ in 0..n_shapes {
        // rejection-sample placements when overlap is disallowed
        let mut placed = None;
        for _attempt in 0..64 {
            let size = rng.random_range(spec.size_min as f64..=spec.size_max as f64);
            let margin = size * 1.5 + 1.0;
            if 2.0 * margin >= s as f64 {
                break;
            }
            let cx = rng.random_range(margin..s as f64 - margin);
            let cy = rng.random_range(margin..s as f64 - margin);
            let class = rng.random_range(1..NUM_CLASSES);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let cand = Shape { class, cx, cy, size, angle };
            let clear = spec.allow_overlap
                || shapes.iter().all(|o| {
                    let d2 = (o.cx - cand.cx).powi(2) + (o.cy - cand.cy).powi(2);
                    d2.sqrt() > o.bound() + cand.bound() + 1.0
                });
            if clear {
                placed = Some(cand);
                break;
            }
        }
        if let Some(shape) = placed {
            shapes.push(shape);
        }
    }

    // per-shape color jitter, shared across the shape
    let colors: Vec<[f64; 3]> = std::iter::once(0usize)
        .chain(shapes.iter().map(|s| s.class))
        .map(|class| {
            let base = BASE_COLORS[class];
            [
                base[0] + rng.random_range(-20.0..20.0),
                base[1] + rng.random_range(-20.0..20.0),
                base[2] + rng.random_range(-20.0..20.0),
            ]
        })
        .collect();

    let mut semantic = vec![0u16; s * s];
    let mut instance = vec![0u16; s * s];
    let mut pixels = vec![0u8; s * s * 3];
    for y in 0..s {
        for x in 0..s {
            let idx = y * s + x;
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            // painter's order: the last drawn shape wins
            let mut owner = 0usize; // 0 = background
            for (i, shape) in shapes.iter().enumerate() {
                if shape.covers(fx, fy) {
                    owner = i + 1;
                }
            }
            semantic[idx] = if owner == 0 { 0 } else { shapes[owner - 1].class as u16 };
            instance[idx] = owner as u16;
            let color = colors[owner];
            for c in 0..3 {
                let noise = rng.random_range(-9.0..9.0);
                pixels[idx * 3 + c] = (color[c] + noise).clamp(0.0, 255.0) as u8;
            }
        }
    }
    RenderedSample {
        image: RgbImage { width: s, height: s, pixels },
        semantic: LabelMap { width: s, height: s, labels: semantic },
        instance: LabelMap { width: s, height: s, labels: instance },
    }
}
