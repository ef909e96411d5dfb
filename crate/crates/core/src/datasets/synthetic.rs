//! Toy triplets: flat-coloured scenes with a darkened geometric region.
//!
//! Used by the smoke/overfit runs and the CLI demo; they carry ground truth so
//! both training modes and evaluation can run on them.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Layout, ShadowTriplet, SplitName};
use crate::error::Result;
use crate::imaging::{ImageTensor, ShadowMask};
use crate::io;

#[derive(Clone, Debug)]
pub struct ToySpec {
    pub count: usize,
    pub size: usize,
    /// Multiplicative attenuation inside the shadow.
    pub attenuation: f32,
    /// Shadows are confined to columns `[0, shadow_band * size)`.
    pub shadow_band: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            count: 8,
            size: 64,
            attenuation: 1.0 / 1.75,
            shadow_band: 0.4,
            seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Disk { cy: f64, cx: f64, r: f64 },
    Triangle { a: (f64, f64), b: (f64, f64), c: (f64, f64) },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Disk { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Triangle { a, b, c } => {
                let sign = |p: (f64, f64), q: (f64, f64), r: (f64, f64)| {
                    (p.1 - r.1) * (q.0 - r.0) - (q.1 - r.1) * (p.0 - r.0)
                };
                let d1 = sign((y, x), a, b);
                let d2 = sign((y, x), b, c);
                let d3 = sign((y, x), c, a);
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
        }
    }
}

fn random_shape(rng: &mut ChaCha8Rng, size: f64, band: f64) -> Shape {
    let width = band * size;
    match rng.random_range(0..3) {
        0 => {
            let x0 = rng.random_range(0.0..width * 0.3);
            let x1 = rng.random_range(width * 0.7..width);
            let y0 = rng.random_range(0.05 * size..0.4 * size);
            let y1 = rng.random_range(0.6 * size..0.95 * size);
            Shape::Rect { y0, x0, y1, x1 }
        }
        1 => {
            let r = rng.random_range(0.3 * width..0.5 * width);
            Shape::Disk {
                cy: rng.random_range(r..size - r),
                cx: width / 2.0,
                r,
            }
        }
        _ => Shape::Triangle {
            a: (rng.random_range(0.05 * size..0.3 * size), rng.random_range(0.0..width)),
            b: (rng.random_range(0.7 * size..0.95 * size), 0.0),
            c: (rng.random_range(0.6 * size..0.95 * size), width),
        },
    }
}

pub fn toy_triplets(spec: &ToySpec) -> Vec<ShadowTriplet> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.size;
    (0..spec.count)
        .map(|i| {
            let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.45..0.95));
            let accent: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.45..0.95));
            let split_row = rng.random_range(n / 3..2 * n / 3);
            let shape = random_shape(&mut rng, n as f64, spec.shadow_band);
            let gt = ImageTensor::from_fn(n, n, |y, _, c| if y < split_row { base[c] } else { accent[c] });
            let mask = ShadowMask::from_fn(n, n, |y, x| shape.contains(y as f64 + 0.5, x as f64 + 0.5));
            let shadow = ImageTensor::from_fn(n, n, |y, x, c| {
                let v = gt.data()[[y, x, c]];
                if mask.get(y, x) {
                    v * spec.attenuation
                } else {
                    v
                }
            });
            ShadowTriplet::new(format!("toy_{i:03}"), shadow, mask, Some(gt)).expect("dims agree by construction")
        })
        .collect()
}

/// Writes triplets to disk using `layout`'s directory convention under `root/<split>/`.
pub fn write_dataset(root: &Path, layout: Layout, split: SplitName, triplets: &[ShadowTriplet]) -> Result<()> {
    let n = split.as_str();
    let [a, b, c] = match layout {
        Layout::Istd | Layout::IstdPlus => [format!("{n}_A"), format!("{n}_B"), format!("{n}_C")],
        Layout::Srd => ["shadow".to_string(), "mask".to_string(), "shadow_free".to_string()],
    };
    let base = root.join(n);
    for d in [&a, &b, &c] {
        fs::create_dir_all(base.join(d))?;
    }
    for t in triplets {
        let file = format!("{}.png", t.id);
        io::save_image(&t.shadow, &base.join(&a).join(&file))?;
        io::save_mask(&t.mask, &base.join(&b).join(&file))?;
        if let Some(g) = &t.shadow_free {
            io::save_image(g, &base.join(&c).join(&file))?;
        }
    }
    Ok(())
}
