//! Synthetic nuclei: blurred dark ellipses on a textured pale background.

use rand::Rng;

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Acceptable foreground fraction; draws outside it are regenerated.
const FOREGROUND: (f64, f64) = (0.08, 0.45);

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Normalized radius; the support is `r <= 1`.
    fn radius(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn one(id: String, hw: usize, rng: &mut impl Rng) -> Sample {
    let s = hw as f64;
    loop {
        let count = rng.gen_range(3..=8);
        let ellipses: Vec<Ellipse> = (0..count)
            .map(|_| {
                let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                Ellipse {
                    cy: rng.gen_range(0.0..s),
                    cx: rng.gen_range(0.0..s),
                    a: rng.gen_range(0.06..0.14) * s,
                    b: rng.gen_range(0.05..0.11) * s,
                    cos: theta.cos(),
                    sin: theta.sin(),
                }
            })
            .collect();
        // Background texture: a few low-frequency waves per channel.
        let waves: Vec<[f64; 4]> = (0..9)
            .map(|_| {
                [rng.gen_range(0.02..0.06), rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0), rng.gen_range(0.0..6.3)]
            })
            .collect();
        let base = [0.86, 0.68, 0.80];
        let nucleus = [0.32, 0.18, 0.48];
        let mut image = Vec::with_capacity(hw * hw * 3);
        let mut mask = Vec::with_capacity(hw * hw);
        for y in 0..hw {
            for x in 0..hw {
                let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
                let r = ellipses.iter().map(|e| e.radius(fy, fx)).fold(f64::INFINITY, f64::min);
                mask.push(if r <= 1.0 { 1.0f32 } else { 0.0 });
                let ink = 1.0 - smoothstep(0.85, 1.15, r);
                for ch in 0..3 {
                    let tex: f64 = waves[3 * ch..3 * ch + 3]
                        .iter()
                        .map(|[amp, ky, kx, ph]| amp * (ky * fy / s * 6.3 + kx * fx / s * 6.3 + ph).sin())
                        .sum();
                    let v = base[ch] + tex + (nucleus[ch] - base[ch]) * ink + rng.gen_range(-0.03..0.03);
                    image.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        let fg = mask.iter().filter(|&&m| m > 0.5).count() as f64 / (hw * hw) as f64;
        if (FOREGROUND.0..=FOREGROUND.1).contains(&fg) {
            return Sample {
                id,
                image: Tensor::new(vec![hw, hw, 3], image).expect("size"),
                mask: Tensor::new(vec![hw, hw, 1], mask).expect("size"),
            };
        }
    }
}

/// `n` square samples of extent `hw`, drawn from `rng`.
pub fn synth_dataset(n: usize, hw: usize, rng: &mut impl Rng) -> Result<Vec<Sample>> {
    if hw == 0 || !hw.is_multiple_of(32) {
        return Err(Error::arg(format!("synthetic extent {hw} is not a positive multiple of 32")));
    }
    Ok((0..n).map(|i| one(format!("synth_{i:04}"), hw, rng)).collect())
}
