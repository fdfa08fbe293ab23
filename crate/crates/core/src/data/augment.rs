//! Dihedral augmentation applied identically to image and mask.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::tensor::{Element, Tensor};

/// Horizontal flip, then vertical flip, then a quarter turn counter-clockwise;
/// the eight combinations are the eight symmetries of the square.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dihedral {
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: bool,
}

impl Dihedral {
    pub fn all() -> [Dihedral; 8] {
        std::array::from_fn(|i| Dihedral { hflip: i & 1 != 0, vflip: i & 2 != 0, rot90: i & 4 != 0 })
    }

    pub fn index(self) -> usize {
        self.hflip as usize | (self.vflip as usize) << 1 | (self.rot90 as usize) << 2
    }

    /// Each component independently with probability 0.5.
    pub fn sample(rng: &mut impl Rng) -> Self {
        Dihedral { hflip: rng.gen_bool(0.5), vflip: rng.gen_bool(0.5), rot90: rng.gen_bool(0.5) }
    }

    /// Transforms an `(H, W, C)` tensor. A quarter turn swaps H and W.
    pub fn apply<T: Element>(self, t: &Tensor<T>) -> Tensor<T> {
        let &[h, w, c] = t.shape() else { panic!("dihedral transform needs (H, W, C), got {:?}", t.shape()) };
        let (oh, ow) = if self.rot90 { (w, h) } else { (h, w) };
        let src = t.data();
        let mut out = Vec::with_capacity(src.len());
        for y in 0..oh {
            for x in 0..ow {
                // Undo the quarter turn, then the flips.
                let (mut sy, mut sx) = if self.rot90 { (x, w - 1 - y) } else { (y, x) };
                if self.vflip {
                    sy = h - 1 - sy;
                }
                if self.hflip {
                    sx = w - 1 - sx;
                }
                out.extend_from_slice(&src[(sy * w + sx) * c..][..c]);
            }
        }
        Tensor::new(vec![oh, ow, c], out).expect("same element count")
    }
}

/// Draws one transform and applies it to both image and mask.
pub fn augment(sample: &Sample, rng: &mut impl Rng) -> (Sample, Dihedral) {
    let d = Dihedral::sample(rng);
    let out = Sample { id: sample.id.clone(), image: d.apply(&sample.image), mask: d.apply(&sample.mask) };
    (out, d)
}
