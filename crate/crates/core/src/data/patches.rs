//! Overlapping patch tiling with reflect padding and averaged reassembly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub original_hw: (usize, usize),
    pub padded_hw: (usize, usize),
    pub patch: usize,
    pub stride: usize,
    /// Top-left corners in the padded image, row-major.
    pub offsets: Vec<(usize, usize)>,
}

/// Smallest extent `>= n` that the lattice of `patch` windows at `stride`
/// covers exactly.
fn padded_extent(n: usize, patch: usize, stride: usize) -> usize {
    if n <= patch {
        patch
    } else {
        patch + (n - patch).div_ceil(stride) * stride
    }
}

/// Mirror index without repeating the edge sample (`dcb|abcd|cba`).
pub fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

pub fn plan_patches(hw: (usize, usize), patch: usize, stride: usize) -> Result<PatchGrid> {
    if stride == 0 || stride > patch {
        return Err(Error::arg(format!("need patch >= stride >= 1, got patch {patch}, stride {stride}")));
    }
    if hw.0 == 0 || hw.1 == 0 {
        return Err(Error::arg("image has zero extent"));
    }
    let ph = padded_extent(hw.0, patch, stride);
    let pw = padded_extent(hw.1, patch, stride);
    let rows: Vec<usize> = (0..=(ph - patch) / stride).map(|i| i * stride).collect();
    let cols: Vec<usize> = (0..=(pw - patch) / stride).map(|i| i * stride).collect();
    let offsets = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
    Ok(PatchGrid { original_hw: hw, padded_hw: (ph, pw), patch, stride, offsets })
}

impl PatchGrid {
    fn check(&self, t: &Tensor<impl Element>) -> Result<usize> {
        let &[h, w, c] = t.shape() else {
            return Err(Error::shape(format!("expected (H, W, C), got {:?}", t.shape())));
        };
        if (h, w) != self.original_hw {
            return Err(Error::shape(format!("grid planned for {:?}, image is {h}x{w}", self.original_hw)));
        }
        Ok(c)
    }

    /// Crops every patch from the bottom/right reflect-padded image.
    pub fn extract<T: Element>(&self, t: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let c = self.check(t)?;
        let (h, w) = self.original_hw;
        let p = self.patch;
        let src = t.data();
        Ok(self
            .offsets
            .iter()
            .map(|&(r0, c0)| {
                let mut out = Vec::with_capacity(p * p * c);
                for y in 0..p {
                    let sy = reflect_index(r0 + y, h);
                    for x in 0..p {
                        let sx = reflect_index(c0 + x, w);
                        out.extend_from_slice(&src[(sy * w + sx) * c..][..c]);
                    }
                }
                Tensor::new(vec![p, p, c], out).expect("patch size")
            })
            .collect())
    }

    /// Number of patches covering each padded pixel.
    pub fn coverage(&self) -> Vec<u32> {
        let (ph, pw) = self.padded_hw;
        let mut count = vec![0u32; ph * pw];
        for &(r0, c0) in &self.offsets {
            for y in r0..r0 + self.patch {
                for v in &mut count[y * pw + c0..y * pw + c0 + self.patch] {
                    *v += 1;
                }
            }
        }
        count
    }

    /// Per-pixel mean of all covering patches, cropped to the original size.
    pub fn reassemble<T: Element>(&self, preds: &[Tensor<T>]) -> Result<Tensor<T>> {
        if preds.len() != self.offsets.len() {
            return Err(Error::shape(format!("{} predictions for {} patches", preds.len(), self.offsets.len())));
        }
        let p = self.patch;
        let c = match preds.first().map(|t| t.shape()) {
            Some(&[a, b, c]) if a == p && b == p => c,
            s => return Err(Error::shape(format!("patch predictions must be ({p}, {p}, C), got {s:?}"))),
        };
        let (ph, pw) = self.padded_hw;
        let mut acc = vec![0.0f64; ph * pw * c];
        for (t, &(r0, c0)) in preds.iter().zip(&self.offsets) {
            if t.shape() != [p, p, c] {
                return Err(Error::shape(format!("patch prediction shape {:?} differs", t.shape())));
            }
            for y in 0..p {
                let row = ((r0 + y) * pw + c0) * c;
                for (a, v) in acc[row..row + p * c].iter_mut().zip(&t.data()[y * p * c..(y + 1) * p * c]) {
                    *a += v.to_f64().unwrap();
                }
            }
        }
        let count = self.coverage();
        let (h, w) = self.original_hw;
        let mut out = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                let k = count[y * pw + x] as f64;
                out.extend(acc[(y * pw + x) * c..][..c].iter().map(|&a| T::lit(a / k)));
            }
        }
        Tensor::new(vec![h, w, c], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_mirrors_without_edge_repeat() {
        let got: Vec<usize> = (0..9).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![0, 1, 2, 3, 2, 1, 0, 1, 2]);
        assert_eq!(reflect_index(5, 1), 0);
    }

    #[test]
    fn stride_validation() {
        assert!(plan_patches((64, 64), 32, 64).is_err());
        assert!(plan_patches((64, 64), 32, 0).is_err());
    }
}
