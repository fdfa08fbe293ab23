//! Spatial resampling: bilinear resize and depth/space rearrangements.
//!
//! Bilinear resizing uses half-pixel centers: output coordinate `o` maps to
//! source coordinate `(o + 0.5) * in / out - 0.5`, clamped at zero, and the
//! upper neighbour is clamped to the last row/column.

use crate::tensor::Element;

/// Interpolation taps along one axis: `(lower, upper, upper_weight)`.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn resize_bilinear<T: Element>(
    x: &[T],
    (n, h, w, c): (usize, usize, usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![T::zero(); n * oh * ow * c];
    for b in 0..n {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::lit(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::lit(lx);
                let w00 = (T::one() - ly) * (T::one() - lx);
                let w01 = (T::one() - ly) * lx;
                let w10 = ly * (T::one() - lx);
                let w11 = ly * lx;
                let p = |yy: usize, xx: usize| ((b * h + yy) * w + xx) * c;
                let (p00, p01, p10, p11) = (p(y0, x0), p(y0, x1), p(y1, x0), p(y1, x1));
                let o = ((b * oh + oy) * ow + ox) * c;
                for ch in 0..c {
                    out[o + ch] = w00 * x[p00 + ch] + w01 * x[p01 + ch] + w10 * x[p10 + ch] + w11 * x[p11 + ch];
                }
            }
        }
    }
    out
}

pub fn resize_bilinear_backward<T: Element>(
    dy: &[T],
    (n, h, w, c): (usize, usize, usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![T::zero(); n * h * w * c];
    for b in 0..n {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::lit(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::lit(lx);
                let weights = [
                    ((y0, x0), (T::one() - ly) * (T::one() - lx)),
                    ((y0, x1), (T::one() - ly) * lx),
                    ((y1, x0), ly * (T::one() - lx)),
                    ((y1, x1), ly * lx),
                ];
                let o = ((b * oh + oy) * ow + ox) * c;
                for ((yy, xx), wt) in weights {
                    let p = ((b * h + yy) * w + xx) * c;
                    for ch in 0..c {
                        dx[p + ch] = dx[p + ch] + wt * dy[o + ch];
                    }
                }
            }
        }
    }
    dx
}

/// Flat source index in the `(n, h, w, c)` input for every element of the
/// depth-to-space output. Output pixel `(y*b + dy, x*b + dx, ch)` reads input
/// channel `ch*b*b + dy*b + dx`.
pub fn depth_to_space_index((n, h, w, c): (usize, usize, usize, usize), block: usize) -> Vec<usize> {
    let (oh, ow, oc) = (h * block, w * block, c / (block * block));
    let mut idx = Vec::with_capacity(n * oh * ow * oc);
    for b in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                let (sy, dy, sx, dx) = (y / block, y % block, x / block, x % block);
                for ch in 0..oc {
                    let src_c = ch * block * block + dy * block + dx;
                    idx.push(((b * h + sy) * w + sx) * c + src_c);
                }
            }
        }
    }
    idx
}

/// Inverse of [`depth_to_space_index`]: source index in the `(n, h, w, c)`
/// input for every element of the space-to-depth output.
pub fn space_to_depth_index((n, h, w, c): (usize, usize, usize, usize), block: usize) -> Vec<usize> {
    let (oh, ow, oc) = (h / block, w / block, c * block * block);
    let mut idx = Vec::with_capacity(n * oh * ow * oc);
    for b in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                for och in 0..oc {
                    let (ch, r) = (och / (block * block), och % (block * block));
                    let (dy, dx) = (r / block, r % block);
                    idx.push(((b * h + y * block + dy) * w + x * block + dx) * c + ch);
                }
            }
        }
    }
    idx
}

pub fn gather<T: Element>(x: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| x[i]).collect()
}

pub fn scatter<T: Element>(dy: &[T], idx: &[usize], len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); len];
    for (&i, &g) in idx.iter().zip(dy) {
        dx[i] = dx[i] + g;
    }
    dx
}
