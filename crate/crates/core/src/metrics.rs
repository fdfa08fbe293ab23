//! Segmentation metrics: overlap scores from confusion counts and surface
//! distances from a Euclidean distance transform.
//!
//! Conventions:
//! - A ratio with an empty denominator is 1 when both masks are empty and 0
//!   otherwise; the false omission rate is 0 when there are no predicted
//!   negatives.
//! - Boundary pixels are foreground pixels with a background 4-neighbour;
//!   pixels outside the image count as background.
//! - HD95 is the 95th percentile, with linear interpolation between order
//!   statistics, of the directed boundary distances pooled over both
//!   directions. ASD is the mean of the same pool.
//! - Aggregates are unweighted means over images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Binary mask in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

fn spatial(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [h, w] | [h, w, 1] | [1, h, w, 1] => Ok((h, w)),
        _ => Err(Error::shape(format!("expected a single-channel map, got {shape:?}"))),
    }
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape(format!("{} values for a {h}x{w} mask", data.len())));
        }
        Ok(Self { h, w, data })
    }

    /// Accepts only exact zeros and ones.
    pub fn from_binary<T: Element>(t: &Tensor<T>) -> Result<Self> {
        let (h, w) = spatial(t.shape())?;
        let data = t
            .data()
            .iter()
            .map(|&v| {
                if v == T::one() {
                    Ok(true)
                } else if v == T::zero() {
                    Ok(false)
                } else {
                    Err(Error::arg(format!("mask value {v:?} is not binary")))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { h, w, data })
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    fn at(&self, y: isize, x: isize) -> bool {
        y >= 0
            && x >= 0
            && (y as usize) < self.h
            && (x as usize) < self.w
            && self.data[y as usize * self.w + x as usize]
    }

    /// Foreground pixels with at least one background 4-neighbour.
    pub fn boundary(&self) -> Mask {
        let mut data = vec![false; self.h * self.w];
        for y in 0..self.h as isize {
            for x in 0..self.w as isize {
                if self.at(y, x) && !(self.at(y - 1, x) && self.at(y + 1, x) && self.at(y, x - 1) && self.at(y, x + 1))
                {
                    data[y as usize * self.w + x as usize] = true;
                }
            }
        }
        Mask { h: self.h, w: self.w, data }
    }
}

/// `value >= t` is foreground; a tie goes to foreground.
pub fn threshold<T: Element>(prob: &Tensor<T>, t: f64) -> Result<Mask> {
    let (h, w) = spatial(prob.shape())?;
    Ok(Mask { h, w, data: prob.data().iter().map(|v| v.to_f64().unwrap() >= t).collect() })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

fn same_size(a: &Mask, b: &Mask) -> Result<()> {
    if (a.h, a.w) != (b.h, b.w) {
        return Err(Error::shape(format!("masks differ in size: {}x{} vs {}x{}", a.h, a.w, b.h, b.w)));
    }
    Ok(())
}

impl ConfusionCounts {
    pub fn from_masks(pred: &Mask, gt: &Mask) -> Result<Self> {
        same_size(pred, gt)?;
        let mut c = Self::default();
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub iou: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub for_rate: f64,
}

impl PixelMetrics {
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        let both_empty = c.tp + c.fp + c.fn_ == 0;
        let ratio = |num: u64, den: u64| {
            if den > 0 {
                num as f64 / den as f64
            } else if both_empty {
                1.0
            } else {
                0.0
            }
        };
        let neg = c.fn_ + c.tn;
        Self {
            iou: ratio(c.tp, c.tp + c.fp + c.fn_),
            dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
            precision: ratio(c.tp, c.tp + c.fp),
            recall: ratio(c.tp, c.tp + c.fn_),
            for_rate: if neg > 0 { c.fn_ as f64 / neg as f64 } else { 0.0 },
        }
    }
}

pub fn pixel_metrics(pred: &Mask, gt: &Mask) -> Result<PixelMetrics> {
    Ok(PixelMetrics::from_counts(&ConfusionCounts::from_masks(pred, gt)?))
}

/// One-dimensional squared distance transform of sampled function `f`
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let first = match (0..n).find(|&q| f[q].is_finite()) {
        Some(q) => q,
        None => {
            out.fill(f64::INFINITY);
            return;
        }
    };
    v.push(first);
    z.push(f64::NEG_INFINITY);
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = *v.last().unwrap();
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Euclidean distance from every pixel to the nearest set pixel of `sites`.
pub fn distance_transform(sites: &Mask) -> Vec<f64> {
    let (h, w) = (sites.h, sites.w);
    let mut g: Vec<f64> = sites.data.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let mut col = vec![0.0; h];
    let mut res = vec![0.0; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            col[y] = g[y * w + x];
        }
        edt_1d(&col, &mut res[..h], &mut v, &mut z);
        for y in 0..h {
            g[y * w + x] = res[y];
        }
    }
    for y in 0..h {
        let row = g[y * w..(y + 1) * w].to_vec();
        edt_1d(&row, &mut res[..w], &mut v, &mut z);
        g[y * w..(y + 1) * w].copy_from_slice(&res[..w]);
    }
    g.into_iter().map(f64::sqrt).collect()
}

/// Linear-interpolation percentile of unsorted values, `q` in `[0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = (s.len() - 1) as f64 * q / 100.0;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

/// Directed boundary distances from `a` to `b` followed by `b` to `a`.
pub fn pooled_surface_distances(pred: &Mask, gt: &Mask) -> Result<Vec<f64>> {
    same_size(pred, gt)?;
    if pred.count() == 0 {
        return Err(Error::EmptyMask("predicted"));
    }
    if gt.count() == 0 {
        return Err(Error::EmptyMask("ground-truth"));
    }
    let (bp, bg) = (pred.boundary(), gt.boundary());
    let (dp, dg) = (distance_transform(&bp), distance_transform(&bg));
    let mut pool = Vec::new();
    pool.extend(bp.data.iter().zip(&dg).filter(|(&b, _)| b).map(|(_, &d)| d));
    pool.extend(bg.data.iter().zip(&dp).filter(|(&b, _)| b).map(|(_, &d)| d));
    Ok(pool)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceMetrics {
    pub hd95: f64,
    pub asd: f64,
    /// Largest pooled distance: the Hausdorff distance.
    pub hausdorff: f64,
}

pub fn surface_metrics(pred: &Mask, gt: &Mask) -> Result<SurfaceMetrics> {
    let pool = pooled_surface_distances(pred, gt)?;
    Ok(SurfaceMetrics {
        hd95: percentile(&pool, 95.0),
        asd: pool.iter().sum::<f64>() / pool.len() as f64,
        hausdorff: pool.iter().copied().fold(0.0, f64::max),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub iou: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub for_rate: f64,
    /// `None` when either mask is empty.
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

impl ImageMetrics {
    pub fn compute(id: impl Into<String>, pred: &Mask, gt: &Mask) -> Result<Self> {
        let p = pixel_metrics(pred, gt)?;
        let s = match surface_metrics(pred, gt) {
            Ok(s) => Some(s),
            Err(Error::EmptyMask(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            id: id.into(),
            iou: p.iou,
            dice: p.dice,
            precision: p.precision,
            recall: p.recall,
            for_rate: p.for_rate,
            hd95: s.map(|s| s.hd95),
            asd: s.map(|s| s.asd),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub iou: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub for_rate: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetrics>,
    pub aggregate: Aggregate,
    /// Images without surface distances, excluded from their means.
    pub skipped_surface: usize,
}

impl MetricReport {
    pub fn from_images(per_image: Vec<ImageMetrics>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::arg("no images to aggregate"));
        }
        let n = per_image.len() as f64;
        let mean = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
        let opt_mean = |f: fn(&ImageMetrics) -> Option<f64>| {
            let v: Vec<f64> = per_image.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let aggregate = Aggregate {
            iou: mean(|m| m.iou),
            dice: mean(|m| m.dice),
            precision: mean(|m| m.precision),
            recall: mean(|m| m.recall),
            for_rate: mean(|m| m.for_rate),
            hd95: opt_mean(|m| m.hd95),
            asd: opt_mean(|m| m.asd),
        };
        let skipped_surface = per_image.iter().filter(|m| m.hd95.is_none()).count();
        Ok(Self { per_image, aggregate, skipped_surface })
    }
}
