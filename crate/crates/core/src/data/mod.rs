//! Samples, dataset directories, patch tiling, augmentation and synthesis.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub mod augment;
pub mod netpbm;
pub mod patches;
pub mod synth;

pub use augment::{augment, Dihedral};
pub use netpbm::Raster;
pub use patches::{plan_patches, PatchGrid};
pub use synth::synth_dataset;

/// Image `(H, W, C)` in `[0, 1]` and binary mask `(H, W, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl Sample {
    pub fn hw(&self) -> (usize, usize) {
        (self.image.shape()[0], self.image.shape()[1])
    }

    pub fn validate(&self) -> Result<()> {
        let (&[h, w, _], &[mh, mw, 1]) = (self.image.shape(), self.mask.shape()) else {
            return Err(Error::shape(format!(
                "sample {}: image {:?} / mask {:?} are not (H, W, C) / (H, W, 1)",
                self.id,
                self.image.shape(),
                self.mask.shape()
            )));
        };
        if (h, w) != (mh, mw) {
            return Err(Error::shape(format!("sample {}: image {h}x{w} but mask {mh}x{mw}", self.id)));
        }
        if self.mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::arg(format!("sample {}: mask is not binary", self.id)));
        }
        Ok(())
    }

    /// Overlapping patches of image and mask, one sample per grid offset.
    pub fn patches(&self, grid: &PatchGrid) -> Result<Vec<Sample>> {
        let images = grid.extract(&self.image)?;
        let masks = grid.extract(&self.mask)?;
        Ok(images
            .into_iter()
            .zip(masks)
            .zip(&grid.offsets)
            .map(|((image, mask), (r, c))| Sample { id: format!("{}_r{r}_c{c}", self.id), image, mask })
            .collect())
    }
}

/// Stacks `(H, W, C)` tensors into one `(N, H, W, C)` batch.
pub fn stack(items: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = items.first().ok_or_else(|| Error::arg("cannot stack an empty batch"))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(items.len() * first.len());
    for t in items {
        if t.shape() != shape.as_slice() {
            return Err(Error::shape(format!("batch mixes shapes {shape:?} and {:?}", t.shape())));
        }
        data.extend_from_slice(t.data());
    }
    let mut full = vec![items.len()];
    full.extend(shape);
    Tensor::new(full, data)
}

/// Splits off the trailing `fraction` of samples for validation, keeping at
/// least one sample on each side when there are two or more. A fraction of
/// zero disables validation.
pub fn split(samples: Vec<Sample>, fraction: f64) -> (Vec<Sample>, Vec<Sample>) {
    let n = samples.len();
    let mut k = (n as f64 * fraction).round() as usize;
    if n < 2 || fraction <= 0.0 {
        k = 0;
    } else {
        k = k.clamp(1, n - 1);
    }
    let mut train = samples;
    let val = train.split_off(n - k);
    (train, val)
}

/// Reads `images/<id>.ppm` (or `.pgm`) with `masks/<id>.pgm`, sorted by id.
pub fn load_dir(root: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let root = root.as_ref();
    let mut entries: Vec<_> = fs::read_dir(root.join("images"))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm")))
        .collect();
    entries.sort();
    let mut out = Vec::with_capacity(entries.len());
    for path in entries {
        let id = path.file_stem().and_then(|s| s.to_str()).ok_or_else(|| Error::arg("bad file name"))?.to_owned();
        let image = netpbm::read(&path)?.to_tensor();
        let mask = netpbm::read(root.join("masks").join(format!("{id}.pgm")))?.to_mask()?;
        let s = Sample { id, image, mask };
        s.validate()?;
        out.push(s);
    }
    if out.is_empty() {
        return Err(Error::arg(format!("no images under {}", root.join("images").display())));
    }
    Ok(out)
}

/// Writes samples in the layout read by [`load_dir`].
pub fn save_dir(root: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let root = root.as_ref();
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("masks"))?;
    for s in samples {
        let ext = if s.image.shape()[2] == 1 { "pgm" } else { "ppm" };
        netpbm::write(root.join("images").join(format!("{}.{ext}", s.id)), &Raster::from_tensor(&s.image)?)?;
        netpbm::write(root.join("masks").join(format!("{}.pgm", s.id)), &Raster::from_tensor(&s.mask)?)?;
    }
    Ok(())
}
