//! Patch-wise inference and directory evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::RunConfig;
use crate::checkpoint;
use crate::data::netpbm;
use crate::data::plan_patches;
use crate::error::{Error, Result};
use crate::metrics::{ImageMetrics, Mask, MetricReport};
use crate::model::Mcads;
use crate::nn::{Ctx, Mode};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

/// A model with loaded weights and the patch plan used for inference.
pub struct Predictor<T> {
    pub model: Mcads,
    pub store: ParamStore<T>,
    pub patch: usize,
    pub stride: usize,
    pub batch: usize,
}

impl<T: Element> Predictor<T> {
    pub fn new(model: Mcads, store: ParamStore<T>, cfg: &RunConfig) -> Self {
        Self { model, store, patch: cfg.data.patch, stride: cfg.data.stride, batch: cfg.train.batch }
    }

    /// Builds the configured model and restores a checkpoint into it.
    pub fn load(cfg: &RunConfig, checkpoint_path: &Path) -> Result<Self> {
        let (model, reg) = Mcads::with_registry(&cfg.model)?;
        let mut store = ParamStore::<T>::materialize(reg, 0);
        checkpoint::restore(&mut store, &checkpoint::load_entries(checkpoint_path)?)?;
        Ok(Self::new(model, store, cfg))
    }

    /// Final-head probabilities for a stack of `(P, P, C)` patches.
    fn run_batch(&self, patches: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
        let refs: Vec<&Tensor<f32>> = patches.iter().collect();
        let x = crate::data::stack(&refs)?.cast::<T>();
        let mut ctx = Ctx::new(&self.store, Mode::Infer);
        let xv = ctx.input(x);
        let out = self.model.forward(&mut ctx, xv)?;
        let p = self.patch;
        let probs = ctx.tape.value(out.final_map()).cast::<f32>();
        Ok(probs.data().chunks(p * p).map(|c| Tensor::new(vec![p, p, 1], c.to_vec()).expect("patch size")).collect())
    }

    /// Probability map `(H, W, 1)` for an `(H, W, C)` image, and the number
    /// of patches evaluated.
    pub fn predict(&self, image: &Tensor<f32>) -> Result<(Tensor<f32>, usize)> {
        let &[h, w, _] = image.shape() else {
            return Err(Error::shape(format!("expected (H, W, C), got {:?}", image.shape())));
        };
        let grid = plan_patches((h, w), self.patch, self.stride)?;
        let patches = grid.extract(image)?;
        let preds: Vec<Vec<Tensor<f32>>> =
            patches.par_chunks(self.batch.max(1)).map(|c| self.run_batch(c)).collect::<Result<_>>()?;
        let preds: Vec<Tensor<f32>> = preds.into_iter().flatten().collect();
        Ok((grid.reassemble(&preds)?, patches.len()))
    }
}

/// Predicts one image file and writes `<out_dir>/<id>.pgm` (0 or 255), plus
/// `<id>_prob.pgm` when requested. Returns the binary mask and patch count.
pub fn predict_image<T: Element>(
    predictor: &Predictor<T>,
    image_path: &Path,
    out_dir: &Path,
    threshold: f64,
    save_probability: bool,
) -> Result<(Mask, usize)> {
    let image = netpbm::read(image_path)?.to_tensor();
    let (prob, count) = predictor.predict(&image)?;
    let mask = crate::metrics::threshold(&prob, threshold)?;
    let id = image_path.file_stem().and_then(|s| s.to_str()).ok_or_else(|| Error::arg("bad image file name"))?;
    fs::create_dir_all(out_dir)?;
    let raster = netpbm::Raster {
        width: mask.w,
        height: mask.h,
        channels: 1,
        data: mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect(),
    };
    netpbm::write(out_dir.join(format!("{id}.pgm")), &raster)?;
    if save_probability {
        netpbm::write(out_dir.join(format!("{id}_prob.pgm")), &netpbm::Raster::from_tensor(&prob)?)?;
    }
    Ok((mask, count))
}

/// Per-image metrics for `(id, prediction, ground truth)` triples.
pub fn evaluate_samples(items: &[(String, Mask, Mask)]) -> Result<MetricReport> {
    let per: Vec<ImageMetrics> =
        items.par_iter().map(|(id, p, g)| ImageMetrics::compute(id.clone(), p, g)).collect::<Result<_>>()?;
    MetricReport::from_images(per)
}

fn masks_by_id(dir: &Path) -> Result<BTreeMap<String, Mask>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("pgm") {
            continue;
        }
        let Some(id) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        if id.ends_with("_prob") {
            continue;
        }
        let t = netpbm::read(&path)?.to_mask()?;
        out.insert(id.to_owned(), Mask::from_binary(&t)?);
    }
    Ok(out)
}

/// Compares `<pred_dir>/<id>.pgm` with the ground truth in `<gt_dir>/masks`
/// (or `<gt_dir>` itself when it has no `masks` subdirectory).
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path) -> Result<MetricReport> {
    let gt_masks = if gt_dir.join("masks").is_dir() { gt_dir.join("masks") } else { gt_dir.to_path_buf() };
    let preds = masks_by_id(pred_dir)?;
    let gts = masks_by_id(&gt_masks)?;
    let only_pred: Vec<&String> = preds.keys().filter(|k| !gts.contains_key(*k)).collect();
    let only_gt: Vec<&String> = gts.keys().filter(|k| !preds.contains_key(*k)).collect();
    if !only_pred.is_empty() || !only_gt.is_empty() {
        return Err(Error::arg(format!(
            "prediction and ground-truth ids differ; only predicted: {only_pred:?}; only ground truth: {only_gt:?}"
        )));
    }
    let items: Vec<(String, Mask, Mask)> = preds.into_iter().map(|(id, p)| (id.clone(), p, gts[&id].clone())).collect();
    evaluate_samples(&items)
}
