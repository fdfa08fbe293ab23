//! Adam training on the summed deep-supervision loss.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::RunConfig;
use crate::checkpoint;
use crate::data::{self, augment, plan_patches, Sample};
use crate::error::{Error, Result};
use crate::model::{deep_supervision_loss, Mcads, HEAD_NAMES};
use crate::nn::{apply_stat_updates, Ctx, Mode};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

pub const LOSS_HEADER: &str = "step,loss_total,loss_b1,loss_d5,loss_d4,loss_d3,loss_d2,loss_d1";

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// One-based optimizer step.
    pub step: usize,
    pub epoch: usize,
    pub total: f64,
    /// Head losses in the order B1, D5, D4, D3, D2, D1.
    pub heads: [f64; 6],
}

impl StepRecord {
    pub fn csv(&self) -> String {
        let heads: Vec<String> = self.heads.iter().map(|v| format!("{v:.9}")).collect();
        format!("{},{:.9},{}", self.step, self.total, heads.join(","))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub steps: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    /// Lowest mean validation loss, when a validation split exists.
    pub best_val_loss: Option<f64>,
    pub train_patches: usize,
    pub val_patches: usize,
}

pub struct Trained<T> {
    pub model: Mcads,
    pub store: ParamStore<T>,
    pub outcome: TrainOutcome,
}

fn patches(samples: &[Sample], patch: usize, stride: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for s in samples {
        let grid = plan_patches(s.hw(), patch, stride)?;
        out.extend(s.patches(&grid)?);
    }
    Ok(out)
}

/// Stacks samples into an image batch and a mask batch.
pub(crate) fn batch<T: Element>(samples: &[&Sample]) -> Result<(Tensor<T>, Tensor<T>)> {
    let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
    let masks: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.mask).collect();
    Ok((data::stack(&images)?.cast(), data::stack(&masks)?.cast()))
}

/// One forward and backward pass; returns the head losses and leaves the
/// gradients on the store.
fn step_losses<T: Element>(model: &Mcads, store: &mut ParamStore<T>, items: &[&Sample]) -> Result<(f64, [f64; 6])> {
    let (x, y) = batch::<T>(items)?;
    let (loss, terms, tape, updates) = {
        let mut ctx = Ctx::new(&*store, Mode::Train);
        let xv = ctx.input(x);
        let out = model.forward(&mut ctx, xv)?;
        let (loss, terms) = deep_supervision_loss(&mut ctx, &out, &y)?;
        let total = ctx.tape.value(loss).item().to_f64().unwrap();
        let terms = terms.map(|t| ctx.tape.value(t).item().to_f64().unwrap());
        let (tape, updates) = ctx.into_parts();
        (loss, (total, terms), tape, updates)
    };
    let grads = tape.backward(loss)?;
    store.accumulate_grads(grads.params());
    apply_stat_updates(store, &updates);
    Ok(terms)
}

/// Mean total loss over `items` with running statistics.
pub fn mean_loss<T: Element>(model: &Mcads, store: &ParamStore<T>, items: &[Sample], batch_size: usize) -> Result<f64> {
    let mut sum = 0.0;
    for chunk in items.chunks(batch_size) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, y) = batch::<T>(&refs)?;
        let mut ctx = Ctx::new(store, Mode::Infer);
        let xv = ctx.input(x);
        let out = model.forward(&mut ctx, xv)?;
        let (loss, _) = deep_supervision_loss(&mut ctx, &out, &y)?;
        sum += ctx.tape.value(loss).item().to_f64().unwrap() * chunk.len() as f64;
    }
    Ok(sum / items.len() as f64)
}

/// Trains from a fresh initialization. With an output directory, writes
/// `config.json`, `loss.csv`, `last.mct` and `best.mct` there.
pub fn train<T: Element>(
    cfg: &RunConfig,
    samples: Vec<Sample>,
    out_dir: Option<&Path>,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<Trained<T>> {
    cfg.validate()?;
    let t = &cfg.train;
    let (model, reg) = Mcads::with_registry(&cfg.model)?;
    let mut store = ParamStore::<T>::materialize(reg, t.seed);
    let adam = Adam::with_lr(t.lr);

    let (train_set, val_set) = data::split(samples, t.val_fraction);
    let train_patches = patches(&train_set, cfg.data.patch, cfg.data.stride)?;
    let val_patches = patches(&val_set, cfg.data.patch, cfg.data.stride)?;
    if train_patches.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let steps_per_epoch = train_patches.len().div_ceil(t.batch);
    let total_steps = t.steps.unwrap_or(t.epochs * steps_per_epoch);

    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.json"), cfg.to_json())?;
            let mut f = fs::File::create(dir.join("loss.csv"))?;
            writeln!(f, "{LOSS_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let save = |store: &ParamStore<T>, name: &str| -> Result<()> {
        match out_dir {
            Some(dir) => checkpoint::save(store, dir.join(name)),
            None => Ok(()),
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    rng.set_stream(2);
    let mut order: Vec<usize> = (0..train_patches.len()).collect();
    let mut outcome = TrainOutcome {
        steps: 0,
        initial_loss: None,
        final_loss: None,
        best_val_loss: None,
        train_patches: train_patches.len(),
        val_patches: val_patches.len(),
    };
    let mut step = 0;
    let mut epoch = 0;
    while step < total_steps {
        order.shuffle(&mut rng);
        for chunk in order.chunks(t.batch) {
            if step == total_steps {
                break;
            }
            let owned: Vec<Sample>;
            let items: Vec<&Sample> = if t.augment {
                owned = chunk.iter().map(|&i| augment(&train_patches[i], &mut rng).0).collect();
                owned.iter().collect()
            } else {
                chunk.iter().map(|&i| &train_patches[i]).collect()
            };
            let (total, heads) = step_losses(&model, &mut store, &items)?;
            adam.step(&mut store)?;
            step += 1;
            let rec = StepRecord { step, epoch, total, heads };
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", rec.csv())?;
            }
            on_step(&rec);
            outcome.initial_loss.get_or_insert(total);
            outcome.final_loss = Some(total);
            if step % t.checkpoint_interval == 0 {
                save(&store, "last.mct")?;
            }
        }
        epoch += 1;
        // Model selection after every pass over the training patches.
        if !val_patches.is_empty() {
            let v = mean_loss(&model, &store, &val_patches, t.batch)?;
            if outcome.best_val_loss.is_none_or(|b| v < b) {
                outcome.best_val_loss = Some(v);
                save(&store, "best.mct")?;
            }
        }
    }
    outcome.steps = step;
    save(&store, "last.mct")?;
    if val_patches.is_empty() || outcome.best_val_loss.is_none() {
        save(&store, "best.mct")?;
    }
    Ok(Trained { model, store, outcome })
}

/// Loss log header names derived from the head order.
pub fn loss_columns() -> Vec<String> {
    let mut cols = vec!["step".to_owned(), "loss_total".to_owned()];
    cols.extend(HEAD_NAMES.iter().map(|h| format!("loss_{h}")));
    cols
}
