//! Central finite-difference gradient checking.
//!
//! A function under test maps input tensors (and the parameters of a store)
//! to an output tensor. The checker contracts the output with a fixed random
//! tensor `R` to get the scalar `L = sum(out * R)`, differentiates `L` with
//! the tape, and compares against `(L(θ + ε) - L(θ - ε)) / 2ε` on sampled
//! coordinates of every input and trainable parameter.
//!
//! The reported error is norm-wise over all sampled coordinates:
//! `|a - n| / max(|a|, |n|)`, zero when both vectors vanish.
//!
//! A coordinate is skipped when either perturbed evaluation takes a
//! different branch at some kink (ReLU sign, pooling winner, loss clamp)
//! than the unperturbed one, since the difference quotient then measures
//! the jump rather than the derivative.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::Result;
use crate::nn::{Ctx, Mode};
use crate::params::{ParamStore, Registry, Role};
use crate::tensor::Tensor;

/// Tolerance for single primitives.
pub const PRIMITIVE_TOL: f64 = 1e-5;
/// Tolerance for composed blocks and models.
pub const BLOCK_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Coordinates sampled per tensor; smaller tensors are checked fully.
    pub coords_per_tensor: usize,
    /// Checks only this many randomly chosen parameter tensors.
    pub param_tensors: Option<usize>,
    pub seed: u64,
    pub mode: Mode,
    /// Corrupts a backward rule to confirm the checker notices.
    pub fault: bool,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { eps: 1e-4, coords_per_tensor: 8, param_tensors: None, seed: 0, mode: Mode::Train, fault: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub rel_err: f64,
    pub tol: f64,
    /// Number of coordinates compared.
    pub coords: usize,
    /// Coordinates skipped because a perturbation crossed a kink.
    pub skipped: usize,
    /// Tensor contributing most to the error, with its share of it.
    pub worst: Option<(String, f64)>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.coords > 0 && self.rel_err.is_finite() && self.rel_err < self.tol
    }
}

/// Norm-wise relative error between analytic and numeric gradients.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// A store with no parameters, for checking bare primitives.
pub fn empty_store() -> ParamStore<f64> {
    ParamStore::materialize(Registry::new(), 0)
}

/// Uniform random tensor on `[lo, hi)`.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = crate::tensor::numel(shape);
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches")
}

impl GradCheck {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    /// `sum(f(...) * r)` and the branch fingerprint of the evaluation.
    fn loss<F>(&self, store: &ParamStore<f64>, inputs: &[Tensor<f64>], r: &Tensor<f64>, f: &F) -> Result<(f64, u64)>
    where
        F: Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
    {
        let mut ctx = Ctx::new(store, self.mode);
        let vars: Vec<Var> = inputs.iter().map(|t| ctx.input(t.clone())).collect();
        let out = f(&mut ctx, &vars)?;
        let l = ctx.tape.value(out).data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        Ok((l, ctx.tape.branch_fingerprint()))
    }

    /// Checks `f` with respect to `inputs` and every trainable parameter of
    /// `store`. The store is restored before returning.
    pub fn check<F>(
        &self,
        name: &str,
        tol: f64,
        store: &mut ParamStore<f64>,
        inputs: &[Tensor<f64>],
        f: F,
    ) -> Result<CheckOutcome>
    where
        F: Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);

        // Analytic pass.
        let (input_grads, param_grads, r, base) = {
            let mut ctx = Ctx::new(&*store, self.mode);
            ctx.tape.set_fault_injection(self.fault);
            let vars: Vec<Var> = inputs.iter().map(|t| ctx.input(t.clone())).collect();
            let out = f(&mut ctx, &vars)?;
            let base = ctx.tape.branch_fingerprint();
            let r = uniform(ctx.shape(out), -1.0, 1.0, &mut rng);
            let rv = ctx.input(r.clone());
            let prod = ctx.tape.mul(out, rv)?;
            let loss = ctx.tape.sum(prod)?;
            let (tape, _) = ctx.into_parts();
            let grads = tape.backward(loss)?;
            let input_grads: Vec<Tensor<f64>> = vars
                .iter()
                .zip(inputs)
                .map(|(&v, t)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
                .collect();
            let param_grads: Vec<(crate::params::ParamId, Tensor<f64>)> =
                grads.params().map(|(id, g)| (id, g.clone())).collect();
            (input_grads, param_grads, r, base)
        };

        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        // Per-tensor norm of the discrepancy, later scaled like the total.
        let mut worst: Option<(String, f64)> = None;
        let mut note = |label: String, a: &[f64], n: &[f64]| {
            let d = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            if worst.as_ref().is_none_or(|(_, w)| d > *w) {
                worst = Some((label, d));
            }
        };
        let h = self.eps;
        let mut skipped = 0;

        let mut inputs = inputs.to_vec();
        for i in 0..inputs.len() {
            let n = inputs[i].len();
            let start = analytic.len();
            for j in pick(n, self.coords_per_tensor, &mut rng) {
                let orig = inputs[i].data()[j];
                inputs[i].data_mut()[j] = orig + h;
                let up = self.loss(store, &inputs, &r, &f)?;
                inputs[i].data_mut()[j] = orig - h;
                let down = self.loss(store, &inputs, &r, &f)?;
                inputs[i].data_mut()[j] = orig;
                let ((up, fu), (down, fd)) = (up, down);
                if fu != base || fd != base {
                    skipped += 1;
                    continue;
                }
                analytic.push(input_grads[i].data()[j]);
                numeric.push((up - down) / (2.0 * h));
            }
            note(format!("input{i}"), &analytic[start..], &numeric[start..]);
        }

        let mut ids: Vec<_> = store.iter().filter(|(_, p)| p.role == Role::Trainable).map(|(id, _)| id).collect();
        if let Some(k) = self.param_tensors {
            let keep = pick(ids.len(), k, &mut rng);
            ids = keep.into_iter().map(|i| ids[i]).collect();
        }
        for id in ids {
            let n = store.value(id).len();
            let grad = param_grads.iter().find(|(g, _)| *g == id).map(|(_, t)| t);
            let start = analytic.len();
            for j in pick(n, self.coords_per_tensor, &mut rng) {
                let orig = store.value(id).data()[j];
                store.get_mut(id).value.data_mut()[j] = orig + h;
                let up = self.loss(store, &inputs, &r, &f);
                store.get_mut(id).value.data_mut()[j] = orig - h;
                let down = self.loss(store, &inputs, &r, &f);
                store.get_mut(id).value.data_mut()[j] = orig;
                let ((up, fu), (down, fd)) = (up?, down?);
                if fu != base || fd != base {
                    skipped += 1;
                    continue;
                }
                analytic.push(grad.map_or(0.0, |g| g.data()[j]));
                numeric.push((up - down) / (2.0 * h));
            }
            note(store.get(id).name.clone(), &analytic[start..], &numeric[start..]);
        }

        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = norm(&analytic).max(norm(&numeric));
        let worst = worst.map(|(l, d)| (l, if scale > 0.0 { d / scale } else { 0.0 }));
        Ok(CheckOutcome {
            name: name.to_owned(),
            rel_err: relative_error(&analytic, &numeric),
            tol,
            coords: analytic.len(),
            skipped,
            worst,
        })
    }
}

fn pick(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= k {
        (0..n).collect()
    } else {
        sample(rng, n, k).into_vec()
    }
}
