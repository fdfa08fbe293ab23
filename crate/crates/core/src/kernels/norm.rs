//! Per-channel batch normalization over the `N x H x W` extent.

use crate::tensor::Element;

/// Saved state of a training-mode forward pass.
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    pub xhat: Vec<T>,
}

pub fn batch_norm_train<T: Element>(x: &[T], gamma: &[T], beta: &[T], eps: T) -> (Vec<T>, BatchStats<T>) {
    let c = gamma.len();
    let m = T::from_usize(x.len() / c).unwrap();
    let mut mean = vec![T::zero(); c];
    for row in x.chunks_exact(c) {
        for (s, &v) in mean.iter_mut().zip(row) {
            *s = *s + v;
        }
    }
    mean.iter_mut().for_each(|s| *s = *s / m);
    let mut var = vec![T::zero(); c];
    for row in x.chunks_exact(c) {
        for ((s, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - mu;
            *s = *s + d * d;
        }
    }
    var.iter_mut().for_each(|s| *s = *s / m);
    let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for ((xr, hr), yr) in x.chunks_exact(c).zip(xhat.chunks_exact_mut(c)).zip(y.chunks_exact_mut(c)) {
        for ch in 0..c {
            let h = (xr[ch] - mean[ch]) * inv_std[ch];
            hr[ch] = h;
            yr[ch] = gamma[ch] * h + beta[ch];
        }
    }
    (y, BatchStats { mean, var, inv_std, xhat })
}

/// Returns `(dx, dgamma, dbeta)` for the training-mode normalization.
pub fn batch_norm_train_backward<T: Element>(dy: &[T], gamma: &[T], stats: &BatchStats<T>) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = gamma.len();
    let m = T::from_usize(dy.len() / c).unwrap();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (dr, hr) in dy.chunks_exact(c).zip(stats.xhat.chunks_exact(c)) {
        for ch in 0..c {
            dbeta[ch] = dbeta[ch] + dr[ch];
            dgamma[ch] = dgamma[ch] + dr[ch] * hr[ch];
        }
    }
    let scale: Vec<T> = (0..c).map(|ch| gamma[ch] * stats.inv_std[ch] / m).collect();
    let mut dx = vec![T::zero(); dy.len()];
    for ((dr, hr), xr) in dy.chunks_exact(c).zip(stats.xhat.chunks_exact(c)).zip(dx.chunks_exact_mut(c)) {
        for ch in 0..c {
            xr[ch] = scale[ch] * (m * dr[ch] - dbeta[ch] - hr[ch] * dgamma[ch]);
        }
    }
    (dx, dgamma, dbeta)
}

pub fn batch_norm_infer<T: Element>(x: &[T], gamma: &[T], beta: &[T], mean: &[T], inv_std: &[T]) -> Vec<T> {
    let c = gamma.len();
    let mut y = vec![T::zero(); x.len()];
    for (xr, yr) in x.chunks_exact(c).zip(y.chunks_exact_mut(c)) {
        for ch in 0..c {
            yr[ch] = gamma[ch] * (xr[ch] - mean[ch]) * inv_std[ch] + beta[ch];
        }
    }
    y
}

pub fn batch_norm_infer_backward<T: Element>(
    dy: &[T],
    x: &[T],
    gamma: &[T],
    mean: &[T],
    inv_std: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = gamma.len();
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ((dr, xr), gr) in dy.chunks_exact(c).zip(x.chunks_exact(c)).zip(dx.chunks_exact_mut(c)) {
        for ch in 0..c {
            let h = (xr[ch] - mean[ch]) * inv_std[ch];
            gr[ch] = dr[ch] * gamma[ch] * inv_std[ch];
            dgamma[ch] = dgamma[ch] + dr[ch] * h;
            dbeta[ch] = dbeta[ch] + dr[ch];
        }
    }
    (dx, dgamma, dbeta)
}
