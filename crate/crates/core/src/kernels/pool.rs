use serde::{Deserialize, Serialize};

use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlobalPool {
    Avg,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelPool {
    Mean,
    Max,
    Min,
    Sum,
}

/// Reduction over H and W. Returns values `(n, c)` and, for max, the flat
/// source index of each maximum.
pub fn global_pool<T: Element>(kind: GlobalPool, x: &[T], n: usize, hw: usize, c: usize) -> (Vec<T>, Vec<usize>) {
    let mut out = vec![T::zero(); n * c];
    let mut arg = Vec::new();
    match kind {
        GlobalPool::Avg => {
            let denom = T::from_usize(hw).unwrap();
            for b in 0..n {
                let o = &mut out[b * c..(b + 1) * c];
                for row in x[b * hw * c..(b + 1) * hw * c].chunks_exact(c) {
                    for (a, &v) in o.iter_mut().zip(row) {
                        *a = *a + v;
                    }
                }
                o.iter_mut().for_each(|a| *a = *a / denom);
            }
        }
        GlobalPool::Max => {
            arg = vec![0; n * c];
            for b in 0..n {
                for ch in 0..c {
                    let mut best = b * hw * c + ch;
                    for p in 1..hw {
                        let idx = (b * hw + p) * c + ch;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    arg[b * c + ch] = best;
                    out[b * c + ch] = x[best];
                }
            }
        }
    }
    (out, arg)
}

pub fn global_pool_backward<T: Element>(
    kind: GlobalPool,
    dy: &[T],
    arg: &[usize],
    n: usize,
    hw: usize,
    c: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); n * hw * c];
    match kind {
        GlobalPool::Avg => {
            let denom = T::from_usize(hw).unwrap();
            for b in 0..n {
                for row in dx[b * hw * c..(b + 1) * hw * c].chunks_exact_mut(c) {
                    for (d, &g) in row.iter_mut().zip(&dy[b * c..(b + 1) * c]) {
                        *d = g / denom;
                    }
                }
            }
        }
        GlobalPool::Max => {
            for (&a, &g) in arg.iter().zip(dy) {
                dx[a] = dx[a] + g;
            }
        }
    }
    dx
}

/// Reduction over the trailing channel axis. For max/min also returns the
/// winning channel of each pixel.
pub fn channel_pool<T: Element>(kind: ChannelPool, x: &[T], c: usize) -> (Vec<T>, Vec<usize>) {
    let pixels = x.len() / c;
    let mut out = Vec::with_capacity(pixels);
    let mut arg = Vec::new();
    let cf = T::from_usize(c).unwrap();
    for row in x.chunks_exact(c) {
        match kind {
            ChannelPool::Mean => out.push(row.iter().copied().sum::<T>() / cf),
            ChannelPool::Sum => out.push(row.iter().copied().sum::<T>()),
            ChannelPool::Max | ChannelPool::Min => {
                let mut best = 0;
                for k in 1..c {
                    let better = if kind == ChannelPool::Max { row[k] > row[best] } else { row[k] < row[best] };
                    if better {
                        best = k;
                    }
                }
                arg.push(best);
                out.push(row[best]);
            }
        }
    }
    (out, arg)
}

pub fn channel_pool_backward<T: Element>(kind: ChannelPool, dy: &[T], arg: &[usize], c: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); dy.len() * c];
    let cf = T::from_usize(c).unwrap();
    for (p, (row, &g)) in dx.chunks_exact_mut(c).zip(dy).enumerate() {
        match kind {
            ChannelPool::Mean => row.iter_mut().for_each(|d| *d = g / cf),
            ChannelPool::Sum => row.iter_mut().for_each(|d| *d = g),
            ChannelPool::Max | ChannelPool::Min => row[arg[p]] = g,
        }
    }
    dx
}

/// Non-overlapping `k x k` window pooling; `max` selects max pooling,
/// otherwise averaging. Returns argmax flat indices for max.
pub fn window_pool<T: Element>(
    max: bool,
    x: &[T],
    dims: (usize, usize, usize, usize),
    k: usize,
) -> (Vec<T>, Vec<usize>) {
    let (n, h, w, c) = dims;
    let (oh, ow) = (h / k, w / k);
    let mut out = vec![T::zero(); n * oh * ow * c];
    let mut arg = if max { vec![0; out.len()] } else { Vec::new() };
    let inv = T::from_usize(k * k).unwrap().recip();
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let ob = ((b * oh + oy) * ow + ox) * c;
                for ch in 0..c {
                    let mut best = usize::MAX;
                    let mut acc = T::zero();
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = ((b * h + oy * k + dy) * w + ox * k + dx) * c + ch;
                            if max {
                                if best == usize::MAX || x[idx] > x[best] {
                                    best = idx;
                                }
                            } else {
                                acc = acc + x[idx];
                            }
                        }
                    }
                    if max {
                        out[ob + ch] = x[best];
                        arg[ob + ch] = best;
                    } else {
                        out[ob + ch] = acc * inv;
                    }
                }
            }
        }
    }
    (out, arg)
}

pub fn window_pool_backward<T: Element>(
    max: bool,
    dy: &[T],
    arg: &[usize],
    dims: (usize, usize, usize, usize),
    k: usize,
) -> Vec<T> {
    let (n, h, w, c) = dims;
    let mut dx = vec![T::zero(); n * h * w * c];
    if max {
        for (&a, &g) in arg.iter().zip(dy) {
            dx[a] = dx[a] + g;
        }
        return dx;
    }
    let (oh, ow) = (h / k, w / k);
    let inv = T::from_usize(k * k).unwrap().recip();
    for b in 0..n {
        for y in 0..oh * k {
            for x in 0..ow * k {
                let src = ((b * oh + y / k) * ow + x / k) * c;
                let dst = ((b * h + y) * w + x) * c;
                for ch in 0..c {
                    dx[dst + ch] = dy[src + ch] * inv;
                }
            }
        }
    }
    dx
}
