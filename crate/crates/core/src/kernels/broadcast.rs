//! Same-rank broadcasting for binary elementwise ops.

use crate::error::{Error, Result};
use crate::tensor::{numel, Element};

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("broadcast needs equal rank, got {a:?} and {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

fn strides_for(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every output element in
/// row-major order.
fn visit(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let outer = numel(&out[..rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    for o in 0..outer {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..rank - 1 {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        let base = o * last;
        for k in 0..last {
            f(base + k, ia + k * la, ib + k * lb);
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub fn binary<T: Element>(
    a: &[T],
    sa: &[usize],
    b: &[T],
    sb: &[usize],
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    if sa == sb {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let mut out = vec![T::zero(); numel(out_shape)];
    let (ta, tb) = (strides_for(sa, out_shape), strides_for(sb, out_shape));
    visit(out_shape, &ta, &tb, |o, i, j| out[o] = f(a[i], b[j]));
    out
}

/// Sums an output-shaped gradient back onto a broadcast operand, with each
/// element first scaled by `scale(out_index, other_index)`.
pub fn reduce_to<T: Element>(
    dy: &[T],
    out_shape: &[usize],
    target: &[usize],
    other: &[usize],
    weight: impl Fn(usize, usize) -> T,
) -> Vec<T> {
    let mut g = vec![T::zero(); numel(target)];
    let (tt, to) = (strides_for(target, out_shape), strides_for(other, out_shape));
    visit(out_shape, &tt, &to, |o, i, j| g[i] = g[i] + dy[o] * weight(o, j));
    g
}
