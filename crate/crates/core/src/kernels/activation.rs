use serde::{Deserialize, Serialize};

use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Swish,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::LeakyRelu(_) => "leaky_relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Swish => "swish",
        }
    }
}

#[inline]
pub fn sigmoid<T: Element>(x: T) -> T {
    // Split on sign so exp never overflows.
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn forward<T: Element>(kind: Activation, x: &[T]) -> Vec<T> {
    match kind {
        Activation::Relu => x.iter().map(|&v| v.max(T::zero())).collect(),
        Activation::LeakyRelu(a) => {
            let a = T::lit(a);
            x.iter().map(|&v| if v > T::zero() { v } else { a * v }).collect()
        }
        Activation::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
        Activation::Swish => x.iter().map(|&v| v * sigmoid(v)).collect(),
    }
}

/// Input gradient given the forward input `x` and output `y`.
pub fn backward<T: Element>(kind: Activation, x: &[T], y: &[T], dy: &[T]) -> Vec<T> {
    let it = x.iter().zip(y).zip(dy);
    match kind {
        Activation::Relu => it.map(|((&v, _), &d)| if v > T::zero() { d } else { T::zero() }).collect(),
        Activation::LeakyRelu(a) => {
            let a = T::lit(a);
            it.map(|((&v, _), &d)| if v > T::zero() { d } else { a * d }).collect()
        }
        Activation::Sigmoid => it.map(|((_, &s), &d)| d * s * (T::one() - s)).collect(),
        Activation::Swish => it
            .map(|((&v, _), &d)| {
                let s = sigmoid(v);
                d * (s + v * s * (T::one() - s))
            })
            .collect(),
    }
}

/// `(outer, len, inner)` decomposition of a shape around `axis`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax<T: Element>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mut max = T::neg_infinity();
            for k in 0..len {
                max = max.max(x[at(k)]);
            }
            let mut sum = T::zero();
            for k in 0..len {
                let e = (x[at(k)] - max).exp();
                y[at(k)] = e;
                sum = sum + e;
            }
            for k in 0..len {
                y[at(k)] = y[at(k)] / sum;
            }
        }
    }
    y
}

pub fn softmax_backward<T: Element>(y: &[T], dy: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let dot: T = (0..len).map(|k| y[at(k)] * dy[at(k)]).sum();
            for k in 0..len {
                dx[at(k)] = y[at(k)] * (dy[at(k)] - dot);
            }
        }
    }
    dx
}
