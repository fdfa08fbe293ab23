use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{numel, Element, Tensor};

/// He-uniform initialization: i.i.d. draws on `[-sqrt(6/fan_in), sqrt(6/fan_in)]`.
pub fn he_uniform<T: Element>(shape: &[usize], fan_in: usize, seed: u64) -> Result<Tensor<T>> {
    he_uniform_with(shape, fan_in, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn he_uniform_with<T: Element, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::arg("he_uniform: fan_in must be positive"));
    }
    let limit = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    let data = (0..numel(shape)).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_holds_for_fan_in_six() {
        let t = he_uniform::<f64>(&[100_000], 6, 1).unwrap();
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn mean_is_centered() {
        let n = 100_000;
        let t = he_uniform::<f64>(&[n], 24, 2).unwrap();
        let limit = (6.0f64 / 24.0).sqrt();
        let sigma = limit / 3f64.sqrt() / (n as f64).sqrt();
        let mean = t.sum() / n as f64;
        assert!(mean.abs() < 3.0 * sigma, "mean {mean} vs 3 sigma {}", 3.0 * sigma);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = he_uniform::<f32>(&[3, 3, 4, 8], 36, 42).unwrap();
        let b = he_uniform::<f32>(&[3, 3, 4, 8], 36, 42).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn zero_fan_in_rejected() {
        assert!(he_uniform::<f32>(&[2], 0, 0).is_err());
    }
}
