//! Dense linear algebra, activations, initialisation, dropout and Adam.

mod adam;
mod matrix;
mod rng;

pub use adam::AdamState;
pub use matrix::{dot, Matrix};
pub use rng::{derive_seed, label, Rng};

use crate::error::{Error, Result};

/// Logistic sigmoid, evaluated in a form that never overflows.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_vec(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|&x| sigmoid(x)).collect()
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, otherwise
/// `1 / (1 - rate)`.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Domain(format!("dropout rate {rate} outside [0, 1)")));
    }
    if rate == 0.0 {
        return Ok(vec![1.0; len]);
    }
    let keep = 1.0 / (1.0 - rate);
    Ok((0..len)
        .map(|_| if rng.bernoulli(rate) { 0.0 } else { keep })
        .collect())
}

/// Glorot-uniform initialisation in `±sqrt(6 / (rows + cols))`.
pub fn glorot_init(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.uniform(-bound, bound))
}

/// Rescales `grads` in place so its Euclidean norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(1000.0) - 1.0).abs() < 1e-12);
        assert!(sigmoid(-1000.0) >= 0.0);
        assert!(!sigmoid(-1000.0).is_nan());
        // 1 / (1 + e^-1), evaluated by hand to 10 digits
        assert!((sigmoid(1.0) - 0.7310585786).abs() < 1e-10);
        assert_eq!(sigmoid_vec(&[0.0, 0.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn sigmoid_monotone() {
        let xs: Vec<f64> = (-50..=50).map(|i| i as f64 * 0.7).collect();
        let ys = sigmoid_vec(&xs);
        assert!(ys.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn softplus_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn dropout_zero_rate() {
        let mut rng = Rng::new(0);
        assert!(dropout_mask(17, 0.0, &mut rng)
            .unwrap()
            .iter()
            .all(|&v| v == 1.0));
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let mut rng = Rng::new(0);
        assert!(matches!(dropout_mask(3, 1.0, &mut rng), Err(Error::Domain(_))));
        assert!(dropout_mask(3, -0.1, &mut rng).is_err());
    }

    #[test]
    fn dropout_frequency_and_mean() {
        let mut rng = Rng::new(2024);
        let mask = dropout_mask(100_000, 0.3, &mut rng).unwrap();
        let zeros = mask.iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
        // binomial std at n=1e5, p=0.3 is ~0.00145
        assert!((0.295..=0.305).contains(&zeros), "{zeros}");
        let mean = mask.iter().sum::<f64>() / 1e5;
        assert!((mean - 1.0).abs() < 1e-2);
    }

    #[test]
    fn dropout_deterministic() {
        let a = dropout_mask(50, 0.5, &mut Rng::new(5)).unwrap();
        let b = dropout_mask(50, 0.5, &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn glorot_bounds_and_mean() {
        let m = glorot_init(1, 1, &mut Rng::new(1));
        assert!(m.get(0, 0).abs() <= 3f64.sqrt());
        let big = glorot_init(100, 100, &mut Rng::new(11));
        let bound = (6.0f64 / 200.0).sqrt();
        assert!(big.as_slice().iter().all(|v| v.abs() <= bound));
        let mean = big.as_slice().iter().sum::<f64>() / 1e4;
        assert!(mean.abs() < 0.01);
        assert_eq!(big, glorot_init(100, 100, &mut Rng::new(11)));
    }
}
