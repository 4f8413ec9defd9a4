//! Small dense-vector helpers shared by the calibration stages.
//!
//! Means and deviations are computed relative to the first element so that a
//! constant input yields exactly that constant (and exactly zero spread).
//! Threshold rules compare with `>=`, and a mean that drifts by one ulp from
//! a constant input would otherwise flip tie assignments.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};

/// Norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

pub fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn norm(a: ArrayView1<f64>) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(v: ArrayView1<f64>, what: &str) -> Result<Array1<f64>> {
    let n = norm(v);
    if n < ZERO_NORM {
        return Err(Error::ZeroVector(what.to_string()));
    }
    Ok(v.mapv(|x| x / n))
}

pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na < ZERO_NORM || nb < ZERO_NORM {
        return Err(Error::ZeroVector("cosine operand".into()));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Row vector times matrix: `v · P` with `v: [d]`, `P: [d × d_j]`.
pub fn project(v: ArrayView1<f64>, projection: &Array2<f64>) -> Array1<f64> {
    v.dot(projection)
}

pub fn mean(xs: &[f64]) -> f64 {
    match xs.split_first() {
        None => 0.0,
        Some((&first, rest)) => {
            first + rest.iter().map(|x| x - first).sum::<f64>() / xs.len() as f64
        }
    }
}

/// Population standard deviation (1/n normalisation).
pub fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mu = mean(xs);
    (xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        let (lo, hi) = (sorted[mid - 1], sorted[mid]);
        lo + (hi - lo) / 2.0
    }
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn mean_of_constant_is_exact() {
        for &c in &[0.3, 1.0 / 49.0, 0.1, 7.77e-3] {
            let xs = vec![c; 49];
            assert_eq!(mean(&xs), c);
            assert_eq!(population_std(&xs), 0.0);
        }
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn softmax_single_element_is_one() {
        assert_eq!(softmax(&[123.4]), vec![1.0]);
        let p = softmax(&[1.0, 2.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_rejects_zero() {
        let z = array![0.0, 0.0];
        let a = array![1.0, 0.0];
        assert!(matches!(
            cosine(z.view(), a.view()),
            Err(Error::ZeroVector(_))
        ));
        assert!((cosine(a.view(), a.view()).unwrap() - 1.0).abs() < 1e-15);
    }
}
