//! Chebyshev tolerance bounds.

use serde::Serialize;

use crate::error::{Error, Result};

/// Smallest k with 1/k² = 1 − C.
pub fn chebyshev_k(confidence: f64) -> Result<f64> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Domain(confidence));
    }
    Ok((1.0 - confidence).powf(-0.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundSpec {
    pub mean: f64,
    pub std: f64,
    pub k: f64,
    pub confidence: f64,
    pub atol: f64,
    pub sample_count: usize,
}

/// Sample standard deviation with Bessel's correction; 0 below two samples.
pub fn sample_std(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return 0.0;
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let ss: f64 = samples.iter().map(|x| (x - mean).powi(2)).sum();
    (ss / (n - 1) as f64).sqrt()
}

pub fn bound(samples: &[f64], confidence: f64) -> Result<BoundSpec> {
    let k = chebyshev_k(confidence)?;
    let Some(&first) = samples.first() else {
        return Err(Error::NoSamples("empty sample".into()));
    };
    let constant = samples.iter().all(|x| x.to_bits() == first.to_bits());
    let (mean, std) = if constant {
        (first, 0.0)
    } else {
        (samples.iter().sum::<f64>() / samples.len() as f64, sample_std(samples))
    };
    Ok(BoundSpec {
        mean,
        std,
        k,
        confidence,
        atol: k * std,
        sample_count: samples.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_values() {
        assert!((chebyshev_k(0.75).unwrap() - 2.0).abs() < 1e-9);
        assert!((chebyshev_k(0.99).unwrap() - 10.0).abs() < 1e-9);
        assert!((chebyshev_k(0.9999).unwrap() - 100.0).abs() < 1e-9);
        for c in [0.0, 1.0, -0.5, 1.5, f64::NAN] {
            assert!(matches!(chebyshev_k(c), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn constant_samples_exact() {
        let b = bound(&[0.85; 30], 0.99).unwrap();
        assert_eq!(b.mean, 0.85);
        assert_eq!(b.atol, 0.0);
        assert_eq!(b.sample_count, 30);
    }

    #[test]
    fn bessel_corrected() {
        // Independent: var of {1,2,3,4} with n-1 is 5/3.
        let s = sample_std(&[1.0, 2.0, 3.0, 4.0]);
        assert!((s * s - 5.0 / 3.0).abs() < 1e-12);
        let b = bound(&[1.0, 2.0, 3.0, 4.0], 0.75).unwrap();
        assert!((b.atol - 2.0 * (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(b.mean, 2.5);
    }

    #[test]
    fn empty_is_error() {
        assert!(matches!(bound(&[], 0.9), Err(Error::NoSamples(_))));
    }
}
