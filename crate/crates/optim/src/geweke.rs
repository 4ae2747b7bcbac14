//! Geweke's comparison of early and late chain means.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GewekeError {
    #[error("chain of length {0} is too short, need at least 20")]
    TooShort(usize),
    #[error("fractions a = {a}, b = {b} must be positive and sum to at most 1")]
    Fractions { a: f64, b: f64 },
}

/// Spectral density at frequency zero from Bartlett-windowed autocovariances
/// with bandwidth `⌊√n⌋`. Divided by `n` it estimates the variance of the mean.
pub fn spectral_variance(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let acov = |k: usize| x[..n - k].iter().zip(&x[k..]).map(|(a, b)| (a - mean) * (b - mean)).sum::<f64>() / n as f64;
    let m = (n as f64).sqrt().floor() as usize;
    let mut s = acov(0);
    for k in 1..=m.min(n - 1) {
        s += 2.0 * (1.0 - k as f64 / (m + 1) as f64) * acov(k);
    }
    s.max(0.0)
}

/// Z-score of the difference between the mean of the first `a` fraction and
/// the last `b` fraction of the chain.
pub fn geweke(chain: &[f64], a: f64, b: f64) -> Result<f64, GewekeError> {
    let n = chain.len();
    if n < 20 {
        return Err(GewekeError::TooShort(n));
    }
    if !(a > 0.0 && b > 0.0 && a + b <= 1.0) {
        return Err(GewekeError::Fractions { a, b });
    }
    let na = ((a * n as f64).floor() as usize).max(2);
    let nb = ((b * n as f64).floor() as usize).max(2);
    let first = &chain[..na];
    let last = &chain[n - nb..];
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let diff = mean(first) - mean(last);
    let var = spectral_variance(first) / na as f64 + spectral_variance(last) / nb as f64;
    if var == 0.0 {
        return Ok(if diff == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(diff / var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_chains() {
        assert_eq!(geweke(&[3.0; 50], 0.1, 0.5).unwrap(), 0.0);
        let step: Vec<f64> = (0..100).map(|i| if i < 50 { 0.0 } else { 1.0 }).collect();
        assert!(geweke(&step, 0.1, 0.5).unwrap().abs() > 10.0);
        assert!(geweke(&[1.0; 10], 0.1, 0.5).is_err());
        assert!(geweke(&[1.0; 40], 0.6, 0.5).is_err());
    }

    #[test]
    fn spectrum_reflects_correlation() {
        let x: Vec<f64> = (0..400).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        // Alternating series: strong negative correlation pulls S(0) well below γ0 = 1.
        assert!(spectral_variance(&x) < 0.1);
        let y: Vec<f64> = (0..400).map(|i| ((i * 7919) % 13) as f64).collect();
        assert!(spectral_variance(&y) > 0.0);
    }
}
