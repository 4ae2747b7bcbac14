/// Penalised objective `H = -Y + σ Σ_j min(0, Pu_j - ε_j)²`.
pub fn penalty_objective(purity: &[f64], yield_value: f64, epsilon: &[f64], sigma: f64) -> f64 {
    assert_eq!(purity.len(), epsilon.len(), "one threshold per purity");
    let violation: f64 = purity.iter().zip(epsilon).map(|(p, e)| (p - e).min(0.0).powi(2)).sum();
    -yield_value + sigma * violation
}

pub fn log_likelihood(h: f64) -> f64 {
    -0.5 * h
}

pub fn likelihood(h: f64) -> f64 {
    log_likelihood(h).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn penalty_by_hand() {
        assert_eq!(penalty_objective(&[0.95], 0.7, &[0.9], 100.0), -0.7);
        let h = penalty_objective(&[0.8], 0.5, &[0.9], 100.0);
        assert!((h - 0.5).abs() < 1e-12);
        let p1 = penalty_objective(&[0.8], 0.0, &[0.9], 3.0);
        let p2 = penalty_objective(&[0.8], 0.0, &[0.9], 6.0);
        assert_eq!(p2, 2.0 * p1);
    }

    #[test]
    fn likelihood_values() {
        assert_eq!(likelihood(0.0), 1.0);
        assert!((likelihood(2.0) - (-1.0f64).exp()).abs() < 1e-16);
        assert_eq!(log_likelihood(1e6), -5e5);
    }
}
