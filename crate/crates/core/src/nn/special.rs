use crate::error::{MeterError, Result};

/// Digamma ψ(x) for x > 0, via the ascending recurrence ψ(x+1) = ψ(x) + 1/x
/// to push the argument above 10, then the asymptotic Bernoulli series.
/// Absolute error stays below 1e-12 for x ≥ 0.5.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(MeterError::Domain(format!(
            "digamma requires x > 0, got {x}"
        )));
    }
    let mut acc = 0.0;
    let mut x = x;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // ψ(x) ≈ ln x − 1/(2x) − Σ B₂ₙ/(2n·x²ⁿ), terms through x⁻¹⁴
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    Ok(acc + x.ln() - 0.5 * inv - series)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    /// Independent oracle: Gauss series ψ(x) = −γ + Σₙ (1/(n+1) − 1/(n+x))
    /// with an Euler–Maclaurin tail after N terms. A different route than the
    /// recurrence + Bernoulli series used by the implementation.
    fn digamma_series_oracle(x: f64) -> f64 {
        assert!(x > 0.0);
        let n_terms = 10_000usize;
        let mut sum = 0.0;
        for n in (0..n_terms).rev() {
            let t = n as f64;
            sum += 1.0 / (t + 1.0) - 1.0 / (t + x);
        }
        let big_n = n_terms as f64;
        // tail Σ_{n≥N} g(n) with g(t) = 1/(t+1) − 1/(t+x)
        let integral = ((big_n + x) / (big_n + 1.0)).ln();
        let g_n = 1.0 / (big_n + 1.0) - 1.0 / (big_n + x);
        let gp_n = -1.0 / ((big_n + 1.0) * (big_n + 1.0)) + 1.0 / ((big_n + x) * (big_n + x));
        let tail = integral + 0.5 * g_n - gp_n / 12.0;
        -EULER_GAMMA + sum + tail
    }

    #[test]
    fn digamma_one_is_minus_euler_gamma() {
        assert!((digamma(1.0).unwrap() + EULER_GAMMA).abs() < 1e-12);
    }

    #[test]
    fn digamma_two_via_recurrence_constant() {
        assert!((digamma(2.0).unwrap() - (1.0 - EULER_GAMMA)).abs() < 1e-12);
    }

    #[test]
    fn digamma_matches_series_oracle_below_one() {
        let got = digamma(0.7).unwrap();
        let want = digamma_series_oracle(0.7);
        assert!((got - want).abs() < 1e-10, "got {got}, oracle {want}");
    }

    #[test]
    fn digamma_matches_series_oracle_across_range() {
        for &x in &[0.5, 0.9, 1.3, 2.7, 5.5, 9.99, 10.01, 17.3, 42.0] {
            let got = digamma(x).unwrap();
            let want = digamma_series_oracle(x);
            assert!(
                (got - want).abs() < 1e-10,
                "x={x}: got {got}, oracle {want}"
            );
        }
    }

    #[test]
    fn digamma_recurrence_identity() {
        // ψ(x+1) − ψ(x) = 1/x across [0.5, 50]
        let mut x = 0.5;
        while x <= 50.0 {
            let lhs = digamma(x + 1.0).unwrap() - digamma(x).unwrap();
            assert!((lhs - 1.0 / x).abs() < 1e-10, "x={x}");
            x += 0.25;
        }
    }

    #[test]
    fn digamma_rejects_nonpositive() {
        assert!(digamma(0.0).is_err());
        assert!(digamma(-1.0).is_err());
        assert!(digamma(f64::NAN).is_err());
    }
}
