//! Normal and chi-square distribution helpers backed by `statrs`.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// Inverse of the standard normal CDF.
pub fn normal_quantile(p: f64) -> f64 {
    standard_normal().inverse_cdf(p)
}

pub fn normal_cdf(x: f64) -> f64 {
    standard_normal().cdf(x)
}

/// Upper tail `1 - Φ(x)`, computed without cancellation.
pub fn normal_sf(x: f64) -> f64 {
    standard_normal().sf(x)
}

/// Upper tail of the chi-square distribution with `df` degrees of freedom.
pub fn chi2_sf(x: f64, df: usize) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    ChiSquared::new(df as f64)
        .map(|c| c.sf(x))
        .unwrap_or(f64::NAN)
}

pub fn chi2_quantile(p: f64, df: usize) -> f64 {
    ChiSquared::new(df as f64)
        .map(|c| c.inverse_cdf(p))
        .unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Φ by its Taylor series, Φ(x) = ½ + φ(x) Σ x^{2k+1}/(2k+1)!!.
    fn series_cdf(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        let mut k = 1.0;
        while term.abs() > 1e-18 * sum.abs() {
            term *= x * x / (2.0 * k + 1.0);
            sum += term;
            k += 1.0;
        }
        0.5 + (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt() * sum
    }

    #[test]
    fn quantile_matches_series_oracle() {
        for &p in &[1e-4, 0.025, 0.3, 0.5, 0.975, 0.99975, 1.0 - 1.0857e-4] {
            let (mut lo, mut hi) = (-8.0, 8.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if series_cdf(mid) < p {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let want = 0.5 * (lo + hi);
            let got = normal_quantile(p);
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1e-3), "p={p}: {got} vs {want}");
        }
        assert_eq!(normal_quantile(0.5), 0.0);
        // p near one carries ~1e-16 absolute error in p itself
        assert!((normal_quantile(1.0 - 1e-7) + normal_quantile(1e-7)).abs() < 1e-8);
        assert!((normal_sf(3.0) - (1.0 - normal_cdf(3.0))).abs() < 1e-15);
    }

    #[test]
    fn chi2_tail_matches_known_values() {
        assert!((chi2_quantile(0.95, 1) - 3.841_458_820_694_124).abs() < 1e-9);
        assert!((chi2_sf(3.841_458_820_694_124, 1) - 0.05).abs() < 1e-12);
        assert_eq!(chi2_sf(0.0, 3), 1.0);
    }
}
