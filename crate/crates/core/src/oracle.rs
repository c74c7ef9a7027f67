//! Analytic stand-ins for the trained model.
//!
//! These implement [`QuantileRegressor`] with closed-form quantile
//! functions so the calibration loop and the density reconstruction can
//! be checked against values that are computable by hand. The Gaussian
//! oracle is also what the CLI's oracle mode substitutes for a checkpoint.

use crate::error::Result;
use crate::numerics::Tensor;
use crate::qnet::QuantileRegressor;

/// Standard normal quantile function via Acklam's rational approximation
/// (relative error below 1.2e-9 across (0, 1)).
pub fn standard_normal_quantile(p: f64) -> f64 {
    assert!(0.0 < p && p < 1.0, "quantile level {} outside (0, 1)", p);
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Standard normal CDF via the Abramowitz-Stegun 7.1.26 erf approximation
/// (absolute error below 1.5e-7, plenty for the statistical tolerances
/// used in tests).
pub fn standard_normal_cdf(x: f64) -> f64 {
    let t = x / std::f64::consts::SQRT_2;
    0.5 * (1.0 + erf(t))
}

fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

/// Normal density with the given mean and standard deviation.
pub fn normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// Oracle whose conditional distribution at every pixel is N(mu, sigma^2):
/// `predict(y, q) = mu + sigma * Phi^{-1}(q)` everywhere, shaped like `y`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianQuantileOracle {
    pub mu: f64,
    pub sigma: f64,
}

impl QuantileRegressor for GaussianQuantileOracle {
    fn predict(&self, y: &Tensor, q: f64) -> Result<Tensor> {
        crate::training::check_quantile_level(q)?;
        let v = self.mu + self.sigma * standard_normal_quantile(q);
        Ok(Tensor::filled(y.shape(), v))
    }
}

/// Oracle that returns `q` at every pixel. Useful as a passthrough when a
/// test needs the queried level to be directly visible in the output.
#[derive(Debug, Clone, Copy)]
pub struct LevelOracle;

impl QuantileRegressor for LevelOracle {
    fn predict(&self, y: &Tensor, q: f64) -> Result<Tensor> {
        crate::training::check_quantile_level(q)?;
        Ok(Tensor::filled(y.shape(), q))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_matches_known_values() {
        // Phi^{-1}(0.975) = 1.959964...
        assert!((standard_normal_quantile(0.975) - 1.959964).abs() < 1e-5);
        assert!((standard_normal_quantile(0.5)).abs() < 1e-9);
        assert!((standard_normal_quantile(0.841344746) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cdf_and_quantile_are_inverse() {
        for &p in &[0.01, 0.1, 0.25, 0.5, 0.9, 0.999] {
            let x = standard_normal_quantile(p);
            assert!((standard_normal_cdf(x) - p).abs() < 1e-6, "p = {}", p);
        }
    }

    #[test]
    fn gaussian_oracle_is_monotone_in_q() {
        let oracle = GaussianQuantileOracle { mu: 0.5, sigma: 0.1 };
        let y = Tensor::zeros(&[1, 2, 2]);
        let lo = oracle.predict(&y, 0.1).unwrap();
        let mid = oracle.predict(&y, 0.5).unwrap();
        let hi = oracle.predict(&y, 0.9).unwrap();
        assert!(lo.data()[0] < mid.data()[0]);
        assert!(mid.data()[0] < hi.data()[0]);
        assert!((mid.data()[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn level_oracle_passthrough() {
        let y = Tensor::zeros(&[1, 4, 4]);
        let out = LevelOracle.predict(&y, 0.3).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.3));
    }
}
