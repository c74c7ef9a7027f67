//! Per-pixel conditional density reconstruction.
//!
//! The model's quantile function is sampled on a grid of levels, sorted
//! per pixel to remove crossings, and differentiated with interior
//! central differences; the reciprocal slope is the density estimate. The
//! conformalized variant replaces the nominal grid with calibrated level
//! pairs from a sweep of miscoverage budgets, using each bound's achieved
//! one-sided risk as its CDF mass.

use serde::{Deserialize, Serialize};

use crate::conformal::{calibrate, CalibrationResult};
use crate::datasim::PairedSample;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::par;
use crate::qnet::QuantileRegressor;

/// Slopes are floored here before inversion so flat quantile segments give
/// a large-but-finite density instead of dividing by zero.
pub const SLOPE_FLOOR: f64 = 1e-6;

/// Model predictions stacked over an ascending grid of quantile levels.
#[derive(Debug, Clone)]
pub struct QuantileSweep {
    pub q_grid: Vec<f64>,
    /// `[len(q_grid), H, W]`.
    pub values: Tensor,
    pub monotonized: bool,
    /// Pixels whose column changed order during monotonization.
    pub repair_count: usize,
}

/// Per-pixel value/density pairs at the interior grid levels.
#[derive(Debug, Clone)]
pub struct PdfEstimate {
    /// Interior levels (endpoints are dropped by the central difference).
    pub levels: Vec<f64>,
    /// `[len(levels), H, W]` predicted values.
    pub values: Tensor,
    /// `[len(levels), H, W]` densities; strictly positive.
    pub densities: Tensor,
}

impl PdfEstimate {
    /// `(level, value, density)` rows for one pixel.
    pub fn pixel_rows(&self, row: usize, col: usize) -> Vec<(f64, f64, f64)> {
        self.levels
            .iter()
            .enumerate()
            .map(|(i, &q)| {
                (
                    q,
                    self.values.at3(i, row, col),
                    self.densities.at3(i, row, col),
                )
            })
            .collect()
    }
}

/// The default sweep grid: 33 evenly spaced levels from 0.02 to 0.98.
pub fn default_q_grid() -> Vec<f64> {
    let n = 33;
    (0..n)
        .map(|i| 0.02 + (0.98 - 0.02) * i as f64 / (n - 1) as f64)
        .collect()
}

fn check_grid(q_grid: &[f64]) -> Result<()> {
    if q_grid.len() < 3 {
        return Err(Error::Usage(format!(
            "quantile grid needs at least 3 levels, got {}",
            q_grid.len()
        )));
    }
    for pair in q_grid.windows(2) {
        if !(pair[0] < pair[1]) {
            return Err(Error::Usage(format!(
                "quantile grid must be strictly ascending at {:?}",
                pair
            )));
        }
    }
    if q_grid[0] <= 0.0 || *q_grid.last().unwrap() >= 1.0 {
        return Err(Error::Domain(format!(
            "quantile grid must lie inside (0, 1), got [{}, {}]",
            q_grid[0],
            q_grid.last().unwrap()
        )));
    }
    Ok(())
}

/// Query the model at every grid level and stack the results.
pub fn quantile_sweep<M: QuantileRegressor>(
    model: &M,
    y: &Tensor,
    q_grid: &[f64],
) -> Result<QuantileSweep> {
    check_grid(q_grid)?;
    let (_, h, w) = y.dims3()?;
    let slices: Vec<Result<Tensor>> = par::map_slice(q_grid, |&q| model.predict(y, q));
    let mut data = Vec::with_capacity(q_grid.len() * h * w);
    for s in slices {
        let t = s?;
        if t.shape() != y.shape() {
            return Err(Error::ShapeMismatch(format!(
                "sweep slice shape {:?} vs measurement {:?}",
                t.shape(),
                y.shape()
            )));
        }
        data.extend_from_slice(t.data());
    }
    Ok(QuantileSweep {
        q_grid: q_grid.to_vec(),
        values: Tensor::new(vec![q_grid.len(), h, w], data)?,
        monotonized: false,
        repair_count: 0,
    })
}

/// Sort each pixel's values along the grid axis (a full sort is the
/// isotonic projection in this case). Idempotent; records how many pixels
/// changed.
pub fn monotonize(sweep: QuantileSweep) -> QuantileSweep {
    let (levels, h, w) = sweep
        .values
        .dims3()
        .expect("sweep values are rank 3 by construction");
    let mut data = sweep.values.into_data();
    let mut repaired = sweep.repair_count;
    let mut column = vec![0.0f64; levels];
    for r in 0..h {
        for c in 0..w {
            for (i, slot) in column.iter_mut().enumerate() {
                *slot = data[(i * h + r) * w + c];
            }
            let sorted = column.windows(2).all(|p| p[0] <= p[1]);
            if sorted {
                continue;
            }
            column.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
            for (i, &v) in column.iter().enumerate() {
                data[(i * h + r) * w + c] = v;
            }
            repaired += 1;
        }
    }
    QuantileSweep {
        q_grid: sweep.q_grid,
        values: Tensor::new(vec![levels, h, w], data).expect("shape preserved"),
        monotonized: true,
        repair_count: repaired,
    }
}

/// Interior central differences of the quantile function, inverted into a
/// density: `p(v_i) = 1 / max(dv/dq, floor)` for `i = 1..n-1`.
pub fn pdf_from_quantiles(sweep: &QuantileSweep) -> Result<PdfEstimate> {
    if !sweep.monotonized {
        return Err(Error::Usage(
            "pdf_from_quantiles requires a monotonized sweep".into(),
        ));
    }
    check_grid(&sweep.q_grid)?;
    let (levels, h, w) = sweep.values.dims3()?;
    let interior = levels - 2;
    let src = sweep.values.data();
    let mut values = vec![0.0; interior * h * w];
    let mut densities = vec![0.0; interior * h * w];
    for i in 1..levels - 1 {
        let dq = sweep.q_grid[i + 1] - sweep.q_grid[i - 1];
        for r in 0..h {
            for c in 0..w {
                let hi = src[((i + 1) * h + r) * w + c];
                let lo = src[((i - 1) * h + r) * w + c];
                let slope = ((hi - lo) / dq).max(SLOPE_FLOOR);
                let out = ((i - 1) * h + r) * w + c;
                values[out] = src[(i * h + r) * w + c];
                densities[out] = 1.0 / slope;
            }
        }
    }
    Ok(PdfEstimate {
        levels: sweep.q_grid[1..levels - 1].to_vec(),
        values: Tensor::new(vec![interior, h, w], values)?,
        densities: Tensor::new(vec![interior, h, w], densities)?,
    })
}

/// Calibrated level pair and the CDF masses assigned to it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlphaLevels {
    pub alpha: f64,
    pub q_lower_star: f64,
    pub q_upper_star: f64,
    /// CDF mass below the lower bound: the achieved lower-side risk.
    pub mass_lower: f64,
    /// CDF mass below the upper bound: one minus the achieved upper risk.
    pub mass_upper: f64,
}

/// Density built from conformally calibrated levels.
#[derive(Debug, Clone)]
pub struct ConformalizedPdf {
    pub pdf: PdfEstimate,
    pub per_alpha: Vec<AlphaLevels>,
}

/// Calibrate once per miscoverage budget, collect the level pairs with
/// their achieved one-sided risks as CDF masses, anchor the median at mass
/// one half, and differentiate the assembled piecewise CDF.
///
/// Level pairs across budgets are forced to nest (cumulative max/min over
/// the ascending alpha list) since independent calibrations may disagree
/// by a pixel's worth of risk.
pub fn conformalized_pdf<M: QuantileRegressor>(
    model: &M,
    calib: &[PairedSample],
    y: &Tensor,
    alpha_list: &[f64],
    delta_q: f64,
    max_iters: usize,
) -> Result<ConformalizedPdf> {
    if alpha_list.is_empty() {
        return Err(Error::Usage("alpha_list is empty".into()));
    }
    for pair in alpha_list.windows(2) {
        if !(pair[0] < pair[1]) {
            return Err(Error::Usage(format!(
                "alpha_list must be strictly ascending at {:?}",
                pair
            )));
        }
    }

    let results: Vec<(f64, Result<CalibrationResult>)> = alpha_list
        .iter()
        .map(|&alpha| (alpha, calibrate(model, calib, alpha, delta_q, max_iters)))
        .collect();
    let failed: Vec<f64> = results
        .iter()
        .filter(|(_, r)| r.is_err())
        .map(|(a, _)| *a)
        .collect();
    if !failed.is_empty() {
        return Err(Error::PartialPdf { failed });
    }

    let mut per_alpha: Vec<AlphaLevels> = results
        .into_iter()
        .map(|(alpha, r)| {
            let r = r.expect("failures handled above");
            AlphaLevels {
                alpha,
                q_lower_star: r.q_lower_star,
                q_upper_star: r.q_upper_star,
                mass_lower: r.achieved_risk_lower,
                mass_upper: 1.0 - r.achieved_risk_upper,
            }
        })
        .collect();

    // Nesting repair: ascending alpha means shrinking central mass, so the
    // lower levels must not decrease and the upper levels must not increase.
    for i in 1..per_alpha.len() {
        per_alpha[i].q_lower_star = per_alpha[i].q_lower_star.max(per_alpha[i - 1].q_lower_star);
        per_alpha[i].q_upper_star = per_alpha[i].q_upper_star.min(per_alpha[i - 1].q_upper_star);
        per_alpha[i].mass_lower = per_alpha[i].mass_lower.max(per_alpha[i - 1].mass_lower);
        per_alpha[i].mass_upper = per_alpha[i].mass_upper.min(per_alpha[i - 1].mass_upper);
    }

    // Assemble (mass, level) knots: lower bounds ascending toward the
    // median anchor at one half, then upper bounds.
    let mut knots: Vec<(f64, f64)> = Vec::with_capacity(2 * per_alpha.len() + 1);
    for a in &per_alpha {
        knots.push((a.mass_lower, a.q_lower_star));
    }
    knots.push((0.5, 0.5));
    for a in per_alpha.iter().rev() {
        knots.push((a.mass_upper, a.q_upper_star));
    }
    knots.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite masses"));
    knots.dedup_by(|a, b| (a.0 - b.0).abs() < 1e-9 || (a.1 - b.1).abs() < 1e-12);
    if knots.len() < 3 {
        return Err(Error::Usage(format!(
            "only {} distinct calibrated levels; need at least 3 for differentiation",
            knots.len()
        )));
    }

    let masses: Vec<f64> = knots.iter().map(|k| k.0).collect();
    let levels: Vec<f64> = knots.iter().map(|k| k.1).collect();
    let (_, h, w) = y.dims3()?;
    let slices: Vec<Result<Tensor>> = par::map_slice(&levels, |&q| model.predict(y, q));
    let mut data = Vec::with_capacity(levels.len() * h * w);
    for s in slices {
        data.extend_from_slice(s?.data());
    }
    let sweep = QuantileSweep {
        q_grid: masses,
        values: Tensor::new(vec![levels.len(), h, w], data)?,
        monotonized: false,
        repair_count: 0,
    };
    let sweep = monotonize(sweep);
    let pdf = pdf_from_quantiles(&sweep)?;
    Ok(ConformalizedPdf { pdf, per_alpha })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{normal_pdf, GaussianQuantileOracle, LevelOracle};
    use proptest::prelude::*;

    /// Oracle with quantile function Q(q) = scale * q.
    struct ScaledLevelOracle(f64);
    impl QuantileRegressor for ScaledLevelOracle {
        fn predict(&self, y: &Tensor, q: f64) -> Result<Tensor> {
            crate::training::check_quantile_level(q)?;
            Ok(Tensor::filled(y.shape(), self.0 * q))
        }
    }

    #[test]
    fn default_grid_contract() {
        let g = default_q_grid();
        assert_eq!(g.len(), 33);
        assert!((g[0] - 0.02).abs() < 1e-15);
        assert!((g[32] - 0.98).abs() < 1e-15);
        check_grid(&g).unwrap();
    }

    #[test]
    fn sweep_level_oracle_reproduces_grid() {
        let y = Tensor::zeros(&[1, 4, 4]);
        let grid = [0.1, 0.3, 0.5, 0.7, 0.9];
        let sweep = quantile_sweep(&LevelOracle, &y, &grid).unwrap();
        assert_eq!(sweep.values.shape()[0], grid.len());
        for (i, &q) in grid.iter().enumerate() {
            for r in 0..4 {
                for c in 0..4 {
                    assert_eq!(sweep.values.at3(i, r, c), q);
                }
            }
        }
    }

    #[test]
    fn sweep_rejects_bad_grids() {
        let y = Tensor::zeros(&[1, 4, 4]);
        assert!(quantile_sweep(&LevelOracle, &y, &[0.1, 0.5]).is_err());
        assert!(quantile_sweep(&LevelOracle, &y, &[0.5, 0.3, 0.7]).is_err());
        assert!(quantile_sweep(&LevelOracle, &y, &[0.0, 0.5, 0.9]).is_err());
    }

    #[test]
    fn monotonize_sorts_and_counts() {
        let sweep = QuantileSweep {
            q_grid: vec![0.2, 0.5, 0.8],
            values: Tensor::new(vec![3, 1, 1], vec![0.3, 0.2, 0.5]).unwrap(),
            monotonized: false,
            repair_count: 0,
        };
        let fixed = monotonize(sweep);
        assert_eq!(fixed.values.data(), &[0.2, 0.3, 0.5]);
        assert_eq!(fixed.repair_count, 1);
        assert!(fixed.monotonized);

        let again = monotonize(fixed.clone());
        assert_eq!(again.values.data(), fixed.values.data());
        assert_eq!(again.repair_count, fixed.repair_count);
    }

    #[test]
    fn monotonize_leaves_sorted_stack_alone() {
        let y = Tensor::zeros(&[1, 2, 2]);
        let sweep = quantile_sweep(&LevelOracle, &y, &default_q_grid()).unwrap();
        let values_before = sweep.values.clone();
        let fixed = monotonize(sweep);
        assert_eq!(fixed.values, values_before);
        assert_eq!(fixed.repair_count, 0);
    }

    proptest! {
        #[test]
        fn monotonize_is_nondecreasing_and_idempotent(
            vals in proptest::collection::vec(-5.0f64..5.0, 12),
        ) {
            let sweep = QuantileSweep {
                q_grid: vec![0.1, 0.3, 0.5, 0.7, 0.9, 0.95],
                values: Tensor::new(vec![6, 1, 2], vals).unwrap(),
                monotonized: false,
                repair_count: 0,
            };
            let fixed = monotonize(sweep);
            for c in 0..2 {
                for i in 0..5 {
                    prop_assert!(fixed.values.at3(i, 0, c) <= fixed.values.at3(i + 1, 0, c));
                }
            }
            let again = monotonize(fixed.clone());
            prop_assert_eq!(again.values.data(), fixed.values.data());
        }
    }

    #[test]
    fn pdf_requires_monotonized_sweep() {
        let y = Tensor::zeros(&[1, 2, 2]);
        let sweep = quantile_sweep(&LevelOracle, &y, &default_q_grid()).unwrap();
        assert!(pdf_from_quantiles(&sweep).is_err());
        assert!(pdf_from_quantiles(&monotonize(sweep)).is_ok());
    }

    #[test]
    fn uniform_quantile_function_gives_unit_density() {
        // Q(q) = q is the uniform distribution on [0, 1]: density 1.
        let y = Tensor::zeros(&[1, 2, 2]);
        let sweep = monotonize(quantile_sweep(&LevelOracle, &y, &default_q_grid()).unwrap());
        let pdf = pdf_from_quantiles(&sweep).unwrap();
        for &d in pdf.densities.data() {
            assert!((d - 1.0).abs() < 1e-12, "density {}", d);
        }
        assert_eq!(pdf.levels.len(), 31);
    }

    #[test]
    fn doubled_quantile_function_halves_density() {
        let y = Tensor::zeros(&[1, 2, 2]);
        let sweep = monotonize(
            quantile_sweep(&ScaledLevelOracle(2.0), &y, &default_q_grid()).unwrap(),
        );
        let pdf = pdf_from_quantiles(&sweep).unwrap();
        for &d in pdf.densities.data() {
            assert!((d - 0.5).abs() < 1e-12, "density {}", d);
        }
    }

    #[test]
    fn gaussian_oracle_recovers_analytic_density() {
        let (mu, sigma) = (0.5, 0.1);
        let oracle = GaussianQuantileOracle { mu, sigma };
        let y = Tensor::zeros(&[1, 2, 2]);
        let sweep = monotonize(quantile_sweep(&oracle, &y, &default_q_grid()).unwrap());
        let pdf = pdf_from_quantiles(&sweep).unwrap();
        for (i, &q) in pdf.levels.iter().enumerate() {
            if !(0.2..=0.8).contains(&q) {
                continue;
            }
            let v = pdf.values.at3(i, 0, 0);
            let got = pdf.densities.at3(i, 0, 0);
            let want = normal_pdf(v, mu, sigma);
            let rel = (got - want).abs() / want;
            assert!(rel < 0.05, "level {}: density {} vs {} (rel {})", q, got, want, rel);
        }
    }

    #[test]
    fn gaussian_oracle_mass_between_deciles() {
        // Trapezoidal mass of the density between the 0.1 and 0.9 quantile
        // values should be close to 0.8.
        let oracle = GaussianQuantileOracle { mu: 0.5, sigma: 0.1 };
        let y = Tensor::zeros(&[1, 1, 1]);
        let sweep = monotonize(quantile_sweep(&oracle, &y, &default_q_grid()).unwrap());
        let pdf = pdf_from_quantiles(&sweep).unwrap();
        let v_lo = oracle.predict(&y, 0.1).unwrap().data()[0];
        let v_hi = oracle.predict(&y, 0.9).unwrap().data()[0];
        let mut mass = 0.0;
        for i in 0..pdf.levels.len() - 1 {
            let (v0, v1) = (pdf.values.at3(i, 0, 0), pdf.values.at3(i + 1, 0, 0));
            let (d0, d1) = (pdf.densities.at3(i, 0, 0), pdf.densities.at3(i + 1, 0, 0));
            let a = v0.max(v_lo);
            let b = v1.min(v_hi);
            if a >= b {
                continue;
            }
            // Linear density across the clipped segment.
            let frac_a = (a - v0) / (v1 - v0);
            let frac_b = (b - v0) / (v1 - v0);
            let da = d0 + frac_a * (d1 - d0);
            let db = d0 + frac_b * (d1 - d0);
            mass += 0.5 * (da + db) * (b - a);
        }
        assert!((0.75..=0.85).contains(&mass), "mass {}", mass);
    }
}
