//! Conformal calibration of quantile bounds.
//!
//! The empirical risk of a bound pair is the fraction of ground-truth
//! pixels outside the predicted interval, averaged over calibration
//! images. It splits exactly into a lower-side and an upper-side
//! miscoverage, and each side gets half of the (finite-sample adjusted)
//! error budget. Calibration walks the two query levels in fixed steps,
//! tightening a side while it is within its budget and relaxing it
//! otherwise; the step halves whenever a side reverses direction so the
//! walk settles instead of oscillating forever.
//!
//! A constant-scaling comparator is included: it queries fixed quantile
//! levels once and bisects a single multiplicative factor on the interval
//! half-widths until the same risk budget holds.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::datasim::PairedSample;
use crate::error::{Error, Result, TraceEntry};
use crate::numerics::Tensor;
use crate::par;
use crate::qnet::QuantileRegressor;

/// Query levels are clamped to this range so calibration never queries
/// outside the trained quantile-sampling support.
pub const Q_FLOOR: f64 = 0.001;
pub const Q_CEIL: f64 = 0.999;

/// Step decay floor: once both step sizes fall below this the bounds
/// cannot move meaningfully and an in-budget evaluation is accepted.
const DQ_MIN: f64 = 1e-4;

/// Calibrated bound pair and how it was reached.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub q_lower_star: f64,
    pub q_upper_star: f64,
    pub alpha: f64,
    pub alpha_prime: f64,
    pub achieved_risk: f64,
    pub achieved_risk_lower: f64,
    pub achieved_risk_upper: f64,
    pub iterations: usize,
    pub trace: Vec<TraceEntry>,
}

/// Constant-scaling comparator calibration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineCalibration {
    /// Multiplicative half-width scale.
    pub lambda_star: f64,
    pub fixed_q_lower: f64,
    pub fixed_q_upper: f64,
    pub alpha: f64,
    pub alpha_prime: f64,
    pub achieved_risk: f64,
}

/// Per-pixel interval for one measurement. The queried triple is sorted
/// per pixel so lower <= median <= upper always holds; `repaired_pixels`
/// counts where sorting changed the order.
#[derive(Debug, Clone)]
pub struct UncertaintyMap {
    pub lower: Tensor,
    pub median: Tensor,
    pub upper: Tensor,
    pub repaired_pixels: usize,
}

impl UncertaintyMap {
    /// Interval length map `upper - lower`; nonnegative after repair.
    pub fn interval_length(&self) -> Tensor {
        self.upper
            .zip_with(&self.lower, |u, l| u - l)
            .expect("upper and lower share a shape")
    }
}

/// Fraction of miscovered pixels (ground truth below the lower bound or
/// above the upper bound), averaged over images.
pub fn empirical_risk(lower: &[Tensor], upper: &[Tensor], gt: &[Tensor]) -> Result<f64> {
    if lower.len() != upper.len() || lower.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "empirical_risk: {} lower, {} upper, {} gt maps",
            lower.len(),
            upper.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::EmptyDataset("empirical_risk over zero images".into()));
    }
    let mut total = 0.0;
    for ((lo, up), x) in lower.iter().zip(upper).zip(gt) {
        if !lo.same_shape(x) || !up.same_shape(x) {
            return Err(Error::ShapeMismatch(format!(
                "empirical_risk maps {:?}/{:?} vs gt {:?}",
                lo.shape(),
                up.shape(),
                x.shape()
            )));
        }
        let miscovered = x
            .data()
            .iter()
            .zip(lo.data().iter().zip(up.data()))
            .filter(|(&v, (&l, &u))| v < l || v > u)
            .count();
        total += miscovered as f64 / x.len() as f64;
    }
    Ok(total / gt.len() as f64)
}

fn check_bound_pair(q_lower: f64, q_upper: f64) -> Result<()> {
    if !(0.0 < q_lower && q_lower < q_upper && q_upper < 1.0) {
        return Err(Error::Domain(format!(
            "bounds must satisfy 0 < q_lower < q_upper < 1, got ({}, {})",
            q_lower, q_upper
        )));
    }
    Ok(())
}

/// Lower-side miscoverage of one level: mean fraction of pixels with
/// ground truth strictly below the queried lower-bound image.
fn risk_lower<M: QuantileRegressor>(model: &M, calib: &[PairedSample], q: f64) -> Result<f64> {
    let fracs: Vec<Result<f64>> = par::map_slice(calib, |s| {
        let bound = model.predict(&s.y, q)?;
        let count = s
            .x
            .data()
            .iter()
            .zip(bound.data())
            .filter(|(&x, &b)| x < b)
            .count();
        Ok(count as f64 / s.x.len() as f64)
    });
    let mut acc = 0.0;
    for f in fracs {
        acc += f?;
    }
    Ok(acc / calib.len() as f64)
}

/// Upper-side miscoverage: fraction of pixels strictly above the bound.
fn risk_upper<M: QuantileRegressor>(model: &M, calib: &[PairedSample], q: f64) -> Result<f64> {
    let fracs: Vec<Result<f64>> = par::map_slice(calib, |s| {
        let bound = model.predict(&s.y, q)?;
        let count = s
            .x
            .data()
            .iter()
            .zip(bound.data())
            .filter(|(&x, &b)| x > b)
            .count();
        Ok(count as f64 / s.x.len() as f64)
    });
    let mut acc = 0.0;
    for f in fracs {
        acc += f?;
    }
    Ok(acc / calib.len() as f64)
}

/// Decomposed risk of a bound pair: `(r_lower, r_upper)`. Their sum equals
/// [`empirical_risk`] of the same bound maps exactly whenever the lower
/// map does not exceed the upper map.
pub fn one_sided_risks<M: QuantileRegressor>(
    model: &M,
    calib: &[PairedSample],
    q_lower: f64,
    q_upper: f64,
) -> Result<(f64, f64)> {
    check_bound_pair(q_lower, q_upper)?;
    if calib.is_empty() {
        return Err(Error::EmptyDataset("one_sided_risks over zero images".into()));
    }
    Ok((
        risk_lower(model, calib, q_lower)?,
        risk_upper(model, calib, q_upper)?,
    ))
}

/// Finite-sample adjustment `alpha' = alpha - (1 - alpha) / n`.
pub fn adjust_alpha(alpha: f64, n_calib: usize) -> Result<f64> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha {} outside (0, 1)", alpha)));
    }
    if n_calib == 0 {
        return Err(Error::EmptyDataset("adjust_alpha with n_calib = 0".into()));
    }
    let alpha_prime = alpha - (1.0 - alpha) / n_calib as f64;
    if alpha_prime <= 0.0 {
        return Err(Error::CalibSetTooSmall {
            alpha,
            alpha_prime,
            n_calib,
        });
    }
    Ok(alpha_prime)
}

struct SideCache<'m, M: QuantileRegressor> {
    model: &'m M,
    lower: HashMap<u64, f64>,
    upper: HashMap<u64, f64>,
}

impl<'m, M: QuantileRegressor> SideCache<'m, M> {
    fn new(model: &'m M) -> Self {
        Self {
            model,
            lower: HashMap::new(),
            upper: HashMap::new(),
        }
    }

    fn lower(&mut self, calib: &[PairedSample], q: f64) -> Result<f64> {
        if let Some(&r) = self.lower.get(&q.to_bits()) {
            return Ok(r);
        }
        let r = risk_lower(self.model, calib, q)?;
        self.lower.insert(q.to_bits(), r);
        Ok(r)
    }

    fn upper(&mut self, calib: &[PairedSample], q: f64) -> Result<f64> {
        if let Some(&r) = self.upper.get(&q.to_bits()) {
            return Ok(r);
        }
        let r = risk_upper(self.model, calib, q)?;
        self.upper.insert(q.to_bits(), r);
        Ok(r)
    }
}

/// Walk the quantile bounds until the decomposed risk meets the adjusted
/// budget.
///
/// Start at `(alpha', 1 - alpha')`. Each iteration evaluates both
/// one-sided risks; a side within its half-budget tightens by its step,
/// otherwise it relaxes, and a direction reversal halves that side's
/// step. Success requires the total risk within `alpha'`, each side
/// within its half-budget plus one pixel of granularity, and the walk to
/// have settled (last move tightened or held, both sides pinned within a
/// pixel of budget, or steps fully decayed). Fails with the trace after
/// `max_iters` evaluations, and fails fast if the bounds ever cross.
pub fn calibrate<M: QuantileRegressor>(
    model: &M,
    calib: &[PairedSample],
    alpha: f64,
    delta_q: f64,
    max_iters: usize,
) -> Result<CalibrationResult> {
    if calib.is_empty() {
        return Err(Error::EmptyDataset("calibration split is empty".into()));
    }
    if delta_q <= 0.0 {
        return Err(Error::Domain(format!("delta_q {} must be positive", delta_q)));
    }
    if max_iters == 0 {
        return Err(Error::Usage("max_iters must be >= 1".into()));
    }
    let n_calib = calib.len();
    let alpha_prime = adjust_alpha(alpha, n_calib)?;
    let pixels_per_image = calib[0].x.len();
    // One pixel's worth of calibration risk.
    let pixel_risk = 1.0 / (n_calib * pixels_per_image) as f64;
    let side_budget = alpha_prime / 2.0;

    // The nominal initialization (alpha', 1 - alpha') self-intersects once
    // alpha' >= 0.5; fall back to a minimal central interval there so wide
    // alpha values (used by the multi-alpha density sweep) stay valid.
    let mut q_lower = alpha_prime.min(0.5 - delta_q).clamp(Q_FLOOR, Q_CEIL);
    let mut q_upper = (1.0 - alpha_prime).max(0.5 + delta_q).clamp(Q_FLOOR, Q_CEIL);
    if q_lower >= q_upper {
        return Err(Error::BoundsCollapse { q_lower, q_upper });
    }

    let mut dq_lower = delta_q;
    let mut dq_upper = delta_q;
    let mut prev_dir_lower: Option<i8> = None;
    let mut prev_dir_upper: Option<i8> = None;
    // No move has happened yet, which counts as "held": if the starting
    // bounds are already within every budget we stop immediately.
    let mut last_move_tightened_or_held = true;

    let mut cache = SideCache::new(model);
    let mut trace: Vec<TraceEntry> = Vec::new();

    for iteration in 1..=max_iters {
        let r_lower = cache.lower(calib, q_lower)?;
        let r_upper = cache.upper(calib, q_upper)?;
        let total = r_lower + r_upper;
        trace.push(TraceEntry {
            q_lower,
            q_upper,
            r_lower,
            r_upper,
        });

        let in_budget = total <= alpha_prime
            && r_lower <= side_budget + pixel_risk
            && r_upper <= side_budget + pixel_risk;
        let pinned = r_lower > side_budget - pixel_risk && r_upper > side_budget - pixel_risk;
        let decayed = dq_lower < DQ_MIN && dq_upper < DQ_MIN;
        if in_budget && (pinned || decayed || last_move_tightened_or_held) {
            return Ok(CalibrationResult {
                q_lower_star: q_lower,
                q_upper_star: q_upper,
                alpha,
                alpha_prime,
                achieved_risk: total,
                achieved_risk_lower: r_lower,
                achieved_risk_upper: r_upper,
                iterations: iteration,
                trace,
            });
        }
        if iteration == max_iters {
            break;
        }

        // +1 moves the level up, -1 down. Tightening the lower bound moves
        // it up; tightening the upper bound moves it down.
        let dir_lower: i8 = if r_lower <= side_budget { 1 } else { -1 };
        let dir_upper: i8 = if r_upper <= side_budget { -1 } else { 1 };
        if prev_dir_lower == Some(-dir_lower) {
            dq_lower *= 0.5;
        }
        if prev_dir_upper == Some(-dir_upper) {
            dq_upper *= 0.5;
        }
        let new_lower = (q_lower + dir_lower as f64 * dq_lower).clamp(Q_FLOOR, Q_CEIL);
        let new_upper = (q_upper + dir_upper as f64 * dq_upper).clamp(Q_FLOOR, Q_CEIL);
        let lower_tight_or_held = dir_lower == 1 || new_lower == q_lower;
        let upper_tight_or_held = dir_upper == -1 || new_upper == q_upper;
        last_move_tightened_or_held = lower_tight_or_held && upper_tight_or_held;
        q_lower = new_lower;
        q_upper = new_upper;
        if q_lower >= q_upper {
            return Err(Error::BoundsCollapse { q_lower, q_upper });
        }
        prev_dir_lower = Some(dir_lower);
        prev_dir_upper = Some(dir_upper);
    }

    let last = trace.last().expect("at least one iteration ran");
    Err(Error::CalibrationFailed {
        iterations: max_iters,
        achieved_risk: last.r_lower + last.r_upper,
        alpha_prime,
        trace,
    })
}

/// Query the model at `(q_lower, 0.5, q_upper)` and sort the triple per
/// pixel.
pub fn build_interval<M: QuantileRegressor>(
    model: &M,
    y: &Tensor,
    q_lower: f64,
    q_upper: f64,
) -> Result<UncertaintyMap> {
    check_bound_pair(q_lower, q_upper)?;
    let lower = model.predict(y, q_lower)?;
    let median = model.predict(y, 0.5)?;
    let upper = model.predict(y, q_upper)?;
    Ok(repair_triple(lower, median, upper))
}

/// Sort each pixel's (lower, median, upper) triple, counting pixels where
/// the order changed. Crossed quantiles are rare for a shared-weight model
/// and sorting preserves interval validity, so repair beats rejection.
pub fn repair_triple(lower: Tensor, median: Tensor, upper: Tensor) -> UncertaintyMap {
    let shape = lower.shape().to_vec();
    let mut lo = lower.into_data();
    let mut md = median.into_data();
    let mut up = upper.into_data();
    let mut repaired = 0usize;
    for i in 0..lo.len() {
        let (a, b, c) = (lo[i], md[i], up[i]);
        if a <= b && b <= c {
            continue;
        }
        let mut t = [a, b, c];
        t.sort_by(|x, y| x.partial_cmp(y).expect("finite values"));
        lo[i] = t[0];
        md[i] = t[1];
        up[i] = t[2];
        repaired += 1;
    }
    UncertaintyMap {
        repaired_pixels: repaired,
        lower: Tensor::new(shape.clone(), lo).expect("shape preserved"),
        median: Tensor::new(shape.clone(), md).expect("shape preserved"),
        upper: Tensor::new(shape, up).expect("shape preserved"),
    }
}

/// Build calibrated intervals for every sample of a split.
pub fn build_intervals<M: QuantileRegressor>(
    model: &M,
    set: &[PairedSample],
    q_lower: f64,
    q_upper: f64,
) -> Result<Vec<UncertaintyMap>> {
    check_bound_pair(q_lower, q_upper)?;
    let maps: Vec<Result<UncertaintyMap>> =
        par::map_slice(set, |s| build_interval(model, &s.y, q_lower, q_upper));
    maps.into_iter().collect()
}

/// Calibrate the constant-scaling comparator: intervals
/// `[m - lambda (m - l), m + lambda (u - m)]` around the fixed-quantile
/// queries `(l, m, u)`, with the smallest `lambda` whose risk meets the
/// adjusted budget found by bisection (risk is nonincreasing in lambda).
pub fn calibrate_baseline<M: QuantileRegressor>(
    model: &M,
    calib: &[PairedSample],
    alpha: f64,
    fixed_q_pair: (f64, f64),
) -> Result<BaselineCalibration> {
    if calib.is_empty() {
        return Err(Error::EmptyDataset("baseline calibration split is empty".into()));
    }
    let (q_lo, q_up) = fixed_q_pair;
    check_bound_pair(q_lo, q_up)?;
    let alpha_prime = adjust_alpha(alpha, calib.len())?;

    // Fixed queries, repaired once; lambda only rescales half-widths.
    let queried: Vec<Result<UncertaintyMap>> =
        par::map_slice(calib, |s| build_interval(model, &s.y, q_lo, q_up));
    let maps: Vec<UncertaintyMap> = queried.into_iter().collect::<Result<_>>()?;

    let risk_at = |lambda: f64| -> f64 {
        let mut acc = 0.0;
        for (map, sample) in maps.iter().zip(calib) {
            let m = map.median.data();
            let l = map.lower.data();
            let u = map.upper.data();
            let miscovered = sample
                .x
                .data()
                .iter()
                .enumerate()
                .filter(|(i, &v)| {
                    let lo = m[*i] - lambda * (m[*i] - l[*i]);
                    let up = m[*i] + lambda * (u[*i] - m[*i]);
                    v < lo || v > up
                })
                .count();
            acc += miscovered as f64 / sample.x.len() as f64;
        }
        acc / maps.len() as f64
    };

    const LAMBDA_MAX: f64 = 20.0;
    const TOL: f64 = 1e-4;
    let risk_max = risk_at(LAMBDA_MAX);
    if risk_max > alpha_prime {
        return Err(Error::BaselineFailed {
            risk: risk_max,
            alpha_prime,
            lambda_max: LAMBDA_MAX,
        });
    }
    let lambda_star = if risk_at(0.0) <= alpha_prime {
        0.0
    } else {
        // Invariant: risk(a) > alpha' >= risk(b).
        let (mut a, mut b) = (0.0, LAMBDA_MAX);
        while b - a > TOL {
            let mid = 0.5 * (a + b);
            if risk_at(mid) <= alpha_prime {
                b = mid;
            } else {
                a = mid;
            }
        }
        b
    };
    Ok(BaselineCalibration {
        lambda_star,
        fixed_q_lower: q_lo,
        fixed_q_upper: q_up,
        alpha,
        alpha_prime,
        achieved_risk: risk_at(lambda_star),
    })
}

/// Interval for one measurement under the calibrated baseline.
pub fn baseline_interval<M: QuantileRegressor>(
    model: &M,
    y: &Tensor,
    baseline: &BaselineCalibration,
) -> Result<UncertaintyMap> {
    let raw = build_interval(model, y, baseline.fixed_q_lower, baseline.fixed_q_upper)?;
    let lambda = baseline.lambda_star;
    let lower = raw
        .median
        .zip_with(&raw.lower, |m, l| m - lambda * (m - l))?;
    let upper = raw
        .median
        .zip_with(&raw.upper, |m, u| m + lambda * (u - m))?;
    Ok(UncertaintyMap {
        lower,
        median: raw.median,
        upper,
        repaired_pixels: raw.repaired_pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasim::ForwardModel;
    use crate::oracle::GaussianQuantileOracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Model returning a constant image regardless of q.
    struct ConstantOracle(f64);
    impl QuantileRegressor for ConstantOracle {
        fn predict(&self, y: &Tensor, _q: f64) -> Result<Tensor> {
            Ok(Tensor::filled(y.shape(), self.0))
        }
    }

    /// Model with a per-quantile constant lookup, for hand-built cases.
    struct PairOracle {
        low: f64,
        high: f64,
        split_at: f64,
    }
    impl QuantileRegressor for PairOracle {
        fn predict(&self, y: &Tensor, q: f64) -> Result<Tensor> {
            let v = if q < self.split_at { self.low } else { self.high };
            Ok(Tensor::filled(y.shape(), v))
        }
    }

    fn gaussian_calib_set(mu: f64, sigma: f64, n: usize, hw: usize, seed: u64) -> Vec<PairedSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let data: Vec<f64> = (0..hw * hw)
                    .map(|_| {
                        // Box-Muller keeps the draw independent of rand_distr.
                        let u1: f64 = rng.gen_range(1e-12..1.0);
                        let u2: f64 = rng.gen_range(0.0..1.0);
                        mu + sigma
                            * (-2.0 * u1.ln()).sqrt()
                            * (2.0 * std::f64::consts::PI * u2).cos()
                    })
                    .collect();
                PairedSample {
                    x: Tensor::new(vec![1, hw, hw], data).unwrap(),
                    y: Tensor::zeros(&[1, hw, hw]),
                    meta: ForwardModel::Gaussian { sigma },
                }
            })
            .collect()
    }

    #[test]
    fn empirical_risk_direct_cases() {
        let gt = vec![Tensor::new(vec![1, 2, 2], vec![0.1, 0.5, 0.9, 0.3]).unwrap()];
        let lower = vec![Tensor::filled(&[1, 2, 2], 0.0)];
        let upper = vec![Tensor::filled(&[1, 2, 2], 1.0)];
        assert_eq!(empirical_risk(&lower, &upper, &gt).unwrap(), 0.0);

        let lower = vec![Tensor::filled(&[1, 2, 2], 0.2)];
        let upper = vec![Tensor::filled(&[1, 2, 2], 0.8)];
        assert_eq!(empirical_risk(&lower, &upper, &gt).unwrap(), 0.5);

        let one = vec![Tensor::filled(&[1, 1, 1], 0.5)];
        let gt1 = vec![Tensor::filled(&[1, 1, 1], 0.7)];
        assert_eq!(empirical_risk(&one, &one, &gt1).unwrap(), 1.0);
    }

    #[test]
    fn one_sided_risks_direct_count() {
        // Three pixels 0.3 / 0.5 / 0.7 with constant bounds (0.4, 0.6):
        // one below, one above.
        let calib = vec![PairedSample {
            x: Tensor::new(vec![1, 1, 3], vec![0.3, 0.5, 0.7]).unwrap(),
            y: Tensor::zeros(&[1, 1, 3]),
            meta: ForwardModel::Gaussian { sigma: 0.0 },
        }];
        let oracle = PairOracle {
            low: 0.4,
            high: 0.6,
            split_at: 0.5,
        };
        let (rl, ru) = one_sided_risks(&oracle, &calib, 0.1, 0.9).unwrap();
        assert!((rl - 1.0 / 3.0).abs() < 1e-15);
        assert!((ru - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn one_sided_risks_degenerate_oracles() {
        let calib = gaussian_calib_set(0.5, 0.1, 4, 4, 1);
        let wide = PairOracle {
            low: -1.0,
            high: 2.0,
            split_at: 0.5,
        };
        let (rl, ru) = one_sided_risks(&wide, &calib, 0.1, 0.9).unwrap();
        assert_eq!((rl, ru), (0.0, 0.0));

        let above = ConstantOracle(10.0);
        let (rl, _) = one_sided_risks(&above, &calib, 0.1, 0.9).unwrap();
        assert_eq!(rl, 1.0);
    }

    #[test]
    fn risk_decomposition_matches_empirical_risk() {
        // Identity between the one-sided sum and the OR-form count, checked
        // against a brute-force per-pixel counting oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let hw = rng.gen_range(2..6usize);
            let n = rng.gen_range(1..4usize);
            let mut lowers = Vec::new();
            let mut uppers = Vec::new();
            let mut gts = Vec::new();
            let mut brute_total = 0.0;
            for _ in 0..n {
                let lo_v: f64 = rng.gen_range(-1.0..0.5);
                let up_v: f64 = lo_v + rng.gen_range(0.0..1.0);
                let gt: Vec<f64> = (0..hw * hw).map(|_| rng.gen_range(-1.5..1.5)).collect();
                let mut miss = 0usize;
                for &g in &gt {
                    if g < lo_v || g > up_v {
                        miss += 1;
                    }
                }
                brute_total += miss as f64 / (hw * hw) as f64;
                lowers.push(Tensor::filled(&[1, hw, hw], lo_v));
                uppers.push(Tensor::filled(&[1, hw, hw], up_v));
                gts.push(Tensor::new(vec![1, hw, hw], gt).unwrap());
            }
            let brute = brute_total / n as f64;
            let or_form = empirical_risk(&lowers, &uppers, &gts).unwrap();

            // One-sided sum computed directly from the same maps.
            let mut rl = 0.0;
            let mut ru = 0.0;
            for ((lo, up), gt) in lowers.iter().zip(&uppers).zip(&gts) {
                let below = gt
                    .data()
                    .iter()
                    .zip(lo.data())
                    .filter(|(&g, &l)| g < l)
                    .count();
                let above = gt
                    .data()
                    .iter()
                    .zip(up.data())
                    .filter(|(&g, &u)| g > u)
                    .count();
                rl += below as f64 / gt.len() as f64;
                ru += above as f64 / gt.len() as f64;
            }
            rl /= n as f64;
            ru /= n as f64;
            assert!((rl + ru - or_form).abs() < 1e-12);
            assert!((or_form - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn adjust_alpha_cases() {
        assert!((adjust_alpha(0.1, 100).unwrap() - 0.091).abs() < 1e-15);
        let near = adjust_alpha(0.1, 1_000_000).unwrap();
        assert!((near - 0.0999991).abs() < 1e-12);
        assert!(matches!(
            adjust_alpha(0.1, 9),
            Err(Error::CalibSetTooSmall { .. })
        ));
        assert!(adjust_alpha(0.0, 10).is_err());
        assert!(adjust_alpha(1.0, 10).is_err());
    }

    #[test]
    fn calibrate_gaussian_oracle_meets_budget() {
        let calib = gaussian_calib_set(0.5, 0.1, 100, 8, 3);
        let oracle = GaussianQuantileOracle { mu: 0.5, sigma: 0.1 };
        let res = calibrate(&oracle, &calib, 0.1, 0.002, 2000).unwrap();
        assert!(res.achieved_risk <= res.alpha_prime);
        assert!((res.alpha_prime - 0.091).abs() < 1e-12);
        assert!(res.iterations < 2000);
        assert_eq!(res.trace.len(), res.iterations);
        let pixel = 1.0 / (100.0 * 64.0);
        assert!(res.achieved_risk_lower <= res.alpha_prime / 2.0 + pixel);
        assert!(res.achieved_risk_upper <= res.alpha_prime / 2.0 + pixel);
        assert!(res.q_lower_star < res.q_upper_star);
    }

    #[test]
    fn wider_alpha_gives_narrower_level_pair() {
        let calib = gaussian_calib_set(0.5, 0.1, 100, 8, 4);
        let oracle = GaussianQuantileOracle { mu: 0.5, sigma: 0.1 };
        let tight = calibrate(&oracle, &calib, 0.1, 0.002, 2000).unwrap();
        let loose = calibrate(&oracle, &calib, 0.5, 0.002, 2000).unwrap();
        let width_tight = tight.q_upper_star - tight.q_lower_star;
        let width_loose = loose.q_upper_star - loose.q_lower_star;
        assert!(
            width_loose < width_tight,
            "alpha 0.5 width {} !< alpha 0.1 width {}",
            width_loose,
            width_tight
        );
    }

    #[test]
    fn calibrate_fails_on_zero_width_model() {
        // Constant prediction on continuous ground truth: zero-width
        // intervals cover a measure-zero set, so risk stays near 1.
        let calib = gaussian_calib_set(0.5, 0.2, 20, 4, 5);
        let oracle = ConstantOracle(0.5);
        let err = calibrate(&oracle, &calib, 0.1, 0.002, 50).unwrap_err();
        match err {
            Error::CalibrationFailed {
                iterations, trace, ..
            } => {
                assert_eq!(iterations, 50);
                assert_eq!(trace.len(), 50);
            }
            other => panic!("expected CalibrationFailed, got {:?}", other),
        }
    }

    #[test]
    fn build_interval_level_oracle() {
        let oracle = crate::oracle::LevelOracle;
        let y = Tensor::zeros(&[1, 4, 4]);
        let map = build_interval(&oracle, &y, 0.2, 0.8).unwrap();
        assert!(map.lower.data().iter().all(|&v| v == 0.2));
        assert!(map.median.data().iter().all(|&v| v == 0.5));
        assert!(map.upper.data().iter().all(|&v| v == 0.8));
        let len = map.interval_length();
        assert!(len.data().iter().all(|&v| (v - 0.6).abs() < 1e-15));
        assert_eq!(map.repaired_pixels, 0);
    }

    #[test]
    fn repair_sorts_and_counts() {
        let lower = Tensor::from_vec(vec![0.3, 0.1]);
        let median = Tensor::from_vec(vec![0.2, 0.2]);
        let upper = Tensor::from_vec(vec![0.5, 0.3]);
        let map = repair_triple(lower, median, upper);
        assert_eq!(map.lower.data(), &[0.2, 0.1]);
        assert_eq!(map.median.data(), &[0.3, 0.2]);
        assert_eq!(map.upper.data(), &[0.5, 0.3]);
        assert_eq!(map.repaired_pixels, 1);
        assert!(map.interval_length().data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn baseline_lambda_near_one_for_true_quantiles() {
        // The oracle's (0.05, 0.95) interval is an exact 90% interval; at
        // alpha = 0.1 (alpha' = 0.091 with n = 100) the calibrated scale
        // should be close to 1.
        let calib = gaussian_calib_set(0.5, 0.1, 100, 8, 6);
        let oracle = GaussianQuantileOracle { mu: 0.5, sigma: 0.1 };
        let res = calibrate_baseline(&oracle, &calib, 0.1, (0.05, 0.95)).unwrap();
        assert!(
            (0.9..=1.1).contains(&res.lambda_star),
            "lambda {}",
            res.lambda_star
        );
        assert!(res.achieved_risk <= res.alpha_prime);
    }

    #[test]
    fn baseline_lambda_identities() {
        let calib = gaussian_calib_set(0.5, 0.1, 30, 6, 7);
        let oracle = GaussianQuantileOracle { mu: 0.5, sigma: 0.1 };
        // lambda = 1 reproduces the raw fixed-quantile interval.
        let base = BaselineCalibration {
            lambda_star: 1.0,
            fixed_q_lower: 0.05,
            fixed_q_upper: 0.95,
            alpha: 0.1,
            alpha_prime: 0.091,
            achieved_risk: 0.0,
        };
        let y = &calib[0].y;
        let scaled = baseline_interval(&oracle, y, &base).unwrap();
        let raw = build_interval(&oracle, y, 0.05, 0.95).unwrap();
        assert_eq!(scaled.lower, raw.lower);
        assert_eq!(scaled.upper, raw.upper);

        // lambda = 0 degenerates to the median: risk ~ 1 on continuous gt.
        let degenerate = BaselineCalibration {
            lambda_star: 0.0,
            ..base
        };
        let map = baseline_interval(&oracle, y, &degenerate).unwrap();
        let gt = &calib[0].x;
        let miss = gt
            .data()
            .iter()
            .zip(map.lower.data().iter().zip(map.upper.data()))
            .filter(|(&v, (&l, &u))| v < l || v > u)
            .count();
        assert!(miss as f64 / gt.len() as f64 > 0.95);
    }

    #[test]
    fn baseline_risk_monotone_in_lambda() {
        let calib = gaussian_calib_set(0.5, 0.15, 20, 6, 8);
        let oracle = GaussianQuantileOracle { mu: 0.5, sigma: 0.15 };
        let maps: Vec<UncertaintyMap> = calib
            .iter()
            .map(|s| build_interval(&oracle, &s.y, 0.05, 0.95).unwrap())
            .collect();
        let risk_at = |lambda: f64| {
            let lowers: Vec<Tensor> = maps
                .iter()
                .map(|m| m.median.zip_with(&m.lower, |md, l| md - lambda * (md - l)).unwrap())
                .collect();
            let uppers: Vec<Tensor> = maps
                .iter()
                .map(|m| m.median.zip_with(&m.upper, |md, u| md + lambda * (u - md)).unwrap())
                .collect();
            let gts: Vec<Tensor> = calib.iter().map(|s| s.x.clone()).collect();
            empirical_risk(&lowers, &uppers, &gts).unwrap()
        };
        let mut prev = risk_at(0.0);
        for i in 1..=10 {
            let cur = risk_at(i as f64 * 0.2);
            assert!(cur <= prev + 1e-12, "risk rose at lambda {}", i as f64 * 0.2);
            prev = cur;
        }
    }
}
