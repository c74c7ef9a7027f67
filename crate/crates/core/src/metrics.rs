//! Evaluation statistics: test risk and interval length, intensity- and
//! size-stratified breakdowns, a quantile-crossing audit on raw sweeps,
//! and standard image quality metrics for the median prediction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conformal::{
    baseline_interval, build_intervals, BaselineCalibration, CalibrationResult, UncertaintyMap,
};
use crate::datasim::PairedSample;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::par;
use crate::qnet::QuantileRegressor;

/// Report schema version stamped into serialized evaluation output.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Bootstrap replicates for per-bin confidence intervals.
const BOOTSTRAP_REPLICATES: usize = 200;
const BOOTSTRAP_SEED: u64 = 0xb007;

/// Adjacent sweep values may differ by this much before a pixel counts as
/// crossed; guards against pure floating-point noise.
const CROSSING_EPS: f64 = 1e-9;

/// Mean and (population) standard deviation pair.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

/// Risk over images and interval length over pixels for a calibrated model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskLengthStats {
    pub risk: MeanStd,
    pub length: MeanStd,
}

/// Per-image miscoverage fractions for a set of interval maps.
pub fn per_image_risks(maps: &[UncertaintyMap], gt: &[&Tensor]) -> Result<Vec<f64>> {
    if maps.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} maps vs {} ground truth images",
            maps.len(),
            gt.len()
        )));
    }
    Ok(maps
        .iter()
        .zip(gt)
        .map(|(m, x)| {
            let miss = x
                .data()
                .iter()
                .zip(m.lower.data().iter().zip(m.upper.data()))
                .filter(|(&v, (&l, &u))| v < l || v > u)
                .count();
            miss as f64 / x.len() as f64
        })
        .collect())
}

/// Build intervals at the calibrated bounds and report risk (over images)
/// and interval length (over pixels), each as mean and standard deviation.
pub fn test_risk_and_length<M: QuantileRegressor>(
    model: &M,
    calibration: &CalibrationResult,
    test: &[PairedSample],
) -> Result<RiskLengthStats> {
    if test.is_empty() {
        return Err(Error::EmptyDataset("test split is empty".into()));
    }
    let maps = build_intervals(model, test, calibration.q_lower_star, calibration.q_upper_star)?;
    let gt: Vec<&Tensor> = test.iter().map(|s| &s.x).collect();
    risk_length_from_maps(&maps, &gt)
}

/// Stats from already-built interval maps.
pub fn risk_length_from_maps(maps: &[UncertaintyMap], gt: &[&Tensor]) -> Result<RiskLengthStats> {
    let risks = per_image_risks(maps, gt)?;
    let lengths: Vec<f64> = maps
        .iter()
        .flat_map(|m| m.interval_length().into_data())
        .collect();
    Ok(RiskLengthStats {
        risk: mean_std(&risks),
        length: mean_std(&lengths),
    })
}

/// One intensity bin: pixels whose ground-truth value lands in
/// `[lo, hi)` (the last bin includes its upper edge).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntensityBin {
    pub lo: f64,
    pub hi: f64,
    pub mean_length: f64,
    /// Percentile bootstrap 95% interval over images.
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub pixel_count: usize,
}

/// Mean interval length per ground-truth intensity bin (equal-width bins
/// on [0, 1]), with a bootstrap confidence interval over images. Empty
/// bins are omitted.
pub fn intensity_stratified_lengths(
    gt_maps: &[&Tensor],
    length_maps: &[&Tensor],
    n_bins: usize,
) -> Result<Vec<IntensityBin>> {
    if n_bins < 2 {
        return Err(Error::Usage("need at least 2 intensity bins".into()));
    }
    if gt_maps.len() != length_maps.len() || gt_maps.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} gt maps vs {} length maps",
            gt_maps.len(),
            length_maps.len()
        )));
    }
    let bin_of = |v: f64| -> usize {
        let idx = (v * n_bins as f64).floor() as usize;
        idx.min(n_bins - 1)
    };
    // Per image, per bin: (sum of lengths, count).
    let n_images = gt_maps.len();
    let mut sums = vec![vec![0.0f64; n_bins]; n_images];
    let mut counts = vec![vec![0usize; n_bins]; n_images];
    for (img, (gt, len)) in gt_maps.iter().zip(length_maps).enumerate() {
        if !gt.same_shape(len) {
            return Err(Error::ShapeMismatch(format!(
                "gt {:?} vs lengths {:?}",
                gt.shape(),
                len.shape()
            )));
        }
        for (&v, &l) in gt.data().iter().zip(len.data()) {
            let b = bin_of(v);
            sums[img][b] += l;
            counts[img][b] += 1;
        }
    }

    let bin_mean = |images: &[usize], b: usize| -> Option<f64> {
        let mut s = 0.0;
        let mut c = 0usize;
        for &img in images {
            s += sums[img][b];
            c += counts[img][b];
        }
        (c > 0).then(|| s / c as f64)
    };

    let all: Vec<usize> = (0..n_images).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(BOOTSTRAP_SEED);
    let resamples: Vec<Vec<usize>> = (0..BOOTSTRAP_REPLICATES)
        .map(|_| (0..n_images).map(|_| rng.gen_range(0..n_images)).collect())
        .collect();

    let mut out = Vec::new();
    for b in 0..n_bins {
        let total_count: usize = (0..n_images).map(|i| counts[i][b]).sum();
        if total_count == 0 {
            continue;
        }
        let mean = bin_mean(&all, b).expect("nonzero count");
        let mut replicate_means: Vec<f64> = resamples
            .iter()
            .filter_map(|imgs| bin_mean(imgs, b))
            .collect();
        replicate_means.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (ci_lo, ci_hi) = if replicate_means.is_empty() {
            (mean, mean)
        } else {
            let lo_idx = ((replicate_means.len() as f64) * 0.025).floor() as usize;
            let hi_idx = (((replicate_means.len() as f64) * 0.975).ceil() as usize)
                .saturating_sub(1)
                .min(replicate_means.len() - 1);
            (replicate_means[lo_idx], replicate_means[hi_idx])
        };
        out.push(IntensityBin {
            lo: b as f64 / n_bins as f64,
            hi: (b + 1) as f64 / n_bins as f64,
            mean_length: mean,
            ci_lo,
            ci_hi,
            pixel_count: total_count,
        });
    }
    Ok(out)
}

/// One interval-size bin (equal-count bins over pooled pixels).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SsrBin {
    pub bin_index: usize,
    pub length_min: f64,
    pub length_max: f64,
    pub risk: f64,
    pub pixel_count: usize,
}

/// Size-stratified risk: pool all pixels, order them by interval length,
/// cut into `n_bins` near-equal-count bins, and report the miscoverage
/// fraction inside each. Equal-count bins are used because equal-width
/// bins go empty at desk scale.
pub fn size_stratified_risk(
    length_maps: &[&Tensor],
    lower: &[&Tensor],
    upper: &[&Tensor],
    gt: &[&Tensor],
    n_bins: usize,
) -> Result<Vec<SsrBin>> {
    if n_bins < 2 {
        return Err(Error::Usage("need at least 2 size bins".into()));
    }
    let n = length_maps.len();
    if lower.len() != n || upper.len() != n || gt.len() != n || n == 0 {
        return Err(Error::ShapeMismatch(
            "size_stratified_risk: map counts differ".into(),
        ));
    }
    // (length, miscovered) per pixel, pooled.
    let mut pixels: Vec<(f64, bool)> = Vec::new();
    for i in 0..n {
        for (((&len, &lo), &up), &x) in length_maps[i]
            .data()
            .iter()
            .zip(lower[i].data())
            .zip(upper[i].data())
            .zip(gt[i].data())
        {
            pixels.push((len, x < lo || x > up));
        }
    }
    pixels.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite lengths"));
    let total = pixels.len();
    let base = total / n_bins;
    let extra = total % n_bins;
    let mut out = Vec::with_capacity(n_bins);
    let mut start = 0usize;
    for b in 0..n_bins {
        let size = base + usize::from(b < extra);
        if size == 0 {
            continue;
        }
        let chunk = &pixels[start..start + size];
        let miss = chunk.iter().filter(|(_, m)| *m).count();
        out.push(SsrBin {
            bin_index: b,
            length_min: chunk.first().unwrap().0,
            length_max: chunk.last().unwrap().0,
            risk: miss as f64 / size as f64,
            pixel_count: size,
        });
        start += size;
    }
    Ok(out)
}

/// Pixel-count-weighted mean of the per-bin risks; equals the pooled
/// pixel-level risk by construction.
pub fn ssr_weighted_risk(bins: &[SsrBin]) -> f64 {
    let total: usize = bins.iter().map(|b| b.pixel_count).sum();
    if total == 0 {
        return 0.0;
    }
    bins.iter()
        .map(|b| b.risk * b.pixel_count as f64)
        .sum::<f64>()
        / total as f64
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CrossingAudit {
    pub crossed_pixels: u64,
    pub total_pixels: u64,
    pub fraction: f64,
}

/// Default audit levels.
pub fn default_crossing_levels() -> Vec<f64> {
    let mut q: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    q.push(0.99);
    q
}

/// Count pixels whose raw (unrepaired) sweep violates ordering between any
/// adjacent pair of levels. Repair would hide the phenomenon, so this runs
/// on raw predictions.
pub fn crossing_audit<M: QuantileRegressor>(
    model: &M,
    test: &[PairedSample],
    q_list: &[f64],
) -> Result<CrossingAudit> {
    if q_list.len() < 2 {
        return Err(Error::Usage("crossing audit needs at least 2 levels".into()));
    }
    for pair in q_list.windows(2) {
        if !(pair[0] < pair[1]) {
            return Err(Error::Usage(format!(
                "crossing levels must ascend at {:?}",
                pair
            )));
        }
    }
    let per_image: Vec<Result<(u64, u64)>> = par::map_slice(test, |s| {
        let preds: Vec<Tensor> = q_list
            .iter()
            .map(|&q| model.predict(&s.y, q))
            .collect::<Result<_>>()?;
        let k = s.y.len();
        let mut crossed = 0u64;
        for px in 0..k {
            let any = preds
                .windows(2)
                .any(|pair| pair[0].data()[px] > pair[1].data()[px] + CROSSING_EPS);
            if any {
                crossed += 1;
            }
        }
        Ok((crossed, k as u64))
    });
    let mut crossed = 0u64;
    let mut total = 0u64;
    for r in per_image {
        let (c, t) = r?;
        crossed += c;
        total += t;
    }
    Ok(CrossingAudit {
        crossed_pixels: crossed,
        total_pixels: total,
        fraction: if total == 0 {
            0.0
        } else {
            crossed as f64 / total as f64
        },
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ImageQuality {
    pub mse: f64,
    /// `10 log10(1 / mse)` for unit data range; infinite when mse is 0.
    pub psnr: f64,
    pub ssim: f64,
}

/// MSE, PSNR (data range 1.0), and SSIM with a 7x7 Gaussian window of
/// sigma 1.5 and the usual K1 = 0.01, K2 = 0.03 constants.
pub fn image_quality(x_hat: &Tensor, x: &Tensor) -> Result<ImageQuality> {
    if !x_hat.same_shape(x) {
        return Err(Error::ShapeMismatch(format!(
            "image_quality: {:?} vs {:?}",
            x_hat.shape(),
            x.shape()
        )));
    }
    let mse = x_hat
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    let psnr = if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    };
    let ssim = ssim_7x7(x_hat, x)?;
    Ok(ImageQuality { mse, psnr, ssim })
}

fn ssim_7x7(a: &Tensor, b: &Tensor) -> Result<f64> {
    const WIN: usize = 7;
    const SIGMA: f64 = 1.5;
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let (_, h, w) = a.dims3()?;
    if h < WIN || w < WIN {
        return Err(Error::Usage(format!(
            "ssim needs at least {}x{} images, got {}x{}",
            WIN, WIN, h, w
        )));
    }
    // Normalized Gaussian window.
    let mut weights = [[0.0f64; WIN]; WIN];
    let mut norm = 0.0;
    for (i, row) in weights.iter_mut().enumerate() {
        for (j, wgt) in row.iter_mut().enumerate() {
            let dy = i as f64 - (WIN as f64 - 1.0) / 2.0;
            let dx = j as f64 - (WIN as f64 - 1.0) / 2.0;
            *wgt = (-(dy * dy + dx * dx) / (2.0 * SIGMA * SIGMA)).exp();
            norm += *wgt;
        }
    }
    for row in &mut weights {
        for wgt in row.iter_mut() {
            *wgt /= norm;
        }
    }

    let ad = a.data();
    let bd = b.data();
    let mut acc = 0.0;
    let mut windows = 0usize;
    for y0 in 0..=(h - WIN) {
        for x0 in 0..=(w - WIN) {
            let (mut mu_a, mut mu_b) = (0.0, 0.0);
            for (i, row) in weights.iter().enumerate() {
                for (j, &wgt) in row.iter().enumerate() {
                    let idx = (y0 + i) * w + (x0 + j);
                    mu_a += wgt * ad[idx];
                    mu_b += wgt * bd[idx];
                }
            }
            let (mut var_a, mut var_b, mut cov) = (0.0, 0.0, 0.0);
            for (i, row) in weights.iter().enumerate() {
                for (j, &wgt) in row.iter().enumerate() {
                    let idx = (y0 + i) * w + (x0 + j);
                    let da = ad[idx] - mu_a;
                    let db = bd[idx] - mu_b;
                    var_a += wgt * da * da;
                    var_b += wgt * db * db;
                    cov += wgt * da * db;
                }
            }
            acc += ((2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2))
                / ((mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2));
            windows += 1;
        }
    }
    Ok(acc / windows as f64)
}

/// Interval-length comparison against the constant-scaling baseline at the
/// same miscoverage budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineComparison {
    pub alpha: f64,
    pub lambda_star: f64,
    pub calibrated_length_mean: f64,
    pub baseline_length_mean: f64,
    pub calibrated_risk_mean: f64,
    pub baseline_risk_mean: f64,
}

/// Full evaluation report; serialized as JSON by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub alpha: f64,
    pub q_lower_star: f64,
    pub q_upper_star: f64,
    pub total_risk: MeanStd,
    pub interval_length: MeanStd,
    /// Pixel-weighted mean of the size-stratified bin risks; must equal
    /// the pooled pixel risk.
    pub ssr_weighted_risk: f64,
    pub intensity_bins: Vec<IntensityBin>,
    pub ssr_bins: Vec<SsrBin>,
    pub crossing: CrossingAudit,
    pub median_mse: f64,
    pub median_psnr: f64,
    pub median_ssim: f64,
    pub baseline: Option<BaselineComparison>,
}

/// Evaluate a calibrated model over a test split.
pub fn evaluate<M: QuantileRegressor>(
    model: &M,
    calibration: &CalibrationResult,
    baseline: Option<&BaselineCalibration>,
    test: &[PairedSample],
    crossing_levels: &[f64],
    intensity_bins: usize,
    ssr_bins: usize,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::EmptyDataset("test split is empty".into()));
    }
    let maps = build_intervals(model, test, calibration.q_lower_star, calibration.q_upper_star)?;
    let gt: Vec<&Tensor> = test.iter().map(|s| &s.x).collect();
    let stats = risk_length_from_maps(&maps, &gt)?;

    let lengths: Vec<Tensor> = maps.iter().map(|m| m.interval_length()).collect();
    let length_refs: Vec<&Tensor> = lengths.iter().collect();
    let lowers: Vec<&Tensor> = maps.iter().map(|m| &m.lower).collect();
    let uppers: Vec<&Tensor> = maps.iter().map(|m| &m.upper).collect();
    let bins = intensity_stratified_lengths(&gt, &length_refs, intensity_bins)?;
    let ssr = size_stratified_risk(&length_refs, &lowers, &uppers, &gt, ssr_bins)?;
    let crossing = crossing_audit(model, test, crossing_levels)?;

    let quality: Vec<Result<ImageQuality>> =
        par::map_slice(test, |s| image_quality(&model.predict(&s.y, 0.5)?, &s.x));
    let mut mse = 0.0;
    let mut psnr = 0.0;
    let mut ssim = 0.0;
    for q in &quality {
        let q = q.as_ref().map_err(|e| Error::Usage(e.to_string()))?;
        mse += q.mse;
        psnr += q.psnr;
        ssim += q.ssim;
    }
    let n = test.len() as f64;

    let baseline_cmp = match baseline {
        None => None,
        Some(bc) => {
            let bmaps: Vec<UncertaintyMap> = {
                let res: Vec<Result<UncertaintyMap>> =
                    par::map_slice(test, |s| baseline_interval(model, &s.y, bc));
                res.into_iter().collect::<Result<_>>()?
            };
            let bstats = risk_length_from_maps(&bmaps, &gt)?;
            Some(BaselineComparison {
                alpha: bc.alpha,
                lambda_star: bc.lambda_star,
                calibrated_length_mean: stats.length.mean,
                baseline_length_mean: bstats.length.mean,
                calibrated_risk_mean: stats.risk.mean,
                baseline_risk_mean: bstats.risk.mean,
            })
        }
    };

    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        alpha: calibration.alpha,
        q_lower_star: calibration.q_lower_star,
        q_upper_star: calibration.q_upper_star,
        total_risk: stats.risk,
        interval_length: stats.length,
        ssr_weighted_risk: ssr_weighted_risk(&ssr),
        intensity_bins: bins,
        ssr_bins: ssr,
        crossing,
        median_mse: mse / n,
        median_psnr: psnr / n,
        median_ssim: ssim / n,
        baseline: baseline_cmp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasim::{gen_phantom, ForwardModel};
    use crate::oracle::LevelOracle;

    fn map_with(lower: f64, upper: f64, hw: usize) -> UncertaintyMap {
        UncertaintyMap {
            lower: Tensor::filled(&[1, hw, hw], lower),
            median: Tensor::filled(&[1, hw, hw], 0.5 * (lower + upper)),
            upper: Tensor::filled(&[1, hw, hw], upper),
            repaired_pixels: 0,
        }
    }

    #[test]
    fn risk_stats_direct() {
        // Two 2x2 images with miscoverage 0.25 and 0.75.
        let gt1 = Tensor::new(vec![1, 2, 2], vec![0.5, 0.5, 0.5, 2.0]).unwrap();
        let gt2 = Tensor::new(vec![1, 2, 2], vec![2.0, 2.0, 2.0, 0.5]).unwrap();
        let maps = vec![map_with(0.0, 1.0, 2), map_with(0.0, 1.0, 2)];
        let gt = vec![&gt1, &gt2];
        let stats = risk_length_from_maps(&maps, &gt).unwrap();
        assert!((stats.risk.mean - 0.5).abs() < 1e-15);
        assert!((stats.risk.std - 0.25).abs() < 1e-15);
        assert!((stats.length.mean - 1.0).abs() < 1e-15);
        assert_eq!(stats.length.std, 0.0);
    }

    #[test]
    fn full_coverage_zero_risk() {
        let gt1 = gen_phantom(1, 16, 16);
        let maps = vec![map_with(-0.1, 1.1, 16)];
        let stats = risk_length_from_maps(&maps, &[&gt1]).unwrap();
        assert_eq!(stats.risk.mean, 0.0);
        assert_eq!(stats.risk.std, 0.0);
    }

    #[test]
    fn intensity_bins_ascend_when_length_equals_intensity() {
        let gt = gen_phantom(2, 32, 32);
        let lengths = gt.clone();
        let bins = intensity_stratified_lengths(&[&gt], &[&lengths], 10).unwrap();
        assert!(bins.len() >= 2);
        for pair in bins.windows(2) {
            assert!(pair[0].mean_length < pair[1].mean_length);
        }
    }

    #[test]
    fn intensity_bins_uniform_lengths_are_flat() {
        let gt = gen_phantom(3, 32, 32);
        let lengths = Tensor::filled(&[1, 32, 32], 0.2);
        let bins = intensity_stratified_lengths(&[&gt], &[&lengths], 10).unwrap();
        for b in &bins {
            assert!((b.mean_length - 0.2).abs() < 1e-15);
            assert!(b.ci_lo <= b.mean_length && b.mean_length <= b.ci_hi);
        }
    }

    #[test]
    fn intensity_two_bin_toy() {
        let gt = Tensor::new(vec![1, 2, 2], vec![0.1, 0.2, 0.7, 0.9]).unwrap();
        let lengths = Tensor::new(vec![1, 2, 2], vec![0.1, 0.1, 0.3, 0.3]).unwrap();
        let bins = intensity_stratified_lengths(&[&gt], &[&lengths], 2).unwrap();
        assert_eq!(bins.len(), 2);
        assert!((bins[0].mean_length - 0.1).abs() < 1e-15);
        assert!((bins[1].mean_length - 0.3).abs() < 1e-15);
    }

    #[test]
    fn ssr_weighted_mean_reconstructs_total() {
        let gt = gen_phantom(5, 16, 16);
        let lower = gt.map(|v| v - 0.05);
        let upper = gt.map(|v| v + (v - 0.4).abs());
        let lengths = upper.zip_with(&lower, |u, l| u - l).unwrap();
        let bins =
            size_stratified_risk(&[&lengths], &[&lower], &[&upper], &[&gt], 5).unwrap();
        let weighted = ssr_weighted_risk(&bins);
        // Pooled pixel risk computed directly.
        let miss = gt
            .data()
            .iter()
            .zip(lower.data().iter().zip(upper.data()))
            .filter(|(&v, (&l, &u))| v < l || v > u)
            .count();
        let pooled = miss as f64 / gt.len() as f64;
        assert!((weighted - pooled).abs() < 1e-12);
    }

    #[test]
    fn ssr_perfect_coverage_all_zero() {
        let gt = gen_phantom(6, 16, 16);
        let lower = Tensor::filled(&[1, 16, 16], -0.1);
        let upper = Tensor::filled(&[1, 16, 16], 1.1);
        let lengths = upper.zip_with(&lower, |u, l| u - l).unwrap();
        let bins = size_stratified_risk(&[&lengths], &[&lower], &[&upper], &[&gt], 4).unwrap();
        assert!(bins.iter().all(|b| b.risk == 0.0));
    }

    #[test]
    fn ssr_miscoverage_only_in_widest_bin() {
        // Lengths 0..n ascending; only the widest quarter miscovered.
        let n = 16;
        let gt = Tensor::new(vec![1, 1, n], vec![0.5; n]).unwrap();
        let lengths = Tensor::new(vec![1, 1, n], (0..n).map(|i| i as f64).collect()).unwrap();
        let mut lo = vec![0.0; n];
        let up = vec![1.0; n];
        for slot in lo.iter_mut().skip(12) {
            *slot = 0.8; // lower bound above gt for the last (widest) pixels
        }
        let lower = Tensor::new(vec![1, 1, n], lo).unwrap();
        let upper = Tensor::new(vec![1, 1, n], up).unwrap();
        let bins = size_stratified_risk(&[&lengths], &[&lower], &[&upper], &[&gt], 4).unwrap();
        assert_eq!(bins.len(), 4);
        assert!(bins[..3].iter().all(|b| b.risk == 0.0));
        assert!((bins[3].risk - 1.0).abs() < 1e-15);
    }

    struct NegatedLevelOracle;
    impl QuantileRegressor for NegatedLevelOracle {
        fn predict(&self, y: &Tensor, q: f64) -> crate::error::Result<Tensor> {
            crate::training::check_quantile_level(q)?;
            Ok(Tensor::filled(y.shape(), -q))
        }
    }

    #[test]
    fn crossing_audit_extremes() {
        let set = vec![PairedSample {
            x: gen_phantom(7, 16, 16),
            y: gen_phantom(7, 16, 16),
            meta: ForwardModel::Gaussian { sigma: 0.0 },
        }];
        let levels = default_crossing_levels();
        let clean = crossing_audit(&LevelOracle, &set, &levels).unwrap();
        assert_eq!(clean.crossed_pixels, 0);
        assert_eq!(clean.fraction, 0.0);
        assert_eq!(clean.total_pixels, 256);

        let crossed = crossing_audit(&NegatedLevelOracle, &set, &levels).unwrap();
        assert_eq!(crossed.crossed_pixels, 256);
        assert_eq!(crossed.fraction, 1.0);
    }

    #[test]
    fn image_quality_identities() {
        let x = gen_phantom(8, 16, 16);
        let q = image_quality(&x, &x).unwrap();
        assert_eq!(q.mse, 0.0);
        assert!(q.psnr.is_infinite());
        assert!((q.ssim - 1.0).abs() < 1e-12);

        let shifted = x.map(|v| v + 0.1);
        let q = image_quality(&shifted, &x).unwrap();
        assert!((q.mse - 0.01).abs() < 1e-12);
        assert!((q.psnr - 20.0).abs() < 1e-9);
        // PSNR identity holds for every report.
        assert!((q.psnr - 10.0 * (1.0 / q.mse).log10()).abs() < 1e-12);
    }

    #[test]
    fn ssim_prefers_blur_over_noise() {
        let x = gen_phantom(9, 32, 32);
        // Light blur: 3x3 box filter via the conv module.
        let kernel = Tensor::new(vec![1, 1, 3, 3], vec![1.0 / 9.0; 9]).unwrap();
        let blurred = crate::numerics::conv2d(&x, &kernel, 1).unwrap();
        // Independent noise image with matched range.
        let noise = gen_phantom(1234, 32, 32);
        let ssim_blur = image_quality(&blurred, &x).unwrap().ssim;
        let ssim_noise = image_quality(&noise, &x).unwrap().ssim;
        assert!(
            ssim_blur > ssim_noise,
            "blur {} vs noise {}",
            ssim_blur,
            ssim_noise
        );
    }
}
