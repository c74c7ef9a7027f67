//! Synthetic paired datasets for imaging inverse problems.
//!
//! Phantoms are deterministic composites of ellipses, bars, and smooth
//! gradients. Measurements come from three forward models: additive
//! Gaussian noise, scaled Poisson counts, and column-masked k-space
//! undersampling. Tensor files and the dataset manifest defined here are
//! the on-disk interchange format for the CLI pipeline.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const TENSOR_MAGIC: &[u8; 4] = b"QTNS";
const TENSOR_VERSION: u32 = 1;

/// Forward model label and parameters attached to each sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ForwardModel {
    Gaussian { sigma: f64 },
    Poisson { lambda: f64 },
    KspaceUndersample { acceleration: f64 },
}

impl ForwardModel {
    pub fn label(&self) -> &'static str {
        match self {
            ForwardModel::Gaussian { .. } => "gaussian",
            ForwardModel::Poisson { .. } => "poisson",
            ForwardModel::KspaceUndersample { .. } => "mri-undersample",
        }
    }

    /// The scalar parameter recorded in the manifest.
    pub fn param(&self) -> f64 {
        match *self {
            ForwardModel::Gaussian { sigma } => sigma,
            ForwardModel::Poisson { lambda } => lambda,
            ForwardModel::KspaceUndersample { acceleration } => acceleration,
        }
    }
}

/// Ground truth and measurement pair; both `[1, H, W]` in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub x: Tensor,
    pub y: Tensor,
    pub meta: ForwardModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Calibration,
    Validation,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Calibration => "calibration",
            Split::Validation => "validation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "calibration" => Ok(Split::Calibration),
            "validation" => Ok(Split::Validation),
            other => Err(Error::Format(format!("unknown split label {:?}", other))),
        }
    }
}

/// Samples plus their split labels.
#[derive(Debug, Clone, Default)]
pub struct PairedDataset {
    pub samples: Vec<PairedSample>,
    pub split_of: Vec<Split>,
}

impl PairedDataset {
    pub fn subset(&self, split: Split) -> Vec<&PairedSample> {
        self.samples
            .iter()
            .zip(&self.split_of)
            .filter(|(_, &s)| s == split)
            .map(|(sample, _)| sample)
            .collect()
    }

    /// Owned clones of one split, in manifest order.
    pub fn subset_cloned(&self, split: Split) -> Vec<PairedSample> {
        self.subset(split).into_iter().cloned().collect()
    }
}

/// Split fractions (train, calibration, validation) and the shuffle seed.
#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub fractions: (f64, f64, f64),
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub calibration: Vec<usize>,
    pub validation: Vec<usize>,
}

fn fill_ellipse(img: &mut [f64], h: usize, w: usize, cy: f64, cx: f64, ry: f64, rx: f64, v: f64) {
    for r in 0..h {
        for c in 0..w {
            let dy = (r as f64 - cy) / ry;
            let dx = (c as f64 - cx) / rx;
            if dy * dy + dx * dx <= 1.0 {
                img[r * w + c] = v;
            }
        }
    }
}

fn fill_rect(img: &mut [f64], w: usize, r0: usize, r1: usize, c0: usize, c1: usize, v: f64) {
    for r in r0..r1 {
        for c in c0..c1 {
            img[r * w + c] = v;
        }
    }
}

/// Deterministic synthetic phantom in `[0, 1]` with guaranteed intensity
/// tails: at least 10% of pixels above 0.8 (a large bright ellipse in the
/// left half) and at least 10% below 0.2 (a large dark rectangle in the
/// right half), so intensity-stratified evaluation always has both ends
/// populated.
pub fn gen_phantom(seed: u64, h: usize, w: usize) -> Tensor {
    assert!(h >= 16 && w >= 16, "phantom needs at least 16x16, got {}x{}", h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1));
    let mut img = vec![0.0f64; h * w];

    // Smooth background gradient spanning roughly [0.05, 0.5].
    let g0 = rng.gen_range(0.04..0.10);
    let span = rng.gen_range(0.25..0.45);
    let mix = rng.gen_range(0.0..1.0);
    for r in 0..h {
        for c in 0..w {
            let rn = r as f64 / (h - 1) as f64;
            let cn = c as f64 / (w - 1) as f64;
            img[r * w + c] = g0 + span * (mix * rn + (1.0 - mix) * cn);
        }
    }

    // A few random mid/high intensity ellipses.
    for _ in 0..rng.gen_range(2..=4usize) {
        let cy = rng.gen_range(0.15..0.85) * h as f64;
        let cx = rng.gen_range(0.15..0.85) * w as f64;
        let ry = rng.gen_range(0.06..0.22) * h as f64;
        let rx = rng.gen_range(0.06..0.22) * w as f64;
        let v = rng.gen_range(0.45..0.95);
        fill_ellipse(&mut img, h, w, cy, cx, ry, rx, v);
    }

    // One horizontal or vertical bar.
    let v = rng.gen_range(0.55..1.0);
    if rng.gen_bool(0.5) {
        let r0 = rng.gen_range(0..h - h / 8);
        fill_rect(&mut img, w, r0, r0 + h / 8, 0, w, v);
    } else {
        let c0 = rng.gen_range(0..w - w / 8);
        fill_rect(&mut img, w, 0, h, c0, c0 + w / 8, v);
    }

    // Guaranteed bright tail: ellipse in the left half, area >= 13% of the
    // image, painted over everything beneath it.
    let bright = rng.gen_range(0.85..0.98);
    let cy = (0.48 + rng.gen_range(-0.02..0.02)) * h as f64;
    let cx = (0.25 + rng.gen_range(-0.02..0.02)) * w as f64;
    fill_ellipse(&mut img, h, w, cy, cx, 0.28 * h as f64, 0.17 * w as f64, bright);

    // Guaranteed dark tail: rectangle in the right half, area >= 13%.
    let dark = rng.gen_range(0.02..0.12);
    let r0 = (0.30 * h as f64) as usize;
    let r1 = (0.72 * h as f64) as usize;
    let c0 = (0.58 * w as f64) as usize;
    let c1 = (0.95 * w as f64) as usize;
    fill_rect(&mut img, w, r0, r1, c0, c1, dark);

    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(vec![1, h, w], img).expect("shape/data agree")
}

/// Additive Gaussian noise with a per-image level drawn uniformly from
/// `[0, sigma_max]`; the noisy image is clamped back to `[0, 1]`. Returns
/// the drawn level for stratified evaluation.
pub fn add_gaussian_noise<R: Rng>(x: &Tensor, sigma_max: f64, rng: &mut R) -> (Tensor, f64) {
    assert!(sigma_max >= 0.0, "sigma_max must be nonnegative");
    let sigma = if sigma_max > 0.0 {
        rng.gen_range(0.0..sigma_max)
    } else {
        0.0
    };
    let y = add_gaussian_noise_fixed(x, sigma, rng);
    (y, sigma)
}

/// Gaussian noise at a fixed level; clamped to `[0, 1]`.
pub fn add_gaussian_noise_fixed<R: Rng>(x: &Tensor, sigma: f64, rng: &mut R) -> Tensor {
    if sigma == 0.0 {
        return x.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma >= 0");
    x.map(|v| (v + normal.sample(rng)).clamp(0.0, 1.0))
}

/// Poisson counting noise: the image is scaled by a level drawn uniformly
/// from `[lambda_min, lambda_max]`, counts are drawn pixel-wise, and the
/// counts are divided back by the level before clamping so that the
/// expectation of the measurement matches the clean image.
pub fn add_poisson_noise<R: Rng>(
    x: &Tensor,
    lambda_min: f64,
    lambda_max: f64,
    rng: &mut R,
) -> Result<(Tensor, f64)> {
    if !(0.0 < lambda_min && lambda_min <= lambda_max) {
        return Err(Error::Domain(format!(
            "poisson levels must satisfy 0 < min <= max, got ({}, {})",
            lambda_min, lambda_max
        )));
    }
    let lambda = if lambda_min == lambda_max {
        lambda_min
    } else {
        rng.gen_range(lambda_min..lambda_max)
    };
    let mut data = Vec::with_capacity(x.len());
    for &v in x.data() {
        let mean = lambda * v;
        let count = if mean > 0.0 {
            Poisson::new(mean)
                .map_err(|e| Error::Domain(format!("poisson mean {}: {}", mean, e)))?
                .sample(rng)
        } else {
            0.0
        };
        data.push((count / lambda).clamp(0.0, 1.0));
    }
    Ok((Tensor::new(x.shape().to_vec(), data)?, lambda))
}

fn dft2(input: &[Complex64], h: usize, w: usize, inverse: bool) -> Vec<Complex64> {
    let sign = if inverse { 1.0 } else { -1.0 };
    let twiddle = |n: usize, k: usize, j: usize| -> Complex64 {
        let angle = sign * 2.0 * std::f64::consts::PI * (k * j % n) as f64 / n as f64;
        Complex64::new(angle.cos(), angle.sin())
    };
    // Rows, then columns.
    let mut rows = vec![Complex64::new(0.0, 0.0); h * w];
    for r in 0..h {
        for k in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for j in 0..w {
                acc += input[r * w + j] * twiddle(w, k, j);
            }
            rows[r * w + k] = acc;
        }
    }
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for c in 0..w {
        for k in 0..h {
            let mut acc = Complex64::new(0.0, 0.0);
            for j in 0..h {
                acc += rows[j * w + c] * twiddle(h, k, j);
            }
            out[k * w + c] = acc;
        }
    }
    if inverse {
        let norm = 1.0 / (h * w) as f64;
        for v in &mut out {
            *v *= norm;
        }
    }
    out
}

/// Column indices retained by the undersampling mask: the full central
/// low-frequency band covering `center_fraction` of columns, plus a random
/// subset of the remaining columns, for a total of about
/// `ceil(W / acceleration)`.
pub fn kspace_column_mask(
    w: usize,
    acceleration: f64,
    center_fraction: f64,
    mask_seed: u64,
) -> Result<Vec<bool>> {
    if acceleration < 1.0 {
        return Err(Error::Domain(format!(
            "acceleration {} must be >= 1",
            acceleration
        )));
    }
    if !(0.0..1.0).contains(&center_fraction) {
        return Err(Error::Domain(format!(
            "center_fraction {} must lie in [0, 1)",
            center_fraction
        )));
    }
    let total = (w as f64 / acceleration).ceil() as usize;
    let total = total.clamp(1, w);
    let n_center = ((center_fraction * w as f64).round() as usize).min(total);

    // Distance from DC in unshifted DFT coordinates; the center band is the
    // n_center columns closest to zero frequency.
    let mut by_distance: Vec<usize> = (0..w).collect();
    by_distance.sort_by_key(|&c| (c.min(w - c), c));
    let mut mask = vec![false; w];
    for &c in by_distance.iter().take(n_center) {
        mask[c] = true;
    }

    let mut rest: Vec<usize> = by_distance[n_center..].to_vec();
    rest.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    rest.shuffle(&mut rng);
    for &c in rest.iter().take(total - n_center) {
        mask[c] = true;
    }
    Ok(mask)
}

/// k-space undersampling forward model: 2-D DFT, column mask, inverse DFT,
/// magnitude, clamp to `[0, 1]`.
pub fn undersample_kspace(
    x: &Tensor,
    acceleration: f64,
    center_fraction: f64,
    mask_seed: u64,
) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if c != 1 {
        return Err(Error::Dimension(format!("expected 1 channel, got {}", c)));
    }
    let mask = kspace_column_mask(w, acceleration, center_fraction, mask_seed)?;
    let input: Vec<Complex64> = x.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut kspace = dft2(&input, h, w, false);
    for r in 0..h {
        for col in 0..w {
            if !mask[col] {
                kspace[r * w + col] = Complex64::new(0.0, 0.0);
            }
        }
    }
    let image = dft2(&kspace, h, w, true);
    let data: Vec<f64> = image.iter().map(|v| v.norm().clamp(0.0, 1.0)).collect();
    Tensor::new(vec![1, h, w], data)
}

/// Spectral energy `sum |X|^2` of the masked k-space of `x`; with
/// `acceleration = 1` this equals the full spectrum energy (Parseval).
pub fn kspace_energy(x: &Tensor, mask: Option<&[bool]>) -> Result<f64> {
    let (_, h, w) = x.dims3()?;
    let input: Vec<Complex64> = x.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let kspace = dft2(&input, h, w, false);
    let mut acc = 0.0;
    for r in 0..h {
        for c in 0..w {
            let keep = mask.map_or(true, |m| m[c]);
            if keep {
                acc += kspace[r * w + c].norm_sqr();
            }
        }
    }
    Ok(acc)
}

/// Disjoint, exhaustive, seed-reproducible split of `0..n` by fractions.
/// Counts use largest-remainder rounding; an empty part is an error.
pub fn split_dataset(n: usize, spec: &SplitSpec) -> Result<SplitIndices> {
    if n < 3 {
        return Err(Error::EmptyDataset(format!(
            "need at least 3 samples to split, got {}",
            n
        )));
    }
    let (ft, fc, fv) = spec.fractions;
    if ft <= 0.0 || fc <= 0.0 || fv <= 0.0 {
        return Err(Error::Usage(format!(
            "split fractions must be positive, got {:?}",
            spec.fractions
        )));
    }
    if ((ft + fc + fv) - 1.0).abs() > 1e-9 {
        return Err(Error::Usage(format!(
            "split fractions must sum to 1, got {}",
            ft + fc + fv
        )));
    }
    let raw = [ft * n as f64, fc * n as f64, fv * n as f64];
    let mut counts = [0usize; 3];
    let mut remainders = [0.0f64; 3];
    for i in 0..3 {
        counts[i] = raw[i].floor() as usize;
        remainders[i] = raw[i] - raw[i].floor();
    }
    let mut leftover = n - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| remainders[b].partial_cmp(&remainders[a]).unwrap());
    for &i in &order {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::EmptySplit(format!(
            "fractions {:?} of {} leave an empty split: counts {:?}",
            spec.fractions, n, counts
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    indices.shuffle(&mut rng);
    let train = indices[..counts[0]].to_vec();
    let calibration = indices[counts[0]..counts[0] + counts[1]].to_vec();
    let validation = indices[counts[0] + counts[1]..].to_vec();
    Ok(SplitIndices {
        train,
        calibration,
        validation,
    })
}

/// Write a tensor file: magic "QTNS", version, rank, dims, then the
/// little-endian f64 payload. Round-trips bit-exactly.
pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!(
            "bad tensor magic {:?} in {}",
            magic,
            path.display()
        )));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported tensor version {}", version)));
    }
    r.read_exact(&mut buf4)?;
    let rank = u32::from_le_bytes(buf4) as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut buf4)?;
        dims.push(u32::from_le_bytes(buf4) as usize);
    }
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut buf8 = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut buf8)?;
        data.push(f64::from_le_bytes(buf8));
    }
    Tensor::new(dims, data)
}

/// One manifest row per sample.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ManifestRow {
    pub sample_id: usize,
    pub x_path: String,
    pub y_path: String,
    pub forward_model: String,
    pub param: f64,
    pub split: String,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in reader.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}
