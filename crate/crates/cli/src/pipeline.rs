//! The five pipeline stages behind the subcommands. Each stage reads its
//! inputs from the run directory and writes machine-readable outputs:
//! tensor files + manifest, checkpoint + stats CSV, calibration JSON,
//! evaluation JSON + figure CSVs, and per-pixel density CSVs.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use qucal_core::conformal::{self, BaselineCalibration, CalibrationResult};
use qucal_core::datasim::{
    self, ForwardModel, ManifestRow, PairedDataset, PairedSample, Split, SplitSpec,
};
use qucal_core::metrics::{self, EvalReport};
use qucal_core::numerics::Tensor;
use qucal_core::oracle::GaussianQuantileOracle;
use qucal_core::pdfest::{self, AlphaLevels, PdfEstimate};
use qucal_core::qnet::QuantileModel;
use qucal_core::training;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{stage_seed, RunConfig, StageSeed, Task};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// JSON envelope: schema version and a wall-clock stamp in its own field,
/// then the payload flattened in. Everything except `timestamp_unix` is
/// deterministic for a fixed config and seed.
#[derive(Serialize)]
struct Stamped<T: Serialize> {
    schema_version: u32,
    timestamp_unix: u64,
    #[serde(flatten)]
    payload: T,
}

fn write_json<T: Serialize>(path: &Path, payload: &T) -> Result<()> {
    let stamped = Stamped {
        schema_version: REPORT_SCHEMA_VERSION,
        timestamp_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        payload,
    };
    let text = serde_json::to_string_pretty(&stamped)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn data_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("data")
}

pub fn manifest_path(cfg: &RunConfig) -> PathBuf {
    data_dir(cfg).join("manifest.csv")
}

pub fn model_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("model.qutc")
}

pub fn calibration_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("calibration.json")
}

pub fn baseline_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("baseline.json")
}

pub fn report_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("eval_report.json")
}

/// Generate phantoms, apply the task's forward model, and write the
/// tensor files plus the split-labelled manifest.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<()> {
    let dir = data_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    let n = cfg.n_total();
    let size = cfg.image.size;

    let fractions = (
        cfg.dataset.n_train as f64 / n as f64,
        cfg.dataset.n_calib as f64 / n as f64,
        cfg.dataset.n_val as f64 / n as f64,
    );
    let splits = datasim::split_dataset(
        n,
        &SplitSpec {
            fractions,
            seed: stage_seed(cfg.seed, StageSeed::Split),
        },
    )?;
    if splits.train.len() != cfg.dataset.n_train
        || splits.calibration.len() != cfg.dataset.n_calib
        || splits.validation.len() != cfg.dataset.n_val
    {
        bail!(
            "split sizes ({}, {}, {}) do not match requested ({}, {}, {})",
            splits.train.len(),
            splits.calibration.len(),
            splits.validation.len(),
            cfg.dataset.n_train,
            cfg.dataset.n_calib,
            cfg.dataset.n_val
        );
    }
    let mut split_of = vec![Split::Train; n];
    for &i in &splits.calibration {
        split_of[i] = Split::Calibration;
    }
    for &i in &splits.validation {
        split_of[i] = Split::Validation;
    }

    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let x = datasim::gen_phantom(stage_seed(cfg.seed, StageSeed::Phantom(i)), size, size);
        let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, StageSeed::Noise(i)));
        let (y, meta) = match cfg.task {
            Task::Gaussian => {
                let (y, sigma) = datasim::add_gaussian_noise(&x, cfg.noise.sigma_max, &mut rng);
                (y, ForwardModel::Gaussian { sigma })
            }
            Task::Poisson => {
                let (y, lambda) = datasim::add_poisson_noise(
                    &x,
                    cfg.noise.lambda_min,
                    cfg.noise.lambda_max,
                    &mut rng,
                )?;
                (y, ForwardModel::Poisson { lambda })
            }
            Task::MriUndersample => {
                let y = datasim::undersample_kspace(
                    &x,
                    cfg.mri.acceleration,
                    cfg.mri.center_fraction,
                    stage_seed(cfg.seed, StageSeed::Mask(i)),
                )?;
                (
                    y,
                    ForwardModel::KspaceUndersample {
                        acceleration: cfg.mri.acceleration,
                    },
                )
            }
        };
        let x_name = format!("x_{:05}.qtns", i);
        let y_name = format!("y_{:05}.qtns", i);
        datasim::write_tensor(&dir.join(&x_name), &x)?;
        datasim::write_tensor(&dir.join(&y_name), &y)?;
        rows.push(ManifestRow {
            sample_id: i,
            x_path: x_name,
            y_path: y_name,
            forward_model: meta.label().to_string(),
            param: meta.param(),
            split: split_of[i].as_str().to_string(),
        });
    }
    datasim::write_manifest(&manifest_path(cfg), &rows)?;
    println!(
        "simulate: wrote {} samples ({} train / {} calibration / {} validation) to {}",
        n,
        cfg.dataset.n_train,
        cfg.dataset.n_calib,
        cfg.dataset.n_val,
        dir.display()
    );
    Ok(())
}

/// Read the manifest and tensors back into memory.
pub fn load_dataset(cfg: &RunConfig) -> Result<PairedDataset> {
    let dir = data_dir(cfg);
    let rows = datasim::read_manifest(&manifest_path(cfg))?;
    let mut dataset = PairedDataset::default();
    for row in rows {
        let x = datasim::read_tensor(&dir.join(&row.x_path))?;
        let y = datasim::read_tensor(&dir.join(&row.y_path))?;
        let meta = match row.forward_model.as_str() {
            "gaussian" => ForwardModel::Gaussian { sigma: row.param },
            "poisson" => ForwardModel::Poisson { lambda: row.param },
            "mri-undersample" => ForwardModel::KspaceUndersample {
                acceleration: row.param,
            },
            other => bail!("unknown forward model {:?} in manifest", other),
        };
        dataset.samples.push(PairedSample { x, y, meta });
        dataset.split_of.push(Split::parse(&row.split)?);
    }
    Ok(dataset)
}

/// Train from the manifest's train split, validating on the validation
/// split; writes the final checkpoint and the per-epoch stats CSV.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let dataset = load_dataset(cfg)?;
    let train_set = dataset.subset_cloned(Split::Train);
    let val_set = dataset.subset_cloned(Split::Validation);

    let mut model = QuantileModel::init(cfg.arch_config())?;
    let tc = cfg.train_config();
    let ckpt_dir = cfg.out_dir.join("checkpoints");
    let stats = training::train(&mut model, &train_set, &val_set, &tc, Some(&ckpt_dir))?;

    model.save(&model_path(cfg))?;
    stats.write_csv(&cfg.out_dir.join("train_stats.csv"))?;
    let last = stats.epochs.last().expect("at least one epoch");
    println!(
        "train: {} epochs, final pinball {:.6}, final val mse {}",
        stats.epochs.len(),
        last.mean_pinball,
        last.val_mse
            .map_or("n/a".to_string(), |v| format!("{:.6}", v))
    );
    Ok(())
}

/// Calibrate quantile bounds on the calibration split; optionally also the
/// constant-scaling baseline. Writes JSON result files.
pub fn cmd_calibrate(cfg: &RunConfig, with_baseline: bool) -> Result<()> {
    let dataset = load_dataset(cfg)?;
    let calib_set = dataset.subset_cloned(Split::Calibration);
    let model = QuantileModel::load(&model_path(cfg))?;

    let result = conformal::calibrate(
        &model,
        &calib_set,
        cfg.calibrate.alpha,
        cfg.calibrate.delta_q,
        cfg.calibrate.max_iters,
    )?;
    write_json(&calibration_path(cfg), &result)?;
    println!(
        "calibrate: bounds ({:.4}, {:.4}), risk {:.5} <= alpha' {:.5} in {} iterations",
        result.q_lower_star,
        result.q_upper_star,
        result.achieved_risk,
        result.alpha_prime,
        result.iterations
    );

    if with_baseline {
        let baseline = conformal::calibrate_baseline(
            &model,
            &calib_set,
            cfg.calibrate.alpha,
            (cfg.calibrate.baseline_q_lower, cfg.calibrate.baseline_q_upper),
        )?;
        write_json(&baseline_path(cfg), &baseline)?;
        println!(
            "calibrate: baseline lambda* {:.4}, risk {:.5}",
            baseline.lambda_star, baseline.achieved_risk
        );
    }
    Ok(())
}

/// Evaluate the calibrated model on the validation split; includes the
/// baseline comparison when a baseline calibration exists on disk.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let dataset = load_dataset(cfg)?;
    let test_set = dataset.subset_cloned(Split::Validation);
    let model = QuantileModel::load(&model_path(cfg))?;
    let calibration: CalibrationResult = read_json(&calibration_path(cfg))?;
    let baseline: Option<BaselineCalibration> = if baseline_path(cfg).exists() {
        Some(read_json(&baseline_path(cfg))?)
    } else {
        None
    };

    let report = metrics::evaluate(
        &model,
        &calibration,
        baseline.as_ref(),
        &test_set,
        &metrics::default_crossing_levels(),
        10,
        5,
    )?;
    write_json(&report_path(cfg), &report)?;
    write_figures(cfg, &report)?;
    println!(
        "evaluate: risk {:.5} +- {:.5}, length {:.5} +- {:.5}, crossing {:.3e}",
        report.total_risk.mean,
        report.total_risk.std,
        report.interval_length.mean,
        report.interval_length.std,
        report.crossing.fraction
    );
    if let Some(b) = &report.baseline {
        println!(
            "evaluate: length {:.5} vs baseline {:.5} (lambda* {:.4})",
            b.calibrated_length_mean, b.baseline_length_mean, b.lambda_star
        );
    }
    Ok(())
}

fn write_figures(cfg: &RunConfig, report: &EvalReport) -> Result<()> {
    let dir = cfg.out_dir.join("figures");
    std::fs::create_dir_all(&dir)?;
    let mut w = csv::Writer::from_path(dir.join("intensity_bins.csv"))?;
    w.write_record(["bin_lo", "bin_hi", "mean_length", "ci_lo", "ci_hi", "pixel_count"])?;
    for b in &report.intensity_bins {
        w.write_record([
            b.lo.to_string(),
            b.hi.to_string(),
            b.mean_length.to_string(),
            b.ci_lo.to_string(),
            b.ci_hi.to_string(),
            b.pixel_count.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("ssr_bins.csv"))?;
    w.write_record(["bin_index", "length_min", "length_max", "risk", "pixel_count"])?;
    for b in &report.ssr_bins {
        w.write_record([
            b.bin_index.to_string(),
            b.length_min.to_string(),
            b.length_max.to_string(),
            b.risk.to_string(),
            b.pixel_count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct PdfHeader {
    q_grid: Vec<f64>,
    pixels: Vec<[usize; 2]>,
    oracle_mode: bool,
    alpha_list: Vec<f64>,
    calibrated_levels: Vec<AlphaLevels>,
}

fn write_pdf_rows(path: &Path, rows: &[(f64, f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["q_level", "value", "density"])?;
    for (q, v, d) in rows {
        w.write_record([q.to_string(), v.to_string(), d.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Export per-pixel density estimates. In oracle mode the checkpoint is
/// replaced by the analytic N(0.5, 0.1^2) quantile function, which is the
/// ground truth the density reconstruction can be judged against.
pub fn cmd_pdf(cfg: &RunConfig, extra_pixels: &[(usize, usize)], oracle_mode: bool) -> Result<()> {
    let dir = cfg.out_dir.join("pdf");
    std::fs::create_dir_all(&dir)?;

    let mut pixels: Vec<[usize; 2]> = cfg.pdf.pixels.clone();
    for &(r, c) in extra_pixels {
        if r >= cfg.image.size || c >= cfg.image.size {
            bail!("pixel ({}, {}) outside a {0}x{0} image", r, c);
        }
        pixels.push([r, c]);
    }
    pixels.dedup();

    let (pdf, per_alpha): (PdfEstimate, Vec<AlphaLevels>) = if oracle_mode {
        let oracle = GaussianQuantileOracle { mu: 0.5, sigma: 0.1 };
        let y = Tensor::zeros(&[1, cfg.image.size, cfg.image.size]);
        let sweep = pdfest::quantile_sweep(&oracle, &y, &cfg.pdf.q_grid)?;
        let pdf = pdfest::pdf_from_quantiles(&pdfest::monotonize(sweep))?;
        (pdf, Vec::new())
    } else {
        let dataset = load_dataset(cfg)?;
        let val_set = dataset.subset_cloned(Split::Validation);
        if cfg.pdf.sample_index >= val_set.len() {
            bail!(
                "pdf.sample_index {} beyond validation split of {}",
                cfg.pdf.sample_index,
                val_set.len()
            );
        }
        let y = val_set[cfg.pdf.sample_index].y.clone();
        let model = QuantileModel::load(&model_path(cfg))?;
        let sweep = pdfest::quantile_sweep(&model, &y, &cfg.pdf.q_grid)?;
        let pdf = pdfest::pdf_from_quantiles(&pdfest::monotonize(sweep))?;
        let per_alpha = if cfg.pdf.alpha_list.is_empty() {
            Vec::new()
        } else {
            let calib_set = dataset.subset_cloned(Split::Calibration);
            let conformal_pdf = pdfest::conformalized_pdf(
                &model,
                &calib_set,
                &y,
                &cfg.pdf.alpha_list,
                cfg.calibrate.delta_q,
                cfg.calibrate.max_iters,
            )?;
            for &[r, c] in &pixels {
                let rows = conformal_pdf.pdf.pixel_rows(r, c);
                write_pdf_rows(&dir.join(format!("conformalized_pixel_{}_{}.csv", r, c)), &rows)?;
            }
            conformal_pdf.per_alpha
        };
        (pdf, per_alpha)
    };

    for &[r, c] in &pixels {
        let rows = pdf.pixel_rows(r, c);
        write_pdf_rows(&dir.join(format!("pixel_{}_{}.csv", r, c)), &rows)?;
    }
    write_json(
        &dir.join("header.json"),
        &PdfHeader {
            q_grid: cfg.pdf.q_grid.clone(),
            pixels,
            oracle_mode,
            alpha_list: cfg.pdf.alpha_list.clone(),
            calibrated_levels: per_alpha,
        },
    )?;
    println!("pdf: wrote {} interior levels to {}", pdf.levels.len(), dir.display());
    Ok(())
}
