//! Simultaneous quantile regression for imaging inverse problems, with
//! conformal calibration of the quantile bounds.
//!
//! One small quantile-conditioned network is trained with pinball loss at
//! randomly drawn quantile levels; a held-out calibration set is then used
//! to walk the lower/upper query levels until the pixel miscoverage meets
//! the requested budget. Sweeping the full quantile range additionally
//! yields per-pixel density estimates.
//!
//! Modules follow the pipeline order: [`datasim`] builds synthetic paired
//! datasets, [`qnet`] defines the network, [`training`] fits it,
//! [`conformal`] calibrates interval bounds, [`pdfest`] reconstructs
//! densities, and [`metrics`] evaluates the result.

pub mod conformal;
pub mod datasim;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod oracle;
pub mod par;
pub mod pdfest;
pub mod qnet;
pub mod training;

pub use error::{Error, Result};
pub use numerics::Tensor;
