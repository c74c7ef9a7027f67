//! Quantile-conditioned image regressor.
//!
//! A single network `f(y, q)` maps a measurement image and a quantile
//! level in (0, 1) to the predicted conditional q-quantile image. The
//! level is turned into a sinusoidal feature vector, passed through a
//! small MLP, and injected into every encoder/decoder stage of a
//! miniature two-level convolutional backbone as a per-channel additive
//! bias, the same conditioning shape diffusion backbones use for the
//! time step. Skip connections concatenate encoder features into the
//! mirrored decoder stages.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{NodeId, Tape, Tensor};

/// Sinusoidal base frequency. Quantiles live in (0, 1), a much narrower
/// domain than diffusion time steps, so the base is 1000 rather than the
/// usual 10000 to keep the early frequencies informative.
const EMBED_BASE_FREQ: f64 = 1000.0;

const CHECKPOINT_MAGIC: &[u8; 4] = b"QUTC";
const CHECKPOINT_VERSION: u32 = 1;

/// Width of the quantile embedding and its MLP.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QuantileEmbeddingConfig {
    /// Embedding width; must be even.
    pub dim: usize,
    /// Hidden width of the two-layer MLP.
    pub mlp_hidden: usize,
}

impl Default for QuantileEmbeddingConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            mlp_hidden: 64,
        }
    }
}

/// Architecture of the backbone: encoder stage widths (mirrored by the
/// decoder), one bottleneck at twice the last width, and the embedding.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ArchConfig {
    /// Output channels of each encoder stage, shallow to deep.
    pub channels: Vec<usize>,
    pub embed: QuantileEmbeddingConfig,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32],
            embed: QuantileEmbeddingConfig::default(),
            seed: 0,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Usage(format!(
                "invalid channel counts {:?}",
                self.channels
            )));
        }
        if self.embed.dim == 0 || self.embed.dim % 2 != 0 {
            return Err(Error::Usage(format!(
                "embedding dim {} must be a positive even number",
                self.embed.dim
            )));
        }
        if self.embed.mlp_hidden == 0 {
            return Err(Error::Usage("mlp_hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.channels.len()
    }

    pub fn bottleneck_channels(&self) -> usize {
        2 * *self.channels.last().expect("validated nonempty")
    }
}

/// Raw sinusoidal features of a quantile level, before the MLP:
/// `e[2i] = sin(q w_i)`, `e[2i+1] = cos(q w_i)` with
/// `w_i = base * 10000^(-2i/dim)`.
pub fn sinusoidal_features(q: f64, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let omega = EMBED_BASE_FREQ * 10000f64.powf(-2.0 * i as f64 / dim as f64);
        out[2 * i] = (q * omega).sin();
        out[2 * i + 1] = (q * omega).cos();
    }
    out
}

/// Anything that can be queried for a conditional quantile image.
///
/// Implemented by the trained model and by analytic stand-ins used for
/// calibration and density tests.
pub trait QuantileRegressor: Sync {
    /// Predicted q-quantile image; same shape as `y`.
    fn predict(&self, y: &Tensor, q: f64) -> Result<Tensor>;
}

/// One conv stage: 3x3 kernel, channel bias, and the linear projection of
/// the quantile embedding that is added as a per-channel shift.
#[derive(Debug, Clone)]
struct ConvBlock {
    kernel: Tensor,
    bias: Tensor,
    film_w: Tensor,
    film_b: Tensor,
}

#[derive(Debug, Clone)]
pub struct QuantileModel {
    config: ArchConfig,
    embed_w1: Tensor,
    embed_b1: Tensor,
    embed_w2: Tensor,
    embed_b2: Tensor,
    enc: Vec<ConvBlock>,
    bottleneck: ConvBlock,
    /// Decoder blocks in application order, deepest first.
    dec: Vec<ConvBlock>,
    head_kernel: Tensor,
    head_bias: Tensor,
}

fn check_quantile(q: f64) -> Result<()> {
    if !(0.0 < q && q < 1.0) || !q.is_finite() {
        return Err(Error::Domain(format!("quantile {} outside (0, 1)", q)));
    }
    Ok(())
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

impl QuantileModel {
    /// Reproducible He-style initialization from `config.seed`.
    pub fn init(config: ArchConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dim = config.embed.dim;
        let hidden = config.embed.mlp_hidden;

        fn he(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
            let std = (2.0 / fan_in as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("std > 0");
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| dist.sample(rng)).collect();
            Tensor::new(shape.to_vec(), data).expect("shape/data agree")
        }

        fn block(rng: &mut ChaCha8Rng, dim: usize, c_in: usize, c_out: usize, k: usize) -> ConvBlock {
            ConvBlock {
                kernel: he(rng, &[c_out, c_in, k, k], c_in * k * k),
                bias: Tensor::zeros(&[c_out]),
                // Small conditioning projection so early training is close
                // to unconditional.
                film_w: {
                    let dist = Normal::new(0.0, 0.01).unwrap();
                    let data = (0..c_out * dim).map(|_| dist.sample(rng)).collect();
                    Tensor::new(vec![c_out, dim], data).unwrap()
                },
                film_b: Tensor::zeros(&[c_out]),
            }
        }

        let embed_w1 = he(&mut rng, &[hidden, dim], dim);
        let embed_b1 = Tensor::zeros(&[hidden]);
        let embed_w2 = he(&mut rng, &[dim, hidden], hidden);
        let embed_b2 = Tensor::zeros(&[dim]);

        let mut enc = Vec::new();
        let mut prev = 1;
        for &c in &config.channels {
            enc.push(block(&mut rng, dim, prev, c, 3));
            prev = c;
        }
        let bottleneck = block(&mut rng, dim, prev, config.bottleneck_channels(), 3);

        let mut dec = Vec::new();
        let mut up_ch = config.bottleneck_channels();
        for i in (0..config.channels.len()).rev() {
            let skip_ch = config.channels[i];
            dec.push(block(&mut rng, dim, up_ch + skip_ch, skip_ch, 3));
            up_ch = skip_ch;
        }

        let head_kernel = he(&mut rng, &[1, config.channels[0], 1, 1], config.channels[0]);
        let head_bias = Tensor::zeros(&[1]);

        Ok(Self {
            config,
            embed_w1,
            embed_b1,
            embed_w2,
            embed_b2,
            enc,
            bottleneck,
            dec,
            head_kernel,
            head_bias,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    /// Named parameters in a fixed order (the checkpoint order).
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embed.w1".into(), &self.embed_w1),
            ("embed.b1".into(), &self.embed_b1),
            ("embed.w2".into(), &self.embed_w2),
            ("embed.b2".into(), &self.embed_b2),
        ];
        for (i, b) in self.enc.iter().enumerate() {
            out.push((format!("enc{}.kernel", i), &b.kernel));
            out.push((format!("enc{}.bias", i), &b.bias));
            out.push((format!("enc{}.film_w", i), &b.film_w));
            out.push((format!("enc{}.film_b", i), &b.film_b));
        }
        out.push(("bottleneck.kernel".into(), &self.bottleneck.kernel));
        out.push(("bottleneck.bias".into(), &self.bottleneck.bias));
        out.push(("bottleneck.film_w".into(), &self.bottleneck.film_w));
        out.push(("bottleneck.film_b".into(), &self.bottleneck.film_b));
        for (j, b) in self.dec.iter().enumerate() {
            let stage = self.config.channels.len() - 1 - j;
            out.push((format!("dec{}.kernel", stage), &b.kernel));
            out.push((format!("dec{}.bias", stage), &b.bias));
            out.push((format!("dec{}.film_w", stage), &b.film_w));
            out.push((format!("dec{}.film_b", stage), &b.film_b));
        }
        out.push(("head.kernel".into(), &self.head_kernel));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.embed_w1,
            &mut self.embed_b1,
            &mut self.embed_w2,
            &mut self.embed_b2,
        ];
        for b in &mut self.enc {
            out.push(&mut b.kernel);
            out.push(&mut b.bias);
            out.push(&mut b.film_w);
            out.push(&mut b.film_b);
        }
        out.push(&mut self.bottleneck.kernel);
        out.push(&mut self.bottleneck.bias);
        out.push(&mut self.bottleneck.film_w);
        out.push(&mut self.bottleneck.film_b);
        for b in &mut self.dec {
            out.push(&mut b.kernel);
            out.push(&mut b.bias);
            out.push(&mut b.film_w);
            out.push(&mut b.film_b);
        }
        out.push(&mut self.head_kernel);
        out.push(&mut self.head_bias);
        out
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// Snapshot of all parameter tensors, in checkpoint order.
    pub fn parameter_tensors(&self) -> Vec<Tensor> {
        self.parameters().into_iter().map(|(_, t)| t.clone()).collect()
    }

    /// Overwrite all parameters from tensors in checkpoint order.
    pub fn set_parameters(&mut self, tensors: &[Tensor]) -> Result<()> {
        let mut slots = self.parameters_mut();
        if slots.len() != tensors.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (slot, t) in slots.iter_mut().zip(tensors) {
            if !slot.same_shape(t) {
                return Err(Error::ShapeMismatch(format!(
                    "parameter shape {:?} vs {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            **slot = t.clone();
        }
        Ok(())
    }

    /// Quantile embedding after the MLP: deterministic in `(self, q)`.
    pub fn embed(&self, q: f64) -> Result<Tensor> {
        check_quantile(q)?;
        let feats = sinusoidal_features(q, self.config.embed.dim);
        let h1 = matvec(&self.embed_w1, &feats, self.embed_b1.data());
        let h1: Vec<f64> = h1.into_iter().map(silu).collect();
        let e = matvec(&self.embed_w2, &h1, self.embed_b2.data());
        Tensor::new(vec![self.config.embed.dim], e)
    }

    /// Forward pass recorded on `tape`; returns the output node and the
    /// parameter leaf nodes in `parameters()` order so the caller can read
    /// gradients after `tape.backward`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        y: &Tensor,
        q: f64,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        check_quantile(q)?;
        let (c, h, w) = y.dims3()?;
        if c != 1 {
            return Err(Error::Usage(format!("expected 1 input channel, got {}", c)));
        }
        let stages = self.config.num_stages();
        let div = 1usize << stages;
        if h % div != 0 || w % div != 0 {
            return Err(Error::Usage(format!(
                "spatial dims {}x{} must be divisible by 2^{}",
                h, w, stages
            )));
        }

        let ew1 = tape.leaf(self.embed_w1.clone());
        let eb1 = tape.leaf(self.embed_b1.clone());
        let ew2 = tape.leaf(self.embed_w2.clone());
        let eb2 = tape.leaf(self.embed_b2.clone());
        let mut param_ids = vec![ew1, eb1, ew2, eb2];

        let feats = tape.leaf(Tensor::from_vec(sinusoidal_features(
            q,
            self.config.embed.dim,
        )));
        let h1 = tape.linear(ew1, feats, eb1)?;
        let h1 = tape.silu(h1);
        let embed = tape.linear(ew2, h1, eb2)?;

        let apply_block = |tape: &mut Tape,
                               x: NodeId,
                               block: &ConvBlock,
                               param_ids: &mut Vec<NodeId>|
         -> Result<NodeId> {
            let kn = tape.leaf(block.kernel.clone());
            let bn = tape.leaf(block.bias.clone());
            let fw = tape.leaf(block.film_w.clone());
            let fb = tape.leaf(block.film_b.clone());
            param_ids.extend([kn, bn, fw, fb]);
            let conv = tape.conv2d(x, kn, 1)?;
            let conv = tape.add_channel_bias(conv, bn)?;
            let shift = tape.linear(fw, embed, fb)?;
            let conv = tape.add_channel_bias(conv, shift)?;
            Ok(tape.silu(conv))
        };

        let mut x = tape.leaf(y.clone());
        let mut skips = Vec::new();
        for block in &self.enc {
            x = apply_block(tape, x, block, &mut param_ids)?;
            skips.push(x);
            x = tape.avg_pool2(x)?;
        }
        x = apply_block(tape, x, &self.bottleneck, &mut param_ids)?;
        for (j, block) in self.dec.iter().enumerate() {
            let skip = skips[skips.len() - 1 - j];
            x = tape.upsample_nearest2(x)?;
            x = tape.concat_channels(x, skip)?;
            x = apply_block(tape, x, block, &mut param_ids)?;
        }
        let hk = tape.leaf(self.head_kernel.clone());
        let hb = tape.leaf(self.head_bias.clone());
        param_ids.extend([hk, hb]);
        let out = tape.conv2d(x, hk, 0)?;
        let out = tape.add_channel_bias(out, hb)?;
        Ok((out, param_ids))
    }

    /// Inference-only forward pass.
    pub fn forward(&self, y: &Tensor, q: f64) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (out, _) = self.forward_on_tape(&mut tape, y, q)?;
        let t = tape.value(out).clone();
        t.check_finite("qnet forward output")?;
        Ok(t)
    }

    /// Write the checkpoint: magic, version, architecture block, then each
    /// parameter as (name length, name, rank, dims, little-endian f64 data).
    /// Round-trips bit-exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.config.channels.len() as u32).to_le_bytes())?;
        for &c in &self.config.channels {
            w.write_all(&(c as u32).to_le_bytes())?;
        }
        w.write_all(&(self.config.embed.dim as u32).to_le_bytes())?;
        w.write_all(&(self.config.embed.mlp_hidden as u32).to_le_bytes())?;
        w.write_all(&self.config.seed.to_le_bytes())?;
        let params = self.parameters();
        w.write_all(&(params.len() as u32).to_le_bytes())?;
        for (name, tensor) in params {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
            for &d in tensor.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "bad checkpoint magic {:?} in {}",
                magic,
                path.display()
            )));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                version
            )));
        }
        let n_stages = read_u32(&mut r)? as usize;
        let mut channels = Vec::with_capacity(n_stages);
        for _ in 0..n_stages {
            channels.push(read_u32(&mut r)? as usize);
        }
        let dim = read_u32(&mut r)? as usize;
        let mlp_hidden = read_u32(&mut r)? as usize;
        let mut seed_bytes = [0u8; 8];
        r.read_exact(&mut seed_bytes)?;
        let config = ArchConfig {
            channels,
            embed: QuantileEmbeddingConfig { dim, mlp_hidden },
            seed: u64::from_le_bytes(seed_bytes),
        };
        let mut model = Self::init(config)?;

        let count = read_u32(&mut r)? as usize;
        let expected = model.parameters();
        if count != expected.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, architecture expects {}",
                count,
                expected.len()
            )));
        }
        let expected: Vec<(String, Vec<usize>)> = expected
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let mut tensors = Vec::with_capacity(count);
        for (name, shape) in &expected {
            let name_len = read_u32(&mut r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let got_name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Format("non-utf8 parameter name".into()))?;
            if &got_name != name {
                return Err(Error::Format(format!(
                    "parameter order mismatch: expected {}, found {}",
                    name, got_name
                )));
            }
            let rank = read_u32(&mut r)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u32(&mut r)? as usize);
            }
            if &dims != shape {
                return Err(Error::Format(format!(
                    "parameter {} shape {:?}, expected {:?}",
                    name, dims, shape
                )));
            }
            let n: usize = dims.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            tensors.push(Tensor::new(dims, data)?);
        }
        model.set_parameters(&tensors)?;
        Ok(model)
    }
}

impl QuantileRegressor for QuantileModel {
    fn predict(&self, y: &Tensor, q: f64) -> Result<Tensor> {
        self.forward(y, q)
    }
}

fn matvec(w: &Tensor, x: &[f64], b: &[f64]) -> Vec<f64> {
    let (o, i) = (w.shape()[0], w.shape()[1]);
    debug_assert_eq!(i, x.len());
    let wd = w.data();
    (0..o)
        .map(|row| {
            let mut acc = b[row];
            for col in 0..i {
                acc += wd[row * i + col] * x[col];
            }
            acc
        })
        .collect()
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(seed: u64) -> ArchConfig {
        ArchConfig {
            channels: vec![4, 8],
            embed: QuantileEmbeddingConfig {
                dim: 8,
                mlp_hidden: 16,
            },
            seed,
        }
    }

    #[test]
    fn sinusoid_coordinate_zero_is_sin_of_scaled_q() {
        let feats = sinusoidal_features(0.5, 32);
        assert!((feats[0] - (500.0f64).sin()).abs() < 1e-15);
        assert!((feats[1] - (500.0f64).cos()).abs() < 1e-15);
    }

    #[test]
    fn embed_is_deterministic_and_injective_at_desk_scale() {
        let model = QuantileModel::init(small_config(3)).unwrap();
        let a = model.embed(0.25).unwrap();
        let b = model.embed(0.25).unwrap();
        assert_eq!(a, b);
        let c = model.embed(0.75).unwrap();
        let max_diff = a
            .data()
            .iter()
            .zip(c.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 1e-6);
    }

    #[test]
    fn embed_rejects_out_of_domain_quantile() {
        let model = QuantileModel::init(small_config(3)).unwrap();
        assert!(model.embed(0.0).is_err());
        assert!(model.embed(1.0).is_err());
        assert!(model.embed(-0.5).is_err());
        assert!(model.forward(&Tensor::zeros(&[1, 8, 8]), 1.5).is_err());
    }

    #[test]
    fn init_is_reproducible_and_seed_sensitive() {
        let a = QuantileModel::init(small_config(7)).unwrap();
        let b = QuantileModel::init(small_config(7)).unwrap();
        let c = QuantileModel::init(small_config(8)).unwrap();
        for ((_, ta), (_, tb)) in a.parameters().iter().zip(b.parameters()) {
            assert_eq!(ta.data(), tb.data());
        }
        let any_differs = a
            .parameters()
            .iter()
            .zip(c.parameters())
            .any(|((_, ta), (_, tc))| ta.data() != tc.data());
        assert!(any_differs);
    }

    #[test]
    fn parameter_count_matches_hand_computed_sum() {
        // Default config: channels [16, 32], bottleneck 64, embed 32/64.
        let model = QuantileModel::init(ArchConfig::default()).unwrap();
        let dim = 32;
        let hidden = 64;
        let embed = hidden * dim + hidden + dim * hidden + dim;
        let block = |cin: usize, cout: usize| cout * cin * 9 + cout + cout * dim + cout;
        let expected = embed
            + block(1, 16)
            + block(16, 32)
            + block(32, 64)      // bottleneck
            + block(64 + 32, 32) // dec1
            + block(32 + 16, 16) // dec0
            + (16 + 1); // 1x1 head
        assert_eq!(model.parameter_count(), expected);
    }

    #[test]
    fn forward_preserves_shape_and_is_deterministic() {
        let model = QuantileModel::init(small_config(1)).unwrap();
        let y = Tensor::filled(&[1, 16, 12], 0.3);
        let a = model.forward(&y, 0.5).unwrap();
        let b = model.forward(&y, 0.5).unwrap();
        assert_eq!(a.shape(), &[1, 16, 12]);
        assert_eq!(a, b);
        assert!(a.all_finite());
    }

    #[test]
    fn forward_rejects_indivisible_spatial_dims() {
        let model = QuantileModel::init(small_config(1)).unwrap();
        let y = Tensor::zeros(&[1, 10, 8]);
        assert!(model.forward(&y, 0.5).is_err());
    }

    #[test]
    fn zero_weights_with_head_bias_give_constant_output() {
        let mut model = QuantileModel::init(small_config(2)).unwrap();
        let zeroed: Vec<Tensor> = model
            .parameter_tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        model.set_parameters(&zeroed).unwrap();
        let mut params = model.parameter_tensors();
        let head_bias_idx = params.len() - 1;
        params[head_bias_idx] = Tensor::new(vec![1], vec![0.7]).unwrap();
        model.set_parameters(&params).unwrap();

        let y = Tensor::filled(&[1, 8, 8], 0.2);
        for q in [0.1, 0.5, 0.9] {
            let out = model.forward(&y, q).unwrap();
            for &v in out.data() {
                assert!((v - 0.7).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.qutc");
        let model = QuantileModel::init(small_config(11)).unwrap();
        model.save(&path).unwrap();
        let loaded = QuantileModel::load(&path).unwrap();
        assert_eq!(model.config(), loaded.config());
        for ((na, ta), (nb, tb)) in model.parameters().iter().zip(loaded.parameters()) {
            assert_eq!(na, &nb);
            // Bit-exact comparison.
            let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        let y = Tensor::filled(&[1, 8, 8], 0.4);
        let a = model.forward(&y, 0.3).unwrap();
        let b = loaded.forward(&y, 0.3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn load_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.qutc");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(QuantileModel::load(&path).is_err());
    }
}
