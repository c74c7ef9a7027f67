//! Reverse-mode gradient tape for the fixed set of operations the
//! quantile backbone uses.
//!
//! A fresh tape is built per forward pass; `backward` walks the recorded
//! nodes once in reverse and accumulates gradients. This is deliberately
//! not a general autodiff engine — only the ops below are supported.

use super::conv::{conv2d, conv2d_grads};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        padding: usize,
    },
    /// `input [C, H, W] + bias [C]` broadcast over the spatial axes.
    AddChannelBias {
        input: NodeId,
        bias: NodeId,
    },
    AvgPool2 {
        input: NodeId,
    },
    UpsampleNearest2 {
        input: NodeId,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
    },
    Silu {
        input: NodeId,
    },
    /// `weight [O, I] * input [I] + bias [O]`.
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    /// Mean pinball loss of a prediction against a constant target.
    PinballMean {
        pred: NodeId,
        target: Tensor,
        q: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            grad: None,
        });
        id
    }

    /// Register an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, padding: usize) -> Result<NodeId> {
        let out = conv2d(self.value(input), self.value(kernel), padding)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                padding,
            },
        ))
    }

    pub fn add_channel_bias(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(input).dims3()?;
        let b = self.value(bias);
        if b.shape() != [c] {
            return Err(Error::ShapeMismatch(format!(
                "channel bias shape {:?} does not match {} channels",
                b.shape(),
                c
            )));
        }
        let mut out = self.value(input).data().to_vec();
        let bias_vals = b.data().to_vec();
        for (ch, bv) in bias_vals.iter().enumerate() {
            for v in &mut out[ch * h * w..(ch + 1) * h * w] {
                *v += bv;
            }
        }
        let t = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push(t, Op::AddChannelBias { input, bias }))
    }

    pub fn avg_pool2(&mut self, input: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(input).dims3()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Usage(format!(
                "avg_pool2 needs even spatial dims, got {}x{}",
                h, w
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(input).data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = (ch * h + 2 * oy) * w + 2 * ox;
                    out[(ch * oh + oy) * ow + ox] =
                        0.25 * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
                }
            }
        }
        let t = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(t, Op::AvgPool2 { input }))
    }

    pub fn upsample_nearest2(&mut self, input: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(input).dims3()?;
        let (oh, ow) = (h * 2, w * 2);
        let src = self.value(input).data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[(ch * oh + oy) * ow + ox] = src[(ch * h + oy / 2) * w + ox / 2];
                }
            }
        }
        let t = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(t, Op::UpsampleNearest2 { input }))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ca, ha, wa) = self.value(a).dims3()?;
        let (cb, hb, wb) = self.value(b).dims3()?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::ShapeMismatch(format!(
                "concat_channels spatial dims differ: {}x{} vs {}x{}",
                ha, wa, hb, wb
            )));
        }
        let mut out = Vec::with_capacity((ca + cb) * ha * wa);
        out.extend_from_slice(self.value(a).data());
        out.extend_from_slice(self.value(b).data());
        let t = Tensor::new(vec![ca + cb, ha, wa], out)?;
        Ok(self.push(t, Op::ConcatChannels { a, b }))
    }

    pub fn silu(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu { input })
    }

    pub fn linear(&mut self, weight: NodeId, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let ws = self.value(weight).shape().to_vec();
        let is = self.value(input).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        if ws.len() != 2 || is.len() != 1 || bs.len() != 1 || ws[1] != is[0] || ws[0] != bs[0] {
            return Err(Error::ShapeMismatch(format!(
                "linear: weight {:?}, input {:?}, bias {:?}",
                ws, is, bs
            )));
        }
        let (o, i) = (ws[0], ws[1]);
        let w = self.value(weight).data();
        let x = self.value(input).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; o];
        for row in 0..o {
            let mut acc = b[row];
            for col in 0..i {
                acc += w[row * i + col] * x[col];
            }
            out[row] = acc;
        }
        let t = Tensor::from_vec(out);
        Ok(self.push(
            t,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    /// Mean pinball loss against a constant target. At the kink
    /// (`x == x_hat`) the `q` branch of the case split applies.
    pub fn pinball_mean(&mut self, pred: NodeId, target: &Tensor, q: f64) -> Result<NodeId> {
        if !(0.0 < q && q < 1.0) {
            return Err(Error::Domain(format!("quantile {} outside (0, 1)", q)));
        }
        if !self.value(pred).same_shape(target) {
            return Err(Error::ShapeMismatch(format!(
                "pinball: pred {:?} vs target {:?}",
                self.value(pred).shape(),
                target.shape()
            )));
        }
        let n = target.len() as f64;
        let mut acc = 0.0;
        for (&xh, &x) in self.value(pred).data().iter().zip(target.data()) {
            let d = x - xh;
            acc += if d >= 0.0 { q * d } else { (q - 1.0) * d };
        }
        let t = Tensor::new(vec![1], vec![acc / n])?;
        Ok(self.push(
            t,
            Op::PinballMean {
                pred,
                target: target.clone(),
                q,
            },
        ))
    }

    /// Accumulate `d loss / d node` for every node reachable from `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = Some(vec![0.0; node.value.len()]);
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = 1.0;

        for idx in (0..self.nodes.len()).rev() {
            let grad = self.nodes[idx].grad.clone().unwrap();
            if grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    kernel,
                    padding,
                } => {
                    let (input, kernel, padding) = (*input, *kernel, *padding);
                    let go = Tensor::new(self.nodes[idx].value.shape().to_vec(), grad)?;
                    let (d_in, d_ker) =
                        conv2d_grads(self.value(input), self.value(kernel), padding, &go)?;
                    self.accumulate(input, d_in.data());
                    self.accumulate(kernel, d_ker.data());
                }
                Op::AddChannelBias { input, bias } => {
                    let (input, bias) = (*input, *bias);
                    let (c, h, w) = self.nodes[idx].value.dims3()?;
                    self.accumulate(input, &grad);
                    let mut db = vec![0.0; c];
                    for (ch, slot) in db.iter_mut().enumerate() {
                        *slot = grad[ch * h * w..(ch + 1) * h * w].iter().sum();
                    }
                    self.accumulate(bias, &db);
                }
                Op::AvgPool2 { input } => {
                    let input = *input;
                    let (c, h, w) = self.value(input).dims3()?;
                    let (oh, ow) = (h / 2, w / 2);
                    let mut d_in = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = 0.25 * grad[(ch * oh + oy) * ow + ox];
                                let base = (ch * h + 2 * oy) * w + 2 * ox;
                                d_in[base] += g;
                                d_in[base + 1] += g;
                                d_in[base + w] += g;
                                d_in[base + w + 1] += g;
                            }
                        }
                    }
                    self.accumulate(input, &d_in);
                }
                Op::UpsampleNearest2 { input } => {
                    let input = *input;
                    let (c, h, w) = self.value(input).dims3()?;
                    let (oh, ow) = (h * 2, w * 2);
                    let mut d_in = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                d_in[(ch * h + oy / 2) * w + ox / 2] +=
                                    grad[(ch * oh + oy) * ow + ox];
                            }
                        }
                    }
                    self.accumulate(input, &d_in);
                }
                Op::ConcatChannels { a, b } => {
                    let (a, b) = (*a, *b);
                    let na = self.value(a).len();
                    self.accumulate(a, &grad[..na]);
                    self.accumulate(b, &grad[na..]);
                }
                Op::Silu { input } => {
                    let input = *input;
                    let d: Vec<f64> = self
                        .value(input)
                        .data()
                        .iter()
                        .zip(&grad)
                        .map(|(&x, &g)| {
                            let s = sigmoid(x);
                            g * s * (1.0 + x * (1.0 - s))
                        })
                        .collect();
                    self.accumulate(input, &d);
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                } => {
                    let (input, weight, bias) = (*input, *weight, *bias);
                    let ws = self.value(weight).shape().to_vec();
                    let (o, i) = (ws[0], ws[1]);
                    let w = self.value(weight).data().to_vec();
                    let x = self.value(input).data().to_vec();
                    let mut d_in = vec![0.0; i];
                    let mut d_w = vec![0.0; o * i];
                    for row in 0..o {
                        let g = grad[row];
                        for col in 0..i {
                            d_in[col] += g * w[row * i + col];
                            d_w[row * i + col] += g * x[col];
                        }
                    }
                    self.accumulate(input, &d_in);
                    self.accumulate(weight, &d_w);
                    self.accumulate(bias, &grad);
                }
                Op::PinballMean { pred, target, q } => {
                    let (pred, q) = (*pred, *q);
                    let n = target.len() as f64;
                    let d: Vec<f64> = self.value(pred)
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&xh, &x)| {
                            // d loss / d x_hat; the x - x_hat >= 0 branch
                            // contributes -q, the other branch (1 - q).
                            let branch = if x - xh >= 0.0 { -q } else { 1.0 - q };
                            grad[0] * branch / n
                        })
                        .collect();
                    self.accumulate(pred, &d);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: &[f64]) {
        let g = self.nodes[id.0].grad.as_mut().unwrap();
        for (slot, d) in g.iter_mut().zip(delta) {
            *slot += d;
        }
    }

    /// Gradient of the last `backward` pass for `id`, if one was run.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, id: NodeId) -> Option<Tensor> {
        self.grad(id).map(|g| {
            Tensor::new(self.nodes[id.0].value.shape().to_vec(), g.to_vec()).expect("same shape")
        })
    }
}
