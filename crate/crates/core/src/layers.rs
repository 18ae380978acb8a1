//! Layer kinds and their per-sample shape rules.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Identifier of a gate in a network's registry. Two layers carrying the same
/// id share one set of parameters and one realization per forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GateId(pub u32);

impl std::fmt::Display for GateId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "g{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            eps: Self::DEFAULT_EPS,
            momentum: Self::DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Exponential update of the running statistics from one training batch.
    pub fn update_running(&mut self, mean: &[f64], unbiased_var: &[f64]) {
        let m = self.momentum;
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(unbiased_var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }

    fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (name, t) in [
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if t.shape() != [c] {
                return Err(Error::dim(format!("batch norm {name} {:?} for {c} channels", t.shape())));
            }
        }
        if self.running_var.data().iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Domain("batch norm running variance must be positive".into()));
        }
        if !(self.eps > 0.0) || !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Domain("batch norm eps/momentum out of range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    /// `y = x·Wᵀ + b` with `W` stored `[out, in]`.
    Dense { weight: Tensor, bias: Option<Tensor> },
    /// Bias-free cross-correlation with weight `[out, in, kh, kw]`.
    Conv2d { weight: Tensor, stride: usize, padding: usize },
    BatchNorm2d(BatchNorm),
    Activation { function: Activation },
    MaxPool { k: usize },
    Flatten,
    Gate1d { width: usize, gate: GateId },
    Gate2d { channels: usize, gate: GateId },
}

impl Layer {
    /// Dense layer with weights and bias drawn from `U(±1/√in)`.
    pub fn dense<R: Rng + ?Sized>(input: usize, output: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Layer::Dense {
            weight: Tensor::uniform(&[output, input], bound, rng),
            bias: bias.then(|| Tensor::uniform(&[output], bound, rng)),
        }
    }

    /// Bias-free convolution with weights drawn from `U(±1/√fan_in)`.
    pub fn conv<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        Layer::Conv2d {
            weight: Tensor::uniform(&[out_ch, in_ch, kernel, kernel], bound, rng),
            stride,
            padding,
        }
    }

    pub fn relu() -> Self {
        Layer::Activation {
            function: Activation::Relu,
        }
    }

    pub fn tanh() -> Self {
        Layer::Activation {
            function: Activation::Tanh,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::BatchNorm2d(_) => "batch_norm2d",
            Layer::Activation { .. } => "activation",
            Layer::MaxPool { .. } => "max_pool",
            Layer::Flatten => "flatten",
            Layer::Gate1d { .. } => "gate1d",
            Layer::Gate2d { .. } => "gate2d",
        }
    }

    /// True for layers holding a weight matrix or kernel.
    pub fn is_weighted(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv2d { .. })
    }

    pub fn gate(&self) -> Option<GateId> {
        match self {
            Layer::Gate1d { gate, .. } | Layer::Gate2d { gate, .. } => Some(*gate),
            _ => None,
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense { weight, bias } => std::iter::once(weight).chain(bias.as_ref()).collect(),
            Layer::Conv2d { weight, .. } => vec![weight],
            Layer::BatchNorm2d(bn) => vec![&bn.gamma, &bn.beta],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense { weight, bias } => std::iter::once(weight).chain(bias.as_mut()).collect(),
            Layer::Conv2d { weight, .. } => vec![weight],
            Layer::BatchNorm2d(bn) => vec![&mut bn.gamma, &mut bn.beta],
            _ => Vec::new(),
        }
    }

    /// Output shape of one sample, or a dimension error.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |want: String| Err(Error::dim(format!("{} expects {want}, got input {input:?}", self.name())));
        match self {
            Layer::Dense { weight, bias } => {
                let ws = weight.shape();
                if ws.len() != 2 {
                    return mismatch("a rank-2 weight".into());
                }
                if let Some(b) = bias {
                    if b.shape() != [ws[0]] {
                        return mismatch(format!("bias of length {}", ws[0]));
                    }
                }
                if input != [ws[1]] {
                    return mismatch(format!("[{}]", ws[1]));
                }
                Ok(vec![ws[0]])
            }
            Layer::Conv2d {
                weight,
                stride,
                padding,
            } => {
                let ws = weight.shape();
                if ws.len() != 4 || *stride == 0 {
                    return mismatch("a rank-4 weight and positive stride".into());
                }
                if input.len() != 3 || input[0] != ws[1] {
                    return mismatch(format!("[{}, H, W]", ws[1]));
                }
                let (ph, pw) = (input[1] + 2 * padding, input[2] + 2 * padding);
                if ws[2] > ph || ws[3] > pw {
                    return mismatch(format!("padded input at least {}x{}", ws[2], ws[3]));
                }
                Ok(vec![ws[0], (ph - ws[2]) / stride + 1, (pw - ws[3]) / stride + 1])
            }
            Layer::BatchNorm2d(bn) => {
                bn.validate()?;
                if input.len() < 2 || input[0] != bn.channels() {
                    return mismatch(format!("[{}, ...]", bn.channels()));
                }
                Ok(input.to_vec())
            }
            Layer::Activation { .. } => Ok(input.to_vec()),
            Layer::MaxPool { k } => {
                if input.len() != 3 || *k == 0 || input[1] < *k || input[2] < *k {
                    return mismatch(format!("[C, H, W] with H, W >= {k}"));
                }
                Ok(vec![input[0], input[1] / k, input[2] / k])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Gate1d { width, .. } => {
                if input != [*width] {
                    return mismatch(format!("[{width}]"));
                }
                Ok(input.to_vec())
            }
            Layer::Gate2d { channels, .. } => {
                if input.len() != 3 || input[0] != *channels {
                    return mismatch(format!("[{channels}, H, W]"));
                }
                Ok(input.to_vec())
            }
        }
    }
}
