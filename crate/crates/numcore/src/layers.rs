//! Layer kinds used by the IERN components and the layer-stack container.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NumError, Result};
use crate::graph::{Graph, Var};
use crate::param::ParamSet;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize },
    Relu,
    LeakyRelu { slope: f64 },
    BatchNorm { channels: usize },
    /// `x + relu(bn(conv(x)))` with a same-padded stride-1 convolution.
    ResidualBlock { channels: usize, kernel: usize },
    GlobalAvgPool,
    /// Joins the two stack inputs along the channel axis.
    ConcatChannels,
}

/// Whether batch norm normalizes with batch statistics or stored running ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl LayerSpec {
    /// Creates this layer's parameters under `prefix` in `params`.
    pub fn init(&self, prefix: &str, params: &mut ParamSet, rng: &mut impl Rng) -> Result<()> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                params.insert(format!("{prefix}.weight"), uniform(&[outputs, inputs], inputs, rng))?;
                params.insert(format!("{prefix}.bias"), Tensor::zeros(&[outputs]))?;
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, .. } => {
                if stride == 0 || kernel == 0 {
                    return Err(NumError::Config("conv2d kernel and stride must be positive".into()));
                }
                let fan_in = in_channels * kernel * kernel;
                params.insert(
                    format!("{prefix}.weight"),
                    uniform(&[out_channels, kernel, kernel, in_channels], fan_in, rng),
                )?;
                params.insert(format!("{prefix}.bias"), Tensor::zeros(&[out_channels]))?;
            }
            LayerSpec::BatchNorm { channels } => {
                params.insert(format!("{prefix}.gamma"), Tensor::filled(&[channels], 1.0))?;
                params.insert(format!("{prefix}.beta"), Tensor::zeros(&[channels]))?;
                params.insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]))?;
                params.insert_buffer(format!("{prefix}.running_var"), Tensor::filled(&[channels], 1.0))?;
            }
            LayerSpec::ResidualBlock { channels, kernel } => {
                if kernel % 2 == 0 {
                    return Err(NumError::Config("residual block needs an odd kernel".into()));
                }
                LayerSpec::Conv2d {
                    in_channels: channels,
                    out_channels: channels,
                    kernel,
                    stride: 1,
                    padding: kernel / 2,
                }
                .init(&format!("{prefix}.conv"), params, rng)?;
                LayerSpec::BatchNorm { channels }.init(&format!("{prefix}.bn"), params, rng)?;
            }
            LayerSpec::Relu | LayerSpec::LeakyRelu { .. } | LayerSpec::GlobalAvgPool | LayerSpec::ConcatChannels => {}
        }
        Ok(())
    }
}

impl std::str::FromStr for LayerSpec {
    type Err = NumError;

    /// Compact text form: `dense(in,out)`, `conv2d(in,out,k,s,p)`, `relu`,
    /// `leaky_relu(slope)`, `batchnorm(c)`, `residual(c,k)`, `gap`, `concat`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (kind, args) = match s.find('(') {
            Some(i) if s.ends_with(')') => (&s[..i], &s[i + 1..s.len() - 1]),
            Some(_) => return Err(NumError::Config(format!("malformed layer {s:?}"))),
            None => (s, ""),
        };
        let nums: Vec<&str> = args.split(',').map(str::trim).filter(|a| !a.is_empty()).collect();
        let int = |i: usize| -> Result<usize> {
            nums.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| NumError::Config(format!("layer {s:?}: bad argument {i}")))
        };
        let arity = |n: usize| -> Result<()> {
            if nums.len() == n {
                Ok(())
            } else {
                Err(NumError::Config(format!("layer {s:?} takes {n} argument(s)")))
            }
        };
        match kind.trim() {
            "dense" => {
                arity(2)?;
                Ok(LayerSpec::Dense { inputs: int(0)?, outputs: int(1)? })
            }
            "conv2d" => {
                arity(5)?;
                Ok(LayerSpec::Conv2d {
                    in_channels: int(0)?,
                    out_channels: int(1)?,
                    kernel: int(2)?,
                    stride: int(3)?,
                    padding: int(4)?,
                })
            }
            "relu" => arity(0).map(|_| LayerSpec::Relu),
            "leaky_relu" => {
                arity(1)?;
                let slope = nums[0]
                    .parse()
                    .map_err(|_| NumError::Config(format!("layer {s:?}: bad slope")))?;
                Ok(LayerSpec::LeakyRelu { slope })
            }
            "batchnorm" => {
                arity(1)?;
                Ok(LayerSpec::BatchNorm { channels: int(0)? })
            }
            "residual" => {
                arity(2)?;
                Ok(LayerSpec::ResidualBlock { channels: int(0)?, kernel: int(1)? })
            }
            "gap" => arity(0).map(|_| LayerSpec::GlobalAvgPool),
            "concat" => arity(0).map(|_| LayerSpec::ConcatChannels),
            other => Err(NumError::Config(format!("unknown layer kind {other:?}"))),
        }
    }
}

/// Uniform fan-in initialization, bound `1/sqrt(fan_in)`.
fn uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::raw(shape.to_vec(), data)
}

/// Applies one layer. `inputs` holds one variable, or two for
/// [`LayerSpec::ConcatChannels`].
pub fn layer_forward(
    g: &mut Graph,
    spec: &LayerSpec,
    set: &str,
    prefix: &str,
    inputs: &[Var],
    params: &ParamSet,
    mode: Mode,
) -> Result<Var> {
    let expected = if matches!(spec, LayerSpec::ConcatChannels) { 2 } else { 1 };
    if inputs.len() != expected {
        return Err(NumError::Shape(format!(
            "{spec:?} takes {expected} input(s), got {}",
            inputs.len()
        )));
    }
    let x = inputs[0];
    match *spec {
        LayerSpec::Dense { inputs: cin, .. } => {
            if g.value(x).channels() != cin {
                return Err(NumError::Shape(format!("dense expects {cin} features, got {:?}", g.shape(x))));
            }
            let w = g.param(set, &format!("{prefix}.weight"), params)?;
            let b = g.param(set, &format!("{prefix}.bias"), params)?;
            let y = g.linear(x, w)?;
            g.add_bias(y, b)
        }
        LayerSpec::Conv2d { in_channels, stride, padding, .. } => {
            let s = g.shape(x);
            if s.len() != 4 || s[3] != in_channels {
                return Err(NumError::Shape(format!("conv2d expects {in_channels} channels, got {s:?}")));
            }
            let w = g.param(set, &format!("{prefix}.weight"), params)?;
            let b = g.param(set, &format!("{prefix}.bias"), params)?;
            let y = g.conv2d(x, w, stride, padding)?;
            g.add_bias(y, b)
        }
        LayerSpec::Relu => Ok(g.relu(x)),
        LayerSpec::LeakyRelu { slope } => Ok(g.leaky_relu(x, slope)),
        LayerSpec::BatchNorm { channels } => {
            if g.value(x).channels() != channels {
                return Err(NumError::Shape(format!("batch norm over {channels} channels, got {:?}", g.shape(x))));
            }
            let gamma = g.param(set, &format!("{prefix}.gamma"), params)?;
            let beta = g.param(set, &format!("{prefix}.beta"), params)?;
            match mode {
                Mode::Train => g.batch_norm(x, gamma, beta, None, BN_EPS, set, prefix),
                Mode::Eval => {
                    let mean = params.buffer(&format!("{prefix}.running_mean"))?.data();
                    let var = params.buffer(&format!("{prefix}.running_var"))?.data();
                    g.batch_norm(x, gamma, beta, Some((mean, var)), BN_EPS, set, prefix)
                }
            }
        }
        LayerSpec::ResidualBlock { channels, kernel } => {
            let conv = LayerSpec::Conv2d {
                in_channels: channels,
                out_channels: channels,
                kernel,
                stride: 1,
                padding: kernel / 2,
            };
            let h = layer_forward(g, &conv, set, &format!("{prefix}.conv"), &[x], params, mode)?;
            let h = layer_forward(g, &LayerSpec::BatchNorm { channels }, set, &format!("{prefix}.bn"), &[h], params, mode)?;
            let h = g.relu(h);
            g.add(x, h)
        }
        LayerSpec::GlobalAvgPool => g.global_avg_pool(x),
        LayerSpec::ConcatChannels => g.concat(x, inputs[1]),
    }
}

/// A sequential stack of layers with its own parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack {
    pub layers: Vec<LayerSpec>,
    pub params: ParamSet,
}

impl Stack {
    pub fn new(layers: Vec<LayerSpec>, rng: &mut impl Rng) -> Result<Self> {
        let mut params = ParamSet::new();
        for (i, layer) in layers.iter().enumerate() {
            layer.init(&i.to_string(), &mut params, rng)?;
        }
        Ok(Self { layers, params })
    }

    /// Runs the stack. A leading [`LayerSpec::ConcatChannels`] consumes both
    /// inputs; every other stack takes exactly one.
    pub fn forward(&self, g: &mut Graph, set: &str, inputs: &[Var], mode: Mode) -> Result<Var> {
        let mut current: Vec<Var> = inputs.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer_forward(g, layer, set, &i.to_string(), &current, &self.params, mode)?;
            current = vec![y];
        }
        match current.as_slice() {
            [y] => Ok(*y),
            _ => Err(NumError::Shape(format!("stack left {} outputs", current.len()))),
        }
    }

    /// Folds batch statistics observed in `g` for component `set` into the
    /// running buffers.
    pub fn absorb_batch_stats(&mut self, set: &str, stats: &[crate::graph::BatchStats]) -> Result<()> {
        for s in stats.iter().filter(|s| s.set == set) {
            let mean = self.params.buffer_mut(&format!("{}.running_mean", s.prefix))?;
            for (r, m) in mean.data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let var = self.params.buffer_mut(&format!("{}.running_var", s.prefix))?;
            for (r, v) in var.data_mut().iter_mut().zip(&s.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
        Ok(())
    }
}
