//! Basic layers. Each layer stores the names of its tensors; the values live
//! in a [`ParameterStore`](crate::params::ParameterStore) and are bound to
//! graph leaves through a [`Ctx`].

use crate::error::{shape_err, Result};
use crate::graph::Var;
use crate::params::{Ctx, Init, Mode, ParamRegistry};
use crate::tensor::{Real, Tensor};
use crate::tokenizer::SoftSplitSpec;

pub const PROJ_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let weight = reg.param(format!("{prefix}.weight"), &[out_dim, in_dim], Init::TruncNormal { std: PROJ_STD });
        let bias = bias.then(|| reg.param(format!("{prefix}.bias"), &[out_dim], Init::Zeros));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn apply<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.param(&self.weight)?;
        let b = match &self.bias {
            Some(name) => Some(cx.param(name)?),
            None => None,
        };
        cx.graph.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, dim: usize) -> Self {
        Self {
            gamma: reg.param(format!("{prefix}.weight"), &[dim], Init::Ones),
            beta: reg.param(format!("{prefix}.bias"), &[dim], Init::Zeros),
            dim,
        }
    }

    pub fn apply<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = cx.param(&self.gamma)?;
        let b = cx.param(&self.beta)?;
        cx.graph.layer_norm(x, g, b, LN_EPS)
    }
}

/// Per-channel batch normalization with running averages for evaluation.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: String,
    pub beta: String,
    pub running_mean: String,
    pub running_var: String,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, channels: usize) -> Self {
        Self {
            gamma: reg.param(format!("{prefix}.weight"), &[channels], Init::Ones),
            beta: reg.param(format!("{prefix}.bias"), &[channels], Init::Zeros),
            running_mean: reg.buffer(format!("{prefix}.running_mean"), &[channels], Init::Zeros),
            running_var: reg.buffer(format!("{prefix}.running_var"), &[channels], Init::Ones),
            channels,
        }
    }

    pub fn apply<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = cx.param(&self.gamma)?;
        let b = cx.param(&self.beta)?;
        match cx.mode {
            Mode::Eval => {
                let rm = cx.buffer(&self.running_mean)?;
                let rv = cx.buffer(&self.running_var)?;
                Ok(cx.graph.batch_norm(x, g, b, Some((rm, rv)), BN_EPS)?.0)
            }
            Mode::Train => {
                let (y, stats) = cx.graph.batch_norm(x, g, b, None, BN_EPS)?;
                if let Some((mean, var)) = stats {
                    let m = T::c(BN_MOMENTUM);
                    let blend = |old: &Tensor<T>, new: &Tensor<T>| {
                        Tensor::from_fn(old.shape(), |i| {
                            (T::one() - m) * old.data()[i] + m * new.data()[i]
                        })
                    };
                    let rm = blend(cx.buffer(&self.running_mean)?, &mean);
                    let rv = blend(cx.buffer(&self.running_var)?, &var);
                    cx.buffer_updates.push((self.running_mean.clone(), rm));
                    cx.buffer_updates.push((self.running_var.clone(), rv));
                }
                Ok(y)
            }
        }
    }
}

/// 2-d convolution with a square window.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: String,
    pub bias: Option<String>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub window: SoftSplitSpec,
}

impl Conv2d {
    pub fn new(
        reg: &mut ParamRegistry,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        window: SoftSplitSpec,
        init: Init,
    ) -> Self {
        let k = window.kernel;
        Self {
            weight: reg.param(format!("{prefix}.weight"), &[out_channels, in_channels, k, k], init),
            bias: Some(reg.param(format!("{prefix}.bias"), &[out_channels], Init::Zeros)),
            in_channels,
            out_channels,
            window,
        }
    }

    pub fn apply<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let c = cx.graph.value(x).dims4("conv2d")?.1;
        if c != self.in_channels {
            return Err(shape_err("conv2d", format!("{c} channels, expected {}", self.in_channels)));
        }
        let w = cx.param(&self.weight)?;
        let b = match &self.bias {
            Some(name) => Some(cx.param(name)?),
            None => None,
        };
        cx.graph.conv2d(x, w, b, self.window)
    }
}
