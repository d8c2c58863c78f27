use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::scalar::Scalar;

use super::params::{BufferId, Builder, Ctx, ParamId};

/// Weight and bias initialization of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn,
    Zeros,
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv3d {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, spec: ConvSpec, init: Init) -> Self {
        let fan_in = (spec.in_channels / spec.groups) * spec.kernel_volume();
        let bound = match init {
            Init::FanIn => 1.0 / (fan_in as f64).sqrt(),
            Init::Zeros => 0.0,
        };
        let weight = b.uniform("weight", &spec.weight_shape(), bound);
        let bias = spec.bias.then(|| b.uniform("bias", &[spec.out_channels], bound));
        Self { spec, weight, bias }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        cx.tape().conv3d(
            x,
            cx.param(self.weight),
            self.bias.map(|id| cx.param(id)),
            &self.spec,
        )
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose3d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl ConvTranspose3d {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, spec: ConvSpec, init: Init) -> Self {
        let fan_in = (spec.out_channels / spec.groups) * spec.kernel_volume();
        let bound = match init {
            Init::FanIn => 1.0 / (fan_in as f64).sqrt(),
            Init::Zeros => 0.0,
        };
        let weight = b.uniform("weight", &spec.transposed_weight_shape(), bound);
        let bias = spec.bias.then(|| b.uniform("bias", &[spec.out_channels], bound));
        Self { spec, weight, bias }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        cx.tape().conv_transpose3d(
            x,
            cx.param(self.weight),
            self.bias.map(|id| cx.param(id)),
            &self.spec,
        )
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm3d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BufferId,
}

impl BatchNorm3d {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, channels: usize) -> Self {
        Self {
            gamma: b.constant("gamma", &[channels], 1.0),
            beta: b.constant("beta", &[channels], 0.0),
            stats: b.running("running", channels),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let (y, stats) = cx.tape().batch_norm3d(
            x,
            cx.param(self.gamma),
            cx.param(self.beta),
            Some(cx.running(self.stats)),
            cx.opts().norm,
        )?;
        if let Some(s) = stats {
            cx.record_stats(self.stats, s);
        }
        Ok(y)
    }
}

/// Affine map applied to every column of an `(in, L)` input, or to a
/// length-`in` vector.
#[derive(Clone, Debug)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        in_features: usize,
        out_features: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let bound = match init {
            Init::FanIn => 1.0 / (in_features as f64).sqrt(),
            Init::Zeros => 0.0,
        };
        let weight = b.uniform("weight", &[out_features, in_features], bound);
        let bias = bias.then(|| b.uniform("bias", &[out_features], bound));
        Self {
            in_features,
            out_features,
            weight,
            bias,
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_features * self.out_features + if self.bias.is_some() { self.out_features } else { 0 }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let tape = cx.tape();
        let vector = x.shape().len() == 1;
        if x.shape()[0] != self.in_features || x.shape().len() > 2 {
            return Err(Error::shape(
                "linear",
                format!("input {:?} for {} input features", x.shape(), self.in_features),
            ));
        }
        let cols = if vector { tape.reshape(x, &[self.in_features, 1])? } else { x.clone() };
        let mut y = tape.matmul(cx.param(self.weight), &cols)?;
        if let Some(bias) = self.bias {
            y = tape.add_channel_bias(&y, cx.param(bias))?;
        }
        if vector {
            y = tape.reshape(&y, &[self.out_features])?;
        }
        Ok(y)
    }
}

/// Layer norm over the trailing extent.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub extent: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, extent: usize) -> Self {
        Self {
            extent,
            gamma: b.constant("gamma", &[extent], 1.0),
            beta: b.constant("beta", &[extent], 0.0),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        cx.tape()
            .layer_norm(x, self.extent, cx.param(self.gamma), cx.param(self.beta))
    }
}

/// Inverted dropout driven by the context's dropout seed.
pub fn dropout<T: Scalar>(cx: &Ctx<'_, T>, x: &Var<T>, p: f64) -> Result<Var<T>> {
    match cx.next_dropout_seed() {
        Some(seed) if p > 0.0 => cx.tape().dropout(x, p, seed),
        _ => Ok(x.clone()),
    }
}
