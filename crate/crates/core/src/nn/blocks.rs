use crate::autograd::Var;
use crate::error::Result;
use crate::ops::ConvSpec;
use crate::scalar::Scalar;

use super::layers::{dropout, BatchNorm3d, Conv3d, Init, Linear};
use super::params::{Builder, Ctx};

/// Two 3x3x3 conv + batch norm stages with a residual connection, followed by
/// ReLU and dropout. The shortcut is a strided 1x1x1 projection whenever the
/// channel count or resolution changes.
#[derive(Clone, Debug)]
pub struct BasicBlock3d {
    conv1: Conv3d,
    bn1: BatchNorm3d,
    conv2: Conv3d,
    bn2: BatchNorm3d,
    shortcut: Option<(Conv3d, BatchNorm3d)>,
    dropout: f64,
}

impl BasicBlock3d {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, in_ch: usize, out_ch: usize, stride: usize, dropout: f64) -> Self {
        let conv1 = Conv3d::new(
            &mut b.sub("conv1"),
            ConvSpec::new(in_ch, out_ch, 3).stride(stride).padding(1).bias(false),
            Init::FanIn,
        );
        let bn1 = BatchNorm3d::new(&mut b.sub("bn1"), out_ch);
        let conv2 = Conv3d::new(&mut b.sub("conv2"), ConvSpec::new(out_ch, out_ch, 3).padding(1).bias(false), Init::FanIn);
        let bn2 = BatchNorm3d::new(&mut b.sub("bn2"), out_ch);
        let shortcut = (in_ch != out_ch || stride != 1).then(|| {
            let mut s = b.sub("shortcut");
            let conv = Conv3d::new(&mut s.sub("conv"), ConvSpec::new(in_ch, out_ch, 1).stride(stride).bias(false), Init::FanIn);
            (conv, BatchNorm3d::new(&mut s.sub("bn"), out_ch))
        });
        Self {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
            dropout,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let tape = cx.tape();
        let h = tape.relu(&self.bn1.forward(cx, &self.conv1.forward(cx, x)?)?);
        let h = self.bn2.forward(cx, &self.conv2.forward(cx, &h)?)?;
        let s = match &self.shortcut {
            Some((conv, bn)) => bn.forward(cx, &conv.forward(cx, x)?)?,
            None => x.clone(),
        };
        let out = tape.relu(&tape.add(&h, &s)?);
        dropout(cx, &out, self.dropout)
    }
}

/// Channel recalibration: pool, bottleneck MLP, sigmoid gate.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    fc1: Linear,
    fc2: Linear,
}

impl SqueezeExcite {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction).max(1);
        Self {
            fc1: Linear::new(&mut b.sub("fc1"), channels, hidden, true, Init::FanIn),
            fc2: Linear::new(&mut b.sub("fc2"), hidden, channels, true, Init::Zeros),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let tape = cx.tape();
        let s = tape.global_avg_pool3d(x);
        let s = tape.relu(&self.fc1.forward(cx, &s)?);
        let g = tape.sigmoid(&self.fc2.forward(cx, &s)?);
        tape.scale_channels(x, &g)
    }
}

/// Dual-path feature refinement: a detail path (depthwise then pointwise
/// conv) and a dilated context path, an interaction conv over both, and a
/// softmax gate that mixes the two paths back into the residual stream.
#[derive(Clone, Debug)]
pub struct Dpfr {
    detail_dw: Conv3d,
    detail_bn1: BatchNorm3d,
    detail_pw: Conv3d,
    detail_bn2: BatchNorm3d,
    context1: Conv3d,
    context_bn1: BatchNorm3d,
    context2: Conv3d,
    context_bn2: BatchNorm3d,
    cross: Conv3d,
    gate: Linear,
}

/// Path outputs and gate weights of a [`Dpfr`] forward pass.
pub struct DpfrTrace<T: Scalar> {
    pub out: Var<T>,
    pub detail: Var<T>,
    pub context: Var<T>,
    pub interaction: Var<T>,
    /// `(w_detail, w_context)`.
    pub weights: Var<T>,
}

impl Dpfr {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, c: usize, dilation: usize) -> Self {
        let mut d = b.sub("detail");
        let detail_dw = Conv3d::new(&mut d.sub("dw"), ConvSpec::new(c, c, 3).padding(1).groups(c).bias(false), Init::FanIn);
        let detail_bn1 = BatchNorm3d::new(&mut d.sub("bn1"), c);
        let detail_pw = Conv3d::new(&mut d.sub("pw"), ConvSpec::new(c, c, 1).bias(false), Init::FanIn);
        let detail_bn2 = BatchNorm3d::new(&mut d.sub("bn2"), c);
        let mut k = b.sub("context");
        let dilated = ConvSpec::new(c, c, 3).padding(dilation).dilation(dilation).bias(false);
        let context1 = Conv3d::new(&mut k.sub("conv1"), dilated, Init::FanIn);
        let context_bn1 = BatchNorm3d::new(&mut k.sub("bn1"), c);
        let context2 = Conv3d::new(&mut k.sub("conv2"), dilated, Init::FanIn);
        let context_bn2 = BatchNorm3d::new(&mut k.sub("bn2"), c);
        let cross = Conv3d::new(&mut b.sub("cross"), ConvSpec::new(2 * c, c, 1), Init::FanIn);
        let gate = Linear::new(&mut b.sub("gate"), c, 2, true, Init::Zeros);
        Self {
            detail_dw,
            detail_bn1,
            detail_pw,
            detail_bn2,
            context1,
            context_bn1,
            context2,
            context_bn2,
            cross,
            gate,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        Ok(self.trace(cx, x)?.out)
    }

    pub fn trace<T: Scalar>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Result<DpfrTrace<T>> {
        let tape = cx.tape();
        let d = tape.relu(&self.detail_bn1.forward(cx, &self.detail_dw.forward(cx, x)?)?);
        let detail = tape.relu(&self.detail_bn2.forward(cx, &self.detail_pw.forward(cx, &d)?)?);
        let k = tape.relu(&self.context_bn1.forward(cx, &self.context1.forward(cx, x)?)?);
        let context = tape.relu(&self.context_bn2.forward(cx, &self.context2.forward(cx, &k)?)?);
        let interaction = self.cross.forward(cx, &tape.concat_rows(&[&detail, &context])?)?;
        let logits = self.gate.forward(cx, &tape.global_avg_pool3d(x))?;
        let weights = tape.softmax(&logits, 0)?;
        let wd = tape.slice_rows(&weights, 0, 1)?;
        let wc = tape.slice_rows(&weights, 1, 1)?;
        let mixed = tape.add(&tape.mul_scalar(&detail, &wd)?, &tape.mul_scalar(&context, &wc)?)?;
        let out = tape.add(&tape.add(x, &interaction)?, &mixed)?;
        Ok(DpfrTrace {
            out,
            detail,
            context,
            interaction,
            weights,
        })
    }
}
