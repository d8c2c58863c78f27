use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{
    BasicBlock3d, Builder, Conv3d, ConvTranspose3d, Ctx, Dpfr, Init, ParamStore, SqueezeExcite,
};
use crate::ops::ConvSpec;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::ssm::GroupMamba3d;

use super::config::ModelConfig;

/// Four residual stages; the first three halve the resolution and emit skips.
#[derive(Clone, Debug)]
pub struct Encoder {
    stages: [BasicBlock3d; 4],
}

/// Encoder outputs.
pub struct EncoderOut<T: Scalar> {
    pub skips: [Var<T>; 3],
    pub bottom: Var<T>,
}

impl Encoder {
    pub(crate) fn new<T: Scalar>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Self {
        let s = cfg.stage_channels;
        let ins = [cfg.in_channels, s[0], s[1], s[2]];
        let strides = [2, 2, 2, 1];
        let stages = std::array::from_fn(|i| {
            BasicBlock3d::new(&mut b.sub(&format!("stage{}", i + 1)), ins[i], s[i], strides[i], cfg.dropout)
        });
        Self { stages }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Result<EncoderOut<T>> {
        let e1 = self.stages[0].forward(cx, x)?;
        let e2 = self.stages[1].forward(cx, &e1)?;
        let e3 = self.stages[2].forward(cx, &e2)?;
        let bottom = self.stages[3].forward(cx, &e3)?;
        Ok(EncoderOut {
            skips: [e1, e2, e3],
            bottom,
        })
    }
}

/// Grouped selective scanning, squeeze-excitation and a residual block.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub mamba: GroupMamba3d,
    pub se: SqueezeExcite,
    pub block: BasicBlock3d,
}

impl Bottleneck {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.stage_channels[3];
        let mamba = GroupMamba3d::new(
            &mut b.sub("mamba"),
            c,
            cfg.d_state,
            &GroupMamba3d::default_orders(cfg.groups),
        )?;
        let se = SqueezeExcite::new(&mut b.sub("se"), c, cfg.se_ratio);
        let block = BasicBlock3d::new(&mut b.sub("block"), c, c, 1, cfg.dropout);
        Ok(Self { mamba, se, block })
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.mamba.forward(cx, x)?;
        let h = self.se.forward(cx, &h)?;
        self.block.forward(cx, &h)
    }
}

/// Upsample, concatenate the skip, fuse, refine.
#[derive(Clone, Debug)]
pub struct DecoderStage {
    up: ConvTranspose3d,
    block: BasicBlock3d,
    dpfr: Option<Dpfr>,
}

impl DecoderStage {
    pub(crate) fn new<T: Scalar>(b: &mut Builder<'_, T>, cfg: &ModelConfig, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        let up = ConvTranspose3d::new(
            &mut b.sub("up"),
            ConvSpec::new(in_ch, out_ch, stride).stride(stride),
            Init::FanIn,
        );
        let block = BasicBlock3d::new(&mut b.sub("block"), 2 * out_ch, out_ch, 1, cfg.dropout);
        let dpfr = cfg.dpfr.then(|| Dpfr::new(&mut b.sub("dpfr"), out_ch, cfg.dpfr_dilation));
        Self { up, block, dpfr }
    }

    pub fn dpfr(&self) -> Option<&Dpfr> {
        self.dpfr.as_ref()
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, x: &Var<T>, skip: &Var<T>) -> Result<Var<T>> {
        let tape = cx.tape();
        let u = self.up.forward(cx, x)?;
        if u.shape()[1..] != skip.shape()[1..] {
            return Err(Error::shape(
                "decoder_stage",
                format!("upsampled {:?} does not match skip {:?}", u.shape(), skip.shape()),
            ));
        }
        let h = self.block.forward(cx, &tape.concat_rows(&[&u, skip])?)?;
        match &self.dpfr {
            Some(d) => d.forward(cx, &h),
            None => Ok(h),
        }
    }
}

/// Learned x2 upsampling that halves the channel count.
#[derive(Clone, Debug)]
pub struct LearnedUpsample {
    up: ConvTranspose3d,
    block: BasicBlock3d,
}

impl LearnedUpsample {
    pub(crate) fn new<T: Scalar>(b: &mut Builder<'_, T>, in_ch: usize, out_ch: usize, dropout: f64) -> Self {
        Self {
            up: ConvTranspose3d::new(&mut b.sub("up"), ConvSpec::new(in_ch, out_ch, 2).stride(2), Init::FanIn),
            block: BasicBlock3d::new(&mut b.sub("block"), out_ch, out_ch, 1, dropout),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        self.block.forward(cx, &self.up.forward(cx, x)?)
    }
}

/// Progressive aggregation `U(U(D3) + D2) + D1`.
#[derive(Clone, Debug)]
pub struct Pfa {
    up3: LearnedUpsample,
    up2: LearnedUpsample,
}

impl Pfa {
    pub(crate) fn new<T: Scalar>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Self {
        let s = cfg.stage_channels;
        Self {
            up3: LearnedUpsample::new(&mut b.sub("up3"), s[2], s[1], cfg.dropout),
            up2: LearnedUpsample::new(&mut b.sub("up2"), s[1], s[0], cfg.dropout),
        }
    }

    pub fn aggregate<T: Scalar>(&self, cx: &Ctx<'_, T>, d: &[Var<T>; 3]) -> Result<Var<T>> {
        let tape = cx.tape();
        let [d1, d2, d3] = d;
        let u3 = self.up3.forward(cx, d3)?;
        let u2 = self.up2.forward(cx, &tape.add(&u3, d2)?)?;
        tape.add(&u2, d1)
    }
}

/// Refinement, the final x2 upsampling, and class projection.
#[derive(Clone, Debug)]
pub struct Head {
    block: BasicBlock3d,
    proj: Conv3d,
    up: ConvTranspose3d,
}

impl Head {
    pub(crate) fn new<T: Scalar>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Self {
        let c = cfg.stage_channels[0];
        let k = cfg.num_classes;
        Self {
            block: BasicBlock3d::new(&mut b.sub("block"), c, c, 1, cfg.dropout),
            up: ConvTranspose3d::new(&mut b.sub("up"), ConvSpec::new(c, c, 2).stride(2), Init::FanIn),
            proj: Conv3d::new(&mut b.sub("proj"), ConvSpec::new(c, k, 1), Init::FanIn),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.block.forward(cx, x)?;
        let h = cx.tape().relu(&self.up.forward(cx, &h)?);
        self.proj.forward(cx, &h)
    }
}

/// Network outputs. `aux` holds the deep-supervision logits from D3, D2 and
/// D1 (in that order) when they were requested.
pub struct ModelOutput<T: Scalar> {
    pub logits: Var<T>,
    pub aux: Option<[Var<T>; 3]>,
    /// Decoder outputs `(D1, D2, D3)`.
    pub decoder: [Var<T>; 3],
}

/// The complete segmentation network. Parameters live in a separate
/// [`ParamStore`] so the same structure serves any precision.
#[derive(Clone, Debug)]
pub struct MmriNet {
    config: ModelConfig,
    pub encoder: Encoder,
    pub bottleneck: Bottleneck,
    /// Decoder stages producing `(D1, D2, D3)`.
    pub decoder: [DecoderStage; 3],
    pub pfa: Option<Pfa>,
    pub head: Head,
    pub aux: Option<[Conv3d; 3]>,
}

impl MmriNet {
    /// Build the network and initialize its parameters from `seed`.
    pub fn new<T: Scalar>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let s = config.stage_channels;
        let encoder = Encoder::new(&mut b.sub("encoder"), &config);
        let bottleneck = Bottleneck::new(&mut b.sub("bottleneck"), &config)?;
        let decoder = {
            let mut d = b.sub("decoder");
            let stage3 = DecoderStage::new(&mut d.sub("stage3"), &config, s[3], s[2], 1);
            let stage2 = DecoderStage::new(&mut d.sub("stage2"), &config, s[2], s[1], 2);
            let stage1 = DecoderStage::new(&mut d.sub("stage1"), &config, s[1], s[0], 2);
            [stage1, stage2, stage3]
        };
        let pfa = config.pfa.then(|| Pfa::new(&mut b.sub("pfa"), &config));
        let head = Head::new(&mut b.sub("head"), &config);
        let aux = config.deep_supervision.then(|| {
            let mut a = b.sub("aux");
            let k = config.num_classes;
            let mut head = |name: &str, c: usize| Conv3d::new(&mut a.sub(name), ConvSpec::new(c, k, 1), Init::FanIn);
            [head("d3", s[2]), head("d2", s[1]), head("d1", s[0])]
        });
        let net = Self {
            config,
            encoder,
            bottleneck,
            decoder,
            pfa,
            head,
            aux,
        };
        Ok((net, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Result<ModelOutput<T>> {
        let dims = self.config.check_input(x.shape())?;
        let tape = cx.tape();
        let enc = self.encoder.forward(cx, x)?;
        let bottom = self.bottleneck.forward(cx, &enc.bottom)?;
        let d3 = self.decoder[2].forward(cx, &bottom, &enc.skips[2])?;
        let d2 = self.decoder[1].forward(cx, &d3, &enc.skips[1])?;
        let d1 = self.decoder[0].forward(cx, &d2, &enc.skips[0])?;
        drop(enc);
        let decoder = [d1, d2, d3];
        let h = match &self.pfa {
            Some(pfa) => tape.add(&pfa.aggregate(cx, &decoder)?, &decoder[0])?,
            None => decoder[0].clone(),
        };
        let logits = self.head.forward(cx, &h)?;
        let aux = match (&self.aux, cx.opts().aux_heads) {
            (Some(heads), true) => {
                let [d1, d2, d3] = &decoder;
                let mut out = Vec::with_capacity(3);
                for (conv, d) in heads.iter().zip([d3, d2, d1]) {
                    out.push(tape.upsample_trilinear(&conv.forward(cx, d)?, dims)?);
                }
                Some(out.try_into().map_err(|_| Error::invalid("aux heads"))?)
            }
            _ => None,
        };
        Ok(ModelOutput { logits, aux, decoder })
    }
}
