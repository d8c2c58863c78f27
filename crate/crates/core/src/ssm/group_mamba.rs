use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv3d, Ctx, Init, LayerNorm, Linear, ParamId};
use crate::ops::ConvSpec;
use crate::scalar::Scalar;

use super::order::{ScanAxis, ScanOrder};

/// Hyper-parameters of one scanning group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupSpec {
    pub channels: usize,
    pub d_state: usize,
    pub order: ScanOrder,
}

impl GroupSpec {
    pub fn dt_rank(&self) -> usize {
        self.channels.div_ceil(16)
    }
}

/// Per-group selective-scan parameters and projections.
#[derive(Clone, Debug)]
pub struct MambaGroup {
    pub spec: GroupSpec,
    in_proj: Linear,
    conv: Conv3d,
    x_proj: Linear,
    dt_proj: Linear,
    a_log: ParamId,
    d_skip: ParamId,
    norm: LayerNorm,
    out_proj: Linear,
}

impl MambaGroup {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, spec: GroupSpec) -> Self {
        let (c, n, r) = (spec.channels, spec.d_state, spec.dt_rank());
        let in_proj = Linear::new(&mut b.sub("in_proj"), c, 2 * c, false, Init::FanIn);
        let conv = Conv3d::new(&mut b.sub("conv"), ConvSpec::new(c, c, 3).padding(1).groups(c), Init::FanIn);
        let x_proj = Linear::new(&mut b.sub("x_proj"), c, r + 2 * n, false, Init::FanIn);
        let dt_proj = Linear::new(&mut b.sub("dt_proj"), r, c, true, Init::FanIn);
        let a_log = b.param(
            "a_log",
            crate::Tensor::from_fn([c, n], |i| T::of(((i % n) as f64 + 1.0).ln())),
        );
        let d_skip = b.constant("d_skip", &[c], 1.0);
        let norm = LayerNorm::new(&mut b.sub("norm"), c);
        let out_proj = Linear::new(&mut b.sub("out_proj"), c, c, false, Init::FanIn);
        Self {
            spec,
            in_proj,
            conv,
            x_proj,
            dt_proj,
            a_log,
            d_skip,
            norm,
            out_proj,
        }
    }

    /// `(C, D, H, W)` to `(C, D, H, W)`.
    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let tape = cx.tape();
        let dims = x.value().dims3("mamba_group")?;
        let (c, n, r) = (self.spec.channels, self.spec.d_state, self.spec.dt_rank());
        let s = dims.iter().product::<usize>();
        let xz = self.in_proj.forward(cx, &tape.reshape(x, &[c, s])?)?;
        let xi = tape.reshape(&tape.slice_rows(&xz, 0, c)?, &[c, dims[0], dims[1], dims[2]])?;
        let z = tape.slice_rows(&xz, c, c)?;
        let xc = tape.silu(&self.conv.forward(cx, &xi)?);
        let seq = tape.flatten_volume(&xc, self.spec.order)?;
        let proj = self.x_proj.forward(cx, &seq)?;
        let dt_low = tape.slice_rows(&proj, 0, r)?;
        let bm = tape.slice_rows(&proj, r, n)?;
        let cm = tape.slice_rows(&proj, r + n, n)?;
        let delta = tape.softplus(&self.dt_proj.forward(cx, &dt_low)?);
        let a = tape.scale(&tape.exp(cx.param(self.a_log)), -1.0);
        let y = tape.selective_scan(&seq, &delta, &a, &bm, &cm, cx.param(self.d_skip))?;
        let y = tape.reshape(&tape.unflatten_volume(&y, self.spec.order, dims)?, &[c, s])?;
        let gated = tape.mul(&y, &tape.silu(&z))?;
        let normed = self.norm.forward(cx, &tape.transpose2d(&gated)?)?;
        let out = self.out_proj.forward(cx, &tape.transpose2d(&normed)?)?;
        tape.reshape(&out, &[c, dims[0], dims[1], dims[2]])
    }
}

/// Channel-affinity gate across all groups followed by a 1x1x1 channel mix.
#[derive(Clone, Debug)]
pub struct CrossGroupModulation {
    fc1: Linear,
    fc2: Linear,
    mix: Conv3d,
}

impl CrossGroupModulation {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, channels: usize) -> Self {
        let hidden = (channels / 4).max(1);
        Self {
            fc1: Linear::new(&mut b.sub("fc1"), channels, hidden, true, Init::FanIn),
            fc2: Linear::new(&mut b.sub("fc2"), hidden, channels, true, Init::Zeros),
            mix: Conv3d::new(&mut b.sub("mix"), ConvSpec::new(channels, channels, 1), Init::FanIn),
        }
    }

    /// Per-channel gate in `(0, 1)`.
    pub fn gate<T: Scalar>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let tape = cx.tape();
        let h = tape.silu(&self.fc1.forward(cx, &tape.global_avg_pool3d(x))?);
        Ok(tape.sigmoid(&self.fc2.forward(cx, &h)?))
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let g = self.gate(cx, x)?;
        self.mix.forward(cx, &cx.tape().scale_channels(x, &g)?)
    }
}

/// Channel-partitioned selective scanning: each group scans the volume in its
/// own order, the groups are concatenated, modulated across groups and added
/// back to the input.
#[derive(Clone, Debug)]
pub struct GroupMamba3d {
    channels: usize,
    groups: Vec<MambaGroup>,
    modulation: CrossGroupModulation,
}

impl GroupMamba3d {
    /// The default axis assignment for `groups` groups cycles through H, W, D, HW.
    pub fn default_orders(groups: usize) -> Vec<ScanOrder> {
        let axes = [ScanAxis::H, ScanAxis::W, ScanAxis::D, ScanAxis::HW];
        (0..groups).map(|g| ScanOrder::forward(axes[g % 4])).collect()
    }

    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, channels: usize, d_state: usize, orders: &[ScanOrder]) -> Result<Self> {
        let g = orders.len();
        if g == 0 || !channels.is_multiple_of(g) {
            return Err(Error::invalid(format!(
                "group_mamba3d: {channels} channels are not divisible into {g} groups"
            )));
        }
        let groups = orders
            .iter()
            .enumerate()
            .map(|(i, &order)| {
                let spec = GroupSpec {
                    channels: channels / g,
                    d_state,
                    order,
                };
                MambaGroup::new(&mut b.sub(&format!("group{i}")), spec)
            })
            .collect();
        let modulation = CrossGroupModulation::new(&mut b.sub("modulation"), channels);
        Ok(Self {
            channels,
            groups,
            modulation,
        })
    }

    pub fn groups(&self) -> &[MambaGroup] {
        &self.groups
    }

    pub fn modulation(&self) -> &CrossGroupModulation {
        &self.modulation
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let tape = cx.tape();
        if x.shape().len() != 4 || x.shape()[0] != self.channels {
            return Err(Error::shape(
                "group_mamba3d",
                format!("input {:?} for {} channels", x.shape(), self.channels),
            ));
        }
        let width = self.channels / self.groups.len();
        let outs = self
            .groups
            .iter()
            .enumerate()
            .map(|(i, grp)| grp.forward(cx, &tape.slice_rows(x, i * width, width)?))
            .collect::<Result<Vec<_>>>()?;
        let cat = tape.concat_rows(&outs.iter().collect::<Vec<_>>())?;
        tape.add(x, &self.modulation.forward(cx, &cat)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ForwardOptions, ParamStore};
    use crate::{Rng, Tape, Tensor};

    fn build(channels: usize, groups: usize) -> (ParamStore<f64>, GroupMamba3d) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(9);
        let block = GroupMamba3d::new(
            &mut Builder::new(&mut store, &mut rng),
            channels,
            8,
            &GroupMamba3d::default_orders(groups),
        )
        .unwrap();
        (store, block)
    }

    #[test]
    fn indivisible_channels_are_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(1);
        let r = GroupMamba3d::new(&mut Builder::new(&mut store, &mut rng), 30, 8, &GroupMamba3d::default_orders(4));
        assert!(r.is_err());
    }

    #[test]
    fn preserves_shape() {
        let (store, block) = build(16, 4);
        let tape = Tape::no_grad();
        let cx = Ctx::new(&tape, &store, ForwardOptions::eval());
        for dims in [[2, 3, 4], [1, 1, 1], [3, 2, 2]] {
            let x = tape.leaf(Tensor::from_fn([16, dims[0], dims[1], dims[2]], |i| (i as f64 * 0.37).sin()));
            assert_eq!(block.forward(&cx, &x).unwrap().shape(), x.shape());
        }
    }

    #[test]
    fn zero_branch_passes_input_through() {
        let (mut store, block) = build(16, 4);
        store.fill_where(|n| n.ends_with("out_proj.weight") || n.starts_with("modulation.mix.bias"), 0.0);
        let tape = Tape::no_grad();
        let cx = Ctx::new(&tape, &store, ForwardOptions::eval());
        let x = tape.leaf(Tensor::from_fn([16, 2, 2, 2], |i| i as f64 - 60.0));
        assert_eq!(block.forward(&cx, &x).unwrap().value(), x.value());
    }

    #[test]
    fn zero_final_gate_layer_gives_half() {
        let (store, block) = build(16, 4);
        let tape = Tape::no_grad();
        let cx = Ctx::new(&tape, &store, ForwardOptions::eval());
        let x = tape.leaf(Tensor::from_fn([16, 2, 2, 2], |i| (i as f64).cos()));
        let g = block.modulation().gate(&cx, &x).unwrap();
        assert!(g.value().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn grouping_reduces_parameters() {
        let grouped = build(128, 4).0.num_scalars();
        let single = build(128, 1).0.num_scalars();
        assert!(grouped < single, "{grouped} vs {single}");
    }
}
