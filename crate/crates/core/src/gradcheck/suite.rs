//! Gradient-check suites at three granularities: single operators, network
//! modules, and the whole model.

use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use super::{check_fn, check_probes, project, random_away_from_zero, random_tensor, sample_indices};
use super::{CheckOutcome, GradCheckOptions, Input, Probe};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::loss::FOCAL_GAMMA;
use crate::model::{DecoderStage, MmriNet, ModelConfig, Pfa};
use crate::nn::{BasicBlock3d, Builder, Ctx, Dpfr, ForwardOptions, ParamStore, SqueezeExcite};
use crate::ops::{ConvSpec, NormMode, RunningStats};
use crate::rng::Rng;
use crate::ssm::{GroupMamba3d, ScanOrder};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Op,
    Module,
    Model,
}

#[derive(Clone, Debug, Default)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Replace the backward pass of the named operator check by a wrong one.
    pub corrupt: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub scope: Scope,
    pub seed: u64,
    pub passed: bool,
    pub seconds: f64,
    /// One entry per operator, module or submodule, with its worst element.
    pub checks: Vec<CheckOutcome>,
}

impl SuiteReport {
    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed())
    }
}

pub fn run(scope: Scope, opts: &SuiteOptions) -> Result<SuiteReport> {
    let t = Instant::now();
    let checks = match scope {
        Scope::Op => op_suite(opts)?,
        Scope::Module => module_suite(opts.seed)?,
        Scope::Model => model_suite(opts.seed)?,
    };
    Ok(SuiteReport {
        scope,
        seed: opts.seed,
        passed: checks.iter().all(CheckOutcome::passed),
        seconds: t.elapsed().as_secs_f64(),
        checks,
    })
}

/// Difference step of the end-to-end check. Its loss sums every logit, so it
/// is large enough that a 1e-6 step drowns in rounding error.
pub const MODEL_STEP: f64 = 1e-4;

type OpFn = Box<dyn Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>>;

struct OpCase {
    name: &'static str,
    inputs: Vec<Input>,
    f: OpFn,
    /// The function already returns a scalar loss.
    scalar: bool,
}

fn case(
    name: &'static str,
    inputs: Vec<Input>,
    f: impl Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>> + 'static,
) -> OpCase {
    OpCase {
        name,
        inputs,
        f: Box::new(f),
        scalar: false,
    }
}

fn loss_case(
    name: &'static str,
    inputs: Vec<Input>,
    f: impl Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>> + 'static,
) -> OpCase {
    OpCase {
        scalar: true,
        ..case(name, inputs, f)
    }
}

fn inp(name: &str, t: Tensor<f64>) -> Input {
    Input::new(name, t)
}

fn binary(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 })
}

fn conv_case(name: &'static str, spec: ConvSpec, dims: [usize; 3], rng: &mut Rng) -> OpCase {
    let mut inputs = vec![
        inp("x", random_tensor(&[spec.in_channels, dims[0], dims[1], dims[2]], 1.0, rng)),
        inp("weight", random_tensor(&spec.weight_shape(), 0.5, rng)),
    ];
    if spec.bias {
        inputs.push(inp("bias", random_tensor(&[spec.out_channels], 0.5, rng)));
    }
    case(name, inputs, move |t, v| t.conv3d(&v[0], &v[1], v.get(2), &spec))
}

fn conv_t_case(name: &'static str, spec: ConvSpec, dims: [usize; 3], rng: &mut Rng) -> OpCase {
    let mut inputs = vec![
        inp("x", random_tensor(&[spec.in_channels, dims[0], dims[1], dims[2]], 1.0, rng)),
        inp("weight", random_tensor(&spec.transposed_weight_shape(), 0.5, rng)),
    ];
    if spec.bias {
        inputs.push(inp("bias", random_tensor(&[spec.out_channels], 0.5, rng)));
    }
    case(name, inputs, move |t, v| t.conv_transpose3d(&v[0], &v[1], v.get(2), &spec))
}

fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = Rng::new(seed);
    let r = &mut rng;
    let vol = [2, 3, 2, 4];
    let mut cases = vec![
        case("add", vec![inp("a", random_tensor(&vol, 1.0, r)), inp("b", random_tensor(&vol, 1.0, r))], |t, v| {
            t.add(&v[0], &v[1])
        }),
        case("sub", vec![inp("a", random_tensor(&vol, 1.0, r)), inp("b", random_tensor(&vol, 1.0, r))], |t, v| {
            t.sub(&v[0], &v[1])
        }),
        case("mul", vec![inp("a", random_tensor(&vol, 1.0, r)), inp("b", random_tensor(&vol, 1.0, r))], |t, v| {
            t.mul(&v[0], &v[1])
        }),
        case("scale", vec![inp("a", random_tensor(&vol, 1.0, r))], |t, v| Ok(t.scale(&v[0], -1.75))),
        case("relu", vec![inp("a", random_away_from_zero(&vol, 0.05, r))], |t, v| Ok(t.relu(&v[0]))),
        case("sigmoid", vec![inp("a", random_tensor(&vol, 3.0, r))], |t, v| Ok(t.sigmoid(&v[0]))),
        case("silu", vec![inp("a", random_tensor(&vol, 3.0, r))], |t, v| Ok(t.silu(&v[0]))),
        case("softplus", vec![inp("a", random_tensor(&vol, 3.0, r))], |t, v| Ok(t.softplus(&v[0]))),
        case("exp", vec![inp("a", random_tensor(&vol, 1.0, r))], |t, v| Ok(t.exp(&v[0]))),
        case("sum", vec![inp("a", random_tensor(&vol, 1.0, r))], |t, v| Ok(t.sum(&v[0]))),
        case("mean", vec![inp("a", random_tensor(&vol, 1.0, r))], |t, v| Ok(t.mean(&v[0]))),
        case("global_avg_pool3d", vec![inp("a", random_tensor(&vol, 1.0, r))], |t, v| {
            Ok(t.global_avg_pool3d(&v[0]))
        }),
        case("reshape", vec![inp("a", random_tensor(&vol, 1.0, r))], |t, v| t.reshape(&v[0], &[6, 8])),
        case("slice_rows", vec![inp("a", random_tensor(&[4, 3, 2], 1.0, r))], |t, v| t.slice_rows(&v[0], 1, 2)),
        case(
            "concat_rows",
            vec![inp("a", random_tensor(&[2, 5], 1.0, r)), inp("b", random_tensor(&[3, 5], 1.0, r))],
            |t, v| t.concat_rows(&[&v[0], &v[1]]),
        ),
        case("transpose2d", vec![inp("a", random_tensor(&[3, 5], 1.0, r))], |t, v| t.transpose2d(&v[0])),
        case("permute_inner", vec![inp("a", random_tensor(&[2, 5], 1.0, r))], |t, v| {
            t.permute_inner(&v[0], Arc::new(vec![3, 0, 4, 1, 2]), &[2, 5])
        }),
        case(
            "matmul",
            vec![inp("a", random_tensor(&[3, 4], 1.0, r)), inp("b", random_tensor(&[4, 5], 1.0, r))],
            |t, v| t.matmul(&v[0], &v[1]),
        ),
        case(
            "add_channel_bias",
            vec![inp("x", random_tensor(&vol, 1.0, r)), inp("bias", random_tensor(&[2], 1.0, r))],
            |t, v| t.add_channel_bias(&v[0], &v[1]),
        ),
        case(
            "scale_channels",
            vec![inp("x", random_tensor(&vol, 1.0, r)), inp("s", random_tensor(&[2], 1.0, r))],
            |t, v| t.scale_channels(&v[0], &v[1]),
        ),
        case(
            "mul_scalar",
            vec![inp("x", random_tensor(&vol, 1.0, r)), inp("s", random_tensor(&[1], 1.0, r))],
            |t, v| t.mul_scalar(&v[0], &v[1]),
        ),
    ];
    cases.push(conv_case("conv3d", ConvSpec::new(3, 4, 3).padding(1), [3, 4, 3], r));
    cases.push(conv_case("conv3d_strided", ConvSpec::new(2, 3, 3).stride(2).padding(1).bias(false), [5, 4, 6], r));
    cases.push(conv_case("conv3d_dilated", ConvSpec::new(2, 2, 3).padding(2).dilation(2), [4, 5, 4], r));
    cases.push(conv_case("conv3d_depthwise", ConvSpec::new(4, 4, 3).padding(1).groups(4), [3, 3, 3], r));
    cases.push(conv_case("conv3d_pointwise", ConvSpec::new(5, 3, 1), [2, 3, 4], r));
    cases.push(conv_t_case("conv_transpose3d", ConvSpec::new(4, 3, 2).stride(2), [2, 3, 2], r));
    cases.push(conv_t_case("conv_transpose3d_pointwise", ConvSpec::new(3, 2, 1).bias(false), [2, 2, 3], r));
    cases.push(conv_t_case(
        "conv_transpose3d_grouped",
        ConvSpec::new(4, 2, 3).stride(2).padding(1).groups(2),
        [2, 2, 2],
        r,
    ));
    for (name, mode) in [("batch_norm3d_train", NormMode::Train), ("batch_norm3d_eval", NormMode::Eval)] {
        let mut stats = RunningStats::<f64>::new(3);
        stats.mean = random_tensor(&[3], 0.5, r);
        stats.var = Tensor::from_fn([3], |_| r.uniform_in(0.5, 2.0));
        cases.push(case(
            name,
            vec![
                inp("x", random_tensor(&[3, 2, 3, 2], 1.0, r)),
                inp("gamma", Tensor::from_fn([3], |_| r.uniform_in(0.5, 1.5))),
                inp("beta", random_tensor(&[3], 0.5, r)),
            ],
            move |t, v| Ok(t.batch_norm3d(&v[0], &v[1], &v[2], Some(&stats), mode)?.0),
        ));
    }
    cases.push(case(
        "layer_norm",
        vec![
            inp("x", random_tensor(&[4, 6], 1.0, r)),
            inp("gamma", Tensor::from_fn([6], |_| r.uniform_in(0.5, 1.5))),
            inp("beta", random_tensor(&[6], 0.5, r)),
        ],
        |t, v| t.layer_norm(&v[0], 6, &v[1], &v[2]),
    ));
    cases.push(case("softmax", vec![inp("x", random_tensor(&[3, 4], 2.0, r))], |t, v| t.softmax(&v[0], 0)));
    cases.push(case("softmax_inner", vec![inp("x", random_tensor(&[3, 4], 2.0, r))], |t, v| {
        t.softmax(&v[0], 1)
    }));
    cases.push(case("dropout", vec![inp("x", random_tensor(&vol, 1.0, r))], |t, v| t.dropout(&v[0], 0.3, 11)));
    cases.push(case("upsample_trilinear", vec![inp("x", random_tensor(&[2, 2, 3, 2], 1.0, r))], |t, v| {
        t.upsample_trilinear(&v[0], [4, 5, 6])
    }));
    let (d, n, l) = (3, 4, 9);
    cases.push(case(
        "selective_scan",
        vec![
            inp("x", random_tensor(&[d, l], 1.0, r)),
            inp("delta", Tensor::from_fn([d, l], |_| r.uniform_in(0.05, 1.0))),
            inp("a", Tensor::from_fn([d, n], |_| r.uniform_in(-2.0, -0.1))),
            inp("b", random_tensor(&[n, l], 1.0, r)),
            inp("c", random_tensor(&[n, l], 1.0, r)),
            inp("d", random_tensor(&[d], 1.0, r)),
        ],
        |t, v| t.selective_scan(&v[0], &v[1], &v[2], &v[3], &v[4], &v[5]),
    ));
    for order in ScanOrder::all().into_iter().step_by(3) {
        let name = match order.axis {
            crate::ssm::ScanAxis::H => "flatten_volume_h",
            crate::ssm::ScanAxis::W => "flatten_volume_w",
            crate::ssm::ScanAxis::D => "flatten_volume_d",
            crate::ssm::ScanAxis::HW => "flatten_volume_hw",
        };
        cases.push(case(name, vec![inp("x", random_tensor(&[2, 2, 3, 2], 1.0, r))], move |t, v| {
            let s = t.flatten_volume(&v[0], order)?;
            let s = t.mul(&s, &s)?;
            t.unflatten_volume(&s, order, [2, 3, 2])
        }));
    }
    let target = binary(&[3, 2, 2, 3], r);
    let tg = target.clone();
    cases.push(loss_case(
        "dice_loss",
        vec![inp("probs", Tensor::from_fn([3, 2, 2, 3], |_| r.uniform_in(0.05, 0.95)))],
        move |t, v| t.dice_loss(&v[0], &tg),
    ));
    let tg = target.clone();
    cases.push(loss_case("focal_loss", vec![inp("logits", random_tensor(&[3, 2, 2, 3], 3.0, r))], move |t, v| {
        t.focal_loss(&v[0], &tg, FOCAL_GAMMA)
    }));
    let tg = target.clone();
    cases.push(loss_case(
        "deep_supervision_loss",
        (0..4).map(|k| inp(&format!("out{k}"), random_tensor(&[3, 2, 2, 3], 3.0, r))).collect(),
        move |t, v| t.deep_supervision_loss([&v[0], &v[1], &v[2], &v[3]], &tg, [0.2, 0.3, 0.3, 0.2]),
    ));
    cases
}

/// Names of all operator checks, in suite order.
pub fn op_names() -> Vec<&'static str> {
    op_cases(0).iter().map(|c| c.name).collect()
}

fn corrupt(tape: &Tape<f64>, y: &Var<f64>) -> Var<f64> {
    tape.custom("corrupted", y.value().clone(), &[y], |g, _| Ok(vec![Some(g.scale(1.5))]))
}

pub fn op_suite(opts: &SuiteOptions) -> Result<Vec<CheckOutcome>> {
    if let Some(name) = &opts.corrupt {
        if !op_names().contains(&name.as_str()) {
            return Err(Error::invalid(format!("no operator check named {name:?}")));
        }
    }
    let gc = GradCheckOptions {
        seed: opts.seed,
        ..Default::default()
    };
    let mut out = Vec::new();
    for c in op_cases(opts.seed) {
        let bad = opts.corrupt.as_deref() == Some(c.name);
        let (f, scalar, seed) = (c.f, c.scalar, opts.seed);
        out.push(check_fn(
            c.name,
            &c.inputs,
            move |t, v| {
                let mut y = f(t, v)?;
                if bad {
                    y = corrupt(t, &y);
                }
                if scalar {
                    Ok(y)
                } else {
                    project(t, &y, seed)
                }
            },
            &gc,
        )?);
    }
    Ok(out)
}

/// Give every parameter generic random values so that no branch starts at
/// an exactly zero (and hence gradient-blocking) state.
pub fn randomize_params(store: &mut ParamStore<f64>, rng: &mut Rng) {
    let names: Vec<String> = store.params().iter().map(|p| p.name.clone()).collect();
    for (i, name) in names.iter().enumerate() {
        let p = store.param_by_index_mut(i);
        let fan = p.shape().iter().skip(1).product::<usize>().max(1) as f64;
        for v in p.data_mut() {
            *v = if name.ends_with("gamma") {
                rng.uniform_in(0.6, 1.4)
            } else if name.ends_with("a_log") || name.ends_with("d_skip") {
                *v + rng.uniform_in(-0.2, 0.2)
            } else if name.ends_with("beta") || name.ends_with("bias") {
                rng.uniform_in(-0.2, 0.2)
            } else {
                rng.uniform_in(-1.0, 1.0) * (3.0 / fan).sqrt()
            };
        }
    }
}

/// Randomize running statistics away from their `(0, 1)` start.
fn randomize_buffers(store: &mut ParamStore<f64>, rng: &mut Rng) {
    for i in 0..store.buffers().len() {
        let b = store.buffer_mut(i);
        for m in b.mean.data_mut() {
            *m = rng.uniform_in(-0.3, 0.3);
        }
        for v in b.var.data_mut() {
            *v = rng.uniform_in(0.5, 1.5);
        }
    }
}

/// Probes: up to `per_group` random scalars of each parameter group (as
/// named by `group_of`), plus up to `input_samples` of the input.
fn grouped_probes(
    store: &ParamStore<f64>,
    input_numel: usize,
    input_samples: usize,
    per_group: usize,
    group_of: impl Fn(&str) -> String,
    rng: &mut Rng,
) -> Vec<(String, Vec<Probe>)> {
    let mut groups: Vec<(String, Vec<(usize, usize)>)> = Vec::new();
    for (i, p) in store.params().iter().enumerate() {
        let g = group_of(&p.name);
        match groups.iter_mut().find(|(n, _)| *n == g) {
            Some((_, members)) => members.push((i + 1, p.value.numel())),
            None => groups.push((g, vec![(i + 1, p.value.numel())])),
        }
    }
    let mut out = vec![(
        "input".to_string(),
        sample_indices(input_numel, Some(input_samples), rng)
            .into_iter()
            .map(|index| Probe { input: 0, index })
            .collect(),
    )];
    for (name, members) in groups {
        let total: usize = members.iter().map(|m| m.1).sum();
        let probes = sample_indices(total, Some(per_group), rng)
            .into_iter()
            .map(|mut flat| {
                for &(input, n) in &members {
                    if flat < n {
                        return Probe { input, index: flat };
                    }
                    flat -= n;
                }
                unreachable!("flat index within group total")
            })
            .collect();
        out.push((name, probes));
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn check_network<F>(
    prefix: &str,
    store: &ParamStore<f64>,
    x: Tensor<f64>,
    norm: NormMode,
    per_group: usize,
    input_samples: usize,
    group_of: impl Fn(&str) -> String,
    forward: F,
    gc: GradCheckOptions,
    rng: &mut Rng,
) -> Result<Vec<CheckOutcome>>
where
    F: Fn(&Ctx<'_, f64>, &Var<f64>) -> Result<Var<f64>>,
{
    let mut inputs = vec![Input::new("input", x)];
    inputs.extend(store.params().iter().map(|p| Input::new(p.name.clone(), (*p.value).clone())));
    let groups = grouped_probes(store, inputs[0].value.numel(), input_samples, per_group, group_of, rng)
        .into_iter()
        .map(|(n, p)| (format!("{prefix}/{n}"), p))
        .collect();
    let opts = ForwardOptions {
        norm,
        dropout_seed: None,
        aux_heads: false,
    };
    check_probes(
        &inputs,
        groups,
        |tape, vars| {
            let cx = Ctx::with_params(tape, store, vars[1..].to_vec(), opts)?;
            forward(&cx, &vars[0])
        },
        &gc,
    )
}

/// Whole-module check: one outcome covering the input and every parameter.
#[allow(clippy::too_many_arguments)]
fn check_module<F>(
    name: &str,
    mut store: ParamStore<f64>,
    x: Tensor<f64>,
    norm: NormMode,
    per_param: usize,
    forward: F,
    rng: &mut Rng,
) -> Result<CheckOutcome>
where
    F: Fn(&Ctx<'_, f64>, &Var<f64>) -> Result<Var<f64>>,
{
    randomize_params(&mut store, rng);
    randomize_buffers(&mut store, rng);
    let seed = rng.next_u64();
    let mut inputs = vec![Input::new("input", x)];
    inputs.extend(store.params().iter().map(|p| Input::new(p.name.clone(), (*p.value).clone())));
    let opts = ForwardOptions {
        norm,
        dropout_seed: None,
        aux_heads: false,
    };
    let gc = GradCheckOptions {
        max_per_input: Some(per_param),
        seed,
        ..Default::default()
    };
    check_fn(
        name,
        &inputs,
        |tape, vars| {
            let cx = Ctx::with_params(tape, &store, vars[1..].to_vec(), opts)?;
            project(tape, &forward(&cx, &vars[0])?, seed)
        },
        &gc,
    )
}

fn build<M>(seed: u64, f: impl FnOnce(&mut Builder<'_, f64>) -> Result<M>) -> Result<(ParamStore<f64>, M)> {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed);
    let m = f(&mut Builder::new(&mut store, &mut rng))?;
    Ok((store, m))
}

fn small_config() -> ModelConfig {
    ModelConfig {
        stage_channels: [4, 8, 16, 32],
        d_state: 4,
        se_ratio: 4,
        ..Default::default()
    }
}

pub fn module_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = Rng::new(seed ^ 0x00D0_11E5);
    let r = &mut rng;
    let mut out = Vec::new();
    for norm in [NormMode::Train, NormMode::Eval] {
        let tag = match norm {
            NormMode::Train => "train",
            NormMode::Eval => "eval",
        };
        let (store, m) = build(seed, |b| Ok(BasicBlock3d::new(b, 3, 4, 2, 0.05)))?;
        let x = random_tensor(&[3, 4, 4, 4], 1.0, r);
        out.push(check_module(&format!("basic_block_projection_{tag}"), store, x, norm, 8, |cx, x| m.forward(cx, x), r)?);
        let (store, m) = build(seed, |b| Ok(BasicBlock3d::new(b, 4, 4, 1, 0.05)))?;
        let x = random_tensor(&[4, 3, 3, 3], 1.0, r);
        out.push(check_module(&format!("basic_block_identity_{tag}"), store, x, norm, 8, |cx, x| m.forward(cx, x), r)?);
        let (store, m) = build(seed, |b| Ok(Dpfr::new(b, 4, 2)))?;
        let x = random_tensor(&[4, 4, 4, 4], 1.0, r);
        out.push(check_module(&format!("dpfr_{tag}"), store, x, norm, 8, |cx, x| m.forward(cx, x), r)?);
    }
    let (store, m) = build(seed, |b| Ok(SqueezeExcite::new(b, 8, 4)))?;
    let x = random_tensor(&[8, 3, 2, 3], 1.0, r);
    out.push(check_module("squeeze_excite", store, x, NormMode::Eval, 16, |cx, x| m.forward(cx, x), r)?);
    let (store, m) = build(seed, |b| GroupMamba3d::new(b, 8, 4, &GroupMamba3d::default_orders(4)))?;
    let x = random_tensor(&[8, 2, 3, 2], 1.0, r);
    out.push(check_module("group_mamba3d", store, x, NormMode::Eval, 8, |cx, x| m.forward(cx, x), r)?);
    let cfg = small_config();
    let (store, m) = build(seed, |b| Ok(DecoderStage::new(b, &cfg, 16, 8, 2)))?;
    let skip = random_tensor(&[8, 4, 4, 4], 1.0, r);
    let x = random_tensor(&[16, 2, 2, 2], 1.0, r);
    out.push(check_module("decoder_stage", store, x, NormMode::Train, 6, move |cx, x| {
        m.forward(cx, x, &cx.tape().constant(skip.clone()))
    }, r)?);
    let (store, m) = build(seed, |b| Ok(Pfa::new(b, &cfg)))?;
    let d1 = random_tensor(&[4, 8, 8, 8], 1.0, r);
    let d3 = random_tensor(&[16, 2, 2, 2], 1.0, r);
    let x = random_tensor(&[8, 4, 4, 4], 1.0, r);
    out.push(check_module("pfa", store, x, NormMode::Train, 6, move |cx, x| {
        let t = cx.tape();
        pfa_with(&m, cx, t.constant(d1.clone()), x.clone(), t.constant(d3.clone()))
    }, r)?);
    let full = ModelConfig::default();
    let (mut store, m) = build(seed, |b| crate::model::Bottleneck::new(b, &full))?;
    randomize_params(&mut store, r);
    randomize_buffers(&mut store, r);
    let x = random_tensor(&[128, 2, 2, 2], 1.0, r);
    out.extend(check_network(
        "bottleneck",
        &store,
        x,
        NormMode::Eval,
        12,
        12,
        |name| name.split('.').next().unwrap_or(name).to_string(),
        |cx, x| {
            let y = m.forward(cx, x)?;
            project(cx.tape(), &y, seed)
        },
        GradCheckOptions::default(),
        r,
    )?);
    Ok(out)
}

fn pfa_with(m: &Pfa, cx: &Ctx<'_, f64>, d1: Var<f64>, d2: Var<f64>, d3: Var<f64>) -> Result<Var<f64>> {
    m.aggregate(cx, &[d1, d2, d3])
}

/// Parameter group of a model parameter: the module two or three levels deep.
pub fn submodule_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    let depth = match parts[0] {
        "decoder" | "bottleneck" => 3,
        _ => 2,
    };
    parts[..depth.min(parts.len() - 1).max(1)].join(".")
}

/// Candidate elements per submodule in the model check; a few may be
/// skipped by the kink guard.
pub const MODEL_PROBES: usize = 16;

/// End-to-end check on a `4 x 8^3` input with loss `sum(final logits)`.
pub fn model_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = Rng::new(seed ^ 0x30DE_1000);
    let (net, mut store) = MmriNet::new::<f64>(ModelConfig::default(), seed)?;
    randomize_params(&mut store, &mut rng);
    randomize_buffers(&mut store, &mut rng);
    let x = random_tensor(&[4, 8, 8, 8], 1.0, &mut rng);
    let mut checks = check_network(
        "model",
        &store,
        x,
        NormMode::Eval,
        MODEL_PROBES,
        MODEL_PROBES,
        submodule_of,
        |cx, x| Ok(cx.tape().sum(&net.forward(cx, x)?.logits)),
        GradCheckOptions {
            step: MODEL_STEP,
            kink_guard: true,
            min_checked: 10,
            ..Default::default()
        },
        &mut rng,
    )?;
    checks.retain(|c| !c.name.starts_with("model/aux"));
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn submodule_names() {
        assert_eq!(submodule_of("encoder.stage2.conv1.weight"), "encoder.stage2");
        assert_eq!(submodule_of("decoder.stage3.dpfr.gate.weight"), "decoder.stage3.dpfr");
        assert_eq!(submodule_of("bottleneck.mamba.group0.a_log"), "bottleneck.mamba.group0");
        assert_eq!(submodule_of("head.proj.bias"), "head.proj");
    }

    #[test]
    fn op_suite_passes_and_detects_corruption() {
        let ok = run(Scope::Op, &SuiteOptions::default()).unwrap();
        for c in &ok.checks {
            assert!(c.passed(), "{c:?}");
        }
        let bad = run(
            Scope::Op,
            &SuiteOptions {
                seed: 0,
                corrupt: Some("selective_scan".into()),
            },
        )
        .unwrap();
        let failed: Vec<_> = bad.failures().map(|c| c.name.as_str()).collect();
        assert_eq!(failed, vec!["selective_scan"]);
    }
}
