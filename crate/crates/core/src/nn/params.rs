use std::cell::{Cell, RefCell};
use std::sync::Arc;

use crate::autograd::{BatchStats, Gradients, Tape, Var};
use crate::ops::{NormMode, RunningStats};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct Buffer<T: Scalar> {
    pub name: String,
    pub stats: RunningStats<T>,
}

/// Trainable parameters and batch-norm running statistics of a network,
/// addressed by [`ParamId`] / [`BufferId`] and named with dotted paths.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar = f32> {
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value: Arc::new(value),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_running(&mut self, name: impl Into<String>, channels: usize) -> BufferId {
        self.buffers.push(Buffer {
            name: name.into(),
            stats: RunningStats::new(channels),
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn param(&self, id: ParamId) -> &Arc<Tensor<T>> {
        &self.params[id.0].value
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn param_by_index_mut(&mut self, index: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[index].value)
    }

    pub fn running(&self, id: BufferId) -> &RunningStats<T> {
        &self.buffers[id.0].stats
    }

    pub fn buffer_mut(&mut self, index: usize) -> &mut RunningStats<T> {
        &mut self.buffers[index].stats
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Trainable scalars in parameters whose name satisfies `pred`.
    pub fn count_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.params
            .iter()
            .filter(|p| pred(&p.name))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Overwrite every parameter whose name satisfies `pred` with `value`.
    pub fn fill_where(&mut self, pred: impl Fn(&str) -> bool, value: T) {
        for p in &mut self.params {
            if pred(&p.name) {
                Arc::make_mut(&mut p.value).data_mut().fill(value);
            }
        }
    }

    pub fn apply_running_updates(&mut self, updates: Vec<(BufferId, BatchStats)>) {
        for (id, s) in updates {
            self.buffers[id.0].stats.update(&s.mean, &s.var_unbiased);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: Arc::new(p.value.cast()),
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    stats: RunningStats {
                        mean: b.stats.mean.cast(),
                        var: b.stats.var.cast(),
                    },
                })
                .collect(),
        }
    }
}

/// Registers parameters under a dotted name prefix while a network is built.
pub struct Builder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut Rng,
    prefix: String,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let full = self.full_name(name);
        self.store.add_param(full, value)
    }

    /// Uniform in `[-bound, bound)`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| T::of(rng.uniform_in(-bound, bound)));
        self.param(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.param(name, Tensor::full(shape.to_vec(), T::of(value)))
    }

    pub fn running(&mut self, name: &str, channels: usize) -> BufferId {
        let full = self.full_name(name);
        self.store.add_running(full, channels)
    }

    pub fn rng(&mut self) -> &mut Rng {
        self.rng
    }
}

/// Per-forward settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub norm: NormMode,
    /// Base seed of dropout masks; `None` disables dropout.
    pub dropout_seed: Option<u64>,
    /// Evaluate the deep-supervision heads (when the model has them).
    pub aux_heads: bool,
}

impl ForwardOptions {
    pub fn train(dropout_seed: u64) -> Self {
        Self {
            norm: NormMode::Train,
            dropout_seed: Some(dropout_seed),
            aux_heads: true,
        }
    }

    pub fn eval() -> Self {
        Self {
            norm: NormMode::Eval,
            dropout_seed: None,
            aux_heads: false,
        }
    }
}

/// Binds a [`ParamStore`] to a tape for one forward pass.
pub struct Ctx<'a, T: Scalar> {
    tape: &'a Tape<T>,
    store: &'a ParamStore<T>,
    params: Vec<Var<T>>,
    opts: ForwardOptions,
    dropout_calls: Cell<u64>,
    updates: RefCell<Vec<(BufferId, BatchStats)>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a Tape<T>, store: &'a ParamStore<T>, opts: ForwardOptions) -> Self {
        let params = store
            .params
            .iter()
            .map(|p| tape.leaf_shared(Arc::clone(&p.value)))
            .collect();
        Self {
            tape,
            store,
            params,
            opts,
            dropout_calls: Cell::new(0),
            updates: RefCell::new(Vec::new()),
        }
    }

    /// Like [`Ctx::new`], but with caller-provided variables standing in for
    /// the store's parameters (same order and shapes).
    pub fn with_params(
        tape: &'a Tape<T>,
        store: &'a ParamStore<T>,
        params: Vec<Var<T>>,
        opts: ForwardOptions,
    ) -> crate::Result<Self> {
        if params.len() != store.params.len()
            || params.iter().zip(&store.params).any(|(v, p)| v.shape() != p.value.shape())
        {
            return Err(crate::Error::invalid("parameter variables do not match the store"));
        }
        Ok(Self {
            tape,
            store,
            params,
            opts,
            dropout_calls: Cell::new(0),
            updates: RefCell::new(Vec::new()),
        })
    }

    pub fn tape(&self) -> &'a Tape<T> {
        self.tape
    }

    pub fn opts(&self) -> ForwardOptions {
        self.opts
    }

    pub fn param(&self, id: ParamId) -> &Var<T> {
        &self.params[id.0]
    }

    pub fn param_vars(&self) -> &[Var<T>] {
        &self.params
    }

    pub fn running(&self, id: BufferId) -> &'a RunningStats<T> {
        self.store.running(id)
    }

    pub(crate) fn record_stats(&self, id: BufferId, stats: BatchStats) {
        self.updates.borrow_mut().push((id, stats));
    }

    /// Seed for the next dropout mask, or `None` when dropout is off.
    pub fn next_dropout_seed(&self) -> Option<u64> {
        let base = self.opts.dropout_seed?;
        let k = self.dropout_calls.get();
        self.dropout_calls.set(k + 1);
        Some(Rng::for_stream(base, k.wrapping_mul(0x9E37_79B9_7F4A_7C15)).next_u64())
    }

    /// Running-statistic updates gathered during a train-mode forward.
    pub fn take_updates(&self) -> Vec<(BufferId, BatchStats)> {
        std::mem::take(&mut self.updates.borrow_mut())
    }

    /// Parameter gradients in [`ParamId`] order.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.params.iter().map(|v| grads.get_or_zeros(v)).collect()
    }
}
