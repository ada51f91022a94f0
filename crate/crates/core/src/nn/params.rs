use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// Trainable parameters plus non-trainable buffers (batch-norm running
/// statistics), each kept in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<(String, Tensor)>,
    buffers: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_param(&mut self, name: String, value: Tensor) -> ParamId {
        self.params.push((name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: String, value: Tensor) -> BufferId {
        self.buffers.push((name, value));
        BufferId(self.buffers.len() - 1)
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn buffers(&self) -> &[(String, Tensor)] {
        &self.buffers
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].1
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].1
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].1
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|(n, _)| n == name).map(ParamId)
    }

    /// Mutable access to every parameter whose name starts with `prefix`.
    pub fn params_with_prefix_mut<'a>(&'a mut self, prefix: &'a str) -> impl Iterator<Item = &'a mut Tensor> + 'a {
        self.params
            .iter_mut()
            .filter(move |(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t)
    }

    pub fn param_values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    /// Replaces all parameter and buffer values. Names and shapes must match.
    pub fn load_values(&mut self, params: Vec<Tensor>, buffers: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len() || buffers.len() != self.buffers.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters and {} buffers, got {} and {}",
                self.params.len(),
                self.buffers.len(),
                params.len(),
                buffers.len()
            )));
        }
        for ((name, slot), t) in self
            .params
            .iter_mut()
            .chain(self.buffers.iter_mut())
            .map(|(n, s)| (n.clone(), s))
            .zip(params.into_iter().chain(buffers))
        {
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: expected shape {:?}, got {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }

    /// Exponential moving update of running statistics.
    pub fn apply_batch_stats(&mut self, updates: &[BatchNormUpdate], momentum: Float) {
        for u in updates {
            for (slot, fresh) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
                let buf = self.buffers[slot.0].1.data_mut();
                for (r, &b) in buf.iter_mut().zip(fresh) {
                    *r = momentum * *r + (1.0 - momentum) * b;
                }
            }
        }
    }
}

/// Creates named, deterministically initialized parameters.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        ParamBuilder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A builder whose names are prefixed with `name.`.
    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    /// Uniform in `±sqrt(6 / fan_in)`.
    pub fn fan_in_uniform(&mut self, leaf: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = (6.0 / fan_in as Float).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        let t = Tensor::from_parts(shape.to_vec(), data);
        self.store.add_param(self.name(leaf), t)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: Float) -> ParamId {
        self.store.add_param(self.name(leaf), Tensor::full(shape, value))
    }

    pub fn buffer(&mut self, leaf: &str, shape: &[usize], value: Float) -> BufferId {
        self.store.add_buffer(self.name(leaf), Tensor::full(shape, value))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running statistics recorded for update.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Debug)]
pub struct BatchNormUpdate {
    pub mean: BufferId,
    pub var: BufferId,
    pub stats: BatchStats,
}

/// State of one forward pass: the tape, the tape variables bound to
/// parameters, and pending batch-norm statistics.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    mode: Mode,
    track_params: bool,
    updates: Vec<BatchNormUpdate>,
}

impl<'a> Ctx<'a> {
    /// `track_params` decides whether parameters require grad.
    pub fn new(store: &'a ParamStore, mode: Mode, track_params: bool) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            vars: vec![None; store.params.len()],
            mode,
            track_params,
            updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// The tape variable of a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.vars[id.0] {
            return Ok(v);
        }
        let v = self.tape.leaf(self.store.param(id).clone(), self.track_params)?;
        self.vars[id.0] = Some(v);
        Ok(v)
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        self.store.buffer(id)
    }

    pub(crate) fn push_update(&mut self, update: BatchNormUpdate) {
        self.updates.push(update);
    }

    pub fn updates(&self) -> &[BatchNormUpdate] {
        &self.updates
    }

    /// Gradient of every parameter after backward; unused parameters get zeros.
    pub fn param_grads(&self) -> Vec<Vec<Float>> {
        self.vars
            .iter()
            .zip(&self.store.params)
            .map(|(v, (_, t))| {
                v.and_then(|v| self.tape.grad(v))
                    .map(<[Float]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect()
    }

    pub fn into_updates(self) -> Vec<BatchNormUpdate> {
        self.updates
    }
}
