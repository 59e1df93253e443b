//! Parameter storage and the layer building blocks (dense, batch norm,
//! layer norm, MLP) on top of the tape.

use lazysurf_tape::{BatchStats, Gradients, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers.
    Train,
    /// Running statistics; outputs are a pure function of each input row.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    /// Trainable.
    Param,
    /// Running statistics; saved but never differentiated.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub name: String,
    pub kind: Kind,
    pub value: Tensor,
}

/// Every tensor of a model, in creation order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: String, kind: Kind, value: Tensor) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry { name, kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), Kind::Param, value)
    }

    pub fn buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), Kind::Buffer, value)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &Entry {
        &self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.entries[id.0].kind == Kind::Param)
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.trainable().map(|id| self.get(id).len()).sum()
    }

    /// Replaces every value from `other`, which must have the same layout.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, model has {}",
                other.entries.len(),
                self.entries.len()
            )));
        }
        for (mine, theirs) in self.entries.iter_mut().zip(&other.entries) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() || mine.kind != theirs.kind {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match stored {} {:?}",
                    mine.name,
                    mine.value.shape(),
                    theirs.name,
                    theirs.value.shape()
                )));
            }
            mine.value = theirs.value.clone();
        }
        Ok(())
    }

    /// Sets a tensor's values by id, checking the shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "{}: shape {:?} vs {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }
}

/// Statistics of one train-mode batch-norm call, addressed to its running
/// buffers.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats,
}

/// Forward-pass context: a tape, a read-only view of the parameters, and the
/// lazily created tape leaves that stand for them.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    mode: Mode,
    differentiable: bool,
    updates: Vec<StatUpdate>,
}

impl<'a> Ctx<'a> {
    /// `differentiable` makes parameters gradient-tracked tape variables.
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, mode: Mode, differentiable: bool) -> Self {
        Self {
            tape,
            vars: vec![None; store.len()],
            store,
            mode,
            differentiable,
            updates: Vec::new(),
        }
    }

    /// Uses existing tape nodes for the trainable parameters, in
    /// [`ParamStore::trainable`] order.
    pub fn with_bound(tape: &'a mut Tape, store: &'a ParamStore, mode: Mode, bound: &[Var]) -> Result<Self> {
        let ids: Vec<ParamId> = store.trainable().collect();
        if ids.len() != bound.len() {
            return Err(Error::Config(format!("{} bound vars for {} parameters", bound.len(), ids.len())));
        }
        let mut ctx = Self::new(tape, store, mode, false);
        for (id, v) in ids.into_iter().zip(bound) {
            ctx.vars[id.0] = Some(*v);
        }
        Ok(ctx)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn var(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.differentiable && self.store.entry(id).kind == Kind::Param {
            self.tape.variable(value)
        } else {
            self.tape.constant(value)
        };
        self.vars[id.0] = Some(v);
        v
    }

    /// Tape leaves created so far, by parameter.
    pub fn bound(&self) -> Vec<(ParamId, Var)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect()
    }

    pub fn take_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.updates)
    }
}

/// Collects per-parameter gradients from a backward pass; parameters the loss
/// does not reach get zeros.
pub fn collect_grads(store: &ParamStore, bound: &[(ParamId, Var)], grads: &mut Gradients) -> Vec<Option<Tensor>> {
    let mut out: Vec<Option<Tensor>> = vec![None; store.len()];
    for &(id, v) in bound {
        if store.entry(id).kind == Kind::Param {
            out[id.0] = grads.take(v);
        }
    }
    for id in store.trainable() {
        if out[id.0].is_none() {
            out[id.0] = Some(Tensor::zeros(store.get(id).shape()));
        }
    }
    out
}

/// `running ← (1 − m)·running + m·batch`.
pub fn apply_stat_updates(store: &mut ParamStore, updates: &[StatUpdate], momentum: f64) {
    for u in updates {
        let mean = store.get_mut(u.running_mean).data_mut();
        for (r, b) in mean.iter_mut().zip(&u.stats.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        let var = store.get_mut(u.running_var).data_mut();
        for (r, b) in var.iter_mut().zip(&u.stats.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

pub(crate) fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Dense layer `x·W + b`, `W` stored `in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights and bias uniform in `±1/sqrt(fan_in)`.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.param(format!("{name}.weight"), uniform(&[fan_in, fan_out], bound, rng));
        let b = store.param(format!("{name}.bias"), uniform(&[fan_out], bound, rng));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.var(self.w), ctx.var(self.b));
        Ok(ctx.tape.linear(x, w, Some(b))?)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, eps: f64) -> Self {
        Self {
            gamma: store.param(format!("{name}.gamma"), Tensor::full(&[width], 1.0)),
            beta: store.param(format!("{name}.beta"), Tensor::zeros(&[width])),
            running_mean: store.buffer(format!("{name}.running_mean"), Tensor::zeros(&[width])),
            running_var: store.buffer(format!("{name}.running_var"), Tensor::full(&[width], 1.0)),
            eps,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.var(self.gamma), ctx.var(self.beta));
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.tape.batch_norm_train(x, g, b, self.eps)?;
                ctx.updates.push(StatUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => {
                let store = ctx.store;
                Ok(ctx.tape.batch_norm_eval(
                    x,
                    g,
                    b,
                    store.get(self.running_mean).data(),
                    store.get(self.running_var).data(),
                    self.eps,
                )?)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, eps: f64) -> Self {
        Self {
            gamma: store.param(format!("{name}.gamma"), Tensor::full(&[width], 1.0)),
            beta: store.param(format!("{name}.beta"), Tensor::zeros(&[width])),
            eps,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.var(self.gamma), ctx.var(self.beta));
        Ok(ctx.tape.layer_norm(x, g, b, self.eps)?)
    }
}

/// Dense layers with BatchNorm + ReLU between them; the last layer is
/// linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub norms: Vec<BatchNorm>,
}

impl Mlp {
    /// `widths` lists input, hidden and output widths: `[in, h1, ..., out]`.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, widths: &[usize], eps: f64, rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least one layer");
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        for (i, w) in widths.windows(2).enumerate() {
            layers.push(Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng));
            if i + 2 < widths.len() {
                norms.push(BatchNorm::new(store, &format!("{name}.{i}.bn"), w[1], eps));
            }
        }
        Self { layers, norms }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(ctx, x)?;
            if let Some(bn) = self.norms.get(i) {
                x = bn.forward(ctx, x)?;
                x = ctx.tape.relu(x);
            }
        }
        Ok(x)
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map(|l| l.fan_out).unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_init_bounds() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::new(&mut store, "fc", 16, 4, &mut rng);
        assert_eq!(store.get(l.w).shape(), &[16, 4]);
        assert!(store.get(l.w).data().iter().all(|v| v.abs() <= 0.25));
        assert_eq!(store.find("fc.bias"), Some(l.b));
    }

    #[test]
    fn mlp_layout_and_running_stats() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&mut store, "m", &[3, 8, 8, 2], 1e-5, &mut rng);
        assert_eq!(mlp.layers.len(), 3);
        assert_eq!(mlp.norms.len(), 2);
        assert_eq!(mlp.out_width(), 2);

        let x = Tensor::matrix(4, 3, (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Train, true);
        let xv = ctx.tape.constant(x);
        let y = mlp.forward(&mut ctx, xv).unwrap();
        assert_eq!(ctx.tape.shape(y), &[4, 2]);
        let updates = ctx.take_updates();
        assert_eq!(updates.len(), 2);
        let before = store.get(mlp.norms[0].running_mean).clone();
        apply_stat_updates(&mut store, &updates, 0.1);
        let after = store.get(mlp.norms[0].running_mean);
        for ((a, b), m) in after.data().iter().zip(before.data()).zip(&updates[0].stats.mean) {
            assert!((a - (0.9 * b + 0.1 * m)).abs() < 1e-15);
        }
    }

    #[test]
    fn eval_mode_rows_are_independent() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = Mlp::new(&mut store, "m", &[3, 8, 1], 1e-5, &mut rng);
        let run = |rows: Vec<Vec<f64>>| {
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval, false);
            let x = ctx.tape.constant(Tensor::from_rows(&rows).unwrap());
            let y = mlp.forward(&mut ctx, x).unwrap();
            tape.value(y).data().to_vec()
        };
        let both = run(vec![vec![0.1, 0.2, 0.3], vec![-0.5, 0.0, 0.9]]);
        let single = run(vec![vec![-0.5, 0.0, 0.9]]);
        assert_eq!(both[1], single[0]);
    }

    #[test]
    fn grads_default_to_zero_for_unused_params() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Linear::new(&mut store, "a", 2, 2, &mut rng);
        let _unused = Linear::new(&mut store, "b", 2, 2, &mut rng);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Train, true);
        let x = ctx.tape.constant(Tensor::full(&[1, 2], 1.0));
        let y = a.forward(&mut ctx, x).unwrap();
        let bound = ctx.bound();
        let loss = tape.sum(y);
        let mut g = tape.backward(loss).unwrap();
        let grads = collect_grads(&store, &bound, &mut g);
        assert_eq!(grads[a.b.index()].as_ref().unwrap().data(), &[1.0, 1.0]);
        assert!(grads[3].as_ref().unwrap().data().iter().all(|v| *v == 0.0));
    }
}
