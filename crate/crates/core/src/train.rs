//! Physics-constrained training of the staggered ensemble, staggered rollout
//! and gradient-based optimization of solver inputs.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::observable_error_k;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::{Field, FieldSequence, GridSpec, SubtaskIndex};
use crate::model::{CoarseSolver, EnsembleLayout, ModelParams};
use crate::parallel::WorkerPool;
use crate::physics::{chain_loss, field_tensor, ResidualOp};
use crate::rng::{member_seed, stream_rng, Stream};
use crate::solvers::{initial_state, oracle_step, prepare_bootstrap, solve, OracleConfig};

fn default_lr0() -> f64 {
    3e-3
}
fn default_decay() -> f64 {
    0.9
}
fn default_decay_every() -> usize {
    5000
}
fn default_clip() -> f64 {
    1.0
}
fn default_divergence() -> f64 {
    1e6
}
fn default_window() -> usize {
    200
}
fn default_threshold() -> f64 {
    1e-4
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    /// Enrichment on or off.
    pub enabled: bool,
    /// Running-mean window of the enrichment trigger.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Enrich once the running-mean loss falls below this value.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Entries rolled forward per enrichment.
    pub count: usize,
    /// Replace predicted frames after the first by reference-solver steps.
    #[serde(default)]
    pub correct: bool,
    /// Upper bound on the pool size.
    pub max_entries: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_decay")]
    pub lr_decay: f64,
    #[serde(default = "default_decay_every")]
    pub decay_every: usize,
    pub batch_size: usize,
    pub iterations: usize,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default = "default_divergence")]
    pub divergence_threshold: f64,
    /// Evolving pool; absent means the initial entries are a fixed dataset.
    #[serde(default)]
    pub pool: Option<PoolConfig>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.iterations == 0 || self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::Config("iterations, batch_size and decay_every must be at least 1".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        Ok(())
    }
}

/// `lr0 * decay^floor(n / every)`.
pub fn learning_rate(lr0: f64, decay: f64, every: usize, n: usize) -> f64 {
    lr0 * decay.powi((n / every) as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Bias-corrected Adam update of `params` in place.
pub fn adam_update(params: &mut [Tensor], names: &[String], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Length {
            expected: params.len(),
            got: grads.len(),
        });
    }
    for (n, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[n].shape() {
            return Err(Error::Shape {
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
                context: "adam parameter vs gradient",
            });
        }
        if !g.is_finite() {
            let name = names.get(n).cloned().unwrap_or_else(|| format!("#{n}"));
            return Err(Error::Training(format!("non-finite gradient for parameter {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (n, p) in params.iter_mut().enumerate() {
        let g = grads[n].data();
        let m = state.m[n].data_mut();
        for k in 0..g.len() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
        }
        let v = state.v[n].data_mut();
        for k in 0..g.len() {
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
        }
        let (m, v) = (state.m[n].data(), state.v[n].data());
        for (k, x) in p.data_mut().iter_mut().enumerate() {
            *x -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

pub fn adam_step(params: &mut ModelParams, grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    let names = params.names();
    adam_update(params.tensors_mut(), &names, grads, state, lr)
}

/// Physics-constrained loss of one input window of `s_T` fine frames.
pub fn staggered_loss<'t, S>(solver: &S, layout: &EnsembleLayout, op: &ResidualOp, inputs: &[Var<'t>]) -> Result<Var<'t>>
where
    S: CoarseSolver<'t> + ?Sized,
{
    let predictions = layout.step_var(solver, inputs)?;
    let last = *inputs.last().ok_or_else(|| Error::Contract("empty input window".into()))?;
    chain_loss(last, &predictions, op)
}

/// Loss of one window and its gradient with respect to every parameter.
pub fn loss_and_gradient(params: &ModelParams, layout: &EnsembleLayout, op: &ResidualOp, window: &FieldSequence) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let net = params.bind(&tape);
    let frames: Vec<Var<'_>> = window.frames().iter().map(|f| tape.constant(field_tensor(f))).collect();
    let loss = staggered_loss(&net, layout, op, &frames)?;
    let grads = tape.backward(loss)?;
    let g = net
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(v, p)| grads.wrt(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((loss.item(), g))
}

/// Input windows of `s_T` frames available for training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPool {
    entries: Vec<FieldSequence>,
    s_t: usize,
}

impl TrainingPool {
    pub fn new(entries: Vec<FieldSequence>, s_t: usize) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("training pool needs at least one entry".into()));
        }
        for e in &entries {
            if e.len() != s_t {
                return Err(Error::Length {
                    expected: s_t,
                    got: e.len(),
                });
            }
        }
        Ok(Self { entries, s_t })
    }

    pub fn entries(&self) -> &[FieldSequence] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn s_t(&self) -> usize {
        self.s_t
    }
}

/// Rolls `policy.count` sampled entries one ensemble step forward and appends them.
pub fn enrich_pool<S>(
    pool: &mut TrainingPool,
    solver: &S,
    layout: &EnsembleLayout,
    policy: &PoolConfig,
    oracle: Option<&OracleConfig>,
    rng: &mut impl Rng,
    workers: &WorkerPool,
) -> Result<usize>
where
    S: for<'t> CoarseSolver<'t> + Sync + ?Sized,
{
    if !policy.enabled {
        return Ok(0);
    }
    let room = policy.max_entries.saturating_sub(pool.len());
    let count = policy.count.min(room);
    let picks: Vec<usize> = (0..count).map(|_| rng.gen_range(0..pool.len())).collect();
    for idx in picks {
        let entry = &pool.entries[idx];
        let dt = entry.dt();
        let mut frames = layout.step(solver, entry.frames(), dt, workers)?;
        if policy.correct {
            let oracle = oracle.ok_or_else(|| Error::Config("pool correction needs a reference solver".into()))?;
            for k in 1..frames.len() {
                frames[k] = oracle_step(&frames[k - 1], oracle, k)?;
            }
        }
        pool.entries.push(FieldSequence::new(frames, dt)?);
    }
    Ok(count)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    pub pool_size: usize,
    pub wall_ms: u128,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters that produced the lowest recorded loss.
    pub best: ModelParams,
    pub best_loss: f64,
    pub last: ModelParams,
    pub history: Vec<LossRecord>,
    pub pool: TrainingPool,
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub layout: &'a EnsembleLayout,
    pub op: &'a ResidualOp,
    pub oracle: Option<&'a OracleConfig>,
    pub workers: &'a WorkerPool,
    pub seed: u64,
}

impl Trainer<'_> {
    /// Adam on the batch-mean staggered loss. Gradients of a batch are
    /// computed concurrently and summed in batch order.
    pub fn train(&self, init: ModelParams, mut pool: TrainingPool, observer: &mut dyn FnMut(&LossRecord)) -> Result<TrainOutcome> {
        let cfg = &self.config;
        cfg.validate()?;
        if pool.s_t() != self.layout.factors().s_t {
            return Err(Error::Config(format!(
                "pool windows hold {} frames but s_T is {}",
                pool.s_t(),
                self.layout.factors().s_t
            )));
        }
        let mut params = init;
        let mut adam = AdamState::new(params.tensors());
        let mut batch_rng = stream_rng(self.seed, Stream::Batch);
        let mut best = params.clone();
        let mut best_loss = f64::INFINITY;
        let mut history = Vec::with_capacity(cfg.iterations);
        let mut last_enrich = 0;
        let start = Instant::now();
        for it in 0..cfg.iterations {
            let lr = learning_rate(cfg.lr0, cfg.lr_decay, cfg.decay_every, it);
            let picks: Vec<usize> = (0..cfg.batch_size).map(|_| batch_rng.gen_range(0..pool.len())).collect();
            let results = self
                .workers
                .try_map(&picks, |&n| loss_and_gradient(&params, self.layout, self.op, &pool.entries()[n]))?;
            let scale = 1.0 / picks.len() as f64;
            let mut loss = 0.0;
            let mut grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            for (l, g) in &results {
                loss += l * scale;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += b * scale;
                    }
                }
            }
            if !loss.is_finite() || loss > cfg.divergence_threshold {
                return Err(Error::Diverged { iteration: it, loss });
            }
            if loss < best_loss {
                best_loss = loss;
                best = params.clone();
            }
            let norm = grads
                .iter()
                .flat_map(|g| g.data().iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > cfg.clip_norm {
                let s = cfg.clip_norm / norm;
                grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
            }
            adam_step(&mut params, &grads, &mut adam, lr)?;
            let record = LossRecord {
                iteration: it,
                loss,
                lr,
                pool_size: pool.len(),
                wall_ms: start.elapsed().as_millis(),
            };
            observer(&record);
            history.push(record);
            if let Some(policy) = &cfg.pool {
                let window = policy.window.max(1);
                if policy.enabled && it + 1 >= last_enrich + window {
                    let recent = &history[history.len() - window.min(history.len())..];
                    let mean = recent.iter().map(|r| r.loss).sum::<f64>() / recent.len() as f64;
                    if recent.len() == window && mean < policy.threshold {
                        enrich_pool(&mut pool, &params, self.layout, policy, self.oracle, &mut batch_rng, self.workers)?;
                        last_enrich = it + 1;
                    }
                }
            }
        }
        Ok(TrainOutcome {
            best,
            best_loss,
            last: params,
            history,
            pool,
        })
    }
}

/// Auto-regressive staggered rollout: the `s_T` input frames followed by
/// `n_steps` predicted frames. `n_steps` must be a multiple of `s_T`.
pub fn rollout<S>(solver: &S, layout: &EnsembleLayout, init: &FieldSequence, n_steps: usize, workers: &WorkerPool) -> Result<FieldSequence>
where
    S: for<'t> CoarseSolver<'t> + Sync + ?Sized,
{
    let s_t = layout.factors().s_t;
    if init.len() != s_t {
        return Err(Error::Length {
            expected: s_t,
            got: init.len(),
        });
    }
    if n_steps % s_t != 0 {
        return Err(Error::Contract(format!(
            "rollout length {n_steps} is not a multiple of s_T = {s_t}"
        )));
    }
    let dt = init.dt();
    let mut frames = init.frames().to_vec();
    for _ in 0..n_steps / s_t {
        let block = layout.step(solver, &frames[frames.len() - s_t..], dt, workers)?;
        frames.extend(block);
    }
    FieldSequence::new(frames, dt)
}

/// Standalone rollout of one subtask on its coarse grid: `init` followed by
/// `n_blocks` predictions, spaced `s_T dt` apart.
pub fn coarse_rollout<S>(solver: &S, layout: &EnsembleLayout, index: SubtaskIndex, init: &Field, dt: f64, n_blocks: usize) -> Result<FieldSequence>
where
    S: for<'t> CoarseSolver<'t> + ?Sized,
{
    let coarse = layout.coarse_grid()?;
    if !init.grid().same_shape(&coarse) {
        return Err(Error::Shape {
            left: init.grid().shape().to_vec(),
            right: coarse.shape().to_vec(),
            context: "coarse rollout initial state",
        });
    }
    let step = layout.factors().s_t as f64 * dt;
    let mut frames = vec![init.clone()];
    for _ in 0..n_blocks {
        let prev = frames.last().expect("non-empty");
        let state = field_tensor(prev);
        let next = layout.run_subtask(solver, index, &state, &state)?;
        frames.push(Field::new(*prev.grid(), next.into_data(), prev.time() + step)?);
    }
    FieldSequence::new(frames, step)
}

/// Adam on the input `x` of a differentiable scalar objective.
/// Returns the final input and the objective before every update followed by the final value.
pub fn optimize_input<F>(objective: F, x0: &Tensor, steps: usize, lr: f64) -> Result<(Tensor, Vec<f64>)>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let mut x = vec![x0.clone()];
    let mut adam = AdamState::new(&x);
    let names = vec!["input".to_string()];
    let mut trace = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let tape = Tape::new();
        let v = tape.leaf(x[0].clone());
        let obj = objective(v)?;
        let value = obj.item();
        if !value.is_finite() {
            return Err(Error::Training(format!("objective became {value}")));
        }
        trace.push(value);
        let g = tape.backward(obj)?.wrt(v).unwrap_or_else(|| Tensor::zeros(x0.shape()));
        adam_update(&mut x, &names, &[g], &mut adam, lr)?;
    }
    let tape = Tape::new();
    let last = objective(tape.constant(x[0].clone()))?.item();
    trace.push(last);
    Ok((x.pop().expect("one tensor"), trace))
}

/// Differentiable rollout of `blocks` ensemble steps from a `[s_T, H, W]` window.
pub fn rollout_var<'t, S>(solver: &S, layout: &EnsembleLayout, window: Var<'t>, blocks: usize) -> Result<Vec<Var<'t>>>
where
    S: CoarseSolver<'t> + ?Sized,
{
    let s_t = layout.factors().s_t;
    let mut frames = (0..s_t).map(|k| window.slice(0, k, 1)).collect::<Result<Vec<_>>>()?;
    for _ in 0..blocks {
        frames = layout.step_var(solver, &frames)?;
    }
    Ok(frames)
}

/// A staggered rollout next to the reference trajectory from the same start.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub rollout: FieldSequence,
    pub truth: FieldSequence,
}

impl Evaluation {
    /// Error-k on the compared observable.
    pub fn error_k(&self, k: usize, op: &ResidualOp) -> Result<f64> {
        observable_error_k(&self.rollout, &self.truth, k, op)
    }
}

/// Rolls out from `bootstrap` until frame `horizon` exists and solves the
/// reference problem over the same frames.
pub fn evaluate<S>(solver: &S, layout: &EnsembleLayout, oracle: &OracleConfig, bootstrap: &FieldSequence, horizon: usize, workers: &WorkerPool) -> Result<Evaluation>
where
    S: for<'t> CoarseSolver<'t> + Sync + ?Sized,
{
    let s_t = layout.factors().s_t;
    let steps = (horizon + 1).saturating_sub(s_t).div_ceil(s_t) * s_t;
    let rollout = rollout(solver, layout, bootstrap, steps, workers)?;
    let first = bootstrap.first().ok_or_else(|| Error::Contract("empty bootstrap".into()))?;
    let truth = solve(first, rollout.len() - 1, oracle)?;
    Ok(Evaluation { rollout, truth })
}

/// Oracle trajectories of `steps + 1` frames from `count` random initial
/// states of `stream`, after the configured burn-in.
pub fn oracle_trajectories(
    grid: GridSpec,
    oracle: &OracleConfig,
    count: usize,
    steps: usize,
    seed: u64,
    stream: Stream,
    ic_scale: f64,
    workers: &WorkerPool,
) -> Result<Vec<FieldSequence>> {
    let ids: Vec<u64> = (0..count as u64).collect();
    workers.try_map(&ids, |&n| {
        let s0 = initial_state(grid, oracle, member_seed(seed, stream, n), ic_scale)?;
        let boot = prepare_bootstrap(&s0, 1, oracle)?;
        solve(&boot.frames()[0], steps, oracle)
    })
}

/// Every run of `s_t` consecutive frames, starting every `stride` frames.
pub fn windows(trajectories: &[FieldSequence], s_t: usize, stride: usize) -> Result<Vec<FieldSequence>> {
    let stride = stride.max(1);
    let mut out = Vec::new();
    for traj in trajectories {
        let mut start = 0;
        while start + s_t <= traj.len() {
            out.push(FieldSequence::new(traj.frames()[start..start + s_t].to_vec(), traj.dt())?);
            start += stride;
        }
    }
    Ok(out)
}

/// Fresh parameters for a layout from the `Init` stream of `seed`.
pub fn init_params(spec: crate::model::ModelSpec, seed: u64) -> Result<ModelParams> {
    ModelParams::init(spec, &mut stream_rng(seed, Stream::Init))
}
