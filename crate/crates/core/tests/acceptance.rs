//! Acceptance criteria, one PASS/FAIL line each. Tolerances are pinned below.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stagger_core::analysis::{
    affine_fit, build_transfer_matrix, build_transfer_matrix_1d, count_gmacs, prop1_verify, stagger_blocks,
    transfer_power_bandwidth, Arrangement,
};
use faer::Mat;
use stagger_core::autodiff::{gradient_check, gradient_check_many, ConvPadding, PadMode, Tape, Tensor, Var};
use stagger_core::field::{
    decompose_spatial, decompose_temporal, extract_subgrid, interleave_temporal, merge_temporal, reconstruct_spatial,
    split_temporal, Field, FieldSequence, GridSpec, StaggerFactors, SubtaskIndex,
};
use stagger_core::model::{forward_var, AuxChannelSpec, CoarseSolver, EnsembleLayout, ModelParams, ModelSpec};
use stagger_core::parallel::WorkerPool;
use stagger_core::physics::{
    diffusion_residual, field_tensor, msr_loss, ns_vorticity_residual, DiffusionBoundary, DiffusionResidualConfig,
    DiffusionScheme, NsBoundary, NsResidualConfig, ResidualOp,
};
use stagger_core::rng::{member_seed, Stream};
use stagger_core::snapshot::{load_field_on, load_sequence, save_field, save_sequence};
use stagger_core::solvers::{initial_state, periodic_forcing, prepare_bootstrap, solve, OracleConfig};
use stagger_core::train::{
    coarse_rollout, evaluate, init_params, optimize_input, oracle_trajectories, rollout, rollout_var,
    staggered_loss, windows, TrainConfig, Trainer, TrainingPool,
};
use stagger_core::Result;

const GRAD_TOL: f64 = 1e-4;
const DIFFUSION_CN_TOL: f64 = 1e-8;
const NS_RESIDUAL_TOL: f64 = 1e-6;
const AFFINE_R2: f64 = 0.99;
const PROP1_EQUAL_GAP: f64 = 1e-8;
const PROP1_GENERIC_GAP: f64 = 1e-3;
const DIFFUSION_ERROR_20: f64 = 0.01;
const NS_ERROR_50: f64 = 0.05;
const NS_STAGGER_RATIO: f64 = 3.0;
const PARALLEL_RATIO: f64 = 0.6;
const PARALLEL_WORKERS: usize = 4;
const INVERSE_RATIO: f64 = 1e-3;
const INVERSE_STEPS: usize = 500;

const SEED: u64 = 1;
const EVAL_ICS: u64 = 4;

struct Outcome {
    pass: bool,
    detail: String,
    /// Failure caused by missing hardware rather than by the code.
    hardware_limited: bool,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome {
        pass,
        detail,
        hardware_limited: false,
    }
}

fn random_field(g: GridSpec, rng: &mut ChaCha8Rng) -> Field {
    Field::new(g, (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(), 0.0).unwrap()
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Fixed, non-uniform weighting so every output coordinate matters.
fn weigh<'t>(tape: &'t Tape, v: Var<'t>) -> Result<Var<'t>> {
    let shape = v.shape();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|k| ((k as f64) * 0.7).sin() + 0.3).collect())?;
    Ok(v.mul(tape.constant(w))?.sum())
}

fn perturbed_params(spec: ModelSpec, seed: u64, amplitude: f64) -> ModelParams {
    let mut p = init_params(spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in p.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += amplitude * rng.gen_range(-1.0..1.0));
    }
    p
}

fn diffusion_op(g: &GridSpec, r: f64) -> ResidualOp {
    ResidualOp::Diffusion(DiffusionResidualConfig {
        dx: g.dx,
        dt: r * g.dx * g.dx,
        scheme: DiffusionScheme::CrankNicolson,
        boundary: DiffusionBoundary::Periodic,
    })
}

fn ns_op(g: &GridSpec) -> ResidualOp {
    ResidualOp::Ns(NsResidualConfig {
        dx: g.dx,
        dt: 1e-2,
        reynolds: 1000.0,
        forcing: Some(periodic_forcing(*g).unwrap()),
        boundary: NsBoundary::Periodic,
    })
}

fn spec(in_channels: usize, hidden: usize, depth: usize, state_scale: f64) -> ModelSpec {
    ModelSpec {
        in_channels,
        hidden_channels: hidden,
        depth,
        kernel_size: 3,
        padding: ConvPadding::Periodic,
        predict_delta: true,
        state_scale,
    }
}

// 1
fn round_trip() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let g = GridSpec::unit_periodic(16, 16)?;
    let mut cases = 0;
    for s_h in [1, 2, 4] {
        for s_w in [1, 2, 4] {
            for _ in 0..4 {
                let f = random_field(g, &mut rng);
                let back = reconstruct_spatial(&decompose_spatial(&f, StaggerFactors::new(s_h, s_w, 1)?)?)?;
                if back != f {
                    return Ok(outcome(false, format!("spatial ({s_h},{s_w}) not exact")));
                }
                cases += 1;
            }
        }
    }
    for s_t in [1, 2, 4] {
        let frames: Vec<Field> = (0..4).map(|n| random_field(g, &mut rng).with_time(n as f64 * 0.01)).collect();
        let seq = FieldSequence::new(frames, 0.01)?;
        if merge_temporal(&split_temporal(&seq, s_t)?)? != seq {
            return Ok(outcome(false, format!("temporal streams s_T={s_t} not exact")));
        }
        let mut rebuilt = Vec::new();
        for block in seq.frames().chunks(s_t) {
            let window = FieldSequence::new(block.to_vec(), 0.01)?;
            rebuilt.extend(interleave_temporal(decompose_temporal(&window, s_t)?, s_t, 0.01)?.into_frames());
        }
        if rebuilt != seq.frames() {
            return Ok(outcome(false, format!("temporal windows s_T={s_t} not exact")));
        }
        cases += 1;
    }
    Ok(outcome(true, format!("{cases} spatial and temporal round trips exact")))
}

// 2
fn residual_vs_oracle() -> Result<Outcome> {
    let g = GridSpec::unit_periodic(16, 16)?;
    let op = diffusion_op(&g, 0.25);
    let oracle = OracleConfig::new(op.clone())?;
    let ResidualOp::Diffusion(d) = &op else { unreachable!() };
    let mut worst_d: f64 = 0.0;
    for n in 0..4 {
        let seq = solve(&initial_state(g, &oracle, member_seed(SEED, Stream::Data, n), 100.0)?, 10, &oracle)?;
        for w in seq.frames().windows(2) {
            worst_d = worst_d.max(diffusion_residual(&w[0], &w[1], d)?.max_abs());
        }
    }
    let g = GridSpec::unit_periodic(32, 32)?;
    let op = ns_op(&g);
    let oracle = OracleConfig::new(op.clone())?;
    let ResidualOp::Ns(ns) = &op else { unreachable!() };
    let mut worst_ns: f64 = 0.0;
    for n in 0..2 {
        let seq = solve(&initial_state(g, &oracle, member_seed(SEED, Stream::Data, n), 1.0)?, 20, &oracle)?;
        for w in seq.frames().windows(2) {
            worst_ns = worst_ns.max(ns_vorticity_residual(&w[0], &w[1], ns)?.max_abs());
        }
    }
    Ok(outcome(
        worst_d < DIFFUSION_CN_TOL && worst_ns < NS_RESIDUAL_TOL,
        format!("diffusion CN max|R| {worst_d:.2e} (< {DIFFUSION_CN_TOL:e}), NS 32x32 max|R| {worst_ns:.2e} (< {NS_RESIDUAL_TOL:e})"),
    ))
}

struct VarNet<'t> {
    spec: ModelSpec,
    vars: Vec<Var<'t>>,
}

impl<'t> CoarseSolver<'t> for VarNet<'t> {
    fn predict(&self, _index: SubtaskIndex, input: Var<'t>, _source: Var<'t>) -> Result<Var<'t>> {
        forward_var(&self.spec, &self.vars, input)
    }
}

// 3
fn gradient_fidelity() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let eps = 1e-6;
    let x = random_tensor(&[2, 6, 6], &mut rng);
    let y = random_tensor(&[2, 6, 6], &mut rng);
    let kernel = random_tensor(&[3, 2, 3, 3], &mut rng);
    let bias = random_tensor(&[2], &mut rng);
    let mut checks: Vec<(&str, f64)> = Vec::new();
    let pair = |f: &dyn for<'t> Fn(&'t Tape, Var<'t>, Var<'t>) -> Result<Var<'t>>| {
        gradient_check_many(|tape, v| weigh(tape, f(tape, v[0], v[1])?), &[x.clone(), y.clone()], eps)
    };
    checks.push(("add", pair(&|_, a, b| a.add(b))?));
    checks.push(("sub", pair(&|_, a, b| a.sub(b))?));
    checks.push(("mul", pair(&|_, a, b| a.mul(b))?));
    checks.push(("concat_channels", pair(&|_, a, b| Var::concat_channels(&[a, b]))?));
    let single = |f: &dyn for<'t> Fn(Var<'t>) -> Result<Var<'t>>| gradient_check(|tape, v| weigh(tape, f(v)?), &x, eps);
    checks.push(("scale", single(&|v| Ok(v.scale(-1.7)))?));
    checks.push(("add_scalar", single(&|v| Ok(v.add_scalar(0.4).square()))?));
    checks.push(("square", single(&|v| Ok(v.square()))?));
    checks.push(("gelu", single(&|v| Ok(v.gelu()))?));
    checks.push(("tanh", single(&|v| Ok(v.tanh()))?));
    checks.push(("sum", single(&|v| Ok(v.square().sum()))?));
    checks.push(("mean", single(&|v| Ok(v.square().mean()))?));
    checks.push(("slice", single(&|v| v.slice(2, 1, 3))?));
    checks.push(("pad_zero", single(&|v| v.pad([1, 2, 0, 1], PadMode::Zero))?));
    checks.push(("pad_reflect", single(&|v| v.pad([2, 1, 1, 2], PadMode::Reflect))?));
    checks.push(("circular_shift", single(&|v| v.circular_shift(2, -2))?));
    checks.push(("zero_shift", single(&|v| v.zero_shift(1, 1))?));
    checks.push(("subgrid", single(&|v| v.subgrid(2, 3, 1, 2))?));
    checks.push((
        "interleave",
        single(&|v| {
            let parts: Vec<Var<'_>> = (0..2).flat_map(|i| (0..2).map(move |j| (i, j))).map(|(i, j)| v.subgrid(2, 2, i, j)).collect::<Result<_>>()?;
            Ok(Var::interleave(&parts, 2, 2)?.gelu())
        })?,
    ));
    for (name, padding) in [("conv2d_periodic", ConvPadding::Periodic), ("conv2d_zero", ConvPadding::Zero)] {
        let d = gradient_check_many(|tape, v| weigh(tape, v[0].conv2d(v[1], padding)?), &[x.clone(), kernel.clone()], eps)?;
        checks.push((name, d));
    }
    checks.push((
        "add_channel_bias",
        gradient_check_many(|tape, v| weigh(tape, v[0].add_channel_bias(v[1])?.gelu()), &[x.clone(), bias.clone()], eps)?,
    ));

    // Full staggered loss, 8x8 diffusion, factors (2,2,2), randomized non-zero head.
    let g = GridSpec::unit_periodic(8, 8)?;
    let op = diffusion_op(&g, 0.25);
    let oracle = OracleConfig::new(op.clone())?;
    let f = StaggerFactors::new(2, 2, 2)?;
    let layout = EnsembleLayout::new(g, f, &AuxChannelSpec::default(), &op)?;
    let sp = spec(layout.in_channels(), 4, 1, 1.0);
    let params = perturbed_params(sp, 3, 0.3);
    let boot = prepare_bootstrap(&initial_state(g, &oracle, 5, 100.0)?, 2, &oracle)?;
    let frames: Vec<Tensor> = boot.frames().iter().map(field_tensor).collect();
    let d = gradient_check_many(
        |tape, vars| {
            let net = VarNet { spec: sp, vars: vars.to_vec() };
            let inputs: Vec<Var<'_>> = frames.iter().map(|t| tape.constant(t.clone())).collect();
            staggered_loss(&net, &layout, &op, &inputs)
        },
        params.tensors(),
        eps,
    )?;
    checks.push(("staggered_loss", d));
    let (worst_name, worst) = checks.iter().cloned().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    Ok(outcome(
        worst < GRAD_TOL,
        format!("{} checks, worst deviation {worst:.2e} ({worst_name}) (< {GRAD_TOL:e})", checks.len()),
    ))
}

// 4
fn degenerate_equivalence() -> Result<Outcome> {
    let g = GridSpec::unit_periodic(16, 16)?;
    let op = diffusion_op(&g, 0.25);
    let oracle = OracleConfig::new(op.clone())?;
    let layout = EnsembleLayout::new(g, StaggerFactors::identity(), &AuxChannelSpec::default(), &op)?;
    let p = perturbed_params(spec(1, 8, 2, 1.0), 4, 0.1);
    let mut identical = 0;
    for n in 0..4 {
        let u = initial_state(g, &oracle, member_seed(SEED, Stream::Eval, n), 100.0)?;
        let tape = Tape::new();
        let x = tape.constant(field_tensor(&u));
        let stag = staggered_loss(&p, &layout, &op, &[x])?.item();
        let vars: Vec<Var<'_>> = p.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let plain = msr_loss(&[op.residual(x, forward_var(p.spec(), &vars, x)?)?])?.item();
        if stag.to_bits() == plain.to_bits() {
            identical += 1;
        }
    }
    Ok(outcome(identical == 4, format!("{identical}/4 losses bit-identical")))
}

// 5
fn multi_resolution() -> Result<Outcome> {
    let g = GridSpec::unit_periodic(16, 16)?;
    let op = diffusion_op(&g, 0.25);
    let oracle = OracleConfig::new(op.clone())?;
    let f = StaggerFactors::new(2, 2, 2)?;
    let layout = EnsembleLayout::new(g, f, &AuxChannelSpec::default(), &op)?;
    let p = perturbed_params(spec(1, 8, 2, 1.0), 5, 0.05);
    let boot = prepare_bootstrap(&initial_state(g, &oracle, 11, 100.0)?, 2, &oracle)?;
    let blocks = 8;
    let full = rollout(&p, &layout, &boot, blocks * f.s_t, &WorkerPool::new(1)?)?;
    let coarse_grid = layout.coarse_grid()?;
    let mut compared = 0;
    for idx in f.subtasks() {
        let sub = |frame: &Field| extract_subgrid(frame.values(), g.height, g.width, f.s_h, f.s_w, idx.i, idx.j);
        let start = &full.frames()[idx.k];
        let init = Field::new(coarse_grid, sub(start), start.time())?;
        let coarse = coarse_rollout(&p, &layout, idx, &init, oracle.dt(), blocks)?;
        for (m, frame) in coarse.frames().iter().enumerate() {
            let fine = &full.frames()[idx.k + m * f.s_t];
            let same = frame.values().iter().zip(sub(fine)).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Ok(outcome(false, format!("subtask {idx:?} differs at block {m}")));
            }
            compared += 1;
        }
    }
    Ok(outcome(true, format!("{compared} coarse frames bit-identical across 8 subtasks x {blocks} blocks")))
}

// 6
fn bandwidth_study() -> Result<Outcome> {
    let g = GridSpec::unit_periodic(16, 16)?;
    let cfg = DiffusionResidualConfig {
        dx: g.dx,
        dt: 0.2 * g.dx * g.dx,
        scheme: DiffusionScheme::Explicit,
        boundary: DiffusionBoundary::Periodic,
    };
    let t = build_transfer_matrix(&g, &cfg, Arrangement::Folded)?;
    let study = transfer_power_bandwidth(&t, 24)?;
    let monotone = study.bandwidths.windows(2).all(|w| w[0] <= w[1]);
    let pre = study.pre_saturation();
    let xs: Vec<f64> = (1..=pre.len()).map(|k| k as f64).collect();
    let ys: Vec<f64> = pre.iter().map(|b| *b as f64).collect();
    let (slope, _, r2) = affine_fit(&xs, &ys)?;
    let n = 32;
    let t1 = build_transfer_matrix_1d(n, 0.25, DiffusionScheme::Explicit, true, Arrangement::Folded)?;
    let b1 = t1.bandwidth();
    let s1 = transfer_power_bandwidth(&t1, 40)?;
    let closed = s1.bandwidths.iter().enumerate().all(|(k, b)| *b == ((k + 1) * b1).min(n - 1));
    let pass = monotone && r2 >= AFFINE_R2 && pre.len() >= 3 && study.k_dense.is_some() && closed;
    Ok(outcome(
        pass,
        format!(
            "d=256 bandwidths {:?}; monotone {monotone}; pre-saturation k=1..{} slope {slope:.1} R^2 {r2:.4} (>= {AFFINE_R2}); k_dense {:?}; 1-D d=32 closed form min(k*{b1}, 31) {}",
            study.bandwidths,
            pre.len(),
            study.k_dense,
            if closed { "exact" } else { "violated" }
        ),
    ))
}

// 7
fn block_least_squares() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut random = |r: usize, c: usize| Mat::<f64>::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
    let blocks = stagger_blocks(4, 4, 2, 2)?;
    // Samples confined to a 3-dimensional column space every block also spans.
    let x_low = &random(48, 3) * &random(3, 16);
    let y_low = random(48, 16);
    let low = prop1_verify(&x_low, &y_low, &blocks)?;
    let x_gen = random(96, 16);
    let y_gen = random(96, 16);
    let generic = prop1_verify(&x_gen, &y_gen, &blocks)?;
    let low_gap = low.gaps.iter().cloned().fold(0.0, f64::max);
    let gen_gap = generic.gaps.iter().cloned().fold(f64::INFINITY, f64::min);
    let gen_block_rank = generic.block_ranks.iter().max().copied().unwrap_or(0);
    let pass = low_gap < PROP1_EQUAL_GAP && low.equal && gen_gap > PROP1_GENERIC_GAP && generic.full_rank > gen_block_rank;
    Ok(outcome(
        pass,
        format!(
            "rank-deficient: ranks {}/{:?}, max gap {low_gap:.2e} (< {PROP1_EQUAL_GAP:e}); generic: ranks {}/{:?}, min gap {gen_gap:.2e} (> {PROP1_GENERIC_GAP:e})",
            low.full_rank, low.block_ranks, generic.full_rank, generic.block_ranks
        ),
    ))
}

struct Trained {
    params: ModelParams,
    layout: EnsembleLayout,
    mean_error: f64,
    seconds: f64,
}

struct Experiment {
    grid: GridSpec,
    op: ResidualOp,
    oracle: OracleConfig,
    ic_scale: f64,
    hidden: usize,
    state_scale: f64,
    trajectories: usize,
    trajectory_steps: usize,
    horizon: usize,
}

fn train_and_evaluate(e: &Experiment, factors: StaggerFactors, workers: &WorkerPool) -> Result<Trained> {
    let layout = EnsembleLayout::new(e.grid, factors, &AuxChannelSpec::default(), &e.op)?;
    let start = Instant::now();
    let trajs = oracle_trajectories(e.grid, &e.oracle, e.trajectories, e.trajectory_steps, SEED, Stream::Data, e.ic_scale, workers)?;
    let pool = TrainingPool::new(windows(&trajs, factors.s_t, 1)?, factors.s_t)?;
    let config = TrainConfig {
        lr0: 3e-3,
        lr_decay: 0.8,
        decay_every: 100,
        batch_size: 8,
        iterations: 2000,
        clip_norm: 1.0,
        divergence_threshold: 1e6,
        pool: None,
    };
    let trainer = Trainer {
        config,
        layout: &layout,
        op: &e.op,
        oracle: Some(&e.oracle),
        workers,
        seed: SEED,
    };
    let init = init_params(spec(layout.in_channels(), e.hidden, 2, e.state_scale), SEED)?;
    let out = trainer.train(init, pool, &mut |_| {})?;
    let mut total = 0.0;
    for n in 0..EVAL_ICS {
        let s0 = initial_state(e.grid, &e.oracle, member_seed(SEED, Stream::Eval, n), e.ic_scale)?;
        let boot = prepare_bootstrap(&s0, factors.s_t, &e.oracle)?;
        total += evaluate(&out.best, &layout, &e.oracle, &boot, e.horizon, workers)?.error_k(e.horizon, &e.op)?;
    }
    Ok(Trained {
        params: out.best,
        layout,
        mean_error: total / EVAL_ICS as f64,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn diffusion_experiment() -> Result<Experiment> {
    let grid = GridSpec::unit_periodic(16, 16)?;
    let op = diffusion_op(&grid, 0.25);
    let mut oracle = OracleConfig::new(op.clone())?;
    oracle.burn_in = 0.01;
    Ok(Experiment {
        grid,
        op,
        oracle,
        ic_scale: 100.0,
        hidden: 24,
        state_scale: 1.0,
        trajectories: 8,
        trajectory_steps: 40,
        horizon: 20,
    })
}

// 8
fn diffusion_training(exp: &Experiment, workers: &WorkerPool) -> Result<(Outcome, Option<Trained>)> {
    let plain = train_and_evaluate(exp, StaggerFactors::identity(), workers)?;
    let stag = train_and_evaluate(exp, StaggerFactors::new(2, 2, 2)?, workers)?;
    let pass = plain.mean_error <= DIFFUSION_ERROR_20 && stag.mean_error <= DIFFUSION_ERROR_20;
    let detail = format!(
        "mean Error-20 over {EVAL_ICS} ICs: (1,1,1) {:.4} in {:.0}s, (2,2,2) {:.4} in {:.0}s (<= {DIFFUSION_ERROR_20}), 2000 iterations",
        plain.mean_error, plain.seconds, stag.mean_error, stag.seconds
    );
    Ok((outcome(pass, detail), Some(plain)))
}

// 9
fn ns_training(workers: &WorkerPool) -> Result<Outcome> {
    let grid = GridSpec::unit_periodic(32, 32)?;
    let op = ns_op(&grid);
    let oracle = OracleConfig::new(op.clone())?;
    let exp = Experiment {
        grid,
        op,
        oracle,
        ic_scale: 1.0,
        hidden: 16,
        state_scale: 3e-3,
        trajectories: 8,
        trajectory_steps: 60,
        horizon: 50,
    };
    let plain = train_and_evaluate(&exp, StaggerFactors::identity(), workers)?;
    let stag = train_and_evaluate(&exp, StaggerFactors::new(2, 2, 2)?, workers)?;
    let pass = plain.mean_error <= NS_ERROR_50 && stag.mean_error <= NS_STAGGER_RATIO * plain.mean_error;
    Ok(outcome(
        pass,
        format!(
            "mean vorticity Error-50 over {EVAL_ICS} ICs: (1,1,1) {:.4} in {:.0}s (<= {NS_ERROR_50}), (2,2,2) {:.4} in {:.0}s, ratio {:.2} (<= {NS_STAGGER_RATIO})",
            plain.mean_error,
            plain.seconds,
            stag.mean_error,
            stag.seconds,
            stag.mean_error / plain.mean_error
        ),
    ))
}

// 10
fn gmacs() -> Result<Outcome> {
    let g = GridSpec::unit_periodic(64, 64)?;
    let sp = spec(2, 32, 4, 1.0);
    let r = count_gmacs(&sp, &g, StaggerFactors::new(2, 2, 2)?, 200)?;
    let exact = r.per_card_step_macs * 8 == r.step_macs && r.workers == 8;
    let per_t: Vec<f64> = [1, 2, 4]
        .iter()
        .map(|s_t| count_gmacs(&sp, &g, StaggerFactors::new(2, 2, *s_t).unwrap(), 200).map(|r| r.per_card_horizon_gmacs))
        .collect::<Result<_>>()?;
    let scaling = per_t[0] == 2.0 * per_t[1] && per_t[0] == 4.0 * per_t[2];
    Ok(outcome(
        exact && scaling,
        format!(
            "(2,2,2): step {} MACs, per card {} = total/8 {}; 200-step per-card GMACs for s_T=1,2,4: {:.4}, {:.4}, {:.4}; fold reduction {:.0}x",
            r.step_macs, r.per_card_step_macs, exact, per_t[0], per_t[1], per_t[2], r.fold_reduction
        ),
    ))
}

// 11
fn parallelism() -> Result<Outcome> {
    let g = GridSpec::unit_periodic(64, 64)?;
    let op = diffusion_op(&g, 0.25);
    let oracle = OracleConfig::new(op.clone())?;
    let f = StaggerFactors::new(2, 2, 2)?;
    let layout = EnsembleLayout::new(g, f, &AuxChannelSpec::default(), &op)?;
    let p = perturbed_params(spec(1, 32, 4, 1.0), 6, 0.05);
    let boot = prepare_bootstrap(&initial_state(g, &oracle, 12, 100.0)?, 2, &oracle)?;
    let hardware = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let workers = hardware.max(PARALLEL_WORKERS);
    let time = |pool: &WorkerPool| -> Result<(f64, Vec<Field>)> {
        let mut best = f64::INFINITY;
        let mut out = Vec::new();
        for _ in 0..3 {
            let start = Instant::now();
            out = layout.step(&p, boot.frames(), oracle.dt(), pool)?;
            best = best.min(start.elapsed().as_secs_f64());
        }
        Ok((best, out))
    };
    let (serial, a) = time(&WorkerPool::new(1)?)?;
    let (parallel, b) = time(&WorkerPool::new(workers)?)?;
    let identical = a.iter().zip(&b).all(|(x, y)| x.values().iter().zip(y.values()).all(|(u, v)| u.to_bits() == v.to_bits()));
    let ratio = parallel / serial;
    let pass = identical && ratio <= PARALLEL_RATIO;
    Ok(Outcome {
        pass,
        detail: format!(
            "8 subtasks, {workers} workers vs 1: {:.1} ms vs {:.1} ms, ratio {ratio:.2} (<= {PARALLEL_RATIO}), bit-identical {identical}; {hardware} hardware thread(s) available",
            parallel * 1e3,
            serial * 1e3
        ),
        hardware_limited: !pass && identical && hardware < PARALLEL_WORKERS,
    })
}

// 12
fn inverse_problem(exp: &Experiment, trained: &Trained) -> Result<Outcome> {
    let blocks = 10;
    let truth_start = prepare_bootstrap(&initial_state(exp.grid, &exp.oracle, member_seed(SEED, Stream::Control, 0), exp.ic_scale)?, 1, &exp.oracle)?;
    let target = field_tensor(&solve(&truth_start.frames()[0], blocks, &exp.oracle)?.frames()[blocks]);
    let guess = prepare_bootstrap(&initial_state(exp.grid, &exp.oracle, member_seed(SEED, Stream::Control, 1), exp.ic_scale)?, 1, &exp.oracle)?;
    let x0 = field_tensor(&guess.frames()[0]);
    let (_, trace) = optimize_input(
        |x| {
            let frames = rollout_var(&trained.params, &trained.layout, x, blocks)?;
            msr_loss(&[frames[0].sub(x.tape().constant(target.clone()))?])
        },
        &x0,
        INVERSE_STEPS,
        1e-2,
    )?;
    let first = trace[0];
    let last = *trace.last().unwrap_or(&f64::INFINITY);
    let finite = trace.iter().all(|v| v.is_finite());
    Ok(outcome(
        finite && last <= INVERSE_RATIO * first,
        format!("objective {first:.3e} -> {last:.3e} after {INVERSE_STEPS} Adam steps, ratio {:.2e} (<= {INVERSE_RATIO:e})", last / first),
    ))
}

fn files_identical(a: &Path, b: &Path) -> Result<bool> {
    let mut names: Vec<_> = fs::read_dir(a)?.map(|e| e.map(|e| e.file_name())).collect::<std::io::Result<_>>()?;
    names.sort();
    let mut other: Vec<_> = fs::read_dir(b)?.map(|e| e.map(|e| e.file_name())).collect::<std::io::Result<_>>()?;
    other.sort();
    if names != other {
        return Ok(false);
    }
    for n in names {
        if fs::read(a.join(&n))? != fs::read(b.join(&n))? {
            return Ok(false);
        }
    }
    Ok(true)
}

fn short_run(dir: &Path) -> Result<()> {
    let g = GridSpec::unit_periodic(8, 8)?;
    let op = diffusion_op(&g, 0.25);
    let oracle = OracleConfig::new(op.clone())?;
    let f = StaggerFactors::new(2, 2, 2)?;
    let workers = WorkerPool::new(1)?;
    let layout = EnsembleLayout::new(g, f, &AuxChannelSpec::default(), &op)?;
    let trajs = oracle_trajectories(g, &oracle, 2, 6, SEED, Stream::Data, 100.0, &workers)?;
    for (n, t) in trajs.iter().enumerate() {
        save_sequence(t, &dir.join("data"), &format!("traj{n}"))?;
    }
    let pool = TrainingPool::new(windows(&trajs, 2, 1)?, 2)?;
    let trainer = Trainer {
        config: TrainConfig {
            lr0: 3e-3,
            lr_decay: 0.9,
            decay_every: 10,
            batch_size: 4,
            iterations: 40,
            clip_norm: 1.0,
            divergence_threshold: 1e6,
            pool: None,
        },
        layout: &layout,
        op: &op,
        oracle: Some(&oracle),
        workers: &workers,
        seed: SEED,
    };
    let out = trainer.train(init_params(spec(1, 4, 1, 1.0), SEED)?, pool, &mut |_| {})?;
    out.best.save(&dir.join("checkpoint"))?;
    let mut csv = String::from("iteration,loss,lr,pool_size\n");
    for r in &out.history {
        csv.push_str(&format!("{},{:e},{:e},{}\n", r.iteration, r.loss, r.lr, r.pool_size));
    }
    fs::write(dir.join("loss.csv"), csv)?;
    Ok(())
}

// 13
fn io() -> Result<Outcome> {
    let tmp = tempfile::tempdir()?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let g = GridSpec::unit_periodic(64, 64)?;
    let f = random_field(g, &mut rng).with_time(0.125);
    save_field(&f, &tmp.path().join("f.nstg"))?;
    // Snapshots hold values only; time and grid come from manifests.
    let back = load_field_on(&tmp.path().join("f.nstg"), g, f.time())?;
    let field_exact = back.values().iter().zip(f.values()).all(|(a, b)| a.to_bits() == b.to_bits())
        && back.values().len() == f.values().len();
    let frames: Vec<Field> = (0..3).map(|n| random_field(g, &mut rng).with_time(n as f64 * 0.01)).collect();
    let seq = FieldSequence::new(frames, 0.01)?;
    let manifest = save_sequence(&seq, &tmp.path().join("seq"), "s")?;
    let seq_exact = load_sequence(&manifest)? == seq;
    let (a, b) = (tmp.path().join("run_a"), tmp.path().join("run_b"));
    short_run(&a)?;
    short_run(&b)?;
    let rerun = files_identical(&a.join("data"), &b.join("data"))?
        && files_identical(&a.join("checkpoint"), &b.join("checkpoint"))?
        && fs::read(a.join("loss.csv"))? == fs::read(b.join("loss.csv"))?;
    Ok(outcome(
        field_exact && seq_exact && rerun,
        format!("field round trip bit-exact {field_exact}, sequence {seq_exact}, 1-worker rerun byte-identical {rerun}"),
    ))
}

fn main() {
    let workers = WorkerPool::with_hardware_parallelism().expect("worker pool");
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut run = |n: usize, name: &'static str, r: Result<Outcome>| {
        let o = r.unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        println!(
            "{} [{n:>2}] {name}: {}{}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            if o.hardware_limited { " (hardware limited)" } else { "" }
        );
        results.push((n, name, o));
    };
    run(1, "round trip", round_trip());
    run(2, "residual vs oracle", residual_vs_oracle());
    run(3, "gradient fidelity", gradient_fidelity());
    run(4, "degenerate equivalence", degenerate_equivalence());
    run(5, "multi-resolution consistency", multi_resolution());
    run(6, "bandwidth study", bandwidth_study());
    run(7, "block least squares", block_least_squares());
    let exp = diffusion_experiment().expect("diffusion experiment");
    let (o8, plain) = match diffusion_training(&exp, &workers) {
        Ok(v) => v,
        Err(e) => (outcome(false, format!("error: {e}")), None),
    };
    run(8, "diffusion training", Ok(o8));
    run(9, "Navier-Stokes training", ns_training(&workers));
    run(10, "GMACs accounting", gmacs());
    run(11, "parallel ensemble step", parallelism());
    let o12 = match &plain {
        Some(t) => inverse_problem(&exp, t),
        None => Ok(outcome(false, "no trained diffusion model".into())),
    };
    run(12, "inverse problem", o12);
    run(13, "IO and reruns", io());

    let passed = results.iter().filter(|r| r.2.pass).count();
    let blocking = results.iter().filter(|r| !r.2.pass && !r.2.hardware_limited).count();
    println!("{passed}/{} criteria passed", results.len());
    if blocking > 0 {
        std::process::exit(1);
    }
}
