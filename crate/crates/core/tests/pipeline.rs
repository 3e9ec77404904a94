use stagger_core::autodiff::{ConvPadding, Tape};
use stagger_core::field::{GridSpec, StaggerFactors};
use stagger_core::model::{AuxChannelSpec, AuxMode, EnsembleLayout, ModelParams, ModelSpec};
use stagger_core::parallel::WorkerPool;
use stagger_core::physics::{
    field_tensor, ns_vorticity_residual, DiffusionBoundary, DiffusionResidualConfig, DiffusionScheme, NsBoundary,
    NsResidualConfig, ResidualOp,
};
use stagger_core::rng::{member_seed, Stream};
use stagger_core::solvers::{equation_grid, initial_state, prepare_bootstrap, Equation, OracleConfig, OracleMock};
use stagger_core::train::{
    evaluate, init_params, oracle_trajectories, rollout, staggered_loss, windows, TrainConfig, Trainer, TrainingPool,
};

fn diffusion(n: usize) -> (GridSpec, ResidualOp, OracleConfig) {
    let g = GridSpec::unit_periodic(n, n).unwrap();
    let op = ResidualOp::Diffusion(DiffusionResidualConfig {
        dx: g.dx,
        dt: 0.25 * g.dx * g.dx,
        scheme: DiffusionScheme::CrankNicolson,
        boundary: DiffusionBoundary::Periodic,
    });
    let mut oracle = OracleConfig::new(op.clone()).unwrap();
    oracle.burn_in = 0.01;
    (g, op, oracle)
}

fn spec(in_channels: usize, padding: ConvPadding, state_scale: f64) -> ModelSpec {
    ModelSpec {
        in_channels,
        hidden_channels: 6,
        depth: 1,
        kernel_size: 3,
        padding,
        predict_delta: true,
        state_scale,
    }
}

fn train_config(iterations: usize) -> TrainConfig {
    TrainConfig {
        lr0: 3e-3,
        lr_decay: 0.9,
        decay_every: 20,
        batch_size: 4,
        iterations,
        clip_norm: 1.0,
        divergence_threshold: 1e6,
        pool: None,
    }
}

#[test]
fn short_training_lowers_the_staggered_loss() {
    let (g, op, oracle) = diffusion(8);
    let f = StaggerFactors::new(2, 2, 2).unwrap();
    let workers = WorkerPool::new(1).unwrap();
    let layout = EnsembleLayout::new(g, f, &AuxChannelSpec::default(), &op).unwrap();
    let trajs = oracle_trajectories(g, &oracle, 2, 10, 3, Stream::Data, 100.0, &workers).unwrap();
    let pool = TrainingPool::new(windows(&trajs, 2, 1).unwrap(), 2).unwrap();
    let trainer = Trainer {
        config: train_config(60),
        layout: &layout,
        op: &op,
        oracle: Some(&oracle),
        workers: &workers,
        seed: 3,
    };
    let init = init_params(spec(layout.in_channels(), ConvPadding::Periodic, 1.0), 3).unwrap();
    let out = trainer.train(init, pool, &mut |_| {}).unwrap();
    let first = out.history[0].loss;
    assert!(out.best_loss < 0.5 * first, "{first} -> {}", out.best_loss);

    let boot = prepare_bootstrap(
        &initial_state(g, &oracle, member_seed(3, Stream::Eval, 0), 100.0).unwrap(),
        2,
        &oracle,
    )
    .unwrap();
    let ev = evaluate(&out.best, &layout, &oracle, &boot, 6, &workers).unwrap();
    assert_eq!(ev.rollout.len(), ev.truth.len());
    assert!(ev.error_k(6, &op).unwrap().is_finite());
}

#[test]
fn oracle_mock_is_exact_under_decomposition() {
    let g = GridSpec::unit_periodic(16, 16).unwrap();
    let op = ResidualOp::Ns(NsResidualConfig {
        dx: g.dx,
        dt: 1e-2,
        reynolds: 1000.0,
        forcing: None,
        boundary: NsBoundary::Periodic,
    });
    let oracle = OracleConfig::new(op.clone()).unwrap();
    let f = StaggerFactors::new(2, 2, 2).unwrap();
    let layout = EnsembleLayout::new(g, f, &AuxChannelSpec::default(), &op).unwrap();
    let mock = OracleMock::new(oracle.clone(), g, f).unwrap();
    let workers = WorkerPool::new(2).unwrap();
    let boot = prepare_bootstrap(&initial_state(g, &oracle, 11, 1.0).unwrap(), 2, &oracle).unwrap();

    let tape = Tape::new();
    let inputs: Vec<_> = boot.frames().iter().map(|fr| tape.constant(field_tensor(fr))).collect();
    let loss = staggered_loss(&mock, &layout, &op, &inputs).unwrap().item();
    assert!(loss < 1e-12, "{loss}");

    let ev = evaluate(&mock, &layout, &oracle, &boot, 8, &workers).unwrap();
    for k in 2..=8 {
        assert!(ev.error_k(k, &op).unwrap() < 1e-9);
    }
}

#[test]
fn checkpoint_reload_reproduces_rollout() {
    let (g, op, oracle) = diffusion(8);
    let f = StaggerFactors::new(2, 1, 1).unwrap();
    let aux = AuxChannelSpec {
        mode: AuxMode::SinusoidalPe,
        pe_frequencies: 2,
    };
    let layout = EnsembleLayout::new(g, f, &aux, &op).unwrap();
    let params = init_params(spec(layout.in_channels(), ConvPadding::Periodic, 1.0), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    params.save(dir.path()).unwrap();
    let back = ModelParams::load(dir.path()).unwrap();
    assert_eq!(back.spec(), params.spec());
    let workers = WorkerPool::new(1).unwrap();
    let boot = prepare_bootstrap(&initial_state(g, &oracle, 2, 100.0).unwrap(), 1, &oracle).unwrap();
    let a = rollout(&params, &layout, &boot, 5, &workers).unwrap();
    let b = rollout(&back, &layout, &boot, 5, &workers).unwrap();
    assert_eq!(a, b);
}

#[test]
fn rollout_does_not_depend_on_worker_count() {
    let (g, op, oracle) = diffusion(8);
    let f = StaggerFactors::new(2, 2, 2).unwrap();
    let layout = EnsembleLayout::new(g, f, &AuxChannelSpec::default(), &op).unwrap();
    let params = init_params(spec(layout.in_channels(), ConvPadding::Periodic, 1.0), 8).unwrap();
    let boot = prepare_bootstrap(&initial_state(g, &oracle, 4, 100.0).unwrap(), 2, &oracle).unwrap();
    let one = rollout(&params, &layout, &boot, 8, &WorkerPool::new(1).unwrap()).unwrap();
    let three = rollout(&params, &layout, &boot, 8, &WorkerPool::new(3).unwrap()).unwrap();
    assert_eq!(one, three);
}

#[test]
fn lid_driven_cavity_pipeline_runs() {
    let g = equation_grid(Equation::NsLidDriven, 16, 16).unwrap();
    let op = ResidualOp::Ns(NsResidualConfig {
        dx: g.dx,
        dt: 1e-2,
        reynolds: 100.0,
        forcing: None,
        boundary: NsBoundary::LidDriven { lid_speed: 1.0 },
    });
    let oracle = OracleConfig::new(op.clone()).unwrap();
    let ResidualOp::Ns(ns) = &op else { unreachable!() };
    let workers = WorkerPool::new(1).unwrap();
    let trajs = oracle_trajectories(g, &oracle, 1, 4, 1, Stream::Data, 1.0, &workers).unwrap();
    for pair in trajs[0].frames().windows(2) {
        assert!(ns_vorticity_residual(&pair[0], &pair[1], ns).unwrap().max_abs() < 1e-6);
    }
    let f = StaggerFactors::new(2, 2, 1).unwrap();
    let layout = EnsembleLayout::new(g, f, &AuxChannelSpec::default(), &op).unwrap();
    let trainer = Trainer {
        config: train_config(5),
        layout: &layout,
        op: &op,
        oracle: Some(&oracle),
        workers: &workers,
        seed: 1,
    };
    let init = init_params(spec(layout.in_channels(), ConvPadding::Zero, 1e-2), 1).unwrap();
    let pool = TrainingPool::new(windows(&trajs, 1, 1).unwrap(), 1).unwrap();
    let out = trainer.train(init, pool, &mut |_| {}).unwrap();
    assert!(out.history.iter().all(|r| r.loss.is_finite()));
}
