use std::path::Path;

use stagger_core::analysis::{
    affine_fit, build_transfer_matrix, count_gmacs, prop1_verify, stagger_blocks, transfer_power_bandwidth, Arrangement,
};
use stagger_core::autodiff::Tensor;
use stagger_core::field::{FieldSequence, StaggerFactors};
use stagger_core::model::{CoarseSolver, EnsembleLayout, ModelParams};
use stagger_core::parallel::WorkerPool;
use stagger_core::physics::{diffusion_residual, field_tensor, msr_loss, ns_vorticity_residual, tensor_field, ResidualOp};
use stagger_core::rng::{member_seed, Stream};
use stagger_core::solvers::{initial_state, prepare_bootstrap, solve, OracleMock};
use stagger_core::train::{
    evaluate, init_params, optimize_input, oracle_trajectories, rollout, rollout_var, windows, Trainer, TrainingPool,
};

use crate::config::ExperimentConfig;
use crate::output::{num, Csv, Output};
use crate::CliError;

/// Oracle pairs whose residual exceeds this are flagged by `generate`.
pub const AUDIT_TOL: f64 = 1e-6;

pub struct Context<'a> {
    pub cfg: &'a ExperimentConfig,
    pub out: &'a Path,
    pub workers: &'a WorkerPool,
}

impl Context<'_> {
    fn layout(&self) -> Result<EnsembleLayout, CliError> {
        Ok(EnsembleLayout::new(self.cfg.grid()?, self.cfg.factors()?, &self.cfg.aux, &self.cfg.residual_op()?)?)
    }

    fn trajectories(&self) -> Result<Vec<FieldSequence>, CliError> {
        let c = self.cfg;
        Ok(oracle_trajectories(
            c.grid()?,
            &c.oracle()?,
            c.data.trajectories,
            c.data.steps,
            c.seed,
            Stream::Data,
            c.problem.ic_scale,
            self.workers,
        )?)
    }

    fn bootstrap(&self, stream: Stream, n: u64) -> Result<FieldSequence, CliError> {
        let c = self.cfg;
        let oracle = c.oracle()?;
        let s0 = initial_state(c.grid()?, &oracle, member_seed(c.seed, stream, n), c.problem.ic_scale)?;
        Ok(prepare_bootstrap(&s0, c.factors()?.s_t, &oracle)?)
    }

    fn commit(&self, out: Output, command: &str) -> Result<(), CliError> {
        let path = out.commit(self.cfg, command, self.workers.workers())?;
        println!("wrote {}", path.display());
        Ok(())
    }
}

/// Where a coarse solver comes from: trained parameters or the reference solver itself.
pub enum Checkpoint<'a> {
    Params(&'a Path),
    OracleMock,
}

type Solver = Box<dyn for<'t> CoarseSolver<'t> + Sync>;

fn load_solver(ctx: &Context, checkpoint: &Checkpoint, layout: &EnsembleLayout) -> Result<Solver, CliError> {
    match checkpoint {
        Checkpoint::OracleMock => Ok(Box::new(OracleMock::new(ctx.cfg.oracle()?, ctx.cfg.grid()?, ctx.cfg.factors()?)?)),
        Checkpoint::Params(dir) => {
            let params = ModelParams::load(dir)?;
            let want = layout.in_channels();
            if params.spec().in_channels != want {
                return Err(CliError::Config(format!(
                    "checkpoint expects {} input channels, this config provides {want}",
                    params.spec().in_channels
                )));
            }
            Ok(Box::new(params))
        }
    }
}

fn max_residual(pair: &[stagger_core::field::Field], op: &ResidualOp) -> Result<f64, CliError> {
    Ok(match op {
        ResidualOp::Diffusion(d) => diffusion_residual(&pair[0], &pair[1], d)?.max_abs(),
        ResidualOp::Ns(n) => ns_vorticity_residual(&pair[0], &pair[1], n)?.max_abs(),
    })
}

pub fn generate(ctx: &Context) -> Result<(), CliError> {
    let op = ctx.cfg.residual_op()?;
    let out = Output::begin(ctx.out, "generate")?;
    let trajs = ctx.trajectories()?;
    let mut audit = Csv::new(&["trajectory", "pairs", "max_residual", "pass"]);
    let mut flagged = 0;
    for (n, t) in trajs.iter().enumerate() {
        out.sequence("trajectories", &format!("traj{n:03}"), t)?;
        let mut worst: f64 = 0.0;
        for pair in t.frames().windows(2) {
            worst = worst.max(max_residual(pair, &op)?);
        }
        let pass = worst < AUDIT_TOL;
        flagged += usize::from(!pass);
        audit.row(&[n.to_string(), (t.len() - 1).to_string(), num(worst), pass.to_string()]);
    }
    out.csv("audit.csv", &audit)?;
    for n in 0..ctx.cfg.evaluate.initial_conditions {
        out.sequence("bootstraps", &format!("boot{n:03}"), &ctx.bootstrap(Stream::Eval, n as u64)?)?;
    }
    if flagged > 0 {
        eprintln!("warning: {flagged} trajectories exceed the residual audit tolerance {AUDIT_TOL:e}");
    }
    ctx.commit(out, "generate")
}

pub fn train(ctx: &Context) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let layout = ctx.layout()?;
    let op = cfg.residual_op()?;
    let oracle = cfg.oracle()?;
    let s_t = layout.factors().s_t;
    let out = Output::begin(ctx.out, "train")?;
    let trajs = ctx.trajectories()?;
    let pool = TrainingPool::new(windows(&trajs, s_t, cfg.data.window_stride)?, s_t)?;
    let trainer = Trainer {
        config: cfg.train,
        layout: &layout,
        op: &op,
        oracle: Some(&oracle),
        workers: ctx.workers,
        seed: cfg.seed,
    };
    let init = init_params(cfg.model_spec(layout.in_channels())?, cfg.seed)?;
    let every = (cfg.train.iterations / 20).max(1);
    let result = trainer.train(init, pool, &mut |r| {
        if r.iteration % every == 0 {
            eprintln!("iteration {:>6}  loss {:.4e}  lr {:.2e}", r.iteration, r.loss, r.lr);
        }
    })?;
    result.best.save(&out.path("checkpoint"))?;
    let mut loss = Csv::new(&["iteration", "loss", "lr", "pool_size"]);
    // Wall time lives in its own file so the rest of the output stays reproducible.
    let mut timing = Csv::new(&["iteration", "wall_ms"]);
    for r in &result.history {
        loss.row(&[r.iteration.to_string(), num(r.loss), num(r.lr), r.pool_size.to_string()]);
        timing.row(&[r.iteration.to_string(), r.wall_ms.to_string()]);
    }
    out.csv("loss.csv", &loss)?;
    out.csv("timing.csv", &timing)?;
    println!("best loss {:.4e}", result.best_loss);
    ctx.commit(out, "train")
}

pub fn evaluate_cmd(ctx: &Context, checkpoint: &Checkpoint) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let layout = ctx.layout()?;
    let solver = load_solver(ctx, checkpoint, &layout)?;
    let op = cfg.residual_op()?;
    let oracle = cfg.oracle()?;
    let e = &cfg.evaluate;
    let out = Output::begin(ctx.out, "evaluate")?;
    let snaps = out.dir("snapshots")?;
    let mut errors = Csv::new(&["ic", "k", "error"]);
    let mut totals = vec![0.0; e.checkpoints.len()];
    for n in 0..e.initial_conditions {
        let boot = ctx.bootstrap(Stream::Eval, n as u64)?;
        let ev = evaluate(solver.as_ref(), &layout, &oracle, &boot, e.horizon, ctx.workers)?;
        for (slot, &k) in e.checkpoints.iter().enumerate() {
            let err = ev.error_k(k, &op)?;
            totals[slot] += err;
            errors.row(&[n.to_string(), k.to_string(), num(err)]);
            let name = |kind: &str| snaps.join(format!("ic{n:03}_k{k:05}_{kind}.nstg"));
            stagger_core::snapshot::save_field(&ev.rollout.frames()[k], &name("pred"))?;
            stagger_core::snapshot::save_field(&ev.truth.frames()[k], &name("truth"))?;
        }
    }
    let mut summary = Csv::new(&["k", "mean_error"]);
    for (k, t) in e.checkpoints.iter().zip(&totals) {
        let mean = t / e.initial_conditions as f64;
        summary.row(&[k.to_string(), num(mean)]);
        println!("Error-{k} {mean:.4e}");
    }
    out.csv("errors.csv", &errors)?;
    out.csv("summary.csv", &summary)?;
    ctx.commit(out, "evaluate")
}

pub fn rollout_cmd(ctx: &Context, checkpoint: &Checkpoint) -> Result<(), CliError> {
    let layout = ctx.layout()?;
    let solver = load_solver(ctx, checkpoint, &layout)?;
    let s_t = layout.factors().s_t;
    let horizon = ctx.cfg.evaluate.horizon;
    let out = Output::begin(ctx.out, "rollout")?;
    let boot = ctx.bootstrap(Stream::Eval, 0)?;
    let steps = (horizon + 1).saturating_sub(s_t).div_ceil(s_t) * s_t;
    let seq = rollout(solver.as_ref(), &layout, &boot, steps, ctx.workers)?;
    out.sequence("frames", "rollout", &seq)?;
    let mut stats = Csv::new(&["frame", "time", "max_abs", "l2_norm"]);
    for (n, f) in seq.frames().iter().enumerate() {
        stats.row(&[n.to_string(), num(f.time()), num(f.max_abs()), num(f.l2_norm())]);
    }
    out.csv("frames.csv", &stats)?;
    ctx.commit(out, "rollout")
}

pub fn control(ctx: &Context, checkpoint: &Checkpoint) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let c = cfg.control;
    let layout = ctx.layout()?;
    let solver = load_solver(ctx, checkpoint, &layout)?;
    let oracle = cfg.oracle()?;
    let s_t = layout.factors().s_t;
    let out = Output::begin(ctx.out, "control")?;
    // The target is the reference state `blocks` ensemble steps after an unseen start.
    let truth = ctx.bootstrap(Stream::Control, 0)?;
    let reach = c.blocks * s_t + s_t - 1;
    let ref_traj = solve(&truth.frames()[0], reach, &oracle)?;
    let targets: Vec<Tensor> = ref_traj.frames()[c.blocks * s_t..].iter().map(field_tensor).collect();
    let guess = ctx.bootstrap(Stream::Control, 1)?;
    let grid = cfg.grid()?;
    let x0 = Tensor::new(
        vec![s_t, grid.height, grid.width],
        guess.frames().iter().flat_map(|f| f.values().iter().copied()).collect(),
    )?;
    let (x, trace) = optimize_input(
        |x| {
            let frames = rollout_var(solver.as_ref(), &layout, x, c.blocks)?;
            let diffs = frames
                .iter()
                .zip(&targets)
                .map(|(f, t)| f.sub(x.tape().constant(t.clone())))
                .collect::<stagger_core::Result<Vec<_>>>()?;
            msr_loss(&diffs)
        },
        &x0,
        c.steps,
        c.lr,
    )?;
    let mut csv = Csv::new(&["step", "objective"]);
    for (n, v) in trace.iter().enumerate() {
        csv.row(&[n.to_string(), num(*v)]);
    }
    out.csv("trace.csv", &csv)?;
    let first = Tensor::new(vec![1, grid.height, grid.width], x.data()[..grid.len()].to_vec())?;
    out.field("recovered.nstg", &tensor_field(&first, grid, 0.0)?)?;
    out.field("initial_guess.nstg", &guess.frames()[0])?;
    out.field("reference_start.nstg", &truth.frames()[0])?;
    let (a, b) = (trace[0], trace[trace.len() - 1]);
    println!("objective {a:.4e} -> {b:.4e} (ratio {:.3e})", b / a);
    ctx.commit(out, "control")
}

pub fn bandwidth(ctx: &Context) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let ResidualOp::Diffusion(d) = cfg.residual_op()? else {
        return Err(CliError::Config("the bandwidth study needs a diffusion problem".into()));
    };
    let t = build_transfer_matrix(&cfg.grid()?, &d, Arrangement::Folded)?;
    let out = Output::begin(ctx.out, "analyze-bandwidth")?;
    let study = transfer_power_bandwidth(&t, cfg.analysis.max_power)?;
    let mut csv = Csv::new(&["k", "bandwidth"]);
    for (k, b) in study.bandwidths.iter().enumerate() {
        csv.row(&[(k + 1).to_string(), b.to_string()]);
    }
    out.csv("bandwidth.csv", &csv)?;
    let pre = study.pre_saturation();
    let mut summary = Csv::new(&["dimension", "pre_saturation", "slope", "intercept", "r2", "k_dense"]);
    let fit = if pre.len() >= 2 {
        let xs: Vec<f64> = (1..=pre.len()).map(|k| k as f64).collect();
        let ys: Vec<f64> = pre.iter().map(|b| *b as f64).collect();
        Some(affine_fit(&xs, &ys)?)
    } else {
        None
    };
    let (slope, intercept, r2) = fit.unwrap_or((f64::NAN, f64::NAN, f64::NAN));
    let k_dense = study.k_dense.map(|k| k.to_string()).unwrap_or_default();
    summary.row(&[study.dimension.to_string(), pre.len().to_string(), num(slope), num(intercept), num(r2), k_dense]);
    out.csv("summary.csv", &summary)?;
    println!("bandwidths {:?}, k_dense {:?}", study.bandwidths, study.k_dense);
    ctx.commit(out, "analyze-bandwidth")
}

pub fn prop1(ctx: &Context) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let grid = cfg.grid()?;
    let f: StaggerFactors = cfg.factors()?;
    let blocks = stagger_blocks(grid.height, grid.width, f.s_h, f.s_w)?;
    let out = Output::begin(ctx.out, "analyze-prop1")?;
    // Consecutive oracle states: rows of X are u_t, rows of Y are u_{t + dt}.
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    'fill: for t in ctx.trajectories()? {
        for pair in t.frames().windows(2) {
            if xs.len() == cfg.analysis.samples {
                break 'fill;
            }
            xs.push(pair[0].values().to_vec());
            ys.push(pair[1].values().to_vec());
        }
    }
    let d = grid.len();
    let x = faer::Mat::from_fn(xs.len(), d, |r, c| xs[r][c]);
    let y = faer::Mat::from_fn(ys.len(), d, |r, c| ys[r][c]);
    let report = prop1_verify(&x, &y, &blocks)?;
    let mut csv = Csv::new(&["i", "j", "block_rank", "full_rank", "gap"]);
    for (n, (rank, gap)) in report.block_ranks.iter().zip(&report.gaps).enumerate() {
        csv.row(&[
            (n / f.s_w).to_string(),
            (n % f.s_w).to_string(),
            rank.to_string(),
            report.full_rank.to_string(),
            num(*gap),
        ]);
    }
    out.csv("prop1.csv", &csv)?;
    println!("samples {}, full rank {}, block ranks {:?}", xs.len(), report.full_rank, report.block_ranks);
    ctx.commit(out, "analyze-prop1")
}

pub fn gmacs(ctx: &Context) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let layout = ctx.layout()?;
    let spec = cfg.model_spec(layout.in_channels())?;
    let r = count_gmacs(&spec, &cfg.grid()?, cfg.factors()?, cfg.evaluate.horizon)?;
    let out = Output::begin(ctx.out, "analyze-gmacs")?;
    let mut layers = Csv::new(&["layer", "macs"]);
    for (n, m) in r.layer_macs.iter().enumerate() {
        layers.row(&[n.to_string(), m.to_string()]);
    }
    out.csv("layers.csv", &layers)?;
    let mut summary = Csv::new(&["quantity", "value"]);
    for (k, v) in [
        ("subtask_macs", r.subtask_macs.to_string()),
        ("subtasks", r.subtasks.to_string()),
        ("step_macs", r.step_macs.to_string()),
        ("workers", r.workers.to_string()),
        ("per_card_step_macs", r.per_card_step_macs.to_string()),
        ("ensemble_steps", r.ensemble_steps.to_string()),
        ("horizon_macs", r.horizon_macs.to_string()),
        ("per_card_horizon_gmacs", num(r.per_card_horizon_gmacs)),
        ("fold_reduction", num(r.fold_reduction)),
    ] {
        summary.row(&[k.to_string(), v]);
    }
    out.csv("gmacs.csv", &summary)?;
    println!("per-card horizon GMACs {:.4e}, {:.1}-fold below the undecomposed model", r.per_card_horizon_gmacs, r.fold_reduction);
    ctx.commit(out, "analyze-gmacs")
}
