//! Finite-difference reference solvers: ground truth, temporal bootstraps and
//! the residual-consistency oracle.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::fft::{fft2, laplacian_eigenvalue, real_to_complex};
use crate::field::{extract_subgrid, Boundary, Field, FieldSequence, GridSpec, StaggerFactors, SubtaskIndex};
use crate::model::CoarseSolver;
use crate::physics::{
    ns_rhs_field, DiffusionBoundary, DiffusionResidualConfig, DiffusionScheme, NsBoundary,
    NsResidualConfig, ResidualOp,
};
use crate::random_field::{sample_random_field, RandomFieldSpec};

/// Burn-in time applied to lid-driven initial states.
pub const LID_BURN_IN: f64 = 1.98;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Equation {
    Diffusion,
    NsPeriodic,
    NsLidDriven,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    /// Discretization shared with the loss.
    pub op: ResidualOp,
    pub picard_tol: f64,
    pub picard_max_iters: usize,
    pub poisson_tol: f64,
    /// Relative tolerance of the implicit diffusion solve.
    pub linear_tol: f64,
    /// Time the initial state is advanced before a bootstrap is recorded.
    pub burn_in: f64,
}

impl OracleConfig {
    pub fn new(op: ResidualOp) -> Result<Self> {
        op.validate()?;
        let burn_in = match &op {
            ResidualOp::Ns(NsResidualConfig {
                boundary: NsBoundary::LidDriven { .. },
                ..
            }) => LID_BURN_IN,
            _ => 0.0,
        };
        Ok(Self {
            op,
            picard_tol: 1e-10,
            picard_max_iters: 50,
            poisson_tol: 1e-10,
            linear_tol: 1e-12,
            burn_in,
        })
    }

    pub fn equation(&self) -> Equation {
        match &self.op {
            ResidualOp::Diffusion(_) => Equation::Diffusion,
            ResidualOp::Ns(c) => match c.boundary {
                NsBoundary::Periodic => Equation::NsPeriodic,
                NsBoundary::LidDriven { .. } => Equation::NsLidDriven,
            },
        }
    }

    pub fn dt(&self) -> f64 {
        self.op.dt()
    }

    fn validate(&self) -> Result<()> {
        self.op.validate()?;
        for (name, v) in [
            ("picard_tol", self.picard_tol),
            ("poisson_tol", self.poisson_tol),
            ("linear_tol", self.linear_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.picard_max_iters == 0 {
            return Err(Error::Config("picard_max_iters must be at least 1".into()));
        }
        if !(self.burn_in >= 0.0 && self.burn_in.is_finite()) {
            return Err(Error::Config(format!("burn-in must be non-negative, got {}", self.burn_in)));
        }
        Ok(())
    }
}

/// `0.1 sin(2 pi (x + y)) + cos(2 pi (x + y))` with `x = c / W`, `y = r / H`.
pub fn periodic_forcing(grid: GridSpec) -> Result<Field> {
    Field::from_fn(grid, 0.0, |r, c| {
        let a = 2.0 * PI * (c as f64 / grid.width as f64 + r as f64 / grid.height as f64);
        0.1 * a.sin() + a.cos()
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Conjugate gradients for a symmetric positive definite `apply`. Stops when
/// `max|b - A x| <= tol * max|b|`; returns the solution and that residual.
pub fn conjugate_gradient(
    apply: impl Fn(&[f64], &mut [f64]),
    b: &[f64],
    x0: Vec<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<(Vec<f64>, f64)> {
    let n = b.len();
    let bnorm = max_abs(b);
    let mut x = x0;
    if bnorm == 0.0 {
        return Ok((vec![0.0; n], 0.0));
    }
    let mut ax = vec![0.0; n];
    apply(&x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut ap = vec![0.0; n];
    for _ in 0..max_iters {
        let res = max_abs(&r);
        if res <= tol * bnorm {
            return Ok((x, res / bnorm));
        }
        apply(&p, &mut ap);
        let alpha = rr / dot(&p, &ap);
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for k in 0..n {
            p[k] = r[k] + beta * p[k];
        }
    }
    // Recompute the true residual before giving up.
    apply(&x, &mut ax);
    let res = b.iter().zip(&ax).map(|(b, a)| (b - a).abs()).fold(0.0, f64::max);
    if res <= tol * bnorm {
        Ok((x, res / bnorm))
    } else {
        Err(Error::Solver {
            step: 0,
            residual: res / bnorm,
            message: format!("conjugate gradients did not reach {tol:e} in {max_iters} iterations"),
        })
    }
}

/// 5-point Laplacian of a row-major `h x w` array; without wrap-around,
/// values beyond the array are zero.
fn laplacian(u: &[f64], h: usize, w: usize, dx: f64, periodic: bool, out: &mut [f64]) {
    let inv = 1.0 / (dx * dx);
    for r in 0..h {
        for c in 0..w {
            let get = |rr: isize, cc: isize| -> f64 {
                if periodic {
                    u[rr.rem_euclid(h as isize) as usize * w + cc.rem_euclid(w as isize) as usize]
                } else if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                    0.0
                } else {
                    u[rr as usize * w + cc as usize]
                }
            };
            let (ri, ci) = (r as isize, c as isize);
            let sum = get(ri + 1, ci) + get(ri - 1, ci) + get(ri, ci + 1) + get(ri, ci - 1);
            out[r * w + c] = (sum - 4.0 * u[r * w + c]) * inv;
        }
    }
}

fn interior(values: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity((h - 2) * (w - 2));
    for r in 1..h - 1 {
        out.extend_from_slice(&values[r * w + 1..r * w + w - 1]);
    }
    out
}

fn embed_interior(inner: &[f64], ring: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = ring.to_vec();
    for r in 1..h - 1 {
        out[r * w + 1..r * w + w - 1].copy_from_slice(&inner[(r - 1) * (w - 2)..r * (w - 2)]);
    }
    out
}

fn ring_only(values: &[f64], h: usize, w: usize) -> Vec<f64> {
    let zeros = vec![0.0; (h - 2) * (w - 2)];
    embed_interior(&zeros, values, h, w)
}

fn cg_iteration_cap(n: usize) -> usize {
    10 * n + 100
}

/// One diffusion step from `u0`.
pub fn diffusion_step(u0: &Field, cfg: &DiffusionResidualConfig, linear_tol: f64, step: usize) -> Result<Field> {
    let (h, w) = (u0.height(), u0.width());
    let (dt, dx) = (cfg.dt, cfg.dx);
    let u = u0.values();
    let mut lap0 = vec![0.0; u.len()];
    let time = u0.time() + dt;
    let wrap_err = |e: Error| match e {
        Error::Solver { residual, message, .. } => Error::Solver { step, residual, message },
        other => other,
    };
    match (&cfg.boundary, cfg.scheme) {
        (DiffusionBoundary::Periodic, DiffusionScheme::Explicit) => {
            check_explicit(dt, dx)?;
            laplacian(u, h, w, dx, true, &mut lap0);
            let next = u.iter().zip(&lap0).map(|(a, l)| a + dt * l).collect();
            Field::new(*u0.grid(), next, time)
        }
        (DiffusionBoundary::Periodic, DiffusionScheme::CrankNicolson) => {
            laplacian(u, h, w, dx, true, &mut lap0);
            let b: Vec<f64> = u.iter().zip(&lap0).map(|(a, l)| a + 0.5 * dt * l).collect();
            let apply = |x: &[f64], out: &mut [f64]| {
                laplacian(x, h, w, dx, true, out);
                for k in 0..x.len() {
                    out[k] = x[k] - 0.5 * dt * out[k];
                }
            };
            let (x, _) = conjugate_gradient(apply, &b, u.to_vec(), linear_tol, cg_iteration_cap(b.len())).map_err(wrap_err)?;
            Field::new(*u0.grid(), x, time)
        }
        (DiffusionBoundary::Dirichlet(g), scheme) => {
            if !g.grid().same_shape(u0.grid()) || h < 3 || w < 3 {
                return Err(Error::Dimension("dirichlet values must match a grid of at least 3x3".into()));
            }
            let ring = ring_only(g.values(), h, w);
            laplacian(u, h, w, dx, false, &mut lap0);
            match scheme {
                DiffusionScheme::Explicit => {
                    check_explicit(dt, dx)?;
                    let full: Vec<f64> = u.iter().zip(&lap0).map(|(a, l)| a + dt * l).collect();
                    Field::new(*u0.grid(), embed_interior(&interior(&full, h, w), &ring, h, w), time)
                }
                DiffusionScheme::CrankNicolson => {
                    let mut ring_lap = vec![0.0; u.len()];
                    laplacian(&ring, h, w, dx, false, &mut ring_lap);
                    let rhs: Vec<f64> = (0..u.len()).map(|k| u[k] + 0.5 * dt * (lap0[k] + ring_lap[k])).collect();
                    let b = interior(&rhs, h, w);
                    let (ih, iw) = (h - 2, w - 2);
                    let apply = |x: &[f64], out: &mut [f64]| {
                        laplacian(x, ih, iw, dx, false, out);
                        for k in 0..x.len() {
                            out[k] = x[k] - 0.5 * dt * out[k];
                        }
                    };
                    let (x, _) = conjugate_gradient(apply, &b, interior(u, h, w), linear_tol, cg_iteration_cap(b.len()))
                        .map_err(wrap_err)?;
                    Field::new(*u0.grid(), embed_interior(&x, &ring, h, w), time)
                }
            }
        }
    }
}

fn check_explicit(dt: f64, dx: f64) -> Result<()> {
    let r = dt / (dx * dx);
    if r > 0.25 {
        Err(Error::Config(format!(
            "explicit diffusion is unstable: dt/dx^2 = {r} exceeds 0.25"
        )))
    } else {
        Ok(())
    }
}

/// Stream function with `-L psi = omega` on a periodic power-of-two grid.
/// The mean of `omega` is discarded and `psi` has zero mean.
pub fn poisson_periodic(omega: &Field, dx: f64) -> Result<Field> {
    let (h, w) = (omega.height(), omega.width());
    let mut buf = real_to_complex(omega.values());
    fft2(&mut buf, h, w, false)?;
    for ky in 0..h {
        for kx in 0..w {
            let idx = ky * w + kx;
            if ky == 0 && kx == 0 {
                buf[idx] = Complex64::new(0.0, 0.0);
            } else {
                buf[idx] /= laplacian_eigenvalue(ky, kx, h, w, dx, dx);
            }
        }
    }
    fft2(&mut buf, h, w, true)?;
    Field::new(*omega.grid(), buf.iter().map(|c| c.re).collect(), omega.time())
}

/// Stream function with `-L psi = omega` on the interior and `psi = 0` on the walls.
pub fn poisson_dirichlet(omega: &Field, dx: f64, tol: f64, guess: Option<&Field>) -> Result<Field> {
    let (h, w) = (omega.height(), omega.width());
    if h < 3 || w < 3 {
        return Err(Error::Dimension(format!("walled grid {h}x{w} has no interior")));
    }
    let (ih, iw) = (h - 2, w - 2);
    let b = interior(omega.values(), h, w);
    let x0 = guess.map(|g| interior(g.values(), h, w)).unwrap_or_else(|| vec![0.0; b.len()]);
    let apply = |x: &[f64], out: &mut [f64]| {
        laplacian(x, ih, iw, dx, false, out);
        out.iter_mut().for_each(|v| *v = -*v);
    };
    let (x, _) = conjugate_gradient(apply, &b, x0, tol, cg_iteration_cap(b.len()))?;
    Field::new(*omega.grid(), embed_interior(&x, &vec![0.0; h * w], h, w), omega.time())
}

fn invert_vorticity(omega: &Field, cfg: &NsResidualConfig, tol: f64, guess: &Field) -> Result<Field> {
    match cfg.boundary {
        NsBoundary::Periodic => poisson_periodic(omega, cfg.dx),
        NsBoundary::LidDriven { .. } => poisson_dirichlet(omega, cfg.dx, tol, Some(guess)),
    }
}

/// One Crank-Nicolson step of the vorticity equation by Picard iteration.
pub fn ns_step(psi0: &Field, cfg: &NsResidualConfig, oracle: &OracleConfig, step: usize) -> Result<Field> {
    let (w0, n0) = ns_rhs_field(psi0, cfg)?;
    let dt = cfg.dt;
    let grid = *psi0.grid();
    let (h, w) = (grid.height, grid.width);
    let lid = matches!(cfg.boundary, NsBoundary::LidDriven { .. });
    let base: Vec<f64> = w0.values().iter().zip(n0.values()).map(|(a, n)| a + 0.5 * dt * n).collect();
    let poisson_tol = oracle.poisson_tol.min(1e-2 * oracle.picard_tol);
    let mut psi = psi0.clone();
    let mut n_cur = n0.clone();
    let mut last = f64::INFINITY;
    for _ in 0..oracle.picard_max_iters {
        let target: Vec<f64> = base.iter().zip(n_cur.values()).map(|(b, n)| b + 0.5 * dt * n).collect();
        let target = Field::new(grid, target, psi0.time() + dt)?;
        let next = invert_vorticity(&target, cfg, poisson_tol, &psi).map_err(|e| match e {
            Error::Solver { residual, message, .. } => Error::Solver { step, residual, message },
            other => other,
        })?;
        let (w1, n1) = ns_rhs_field(&next, cfg)?;
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 1.0;
        for r in 0..h {
            for c in 0..w {
                if lid && (r == 0 || c == 0 || r + 1 == h || c + 1 == w) {
                    continue;
                }
                let k = r * w + c;
                let res = (w1.values()[k] - w0.values()[k]) / dt - 0.5 * (n0.values()[k] + n1.values()[k]);
                worst = worst.max(res.abs());
                scale = scale.max(w1.values()[k].abs());
            }
        }
        last = worst;
        psi = next;
        n_cur = n1;
        if worst * dt <= oracle.picard_tol * scale {
            return Ok(psi);
        }
    }
    Err(Error::Solver {
        step,
        residual: last,
        message: format!("Picard iteration did not converge in {} iterations", oracle.picard_max_iters),
    })
}

/// One oracle step of whichever equation `cfg` describes.
pub fn oracle_step(state: &Field, cfg: &OracleConfig, step: usize) -> Result<Field> {
    match &cfg.op {
        ResidualOp::Diffusion(d) => diffusion_step(state, d, cfg.linear_tol, step),
        ResidualOp::Ns(n) => ns_step(state, n, cfg, step),
    }
}

/// Trajectory of `steps + 1` frames starting at `state0`.
pub fn solve(state0: &Field, steps: usize, cfg: &OracleConfig) -> Result<FieldSequence> {
    cfg.validate()?;
    let mut frames = Vec::with_capacity(steps + 1);
    frames.push(state0.clone());
    for n in 0..steps {
        let next = oracle_step(&frames[n], cfg, n)?;
        frames.push(next);
    }
    FieldSequence::new(frames, cfg.dt())
}

pub fn solve_diffusion(u0: &Field, steps: usize, cfg: &OracleConfig) -> Result<FieldSequence> {
    if cfg.equation() != Equation::Diffusion {
        return Err(Error::Config("solve_diffusion needs a diffusion configuration".into()));
    }
    solve(u0, steps, cfg)
}

/// Stream-function trajectory of the vorticity equation.
pub fn solve_ns(psi0: &Field, steps: usize, cfg: &OracleConfig) -> Result<FieldSequence> {
    if cfg.equation() == Equation::Diffusion {
        return Err(Error::Config("solve_ns needs a Navier-Stokes configuration".into()));
    }
    solve(psi0, steps, cfg)
}

/// The first `s_t` frames, after advancing `state0` by the configured burn-in.
pub fn prepare_bootstrap(state0: &Field, s_t: usize, cfg: &OracleConfig) -> Result<FieldSequence> {
    if s_t == 0 {
        return Err(Error::Config("s_T must be at least 1".into()));
    }
    let burn_steps = (cfg.burn_in / cfg.dt()).round() as usize;
    let mut start = state0.clone();
    for n in 0..burn_steps {
        start = oracle_step(&start, cfg, n)?;
    }
    let start = start.with_time(state0.time() + burn_steps as f64 * cfg.dt());
    let seq = solve(&start, s_t - 1, cfg)?;
    Ok(seq)
}

/// Random initial state: the sample itself for diffusion, the stream function
/// of a random vorticity for Navier-Stokes. Samples are multiplied by `scale`.
pub fn initial_state(grid: GridSpec, cfg: &OracleConfig, seed: u64, scale: f64) -> Result<Field> {
    let sample_grid = GridSpec::unit_periodic(grid.height, grid.width)?;
    let sample = sample_random_field(&RandomFieldSpec::standard(sample_grid, seed))?;
    let values: Vec<f64> = sample.values().iter().map(|v| v * scale).collect();
    match &cfg.op {
        ResidualOp::Diffusion(d) => {
            let values = match &d.boundary {
                DiffusionBoundary::Periodic => values,
                DiffusionBoundary::Dirichlet(g) => {
                    let ring = ring_only(g.values(), grid.height, grid.width);
                    embed_interior(&interior(&values, grid.height, grid.width), &ring, grid.height, grid.width)
                }
            };
            Field::new(grid, values, 0.0)
        }
        ResidualOp::Ns(n) => {
            let omega = Field::new(grid, values, 0.0)?;
            let zero = Field::zeros(grid, 0.0);
            invert_vorticity(&omega, n, cfg.poisson_tol.min(1e-2 * cfg.picard_tol), &zero)
        }
    }
}

/// Grid matching an equation: unit periodic, or `[0, 1]^2` with walls on the outer points.
pub fn equation_grid(equation: Equation, height: usize, width: usize) -> Result<GridSpec> {
    match equation {
        Equation::Diffusion | Equation::NsPeriodic => GridSpec::unit_periodic(height, width),
        Equation::NsLidDriven => GridSpec::new(height, width, 1.0 / (width - 1).max(1) as f64, Boundary::DirichletLid),
    }
}

/// Coarse solver that steps the reference solver `s_T` times on the whole
/// fine frame and returns the requested subgrid. Used to validate the
/// staggered loss and evaluation plumbing.
#[derive(Debug, Clone)]
pub struct OracleMock {
    cfg: OracleConfig,
    grid: GridSpec,
    factors: StaggerFactors,
}

impl OracleMock {
    pub fn new(cfg: OracleConfig, grid: GridSpec, factors: StaggerFactors) -> Result<Self> {
        factors.check_grid(&grid)?;
        Ok(Self { cfg, grid, factors })
    }
}

impl<'t> CoarseSolver<'t> for OracleMock {
    fn predict(&self, index: SubtaskIndex, input: Var<'t>, source: Var<'t>) -> Result<Var<'t>> {
        let shape = source.shape();
        if shape != [1, self.grid.height, self.grid.width] {
            return Err(Error::Shape {
                left: shape,
                right: vec![1, self.grid.height, self.grid.width],
                context: "oracle mock needs the fine source frame",
            });
        }
        let mut state = Field::new(self.grid, source.value().into_data(), 0.0)?;
        for n in 0..self.factors.s_t {
            state = oracle_step(&state, &self.cfg, n)?;
        }
        let f = self.factors;
        let sub = extract_subgrid(state.values(), self.grid.height, self.grid.width, f.s_h, f.s_w, index.i, index.j);
        let t = crate::autodiff::Tensor::new(vec![1, self.grid.height / f.s_h, self.grid.width / f.s_w], sub)?;
        Ok(input.tape().constant(t))
    }
}
