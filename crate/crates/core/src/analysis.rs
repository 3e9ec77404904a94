//! Transfer-matrix bandwidth study, block least-squares equivalence check,
//! multiply-accumulate accounting and rollout error metrics.

use faer::linalg::solvers::Solve;
use faer::{Mat, Scale};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Field, FieldSequence, GridSpec, StaggerFactors};
use crate::model::ModelSpec;
use crate::physics::{vorticity_from_stream, DiffusionBoundary, DiffusionResidualConfig, DiffusionScheme, ResidualOp};

/// Entries with magnitude at or below this are structural zeros.
pub const STRUCTURAL_ZERO: f64 = 1e-14;
/// Largest dimension for which dense powers are formed.
pub const DENSE_CAP: usize = 4096;

/// Order in which grid points become matrix rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrangement {
    /// Row-major: point `(r, c)` is row `r W + c`.
    Lexicographic,
    /// Row-major over folded axes `0, n-1, 1, n-2, ...`, which turns periodic
    /// neighbours into near neighbours.
    Folded,
}

fn fold(x: usize, n: usize) -> usize {
    if 2 * x < n {
        2 * x
    } else {
        2 * (n - x) - 1
    }
}

fn position(x: usize, n: usize, arrangement: Arrangement) -> usize {
    match arrangement {
        Arrangement::Lexicographic => x,
        Arrangement::Folded => fold(x, n),
    }
}

/// Dense `d x d` matrix acting on the unknowns of an `rows x cols` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BandMatrix {
    matrix: Mat<f64>,
    rows: usize,
    cols: usize,
    arrangement: Arrangement,
    /// Unknowns exclude a fixed boundary ring of this many points.
    ring: usize,
}

impl BandMatrix {
    pub fn dimension(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &Mat<f64> {
        &self.matrix
    }

    pub fn arrangement(&self) -> Arrangement {
        self.arrangement
    }

    /// Max `|i - j|` over entries above [`STRUCTURAL_ZERO`].
    pub fn bandwidth(&self) -> usize {
        let m = &self.matrix;
        let mut b = 0;
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if m[(i, j)].abs() > STRUCTURAL_ZERO {
                    b = b.max(i.abs_diff(j));
                }
            }
        }
        b
    }

    /// True when no entry is a structural zero.
    pub fn is_dense(&self) -> bool {
        let m = &self.matrix;
        (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| m[(i, j)].abs() > STRUCTURAL_ZERO))
    }

    fn index(&self, r: usize, c: usize) -> usize {
        position(r, self.rows, self.arrangement) * self.cols + position(c, self.cols, self.arrangement)
    }

    /// Maps the unknowns of `field` through the matrix; a fixed ring is copied.
    pub fn apply_field(&self, field: &Field) -> Result<Field> {
        let (h, w) = (field.height(), field.width());
        if h != self.rows + 2 * self.ring || w != self.cols + 2 * self.ring {
            return Err(Error::Dimension(format!(
                "matrix acts on {}x{} unknowns, field is {h}x{w}",
                self.rows, self.cols
            )));
        }
        let mut x = Mat::<f64>::zeros(self.dimension(), 1);
        for r in 0..self.rows {
            for c in 0..self.cols {
                x[(self.index(r, c), 0)] = field.at(r + self.ring, c + self.ring);
            }
        }
        let y = &self.matrix * &x;
        let mut values = field.values().to_vec();
        for r in 0..self.rows {
            for c in 0..self.cols {
                values[(r + self.ring) * w + c + self.ring] = y[(self.index(r, c), 0)];
            }
        }
        Field::new(*field.grid(), values, field.time())
    }

    /// `self^k` in the same arrangement.
    pub fn power(&self, k: usize) -> BandMatrix {
        let mut out = Mat::<f64>::identity(self.dimension(), self.dimension());
        for _ in 0..k {
            out = &self.matrix * &out;
        }
        BandMatrix {
            matrix: out,
            ..self.clone()
        }
    }
}

fn assemble(rows: usize, cols: usize, periodic: bool, r: f64, scheme: DiffusionScheme, arrangement: Arrangement, ring: usize) -> Result<BandMatrix> {
    let d = rows * cols;
    if d == 0 {
        return Err(Error::Config("transfer matrix needs at least one unknown".into()));
    }
    if d > DENSE_CAP {
        return Err(Error::Config(format!("dimension {d} exceeds the dense cap {DENSE_CAP}")));
    }
    let shell = BandMatrix {
        matrix: Mat::zeros(d, d),
        rows,
        cols,
        arrangement,
        ring,
    };
    // Unscaled 5-point Laplacian (3-point when one axis has length 1).
    let mut lap = Mat::<f64>::zeros(d, d);
    for row in 0..rows {
        for col in 0..cols {
            let i = shell.index(row, col);
            let mut axis = |len: usize, at: usize, to: &dyn Fn(usize) -> usize| {
                if len == 1 {
                    return;
                }
                lap[(i, i)] -= 2.0;
                for delta in [-1i64, 1] {
                    let n = at as i64 + delta;
                    let n = if periodic { n.rem_euclid(len as i64) } else { n };
                    if (0..len as i64).contains(&n) {
                        lap[(i, to(n as usize))] += 1.0;
                    }
                }
            };
            axis(rows, row, &|n| shell.index(n, col));
            axis(cols, col, &|n| shell.index(row, n));
        }
    }
    let eye = Mat::<f64>::identity(d, d);
    let matrix = match scheme {
        DiffusionScheme::Explicit => &eye + Scale(r) * &lap,
        DiffusionScheme::CrankNicolson => {
            let lhs = &eye - Scale(0.5 * r) * &lap;
            let rhs = &eye + Scale(0.5 * r) * &lap;
            lhs.partial_piv_lu().solve(&rhs)
        }
    };
    Ok(BandMatrix { matrix, ..shell })
}

/// One-step transfer matrix of the diffusion scheme on `grid`. Dirichlet
/// problems act on the interior unknowns with a homogeneous boundary ring.
pub fn build_transfer_matrix(grid: &GridSpec, cfg: &DiffusionResidualConfig, arrangement: Arrangement) -> Result<BandMatrix> {
    let r = cfg.dt / (cfg.dx * cfg.dx);
    match cfg.boundary {
        DiffusionBoundary::Periodic => assemble(grid.height, grid.width, true, r, cfg.scheme, arrangement, 0),
        DiffusionBoundary::Dirichlet(_) => {
            if grid.height < 3 || grid.width < 3 {
                return Err(Error::Config("Dirichlet grid needs an interior".into()));
            }
            assemble(grid.height - 2, grid.width - 2, false, r, cfg.scheme, arrangement, 1)
        }
    }
}

/// Transfer matrix of the 1-D scheme on `n` points with `r = dt / dx^2`.
pub fn build_transfer_matrix_1d(n: usize, r: f64, scheme: DiffusionScheme, periodic: bool, arrangement: Arrangement) -> Result<BandMatrix> {
    assemble(1, n, periodic, r, scheme, arrangement, 0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthStudy {
    /// `bandwidths[k - 1]` belongs to `T^k`.
    pub bandwidths: Vec<usize>,
    /// First `k` at which `T^k` has no structural zeros.
    pub k_dense: Option<usize>,
    pub dimension: usize,
}

impl BandwidthStudy {
    /// Leading run of `k` in the linear regime: stops once an increment falls
    /// below half the bandwidth of `T` or the matrix saturates.
    pub fn pre_saturation(&self) -> &[usize] {
        let b1 = match self.bandwidths.first() {
            Some(&b) => b,
            None => return &[],
        };
        let mut end = 1;
        while end < self.bandwidths.len() {
            let step = self.bandwidths[end] - self.bandwidths[end - 1];
            if 2 * step < b1 || self.bandwidths[end] >= self.dimension - 1 {
                break;
            }
            end += 1;
        }
        &self.bandwidths[..end]
    }
}

/// Bandwidths of `T^k` for `k = 1..=k_max`.
pub fn transfer_power_bandwidth(t: &BandMatrix, k_max: usize) -> Result<BandwidthStudy> {
    let d = t.dimension();
    if d > DENSE_CAP {
        return Err(Error::Config(format!("dimension {d} exceeds the dense cap {DENSE_CAP}")));
    }
    let mut power = t.clone();
    let mut bandwidths = Vec::with_capacity(k_max);
    let mut k_dense = None;
    for k in 1..=k_max {
        if k > 1 {
            power.matrix = &t.matrix * &power.matrix;
        }
        bandwidths.push(power.bandwidth());
        if k_dense.is_none() && power.is_dense() {
            k_dense = Some(k);
        }
    }
    Ok(BandwidthStudy {
        bandwidths,
        k_dense,
        dimension: d,
    })
}

/// Least-squares line through `(x, y)`: `(slope, intercept, r_squared)`.
pub fn affine_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Metric("affine fit needs at least two matching points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Metric("affine fit over a single abscissa".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok((slope, intercept, r2))
}

/// Relative threshold on singular values for numerical rank.
pub const RANK_TOL: f64 = 1e-10;

fn singular_values(m: &Mat<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    m.singular_values().expect("svd converges")
}

/// Singular values above `RANK_TOL * sigma_max`.
pub fn numerical_rank(m: &Mat<f64>) -> usize {
    let s = singular_values(m);
    let max = s.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    s.iter().filter(|v| **v > RANK_TOL * max).count()
}

/// Minimum-norm pseudo-inverse with the relative rank threshold.
pub fn pseudo_inverse(m: &Mat<f64>) -> Mat<f64> {
    let mut out = Mat::zeros(m.ncols(), m.nrows());
    if m.nrows() == 0 || m.ncols() == 0 {
        return out;
    }
    let svd = m.thin_svd().expect("svd converges");
    let s = svd.S().column_vector();
    let max = (0..s.nrows()).map(|n| s[n]).fold(0.0, f64::max);
    for n in 0..s.nrows() {
        if max > 0.0 && s[n] > RANK_TOL * max {
            out += Scale(1.0 / s[n]) * (svd.V().col(n) * svd.U().col(n).transpose());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prop1Report {
    pub full_rank: usize,
    pub block_ranks: Vec<usize>,
    /// Frobenius norm of `(X W*)_k - X_k W_k*` per block.
    pub gaps: Vec<f64>,
    /// Every block has the full rank and every gap is below `1e-8`.
    pub equal: bool,
}

/// Column index sets of the `s_h x s_w` subgrids of a row-major `h x w`
/// grid, in `(i, j)` order.
pub fn stagger_blocks(h: usize, w: usize, s_h: usize, s_w: usize) -> Result<Vec<Vec<usize>>> {
    if s_h == 0 || s_w == 0 || h % s_h != 0 || w % s_w != 0 {
        return Err(Error::Layout(format!("{h}x{w} grid does not split into {s_h}x{s_w} subgrids")));
    }
    let mut blocks = Vec::with_capacity(s_h * s_w);
    for i in 0..s_h {
        for j in 0..s_w {
            let mut b = Vec::with_capacity(h * w / (s_h * s_w));
            for r in (i..h).step_by(s_h) {
                for c in (j..w).step_by(s_w) {
                    b.push(r * w + c);
                }
            }
            blocks.push(b);
        }
    }
    Ok(blocks)
}

fn columns(m: &Mat<f64>, idx: &[usize]) -> Mat<f64> {
    Mat::from_fn(m.nrows(), idx.len(), |r, c| m[(r, idx[c])])
}

/// Compares the joint linear least-squares predictor `X W*` against the
/// per-block predictors `X_k W_k*` on each block's targets.
pub fn prop1_verify(x: &Mat<f64>, y: &Mat<f64>, blocks: &[Vec<usize>]) -> Result<Prop1Report> {
    let d = x.ncols();
    if y.nrows() != x.nrows() || y.ncols() != d {
        return Err(Error::Shape {
            left: vec![x.nrows(), d],
            right: vec![y.nrows(), y.ncols()],
            context: "samples vs targets",
        });
    }
    let mut seen = vec![false; d];
    for b in blocks {
        for &c in b {
            if c >= d || seen[c] {
                return Err(Error::Layout(format!("column {c} is out of range or in two blocks")));
            }
            seen[c] = true;
        }
    }
    if blocks.is_empty() || seen.iter().any(|s| !s) || blocks.iter().any(|b| b.len() != d / blocks.len()) {
        return Err(Error::Layout("blocks must partition the columns into equal parts".into()));
    }
    let full_rank = numerical_rank(x);
    let joint = x * (pseudo_inverse(x) * y);
    let mut block_ranks = Vec::with_capacity(blocks.len());
    let mut gaps = Vec::with_capacity(blocks.len());
    for b in blocks {
        let xk = columns(x, b);
        let yk = columns(y, b);
        block_ranks.push(numerical_rank(&xk));
        let local = &xk * (pseudo_inverse(&xk) * &yk);
        gaps.push((columns(&joint, b) - local).norm_l2());
    }
    let equal = block_ranks.iter().all(|r| *r == full_rank) && gaps.iter().all(|g| *g < 1e-8);
    Ok(Prop1Report {
        full_rank,
        block_ranks,
        gaps,
        equal,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GmacsReport {
    /// MACs of each convolution of one subtask.
    pub layer_macs: Vec<u64>,
    pub subtask_macs: u64,
    pub subtasks: u64,
    /// All subtasks of one ensemble step.
    pub step_macs: u64,
    pub workers: u64,
    pub per_card_step_macs: u64,
    pub ensemble_steps: u64,
    pub horizon_macs: u64,
    pub per_card_horizon_gmacs: f64,
    /// Per-card horizon cost of the undecomposed model divided by this one.
    pub fold_reduction: f64,
}

/// `h w C_in C_out k^2`.
pub fn conv_layer_macs(h: usize, w: usize, c_in: usize, c_out: usize, k: usize) -> u64 {
    (h * w * c_in * c_out * k * k) as u64
}

fn per_card_horizon(spec: &ModelSpec, grid: &GridSpec, factors: StaggerFactors, horizon: usize) -> Result<(Vec<u64>, u64, u64)> {
    factors.check_grid(grid)?;
    let (h, w) = (grid.height / factors.s_h, grid.width / factors.s_w);
    let layers: Vec<u64> = spec
        .conv_channels()
        .iter()
        .map(|(ci, co)| conv_layer_macs(h, w, *ci, *co, spec.kernel_size))
        .collect();
    let steps = horizon.div_ceil(factors.s_t) as u64;
    Ok((layers, steps, factors.subtask_count() as u64))
}

/// Multiply-accumulates of `horizon` fine time steps of inference with one
/// worker per subtask.
pub fn count_gmacs(spec: &ModelSpec, grid: &GridSpec, factors: StaggerFactors, horizon: usize) -> Result<GmacsReport> {
    spec.validate()?;
    let (layer_macs, ensemble_steps, subtasks) = per_card_horizon(spec, grid, factors, horizon)?;
    let subtask_macs: u64 = layer_macs.iter().sum();
    let step_macs = subtask_macs * subtasks;
    let workers = subtasks;
    let per_card_step_macs = step_macs / workers;
    let horizon_macs = step_macs * ensemble_steps;
    let per_card_horizon_gmacs = (per_card_step_macs * ensemble_steps) as f64 / 1e9;
    let (base_layers, base_steps, _) = per_card_horizon(spec, grid, StaggerFactors::identity(), horizon)?;
    let base = (base_layers.iter().sum::<u64>() * base_steps) as f64 / 1e9;
    Ok(GmacsReport {
        layer_macs,
        subtask_macs,
        subtasks,
        step_macs,
        workers,
        per_card_step_macs,
        ensemble_steps,
        horizon_macs,
        per_card_horizon_gmacs,
        fold_reduction: base / per_card_horizon_gmacs,
    })
}

/// `||pred - truth||_2 / ||truth||_2`.
pub fn relative_error(pred: &Field, truth: &Field) -> Result<f64> {
    if !pred.grid().same_shape(truth.grid()) {
        return Err(Error::Dimension(format!(
            "prediction is {}x{}, truth is {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    let denom = truth.l2_norm();
    if denom == 0.0 {
        return Err(Error::Metric("relative error against an all-zero truth".into()));
    }
    let num = pred
        .values()
        .iter()
        .zip(truth.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(num / denom)
}

/// Relative error of frame `k` of `rollout` against frame `k` of `oracle`.
pub fn error_k(rollout: &FieldSequence, oracle: &FieldSequence, k: usize) -> Result<f64> {
    let (Some(p), Some(t)) = (rollout.frames().get(k), oracle.frames().get(k)) else {
        return Err(Error::Length {
            expected: k + 1,
            got: rollout.len().min(oracle.len()),
        });
    };
    relative_error(p, t)
}

/// Quantity compared by the error metrics: the state for diffusion, the
/// vorticity for Navier-Stokes. The residual fixes the stream function only
/// up to an additive constant, so the stream function itself is not compared.
pub fn observable(state: &Field, op: &ResidualOp) -> Result<Field> {
    match op {
        ResidualOp::Diffusion(_) => Ok(state.clone()),
        ResidualOp::Ns(cfg) => vorticity_from_stream(state, cfg.dx, cfg.boundary),
    }
}

/// [`error_k`] on the [`observable`] of both frames.
pub fn observable_error_k(rollout: &FieldSequence, oracle: &FieldSequence, k: usize, op: &ResidualOp) -> Result<f64> {
    let (Some(p), Some(t)) = (rollout.frames().get(k), oracle.frames().get(k)) else {
        return Err(Error::Length {
            expected: k + 1,
            got: rollout.len().min(oracle.len()),
        });
    };
    relative_error(&observable(p, op)?, &observable(t, op)?)
}
