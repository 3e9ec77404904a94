//! Discretized PDE operators and the physics-constrained loss.
//!
//! Every operator is built from tape operations on `[1, H, W]` tensors, so the
//! same code evaluates residuals of stored fields and differentiates the loss.
//! Rows are the `y` axis and columns the `x` axis.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::{Field, GridSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionScheme {
    Explicit,
    CrankNicolson,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DiffusionBoundary {
    Periodic,
    /// Fixed values on the outer ring of the grid; interior entries are ignored.
    Dirichlet(Field),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionResidualConfig {
    pub dx: f64,
    pub dt: f64,
    pub scheme: DiffusionScheme,
    pub boundary: DiffusionBoundary,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NsBoundary {
    Periodic,
    /// No-slip walls with the last row moving tangentially at `lid_speed`.
    LidDriven { lid_speed: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NsResidualConfig {
    pub dx: f64,
    pub dt: f64,
    pub reynolds: f64,
    /// Source added to the right-hand side of the vorticity equation.
    pub forcing: Option<Field>,
    pub boundary: NsBoundary,
}

/// Residual operator of one equation, evaluated between consecutive states.
#[derive(Debug, Clone, PartialEq)]
pub enum ResidualOp {
    Diffusion(DiffusionResidualConfig),
    /// Vorticity-stream form; the state is the stream function.
    Ns(NsResidualConfig),
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive and finite, got {v}")))
    }
}

impl ResidualOp {
    pub fn validate(&self) -> Result<()> {
        match self {
            ResidualOp::Diffusion(c) => {
                check_positive("dx", c.dx)?;
                check_positive("dt", c.dt)
            }
            ResidualOp::Ns(c) => {
                check_positive("dx", c.dx)?;
                check_positive("dt", c.dt)?;
                check_positive("reynolds", c.reynolds)?;
                if let NsBoundary::LidDriven { lid_speed } = c.boundary {
                    if !lid_speed.is_finite() {
                        return Err(Error::Config(format!("lid speed must be finite, got {lid_speed}")));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn dt(&self) -> f64 {
        match self {
            ResidualOp::Diffusion(c) => c.dt,
            ResidualOp::Ns(c) => c.dt,
        }
    }

    pub fn dx(&self) -> f64 {
        match self {
            ResidualOp::Diffusion(c) => c.dx,
            ResidualOp::Ns(c) => c.dx,
        }
    }

    fn periodic(&self) -> bool {
        matches!(
            self,
            ResidualOp::Diffusion(DiffusionResidualConfig {
                boundary: DiffusionBoundary::Periodic,
                ..
            }) | ResidualOp::Ns(NsResidualConfig {
                boundary: NsBoundary::Periodic,
                ..
            })
        )
    }

    /// Ones where the state is free, zeros where a wall pins it to zero.
    /// `None` when every point is free.
    pub fn state_mask(&self, height: usize, width: usize) -> Option<Tensor> {
        match self {
            ResidualOp::Ns(NsResidualConfig {
                boundary: NsBoundary::LidDriven { .. },
                ..
            }) => Some(ring_masks(height, width).interior),
            _ => None,
        }
    }

    /// Residual of the step `u0 -> u1`, both `[1, H, W]`. Wall-bounded
    /// vorticity residuals cover the interior only, `[1, H-2, W-2]`.
    pub fn residual<'t>(&self, u0: Var<'t>, u1: Var<'t>) -> Result<Var<'t>> {
        let (s0, s1) = (u0.shape(), u1.shape());
        if s0 != s1 || s0.len() != 3 || s0[0] != 1 {
            return Err(Error::Shape {
                left: s0,
                right: s1,
                context: "residual states must both be [1,H,W]",
            });
        }
        match self {
            ResidualOp::Diffusion(c) => diffusion_residual_var(u0, u1, c),
            ResidualOp::Ns(c) => ns_residual_var(u0, u1, c),
        }
    }

    /// Residual as a field on the state grid; points outside the evaluated region are zero.
    pub fn residual_field(&self, u0: &Field, u1: &Field) -> Result<Field> {
        if !u0.grid().same_shape(u1.grid()) {
            return Err(Error::Shape {
                left: u0.grid().shape().to_vec(),
                right: u1.grid().shape().to_vec(),
                context: "residual fields",
            });
        }
        let tape = Tape::new();
        let a = tape.constant(field_tensor(u0));
        let b = tape.constant(field_tensor(u1));
        let mut r = self.residual(a, b)?;
        if r.shape()[1] != u0.height() {
            r = r.pad([1, 1, 1, 1], crate::autodiff::PadMode::Zero)?;
        }
        Field::new(*u1.grid(), r.value().into_data(), u1.time())
    }

    /// Field of a forcing term, if the equation carries one.
    pub fn forcing(&self) -> Option<&Field> {
        match self {
            ResidualOp::Ns(c) => c.forcing.as_ref(),
            ResidualOp::Diffusion(_) => None,
        }
    }

    pub fn is_periodic(&self) -> bool {
        self.periodic()
    }
}

pub fn field_tensor(f: &Field) -> Tensor {
    Tensor::new(vec![1, f.height(), f.width()], f.values().to_vec()).expect("field shape")
}

pub fn tensor_field(t: &Tensor, grid: GridSpec, time: f64) -> Result<Field> {
    Field::new(grid, t.data().to_vec(), time)
}

struct RingMasks {
    interior: Tensor,
    bottom: Tensor,
    top: Tensor,
    left: Tensor,
    right: Tensor,
}

/// Interior and wall masks; wall masks exclude the corners.
fn ring_masks(h: usize, w: usize) -> RingMasks {
    let make = |pred: &dyn Fn(usize, usize) -> bool| {
        let data = (0..h * w)
            .map(|n| if pred(n / w, n % w) { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(vec![1, h, w], data).expect("mask shape")
    };
    let inner_col = |c: usize| c > 0 && c + 1 < w;
    let inner_row = |r: usize| r > 0 && r + 1 < h;
    RingMasks {
        interior: make(&|r, c| inner_row(r) && inner_col(c)),
        bottom: make(&|r, c| r == 0 && inner_col(c)),
        top: make(&|r, c| r + 1 == h && inner_col(c)),
        left: make(&|r, c| c == 0 && inner_row(r)),
        right: make(&|r, c| c + 1 == w && inner_row(r)),
    }
}

/// Value of the neighbour `d` points further along `axis`.
fn neighbor<'t>(u: Var<'t>, axis: usize, d: isize, periodic: bool) -> Result<Var<'t>> {
    if periodic {
        u.circular_shift(axis, -d)
    } else {
        u.zero_shift(axis, -d)
    }
}

/// 5-point Laplacian. Without wrap-around, values beyond the grid read as zero.
pub fn laplacian_var<'t>(u: Var<'t>, dx: f64, periodic: bool) -> Result<Var<'t>> {
    let sum = neighbor(u, 1, 1, periodic)?
        .add(neighbor(u, 1, -1, periodic)?)?
        .add(neighbor(u, 2, 1, periodic)?)?
        .add(neighbor(u, 2, -1, periodic)?)?;
    Ok(sum.sub(u.scale(4.0))?.scale(1.0 / (dx * dx)))
}

/// Central first derivative along `axis` (1 = rows / y, 2 = columns / x).
fn central_diff<'t>(u: Var<'t>, axis: usize, dx: f64, periodic: bool) -> Result<Var<'t>> {
    Ok(neighbor(u, axis, 1, periodic)?
        .sub(neighbor(u, axis, -1, periodic)?)?
        .scale(0.5 / dx))
}

fn diffusion_residual_var<'t>(u0: Var<'t>, u1: Var<'t>, c: &DiffusionResidualConfig) -> Result<Var<'t>> {
    let tape = u0.tape();
    let periodic = matches!(c.boundary, DiffusionBoundary::Periodic);
    let rate = u1.sub(u0)?.scale(1.0 / c.dt);
    let lap = match c.scheme {
        DiffusionScheme::Explicit => laplacian_var(u0, c.dx, periodic)?,
        DiffusionScheme::CrankNicolson => laplacian_var(u0, c.dx, periodic)?
            .add(laplacian_var(u1, c.dx, periodic)?)?
            .scale(0.5),
    };
    let r = rate.sub(lap)?;
    match &c.boundary {
        DiffusionBoundary::Periodic => Ok(r),
        DiffusionBoundary::Dirichlet(values) => {
            let shape = u0.shape();
            if values.height() != shape[1] || values.width() != shape[2] {
                return Err(Error::Shape {
                    left: shape,
                    right: vec![1, values.height(), values.width()],
                    context: "dirichlet boundary values",
                });
            }
            let interior = ring_masks(shape[1], shape[2]).interior;
            let ring = Tensor::new(
                interior.shape().to_vec(),
                interior.data().iter().map(|m| 1.0 - m).collect(),
            )?;
            let boundary_rows = u1.sub(tape.constant(field_tensor(values)))?;
            r.mul(tape.constant(interior))?
                .add(boundary_rows.mul(tape.constant(ring))?)
        }
    }
}

/// Vorticity `-L psi`. Under lid-driven walls the wall values follow Thom's
/// formula and the corners are zero.
pub fn vorticity_var<'t>(psi: Var<'t>, dx: f64, boundary: NsBoundary) -> Result<Var<'t>> {
    match boundary {
        NsBoundary::Periodic => Ok(laplacian_var(psi, dx, true)?.scale(-1.0)),
        NsBoundary::LidDriven { lid_speed } => {
            let tape = psi.tape();
            let shape = psi.shape();
            let (h, w) = (shape[1], shape[2]);
            let m = ring_masks(h, w);
            let interior = laplacian_var(psi, dx, false)?
                .scale(-1.0)
                .mul(tape.constant(m.interior))?;
            let walls = neighbor(psi, 1, 1, false)?
                .mul(tape.constant(m.bottom.clone()))?
                .add(neighbor(psi, 1, -1, false)?.mul(tape.constant(m.top.clone()))?)?
                .add(neighbor(psi, 2, 1, false)?.mul(tape.constant(m.left.clone()))?)?
                .add(neighbor(psi, 2, -1, false)?.mul(tape.constant(m.right.clone()))?)?;
            let wall_mask: Vec<f64> = (0..h * w)
                .map(|n| m.bottom.data()[n] + m.top.data()[n] + m.left.data()[n] + m.right.data()[n])
                .collect();
            let on_wall = psi.mul(tape.constant(Tensor::new(shape.clone(), wall_mask)?))?;
            let lid: Vec<f64> = m.top.data().iter().map(|t| -2.0 * lid_speed / dx * t).collect();
            let thom = walls
                .sub(on_wall)?
                .scale(-2.0 / (dx * dx))
                .add(tape.constant(Tensor::new(shape, lid)?))?;
            interior.add(thom)
        }
    }
}

/// Right-hand side `-psi_y w_x + psi_x w_y + L(w)/Re + f` of the vorticity equation.
pub fn ns_rhs_var<'t>(psi: Var<'t>, omega: Var<'t>, c: &NsResidualConfig) -> Result<Var<'t>> {
    let periodic = matches!(c.boundary, NsBoundary::Periodic);
    let psi_x = central_diff(psi, 2, c.dx, periodic)?;
    let psi_y = central_diff(psi, 1, c.dx, periodic)?;
    let w_x = central_diff(omega, 2, c.dx, periodic)?;
    let w_y = central_diff(omega, 1, c.dx, periodic)?;
    let advection = psi_x.mul(w_y)?.sub(psi_y.mul(w_x)?)?;
    let rhs = advection.add(laplacian_var(omega, c.dx, periodic)?.scale(1.0 / c.reynolds))?;
    match &c.forcing {
        Some(f) => {
            let shape = psi.shape();
            if f.height() != shape[1] || f.width() != shape[2] {
                return Err(Error::Shape {
                    left: shape,
                    right: vec![1, f.height(), f.width()],
                    context: "forcing field",
                });
            }
            rhs.add(psi.tape().constant(field_tensor(f)))
        }
        None => Ok(rhs),
    }
}

fn interior_slice(v: Var<'_>) -> Result<Var<'_>> {
    let s = v.shape();
    v.slice(1, 1, s[1] - 2)?.slice(2, 1, s[2] - 2)
}

fn ns_residual_var<'t>(psi0: Var<'t>, psi1: Var<'t>, c: &NsResidualConfig) -> Result<Var<'t>> {
    let w0 = vorticity_var(psi0, c.dx, c.boundary)?;
    let w1 = vorticity_var(psi1, c.dx, c.boundary)?;
    let n0 = ns_rhs_var(psi0, w0, c)?;
    let n1 = ns_rhs_var(psi1, w1, c)?;
    let r = w1.sub(w0)?.scale(1.0 / c.dt).sub(n0.add(n1)?.scale(0.5))?;
    match c.boundary {
        NsBoundary::Periodic => Ok(r),
        NsBoundary::LidDriven { .. } => {
            let s = r.shape();
            if s[1] < 3 || s[2] < 3 {
                return Err(Error::Shape {
                    left: s,
                    right: vec![1, 3, 3],
                    context: "lid-driven grid needs an interior",
                });
            }
            interior_slice(r)
        }
    }
}

fn field_op(f: &Field, op: impl for<'t> Fn(Var<'t>) -> Result<Var<'t>>) -> Result<Field> {
    let tape = Tape::new();
    let out = op(tape.constant(field_tensor(f)))?;
    Field::new(*f.grid(), out.value().into_data(), f.time())
}

pub fn diffusion_residual(u_t: &Field, u_next: &Field, cfg: &DiffusionResidualConfig) -> Result<Field> {
    ResidualOp::Diffusion(cfg.clone()).residual_field(u_t, u_next)
}

pub fn ns_vorticity_residual(psi_t: &Field, psi_next: &Field, cfg: &NsResidualConfig) -> Result<Field> {
    ResidualOp::Ns(cfg.clone()).residual_field(psi_t, psi_next)
}

pub fn vorticity_from_stream(psi: &Field, dx: f64, boundary: NsBoundary) -> Result<Field> {
    field_op(psi, |p| vorticity_var(p, dx, boundary))
}

pub fn laplacian_field(u: &Field, dx: f64, periodic: bool) -> Result<Field> {
    field_op(u, |v| laplacian_var(v, dx, periodic))
}

/// Vorticity and right-hand side of the vorticity equation for a stream function.
pub fn ns_rhs_field(psi: &Field, cfg: &NsResidualConfig) -> Result<(Field, Field)> {
    let tape = Tape::new();
    let p = tape.constant(field_tensor(psi));
    let w = vorticity_var(p, cfg.dx, cfg.boundary)?;
    let n = ns_rhs_var(p, w, cfg)?;
    Ok((
        Field::new(*psi.grid(), w.value().into_data(), psi.time())?,
        Field::new(*psi.grid(), n.value().into_data(), psi.time())?,
    ))
}

/// Mean of the squared entries over all residuals.
pub fn msr_loss<'t>(residuals: &[Var<'t>]) -> Result<Var<'t>> {
    let first = residuals
        .first()
        .ok_or_else(|| Error::Contract("msr_loss needs at least one residual".into()))?;
    let mut total = first.square().sum();
    let mut count = first.value().len();
    for r in &residuals[1..] {
        total = total.add(r.square().sum())?;
        count += r.value().len();
    }
    if count == 0 {
        return Err(Error::Contract("msr_loss over zero entries".into()));
    }
    Ok(total.scale(1.0 / count as f64))
}

/// Sum of per-pair MSR losses over the chain `last input -> P_0 -> P_1 -> ...`.
pub fn chain_loss<'t>(last_input: Var<'t>, predictions: &[Var<'t>], op: &ResidualOp) -> Result<Var<'t>> {
    let mut prev = last_input;
    let mut loss: Option<Var<'t>> = None;
    for p in predictions {
        let term = msr_loss(&[op.residual(prev, *p)?])?;
        loss = Some(match loss {
            Some(l) => l.add(term)?,
            None => term,
        });
        prev = *p;
    }
    loss.ok_or_else(|| Error::Contract("chain loss over zero predictions".into()))
}
