//! Complex FFTs on periodic grids, backed by `rustfft`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::error::{Error, Result};

fn apply(plan: &dyn Fft<f64>, data: &mut [Complex64], inverse: bool) {
    plan.process(data);
    if inverse {
        let scale = 1.0 / data.len() as f64;
        data.iter_mut().for_each(|v| *v *= scale);
    }
}

fn direction(inverse: bool) -> FftDirection {
    if inverse {
        FftDirection::Inverse
    } else {
        FftDirection::Forward
    }
}

/// Unnormalized forward transform (`inverse = false`) or inverse transform
/// scaled by `1/n` (`inverse = true`).
pub fn fft(data: &mut [Complex64], inverse: bool) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config("FFT of an empty buffer".into()));
    }
    let plan = FftPlanner::new().plan_fft(data.len(), direction(inverse));
    apply(plan.as_ref(), data, inverse);
    Ok(())
}

/// 2-d transform of a row-major `height x width` array.
pub fn fft2(data: &mut [Complex64], height: usize, width: usize, inverse: bool) -> Result<()> {
    if data.len() != height * width || data.is_empty() {
        return Err(Error::Dimension(format!(
            "fft2 buffer has {} entries, expected {height}x{width}",
            data.len()
        )));
    }
    let mut planner = FftPlanner::new();
    let rows = planner.plan_fft(width, direction(inverse));
    for row in data.chunks_exact_mut(width) {
        apply(rows.as_ref(), row, inverse);
    }
    let cols = planner.plan_fft(height, direction(inverse));
    let mut col = vec![Complex64::new(0.0, 0.0); height];
    for c in 0..width {
        for r in 0..height {
            col[r] = data[r * width + c];
        }
        apply(cols.as_ref(), &mut col, inverse);
        for r in 0..height {
            data[r * width + c] = col[r];
        }
    }
    Ok(())
}

pub fn real_to_complex(values: &[f64]) -> Vec<Complex64> {
    values.iter().map(|v| Complex64::new(*v, 0.0)).collect()
}

/// Eigenvalue of the negative 5-point Laplacian `-L` for periodic mode `(ky, kx)`.
pub fn laplacian_eigenvalue(ky: usize, kx: usize, height: usize, width: usize, dx: f64, dy: f64) -> f64 {
    let ay = 2.0 * PI * ky as f64 / height as f64;
    let ax = 2.0 * PI * kx as f64 / width as f64;
    (2.0 - 2.0 * ay.cos()) / (dy * dy) + (2.0 - 2.0 * ax.cos()) / (dx * dx)
}
