//! Gaussian random fields with covariance `amplitude * (-L + shift I)^(-exponent)`
//! on periodic power-of-two grids, where `L` is the 5-point Laplacian.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::fft::{fft2, laplacian_eigenvalue, real_to_complex};
use crate::field::{Boundary, Field, GridSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomFieldSpec {
    pub grid: GridSpec,
    pub amplitude: f64,
    pub shift: f64,
    pub exponent: f64,
    pub seed: u64,
}

impl RandomFieldSpec {
    /// Covariance `8^3 (-L + 64 I)^(-4)`.
    pub fn standard(grid: GridSpec, seed: u64) -> Self {
        Self {
            grid,
            amplitude: 512.0,
            shift: 64.0,
            exponent: 4.0,
            seed,
        }
    }

    /// Variance of the normalized Fourier coefficient of mode `(ky, kx)`.
    pub fn mode_variance(&self, ky: usize, kx: usize) -> f64 {
        let g = &self.grid;
        let lambda = laplacian_eigenvalue(ky, kx, g.height, g.width, g.dx, g.dy);
        self.amplitude * (lambda + self.shift).powf(-self.exponent)
    }
}

/// Draws one sample.
///
/// White noise is filtered by `sqrt(mode_variance)`; the normalized
/// coefficients `FFT(u)_k / (H W)` then have variance `mode_variance(k)`.
/// The constant mode is removed.
pub fn sample_random_field(spec: &RandomFieldSpec) -> Result<Field> {
    let g = spec.grid;
    if g.boundary != Boundary::Periodic || !g.is_power_of_two() {
        return Err(Error::Config(format!(
            "random fields need a periodic power-of-two grid, got {}x{} {:?}",
            g.height, g.width, g.boundary
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let noise: Vec<f64> = (0..g.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut buf = real_to_complex(&noise);
    fft2(&mut buf, g.height, g.width, false)?;
    let norm = (g.len() as f64).sqrt();
    for ky in 0..g.height {
        for kx in 0..g.width {
            let m = if ky == 0 && kx == 0 {
                0.0
            } else {
                spec.mode_variance(ky, kx).sqrt() * norm
            };
            buf[ky * g.width + kx] *= Complex64::new(m, 0.0);
        }
    }
    fft2(&mut buf, g.height, g.width, true)?;
    let mut values: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter_mut().for_each(|v| *v -= mean);
    Field::new(g, values, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_zero_mean() {
        let grid = GridSpec::unit_periodic(16, 16).unwrap();
        let spec = RandomFieldSpec::standard(grid, 42);
        let a = sample_random_field(&spec).unwrap();
        let b = sample_random_field(&spec).unwrap();
        assert_eq!(a, b);
        assert!(a.mean().abs() < 1e-12);
        let c = sample_random_field(&RandomFieldSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_non_periodic() {
        let grid = GridSpec::new(16, 16, 1.0 / 16.0, Boundary::DirichletLid).unwrap();
        assert!(sample_random_field(&RandomFieldSpec::standard(grid, 1)).is_err());
        let grid = GridSpec::unit_periodic(12, 16).unwrap();
        assert!(sample_random_field(&RandomFieldSpec::standard(grid, 1)).is_err());
    }

    #[test]
    fn mode_variance_matches_covariance() {
        let grid = GridSpec::unit_periodic(16, 16).unwrap();
        let base = RandomFieldSpec::standard(grid, 0);
        for (ky, kx) in [(0, 1), (1, 1), (2, 3)] {
            let expected = base.mode_variance(ky, kx);
            let samples = 512;
            let mut acc = 0.0;
            for s in 0..samples {
                let f = sample_random_field(&RandomFieldSpec { seed: 1000 + s, ..base }).unwrap();
                let mut buf = real_to_complex(f.values());
                fft2(&mut buf, 16, 16, false).unwrap();
                acc += (buf[ky * 16 + kx] / 256.0).norm_sqr();
            }
            let est = acc / samples as f64;
            let rel = (est - expected).abs() / expected;
            assert!(rel < 0.2, "mode ({ky},{kx}): {est:e} vs {expected:e}");
        }
    }
}
