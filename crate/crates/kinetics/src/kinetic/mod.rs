//! Velocity-space collision machinery: reference weights, the collision
//! frequency ν, the smooth core cutoff χ_M, and submodules for the bilinear
//! collision operator, its linearizations, and macroscopic projections.

pub mod collision;
pub mod linop;
pub mod project;

use crate::error::{KineticsError, Result};
use crate::grid::{maxwellian, poly_weight, VelocityGrid};
use std::sync::Arc;

/// Kernel normalization 1/(2π): makes the angular integral of b0·|cosθ| over
/// the sphere equal 2, so ν(0) = 2√(2/π) for γ = 1 and ν ≡ 2π·b0·1 = 1 per
/// unit mass for γ = 0 when b0 = 1 is chosen instead.
pub const B0_DEFAULT: f64 = 1.0 / std::f64::consts::TAU;

/// Collision-model parameters: kernel B(ω, Δ) = b0_norm·|cosθ|·|Δ|^γ,
/// polynomial weight exponent ℓ, and the core cutoff radius M.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct KineticParams {
    pub gamma: f64,
    pub b0_norm: f64,
    pub ell: f64,
    pub m_cut: f64,
}

impl KineticParams {
    pub fn validate(&self, v_max: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(KineticsError::InvalidConfig(format!(
                "gamma = {} outside [0, 1]",
                self.gamma
            )));
        }
        if self.b0_norm <= 0.0 {
            return Err(KineticsError::InvalidConfig(format!(
                "b0_norm = {} must be positive",
                self.b0_norm
            )));
        }
        if self.ell <= 4.0 {
            return Err(KineticsError::InvalidConfig(format!(
                "ell = {} must exceed 4",
                self.ell
            )));
        }
        if self.m_cut + 1.0 >= v_max {
            return Err(KineticsError::InvalidConfig(format!(
                "m_cut + 1 = {} must stay below v_max = {v_max}",
                self.m_cut + 1.0
            )));
        }
        Ok(())
    }
}

/// Reference Maxwellian and polynomial weight at a velocity.
pub fn reference_functions(v: [f64; 3], ell: f64) -> (f64, f64) {
    let mu = maxwellian(v[0], v[1], v[2]);
    let w = poly_weight(v[0] * v[0] + v[1] * v[1] + v[2] * v[2], ell);
    (mu, w)
}

/// Smooth core cutoff: 1 for |v| ≤ M, 0 for |v| ≥ M+1, cubic smoothstep
/// bridge in between (C¹, monotone).
pub fn chi_cutoff(speed: f64, m_cut: f64) -> f64 {
    if speed <= m_cut {
        1.0
    } else if speed >= m_cut + 1.0 {
        0.0
    } else {
        let s = speed - m_cut;
        1.0 - s * s * (3.0 - 2.0 * s)
    }
}

/// |Δ|^γ for the common exponents without the `powf` cost.
#[inline]
pub(crate) fn rel_speed_pow(dsq: f64, gamma: f64) -> f64 {
    if gamma == 1.0 {
        dsq.sqrt()
    } else if gamma == 0.0 {
        1.0
    } else {
        dsq.powf(0.5 * gamma)
    }
}

/// Collision frequency at one velocity by tensor quadrature over the grid:
/// ν(v) = 2π·b0·Σ w μ(v*) |v−v*|^γ. The angular factor is exact because the
/// surface rule integrates |cosθ| to 2π exactly.
pub fn collision_frequency_node(grid: &VelocityGrid, v: [f64; 3], gamma: f64, b0: f64) -> f64 {
    let n = grid.n;
    let mut sum = 0.0;
    for i in 0..n {
        let dx = v[0] - grid.coords[i];
        let wi = grid.w1[i];
        for j in 0..n {
            let dy = v[1] - grid.coords[j];
            let wij = wi * grid.w1[j];
            let dxy = dx * dx + dy * dy;
            let row = (i * n + j) * n;
            for k in 0..n {
                let dz = v[2] - grid.coords[k];
                sum += wij
                    * grid.w1[k]
                    * grid.mu[row + k]
                    * rel_speed_pow(dxy + dz * dz, gamma);
            }
        }
    }
    std::f64::consts::TAU * b0 * sum
}

/// Grid-wide kinetic context: ν at every node, the polynomial weight w^ℓ,
/// the core cutoff χ_M, and the measured lower bound ν₀.
pub struct KineticContext {
    pub grid: Arc<VelocityGrid>,
    pub params: KineticParams,
    pub nu: Vec<f64>,
    pub nu0: f64,
    pub w_ell: Vec<f64>,
    pub chi: Vec<f64>,
}

impl KineticContext {
    pub fn new(grid: Arc<VelocityGrid>, params: KineticParams) -> Result<Self> {
        params.validate(grid.v_max)?;
        let n = grid.n;
        let n3 = n * n * n;
        // ν is invariant under sign flips of each component (the kernel sees
        // only |v−v*| and the lattice is mirror symmetric), so evaluate one
        // representative per sign class and mirror the value. That keeps the
        // flip symmetry exact bitwise and cuts the build cost ~8×.
        let reps: Vec<usize> = (n / 2..n).collect();
        let mut rep_points = Vec::with_capacity(reps.len().pow(3));
        for &i in &reps {
            for &j in &reps {
                for &k in &reps {
                    rep_points.push((i, j, k));
                }
            }
        }
        use rayon::prelude::*;
        let rep_values: Vec<f64> = rep_points
            .par_iter()
            .map(|&(i, j, k)| {
                collision_frequency_node(
                    &grid,
                    [grid.coords[i], grid.coords[j], grid.coords[k]],
                    params.gamma,
                    params.b0_norm,
                )
            })
            .collect();
        let mut nu = vec![0.0; n3];
        for (&(i, j, k), &value) in rep_points.iter().zip(&rep_values) {
            for ii in [i, n - 1 - i] {
                for jj in [j, n - 1 - j] {
                    for kk in [k, n - 1 - k] {
                        nu[(ii * n + jj) * n + kk] = value;
                    }
                }
            }
        }
        let nu0 = nu.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(nu0 > 0.0) {
            return Err(KineticsError::InvalidConfig(format!(
                "collision frequency lower bound {nu0} is not positive"
            )));
        }
        let mut w_ell = vec![0.0; n3];
        let mut chi = vec![0.0; n3];
        for idx in 0..n3 {
            let (i, j, k) = grid.decompose(idx);
            let v = [grid.coords[i], grid.coords[j], grid.coords[k]];
            let vsq = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
            w_ell[idx] = poly_weight(vsq, params.ell);
            chi[idx] = chi_cutoff(vsq.sqrt(), params.m_cut);
        }
        Ok(KineticContext { grid, params, nu, nu0, w_ell, chi })
    }

    /// Collision frequency at an arbitrary (off-node) velocity.
    pub fn nu_at(&self, v: [f64; 3]) -> f64 {
        collision_frequency_node(&self.grid, v, self.params.gamma, self.params.b0_norm)
    }
}
