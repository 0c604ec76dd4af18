//! Macroscopic projections: the fluid projection P onto the collision
//! invariants and the diffuse-reflection wall projection P_γ.
//!
//! P resolves a velocity distribution into
//!
//!   Pf = [a + b·v + c·(|v|²−3)/2]·√μ
//!
//! per spatial node, with the coefficients obtained from the lattice Gram
//! system rather than the continuum moments, so Pf + (f − Pf) reproduces f
//! bitwise and P is idempotent to solver rounding on any grid, coarse or
//! fine. P_γ is the rank-one diffuse-reflection operator at a wall: it
//! collects the outgoing mass flux of a boundary trace and re-emits it as a
//! wall Maxwellian, normalized by the lattice half-flux so the equilibrium
//! trace is reproduced exactly.

use serde::{Deserialize, Serialize};

use crate::error::{KineticsError, Result};
use crate::grid::{DistField, VelocityGrid};

/// Macroscopic coefficient profiles along the channel: density `a`,
/// bulk velocity `b1,b2,b3` (radial, azimuthal, axial), temperature `c`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MomentProfile {
    pub a: Vec<f64>,
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
    pub b3: Vec<f64>,
    pub c: Vec<f64>,
}

impl MomentProfile {
    pub fn zeros(n_sp: usize) -> Self {
        MomentProfile {
            a: vec![0.0; n_sp],
            b1: vec![0.0; n_sp],
            b2: vec![0.0; n_sp],
            b3: vec![0.0; n_sp],
            c: vec![0.0; n_sp],
        }
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }
}

/// The five projection basis fields on the lattice, in coefficient order
/// (a, b1, b2, b3, c).
fn moment_basis(grid: &VelocityGrid) -> [Vec<f64>; 5] {
    let n_v = grid.len();
    let mut basis: [Vec<f64>; 5] = Default::default();
    for (c, col) in basis.iter_mut().enumerate() {
        *col = (0..n_v)
            .map(|iv| {
                let v = grid.node(iv);
                let sm = grid.sqrt_mu[iv];
                match c {
                    0 => sm,
                    1 => v[0] * sm,
                    2 => v[1] * sm,
                    3 => v[2] * sm,
                    _ => 0.5 * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] - 3.0) * sm,
                }
            })
            .collect();
    }
    basis
}

/// Moment coefficients of a fluctuation supplied in mass-scale form u = √μ·f:
/// the same least-squares projection as [`project_p`] computes for f, but the
/// inner products ⟨f, φ√μ⟩ = Σ w₃·u·φ never divide by √μ, so tail noise in u
/// is not amplified. Only the coefficient profiles are returned.
pub fn moments_from_mass_scale(grid: &VelocityGrid, u: &DistField) -> Result<MomentProfile> {
    if u.n_v != grid.len() {
        return Err(KineticsError::InvalidConfig(format!(
            "field has {} velocity nodes, grid has {}",
            u.n_v,
            grid.len()
        )));
    }
    let basis = moment_basis(grid);
    let w3 = &grid.w3;
    let mut gram = [0.0f64; 25];
    for r in 0..5 {
        for c in 0..5 {
            gram[r * 5 + c] = basis[r]
                .iter()
                .zip(basis[c].iter())
                .zip(w3)
                .map(|((&x, &y), &w)| w * x * y)
                .sum();
        }
    }
    // φ_c = basis_c/√μ, evaluated directly so u never meets a division.
    let n_v = u.n_v;
    let phi: Vec<[f64; 5]> = (0..n_v)
        .map(|iv| {
            let v = grid.node(iv);
            let sq = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
            [1.0, v[0], v[1], v[2], 0.5 * (sq - 3.0)]
        })
        .collect();
    let mut profile = MomentProfile::zeros(u.n_sp);
    for s in 0..u.n_sp {
        let us = u.slice(s);
        let mut rhs = [0.0f64; 5];
        for iv in 0..n_v {
            let wu = w3[iv] * us[iv];
            for c in 0..5 {
                rhs[c] += wu * phi[iv][c];
            }
        }
        let mut a = gram;
        if !numref::solve_dense(&mut a, &mut rhs, 5) {
            return Err(KineticsError::Numerics(
                "singular moment Gram system".into(),
            ));
        }
        profile.a[s] = rhs[0];
        profile.b1[s] = rhs[1];
        profile.b2[s] = rhs[2];
        profile.b3[s] = rhs[3];
        profile.c[s] = rhs[4];
    }
    Ok(profile)
}

/// Fluid projection of a distribution field. Returns the coefficient
/// profiles, the projected field Pf, and the orthogonal remainder f − Pf
/// (the subtraction is literal, so Pf + orth == f bitwise).
pub fn project_p(grid: &VelocityGrid, f: &DistField) -> Result<(MomentProfile, DistField, DistField)> {
    if f.n_v != grid.len() {
        return Err(KineticsError::InvalidConfig(format!(
            "field has {} velocity nodes, grid has {}",
            f.n_v,
            grid.len()
        )));
    }
    let basis = moment_basis(grid);
    let w3 = &grid.w3;
    // One Gram matrix serves every spatial node.
    let mut gram = [0.0f64; 25];
    for r in 0..5 {
        for c in 0..5 {
            gram[r * 5 + c] = basis[r]
                .iter()
                .zip(basis[c].iter())
                .zip(w3)
                .map(|((&x, &y), &w)| w * x * y)
                .sum();
        }
    }

    let n_sp = f.n_sp;
    let n_v = f.n_v;
    let mut profile = MomentProfile::zeros(n_sp);
    let mut pf = DistField::zeros("pf", n_sp, n_v);
    let mut orth = DistField::zeros("orth", n_sp, n_v);
    for s in 0..n_sp {
        let fs = f.slice(s);
        let mut rhs = [0.0f64; 5];
        for (c, col) in basis.iter().enumerate() {
            rhs[c] = col
                .iter()
                .zip(fs.iter())
                .zip(w3)
                .map(|((&x, &y), &w)| w * x * y)
                .sum();
        }
        let mut a = gram;
        if !numref::solve_dense(&mut a, &mut rhs, 5) {
            return Err(KineticsError::Numerics(
                "singular moment Gram system".into(),
            ));
        }
        profile.a[s] = rhs[0];
        profile.b1[s] = rhs[1];
        profile.b2[s] = rhs[2];
        profile.b3[s] = rhs[3];
        profile.c[s] = rhs[4];
        let ps = pf.slice_mut(s);
        for iv in 0..n_v {
            ps[iv] = rhs[0] * basis[0][iv]
                + rhs[1] * basis[1][iv]
                + rhs[2] * basis[2][iv]
                + rhs[3] * basis[3][iv]
                + rhs[4] * basis[4][iv];
        }
        let os = orth.slice_mut(s);
        for iv in 0..n_v {
            os[iv] = fs[iv] - ps[iv];
        }
    }
    Ok((profile, pf, orth))
}

/// Which wall a boundary trace belongs to. The channel coordinate runs from
/// the outer cylinder (η = 0) to the inner one (η = η₁); at the outer wall
/// incoming particles have v_η > 0, at the inner wall v_η < 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Wall {
    Outer,
    Inner,
}

/// Lattice half-flux Σ_{v_η>0} w₃ v_η μ — the discrete counterpart of
/// ∫_{u·n>0} (u·n) μ du = 1/√(2π). Normalizing P_γ by this value instead of
/// the continuum constant makes the wall Maxwellian an exact fixed point.
pub fn maxwell_half_flux(grid: &VelocityGrid) -> f64 {
    let n_v = grid.len();
    let mut cw = 0.0;
    for iv in 0..n_v {
        let v = grid.node(iv);
        if v[0] > 0.0 {
            cw += grid.w3[iv] * v[0] * grid.mu[iv];
        }
    }
    cw
}

/// Diffuse-reflection projection of a boundary trace: the outgoing mass flux
/// is re-emitted as √μ times the flux ratio. The returned field is the wall
/// Maxwellian state on the whole lattice; callers restrict it to the
/// incoming half when they impose the boundary condition.
pub fn project_pgamma(grid: &VelocityGrid, trace: &[f64], wall: Wall) -> Vec<f64> {
    let n_v = grid.len();
    assert_eq!(trace.len(), n_v, "trace shape mismatch");
    let cw = maxwell_half_flux(grid);
    let mut flux = 0.0;
    for iv in 0..n_v {
        let v = grid.node(iv);
        let outgoing = match wall {
            Wall::Outer => v[0] < 0.0,
            Wall::Inner => v[0] > 0.0,
        };
        if outgoing {
            flux += grid.w3[iv] * v[0].abs() * grid.sqrt_mu[iv] * trace[iv];
        }
    }
    let ratio = flux / cw;
    grid.sqrt_mu.iter().map(|&sm| sm * ratio).collect()
}
