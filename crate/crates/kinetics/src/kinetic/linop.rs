//! Linearized collision operator, its conjugated gain part, and the
//! bilinear remainder form.
//!
//! The discrete linearized operator is *defined* through the symmetric
//! Dirichlet form of [`super::collision`]: L = (I−P) D_{1/(w√μ)} M D_{1/√μ}
//! (I−P), where M is the assembled quadratic-form matrix and P the
//! orthogonal projection onto the discrete collision invariants
//! {√μ, v_η√μ, v_φ√μ, v_z√μ, (|v|²−3)√μ} under the lattice inner product
//! ⟨x,y⟩ = Σ w₃ x y. This gives three structural exactness properties that a
//! literal gain−loss composition only attains to interpolation error:
//! symmetry and positive semidefiniteness are bitwise (outer-product
//! assembly), and the five invariants are annihilated exactly (projection).
//! The certificate machinery never uses this operator — it re-evaluates the
//! literal bilinear integrals — so the symmetrization is audited, not
//! assumed.
//!
//! Two interchangeable backends carry the matrix: a dense double-precision
//! one for small lattices (the eigenvalue/symmetry oracle), and the folded
//! single-precision production one for even lattice edges, which stores one
//! matrix per mirror parity and halves both memory and multiply cost.

use std::sync::{Arc, OnceLock};

use super::collision::{
    assemble_dirichlet_dense, assemble_dirichlet_folded, gain_ratio_bare_at, loss_frequency,
    mirror_z, rep_nodes, AngularTable, FoldedOp, Parity, QuadCuts,
};
use super::KineticContext;
use crate::error::{KineticsError, Result};

/// Cutoff variant of the conjugated gain operator 𝒦f = √μ·(ν−L)(f/√μ):
/// `Full` is 𝒦 itself, `HighTail` multiplies by (1−χ_M), `LowCore` applies
/// χ_M·μ^{−1/2} (fused, so the division never happens where χ_M = 0).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KCutoff {
    Full,
    HighTail,
    LowCore,
}

/// Backend selection for [`LinearCollision`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackendKind {
    /// Dense double-precision matrix; small lattices only.
    Dense,
    /// Mirror-folded single-precision matrices; even lattice edge only.
    Folded,
}

enum Backend {
    Dense { m: Vec<f64> },
    Folded { even: FoldedOp, odd: OnceLock<FoldedOp> },
}

/// The production linearized-collision context: Dirichlet matrix, collision
/// frequency, invariant basis, and the cutoff caches.
pub struct LinearCollision {
    pub ctx: Arc<KineticContext>,
    pub table: AngularTable,
    /// Pair energy cut used for the matrix assembly (∞ = none).
    pub pair_energy_cut: f64,
    backend: Backend,
    /// Orthonormalized collision-invariant basis, 5 × n_v, lattice metric.
    kernel: Vec<Vec<f64>>,
    inv_sqrt_mu: Vec<f64>,
    /// 1/(w₃·√μ) per node.
    inv_w_sqrt_mu: Vec<f64>,
    /// χ_M/√μ, zero where χ_M vanishes.
    chi_over_sqrt_mu: Vec<f64>,
    reps: Vec<u32>,
}

impl LinearCollision {
    /// Automatic backend: folded for even lattice edges, dense otherwise.
    pub fn new(ctx: Arc<KineticContext>, pair_energy_cut: f64) -> Result<Self> {
        let kind = if ctx.grid.n % 2 == 0 {
            BackendKind::Folded
        } else {
            BackendKind::Dense
        };
        Self::with_backend(ctx, pair_energy_cut, kind)
    }

    pub fn with_backend(
        ctx: Arc<KineticContext>,
        pair_energy_cut: f64,
        kind: BackendKind,
    ) -> Result<Self> {
        let grid = &ctx.grid;
        let table = AngularTable::from_rule(&grid.angular);
        let backend = match kind {
            BackendKind::Dense => {
                if grid.n > 14 {
                    return Err(KineticsError::InvalidConfig(format!(
                        "dense collision matrix limited to lattice edge ≤ 14, got {}",
                        grid.n
                    )));
                }
                Backend::Dense {
                    m: assemble_dirichlet_dense(grid, &table, ctx.params.gamma, ctx.params.b0_norm),
                }
            }
            BackendKind::Folded => Backend::Folded {
                even: assemble_dirichlet_folded(
                    grid,
                    &table,
                    ctx.params.gamma,
                    ctx.params.b0_norm,
                    pair_energy_cut,
                    Parity::Even,
                )?,
                odd: OnceLock::new(),
            },
        };

        let n_v = grid.len();
        // Raw invariants, then modified Gram–Schmidt in the lattice metric.
        let mut kernel: Vec<Vec<f64>> = Vec::with_capacity(5);
        for c in 0..5 {
            let col: Vec<f64> = (0..n_v)
                .map(|iv| {
                    let v = grid.node(iv);
                    let sm = grid.sqrt_mu[iv];
                    match c {
                        0 => sm,
                        1 => v[0] * sm,
                        2 => v[1] * sm,
                        3 => v[2] * sm,
                        _ => (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] - 3.0) * sm,
                    }
                })
                .collect();
            kernel.push(col);
        }
        for c in 0..5 {
            for p in 0..c {
                let (qp, qc) = {
                    let (a, b) = kernel.split_at_mut(c);
                    (&a[p], &mut b[0])
                };
                let dot: f64 = qp
                    .iter()
                    .zip(qc.iter())
                    .zip(&grid.w3)
                    .map(|((&x, &y), &w)| w * x * y)
                    .sum();
                for (yc, &xp) in qc.iter_mut().zip(qp) {
                    *yc -= dot * xp;
                }
            }
            let nrm: f64 = kernel[c]
                .iter()
                .zip(&grid.w3)
                .map(|(&x, &w)| w * x * x)
                .sum::<f64>()
                .sqrt();
            for x in kernel[c].iter_mut() {
                *x /= nrm;
            }
        }

        let inv_sqrt_mu: Vec<f64> = grid.sqrt_mu.iter().map(|&s| 1.0 / s).collect();
        let inv_w_sqrt_mu: Vec<f64> = grid
            .w3
            .iter()
            .zip(&grid.sqrt_mu)
            .map(|(&w, &s)| 1.0 / (w * s))
            .collect();
        let chi_over_sqrt_mu: Vec<f64> = ctx
            .chi
            .iter()
            .zip(&grid.sqrt_mu)
            .map(|(&c, &s)| if c == 0.0 { 0.0 } else { c / s })
            .collect();
        let reps = rep_nodes(grid.n);
        Ok(LinearCollision {
            ctx,
            table,
            pair_energy_cut,
            backend,
            kernel,
            inv_sqrt_mu,
            inv_w_sqrt_mu,
            chi_over_sqrt_mu,
            reps,
        })
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.backend, Backend::Dense { .. })
    }

    fn n_v(&self) -> usize {
        self.ctx.grid.len()
    }

    /// Remove the collision-invariant component of each slice in place.
    fn project_out_kernel(&self, block: &mut [f64], slices: usize) {
        let n_v = self.n_v();
        let w3 = &self.ctx.grid.w3;
        for s in 0..slices {
            let f = &mut block[s * n_v..(s + 1) * n_v];
            for q in &self.kernel {
                let dot: f64 = q
                    .iter()
                    .zip(f.iter())
                    .zip(w3)
                    .map(|((&x, &y), &w)| w * x * y)
                    .sum();
                for (fv, &x) in f.iter_mut().zip(q) {
                    *fv -= dot * x;
                }
            }
        }
    }

    fn odd_fold(&self) -> Result<&FoldedOp> {
        match &self.backend {
            Backend::Folded { odd, .. } => {
                if odd.get().is_none() {
                    let built = assemble_dirichlet_folded(
                        &self.ctx.grid,
                        &self.table,
                        self.ctx.params.gamma,
                        self.ctx.params.b0_norm,
                        self.pair_energy_cut,
                        Parity::Odd,
                    )?;
                    let _ = odd.set(built);
                }
                Ok(odd.get().expect("odd fold just initialized"))
            }
            Backend::Dense { .. } => unreachable!("odd fold requested on dense backend"),
        }
    }

    /// Apply the quadratic-form matrix M to a block of full-lattice slices.
    fn apply_dirichlet_matrix(&self, t: &[f64], out: &mut [f64], slices: usize) -> Result<()> {
        let n_v = self.n_v();
        match &self.backend {
            Backend::Dense { m } => {
                for s in 0..slices {
                    let x = &t[s * n_v..(s + 1) * n_v];
                    let y = &mut out[s * n_v..(s + 1) * n_v];
                    for (p, yo) in y.iter_mut().enumerate() {
                        let row = &m[p * n_v..(p + 1) * n_v];
                        *yo = row.iter().zip(x).map(|(&a, &b)| a * b).sum();
                    }
                }
            }
            Backend::Folded { even, .. } => {
                let n = self.ctx.grid.n;
                let n_rep = n_v / 2;
                // Mirror asymmetry is exact-zero for solver fields (they are
                // constructed bitwise even), so detect the odd component by
                // equality and spend nothing on it in production.
                let mut any_odd = false;
                'scan: for s in 0..slices {
                    let x = &t[s * n_v..(s + 1) * n_v];
                    for &rep in &self.reps {
                        let iv = rep as usize;
                        if x[iv] != x[mirror_z(n, iv)] {
                            any_odd = true;
                            break 'scan;
                        }
                    }
                }
                let mut eb = vec![0.0f64; n_rep * slices];
                let mut ob = if any_odd {
                    Some(vec![0.0f64; n_rep * slices])
                } else {
                    None
                };
                for s in 0..slices {
                    let x = &t[s * n_v..(s + 1) * n_v];
                    let dst = &mut eb[s * n_rep..(s + 1) * n_rep];
                    match &mut ob {
                        None => {
                            for (slot, &rep) in self.reps.iter().enumerate() {
                                dst[slot] = x[rep as usize];
                            }
                        }
                        Some(ob) => {
                            let dsto = &mut ob[s * n_rep..(s + 1) * n_rep];
                            for (slot, &rep) in self.reps.iter().enumerate() {
                                let iv = rep as usize;
                                let a = x[iv];
                                let b = x[mirror_z(n, iv)];
                                dst[slot] = 0.5 * (a + b);
                                dsto[slot] = 0.5 * (a - b);
                            }
                        }
                    }
                }
                let mut ye = vec![0.0f64; n_rep * slices];
                even.apply_block(&eb, &mut ye, slices);
                let yo = match &ob {
                    Some(ob) => {
                        let fold = self.odd_fold()?;
                        let mut yo = vec![0.0f64; n_rep * slices];
                        fold.apply_block(ob, &mut yo, slices);
                        Some(yo)
                    }
                    None => None,
                };
                for s in 0..slices {
                    let y = &mut out[s * n_v..(s + 1) * n_v];
                    for (slot, &rep) in self.reps.iter().enumerate() {
                        let iv = rep as usize;
                        let ivm = mirror_z(n, iv);
                        let e = ye[s * n_rep + slot];
                        match &yo {
                            None => {
                                y[iv] = e;
                                y[ivm] = e;
                            }
                            Some(yo) => {
                                let o = yo[s * n_rep + slot];
                                y[iv] = e + o;
                                y[ivm] = e - o;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// L f on a block of full-lattice velocity slices: the positive
    /// semidefinite linearized operator with exact invariant kernel.
    pub fn apply_l(&self, input: &[f64], out: &mut [f64], slices: usize) -> Result<()> {
        let n_v = self.n_v();
        debug_assert_eq!(input.len(), n_v * slices);
        debug_assert_eq!(out.len(), n_v * slices);
        let mut t = input.to_vec();
        self.project_out_kernel(&mut t, slices);
        for s in 0..slices {
            let x = &mut t[s * n_v..(s + 1) * n_v];
            for (xv, &ism) in x.iter_mut().zip(&self.inv_sqrt_mu) {
                *xv *= ism;
            }
        }
        self.apply_dirichlet_matrix(&t, out, slices)?;
        for s in 0..slices {
            let y = &mut out[s * n_v..(s + 1) * n_v];
            for (yv, &iws) in y.iter_mut().zip(&self.inv_w_sqrt_mu) {
                *yv *= iws;
            }
        }
        self.project_out_kernel(out, slices);
        Ok(())
    }

    /// 𝒦f = √μ·(ν − L)(f/√μ) = νf − √μ·L(f/√μ) on a block, with cutoff
    /// variants applied to the output.
    pub fn conjugated_gain_block(
        &self,
        input: &[f64],
        out: &mut [f64],
        slices: usize,
        cut: KCutoff,
    ) -> Result<()> {
        let n_v = self.n_v();
        let grid = &self.ctx.grid;
        let mut g = input.to_vec();
        for s in 0..slices {
            let x = &mut g[s * n_v..(s + 1) * n_v];
            for (xv, &ism) in x.iter_mut().zip(&self.inv_sqrt_mu) {
                *xv *= ism;
            }
        }
        self.apply_l(&g, out, slices)?;
        for s in 0..slices {
            let f = &input[s * n_v..(s + 1) * n_v];
            let y = &mut out[s * n_v..(s + 1) * n_v];
            for iv in 0..n_v {
                let kf = self.ctx.nu[iv] * f[iv] - grid.sqrt_mu[iv] * y[iv];
                y[iv] = match cut {
                    KCutoff::Full => kf,
                    KCutoff::HighTail => (1.0 - self.ctx.chi[iv]) * kf,
                    KCutoff::LowCore => self.chi_over_sqrt_mu[iv] * kf,
                };
            }
        }
        Ok(())
    }

    /// Materialize the operator L as a dense matrix by applying it to the
    /// identity columns (test/oracle sizes only).
    pub fn materialize_l(&self) -> Result<Vec<f64>> {
        let n_v = self.n_v();
        let mut m = vec![0.0; n_v * n_v];
        let block = 64.min(n_v);
        let mut cols = vec![0.0; n_v * block];
        let mut outs = vec![0.0; n_v * block];
        let mut c0 = 0;
        while c0 < n_v {
            let nb = block.min(n_v - c0);
            cols[..n_v * nb].fill(0.0);
            for b in 0..nb {
                cols[b * n_v + c0 + b] = 1.0;
            }
            self.apply_l(&cols[..n_v * nb], &mut outs[..n_v * nb], nb)?;
            for b in 0..nb {
                for p in 0..n_v {
                    m[p * n_v + c0 + b] = outs[b * n_v + p];
                }
            }
            c0 += nb;
        }
        Ok(m)
    }
}

/// The linearized pair (Lf, Kf) with K = ν − L.
pub fn linearized_l(lc: &LinearCollision, f: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n_v = lc.n_v();
    let mut lf = vec![0.0; n_v];
    lc.apply_l(f, &mut lf, 1)?;
    let kf: Vec<f64> = (0..n_v).map(|iv| lc.ctx.nu[iv] * f[iv] - lf[iv]).collect();
    Ok((lf, kf))
}

/// The conjugated gain operator on a single slice.
pub fn conjugated_gain(lc: &LinearCollision, f: &[f64], cut: KCutoff) -> Result<Vec<f64>> {
    let n_v = lc.n_v();
    let mut out = vec![0.0; n_v];
    lc.conjugated_gain_block(f, &mut out, 1, cut)?;
    Ok(out)
}

/// Bilinear remainder form Γ(f,g) = μ^{−1/2} Q(√μ f, √μ g), evaluated with
/// the production ratio-form gain (μ-factors cancel analytically) and the
/// exact loss frequency:
///
///   Γ(f,g) = √μ · bare(f/√μ, g/√μ) − ν_{√μf} · g.
///
/// `table`, `cuts` and `out_nodes` allow budget-restricted evaluation; the
/// full-lattice standard-rule version is [`gamma_bilinear`].
pub fn gamma_bilinear_with(
    lc: &LinearCollision,
    f: &[f64],
    g: &[f64],
    table: &AngularTable,
    cuts: QuadCuts,
    out_nodes: &[u32],
) -> Vec<f64> {
    let grid = &lc.ctx.grid;
    let n_v = grid.len();
    let rf: Vec<f64> = (0..n_v).map(|iv| f[iv] * lc.inv_sqrt_mu[iv]).collect();
    let rg: Vec<f64> = (0..n_v).map(|iv| g[iv] * lc.inv_sqrt_mu[iv]).collect();
    let bare = gain_ratio_bare_at(
        grid,
        table,
        &rf,
        &rg,
        lc.ctx.params.gamma,
        lc.ctx.params.b0_norm,
        cuts,
        out_nodes,
    );
    let sf: Vec<f64> = (0..n_v).map(|iv| grid.sqrt_mu[iv] * f[iv]).collect();
    let nu_sf = loss_frequency(grid, &sf, lc.ctx.params.gamma, lc.ctx.params.b0_norm);
    out_nodes
        .iter()
        .zip(&bare)
        .map(|(&p, &b)| {
            let p = p as usize;
            grid.sqrt_mu[p] * b - nu_sf[p] * g[p]
        })
        .collect()
}

/// Γ(f,g) over the whole lattice with the standard rule and no cuts.
pub fn gamma_bilinear(lc: &LinearCollision, f: &[f64], g: &[f64]) -> Vec<f64> {
    let all: Vec<u32> = (0..lc.ctx.grid.len() as u32).collect();
    gamma_bilinear_with(lc, f, g, &lc.table, QuadCuts::NONE, &all)
}

/// Measured weighted-boundedness constant sup w^ℓ ν^{−1}|𝒦f| / sup w^ℓ|f|.
pub fn weighted_gain_bound(lc: &LinearCollision, f: &[f64]) -> Result<f64> {
    let kf = conjugated_gain(lc, f, KCutoff::Full)?;
    let num = kf
        .iter()
        .enumerate()
        .map(|(iv, &x)| lc.ctx.w_ell[iv] * x.abs() / lc.ctx.nu[iv])
        .fold(0.0f64, f64::max);
    let den = f
        .iter()
        .enumerate()
        .map(|(iv, &x)| lc.ctx.w_ell[iv] * x.abs())
        .fold(0.0f64, f64::max);
    Ok(num / den.max(1e-300))
}
