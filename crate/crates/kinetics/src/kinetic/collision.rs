//! Discrete bilinear collision integrals on the tensor velocity lattice.
//!
//! The collision kernel is the hard cutoff kernel b₀ |v−v*|^γ |cosθ|. The
//! v*-integral uses the lattice quadrature, the sphere integral a small
//! reflection-closed rule, and the post-collision velocities ("feet"), which
//! land off-lattice, are closed by trilinear interpolation. Three evaluation
//! styles coexist, each with a distinct job:
//!
//! * [`q_bilinear`] — the literal gain/loss split with zero extension of the
//!   interpolated slots outside the lattice cube. Exactly bilinear; used for
//!   cross-checks and residual certificates.
//! * [`gain_ratio_bare_at`] — the production gain form. Both slots are
//!   written relative to the global Maxwellian, F = μ·R, and the elastic
//!   energy identity μ(v′)μ(v*′) = μ(v)μ(v*) eliminates every Maxwellian
//!   evaluation at the feet: only the smooth ratios R are interpolated
//!   (clamped, i.e. constant continuation outside the cube). R ≡ 1 therefore
//!   reproduces the collision frequency to rounding — equilibrium is exact
//!   by construction, not by resolution.
//! * quadratic-form (Dirichlet) assemblies of the linearized operator: a
//!   dense double-precision oracle for small lattices, and the folded
//!   single-precision production matrix that halves storage using the
//!   z-mirror symmetry of every field the solvers touch.

use rayon::prelude::*;

use super::rel_speed_pow;
use crate::error::{KineticsError, Result};
use crate::grid::{AngularRule, VelocityGrid};

/// Restrictions for budget-controlled collision sums.
///
/// `pair_energy_cut` drops pairs with |v|² + |v*|² above the cut (the
/// Maxwellian pair weight e^{−(|v|²+|v*|²)/2} makes the dropped contribution
/// exponentially small); `vstar_radius` restricts the v* sum to a ball around
/// the origin, where the μ(v*) factor of the production form lives.
#[derive(Clone, Copy, Debug)]
pub struct QuadCuts {
    pub pair_energy_cut: f64,
    pub vstar_radius: f64,
}

impl QuadCuts {
    pub const NONE: QuadCuts = QuadCuts {
        pair_energy_cut: f64::INFINITY,
        vstar_radius: f64::INFINITY,
    };
}

/// Sphere-rule nodes with canonicalized trigonometry.
///
/// Azimuth cosine/sine tables are post-processed so reflection partners are
/// bitwise exact: a node whose azimuth is φ′+π (or 2π−φ′, or π−φ′) for an
/// earlier node φ′ copies that node's values with the matching sign flips,
/// and values within 1e−14 of zero are snapped to zero. Together with the
/// mirrored cosθ nodes this closes the table under (sinφ ↦ −sinφ) and
/// (cosφ ↦ −cosφ), which is what maps the scattering feet of a z-mirrored
/// velocity pair onto the feet of a partner node exactly.
#[derive(Clone, Debug)]
pub struct AngularTable {
    /// cosθ against the collision axis.
    pub s: Vec<f64>,
    /// sinθ ≥ 0.
    pub r: Vec<f64>,
    pub cphi: Vec<f64>,
    pub sphi: Vec<f64>,
    /// Plain surface weight (sums to 4π over the rule).
    pub w: Vec<f64>,
    /// Surface weight with the kernel's |cosθ| folded in: w·|s|.
    pub w_cos: Vec<f64>,
}

impl AngularTable {
    pub fn from_rule(rule: &AngularRule) -> Self {
        let m = rule.len();
        let snap = |x: f64| if x.abs() < 1e-14 { 0.0 } else { x };
        let mut cphi: Vec<f64> = Vec::with_capacity(m);
        let mut sphi: Vec<f64> = Vec::with_capacity(m);
        for i in 0..m {
            let phi = rule.phi[i];
            let mut cs: Option<(f64, f64)> = None;
            for j in 0..i {
                let pj = rule.phi[j];
                let near = |a: f64, b: f64| (a - b).abs() < 1e-12;
                if near(phi, pj + std::f64::consts::PI) {
                    cs = Some((-cphi[j], -sphi[j]));
                    break;
                }
                if near(phi, std::f64::consts::TAU - pj) {
                    cs = Some((cphi[j], -sphi[j]));
                    break;
                }
                if near(phi, std::f64::consts::PI - pj) {
                    cs = Some((-cphi[j], sphi[j]));
                    break;
                }
            }
            let (c, s) = cs.unwrap_or_else(|| (phi.cos(), phi.sin()));
            // Snapping after the partner copy keeps −0 and +0 identified.
            cphi.push(snap(c) + 0.0);
            sphi.push(snap(s) + 0.0);
        }
        let s = rule.cos_theta.clone();
        // Mirrored cosθ nodes are exact negations, so s² and hence r agree
        // bitwise between hemispheres without further care.
        let r: Vec<f64> = s.iter().map(|&t| (1.0 - t * t).max(0.0).sqrt()).collect();
        let w = rule.weight.clone();
        let w_cos: Vec<f64> = w.iter().zip(&s).map(|(&wi, &si)| wi * si.abs()).collect();
        AngularTable { s, r, cphi, sphi, w, w_cos }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

#[inline]
fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Orthonormal scattering frame of a velocity pair, shared by every angular
/// node of the pair.
///
/// The polar axis is d̂ = (v−v*)/|v−v*|; the transverse axis e₁ is built by
/// orthogonalizing the coordinate axis least aligned with d̂ (first such on
/// ties), and e₂ = d̂ × e₁. This construction is exactly equivariant under
/// the z-mirror and under pair exchange, so the angular node set of a
/// mirrored pair is the bitwise image of the original one.
#[derive(Clone, Copy, Debug)]
pub struct PairFrame {
    pub d_hat: [f64; 3],
    pub e1: [f64; 3],
    pub e2: [f64; 3],
    /// |v − v*|; zero flags a coincident pair (feet collapse onto the pair).
    pub d_norm: f64,
}

impl PairFrame {
    pub fn new(v: &[f64; 3], v_star: &[f64; 3]) -> Self {
        let d = [v[0] - v_star[0], v[1] - v_star[1], v[2] - v_star[2]];
        let dsq = dot3(&d, &d);
        if dsq < 1e-28 {
            return PairFrame {
                d_hat: [0.0, 0.0, 1.0],
                e1: [1.0, 0.0, 0.0],
                e2: [0.0, 1.0, 0.0],
                d_norm: 0.0,
            };
        }
        let d_norm = dsq.sqrt();
        let d_hat = [d[0] / d_norm, d[1] / d_norm, d[2] / d_norm];
        let a = [d_hat[0].abs(), d_hat[1].abs(), d_hat[2].abs()];
        let mut k = 0;
        if a[1] < a[k] {
            k = 1;
        }
        if a[2] < a[k] {
            k = 2;
        }
        let mut e1 = [
            -d_hat[k] * d_hat[0],
            -d_hat[k] * d_hat[1],
            -d_hat[k] * d_hat[2],
        ];
        e1[k] += 1.0;
        // |e₁|² = 1 − d̂ₖ² ≥ 2/3 before normalization: never degenerate.
        let n1 = dot3(&e1, &e1).sqrt();
        e1 = [e1[0] / n1, e1[1] / n1, e1[2] / n1];
        let e2 = [
            d_hat[1] * e1[2] - d_hat[2] * e1[1],
            d_hat[2] * e1[0] - d_hat[0] * e1[2],
            d_hat[0] * e1[1] - d_hat[1] * e1[0],
        ];
        PairFrame { d_hat, e1, e2, d_norm }
    }

    /// Scattering direction for an angular node (s = cosθ, r = sinθ).
    #[inline]
    pub fn omega(&self, s: f64, r: f64, cphi: f64, sphi: f64) -> [f64; 3] {
        [
            s * self.d_hat[0] + r * (cphi * self.e1[0] + sphi * self.e2[0]),
            s * self.d_hat[1] + r * (cphi * self.e1[1] + sphi * self.e2[1]),
            s * self.d_hat[2] + r * (cphi * self.e1[2] + sphi * self.e2[2]),
        ]
    }

    /// Post-collision pair (v′, v*′) for one angular node. Uses
    /// (v−v*)·ω = |Δ|·s, exact for the frame-aligned node, so momentum and
    /// energy are conserved to rounding.
    #[inline]
    pub fn feet(
        &self,
        s: f64,
        r: f64,
        cphi: f64,
        sphi: f64,
        v: &[f64; 3],
        v_star: &[f64; 3],
    ) -> ([f64; 3], [f64; 3]) {
        let om = self.omega(s, r, cphi, sphi);
        let b = self.d_norm * s;
        (
            [v[0] - b * om[0], v[1] - b * om[1], v[2] - b * om[2]],
            [
                v_star[0] + b * om[0],
                v_star[1] + b * om[1],
                v_star[2] + b * om[2],
            ],
        )
    }
}

/// Nodes inside the ball |v| ≤ radius, in lattice order.
pub fn ball_nodes(grid: &VelocityGrid, radius: f64) -> Vec<u32> {
    let rsq = radius * radius;
    (0..grid.len() as u32)
        .filter(|&iv| {
            let v = grid.node(iv as usize);
            dot3(&v, &v) <= rsq
        })
        .collect()
}

///// Collision frequency of an arbitrary field: ν_f(v) = 2π b₀ Σ w₃ |Δ|^γ f(v*).
pub fn loss_frequency(grid: &VelocityGrid, f: &[f64], gamma: f64, b0: f64) -> Vec<f64> {
    let all: Vec<u32> = (0..grid.len() as u32).collect();
    loss_frequency_at(grid, f, gamma, b0, &all)
}

/// [`loss_frequency`] evaluated only at a node subset (the sum over v* is
/// still the full lattice).
pub fn loss_frequency_at(
    grid: &VelocityGrid,
    f: &[f64],
    gamma: f64,
    b0: f64,
    out: &[u32],
) -> Vec<f64> {
    let n_v = grid.len();
    out.par_iter()
        .map(|&p| {
            let vp = grid.node(p as usize);
            let mut acc = 0.0;
            for q in 0..n_v {
                let fq = f[q];
                if fq == 0.0 {
                    continue;
                }
                let vq = grid.node(q);
                let d = [vp[0] - vq[0], vp[1] - vq[1], vp[2] - vq[2]];
                acc += grid.w3[q] * rel_speed_pow(dot3(&d, &d), gamma) * fq;
            }
            std::f64::consts::TAU * b0 * acc
        })
        .collect()
}

/// Literal gain/loss split of the bilinear collision integral at a node
/// subset:
///
///   gain(v) = Σ_{v*} w₃ Σ_ω W b₀|Δ|^γ|cosθ| f(v*′) h(v′)
///   loss(v) = h(v) · 2π b₀ Σ_{v*} w₃ |Δ|^γ f(v*)
///
/// with zero extension of f and h outside the lattice cube. `cuts` restrict
/// the gain sum only; the loss frequency is always the full lattice sum.
pub fn q_bilinear_at(
    grid: &VelocityGrid,
    table: &AngularTable,
    f: &[f64],
    h: &[f64],
    gamma: f64,
    b0: f64,
    cuts: QuadCuts,
    out: &[u32],
) -> (Vec<f64>, Vec<f64>) {
    let gain = q_gain_at(grid, table, f, h, gamma, b0, cuts, out);
    let nu_f = loss_frequency_at(grid, f, gamma, b0, out);
    let loss: Vec<f64> = out
        .iter()
        .zip(&nu_f)
        .map(|(&p, &nu)| nu * h[p as usize])
        .collect();
    (gain, loss)
}

/// Gain half of [`q_bilinear_at`] alone (literal form, zero extension).
pub fn q_gain_at(
    grid: &VelocityGrid,
    table: &AngularTable,
    f: &[f64],
    h: &[f64],
    gamma: f64,
    b0: f64,
    cuts: QuadCuts,
    out: &[u32],
) -> Vec<f64> {
    let star: Vec<u32> = if cuts.vstar_radius.is_finite() {
        ball_nodes(grid, cuts.vstar_radius)
    } else {
        (0..grid.len() as u32).collect()
    };
    let vsq: Vec<f64> = (0..grid.len())
        .map(|iv| {
            let v = grid.node(iv);
            dot3(&v, &v)
        })
        .collect();
    let m = table.len();
    out.par_iter()
        .map(|&p| {
            let p = p as usize;
            let vp = grid.node(p);
            let mut acc = 0.0;
            for &q in &star {
                let q = q as usize;
                if vsq[p] + vsq[q] > cuts.pair_energy_cut {
                    continue;
                }
                let vq = grid.node(q);
                let frame = PairFrame::new(&vp, &vq);
                let kern = grid.w3[q] * rel_speed_pow(frame.d_norm * frame.d_norm, gamma);
                if kern == 0.0 {
                    continue;
                }
                let mut pair = 0.0;
                for i in 0..m {
                    let (fv, fvs) =
                        frame.feet(table.s[i], table.r[i], table.cphi[i], table.sphi[i], &vp, &vq);
                    let fs = grid.eval_zero(f, &fvs);
                    if fs == 0.0 {
                        continue;
                    }
                    let hv = grid.eval_zero(h, &fv);
                    pair += table.w_cos[i] * fs * hv;
                }
                acc += kern * pair;
            }
            b0 * acc
        })
        .collect()
}

/// [`q_bilinear_at`] over the whole lattice with no cuts.
pub fn q_bilinear(
    grid: &VelocityGrid,
    table: &AngularTable,
    f: &[f64],
    h: &[f64],
    gamma: f64,
    b0: f64,
) -> (Vec<f64>, Vec<f64>) {
    let all: Vec<u32> = (0..grid.len() as u32).collect();
    q_bilinear_at(grid, table, f, h, gamma, b0, QuadCuts::NONE, &all)
}

/// Production gain in ratio form, without the leading μ(v) factor:
///
///   bare(v) = Σ_{v*} w₃ μ(v*) Σ_ω W b₀|Δ|^γ|cosθ| R₁(v*′) R₂(v′)
///
/// so that μ(v)·bare is the gain of Q(μR₁, μR₂). Ratios are interpolated
/// with constant (clamped) continuation, hence R₁ = R₂ ≡ 1 gives exactly
/// the collision frequency ν(v) up to the ulp difference between Σ W|cosθ|
/// and 2π. Callers multiply by μ(v), √μ(v), or nothing depending on the
/// variable they work in.
pub fn gain_ratio_bare_at(
    grid: &VelocityGrid,
    table: &AngularTable,
    r1: &[f64],
    r2: &[f64],
    gamma: f64,
    b0: f64,
    cuts: QuadCuts,
    out: &[u32],
) -> Vec<f64> {
    let star: Vec<u32> = if cuts.vstar_radius.is_finite() {
        ball_nodes(grid, cuts.vstar_radius)
    } else {
        (0..grid.len() as u32).collect()
    };
    let vsq: Vec<f64> = (0..grid.len())
        .map(|iv| {
            let v = grid.node(iv);
            dot3(&v, &v)
        })
        .collect();
    let m = table.len();
    out.par_iter()
        .map(|&p| {
            let p = p as usize;
            let vp = grid.node(p);
            let mut acc = 0.0;
            for &q in &star {
                let q = q as usize;
                if vsq[p] + vsq[q] > cuts.pair_energy_cut {
                    continue;
                }
                let vq = grid.node(q);
                let frame = PairFrame::new(&vp, &vq);
                let kern =
                    grid.w3[q] * grid.mu[q] * rel_speed_pow(frame.d_norm * frame.d_norm, gamma);
                let mut pair = 0.0;
                for i in 0..m {
                    let (fv, fvs) =
                        frame.feet(table.s[i], table.r[i], table.cphi[i], table.sphi[i], &vp, &vq);
                    pair += table.w_cos[i] * grid.eval_clamped(r1, &fvs) * grid.eval_clamped(r2, &fv);
                }
                acc += kern * pair;
            }
            b0 * acc
        })
        .collect()
}

/// Lattice moments Σ w₃ f · {1, v_η, v_φ, v_z, |v|²}.
pub fn collision_moments(grid: &VelocityGrid, f: &[f64]) -> [f64; 5] {
    let mut m = [0.0; 5];
    for (iv, (&w, &fv)) in grid.w3.iter().zip(f).enumerate() {
        let wf = w * fv;
        let v = grid.node(iv);
        m[0] += wf;
        m[1] += wf * v[0];
        m[2] += wf * v[1];
        m[3] += wf * v[2];
        m[4] += wf * dot3(&v, &v);
    }
    m
}

/// Dense double-precision assembly of the Dirichlet (quadratic) form of the
/// linearized collision operator — the small-lattice oracle.
///
/// Returns the symmetric N×N matrix M with
///
///   fᵀ M f = ¼ Σ_{v,v*} w₃ w₃* μ μ* Σ_ω W b₀|Δ|^γ|cosθ| (r·f)²,
///   r = δ_v + δ_{v*} − S(v′) − S(v*′),
///
/// where S(·) are clamped trilinear stencil rows. Each stencil sums to one,
/// so M annihilates constants exactly up to rounding; each contribution is a
/// scaled outer product r rᵀ, so M is positive semidefinite and bitwise
/// symmetric by construction.
pub fn assemble_dirichlet_dense(
    grid: &VelocityGrid,
    table: &AngularTable,
    gamma: f64,
    b0: f64,
) -> Vec<f64> {
    let n_v = grid.len();
    let m = table.len();
    let mut buf = vec![0.0f64; n_v * n_v];
    let mut sup_idx = [0usize; 18];
    let mut sup_c = [0.0f64; 18];
    for p in 0..n_v {
        let vp = grid.node(p);
        for q in (p + 1)..n_v {
            let vq = grid.node(q);
            let frame = PairFrame::new(&vp, &vq);
            // Factor 2: ordered pairs counted once as unordered.
            let c_pair = 2.0
                * 0.25
                * grid.w3[p]
                * grid.w3[q]
                * grid.mu[p]
                * grid.mu[q]
                * b0
                * rel_speed_pow(frame.d_norm * frame.d_norm, gamma);
            if c_pair == 0.0 {
                continue;
            }
            for i in 0..m {
                let (fv, fvs) =
                    frame.feet(table.s[i], table.r[i], table.cphi[i], table.sphi[i], &vp, &vq);
                let c = c_pair * table.w_cos[i];
                sup_idx[0] = p;
                sup_c[0] = 1.0;
                sup_idx[1] = q;
                sup_c[1] = 1.0;
                let (ia, wa) = grid.trilinear_clamped(&fv);
                let (ib, wb) = grid.trilinear_clamped(&fvs);
                for t in 0..8 {
                    sup_idx[2 + t] = ia[t] as usize;
                    sup_c[2 + t] = -wa[t];
                    sup_idx[10 + t] = ib[t] as usize;
                    sup_c[10 + t] = -wb[t];
                }
                // Paired writes keep (a,b) and (b,a) on identical increment
                // sequences, so the assembled matrix is symmetric bitwise
                // even when stencil supports overlap.
                for u in 0..18 {
                    let cu = c * sup_c[u];
                    let iu = sup_idx[u];
                    buf[iu * n_v + iu] += cu * sup_c[u];
                    for t in (u + 1)..18 {
                        let x = cu * sup_c[t];
                        let it = sup_idx[t];
                        buf[iu * n_v + it] += x;
                        buf[it * n_v + iu] += x;
                    }
                }
            }
        }
    }
    buf
}

/// z-mirror on flat lattice indices: (i, j, k) ↦ (i, j, n−1−k).
#[inline]
pub fn mirror_z(n: usize, iv: usize) -> usize {
    let k = iv % n;
    iv - k + (n - 1 - k)
}

/// Folded single-precision matrix over representative nodes (upper
/// half-lattice v_z > 0; requires even lattice edge so no node sits on the
/// mirror plane).
///
/// For a matrix M acting on z-even fields, the folded form is
/// F[a][b] = M[a][b] + M[a][σb] over representatives a, b, and M·f on the
/// upper half equals F·(f restricted to representatives).
pub struct FoldedOp {
    /// Lattice edge n.
    pub n: usize,
    /// Representative count n³/2.
    pub n_rep: usize,
    /// Row-major n_rep × n_rep.
    pub data: Vec<f64>,
}

/// Representative slot of a flat index (its own or its mirror's).
#[inline]
pub fn rep_slot(n: usize, iv: usize) -> usize {
    let half = n / 2;
    let k = iv % n;
    let rest = iv / n;
    let kk = if k >= half { k } else { n - 1 - k };
    rest * half + (kk - half)
}

/// Flat indices of the representatives in slot order.
pub fn rep_nodes(n: usize) -> Vec<u32> {
    let half = n / 2;
    let mut reps = Vec::with_capacity(n * n * half);
    for ij in 0..n * n {
        for k in half..n {
            reps.push((ij * n + k) as u32);
        }
    }
    reps
}

/// Restrict a z-even field to representative slots.
pub fn restrict_to_reps(n: usize, full: &[f64], out: &mut [f64]) {
    let half = n / 2;
    debug_assert_eq!(out.len(), full.len() / 2);
    let mut slot = 0;
    for ij in 0..n * n {
        for k in half..n {
            out[slot] = full[ij * n + k];
            slot += 1;
        }
    }
}

/// Extend representative-slot values to the full lattice as a z-even field.
pub fn extend_from_reps(n: usize, rep: &[f64], out: &mut [f64]) {
    let half = n / 2;
    debug_assert_eq!(out.len(), rep.len() * 2);
    let mut slot = 0;
    for ij in 0..n * n {
        for k in half..n {
            let v = rep[slot];
            out[ij * n + k] = v;
            out[ij * n + (n - 1 - k)] = v;
            slot += 1;
        }
    }
}

impl FoldedOp {
    /// y ← A·x for `cols` column vectors stored column-major (n_rep rows).
    pub fn apply_block(&self, x: &[f64], y: &mut [f64], cols: usize) {
        let nr = self.n_rep;
        debug_assert_eq!(x.len(), nr * cols);
        debug_assert_eq!(y.len(), nr * cols);
        unsafe {
            matrixmultiply::dgemm(
                nr,
                nr,
                cols,
                1.0,
                self.data.as_ptr(),
                nr as isize,
                1,
                x.as_ptr(),
                1,
                nr as isize,
                0.0,
                y.as_mut_ptr(),
                1,
                nr as isize,
            );
        }
    }

    /// Bytes held by the matrix.
    pub fn bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f64>()
    }
}

fn require_even_edge(grid: &VelocityGrid) -> Result<()> {
    if grid.n % 2 != 0 {
        return Err(KineticsError::InvalidConfig(format!(
            "folded velocity-space assembly needs an even lattice edge, got {}",
            grid.n
        )));
    }
    Ok(())
}

/// Mirror parity of the fields a folded matrix acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parity {
    Even,
    Odd,
}

/// Folded assembly of the Dirichlet form of [`assemble_dirichlet_dense`]
/// with a pair energy cut.
///
/// Enumerates one representative of each orbit of ordered pairs under the
/// group generated by pair exchange and the simultaneous z-mirror, and
/// scatters every entry of the local quadratic form through the
/// representative map: F[rep(p)][rep(q)] += (±)_p (±)_q S_pq, with signs +1
/// on the upper half-lattice and, for the odd fold, −1 on the lower. That
/// reproduces the sum over the whole orbit exactly, because mirrored
/// contributions are *defined* as the entry permutation σSσ of the computed
/// block — the assembled operator is exactly mirror-symmetric by
/// construction.
pub fn assemble_dirichlet_folded(
    grid: &VelocityGrid,
    table: &AngularTable,
    gamma: f64,
    b0: f64,
    pair_energy_cut: f64,
    parity: Parity,
) -> Result<FoldedOp> {
    require_even_edge(grid)?;
    let n = grid.n;
    let n_v = grid.len();
    let n_rep = n_v / 2;
    let half = n / 2;
    let m = table.len();
    let reps = rep_nodes(n);
    let vsq: Vec<f64> = (0..n_v)
        .map(|iv| {
            let v = grid.node(iv);
            dot3(&v, &v)
        })
        .collect();

    let sgn = |iv: usize| -> f64 {
        if parity == Parity::Even || iv % n >= half {
            1.0
        } else {
            -1.0
        }
    };
    let mut buf = vec![0.0f64; n_rep * n_rep];
    let mut sup = [0usize; 18];
    let mut cof = [0.0f64; 18];
    for (a_slot, &a) in reps.iter().enumerate() {
        let a = a as usize;
        let va = grid.node(a);
        let base_a = grid.w3[a] * grid.mu[a];
        for b in 0..n_v {
            if b == a {
                continue;
            }
            // Orbit-canonical enumeration: either member of the mirrored
            // ordered pair may carry v_z > 0 in the first slot, so pick the
            // lexicographically smaller one and weight the swap orbit by 2.
            let kb = b % n;
            let factor = if kb >= half {
                if a < b {
                    2.0
                } else {
                    continue;
                }
            } else {
                let sb = mirror_z(n, b);
                if a < sb {
                    2.0
                } else if a == sb {
                    1.0
                } else {
                    continue;
                }
            };
            if vsq[a] + vsq[b] > pair_energy_cut {
                continue;
            }
            let vb = grid.node(b);
            let frame = PairFrame::new(&va, &vb);
            let c_pair = factor
                * 0.25
                * base_a
                * grid.w3[b]
                * grid.mu[b]
                * b0
                * rel_speed_pow(frame.d_norm * frame.d_norm, gamma);
            if c_pair == 0.0 {
                continue;
            }
            sup[0] = a_slot;
            sup[1] = rep_slot(n, b);
            let sgn_b = sgn(b);
            for i in 0..m {
                let (fv, fvs) =
                    frame.feet(table.s[i], table.r[i], table.cphi[i], table.sphi[i], &va, &vb);
                let c = c_pair * table.w_cos[i];
                cof[0] = 1.0;
                cof[1] = sgn_b;
                let (ia, wa) = grid.trilinear_clamped(&fv);
                let (ib, wb) = grid.trilinear_clamped(&fvs);
                for t in 0..8 {
                    let pa = ia[t] as usize;
                    let pb = ib[t] as usize;
                    sup[2 + t] = rep_slot(n, pa);
                    cof[2 + t] = -wa[t] * sgn(pa);
                    sup[10 + t] = rep_slot(n, pb);
                    cof[10 + t] = -wb[t] * sgn(pb);
                }
                for u in 0..18 {
                    let cu = c * cof[u];
                    let row = sup[u] * n_rep;
                    for t in 0..18 {
                        buf[row + sup[t]] += cu * cof[t];
                    }
                }
            }
        }
    }
    Ok(FoldedOp { n, n_rep, data: buf })
}

/// Folded linear gain response at equilibrium, in ratio units: for a z-even
/// ratio perturbation δ,
///
///   (Ĝ·δ)(v) = Σ_{v*} w₃ μ(v*) Σ_ω W b₀|Δ|^γ|cosθ| [δ(v′) + δ(v*′)],
///
/// which is the derivative of [`gain_ratio_bare_at`] in both slots at
/// R₁ = R₂ = 1. Row scale is the collision frequency, uniformly O(ν).
pub fn assemble_gain_response_folded(
    grid: &VelocityGrid,
    table: &AngularTable,
    gamma: f64,
    b0: f64,
    pair_energy_cut: f64,
) -> Result<FoldedOp> {
    require_even_edge(grid)?;
    let n = grid.n;
    let n_v = grid.len();
    let n_rep = n_v / 2;
    let m = table.len();
    let reps = rep_nodes(n);
    let vsq: Vec<f64> = (0..n_v)
        .map(|iv| {
            let v = grid.node(iv);
            dot3(&v, &v)
        })
        .collect();

    let mut data = vec![0.0f64; n_rep * n_rep];
    let mut row = vec![0.0f64; n_rep];
    for (a_slot, &a) in reps.iter().enumerate() {
        let a = a as usize;
        let va = grid.node(a);
        row.fill(0.0);
        for b in 0..n_v {
            if vsq[a] + vsq[b] > pair_energy_cut {
                continue;
            }
            let vb = grid.node(b);
            let frame = PairFrame::new(&va, &vb);
            let kern =
                grid.w3[b] * grid.mu[b] * b0 * rel_speed_pow(frame.d_norm * frame.d_norm, gamma);
            if kern == 0.0 {
                continue;
            }
            for i in 0..m {
                let (fv, fvs) =
                    frame.feet(table.s[i], table.r[i], table.cphi[i], table.sphi[i], &va, &vb);
                let c = kern * table.w_cos[i];
                let (ia, wa) = grid.trilinear_clamped(&fv);
                let (ib, wb) = grid.trilinear_clamped(&fvs);
                for t in 0..8 {
                    row[rep_slot(n, ia[t] as usize)] += c * wa[t];
                    row[rep_slot(n, ib[t] as usize)] += c * wb[t];
                }
            }
        }
        data[a_slot * n_rep..(a_slot + 1) * n_rep].copy_from_slice(&row);
    }
    Ok(FoldedOp { n, n_rep, data })
}

/// Folded loss response in ratio units: for a z-even ratio perturbation δ,
///
///   (R̂·δ)(v) = 2π b₀ Σ_{v*} w₃ μ(v*) |Δ|^γ δ(v*),
///
/// the perturbation of the collision frequency of μ(1+δ) about ν.
pub fn assemble_loss_response_folded(
    grid: &VelocityGrid,
    gamma: f64,
    b0: f64,
) -> Result<FoldedOp> {
    require_even_edge(grid)?;
    let n = grid.n;
    let n_rep = grid.len() / 2;
    let reps = rep_nodes(n);
    let mut data = vec![0.0f64; n_rep * n_rep];
    for (a_slot, &a) in reps.iter().enumerate() {
        let va = grid.node(a as usize);
        let out = &mut data[a_slot * n_rep..(a_slot + 1) * n_rep];
        for (b_slot, &b) in reps.iter().enumerate() {
            let b = b as usize;
            let vb = grid.node(b);
            let sb = mirror_z(n, b);
            let vsb = grid.node(sb);
            let d1 = [va[0] - vb[0], va[1] - vb[1], va[2] - vb[2]];
            let d2 = [va[0] - vsb[0], va[1] - vsb[1], va[2] - vsb[2]];
            let k = rel_speed_pow(dot3(&d1, &d1), gamma) + rel_speed_pow(dot3(&d2, &d2), gamma);
            out[b_slot] = std::f64::consts::TAU * b0 * grid.w3[b] * grid.mu[b] * k;
        }
    }
    Ok(FoldedOp { n, n_rep, data })
}
