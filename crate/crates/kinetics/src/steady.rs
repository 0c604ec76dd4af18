//! Steady-profile construction.
//!
//! The steady state is represented as a reference Maxwellian plus a shear
//! fluctuation split into two coupled channels solved on the phase-space
//! grid:
//!
//! * `f1` — the pointwise-damped channel. It absorbs the shear drive, the
//!   high-speed part of the collision gain, and the quadratic collision
//!   remainder, and it enters the walls with zero incoming data.
//! * `f2` — the diffusely reflected channel. It carries the full linearized
//!   collision operator on the low-speed core and the diffuse wall closure,
//!   including the flux it inherits from `f1` at the walls.
//!
//! The linear pair at fixed parameters is the fixed point of alternating
//! attenuated transport sweeps with the collision terms as sources; the
//! alternation is accelerated with windowed Anderson mixing (the map is
//! affine, so the mixing acts like a restarted Krylov method and removes the
//! slow near-conserved modes that plain source iteration cannot damp when
//! the penalty ε is small). Two continuation parameters connect the trivially
//! solvable regime to the physical one: σ scales the collision gain coupling
//! from 0 to 1, and the penalty ε is driven through a decreasing sequence
//! whose differences are required to contract. The quadratic collision
//! term is handled by an outer fixed-point loop that re-linearizes around
//! the current iterate.
//!
//! Scaling convention: the stored channels absorb the shear amplitude, i.e.
//! the physical state is `G_st = M̃₀·μ + f1 + √μ·f2` with no explicit α in
//! front of the fluctuation. Under this scaling the drive is −(α/η₁)v_η v_φ μ,
//! the quadratic source enters with unit coefficient, α = 0 yields the exact
//! equilibrium fixed point, and the response is O(α) to first order.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use crate::error::{KineticsError, Result};
use crate::geometry::AnnulusGeometry;
use crate::grid::{DistField, SpatialGrid, VelocityGrid};
use crate::kinetic::collision::{
    gain_ratio_bare_at, loss_frequency_at, q_gain_at, AngularTable, QuadCuts,
};
use crate::kinetic::linop::{KCutoff, LinearCollision};
use crate::kinetic::project::{
    maxwell_half_flux, moments_from_mass_scale, MomentProfile, Wall,
};
use crate::transport::{
    outgoing_plain_flux, SourceView, TransportCoeffs, TransportContext, TransportPlan, WallData,
};

/// History window of the Anderson mixing used by the inner stage solves.
const ANDERSON_WINDOW: usize = 5;

/// Grids for the two-parameter continuation together with the iteration
/// tolerances and caps of the inner (stage) and outer (quadratic) loops.
#[derive(Clone, Debug)]
pub struct ContinuationSchedule {
    /// Strictly increasing collision-coupling grid, 0 = σ₀ < … < σ_m = 1.
    pub sigma_steps: Vec<f64>,
    /// Strictly decreasing positive penalty sequence ending at ε_min.
    pub epsilon_seq: Vec<f64>,
    /// Weighted sup-norm residual tolerance of a stage solve.
    pub inner_tol: f64,
    /// Weighted sup-norm tolerance of the outer quadratic loop.
    pub outer_tol: f64,
    /// Iteration cap of one stage solve.
    pub max_inner: usize,
    /// Iteration cap of the outer quadratic loop.
    pub max_outer: usize,
}

impl ContinuationSchedule {
    /// Production defaults: uniform 10-step σ grid, geometric ε ladder down
    /// to 1e−4.
    pub fn standard() -> Self {
        ContinuationSchedule {
            sigma_steps: (0..=10).map(|i| i as f64 / 10.0).collect(),
            epsilon_seq: vec![1e-1, 1e-2, 1e-3, 1e-4],
            inner_tol: 1e-10,
            outer_tol: 1e-8,
            max_inner: 400,
            max_outer: 40,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma_steps.len() < 2
            || self.sigma_steps[0] != 0.0
            || *self.sigma_steps.last().unwrap() != 1.0
        {
            return Err(KineticsError::InvalidConfig(format!(
                "coupling grid must run from exactly 0 to exactly 1, got {:?}",
                self.sigma_steps
            )));
        }
        if self.sigma_steps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(KineticsError::InvalidConfig(
                "coupling grid must be strictly increasing".into(),
            ));
        }
        if self.epsilon_seq.is_empty() || self.epsilon_seq.iter().any(|&e| !(e > 0.0)) {
            return Err(KineticsError::InvalidConfig(
                "penalty sequence must be nonempty and positive".into(),
            ));
        }
        if self.epsilon_seq.windows(2).any(|w| w[1] >= w[0]) {
            return Err(KineticsError::InvalidConfig(
                "penalty sequence must be strictly decreasing".into(),
            ));
        }
        if !(self.inner_tol > 0.0) || !(self.outer_tol > 0.0) {
            return Err(KineticsError::InvalidConfig(
                "tolerances must be positive".into(),
            ));
        }
        if self.max_inner == 0 || self.max_outer == 0 {
            return Err(KineticsError::InvalidConfig(
                "iteration caps must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

impl Default for ContinuationSchedule {
    fn default() -> Self {
        Self::standard()
    }
}

/// Solver configuration around the schedule: shear cap, mass handling, and
/// the sampling of the quadratic collision term.
#[derive(Clone, Debug)]
pub struct SteadyConfig {
    pub schedule: ContinuationSchedule,
    /// Largest admissible |α|.
    pub alpha_cap: f64,
    /// Tolerance of the zero-mass condition and the source compatibility.
    pub mass_tol: f64,
    /// Total mass of the assembled state; `None` uses the discrete
    /// equilibrium mass, which makes M̃₀ exactly 1.
    pub m0: Option<f64>,
    /// Axis stride of the velocity sublattice on which the quadratic term is
    /// evaluated before trilinear prolongation (1 = every node).
    pub quad_stride: usize,
    /// Ball radius of the partner-velocity sum in the quadratic gain;
    /// `None` uses the full inscribed ball |v| ≤ v_max.
    pub quad_vstar_radius: Option<f64>,
    /// Use the 4-node angular rule for the quadratic term (the linearized
    /// operator always uses the production rule).
    pub quad_coarse_angular: bool,
    /// Re-run the full σ bootstrap at every ε stage and every outer step
    /// instead of warm-starting directly at the physical coupling.
    pub full_schedule_every_step: bool,
    /// Accelerate the outer loop with one-mode geometric extrapolation when
    /// the contraction ratio has stabilized.
    pub extrapolate_outer: bool,
}

impl Default for SteadyConfig {
    fn default() -> Self {
        SteadyConfig {
            schedule: ContinuationSchedule::standard(),
            alpha_cap: 0.05,
            mass_tol: 1e-8,
            m0: None,
            quad_stride: 2,
            quad_vstar_radius: None,
            quad_coarse_angular: true,
            full_schedule_every_step: false,
            extrapolate_outer: true,
        }
    }
}

/// The two coupled solution channels.
#[derive(Clone)]
pub struct ChannelPair {
    pub f1: DistField,
    pub f2: DistField,
}

impl ChannelPair {
    pub fn zeros(n_sp: usize, n_v: usize) -> Self {
        ChannelPair {
            f1: DistField::zeros("g1", n_sp, n_v),
            f2: DistField::zeros("g2", n_sp, n_v),
        }
    }
}

/// Volume and wall sources of a linear pair solve: `s1` feeds the damped
/// channel, `s2` the diffuse channel, and `s2b` supplies additive non-diffuse
/// incoming wall data for the diffuse channel (its diffuse coefficients are
/// ignored — the diffuse part is always solved, never prescribed).
#[derive(Clone)]
pub struct PairSources {
    pub s1: DistField,
    pub s2: DistField,
    pub s2b: WallData,
}

impl PairSources {
    pub fn zero(n_sp: usize, n_v: usize) -> Self {
        PairSources {
            s1: DistField::zeros("s1", n_sp, n_v),
            s2: DistField::zeros("s2", n_sp, n_v),
            s2b: WallData::zero(),
        }
    }
}

/// Convergence record of one (σ, ε) stage.
#[derive(Clone, Debug)]
pub struct StageLog {
    pub sigma: f64,
    pub epsilon: f64,
    /// Alternating-sweep rounds spent (map evaluations).
    pub iterations: usize,
    /// Final weighted sup-norm residual.
    pub residual: f64,
}

/// Record of one pass through the penalty ladder.
#[derive(Clone, Debug, Default)]
pub struct EpsilonLog {
    pub stages: Vec<StageLog>,
    /// Weighted sup-norm differences between consecutive ε solutions.
    pub cauchy: Vec<f64>,
    /// Mass-functional magnitude removed by the projection after each stage.
    pub mass_removed: Vec<f64>,
}

/// Convergence record of the outer quadratic loop.
#[derive(Clone, Debug, Default)]
pub struct SteadyReport {
    /// Weighted sup-norm outer differences, one per outer step.
    pub outer_diffs: Vec<f64>,
    /// Ratios of consecutive plain (non-extrapolated) outer differences.
    pub contraction_ratios: Vec<f64>,
    pub epsilon_logs: Vec<EpsilonLog>,
    /// Net mass removed from the quadratic source at each outer step
    /// (quadrature defect of the gain rule).
    pub source_mass_corrections: Vec<f64>,
    /// Zero-mass functional of the converged fluctuation.
    pub zero_mass: f64,
    pub outer_iterations: usize,
    pub extrapolations: usize,
}

/// Converged steady profile.
///
/// `g_st` is the steady state in the co-rotating description the solver works
/// in (the frame in which the equation carries the explicit shear term);
/// `f_lab` is the same state expressed for a resting observer, obtained by
/// shifting the azimuthal velocity argument by the local wall-driven speed
/// 𝔲_φ(η) = α(η₁−η)/η₁.
#[derive(Clone)]
pub struct SteadyProfile {
    pub alpha: f64,
    /// Normalization of the reference Maxwellian fixed by the total mass.
    pub m_tilde: f64,
    pub g1: DistField,
    pub g2: DistField,
    /// Reassembled fluctuation g = μ^{−1/2}·g1 + g2.
    pub g: DistField,
    /// Steady state M̃₀·μ + g1 + √μ·g2 on the grid.
    pub g_st: DistField,
    /// Observer-frame state: `g_st` with v_φ shifted by 𝔲_φ(η).
    pub f_lab: DistField,
}

/// Shared state of the steady solver: transport context, linearized
/// collision operator, cached per-ε sweep plans, and a few lattice profiles
/// the stage rounds need pointwise.
pub struct SteadyContext {
    tctx: Arc<TransportContext>,
    lc: Arc<LinearCollision>,
    plans: Mutex<VecDeque<(u64, Arc<TransportPlan>)>>,
    plan_cap: usize,
    /// v_η·v_φ·√μ per node (channel coupling profile).
    vv_sqrt_mu: Vec<f64>,
    /// v_η·v_φ·μ per node (drive profile).
    vv_mu: Vec<f64>,
    /// χ_M/√μ per node, zero where χ_M vanishes.
    chi_over_sqrt_mu: Vec<f64>,
}

impl SteadyContext {
    /// `plan_cap` bounds the number of per-ε sweep plans kept alive (the
    /// plans dominate the solver's memory on large grids; the ladder visits
    /// each ε in order, so a small cap only costs rebuilds when a schedule
    /// is replayed from the top).
    pub fn new(
        tctx: Arc<TransportContext>,
        lc: Arc<LinearCollision>,
        plan_cap: usize,
    ) -> Result<Self> {
        if !Arc::ptr_eq(&tctx.kctx, &lc.ctx) {
            return Err(KineticsError::InvalidConfig(
                "transport and collision operators must share one kinetic context".into(),
            ));
        }
        if plan_cap == 0 {
            return Err(KineticsError::InvalidConfig(
                "plan cache needs capacity of at least 1".into(),
            ));
        }
        let grid = &tctx.kctx.grid;
        let n_v = grid.len();
        let mut vv_sqrt_mu = vec![0.0; n_v];
        let mut vv_mu = vec![0.0; n_v];
        let mut chi_over_sqrt_mu = vec![0.0; n_v];
        for iv in 0..n_v {
            let v = grid.node(iv);
            vv_sqrt_mu[iv] = v[0] * v[1] * grid.sqrt_mu[iv];
            vv_mu[iv] = v[0] * v[1] * grid.mu[iv];
            let chi = tctx.kctx.chi[iv];
            if chi > 0.0 {
                chi_over_sqrt_mu[iv] = chi / grid.sqrt_mu[iv];
            }
        }
        Ok(SteadyContext {
            tctx,
            lc,
            plans: Mutex::new(VecDeque::new()),
            plan_cap,
            vv_sqrt_mu,
            vv_mu,
            chi_over_sqrt_mu,
        })
    }

    /// Capacity heuristic: keep the whole default ε ladder on lattices up to
    /// 24³, halve it above (the plans grow like n³·n_η).
    pub fn auto(tctx: Arc<TransportContext>, lc: Arc<LinearCollision>) -> Result<Self> {
        let cap = if tctx.kctx.grid.n > 24 { 2 } else { 4 };
        Self::new(tctx, lc, cap)
    }

    pub fn transport(&self) -> &Arc<TransportContext> {
        &self.tctx
    }

    pub fn collision(&self) -> &Arc<LinearCollision> {
        &self.lc
    }

    fn grid(&self) -> &VelocityGrid {
        &self.tctx.kctx.grid
    }

    fn sgrid(&self) -> &SpatialGrid {
        &self.tctx.sgrid
    }

    /// Sweep plan with absorption ε + ν, built on first use and cached.
    pub fn plan(&self, epsilon: f64) -> Result<Arc<TransportPlan>> {
        if !(epsilon >= 0.0) {
            return Err(KineticsError::InvalidConfig(format!(
                "penalty must be nonnegative, got {epsilon}"
            )));
        }
        let key = epsilon.to_bits();
        let mut cache = self.plans.lock().expect("plan cache lock");
        if let Some(pos) = cache.iter().position(|(k, _)| *k == key) {
            let entry = cache.remove(pos).unwrap();
            let plan = entry.1.clone();
            cache.push_back(entry);
            return Ok(plan);
        }
        drop(cache);
        let plan = Arc::new(TransportPlan::new(
            self.tctx.clone(),
            TransportCoeffs::plain(epsilon),
        )?);
        let mut cache = self.plans.lock().expect("plan cache lock");
        cache.push_back((key, plan.clone()));
        while cache.len() > self.plan_cap {
            cache.pop_front();
        }
        Ok(plan)
    }
}

// ---------------------------------------------------------------------------
// norms and small field arithmetic
// ---------------------------------------------------------------------------

fn weighted_sup_diff(a: &ChannelPair, b: &ChannelPair, w_ell: &[f64]) -> f64 {
    let n_v = w_ell.len();
    let mut m = 0.0f64;
    for (x, y) in [(&a.f1, &b.f1), (&a.f2, &b.f2)] {
        for (chunk_x, chunk_y) in x.data.chunks_exact(n_v).zip(y.data.chunks_exact(n_v)) {
            for iv in 0..n_v {
                let d = w_ell[iv] * (chunk_x[iv] - chunk_y[iv]).abs();
                if d > m {
                    m = d;
                }
            }
        }
    }
    m
}

/// Weighted sup norm of a channel pair (the norm the solver converges in).
pub fn weighted_sup_pair(a: &ChannelPair, w_ell: &[f64]) -> f64 {
    let n_v = w_ell.len();
    let mut m = 0.0f64;
    for x in [&a.f1, &a.f2] {
        for chunk in x.data.chunks_exact(n_v) {
            for iv in 0..n_v {
                let d = w_ell[iv] * chunk[iv].abs();
                if d > m {
                    m = d;
                }
            }
        }
    }
    m
}

/// Mass-scale fluctuation u = f1 + √μ·f2 (equals √μ·g).
pub fn mass_scale_field(grid: &VelocityGrid, pair: &ChannelPair) -> DistField {
    let mut u = pair.f1.clone();
    u.tag = "u";
    for s in 0..u.n_sp {
        let f2 = pair.f2.slice(s);
        let us = u.slice_mut(s);
        for iv in 0..us.len() {
            us[iv] += grid.sqrt_mu[iv] * f2[iv];
        }
    }
    u
}

/// Zero-mass functional of the fluctuation: ∫₀^{η₁}(1−η)∫(f1 + √μ f2) dv dη
/// by grid quadrature (the azimuthal 2π factor is omitted — the functional is
/// compared against zero).
pub fn fluctuation_mass(sgrid: &SpatialGrid, grid: &VelocityGrid, pair: &ChannelPair) -> f64 {
    let mut total = 0.0;
    for s in 0..pair.f1.n_sp {
        let f1 = pair.f1.slice(s);
        let f2 = pair.f2.slice(s);
        let mut slice_mass = 0.0;
        for iv in 0..f1.len() {
            slice_mass += grid.w3[iv] * (f1[iv] + grid.sqrt_mu[iv] * f2[iv]);
        }
        total += sgrid.w[s] * (1.0 - sgrid.nodes[s]) * slice_mass;
    }
    total
}

/// Remove the constant-Maxwellian mass mode from the pair (through the
/// diffuse channel) and return the removed functional value.
fn project_mass_mode(sgrid: &SpatialGrid, grid: &VelocityGrid, pair: &mut ChannelPair) -> f64 {
    let m = fluctuation_mass(sgrid, grid, pair);
    if m == 0.0 {
        return 0.0;
    }
    let eta_w: f64 = sgrid
        .w
        .iter()
        .zip(&sgrid.nodes)
        .map(|(&w, &x)| w * (1.0 - x))
        .sum();
    let c = m / (eta_w * grid.mass_of_mu());
    for s in 0..pair.f2.n_sp {
        let f2 = pair.f2.slice_mut(s);
        for iv in 0..f2.len() {
            f2[iv] -= c * grid.sqrt_mu[iv];
        }
    }
    m
}

/// Macroscopic moment profiles (density, bulk velocity, temperature
/// coefficients) of the fluctuation carried by a channel pair.
pub fn solution_moments(grid: &VelocityGrid, pair: &ChannelPair) -> Result<MomentProfile> {
    let u = mass_scale_field(grid, pair);
    moments_from_mass_scale(grid, &u)
}

fn stack_pair(p: &ChannelPair) -> Vec<f64> {
    let mut v = Vec::with_capacity(p.f1.data.len() + p.f2.data.len());
    v.extend_from_slice(&p.f1.data);
    v.extend_from_slice(&p.f2.data);
    v
}

fn unstack_pair(v: &[f64], n_sp: usize, n_v: usize) -> ChannelPair {
    let half = n_sp * n_v;
    ChannelPair {
        f1: DistField::from_data("g1", n_sp, n_v, v[..half].to_vec()),
        f2: DistField::from_data("g2", n_sp, n_v, v[half..].to_vec()),
    }
}

// ---------------------------------------------------------------------------
// Anderson mixing
// ---------------------------------------------------------------------------

/// Windowed Anderson mixing over stacked channel vectors. Residuals are
/// weighted by w^ℓ before entering the least-squares system so the mixing
/// optimizes the same norm the convergence test measures.
struct Anderson {
    window: usize,
    w_ell: Arc<Vec<f64>>,
    xs: VecDeque<Vec<f64>>,
    fs: VecDeque<Vec<f64>>,
    /// Weighted residuals w^ℓ∘(f − x), aligned with `xs`/`fs`.
    rws: VecDeque<Vec<f64>>,
}

impl Anderson {
    fn new(window: usize, w_ell: Arc<Vec<f64>>) -> Self {
        Anderson {
            window,
            w_ell,
            xs: VecDeque::new(),
            fs: VecDeque::new(),
            rws: VecDeque::new(),
        }
    }

    fn reset(&mut self) {
        self.xs.clear();
        self.fs.clear();
        self.rws.clear();
    }

    fn push(&mut self, x: Vec<f64>, f: Vec<f64>) {
        let n_v = self.w_ell.len();
        let mut rw = vec![0.0; x.len()];
        for ((rc, xc), fc) in rw
            .chunks_exact_mut(n_v)
            .zip(x.chunks_exact(n_v))
            .zip(f.chunks_exact(n_v))
        {
            for iv in 0..n_v {
                rc[iv] = self.w_ell[iv] * (fc[iv] - xc[iv]);
            }
        }
        self.xs.push_back(x);
        self.fs.push_back(f);
        self.rws.push_back(rw);
        while self.xs.len() > self.window + 1 {
            self.xs.pop_front();
            self.fs.pop_front();
            self.rws.pop_front();
        }
    }

    /// Next iterate from the stored history (plain map value when the
    /// history holds a single entry or the correction system degenerates).
    fn next_iterate(&self) -> Vec<f64> {
        let m = self.xs.len();
        let f_last = &self.fs[m - 1];
        if m < 2 {
            return f_last.clone();
        }
        let nd = m - 1;
        let len = f_last.len();
        // Residual difference columns and the weighted normal equations.
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(nd);
        for j in 0..nd {
            let a = &self.rws[j];
            let b = &self.rws[j + 1];
            cols.push((0..len).map(|i| b[i] - a[i]).collect());
        }
        let r_last = &self.rws[m - 1];
        let mut gram = vec![0.0f64; nd * nd];
        let mut rhs = vec![0.0f64; nd];
        for i in 0..nd {
            for j in i..nd {
                let d: f64 = cols[i].iter().zip(&cols[j]).map(|(&a, &b)| a * b).sum();
                gram[i * nd + j] = d;
                gram[j * nd + i] = d;
            }
            rhs[i] = cols[i].iter().zip(r_last.iter()).map(|(&a, &b)| a * b).sum();
        }
        let ridge = 1e-12
            * (0..nd)
                .map(|i| gram[i * nd + i])
                .fold(0.0f64, f64::max)
                .max(f64::MIN_POSITIVE);
        for i in 0..nd {
            gram[i * nd + i] += ridge;
        }
        if !numref::solve_dense(&mut gram, &mut rhs, nd) {
            return f_last.clone();
        }
        // An ill-conditioned window produces wild correction coefficients;
        // a plain step is always safe, so prefer it to a giant extrapolation.
        let theta_norm: f64 = rhs.iter().map(|t| t.abs()).sum();
        if !theta_norm.is_finite() || theta_norm > 50.0 {
            return f_last.clone();
        }
        let mut out = f_last.clone();
        for j in 0..nd {
            let theta = rhs[j];
            if theta == 0.0 {
                continue;
            }
            let fa = &self.fs[j];
            let fb = &self.fs[j + 1];
            for i in 0..len {
                out[i] -= theta * (fb[i] - fa[i]);
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// one alternating round and the stage solve
// ---------------------------------------------------------------------------

/// One alternating round of the coupled pair at fixed (σ, ε): refresh the
/// diffuse channel first (so the σ = 0 system solves exactly in one round),
/// then the damped channel against the fresh diffuse field.
fn stage_round(
    ctx: &SteadyContext,
    plan: &TransportPlan,
    sigma: f64,
    sources: &PairSources,
    x: &ChannelPair,
) -> Result<ChannelPair> {
    let kctx = &ctx.tctx.kctx;
    let grid = ctx.grid();
    let n_v = grid.len();
    let n_sp = sources.s1.n_sp;
    let alpha = ctx.tctx.geom.alpha;
    let eta1 = ctx.tctx.geom.eta1;

    // Diffuse channel: σ(K f2 + χ_M μ^{−1/2} 𝒦 f1) + S2 in the volume, the
    // solved diffuse closure plus the σ-scaled f1 outflow at the walls.
    let mut k1: Option<Vec<f64>> = None;
    let (f2_new, _closure) = if sigma == 0.0 {
        plan.sweep_closed(SourceView::Field(&sources.s2), &sources.s2b, [0.0, 0.0])?
    } else {
        let mut kf = vec![0.0; n_sp * n_v];
        ctx.lc
            .conjugated_gain_block(&x.f1.data, &mut kf, n_sp, KCutoff::Full)?;
        let mut lf2 = vec![0.0; n_sp * n_v];
        ctx.lc.apply_l(&x.f2.data, &mut lf2, n_sp)?;
        let mut src2 = sources.s2.clone();
        for s in 0..n_sp {
            let f2 = x.f2.slice(s);
            let kfs = &kf[s * n_v..(s + 1) * n_v];
            let lf2s = &lf2[s * n_v..(s + 1) * n_v];
            let dst = src2.slice_mut(s);
            for iv in 0..n_v {
                let gain_f2 = kctx.nu[iv] * f2[iv] - lf2s[iv];
                dst[iv] += sigma * (gain_f2 + ctx.chi_over_sqrt_mu[iv] * kfs[iv]);
            }
        }
        let cw = maxwell_half_flux(grid);
        let j_extra = [
            sigma * outgoing_plain_flux(grid, x.f1.slice(0), Wall::Outer) / cw,
            sigma * outgoing_plain_flux(grid, x.f1.slice(n_sp - 1), Wall::Inner) / cw,
        ];
        k1 = Some(kf);
        plan.sweep_closed(SourceView::Field(&src2), &sources.s2b, j_extra)?
    };

    // Damped channel: −(α/2η₁) v_η v_φ √μ f2 + σ(1−χ_M)𝒦 f1 + S1, zero
    // incoming data. The ½ comes from the fluctuation split: the azimuthal
    // shear acting on the √μ weight of the diffuse channel deposits
    // (α/2η₁)v_η v_φ √μ f2 here.
    let couple = -0.5 * alpha / eta1;
    let mut src1 = sources.s1.clone();
    for s in 0..n_sp {
        let f2 = f2_new.slice(s);
        let dst = src1.slice_mut(s);
        match &k1 {
            Some(kf) => {
                let kfs = &kf[s * n_v..(s + 1) * n_v];
                for iv in 0..n_v {
                    dst[iv] += couple * ctx.vv_sqrt_mu[iv] * f2[iv]
                        + sigma * (1.0 - kctx.chi[iv]) * kfs[iv];
                }
            }
            None => {
                for iv in 0..n_v {
                    dst[iv] += couple * ctx.vv_sqrt_mu[iv] * f2[iv];
                }
            }
        }
    }
    let f1_new = plan.sweep(SourceView::Field(&src1), &WallData::zero());
    Ok(ChannelPair { f1: f1_new, f2: f2_new })
}

/// Solve one (σ, ε) stage to the requested weighted residual.
fn solve_stage(
    ctx: &SteadyContext,
    plan: &TransportPlan,
    epsilon: f64,
    sigma: f64,
    sources: &PairSources,
    warm: Option<&ChannelPair>,
    tol: f64,
    max_inner: usize,
) -> Result<(ChannelPair, StageLog)> {
    let kctx = &ctx.tctx.kctx;
    let n_v = ctx.grid().len();
    let n_sp = sources.s1.n_sp;
    let w_ell = &kctx.w_ell;
    let mut x = match warm {
        Some(p) => p.clone(),
        None => ChannelPair::zeros(n_sp, n_v),
    };
    let mut aa = Anderson::new(ANDERSON_WINDOW, Arc::new(w_ell.clone()));
    let mut history: Vec<f64> = Vec::new();
    let mut best: Option<(f64, ChannelPair)> = None;
    for it in 1..=max_inner {
        let fx = stage_round(ctx, plan, sigma, sources, &x)?;
        let res = weighted_sup_diff(&fx, &x, w_ell);
        history.push(res);
        if res <= tol {
            return Ok((
                fx,
                StageLog { sigma, epsilon, iterations: it, residual: res },
            ));
        }
        let best_res = best.as_ref().map_or(f64::INFINITY, |(r, _)| *r);
        if res < best_res {
            best = Some((res, fx.clone()));
        }
        // Safeguards: a mixing excursion is abandoned by rewinding to the
        // best map value seen; a stalled window just drops the history.
        if res > 10.0 * best_res {
            aa.reset();
            x = best.as_ref().map(|(_, p)| p.clone()).unwrap();
            continue;
        }
        if history.len() > ANDERSON_WINDOW + 1 {
            let past = history[history.len() - 2 - ANDERSON_WINDOW];
            if res > 0.98 * past {
                aa.reset();
            }
        }
        aa.push(stack_pair(&x), stack_pair(&fx));
        x = unstack_pair(&aa.next_iterate(), n_sp, n_v);
    }
    Err(KineticsError::NotConverged {
        stage: format!("channel-pair stage (sigma={sigma}, epsilon={epsilon:.3e})"),
        residual: *history.last().unwrap(),
        iterations: max_inner,
        tol,
    })
}

/// Stage tolerance used for intermediate σ steps, whose only role is to
/// warm-start the next stage.
fn relaxed_tol(final_tol: f64) -> f64 {
    if final_tol >= 1e-7 {
        final_tol
    } else {
        (final_tol * 1e3).min(1e-7)
    }
}

/// Solve the coupled pair at one (ε, σ) from zero initial data.
pub fn solve_linear_pair(
    ctx: &SteadyContext,
    epsilon: f64,
    sigma: f64,
    sources: &PairSources,
    cfg: &SteadyConfig,
) -> Result<(ChannelPair, StageLog)> {
    validate_sources(ctx, sources)?;
    if !(0.0..=1.0).contains(&sigma) {
        return Err(KineticsError::InvalidConfig(format!(
            "collision coupling must lie in [0,1], got {sigma}"
        )));
    }
    let plan = ctx.plan(epsilon)?;
    solve_stage(
        ctx,
        &plan,
        epsilon,
        sigma,
        sources,
        None,
        cfg.schedule.inner_tol,
        cfg.schedule.max_inner,
    )
}

fn validate_sources(ctx: &SteadyContext, sources: &PairSources) -> Result<()> {
    let n_sp = ctx.sgrid().len();
    let n_v = ctx.grid().len();
    for (name, f) in [("s1", &sources.s1), ("s2", &sources.s2)] {
        if f.n_sp != n_sp || f.n_v != n_v {
            return Err(KineticsError::InvalidConfig(format!(
                "source {name} has shape {}x{}, grids have {n_sp}x{n_v}",
                f.n_sp, f.n_v
            )));
        }
        if !f.all_finite() {
            return Err(KineticsError::InvalidConfig(format!(
                "source {name} has non-finite entries"
            )));
        }
    }
    sources.s2b.validate(ctx.grid())
}

/// Walk the σ grid at fixed ε, warm-starting each stage from the previous
/// one; intermediate stages run at a relaxed tolerance, the final σ = 1
/// stage at `final_tol`.
fn sigma_chain(
    ctx: &SteadyContext,
    epsilon: f64,
    sources: &PairSources,
    schedule: &ContinuationSchedule,
    final_tol: f64,
) -> Result<(ChannelPair, Vec<StageLog>)> {
    let plan = ctx.plan(epsilon)?;
    let mut warm: Option<ChannelPair> = None;
    let mut logs = Vec::with_capacity(schedule.sigma_steps.len());
    for (i, &sigma) in schedule.sigma_steps.iter().enumerate() {
        let last = i + 1 == schedule.sigma_steps.len();
        let tol = if last { final_tol } else { relaxed_tol(final_tol) };
        let (pair, log) = solve_stage(
            ctx,
            &plan,
            epsilon,
            sigma,
            sources,
            warm.as_ref(),
            tol,
            schedule.max_inner,
        )
        .map_err(|e| rename_stage(e, format!("coupling continuation at sigma={sigma}, epsilon={epsilon:.3e}")))?;
        logs.push(log);
        warm = Some(pair);
    }
    Ok((warm.unwrap(), logs))
}

fn rename_stage(e: KineticsError, stage: String) -> KineticsError {
    match e {
        KineticsError::NotConverged { residual, iterations, tol, .. } => {
            KineticsError::NotConverged { stage, residual, iterations, tol }
        }
        other => other,
    }
}

/// Bootstrap the collision coupling from σ = 0 to σ = 1 at fixed ε.
pub fn continue_sigma(
    ctx: &SteadyContext,
    epsilon: f64,
    sources: &PairSources,
    schedule: &ContinuationSchedule,
    _cfg: &SteadyConfig,
) -> Result<(ChannelPair, Vec<StageLog>)> {
    schedule.validate()?;
    validate_sources(ctx, sources)?;
    sigma_chain(ctx, epsilon, sources, schedule, schedule.inner_tol)
}

/// Compatibility functional of the volume sources: the weighted gap integral
/// of the mass carried by s1 + √μ·s2. The vanishing-penalty limit is uniform
/// only for mass-free sources.
fn source_mass_defect(sgrid: &SpatialGrid, grid: &VelocityGrid, sources: &PairSources) -> (f64, f64) {
    let mut total = 0.0;
    let mut scale = 0.0;
    for s in 0..sources.s1.n_sp {
        let s1 = sources.s1.slice(s);
        let s2 = sources.s2.slice(s);
        let mut m = 0.0;
        let mut a = 0.0;
        for iv in 0..s1.len() {
            let val = s1[iv] + grid.sqrt_mu[iv] * s2[iv];
            m += grid.w3[iv] * val;
            a += grid.w3[iv] * val.abs();
        }
        let w = sgrid.w[s] * (1.0 - sgrid.nodes[s]);
        total += w * m;
        scale += w * a;
    }
    (total, scale)
}

enum LadderMode {
    /// σ bootstrap at the first ε (or at every ε when configured), direct
    /// physical-coupling solves warm-started down the rest of the ladder.
    Bootstrap,
    /// Single warm-started solve at (σ = 1, ε_min); used by outer steps that
    /// already hold a converged iterate for nearby sources.
    DirectOnly,
}

/// Drive the penalty through `epsilon_seq` and return the final iterate as
/// the vanishing-penalty solution.
pub fn limit_epsilon(
    ctx: &SteadyContext,
    sources: &PairSources,
    schedule: &ContinuationSchedule,
    cfg: &SteadyConfig,
) -> Result<(ChannelPair, EpsilonLog)> {
    limit_epsilon_impl(
        ctx,
        sources,
        schedule,
        cfg,
        None,
        schedule.inner_tol,
        LadderMode::Bootstrap,
    )
}

fn limit_epsilon_impl(
    ctx: &SteadyContext,
    sources: &PairSources,
    schedule: &ContinuationSchedule,
    cfg: &SteadyConfig,
    warm: Option<&ChannelPair>,
    inner_tol: f64,
    mode: LadderMode,
) -> Result<(ChannelPair, EpsilonLog)> {
    schedule.validate()?;
    validate_sources(ctx, sources)?;
    let sgrid = ctx.sgrid();
    let grid = ctx.grid();
    let (defect, scale) = source_mass_defect(sgrid, grid, sources);
    if defect.abs() > cfg.mass_tol * scale.max(1.0) {
        return Err(KineticsError::InvalidConfig(format!(
            "sources carry net mass {defect:.3e} against scale {scale:.3e}; \
             the vanishing-penalty limit requires mass-free sources"
        )));
    }
    let mut log = EpsilonLog::default();
    let mut current: Option<ChannelPair> = warm.cloned();

    if let LadderMode::DirectOnly = mode {
        let eps = *schedule.epsilon_seq.last().unwrap();
        let plan = ctx.plan(eps)?;
        let (mut pair, slog) = solve_stage(
            ctx,
            &plan,
            eps,
            1.0,
            sources,
            current.as_ref(),
            inner_tol,
            schedule.max_inner,
        )?;
        log.stages.push(slog);
        log.mass_removed.push(project_mass_mode(sgrid, grid, &mut pair));
        return Ok((pair, log));
    }

    for (k, &eps) in schedule.epsilon_seq.iter().enumerate() {
        let use_chain = (k == 0 && current.is_none()) || cfg.full_schedule_every_step;
        let mut pair = if use_chain {
            let (pair, slogs) = sigma_chain(ctx, eps, sources, schedule, inner_tol)?;
            log.stages.extend(slogs);
            pair
        } else {
            let plan = ctx.plan(eps)?;
            let (pair, slog) = solve_stage(
                ctx,
                &plan,
                eps,
                1.0,
                sources,
                current.as_ref(),
                inner_tol,
                schedule.max_inner,
            )
            .map_err(|e| {
                rename_stage(e, format!("penalty continuation at epsilon={eps:.3e}"))
            })?;
            log.stages.push(slog);
            pair
        };
        log.mass_removed.push(project_mass_mode(sgrid, grid, &mut pair));
        if let Some(prev) = &current {
            log.cauchy
                .push(weighted_sup_diff(&pair, prev, &ctx.tctx.kctx.w_ell));
        }
        current = Some(pair);
    }

    // The penalty differences must contract like the ε sums; calibrate the
    // constant from the first difference and allow generous slack — the
    // check guards the trend, not the constant.
    if log.cauchy.len() >= 2 {
        let eps = &schedule.epsilon_seq;
        let floor = 50.0 * inner_tol;
        let c1 = log.cauchy[0] / (eps[0] + eps[1]);
        if log.cauchy[0] > floor {
            for (k, &d) in log.cauchy.iter().enumerate().skip(1) {
                let bound = 3.0 * c1 * (eps[k] + eps[k + 1]) + floor;
                if d > bound {
                    return Err(KineticsError::NotConverged {
                        stage: format!(
                            "vanishing-penalty limit (difference at epsilon={:.3e} not contracting)",
                            eps[k + 1]
                        ),
                        residual: d,
                        iterations: k + 1,
                        tol: bound,
                    });
                }
            }
        }
    }
    Ok((current.unwrap(), log))
}

// ---------------------------------------------------------------------------
// quadratic collision term on a symmetric sublattice
// ---------------------------------------------------------------------------

/// Evaluation pattern for the quadratic collision term: a mirror-symmetric
/// strided sublattice with per-axis linear prolongation tables. The gain and
/// the loss frequency are computed on the sublattice (upper v_z half only —
/// the fields are even in v_z bitwise) and prolonged separately; the loss is
/// then reassembled with the exact fine-grid field.
struct QuadSampler {
    nc: usize,
    /// Slot of the first upper-half v_z plane.
    z_hi: usize,
    /// Flat fine-lattice ids of the evaluated nodes (axis × axis × upper z).
    out_nodes: Vec<u32>,
    /// Per fine index: lower bracket slot and upper weight.
    lo: Vec<usize>,
    whi: Vec<f64>,
    table: AngularTable,
    cuts: QuadCuts,
}

impl QuadSampler {
    fn new(grid: &VelocityGrid, stride: usize, coarse_angular: bool, vstar: f64) -> Result<Self> {
        let n = grid.n;
        let stride = stride.max(1);
        let upper: Vec<usize> = (n / 2..n).step_by(stride).collect();
        let mut axis: Vec<usize> = upper
            .iter()
            .map(|&i| n - 1 - i)
            .filter(|&i| i < n / 2)
            .collect();
        axis.sort_unstable();
        let z_hi = axis.len();
        axis.extend_from_slice(&upper);
        let nc = axis.len();
        if nc < 2 {
            return Err(KineticsError::InvalidConfig(format!(
                "sublattice stride {stride} leaves fewer than 2 nodes per axis"
            )));
        }
        for t in 0..nc {
            debug_assert_eq!(axis[t] + axis[nc - 1 - t], n - 1, "sublattice not symmetric");
        }
        let mut out_nodes = Vec::with_capacity(nc * nc * (nc - z_hi));
        for &i in &axis {
            for &j in &axis {
                for &k in &axis[z_hi..] {
                    out_nodes.push(((i * n + j) * n + k) as u32);
                }
            }
        }
        let mut lo = vec![0usize; n];
        let mut whi = vec![0.0f64; n];
        for t in 0..n {
            if t <= axis[0] {
                lo[t] = 0;
                whi[t] = 0.0;
            } else if t >= axis[nc - 1] {
                lo[t] = nc - 2;
                whi[t] = 1.0;
            } else {
                let j = match axis.binary_search(&t) {
                    Ok(j) => {
                        lo[t] = j.min(nc - 2);
                        whi[t] = if j == nc - 1 { 1.0 } else { 0.0 };
                        continue;
                    }
                    Err(j) => j - 1,
                };
                lo[t] = j;
                whi[t] = (grid.coords[t] - grid.coords[axis[j]])
                    / (grid.coords[axis[j + 1]] - grid.coords[axis[j]]);
            }
        }
        let table = if coarse_angular {
            AngularTable::from_rule(&grid.angular_coarse)
        } else {
            AngularTable::from_rule(&grid.angular)
        };
        Ok(QuadSampler {
            nc,
            z_hi,
            out_nodes,
            lo,
            whi,
            table,
            cuts: QuadCuts { pair_energy_cut: f64::INFINITY, vstar_radius: vstar },
        })
    }

    /// Q(u, u) on the full grid: sampled gain and loss frequency prolonged
    /// from the sublattice, loss recombined with the exact fine field.
    ///
    /// The gain is interpolated in equilibrium-relative form gain/μ — the
    /// raw gain carries the Gaussian envelope, which piecewise-linear
    /// prolongation would flatten badly, while the ratio is slowly varying.
    fn quadratic_term(&self, grid: &VelocityGrid, gamma: f64, b0: f64, u: &DistField) -> DistField {
        let n = grid.n;
        let n_v = grid.len();
        let nc = self.nc;
        let mut out = DistField::zeros("q", u.n_sp, n_v);
        let mut gain_c = vec![0.0f64; nc * nc * nc];
        let mut nu_c = vec![0.0f64; nc * nc * nc];
        for s in 0..u.n_sp {
            let us = u.slice(s);
            let gain = q_gain_at(grid, &self.table, us, us, gamma, b0, self.cuts, &self.out_nodes);
            let nu = loss_frequency_at(grid, us, gamma, b0, &self.out_nodes);
            // Scatter into the coarse cube, mirroring the lower v_z half
            // (all solver fields are even in v_z bitwise).
            let mut t = 0;
            for ia in 0..nc {
                for ib in 0..nc {
                    for ic in self.z_hi..nc {
                        let slot = (ia * nc + ib) * nc + ic;
                        let mirror = (ia * nc + ib) * nc + (nc - 1 - ic);
                        let rel = gain[t] / grid.mu[self.out_nodes[t] as usize];
                        gain_c[slot] = rel;
                        gain_c[mirror] = rel;
                        nu_c[slot] = nu[t];
                        nu_c[mirror] = nu[t];
                        t += 1;
                    }
                }
            }
            // Prolong the upper-half fine planes, mirror the lower half.
            let dst = out.slice_mut(s);
            for i in 0..n {
                let (li, wi) = (self.lo[i], self.whi[i]);
                for j in 0..n {
                    let (lj, wj) = (self.lo[j], self.whi[j]);
                    let c00 = (li * nc + lj) * nc;
                    let c01 = (li * nc + lj + 1) * nc;
                    let c10 = ((li + 1) * nc + lj) * nc;
                    let c11 = ((li + 1) * nc + lj + 1) * nc;
                    let w00 = (1.0 - wi) * (1.0 - wj);
                    let w01 = (1.0 - wi) * wj;
                    let w10 = wi * (1.0 - wj);
                    let w11 = wi * wj;
                    let row = (i * n + j) * n;
                    for k in n / 2..n {
                        let (lk, wk) = (self.lo[k], self.whi[k]);
                        let gather = |c: &[f64]| -> f64 {
                            let lo = w00 * c[c00 + lk]
                                + w01 * c[c01 + lk]
                                + w10 * c[c10 + lk]
                                + w11 * c[c11 + lk];
                            let hi = w00 * c[c00 + lk + 1]
                                + w01 * c[c01 + lk + 1]
                                + w10 * c[c10 + lk + 1]
                                + w11 * c[c11 + lk + 1];
                            (1.0 - wk) * lo + wk * hi
                        };
                        let value = gather(&gain_c) - gather(&nu_c) * us[row + k];
                        dst[row + k] = value;
                        dst[row + (n - 1 - k)] = value;
                    }
                }
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// outer quadratic loop
// ---------------------------------------------------------------------------

/// Remove the net mass of a volume source by a uniform Maxwellian shift,
/// returning the removed functional value (the quadratic gain rule carries a
/// small quadrature mass defect that would otherwise violate the
/// compatibility the penalty limit needs).
fn balance_source_mass(sgrid: &SpatialGrid, grid: &VelocityGrid, s1: &mut DistField) -> f64 {
    let mut total = 0.0;
    for s in 0..s1.n_sp {
        let sl = s1.slice(s);
        let m: f64 = sl.iter().zip(&grid.w3).map(|(&x, &w)| w * x).sum();
        total += sgrid.w[s] * (1.0 - sgrid.nodes[s]) * m;
    }
    if total == 0.0 {
        return 0.0;
    }
    let eta_w: f64 = sgrid
        .w
        .iter()
        .zip(&sgrid.nodes)
        .map(|(&w, &x)| w * (1.0 - x))
        .sum();
    let c = total / (eta_w * grid.mass_of_mu());
    for s in 0..s1.n_sp {
        let sl = s1.slice_mut(s);
        for iv in 0..sl.len() {
            sl[iv] -= c * grid.mu[iv];
        }
    }
    total
}

/// Solve the steady problem at shear α: outer fixed-point loop over the
/// quadratic collision term, each step a vanishing-penalty linear solve.
pub fn solve_nonlinear(
    ctx: &SteadyContext,
    alpha: f64,
    cfg: &SteadyConfig,
) -> Result<(SteadyProfile, SteadyReport)> {
    cfg.schedule.validate()?;
    if !(alpha.abs() <= cfg.alpha_cap) {
        return Err(KineticsError::InvalidConfig(format!(
            "shear {alpha} exceeds the configured cap {}",
            cfg.alpha_cap
        )));
    }
    if (alpha - ctx.tctx.geom.alpha).abs() > 1e-14 {
        return Err(KineticsError::InvalidConfig(format!(
            "shear {alpha} does not match the transport geometry ({})",
            ctx.tctx.geom.alpha
        )));
    }
    let grid = ctx.grid();
    let sgrid = ctx.sgrid();
    let kctx = &ctx.tctx.kctx;
    let n_v = grid.len();
    let n_sp = sgrid.len();
    let eta1 = ctx.tctx.geom.eta1;
    let gamma = kctx.params.gamma;
    let b0 = kctx.params.b0_norm;
    let sampler = QuadSampler::new(
        grid,
        cfg.quad_stride,
        cfg.quad_coarse_angular,
        cfg.quad_vstar_radius.unwrap_or(grid.v_max),
    )?;

    // Shear drive, identical on every radial slice.
    let drive: Vec<f64> = (0..n_v).map(|iv| -(alpha / eta1) * ctx.vv_mu[iv]).collect();
    let make_sources = |quad: Option<&DistField>| -> (PairSources, f64) {
        let mut s1 = DistField::zeros("s1", n_sp, n_v);
        for s in 0..n_sp {
            s1.slice_mut(s).copy_from_slice(&drive);
        }
        let mut corrected = 0.0;
        if let Some(q) = quad {
            for (dst, &qv) in s1.data.iter_mut().zip(&q.data) {
                *dst += qv;
            }
            corrected = balance_source_mass(sgrid, grid, &mut s1);
        }
        (
            PairSources { s1, s2: DistField::zeros("s2", n_sp, n_v), s2b: WallData::zero() },
            corrected,
        )
    };

    let mut report = SteadyReport::default();
    let mut pair = ChannelPair::zeros(n_sp, n_v);
    let mut last_was_extrapolated = false;
    let mut converged = false;
    let schedule = &cfg.schedule;
    for k in 0..schedule.max_outer {
        let quad = if k == 0 {
            None
        } else {
            let u = mass_scale_field(grid, &pair);
            Some(sampler.quadratic_term(grid, gamma, b0, &u))
        };
        let (sources, corrected) = make_sources(quad.as_ref());
        report.source_mass_corrections.push(corrected);
        let prev_diff = report.outer_diffs.last().copied().unwrap_or(f64::INFINITY);
        let tol_k = if prev_diff.is_finite() {
            schedule.inner_tol.max((0.05 * prev_diff).min(1e-6))
        } else {
            schedule.inner_tol.max(1e-6)
        };
        let mode = if k == 0 && !cfg.full_schedule_every_step {
            LadderMode::Bootstrap
        } else if cfg.full_schedule_every_step {
            LadderMode::Bootstrap
        } else {
            LadderMode::DirectOnly
        };
        let warm = if k == 0 { None } else { Some(&pair) };
        let (next, elog) = limit_epsilon_impl(ctx, &sources, schedule, cfg, warm, tol_k, mode)?;
        let diff = weighted_sup_diff(&next, &pair, &kctx.w_ell);
        report.epsilon_logs.push(elog);
        report.outer_diffs.push(diff);
        report.outer_iterations = k + 1;
        // Contraction bookkeeping on plain steps only.
        if !last_was_extrapolated && report.outer_diffs.len() >= 2 {
            let prev = report.outer_diffs[report.outer_diffs.len() - 2];
            if prev.is_finite() && prev > 0.0 {
                report.contraction_ratios.push(diff / prev);
            }
        }
        let prev_iterate = std::mem::replace(&mut pair, next);
        if diff <= schedule.outer_tol {
            converged = true;
            break;
        }
        let nd = report.outer_diffs.len();
        if nd >= 3
            && report.outer_diffs[nd - 1] > 2.0 * report.outer_diffs[nd - 2]
            && report.outer_diffs[nd - 2] > 2.0 * report.outer_diffs[nd - 3]
        {
            return Err(KineticsError::NotConverged {
                stage: format!(
                    "quadratic outer loop diverging (differences {:?})",
                    report.outer_diffs
                ),
                residual: report.outer_diffs[nd - 1],
                iterations: nd,
                tol: schedule.outer_tol,
            });
        }
        // Geometric extrapolation once the ratio is stable; the following
        // step re-linearizes at the extrapolated point.
        last_was_extrapolated = false;
        if cfg.extrapolate_outer && report.contraction_ratios.len() >= 2 {
            let r = *report.contraction_ratios.last().unwrap();
            let rp = report.contraction_ratios[report.contraction_ratios.len() - 2];
            if (0.02..0.8).contains(&r) && (r - rp).abs() <= 0.25 * r {
                let gain = r / (1.0 - r);
                for (dst, src) in [(&mut pair.f1, &prev_iterate.f1), (&mut pair.f2, &prev_iterate.f2)]
                {
                    for (d, &p) in dst.data.iter_mut().zip(&src.data) {
                        *d += gain * (*d - p);
                    }
                }
                report.extrapolations += 1;
                last_was_extrapolated = true;
            }
        }
    }
    if !converged {
        return Err(KineticsError::NotConverged {
            stage: format!(
                "quadratic outer loop (differences {:?})",
                report.outer_diffs
            ),
            residual: *report.outer_diffs.last().unwrap_or(&f64::NAN),
            iterations: report.outer_iterations,
            tol: schedule.outer_tol,
        });
    }
    // Polish: one full-tolerance solve at the final linearization point so
    // the returned pair meets inner_tol regardless of the adaptive stage
    // tolerances used on the way in.
    let quad = if report.outer_iterations > 1 || cfg.schedule.max_outer == 1 {
        let u = mass_scale_field(grid, &pair);
        Some(sampler.quadratic_term(grid, gamma, b0, &u))
    } else {
        None
    };
    let (sources, corrected) = make_sources(quad.as_ref());
    report.source_mass_corrections.push(corrected);
    let (polished, elog) = limit_epsilon_impl(
        ctx,
        &sources,
        schedule,
        cfg,
        Some(&pair),
        schedule.inner_tol,
        LadderMode::DirectOnly,
    )?;
    report.epsilon_logs.push(elog);
    pair = polished;
    report.zero_mass = fluctuation_mass(sgrid, grid, &pair);

    let profile = assemble_profile(
        sgrid,
        grid,
        &ctx.tctx.geom,
        pair.f1,
        pair.f2,
        alpha,
        cfg.m0,
    )?;
    Ok((profile, report))
}

// ---------------------------------------------------------------------------
// profile assembly
// ---------------------------------------------------------------------------

/// Assemble the physical profile from converged channels: fix M̃₀ from the
/// total mass, reassemble the fluctuation, and express the state both in the
/// solver frame and for a resting observer (azimuthal shift by 𝔲_φ(η)).
///
/// `m0 = None` uses the discrete equilibrium mass 2π∫(1−η)∫μ, making
/// M̃₀ = 1 exactly.
pub fn assemble_profile(
    sgrid: &SpatialGrid,
    grid: &VelocityGrid,
    geom: &AnnulusGeometry,
    g1: DistField,
    g2: DistField,
    alpha: f64,
    m0: Option<f64>,
) -> Result<SteadyProfile> {
    let n_sp = sgrid.len();
    let n_v = grid.len();
    if g1.n_sp != n_sp || g1.n_v != n_v || g2.n_sp != n_sp || g2.n_v != n_v {
        return Err(KineticsError::InvalidConfig(
            "channel fields do not match the grids".into(),
        ));
    }
    let eta_w: f64 = sgrid
        .w
        .iter()
        .zip(&sgrid.nodes)
        .map(|(&w, &x)| w * (1.0 - x))
        .sum();
    let mu_gap_mass = std::f64::consts::TAU * eta_w * grid.mass_of_mu();
    let m0 = m0.unwrap_or(mu_gap_mass);
    if !(m0 > 0.0) {
        return Err(KineticsError::InvalidConfig(format!(
            "total mass must be positive, got {m0}"
        )));
    }
    let m_tilde = m0 / mu_gap_mass;

    let mut g = DistField::zeros("g", n_sp, n_v);
    let mut g_st = DistField::zeros("G_st", n_sp, n_v);
    for s in 0..n_sp {
        let a = g1.slice(s);
        let b = g2.slice(s);
        let gs = g.slice_mut(s);
        let st = g_st.slice_mut(s);
        for iv in 0..n_v {
            gs[iv] = a[iv] / grid.sqrt_mu[iv] + b[iv];
            st[iv] = m_tilde * grid.mu[iv] + a[iv] + grid.sqrt_mu[iv] * b[iv];
        }
    }
    let f_lab = observer_frame_state(sgrid, grid, geom, &g_st, alpha);
    let mut g1 = g1;
    let mut g2 = g2;
    g1.tag = "g1";
    g2.tag = "g2";
    Ok(SteadyProfile { alpha, m_tilde, g1, g2, g, g_st, f_lab })
}

/// Express a solver-frame state for a resting observer: sample the azimuthal
/// velocity argument at v_φ + 𝔲_φ(η) with 𝔲_φ(η) = α(η₁−η)/η₁, by linear
/// interpolation along the v_φ axis (clamped at the lattice edge, which keeps
/// the result nonnegative for nonnegative input).
pub fn observer_frame_state(
    sgrid: &SpatialGrid,
    grid: &VelocityGrid,
    geom: &AnnulusGeometry,
    state: &DistField,
    alpha: f64,
) -> DistField {
    let n = grid.n;
    let n_v = grid.len();
    let mut out = DistField::zeros("F_lab", state.n_sp, n_v);
    for s in 0..state.n_sp {
        let shift = alpha * (geom.eta1 - sgrid.nodes[s]) / geom.eta1;
        let src = state.slice(s);
        let dst = out.slice_mut(s);
        if shift == 0.0 {
            dst.copy_from_slice(src);
            continue;
        }
        // Shared 1-D stencil along the v_φ axis for all (v_η, v_z).
        let mut lo = vec![0usize; n];
        let mut wt = vec![0.0f64; n];
        for j in 0..n {
            let x = (grid.coords[j] + shift).clamp(grid.coords[0], grid.coords[n - 1]);
            let t = ((x - grid.coords[0]) / grid.h).clamp(0.0, (n - 1) as f64);
            let mut base = t.floor() as usize;
            if base > n - 2 {
                base = n - 2;
            }
            lo[j] = base;
            wt[j] = ((x - grid.coords[base]) / grid.h).clamp(0.0, 1.0);
        }
        for i in 0..n {
            for j in 0..n {
                let row = (i * n + j) * n;
                let row_lo = (i * n + lo[j]) * n;
                let w = wt[j];
                for k in 0..n {
                    dst[row + k] = (1.0 - w) * src[row_lo + k] + w * src[row_lo + n + k];
                }
            }
        }
    }
    out
}

/// Total mass of a grid state: 2π ∫₀^{η₁} (1−η) ∫ F dv dη by grid quadrature.
pub fn total_mass(sgrid: &SpatialGrid, grid: &VelocityGrid, state: &DistField) -> f64 {
    let mut total = 0.0;
    for s in 0..state.n_sp {
        let sl = state.slice(s);
        let m: f64 = sl.iter().zip(&grid.w3).map(|(&x, &w)| w * x).sum();
        total += sgrid.w[s] * (1.0 - sgrid.nodes[s]) * m;
    }
    std::f64::consts::TAU * total
}

// ---------------------------------------------------------------------------
// residual certificate
// ---------------------------------------------------------------------------

/// Independent residual measurement of a steady profile.
#[derive(Clone, Debug)]
pub struct ResidualCertificate {
    /// max w^ℓ·|streaming − collision| over the checked nodes.
    pub weighted_residual: f64,
    /// ε_min · max w^ℓ·|fluctuation| over the same nodes — the equation term
    /// the penalized solve leaves in by construction.
    pub penalty_term: f64,
    /// Radial nodes checked (interior, away from the wall layers).
    pub eta_nodes: Vec<usize>,
    /// Velocity nodes checked per radial node.
    pub velocity_nodes: usize,
}

/// Evaluate the steady-equation residual of `g_st` on an independent node
/// subset: radial derivative by central differences, velocity derivatives of
/// the fluctuation by 4th-order differences (the equilibrium streaming is
/// handled analytically — its rotation part vanishes identically), and the
/// collision operator by the production-rule ratio-form quadrature, which
/// cancels the equilibrium gain/loss block exactly.
pub fn residual_certificate(
    ctx: &SteadyContext,
    profile: &SteadyProfile,
    eps_min: f64,
) -> Result<ResidualCertificate> {
    let grid = ctx.grid();
    let sgrid = ctx.sgrid();
    let kctx = &ctx.tctx.kctx;
    let n_sp = sgrid.len();
    let n_v = grid.len();
    if n_sp < 7 {
        return Err(KineticsError::InvalidConfig(
            "residual certificate needs at least 7 radial nodes".into(),
        ));
    }
    let alpha = profile.alpha;
    let eta1 = ctx.tctx.geom.eta1;
    let m_tilde = profile.m_tilde;
    let gamma = kctx.params.gamma;
    let b0 = kctx.params.b0_norm;

    // Interior radial subset (wall layers excluded — the certificate
    // measures the interior equation; the walls are closed exactly).
    let s_min = 2usize;
    let s_max = n_sp - 3;
    let step = ((s_max - s_min) / 4).max(1);
    let eta_nodes: Vec<usize> = (s_min..=s_max).step_by(step).collect();

    // Mirror-symmetric velocity subset (upper v_z half; the residual of an
    // even state is even bitwise).
    let sampler = QuadSampler::new(grid, 2, false, grid.v_max)?;
    let subset = &sampler.out_nodes;

    // Fluctuation and ratio fields.
    let fluct: Vec<Vec<f64>> = (0..n_sp)
        .map(|s| {
            let a = profile.g1.slice(s);
            let b = profile.g2.slice(s);
            (0..n_v)
                .map(|iv| a[iv] + grid.sqrt_mu[iv] * b[iv])
                .collect()
        })
        .collect();

    let mut worst = 0.0f64;
    let mut penalty = 0.0f64;
    for &s in &eta_nodes {
        let eta = sgrid.nodes[s];
        let g_here = profile.g_st.slice(s);
        let g_up = profile.g_st.slice(s + 1);
        let g_dn = profile.g_st.slice(s - 1);
        let fl = &fluct[s];
        // Ratio field R = G/μ computed without the equilibrium division
        // noise: R = M̃₀ + g1/μ + g2/√μ.
        let r_field: Vec<f64> = {
            let a = profile.g1.slice(s);
            let b = profile.g2.slice(s);
            (0..n_v)
                .map(|iv| m_tilde + a[iv] / grid.mu[iv] + b[iv] / grid.sqrt_mu[iv])
                .collect()
        };
        let bare = gain_ratio_bare_at(
            grid,
            &ctx.lc.table,
            &r_field,
            &r_field,
            gamma,
            b0,
            QuadCuts { pair_energy_cut: f64::INFINITY, vstar_radius: grid.v_max },
            subset,
        );
        let nu_g = loss_frequency_at(grid, g_here, gamma, b0, subset);
        for (idx, &pnode) in subset.iter().enumerate() {
            let p = pnode as usize;
            let v = grid.node(p);
            let d_eta = (g_up[p] - g_dn[p]) / (2.0 * sgrid.d_eta);
            let d_veta = axis_derivative(fl, grid, p, 0);
            let d_vphi = axis_derivative(fl, grid, p, 1);
            let streaming = v[0] * d_eta
                + m_tilde * (alpha / eta1) * ctx.vv_mu[p]
                + (-v[1] * v[1] * d_veta + v[0] * v[1] * d_vphi) / (1.0 - eta)
                - (alpha / eta1) * v[0] * d_vphi;
            let collision = grid.mu[p] * bare[idx] - nu_g[idx] * g_here[p];
            let w = kctx.w_ell[p];
            worst = worst.max(w * (streaming - collision).abs());
            penalty = penalty.max(eps_min * w * fl[p].abs());
        }
    }
    Ok(ResidualCertificate {
        weighted_residual: worst,
        penalty_term: penalty,
        eta_nodes,
        velocity_nodes: subset.len(),
    })
}

/// First derivative of a lattice field along one velocity axis at a node:
/// 4th-order central in the interior, 2nd-order central one node from the
/// edge, 2nd-order one-sided at the edge.
fn axis_derivative(field: &[f64], grid: &VelocityGrid, iv: usize, axis: usize) -> f64 {
    let n = grid.n;
    let (i, j, k) = grid.decompose(iv);
    let (idx, stride) = match axis {
        0 => (i, n * n),
        1 => (j, n),
        _ => (k, 1),
    };
    let base = iv - idx * stride;
    let f = |t: usize| field[base + t * stride];
    let h = grid.h;
    if idx >= 2 && idx + 2 < n {
        (-f(idx + 2) + 8.0 * f(idx + 1) - 8.0 * f(idx - 1) + f(idx - 2)) / (12.0 * h)
    } else if idx >= 1 && idx + 1 < n {
        (f(idx + 1) - f(idx - 1)) / (2.0 * h)
    } else if idx == 0 {
        (-3.0 * f(0) + 4.0 * f(1) - f(2)) / (2.0 * h)
    } else {
        (3.0 * f(n - 1) - 4.0 * f(n - 2) + f(n - 3)) / (2.0 * h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinetic::collision::q_bilinear_at;
    use crate::kinetic::{KineticContext, KineticParams, B0_DEFAULT};
    use proptest::prelude::*;

    fn build_ctx(n: usize, n_eta: usize, v_max: f64, alpha: f64) -> SteadyContext {
        let geom = AnnulusGeometry::new(0.5, alpha).unwrap();
        let sgrid = Arc::new(SpatialGrid::new(n_eta, geom.eta1).unwrap());
        let grid = Arc::new(VelocityGrid::new(n, v_max).unwrap());
        let params = KineticParams {
            gamma: 1.0,
            b0_norm: B0_DEFAULT,
            ell: 8.0,
            m_cut: (v_max - 1.5).max(1.0),
        };
        let kctx = Arc::new(KineticContext::new(grid, params).unwrap());
        let tctx =
            Arc::new(TransportContext::new(geom, sgrid, kctx.clone(), 3).unwrap());
        let lc = Arc::new(LinearCollision::new(kctx, f64::INFINITY).unwrap());
        SteadyContext::new(tctx, lc, 4).unwrap()
    }

    fn test_config(sigma_steps: usize, eps: Vec<f64>) -> SteadyConfig {
        let m = sigma_steps - 1;
        SteadyConfig {
            schedule: ContinuationSchedule {
                sigma_steps: (0..=m).map(|i| i as f64 / m as f64).collect(),
                epsilon_seq: eps,
                inner_tol: 1e-11,
                outer_tol: 1e-9,
                max_inner: 600,
                max_outer: 30,
            },
            quad_stride: 1,
            quad_coarse_angular: false,
            ..SteadyConfig::default()
        }
    }

    fn drive_sources(ctx: &SteadyContext, coefficient: f64) -> PairSources {
        let grid = ctx.grid();
        let n_sp = ctx.sgrid().len();
        let n_v = grid.len();
        let mut s = PairSources::zero(n_sp, n_v);
        for sp in 0..n_sp {
            let sl = s.s1.slice_mut(sp);
            for iv in 0..n_v {
                sl[iv] = coefficient * ctx.vv_mu[iv];
            }
        }
        s
    }

    fn sup(field: &DistField) -> f64 {
        field.data.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
    }

    #[test]
    fn zero_sources_solve_to_zero_at_every_stage() {
        let ctx = build_ctx(8, 6, 4.0, 0.02);
        let cfg = test_config(3, vec![0.1, 0.02]);
        let sources = PairSources::zero(ctx.sgrid().len(), ctx.grid().len());

        let (pair, log) = solve_linear_pair(&ctx, 0.05, 0.7, &sources, &cfg).unwrap();
        assert!(pair.f1.data.iter().all(|&x| x == 0.0));
        assert!(pair.f2.data.iter().all(|&x| x == 0.0));
        assert!(log.iterations <= 2, "zero solve took {} rounds", log.iterations);

        let (pair, logs) =
            continue_sigma(&ctx, 0.05, &sources, &cfg.schedule, &cfg).unwrap();
        assert_eq!(logs.len(), 3);
        assert!(pair.f1.data.iter().all(|&x| x == 0.0));

        let (pair, elog) = limit_epsilon(&ctx, &sources, &cfg.schedule, &cfg).unwrap();
        assert!(pair.f2.data.iter().all(|&x| x == 0.0));
        assert!(elog.mass_removed.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn decoupled_stage_matches_a_direct_two_pass_solve() {
        // At σ = 0 there is no collision feedback: the diffuse channel closes
        // in one sweep, and the damped channel sees only the fresh coupling
        // term. The stage solver must land on the identical two-pass answer.
        let ctx = build_ctx(10, 8, 5.0, 0.03);
        let cfg = test_config(3, vec![0.1, 0.02]);
        let grid = ctx.grid();
        let n_sp = ctx.sgrid().len();
        let n_v = grid.len();
        let mut sources = PairSources::zero(n_sp, n_v);
        for s in 0..n_sp {
            let eta = ctx.sgrid().nodes[s];
            let sl = sources.s2.slice_mut(s);
            for iv in 0..n_v {
                let v = grid.node(iv);
                sl[iv] = grid.mu[iv] * (0.4 + eta) * (1.0 + 0.2 * v[0] - 0.1 * v[1] * v[2]);
            }
        }
        let epsilon = 0.05;
        let (pair, log) = solve_linear_pair(&ctx, epsilon, 0.0, &sources, &cfg).unwrap();
        assert!(log.iterations <= 2);

        let plan = ctx.plan(epsilon).unwrap();
        let (f2d, _) = plan
            .sweep_closed(SourceView::Field(&sources.s2), &sources.s2b, [0.0, 0.0])
            .unwrap();
        let couple = -0.5 * ctx.tctx.geom.alpha / ctx.tctx.geom.eta1;
        let mut src1 = DistField::zeros("s", n_sp, n_v);
        for s in 0..n_sp {
            let f2 = f2d.slice(s);
            let sl = src1.slice_mut(s);
            for iv in 0..n_v {
                sl[iv] = couple * ctx.vv_sqrt_mu[iv] * f2[iv];
            }
        }
        let f1d = plan.sweep(SourceView::Field(&src1), &WallData::zero());

        assert!(sup(&f1d) > 0.0, "coupling must produce a nonzero damped channel");
        let scale = sup(&f1d).max(sup(&f2d));
        for (a, b) in pair.f1.data.iter().zip(&f1d.data) {
            assert!((a - b).abs() <= 1e-14 * scale, "{a} vs {b}");
        }
        for (a, b) in pair.f2.data.iter().zip(&f2d.data) {
            assert!((a - b).abs() <= 1e-14 * scale, "{a} vs {b}");
        }
    }

    #[test]
    fn penalty_relaxation_is_monotone_and_cauchy() {
        // Smaller ε means less absorption, so the diffuse response to a fixed
        // drive grows; and the solutions must form a Cauchy sequence.
        let ctx = build_ctx(10, 8, 5.0, 0.02);
        let cfg = test_config(3, vec![0.1, 0.02]);
        let sources = drive_sources(&ctx, -1.0 / ctx.tctx.geom.eta1);
        let mut sups = Vec::new();
        let mut pairs = Vec::new();
        for eps in [0.1, 0.01, 0.001] {
            let (pair, _) = solve_linear_pair(&ctx, eps, 1.0, &sources, &cfg).unwrap();
            sups.push(sup(&pair.f2));
            pairs.push(pair);
        }
        assert!(
            sups[0] < sups[1] && sups[1] < sups[2],
            "response must grow as the penalty vanishes: {sups:?}"
        );
        let w = &ctx.tctx.kctx.w_ell;
        let d1 = weighted_sup_diff(&pairs[1], &pairs[0], w);
        let d2 = weighted_sup_diff(&pairs[2], &pairs[1], w);
        assert!(d2 < d1, "differences must shrink: {d1} then {d2}");
    }

    #[test]
    fn sigma_grid_refinement_leaves_the_endpoint_fixed() {
        let ctx = build_ctx(10, 8, 5.0, 0.02);
        let mut cfg = test_config(3, vec![0.05]);
        cfg.schedule.inner_tol = 1e-9;
        let sources = drive_sources(&ctx, -1.0 / ctx.tctx.geom.eta1);
        let coarse = ContinuationSchedule {
            sigma_steps: (0..=4).map(|i| i as f64 / 4.0).collect(),
            ..cfg.schedule.clone()
        };
        let fine = ContinuationSchedule {
            sigma_steps: (0..=19).map(|i| i as f64 / 19.0).collect(),
            ..cfg.schedule.clone()
        };
        let (a, logs_a) = continue_sigma(&ctx, 0.05, &sources, &coarse, &cfg).unwrap();
        let (b, logs_b) = continue_sigma(&ctx, 0.05, &sources, &fine, &cfg).unwrap();
        assert_eq!(logs_a.len(), 5);
        assert_eq!(logs_b.len(), 20);
        let d = weighted_sup_diff(&a, &b, &ctx.tctx.kctx.w_ell);
        assert!(
            d <= 10.0 * cfg.schedule.inner_tol,
            "endpoints differ by {d} (tol {})",
            10.0 * cfg.schedule.inner_tol
        );
    }

    #[test]
    fn physical_drive_excites_the_swirl_moment() {
        // The drive −(1/η₁)v_η v_φ μ is odd in v_φ: the azimuthal bulk
        // velocity b₂ must dominate, the axial moment vanishes by the exact
        // v_z mirror symmetry, and the even moments are small.
        let ctx = build_ctx(10, 8, 5.0, 0.02);
        let cfg = test_config(3, vec![0.01]);
        let sources = drive_sources(&ctx, -1.0 / ctx.tctx.geom.eta1);
        let (pair, _) =
            continue_sigma(&ctx, 0.01, &sources, &cfg.schedule, &cfg).unwrap();
        let moments = solution_moments(ctx.grid(), &pair).unwrap();
        let sg = ctx.sgrid();
        let norm = |v: &[f64]| -> f64 {
            v.iter()
                .zip(&sg.w)
                .zip(&sg.nodes)
                .map(|((&x, &w), &e)| w * (1.0 - e) * x * x)
                .sum::<f64>()
                .sqrt()
        };
        let nb2 = norm(&moments.b2);
        assert!(nb2 > 1e-4, "swirl response missing: {nb2}");
        assert!(norm(&moments.b3) <= 1e-10 * nb2, "axial moment must vanish");
        assert!(norm(&moments.b1) <= 0.1 * nb2, "radial moment too large");
        assert!(norm(&moments.a) <= 0.5 * nb2, "density moment too large");
        assert!(norm(&moments.c) <= 0.5 * nb2, "temperature moment too large");
    }

    #[test]
    fn vanishing_penalty_contracts_and_stays_mass_free() {
        let ctx = build_ctx(10, 8, 5.0, 0.02);
        let cfg = test_config(3, vec![0.1, 0.02, 0.004]);
        let sources = drive_sources(&ctx, -1.0 / ctx.tctx.geom.eta1);
        let (pair, elog) = limit_epsilon(&ctx, &sources, &cfg.schedule, &cfg).unwrap();
        let m = fluctuation_mass(ctx.sgrid(), ctx.grid(), &pair);
        assert!(m.abs() <= 1e-12, "projected mass must vanish, got {m}");
        assert_eq!(elog.cauchy.len(), 2);
        assert!(
            elog.cauchy[1] < elog.cauchy[0],
            "penalty differences must contract: {:?}",
            elog.cauchy
        );
        assert_eq!(elog.mass_removed.len(), 3);
        for &r in &elog.mass_removed {
            assert!(r.is_finite());
        }
    }

    #[test]
    fn incompatible_sources_are_rejected() {
        let ctx = build_ctx(8, 6, 4.0, 0.02);
        let cfg = test_config(3, vec![0.1, 0.02]);
        let grid = ctx.grid();
        let mut sources = PairSources::zero(ctx.sgrid().len(), grid.len());
        for s in 0..sources.s1.n_sp {
            sources.s1.slice_mut(s).copy_from_slice(&grid.mu);
        }
        let err = limit_epsilon(&ctx, &sources, &cfg.schedule, &cfg)
            .err()
            .expect("mass-carrying sources must be rejected");
        let msg = err.to_string();
        assert!(msg.contains("mass"), "unexpected error: {msg}");
    }

    #[test]
    fn warm_and_literal_schedules_agree() {
        // The default ladder bootstraps σ only once and warm-starts the rest;
        // the literal mode replays the full σ chain at every ε. Both must
        // land on the same fixed point — the uniqueness surrogate.
        let ctx = build_ctx(8, 6, 4.0, 0.02);
        let mut cfg = test_config(3, vec![0.1, 0.02]);
        cfg.schedule.inner_tol = 1e-10;
        let sources = drive_sources(&ctx, -1.0 / ctx.tctx.geom.eta1);
        let (fast, _) = limit_epsilon(&ctx, &sources, &cfg.schedule, &cfg).unwrap();
        let mut literal_cfg = cfg.clone();
        literal_cfg.full_schedule_every_step = true;
        let (literal, _) =
            limit_epsilon(&ctx, &sources, &literal_cfg.schedule, &literal_cfg).unwrap();
        let d = weighted_sup_diff(&fast, &literal, &ctx.tctx.kctx.w_ell);
        assert!(
            d <= 10.0 * cfg.schedule.inner_tol,
            "schedules disagree by {d}"
        );
    }

    #[test]
    fn equilibrium_without_shear_is_exact() {
        let ctx = build_ctx(8, 6, 4.0, 0.0);
        let cfg = test_config(3, vec![0.1, 0.02]);
        let (profile, report) = solve_nonlinear(&ctx, 0.0, &cfg).unwrap();
        assert!(profile.g1.data.iter().all(|&x| x == 0.0));
        assert!(profile.g2.data.iter().all(|&x| x == 0.0));
        assert_eq!(profile.m_tilde, 1.0);
        let grid = ctx.grid();
        for s in 0..profile.g_st.n_sp {
            let st = profile.g_st.slice(s);
            let lab = profile.f_lab.slice(s);
            for iv in 0..grid.len() {
                assert_eq!(st[iv], grid.mu[iv]);
                assert_eq!(lab[iv], st[iv]);
            }
        }
        assert_eq!(report.zero_mass, 0.0);
        assert_eq!(report.outer_iterations, 1);
    }

    #[test]
    fn contraction_factor_scales_linearly_with_shear() {
        // The outer loop re-linearizes a quadratic term: its contraction
        // ratio is proportional to the solution amplitude, hence to α.
        let mut cfg = test_config(3, vec![0.05, 0.01]);
        cfg.extrapolate_outer = false;
        cfg.schedule.outer_tol = 1e-10;
        let mut ratios = Vec::new();
        for alpha in [0.02, 0.01] {
            let ctx = build_ctx(8, 6, 4.0, alpha);
            let (_, report) = solve_nonlinear(&ctx, alpha, &cfg).unwrap();
            assert!(
                !report.contraction_ratios.is_empty(),
                "no measurable contraction at alpha={alpha}"
            );
            ratios.push(report.contraction_ratios[0]);
        }
        let scaling = ratios[0] / ratios[1];
        assert!(
            (1.4..=2.9).contains(&scaling),
            "halving the shear must roughly halve the contraction: {ratios:?}"
        );
        assert!(ratios[0] < 0.6, "contraction too weak: {ratios:?}");
    }

    #[test]
    fn doubling_the_shear_doubles_the_response_to_first_order() {
        let cfg = test_config(3, vec![0.05, 0.01]);
        let solve = |alpha: f64| {
            let ctx = build_ctx(8, 6, 4.0, alpha);
            solve_nonlinear(&ctx, alpha, &cfg).unwrap().0
        };
        let g2a = solve(0.01);
        let ga = solve(0.005);
        let mut dev = 0.0f64;
        let mut scale = 0.0f64;
        for (x, y) in g2a.g.data.iter().zip(&ga.g.data) {
            dev = dev.max((x - 2.0 * y).abs());
            scale = scale.max(y.abs());
        }
        let rel = dev / scale;
        assert!(rel <= 0.25, "second-order deviation too large: {rel}");
    }

    #[test]
    fn assembled_profile_is_mass_exact_and_shifts_the_wall_frame() {
        let alpha = 0.02;
        let geom = AnnulusGeometry::new(0.5, alpha).unwrap();
        let sgrid = SpatialGrid::new(6, geom.eta1).unwrap();
        let grid = VelocityGrid::new(12, 6.0).unwrap();
        let n_sp = sgrid.len();
        let n_v = grid.len();
        let zero = DistField::zeros("z", n_sp, n_v);
        let profile = assemble_profile(
            &sgrid,
            &grid,
            &geom,
            zero.clone(),
            zero.clone(),
            alpha,
            None,
        )
        .unwrap();
        assert_eq!(profile.m_tilde, 1.0);
        let m_ref = total_mass(&sgrid, &grid, &profile.g_st);
        let mu_mass = {
            let eta_w: f64 = sgrid
                .w
                .iter()
                .zip(&sgrid.nodes)
                .map(|(&w, &x)| w * (1.0 - x))
                .sum();
            std::f64::consts::TAU * eta_w * grid.mass_of_mu()
        };
        assert!((m_ref - mu_mass).abs() <= 1e-12 * mu_mass);
        // The observer-frame mass agrees through the interpolation.
        let m_lab = total_mass(&sgrid, &grid, &profile.f_lab);
        assert!((m_lab - mu_mass).abs() <= 1e-8 * mu_mass);
        // At the rotating wall the observer sees μ with v_φ shifted by α...
        let lab0 = profile.f_lab.slice(0);
        let mut worst = 0.0f64;
        for iv in 0..n_v {
            let v = grid.node(iv);
            if v[1].abs() > grid.v_max - grid.h {
                continue; // clamped edge cells
            }
            let exact = crate::grid::maxwellian(v[0], v[1] + alpha, v[2]);
            worst = worst.max((lab0[iv] - exact).abs());
        }
        assert!(worst <= 5e-4, "wall-frame shift error {worst}");
        // ...and at the resting wall the shift is zero, bitwise.
        let last = profile.f_lab.slice(n_sp - 1);
        let st_last = profile.g_st.slice(n_sp - 1);
        assert_eq!(last, st_last);
        // A doubled target mass doubles the normalization.
        let profile2 = assemble_profile(
            &sgrid,
            &grid,
            &geom,
            zero.clone(),
            zero,
            alpha,
            Some(2.0 * mu_mass),
        )
        .unwrap();
        assert!((profile2.m_tilde - 2.0).abs() <= 1e-14);
        let m2 = total_mass(&sgrid, &grid, &profile2.g_st);
        assert!((m2 - 2.0 * mu_mass).abs() <= 1e-12 * mu_mass);
    }

    #[test]
    fn quadratic_sampler_matches_direct_evaluation() {
        // stride 1 must reproduce the direct bilinear evaluation exactly
        // (the lower v_z half comes from the mirror, which is bitwise);
        // stride 2 must stay close on a smooth field.
        let grid = VelocityGrid::new(8, 4.0).unwrap();
        let n_v = grid.len();
        let u_data: Vec<f64> = (0..n_v)
            .map(|iv| {
                let v = grid.node(iv);
                grid.mu[iv] * (1.0 + 0.3 * v[0] + 0.2 * v[1] * v[0])
            })
            .collect();
        let u = DistField::from_data("u", 1, n_v, u_data.clone());
        let table = AngularTable::from_rule(&grid.angular);
        let all: Vec<u32> = (0..n_v as u32).collect();
        let cuts = QuadCuts { pair_energy_cut: f64::INFINITY, vstar_radius: grid.v_max };
        let (gain, loss) =
            q_bilinear_at(&grid, &table, &u_data, &u_data, 1.0, B0_DEFAULT, cuts, &all);
        let direct: Vec<f64> = gain.iter().zip(&loss).map(|(&g, &l)| g - l).collect();
        let scale = direct.iter().fold(0.0f64, |m, &x| m.max(x.abs()));

        let exact = QuadSampler::new(&grid, 1, false, grid.v_max).unwrap();
        let q1 = exact.quadratic_term(&grid, 1.0, B0_DEFAULT, &u);
        for (a, b) in q1.data.iter().zip(&direct) {
            assert!((a - b).abs() <= 1e-13 * scale, "{a} vs {b}");
        }

        let strided = QuadSampler::new(&grid, 2, false, grid.v_max).unwrap();
        let q2 = strided.quadratic_term(&grid, 1.0, B0_DEFAULT, &u);
        let mut worst = 0.0f64;
        for (a, b) in q2.data.iter().zip(&direct) {
            worst = worst.max((a - b).abs());
        }
        assert!(worst <= 0.25 * scale, "prolongation deviates by {worst} of {scale}");
    }

    #[test]
    fn residual_certificate_flags_perturbations() {
        let alpha = 0.02;
        let ctx = build_ctx(10, 8, 5.0, alpha);
        let cfg = test_config(3, vec![0.05, 0.01]);
        let (profile, _) = solve_nonlinear(&ctx, alpha, &cfg).unwrap();
        let eps_min = *cfg.schedule.epsilon_seq.last().unwrap();
        let base = residual_certificate(&ctx, &profile, eps_min).unwrap();
        assert!(base.weighted_residual.is_finite());
        assert!(!base.eta_nodes.is_empty());

        // A bulk perturbation of the damped channel must show up.
        let mut poked = profile.clone();
        let bump = 1e-3;
        let grid = ctx.grid();
        for s in 0..poked.g1.n_sp {
            let g1 = poked.g1.slice_mut(s);
            let st = poked.g_st.slice_mut(s);
            for iv in 0..grid.len() {
                g1[iv] += bump * grid.mu[iv];
                st[iv] += bump * grid.mu[iv];
            }
        }
        let poked_cert = residual_certificate(&ctx, &poked, eps_min).unwrap();
        assert!(
            poked_cert.weighted_residual >= 3.0 * base.weighted_residual.max(1e-12),
            "certificate must grow under perturbation: {} vs {}",
            poked_cert.weighted_residual,
            base.weighted_residual
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 4, failure_persistence: None, .. ProptestConfig::default() })]
        #[test]
        fn stage_solutions_are_linear_in_the_sources(a in -2.0f64..2.0, b in -2.0f64..2.0) {
            // The whole stage pipeline (sweeps, collision feedback, diffuse
            // closure, mixing) solves a linear system: solutions must
            // superpose.
            let ctx = build_ctx(6, 4, 3.0, 0.02);
            let cfg = test_config(2, vec![0.05]);
            let grid = ctx.grid();
            let n_sp = ctx.sgrid().len();
            let n_v = grid.len();
            let mut sa = PairSources::zero(n_sp, n_v);
            let mut sb = PairSources::zero(n_sp, n_v);
            for s in 0..n_sp {
                let x = sa.s1.slice_mut(s);
                let y = sb.s2.slice_mut(s);
                for iv in 0..n_v {
                    let v = grid.node(iv);
                    x[iv] = grid.mu[iv] * v[0] * (1.0 + 0.5 * v[2] * v[2]);
                    y[iv] = grid.mu[iv] * (0.7 - 0.3 * v[1]);
                }
            }
            let mut sc = PairSources::zero(n_sp, n_v);
            for s in 0..n_sp {
                for iv in 0..n_v {
                    sc.s1.slice_mut(s)[iv] = a * sa.s1.slice(s)[iv];
                    sc.s2.slice_mut(s)[iv] = b * sb.s2.slice(s)[iv];
                }
            }
            let (xa, _) = solve_linear_pair(&ctx, 0.05, 1.0, &sa, &cfg).unwrap();
            let (xb, _) = solve_linear_pair(&ctx, 0.05, 1.0, &sb, &cfg).unwrap();
            let (xc, _) = solve_linear_pair(&ctx, 0.05, 1.0, &sc, &cfg).unwrap();
            let w = &ctx.tctx.kctx.w_ell;
            let mut combo = xa.clone();
            for (dst, (&pa, &pb)) in combo.f1.data.iter_mut().zip(xa.f1.data.iter().zip(&xb.f1.data)) {
                *dst = a * pa + b * pb;
            }
            for (dst, (&pa, &pb)) in combo.f2.data.iter_mut().zip(xa.f2.data.iter().zip(&xb.f2.data)) {
                *dst = a * pa + b * pb;
            }
            let d = weighted_sup_diff(&xc, &combo, w);
            let scale = weighted_sup_pair(&combo, w).max(1.0);
            prop_assert!(d <= 2e-9 * scale, "superposition violated: {} vs scale {}", d, scale);
        }
    }
}
