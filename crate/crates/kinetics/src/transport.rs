//! Backward characteristic sweeps with absorption, and the diffuse wall
//! closure.
//!
//! The inner linear step of every solve in this crate is an attenuated
//! transport inversion: given an absorption rate 𝒜(v), a volume source S and
//! incoming wall data, the swept field is
//!
//! ```text
//!   h(η, v) = ∫₀^{t*} e^{−∫₀^s 𝒜(V(τ)) dτ} S(X(s), V(s)) ds
//!           + e^{−∫₀^{t*} 𝒜} · (incoming value at the entry wall),
//! ```
//!
//! integrated along the exact curved backward characteristic (X, V)(s)
//! through (η, v), which exits the gap at time t* through the outer or inner
//! wall. The solver never time-steps this relation; it evaluates it by
//! quadrature.
//!
//! Characteristic paths depend only on (η, v_η, v_φ) — the axial velocity
//! rides along unchanged — so the geometry is computed once per *orbit*
//! (radial node × velocity plane) and shared by the whole v_z column.
//! Attenuation does depend on v_z through 𝒜(|V|), but only through v_z², so
//! baked weights are shared between mirror partners ±v_z. A [`TransportPlan`]
//! freezes, per orbit and |v_z| class, the product-integration weights of
//! every cell-crossing segment. Applying a plan to a source is then a dense
//! pass with no transcendentals on the hot path, and sweeping is exactly
//! linear in (S, bc), which the diffuse-closure solve exploits.
//!
//! Quadrature design, per segment between consecutive cell crossings:
//!
//! * The radial coordinate is parameterized as X = η₊ − u² (η₊ the orbit's
//!   turning radius, possibly virtual), which removes the inverse-√
//!   singularity of dt = dX/|V_η| at turning points: ds = 2 du / (|V_η|/u),
//!   and |V_η|/u extends analytically through u = 0.
//! * Optical-depth increments Δτ = ∫𝒜 ds are integrated by Gauss–Legendre
//!   in u ([`TransportContext::new`]'s `gauss_per_cell` points per segment).
//! * The source integral uses product integration: S/𝒜 is interpolated
//!   linearly in optical depth between segment endpoints, and the moments
//!   A(Δ) = (Δ−1+e^{−Δ})/Δ, B(Δ) = (1−e^{−Δ}(1+Δ))/Δ of e^{−τ} are applied
//!   exactly. Both weights are nonnegative, so sweeps of nonnegative data
//!   stay nonnegative, and constant-in-orbit S/𝒜 is reproduced exactly —
//!   which makes the global Maxwellian an exact fixed point of the swept
//!   balance on a non-rotating annulus.
//!
//! The collision frequency at off-lattice speeds is taken from a dense radial
//! table built from the lattice quadrature itself, so the swept absorption is
//! consistent with the lattice ν to table-interpolation accuracy (~1e−7).

use std::sync::{Arc, OnceLock};

use crate::error::{KineticsError, Result};
use crate::geometry::{
    classify_region, turning_point, v_eta_sq_at, v_phi_at, AnnulusGeometry, PhasePoint, RegionTag,
};
use crate::grid::{mu_norm, DistField, SpatialGrid, VelocityGrid};
use crate::kinetic::project::{maxwell_half_flux, Wall};
use crate::kinetic::KineticContext;

/// Entries of the radial collision-frequency table.
const NU_TABLE_LEN: usize = 8192;
/// Below this u the leg speed |V_η|/u is replaced by its analytic limit
/// √(2V_φ²/(1−X)) at the turning point.
const TURN_PATCH_U: f64 = 1e-6;
/// Optical depths below this use series forms of the product-integration
/// moments A and B.
const SMALL_DTAU: f64 = 1e-5;
/// Crossings closer than this (in η) to a stop already on the path are
/// merged into it.
const STOP_MERGE_TOL: f64 = 1e-13;

/// Absorption model of a transport sweep.
///
/// The swept rate is 𝒜(V) = ε + ν(|V|) − λ₀, plus, when
/// `use_weighted_absorption` is set, the polynomial-weight commutator
/// (α/η₁) ℓ V_ηV_φ/(1+|V|²) produced by conjugating the streaming operator
/// with w^ℓ = (1+|v|²)^{ℓ/2}, plus an optional additive velocity field
/// (used for shifted/weighted stability runs).
#[derive(Clone)]
pub struct TransportCoeffs {
    /// Penalization constant ε ≥ 0 added to the absorption.
    pub epsilon: f64,
    /// Spectral shift λ₀ subtracted from the absorption.
    pub lambda_shift: f64,
    /// Include the w^ℓ-conjugation term (α/η₁) ℓ v_ηv_φ/(1+|v|²).
    pub use_weighted_absorption: bool,
    /// Wall rotation strength entering the weighted term.
    pub alpha: f64,
    /// Additional absorption sampled on the velocity lattice. Must be
    /// mirror-symmetric in v_z (it is evaluated per |v_z| class).
    pub extra_absorption: Option<Arc<Vec<f64>>>,
}

impl TransportCoeffs {
    /// Plain penalized absorption ε + ν with no weight term and no shift.
    pub fn plain(epsilon: f64) -> Self {
        TransportCoeffs {
            epsilon,
            lambda_shift: 0.0,
            use_weighted_absorption: false,
            alpha: 0.0,
            extra_absorption: None,
        }
    }

    /// Absorption for the weighted (tail-controlling) channel.
    pub fn weighted(epsilon: f64, alpha: f64) -> Self {
        TransportCoeffs {
            epsilon,
            lambda_shift: 0.0,
            use_weighted_absorption: true,
            alpha,
            extra_absorption: None,
        }
    }
}

/// Functional form multiplying the diffuse flux scalar in wall data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiffuseForm {
    /// √μ(v) · c — boundary data for fluctuation fields.
    SqrtMu,
    /// μ(v) · c — boundary data for distribution fields.
    Mu,
}

/// Additional (non-diffuse) incoming data on one wall.
#[derive(Clone)]
pub enum WallExtra {
    None,
    /// Values on the full velocity lattice, interpolated (bilinear in the
    /// (v_η, v_φ) plane, exact in v_z, zero outside the cube) at entry
    /// velocities.
    Slice(Vec<f64>),
    /// Closed-form trace evaluated exactly at entry velocities.
    Analytic(Arc<dyn Fn([f64; 3]) -> f64 + Send + Sync>),
}

/// Incoming data on one wall: a diffuse part proportional to √μ or μ —
/// kept in analytic form so entry states beyond the velocity cube are still
/// evaluated exactly — plus an optional additive remainder.
#[derive(Clone)]
pub struct WallSide {
    /// Coefficient of the diffuse profile.
    pub diffuse: f64,
    /// Profile multiplying `diffuse`.
    pub form: DiffuseForm,
    /// Additive non-diffuse incoming data.
    pub extra: WallExtra,
}

impl WallSide {
    pub fn zero() -> Self {
        WallSide { diffuse: 0.0, form: DiffuseForm::SqrtMu, extra: WallExtra::None }
    }

    pub fn diffuse(c: f64, form: DiffuseForm) -> Self {
        WallSide { diffuse: c, form, extra: WallExtra::None }
    }

    /// Incoming value at one velocity. `q_sq` = v_η² + v_φ², and
    /// `(iw, ww)` is the velocity-plane stencil of (v_η, v_φ) used for
    /// lattice extras at the axial index `k`.
    fn eval(&self, v: [f64; 3], q_sq: f64, iw: &[u32; 4], ww: &[f64; 4], k: usize) -> f64 {
        let speed_sq = q_sq + v[2] * v[2];
        let mut val = match self.form {
            DiffuseForm::SqrtMu => {
                self.diffuse * mu_norm().sqrt() * (-0.25 * speed_sq).exp()
            }
            DiffuseForm::Mu => self.diffuse * mu_norm() * (-0.5 * speed_sq).exp(),
        };
        match &self.extra {
            WallExtra::None => {}
            WallExtra::Slice(sl) => {
                for t in 0..4 {
                    val += ww[t] * sl[iw[t] as usize + k];
                }
            }
            WallExtra::Analytic(f) => val += f(v),
        }
        val
    }

    /// Materialize the incoming values on the full velocity lattice.
    pub fn materialize(&self, grid: &VelocityGrid) -> Vec<f64> {
        let n_v = grid.len();
        let mut out = vec![0.0; n_v];
        for (iv, o) in out.iter_mut().enumerate() {
            let v = grid.node(iv);
            *o = match self.form {
                DiffuseForm::SqrtMu => self.diffuse * grid.sqrt_mu[iv],
                DiffuseForm::Mu => self.diffuse * grid.mu[iv],
            };
            match &self.extra {
                WallExtra::None => {}
                WallExtra::Slice(sl) => *o += sl[iv],
                WallExtra::Analytic(f) => *o += f(v),
            }
        }
        out
    }
}

/// Incoming boundary data for a sweep: one [`WallSide`] per wall, plus the
/// outgoing mass fluxes recorded by the closure that produced the data.
#[derive(Clone)]
pub struct WallData {
    /// Data at the rotating outer wall η = 0 (used where v_η > 0).
    pub outer: WallSide,
    /// Data at the resting inner wall η = η₁ (used where v_η < 0).
    pub inner: WallSide,
    /// Outgoing flux at the outer wall measured by the closure.
    pub flux_outer: f64,
    /// Outgoing flux at the inner wall measured by the closure.
    pub flux_inner: f64,
}

impl WallData {
    pub fn zero() -> Self {
        WallData {
            outer: WallSide::zero(),
            inner: WallSide::zero(),
            flux_outer: 0.0,
            flux_inner: 0.0,
        }
    }

    /// Diffuse data with unit flux coefficient on one wall, zero on the
    /// other (the building block of closure response sweeps).
    pub fn unit_diffuse(wall: Wall, form: DiffuseForm) -> Self {
        let mut bc = WallData::zero();
        match wall {
            Wall::Outer => bc.outer = WallSide::diffuse(1.0, form),
            Wall::Inner => bc.inner = WallSide::diffuse(1.0, form),
        }
        bc
    }

    pub fn side(&self, wall: Wall) -> &WallSide {
        match wall {
            Wall::Outer => &self.outer,
            Wall::Inner => &self.inner,
        }
    }

    /// Check that any lattice extras have the right length and finite values.
    pub fn validate(&self, grid: &VelocityGrid) -> Result<()> {
        for (name, side) in [("outer", &self.outer), ("inner", &self.inner)] {
            if !side.diffuse.is_finite() {
                return Err(KineticsError::InvalidConfig(format!(
                    "{name} wall diffuse coefficient is not finite"
                )));
            }
            if let WallExtra::Slice(sl) = &side.extra {
                if sl.len() != grid.len() {
                    return Err(KineticsError::InvalidConfig(format!(
                        "{name} wall slice has {} entries, lattice has {}",
                        sl.len(),
                        grid.len()
                    )));
                }
                if !sl.iter().all(|x| x.is_finite()) {
                    return Err(KineticsError::InvalidConfig(format!(
                        "{name} wall slice has non-finite entries"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Volume source of a sweep.
#[derive(Clone, Copy)]
pub enum SourceView<'a> {
    /// No source (used by closure response sweeps).
    Zero,
    /// Source sampled on the phase-space grid; evaluated along
    /// characteristics by spatial-linear × velocity-bilinear interpolation
    /// (exact in v_z), zero outside the velocity cube.
    Field(&'a DistField),
    /// Closed-form source S(η, v), evaluated exactly at quadrature stops.
    Analytic(&'a (dyn Fn(f64, [f64; 3]) -> f64 + Sync)),
}

/// Entry wall of a backward characteristic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum EntryKind {
    Outer,
    Inner,
    /// Degenerate axis v_η = v_φ = 0: the characteristic never leaves, and
    /// the steady value is the pointwise balance S/𝒜.
    None,
}

/// One quadrature stop on a backward path: a cell crossing, turning point,
/// node position, or wall hit.
struct Stop {
    /// Turning-substitution coordinate u = √(η₊ − x).
    u: f64,
    /// Radial position.
    x: f64,
    /// Velocity components at the stop (signed; v_η = 0 exactly at turns).
    v_eta: f64,
    v_phi: f64,
    /// v_η² + v_φ².
    q_sq: f64,
    /// Spatial interpolation stencil: value = (1−f)·slice[c] + f·slice[c+1].
    sp_cell: u32,
    sp_frac: f64,
    /// Velocity-plane stencil: four flat bases ((i·n + j)·n) and bilinear
    /// weights, weight 0 (base 0) outside the cube.
    iw: [u32; 4],
    ww: [f64; 4],
}

/// Shared backward-path geometry of one (radial node, velocity plane) orbit.
struct OrbitGeometry {
    eta_plus: f64,
    entry: EntryKind,
    /// Ordered from the node (first) to the entry wall (last).
    stops: Vec<Stop>,
}

/// Grid-level transport state: orbit geometry for every (η, v_η, v_φ)
/// combination and the radial collision-frequency table. Built once per
/// (geometry, grids) and shared by all plans.
pub struct TransportContext {
    pub geom: AnnulusGeometry,
    pub sgrid: Arc<SpatialGrid>,
    pub kctx: Arc<KineticContext>,
    /// Gauss–Legendre points per segment for optical-depth increments.
    pub gauss_per_cell: usize,
    orbits: Vec<OrbitGeometry>,
    /// Cumulative weight-slot offsets per orbit (slots = segments·half·2).
    seg_off: Vec<usize>,
    /// |v_z| class of every axial index.
    kls: Vec<usize>,
    /// |v_z| per class.
    vz_abs: Vec<f64>,
    /// Number of |v_z| classes, (n+1)/2.
    half: usize,
    nu_tbl: Vec<f64>,
    nu_step: f64,
}

/// Bilinear stencil of (x, y) in the velocity plane; weights are zeroed
/// (bases parked at 0) outside the lattice.
fn plane_stencil(grid: &VelocityGrid, x: f64, y: f64) -> ([u32; 4], [f64; 4]) {
    let n = grid.n as isize;
    let lo = grid.coords[0];
    let inv_h = 1.0 / grid.h;
    let tx = (x - lo) * inv_h;
    let ty = (y - lo) * inv_h;
    let fx = tx.floor();
    let fy = ty.floor();
    let ix = fx as isize;
    let iy = fy as isize;
    let rx = tx - fx;
    let ry = ty - fy;
    let mut idx = [0u32; 4];
    let mut wgt = [0.0; 4];
    let mut t = 0;
    for (di, wx) in [(0isize, 1.0 - rx), (1, rx)] {
        for (dj, wy) in [(0isize, 1.0 - ry), (1, ry)] {
            let i = ix + di;
            let j = iy + dj;
            if i >= 0 && i < n && j >= 0 && j < n {
                idx[t] = ((i as u32 * grid.n as u32) + j as u32) * grid.n as u32;
                wgt[t] = wx * wy;
            }
            t += 1;
        }
    }
    (idx, wgt)
}

/// Product-integration moments of e^{−τ} against the linear hat functions on
/// [0, Δ]: A(Δ) = ∫(1−τ/Δ)e^{−τ}, B(Δ) = ∫(τ/Δ)e^{−τ}. Both are nonnegative
/// and A + B = 1 − e^{−Δ}.
fn prod_weights(dtau: f64) -> (f64, f64, f64) {
    if !dtau.is_finite() {
        // Infinite optical depth: only the start value survives, fully
        // equilibrated (the degenerate-axis pointwise balance).
        return (1.0, 0.0, 0.0);
    }
    if dtau < SMALL_DTAU {
        let a = dtau * (0.5 - dtau * (1.0 / 6.0 - dtau / 24.0));
        let b = dtau * (0.5 - dtau * (1.0 / 3.0 - dtau / 8.0));
        return (a, b, (-dtau).exp());
    }
    let e = (-dtau).exp();
    let a = (dtau - 1.0 + e) / dtau;
    let b = (1.0 - e * (1.0 + dtau)) / dtau;
    (a, b, e)
}

impl TransportContext {
    pub fn new(
        geom: AnnulusGeometry,
        sgrid: Arc<SpatialGrid>,
        kctx: Arc<KineticContext>,
        gauss_per_cell: usize,
    ) -> Result<Self> {
        if (sgrid.eta1 - geom.eta1).abs() > 1e-12 {
            return Err(KineticsError::InvalidConfig(format!(
                "radial grid spans {} but the gap width is {}",
                sgrid.eta1, geom.eta1
            )));
        }
        if gauss_per_cell == 0 || gauss_per_cell > 16 {
            return Err(KineticsError::InvalidConfig(format!(
                "segment quadrature needs 1..=16 points per cell, got {gauss_per_cell}"
            )));
        }
        let grid = kctx.grid.clone();
        let n = grid.n;
        let half = (n + 1) / 2;
        let kls: Vec<usize> =
            (0..n).map(|k| (2 * k as isize - (n as isize - 1)).unsigned_abs() / 2).collect();
        let mut vz_abs = vec![0.0; half];
        for k in 0..n {
            vz_abs[kls[k]] = grid.coords[k].abs();
        }

        // Radial collision-frequency table. The speed range covers the whole
        // velocity cube plus the small energy inflation curved characteristics
        // can pick up from the rotating wall.
        let max_speed = grid.v_max * 3f64.sqrt() * (1.0 + geom.alpha) + 1.0;
        let nu_step = max_speed / (NU_TABLE_LEN - 1) as f64;
        let nu_tbl: Vec<f64> =
            (0..NU_TABLE_LEN).map(|i| kctx.nu_at([i as f64 * nu_step, 0.0, 0.0])).collect();

        let n_sp = sgrid.n_cells + 1;
        let mut orbits = Vec::with_capacity(n_sp * n * n);
        for s in 0..n_sp {
            let eta_s = sgrid.nodes[s];
            for i in 0..n {
                for j in 0..n {
                    orbits.push(build_orbit(
                        &geom,
                        &sgrid,
                        &grid,
                        eta_s,
                        grid.coords[i],
                        grid.coords[j],
                    ));
                }
            }
        }
        let mut seg_off = Vec::with_capacity(orbits.len() + 1);
        let mut acc = 0usize;
        for o in &orbits {
            seg_off.push(acc);
            acc += (o.stops.len() - 1) * half * 2;
        }
        seg_off.push(acc);

        Ok(TransportContext {
            geom,
            sgrid,
            kctx,
            gauss_per_cell,
            orbits,
            seg_off,
            kls,
            vz_abs,
            half,
            nu_tbl,
            nu_step,
        })
    }

    /// Collision frequency at an arbitrary speed, linearly interpolated from
    /// the radial table (the definition the sweeps use along characteristics).
    #[inline]
    pub fn nu_speed(&self, speed: f64) -> f64 {
        let t = (speed / self.nu_step).clamp(0.0, (NU_TABLE_LEN - 1) as f64);
        let i = (t as usize).min(NU_TABLE_LEN - 2);
        let f = t - i as f64;
        self.nu_tbl[i] * (1.0 - f) + self.nu_tbl[i + 1] * f
    }

    fn n_orbits(&self) -> usize {
        self.orbits.len()
    }
}

/// Build the backward path of one orbit.
fn build_orbit(
    geom: &AnnulusGeometry,
    sgrid: &SpatialGrid,
    grid: &VelocityGrid,
    eta_s: f64,
    v_eta: f64,
    v_phi: f64,
) -> OrbitGeometry {
    let p = PhasePoint::new(eta_s, v_eta, v_phi, 0.0);
    if v_eta == 0.0 && v_phi == 0.0 {
        // Degenerate axis: the backward characteristic never reaches a wall.
        let node = make_stop(grid, sgrid, p.eta, 0.0, 0.0, 0.0);
        let twin = make_stop(grid, sgrid, p.eta, 0.0, 0.0, 0.0);
        return OrbitGeometry { eta_plus: p.eta, entry: EntryKind::None, stops: vec![node, twin] };
    }

    let eta_plus = turning_point(&p, geom);
    let mut stops: Vec<Stop> = Vec::new();
    let region = classify_region(&p, geom);

    // Walk one monotone leg from x_from to x_to, pushing interior cell
    // crossings (endpoints handled by the caller). `sign` is the radial
    // velocity sign on the leg.
    let push_leg = |stops: &mut Vec<Stop>, x_from: f64, x_to: f64, sign: f64| {
        let de = sgrid.d_eta;
        if x_to < x_from {
            // Descending leg: crossings at node positions below x_from.
            let mut j = ((x_from - STOP_MERGE_TOL) / de).floor() as isize;
            while j > 0 && sgrid.nodes[j as usize] > x_to + STOP_MERGE_TOL {
                let x = sgrid.nodes[j as usize];
                push_path_stop(stops, grid, sgrid, geom, &p, eta_plus, x, sign);
                j -= 1;
            }
        } else {
            let mut j = ((x_from + STOP_MERGE_TOL) / de).ceil() as isize;
            if (j as f64) * de < x_from + STOP_MERGE_TOL {
                j += 1;
            }
            while (j as usize) < sgrid.nodes.len()
                && sgrid.nodes[j as usize] < x_to - STOP_MERGE_TOL
            {
                let x = sgrid.nodes[j as usize];
                push_path_stop(stops, grid, sgrid, geom, &p, eta_plus, x, sign);
                j += 1;
            }
        }
    };

    // The node itself is always the first stop, with exact lattice values.
    stops.push(make_stop(grid, sgrid, eta_s, eta_plus, v_eta, v_phi));

    let entry = match region {
        RegionTag::A1 => {
            // v_η ≥ 0: straight backward to the outer wall.
            push_leg(&mut stops, eta_s, 0.0, 1.0);
            if eta_s > STOP_MERGE_TOL {
                push_path_stop(&mut stops, grid, sgrid, geom, &p, eta_plus, 0.0, 1.0);
            }
            EntryKind::Outer
        }
        RegionTag::A2 => {
            // Rise to the turning radius, then fall to the outer wall.
            push_leg(&mut stops, eta_s, eta_plus, -1.0);
            let vp_turn = v_phi_at(&p, eta_plus, geom);
            stops.push(make_stop(grid, sgrid, eta_plus, eta_plus, 0.0, vp_turn));
            push_leg(&mut stops, eta_plus, 0.0, 1.0);
            push_path_stop(&mut stops, grid, sgrid, geom, &p, eta_plus, 0.0, 1.0);
            EntryKind::Outer
        }
        RegionTag::A3 => {
            // v_η < 0 with the turn beyond the gap: backward to the inner wall.
            push_leg(&mut stops, eta_s, geom.eta1, -1.0);
            if eta_s < geom.eta1 - STOP_MERGE_TOL {
                push_path_stop(&mut stops, grid, sgrid, geom, &p, eta_plus, geom.eta1, -1.0);
            }
            EntryKind::Inner
        }
    };

    // Near a turning point the velocity components swing on the scale of the
    // turning coordinate u, not of the radial cells (whose u-width collapses
    // like √Δη there), so two-point product integration across a whole turn
    // cell is under-resolved. Subdivide long-u segments; the cap Δη^{2/3}
    // keeps ordinary cells untouched and adds O(Δη^{−1/6}) stops at turns,
    // which restores better-than-first-order radial convergence.
    let du_max = 0.35 * sgrid.d_eta.powf(2.0 / 3.0);
    let mut refined: Vec<Stop> = Vec::with_capacity(stops.len() + 4);
    for stop in stops {
        if let Some(prev) = refined.last() {
            let du = stop.u - prev.u;
            if du.abs() > du_max {
                let parts = (du.abs() / du_max).ceil() as usize;
                let sign = (prev.v_eta + stop.v_eta).signum();
                let u0 = prev.u;
                for t in 1..parts {
                    let u = u0 + du * t as f64 / parts as f64;
                    let x = (eta_plus - u * u).clamp(0.0, geom.eta1);
                    push_path_stop(&mut refined, grid, sgrid, geom, &p, eta_plus, x, sign);
                }
            }
        }
        refined.push(stop);
    }
    OrbitGeometry { eta_plus, entry, stops: refined }
}

/// Stop at a path position x, with velocities from the closed-form orbit.
fn push_path_stop(
    stops: &mut Vec<Stop>,
    grid: &VelocityGrid,
    sgrid: &SpatialGrid,
    geom: &AnnulusGeometry,
    p: &PhasePoint,
    eta_plus: f64,
    x: f64,
    sign: f64,
) {
    let vp = v_phi_at(p, x, geom);
    let ve = sign * v_eta_sq_at(p, x, geom).max(0.0).sqrt();
    stops.push(make_stop(grid, sgrid, x, eta_plus, ve, vp));
}

fn make_stop(
    grid: &VelocityGrid,
    sgrid: &SpatialGrid,
    x: f64,
    eta_plus: f64,
    v_eta: f64,
    v_phi: f64,
) -> Stop {
    let (sp_cell, sp_frac) = sgrid.linear_stencil(x);
    let (iw, ww) = plane_stencil(grid, v_eta, v_phi);
    Stop {
        u: (eta_plus - x).max(0.0).sqrt(),
        x,
        v_eta,
        v_phi,
        q_sq: v_eta * v_eta + v_phi * v_phi,
        sp_cell: sp_cell as u32,
        sp_frac,
        iw,
        ww,
    }
}

/// Closure response state shared by [`TransportPlan::sweep_closed`] calls:
/// unit-flux response fields and the 2×2 flux-recycling matrix.
struct ClosureResponses {
    r_outer: DistField,
    r_inner: DistField,
    m: [[f64; 2]; 2],
}

/// Baked sweep operator for one absorption model: per orbit, per |v_z|
/// class, the attenuated product-integration weights of every segment and
/// the total attenuation factor multiplying the entry value.
pub struct TransportPlan {
    pub coeffs: TransportCoeffs,
    tctx: Arc<TransportContext>,
    /// (w_near, w_far) per (orbit, segment, |v_z| class); layout
    /// orbit-major, then segment, then class, interleaved pairs.
    seg_w: Vec<f64>,
    /// Entry attenuation e^{−τ_total} per (orbit, |v_z| class).
    e_tot: Vec<f64>,
    responses: OnceLock<ClosureResponses>,
}

impl TransportPlan {
    pub fn new(tctx: Arc<TransportContext>, coeffs: TransportCoeffs) -> Result<Self> {
        let kctx = &tctx.kctx;
        let grid = &kctx.grid;
        let n_v = grid.len();
        if let Some(extra) = &coeffs.extra_absorption {
            if extra.len() != n_v {
                return Err(KineticsError::InvalidConfig(format!(
                    "extra absorption has {} entries, lattice has {}",
                    extra.len(),
                    n_v
                )));
            }
            let n = grid.n;
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        let iv = (i * n + j) * n + k;
                        let im = (i * n + j) * n + (n - 1 - k);
                        if extra[iv] != extra[im] {
                            return Err(KineticsError::InvalidConfig(
                                "extra absorption must be mirror-symmetric in v_z".into(),
                            ));
                        }
                    }
                }
            }
        }

        // Grid invariant: the effective absorption must stay uniformly
        // positive (a quarter of the minimal collision frequency) at every
        // lattice node.
        let wcoef = if coeffs.use_weighted_absorption {
            coeffs.alpha / tctx.geom.eta1 * kctx.params.ell
        } else {
            0.0
        };
        let mut a_min = f64::INFINITY;
        for iv in 0..n_v {
            let v = grid.node(iv);
            let speed_sq = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
            let mut a = coeffs.epsilon + kctx.nu[iv] - coeffs.lambda_shift
                + wcoef * v[0] * v[1] / (1.0 + speed_sq);
            if let Some(extra) = &coeffs.extra_absorption {
                a += extra[iv];
            }
            a_min = a_min.min(a);
        }
        let floor = 0.25 * kctx.nu0;
        if !(a_min >= floor) {
            return Err(KineticsError::InvalidConfig(format!(
                "effective absorption dips to {a_min:.6e}, below the floor {floor:.6e}; \
                 reduce the spectral shift or the weight strength"
            )));
        }

        let half = tctx.half;
        let mut plan = TransportPlan {
            seg_w: vec![0.0; *tctx.seg_off.last().unwrap()],
            e_tot: vec![0.0; tctx.n_orbits() * half],
            coeffs,
            tctx: tctx.clone(),
            responses: OnceLock::new(),
        };
        plan.bake(wcoef)?;
        Ok(plan)
    }

    pub fn context(&self) -> &Arc<TransportContext> {
        &self.tctx
    }

    /// Bake attenuation weights for every orbit and |v_z| class.
    fn bake(&mut self, wcoef: f64) -> Result<()> {
        let ctx = &self.tctx;
        let grid = &ctx.kctx.grid;
        let half = ctx.half;
        let base_abs = self.coeffs.epsilon - self.coeffs.lambda_shift;
        let extra = self.coeffs.extra_absorption.as_deref();
        let (gx, gw) = numref::gauss_legendre(ctx.gauss_per_cell);

        // Scratch reused across orbits.
        let mut a_st: Vec<f64> = Vec::new();
        let mut dtau = vec![0.0; half];
        let mut atten = vec![0.0; half];

        for (oi, o) in ctx.orbits.iter().enumerate() {
            let m_seg = o.stops.len() - 1;
            let wblock = &mut self.seg_w[ctx.seg_off[oi]..ctx.seg_off[oi + 1]];

            // Absorption at the stops, per class.
            a_st.clear();
            a_st.resize(o.stops.len() * half, 0.0);
            for (si, st) in o.stops.iter().enumerate() {
                let ex = extra.map(|e| stencil_column(e, st, grid.n)).unwrap_or([0.0; MAX_N]);
                for kk in 0..half {
                    let vz = ctx.vz_abs[kk];
                    let s2 = st.q_sq + vz * vz;
                    let mut a = base_abs
                        + ctx.nu_speed(s2.sqrt())
                        + wcoef * st.v_eta * st.v_phi / (1.0 + s2);
                    if extra.is_some() {
                        a += ex[class_rep_k(grid.n, kk)];
                    }
                    if !(a > 0.0) {
                        return Err(KineticsError::Numerics(format!(
                            "absorption {a:.3e} is not positive along a characteristic \
                             (orbit at η={:.4}, stop x={:.4})",
                            o.stops[0].x, st.x
                        )));
                    }
                    a_st[si * half + kk] = a;
                }
            }

            atten[..half].fill(1.0);
            let degenerate = o.entry == EntryKind::None;
            let start =
                PhasePoint::new(o.stops[0].x, o.stops[0].v_eta, o.stops[0].v_phi, 0.0);
            for seg in 0..m_seg {
                let sa = &o.stops[seg];
                let sb = &o.stops[seg + 1];
                if degenerate {
                    for kk in 0..half {
                        let w = &mut wblock[(seg * half + kk) * 2..];
                        w[0] = 1.0 / a_st[seg * half + kk];
                        w[1] = 0.0;
                        atten[kk] = 0.0;
                    }
                    continue;
                }
                let u_lo = sa.u.min(sb.u);
                let u_hi = sa.u.max(sb.u);
                let sign = (sa.v_eta + sb.v_eta).signum();
                dtau[..half].fill(0.0);
                if u_hi > u_lo {
                    let mid = 0.5 * (u_hi + u_lo);
                    let rad = 0.5 * (u_hi - u_lo);
                    for g in 0..gx.len() {
                        let u = mid + rad * gx[g];
                        let x = (o.eta_plus - u * u).clamp(0.0, ctx.geom.eta1);
                        let vp = v_phi_at(&start, x, &ctx.geom);
                        let ve2 = v_eta_sq_at(&start, x, &ctx.geom).max(0.0);
                        // Leg speed |V_η|/u extends smoothly through the turn.
                        let ls = if u < TURN_PATCH_U {
                            (2.0 * vp * vp / (1.0 - x)).sqrt()
                        } else {
                            ve2.sqrt() / u
                        };
                        let jac = 2.0 * rad * gw[g] / ls;
                        let ve = sign * ve2.sqrt();
                        let q2 = ve2 + vp * vp;
                        let wnum = wcoef * ve * vp;
                        let exv = extra.map(|e| {
                            let (iw, ww) = plane_stencil(grid, ve, vp);
                            gather_column(e, &iw, &ww, grid.n)
                        });
                        for kk in 0..half {
                            let vz = ctx.vz_abs[kk];
                            let s2 = q2 + vz * vz;
                            let mut a =
                                base_abs + ctx.nu_speed(s2.sqrt()) + wnum / (1.0 + s2);
                            if let Some(exv) = &exv {
                                a += exv[class_rep_k(grid.n, kk)];
                            }
                            dtau[kk] += jac * a;
                        }
                    }
                }
                for kk in 0..half {
                    let (aw, bw, e) = prod_weights(dtau[kk]);
                    let w = &mut wblock[(seg * half + kk) * 2..];
                    w[0] = atten[kk] * aw / a_st[seg * half + kk];
                    w[1] = atten[kk] * bw / a_st[(seg + 1) * half + kk];
                    atten[kk] *= e;
                }
            }

            let eo = &mut self.e_tot[oi * half..(oi + 1) * half];
            if degenerate {
                eo.fill(0.0);
            } else {
                eo.copy_from_slice(&atten[..half]);
            }
        }
        Ok(())
    }

    /// Sweep a source against incoming wall data.
    pub fn sweep(&self, source: SourceView<'_>, bc: &WallData) -> DistField {
        let ctx = &self.tctx;
        let grid = &ctx.kctx.grid;
        let n = grid.n;
        let n_v = grid.len();
        let n_sp = ctx.sgrid.n_cells + 1;
        if let SourceView::Field(f) = source {
            assert_eq!(f.n_sp, n_sp, "source field radial shape mismatch");
            assert_eq!(f.n_v, n_v, "source field velocity shape mismatch");
        }
        let half = ctx.half;
        let mut out = DistField::zeros("swept", n_sp, n_v);
        let mut sbuf: Vec<f64> = Vec::new();
        let mut bcval = vec![0.0; n];

        for (oi, chunk) in out.data.chunks_mut(n).enumerate() {
            let o = &ctx.orbits[oi];
            let m_seg = o.stops.len() - 1;
            let eo = &self.e_tot[oi * half..(oi + 1) * half];

            // Entry contribution.
            let side = match o.entry {
                EntryKind::Outer => Some(&bc.outer),
                EntryKind::Inner => Some(&bc.inner),
                EntryKind::None => None,
            };
            let mut any_entry = false;
            if let Some(side) = side {
                let es = o.stops.last().unwrap();
                for k in 0..n {
                    let vz = grid.coords[k];
                    let v = [es.v_eta, es.v_phi, vz];
                    let val = side.eval(v, es.q_sq, &es.iw, &es.ww, k);
                    bcval[k] = val;
                    any_entry |= val != 0.0;
                }
            }
            for (k, c) in chunk.iter_mut().enumerate() {
                *c = if any_entry { eo[ctx.kls[k]] * bcval[k] } else { 0.0 };
            }

            if matches!(source, SourceView::Zero) || m_seg == 0 {
                continue;
            }

            // Source values at every stop, all axial indices at once.
            sbuf.clear();
            sbuf.resize(o.stops.len() * n, 0.0);
            match source {
                SourceView::Zero => unreachable!(),
                SourceView::Field(f) => {
                    for (si, st) in o.stops.iter().enumerate() {
                        let row = &mut sbuf[si * n..(si + 1) * n];
                        let s0 = f.slice(st.sp_cell as usize);
                        let s1 = f.slice((st.sp_cell as usize + 1).min(n_sp - 1));
                        let fr = st.sp_frac;
                        for t in 0..4 {
                            let w0 = st.ww[t] * (1.0 - fr);
                            let w1 = st.ww[t] * fr;
                            if w0 == 0.0 && w1 == 0.0 {
                                continue;
                            }
                            let b = st.iw[t] as usize;
                            for (k, r) in row.iter_mut().enumerate() {
                                *r += w0 * s0[b + k] + w1 * s1[b + k];
                            }
                        }
                    }
                }
                SourceView::Analytic(f) => {
                    for (si, st) in o.stops.iter().enumerate() {
                        let row = &mut sbuf[si * n..(si + 1) * n];
                        for (k, r) in row.iter_mut().enumerate() {
                            *r = f(st.x, [st.v_eta, st.v_phi, grid.coords[k]]);
                        }
                    }
                }
            }

            let wblock = &self.seg_w[ctx.seg_off[oi]..ctx.seg_off[oi + 1]];
            for seg in 0..m_seg {
                let wrow = &wblock[seg * half * 2..(seg + 1) * half * 2];
                let sa = &sbuf[seg * n..(seg + 1) * n];
                let sb = &sbuf[(seg + 1) * n..(seg + 2) * n];
                for k in 0..n {
                    let kk = ctx.kls[k];
                    chunk[k] += wrow[kk * 2] * sa[k] + wrow[kk * 2 + 1] * sb[k];
                }
            }
        }
        out
    }

    /// Sweep with the diffuse flux closure solved exactly.
    ///
    /// `extras` carries only non-diffuse incoming data (its diffuse
    /// coefficients are ignored); `j_extra` adds known contributions (e.g.
    /// the coupled trace of another field) to the outgoing flux functionals
    /// at the (outer, inner) walls. Returns the closed field and the solved
    /// diffuse coefficients (c_outer, c_inner), which satisfy
    /// c = J(√μ·field)/c_w + j_extra exactly.
    pub fn sweep_closed(
        &self,
        source: SourceView<'_>,
        extras: &WallData,
        j_extra: [f64; 2],
    ) -> Result<(DistField, [f64; 2])> {
        let grid = &self.tctx.kctx.grid;
        let cw = maxwell_half_flux(grid);
        let base_bc = WallData {
            outer: WallSide { diffuse: 0.0, ..extras.outer.clone() },
            inner: WallSide { diffuse: 0.0, ..extras.inner.clone() },
            flux_outer: 0.0,
            flux_inner: 0.0,
        };
        let base = self.sweep(source, &base_bc);
        let r = self.responses();
        let n_sp = base.n_sp;
        let rhs = [
            j_extra[0] + outgoing_sqrt_mu_flux(grid, base.slice(0), Wall::Outer) / cw,
            j_extra[1] + outgoing_sqrt_mu_flux(grid, base.slice(n_sp - 1), Wall::Inner) / cw,
        ];
        // (I − M) c = rhs, M the flux-recycling matrix of the unit responses.
        let a11 = 1.0 - r.m[0][0];
        let a12 = -r.m[0][1];
        let a21 = -r.m[1][0];
        let a22 = 1.0 - r.m[1][1];
        let det = a11 * a22 - a12 * a21;
        if det.abs() < 1e-12 {
            return Err(KineticsError::Numerics(format!(
                "diffuse closure is singular (recycling determinant {det:.3e})"
            )));
        }
        let c0 = (a22 * rhs[0] - a12 * rhs[1]) / det;
        let c1 = (a11 * rhs[1] - a21 * rhs[0]) / det;
        let mut out = base;
        for (x, (r0, r1)) in
            out.data.iter_mut().zip(r.r_outer.data.iter().zip(r.r_inner.data.iter()))
        {
            *x += c0 * r0 + c1 * r1;
        }
        out.tag = "closed";
        Ok((out, [c0, c1]))
    }

    /// Unit diffuse response fields and their flux-recycling matrix,
    /// computed on first use and reused for the plan's lifetime.
    fn responses(&self) -> &ClosureResponses {
        self.responses.get_or_init(|| {
            let grid = &self.tctx.kctx.grid;
            let cw = maxwell_half_flux(grid);
            let r_outer = self.sweep(
                SourceView::Zero,
                &WallData::unit_diffuse(Wall::Outer, DiffuseForm::SqrtMu),
            );
            let r_inner = self.sweep(
                SourceView::Zero,
                &WallData::unit_diffuse(Wall::Inner, DiffuseForm::SqrtMu),
            );
            let n_sp = r_outer.n_sp;
            let m = [
                [
                    outgoing_sqrt_mu_flux(grid, r_outer.slice(0), Wall::Outer) / cw,
                    outgoing_sqrt_mu_flux(grid, r_inner.slice(0), Wall::Outer) / cw,
                ],
                [
                    outgoing_sqrt_mu_flux(grid, r_outer.slice(n_sp - 1), Wall::Inner) / cw,
                    outgoing_sqrt_mu_flux(grid, r_inner.slice(n_sp - 1), Wall::Inner) / cw,
                ],
            ];
            ClosureResponses { r_outer, r_inner, m }
        })
    }
}

/// Number-of-lattice-points cap for stack scratch in the extra-absorption
/// path (the largest axial count the solver uses).
const MAX_N: usize = 64;

/// Gather a velocity-lattice field along one stencil for all axial indices.
fn gather_column(field: &[f64], iw: &[u32; 4], ww: &[f64; 4], n: usize) -> [f64; MAX_N] {
    let mut out = [0.0; MAX_N];
    for t in 0..4 {
        if ww[t] == 0.0 {
            continue;
        }
        let b = iw[t] as usize;
        for k in 0..n {
            out[k] += ww[t] * field[b + k];
        }
    }
    out
}

fn stencil_column(field: &[f64], st: &Stop, n: usize) -> [f64; MAX_N] {
    gather_column(field, &st.iw, &st.ww, n)
}

/// A lattice axial index whose |v_z| class is `kk` (the positive-side
/// representative).
#[inline]
fn class_rep_k(n: usize, kk: usize) -> usize {
    // Classes count |2k − (n−1)| / 2; the representative sits right of center.
    (n - 1).div_ceil(2) + kk
}

/// The spec-level sweep operation: evaluate the attenuated backward
/// characteristic representation of the stationary transport equation.
pub fn sweep_transport(plan: &TransportPlan, source: SourceView<'_>, bc: &WallData) -> DistField {
    plan.sweep(source, bc)
}

/// Wall traces of the fields entering a diffuse closure.
#[derive(Clone, Copy)]
pub struct WallTraces<'a> {
    /// Velocity slice at the outer wall (radial node 0).
    pub outer: &'a [f64],
    /// Velocity slice at the inner wall (last radial node).
    pub inner: &'a [f64],
}

/// Outgoing mass flux of a trace at one wall: Σ w₃ |v_η| √μ · trace over the
/// outgoing half-lattice (v_η < 0 at the outer wall, v_η > 0 at the inner).
pub fn outgoing_sqrt_mu_flux(grid: &VelocityGrid, trace: &[f64], wall: Wall) -> f64 {
    half_lattice_flux(grid, trace, wall, true)
}

/// Outgoing mass flux of a distribution-form trace (no √μ weight).
pub fn outgoing_plain_flux(grid: &VelocityGrid, trace: &[f64], wall: Wall) -> f64 {
    half_lattice_flux(grid, trace, wall, false)
}

fn half_lattice_flux(grid: &VelocityGrid, trace: &[f64], wall: Wall, with_sqrt_mu: bool) -> f64 {
    let mut j = 0.0;
    for (iv, t) in trace.iter().enumerate() {
        let ve = grid.node(iv)[0];
        let outgoing = match wall {
            Wall::Outer => ve < 0.0,
            Wall::Inner => ve > 0.0,
        };
        if outgoing {
            let w = if with_sqrt_mu { grid.sqrt_mu[iv] } else { 1.0 };
            j += grid.w3[iv] * ve.abs() * w * t;
        }
    }
    j
}

/// Incoming mass flux carried by one wall's incoming data (the return leg of
/// the flux balance; uses √μ-weighting for the fluctuation representation,
/// plain for the distribution representation).
pub fn incoming_flux(grid: &VelocityGrid, side: &WallSide, wall: Wall, with_sqrt_mu: bool) -> f64 {
    let values = side.materialize(grid);
    let mut j = 0.0;
    for (iv, val) in values.iter().enumerate() {
        let ve = grid.node(iv)[0];
        let incoming = match wall {
            Wall::Outer => ve > 0.0,
            Wall::Inner => ve < 0.0,
        };
        if incoming {
            let w = if with_sqrt_mu { grid.sqrt_mu[iv] } else { 1.0 };
            j += grid.w3[iv] * ve.abs() * w * val;
        }
    }
    j
}

/// Build diffuse-reflection wall data from outgoing traces.
///
/// The outgoing flux at each wall is measured by half-lattice quadrature and
/// re-emitted with the wall Maxwellian profile, normalized by the lattice
/// half-flux of μ so that equilibrium traces are reproduced exactly. In the
/// mixed (two-field) closure the non-√μ-weighted field enters the flux
/// integrand directly, scaled by `sigma`, while its own incoming data stay
/// zero — only the √μ-weighted channel receives the diffuse return.
pub fn diffuse_wall_closure(
    grid: &VelocityGrid,
    f1: Option<(WallTraces<'_>, f64)>,
    f2: WallTraces<'_>,
    form: DiffuseForm,
) -> WallData {
    let cw = maxwell_half_flux(grid);
    let mut flux = [0.0; 2];
    for (slot, wall) in [(0, Wall::Outer), (1, Wall::Inner)] {
        let (t2, t1) = match wall {
            Wall::Outer => (f2.outer, f1.map(|(t, s)| (t.outer, s))),
            Wall::Inner => (f2.inner, f1.map(|(t, s)| (t.inner, s))),
        };
        let mut j = match form {
            DiffuseForm::SqrtMu => outgoing_sqrt_mu_flux(grid, t2, wall),
            DiffuseForm::Mu => outgoing_plain_flux(grid, t2, wall),
        };
        if let Some((t1, sigma)) = t1 {
            j += sigma * outgoing_plain_flux(grid, t1, wall);
        }
        flux[slot] = j;
    }
    WallData {
        outer: WallSide::diffuse(flux[0] / cw, form),
        inner: WallSide::diffuse(flux[1] / cw, form),
        flux_outer: flux[0],
        flux_inner: flux[1],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{DistField, SpatialGrid, VelocityGrid};
    use crate::kinetic::{KineticContext, KineticParams, B0_DEFAULT};

    fn kctx(n: usize, v_max: f64) -> Arc<KineticContext> {
        let grid = Arc::new(VelocityGrid::new(n, v_max).unwrap());
        let params = KineticParams {
            gamma: 1.0,
            b0_norm: B0_DEFAULT,
            ell: 8.0,
            m_cut: (v_max - 1.5).max(1.0),
        };
        Arc::new(KineticContext::new(grid, params).unwrap())
    }

    fn tctx(
        n: usize,
        v_max: f64,
        n_cells: usize,
        alpha: f64,
        gauss: usize,
    ) -> Arc<TransportContext> {
        let geom = AnnulusGeometry::new(0.5, alpha).unwrap();
        let sgrid = Arc::new(SpatialGrid::new(n_cells, geom.eta1).unwrap());
        Arc::new(TransportContext::new(geom, sgrid, kctx(n, v_max), gauss).unwrap())
    }

    fn lcg_field(tag: &'static str, n_sp: usize, n_v: usize, scale: f64) -> DistField {
        let mut state = 0x2545f4914f6cdd1du64;
        let mut next = move || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let data = (0..n_sp * n_v).map(|_| scale * next()).collect();
        DistField::from_data(tag, n_sp, n_v, data)
    }

    #[test]
    fn zero_source_and_walls_sweep_to_exact_zero() {
        let ctx = tctx(8, 4.0, 8, 0.02, 4);
        let plan = TransportPlan::new(ctx, TransportCoeffs::plain(0.1)).unwrap();
        let out = plan.sweep(SourceView::Zero, &WallData::zero());
        assert!(out.data.iter().all(|&x| x == 0.0));
        let zero_field = DistField::zeros("S", out.n_sp, out.n_v);
        let out2 = plan.sweep(SourceView::Field(&zero_field), &WallData::zero());
        assert!(out2.data.iter().all(|&x| x == 0.0));
    }

    /// On a non-rotating annulus a radial ray (v_φ = 0) is straight and its
    /// absorption is constant, so the swept value of a constant source has
    /// the closed form (S/𝒜)(1 − e^{−𝒜 d / |v_η|}) with d the distance to
    /// the entry wall. The product-integration weights reproduce it to
    /// rounding.
    #[test]
    fn straight_ray_sweep_matches_the_slab_closed_form() {
        let ctx = tctx(9, 4.0, 10, 0.0, 4);
        let eps = 0.3;
        let s_val = 0.7;
        let plan = TransportPlan::new(ctx.clone(), TransportCoeffs::plain(eps)).unwrap();
        let src = move |_eta: f64, _v: [f64; 3]| s_val;
        let out = plan.sweep(SourceView::Analytic(&src), &WallData::zero());

        let grid = &ctx.kctx.grid;
        let n = grid.n;
        let mid = (n - 1) / 2;
        let mut checked = 0;
        for s in 0..=ctx.sgrid.n_cells {
            let eta = ctx.sgrid.nodes[s];
            for i in 0..n {
                let ve = grid.coords[i];
                if ve == 0.0 {
                    continue;
                }
                for k in 0..n {
                    let vz = grid.coords[k];
                    let iv = (i * n + mid) * n + k;
                    let speed = (ve * ve + vz * vz).sqrt();
                    let a = eps + ctx.nu_speed(speed);
                    let d = if ve > 0.0 { eta } else { ctx.geom.eta1 - eta };
                    let expect = s_val / a * (1.0 - (-a * d / ve.abs()).exp());
                    let got = out.data[s * grid.len() + iv];
                    assert!(
                        (got - expect).abs() <= 1e-12 * expect.abs().max(1e-6),
                        "slab mismatch at η={eta:.3}, v_η={ve:.2}, v_z={vz:.2}: \
                         got {got:.15e}, want {expect:.15e}"
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 500, "too few slab rays checked: {checked}");
    }

    /// With a resting outer wall the particle energy is conserved along the
    /// curved characteristics, so S = 𝒜·√μ with diffuse walls of unit flux
    /// coefficient must reproduce √μ exactly: the source integral and the
    /// entry attenuation recombine to one. This exercises turning points,
    /// both walls, and the diffuse entry evaluation in one closed form.
    #[test]
    fn equilibrium_balance_is_swept_exactly_on_a_non_rotating_annulus() {
        let ctx = tctx(12, 5.0, 8, 0.0, 4);
        let eps = 0.15;
        let plan = TransportPlan::new(ctx.clone(), TransportCoeffs::plain(eps)).unwrap();
        let ctx_for_src = ctx.clone();
        let src = move |_eta: f64, v: [f64; 3]| {
            let s2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
            let a = eps + ctx_for_src.nu_speed(s2.sqrt());
            a * mu_norm().sqrt() * (-0.25 * s2).exp()
        };
        let bc = WallData {
            outer: WallSide::diffuse(1.0, DiffuseForm::SqrtMu),
            inner: WallSide::diffuse(1.0, DiffuseForm::SqrtMu),
            flux_outer: 0.0,
            flux_inner: 0.0,
        };
        let out = plan.sweep(SourceView::Analytic(&src), &bc);

        let grid = &ctx.kctx.grid;
        let mut worst = 0.0f64;
        for s in 0..out.n_sp {
            let sl = out.slice(s);
            for iv in 0..grid.len() {
                let rel = (sl[iv] - grid.sqrt_mu[iv]).abs() / grid.sqrt_mu[iv];
                worst = worst.max(rel);
            }
        }
        assert!(worst <= 1e-12, "equilibrium balance defect {worst:.3e}");
    }

    /// Nonnegative sources and boundary data sweep to nonnegative fields:
    /// every baked weight is a product of nonnegative factors.
    #[test]
    fn nonnegative_data_sweep_to_a_nonnegative_field() {
        let ctx = tctx(8, 4.0, 6, 0.02, 4);
        let n_sp = ctx.sgrid.n_cells + 1;
        let n_v = ctx.kctx.grid.len();
        let plan = TransportPlan::new(ctx, TransportCoeffs::plain(0.05)).unwrap();
        let src = lcg_field("S", n_sp, n_v, 1.0);
        let bc = WallData {
            outer: WallSide::diffuse(0.3, DiffuseForm::SqrtMu),
            inner: WallSide::diffuse(0.1, DiffuseForm::SqrtMu),
            flux_outer: 0.0,
            flux_inner: 0.0,
        };
        let out = plan.sweep(SourceView::Field(&src), &bc);
        assert!(out.data.iter().all(|&x| x >= 0.0));
        assert!(out.data.iter().any(|&x| x > 0.0));
    }

    /// Mirroring the source and walls in v_z mirrors the sweep bitwise: the
    /// path geometry, baked weights, and accumulation order are shared
    /// between mirror partners.
    #[test]
    fn axial_mirror_symmetry_is_bitwise() {
        let ctx = tctx(8, 4.0, 6, 0.02, 4);
        let grid = ctx.kctx.grid.clone();
        let n = grid.n;
        let n_sp = ctx.sgrid.n_cells + 1;
        let plan = TransportPlan::new(ctx, TransportCoeffs::plain(0.08)).unwrap();

        let src = lcg_field("S", n_sp, grid.len(), 1.0);
        let mut mirrored = src.clone();
        for s in 0..n_sp {
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        let iv = (i * n + j) * n + k;
                        let im = (i * n + j) * n + (n - 1 - k);
                        mirrored.data[s * grid.len() + iv] = src.data[s * grid.len() + im];
                    }
                }
            }
        }
        let bc = WallData {
            outer: WallSide::diffuse(0.2, DiffuseForm::SqrtMu),
            inner: WallSide::diffuse(0.4, DiffuseForm::SqrtMu),
            flux_outer: 0.0,
            flux_inner: 0.0,
        };
        let out = plan.sweep(SourceView::Field(&src), &bc);
        let out_m = plan.sweep(SourceView::Field(&mirrored), &bc);
        for s in 0..n_sp {
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        let iv = (i * n + j) * n + k;
                        let im = (i * n + j) * n + (n - 1 - k);
                        assert_eq!(
                            out.data[s * grid.len() + iv].to_bits(),
                            out_m.data[s * grid.len() + im].to_bits(),
                            "mirror asymmetry at s={s}, node ({i},{j},{k})"
                        );
                    }
                }
            }
        }
    }

    /// Manufactured-solution convergence: sweep the analytically computed
    /// source and boundary trace of a smooth reference field and watch the
    /// recovered field converge under radial refinement.
    #[test]
    fn manufactured_solution_converges_under_radial_refinement() {
        let alpha = 0.02;
        let eps = 0.2;
        let geom = AnnulusGeometry::new(0.5, alpha).unwrap();
        let eta1 = geom.eta1;
        let kc = kctx(8, 4.0);

        // Reference field h* = p(η) q(v) √μ(v) and its transport image.
        let p_eta = move |e: f64| 1.0 + 0.6 * e * (eta1 - e) / (eta1 * eta1) + 0.3 * (e / eta1).powi(2);
        let dp_eta = move |e: f64| 0.6 * (eta1 - 2.0 * e) / (eta1 * eta1) + 0.6 * e / (eta1 * eta1);
        let q_v = move |v: [f64; 3]| {
            1.0 + 0.25 * v[0] - 0.15 * v[1] + 0.1 * v[2] + 0.05 * v[0] * v[1]
        };
        let dq_ve = move |v: [f64; 3]| 0.25 + 0.05 * v[1];
        let dq_vp = move |v: [f64; 3]| -0.15 + 0.05 * v[0];
        let sqrt_mu = move |v: [f64; 3]| {
            mu_norm().sqrt() * (-0.25 * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2])).exp()
        };
        let h_star = move |e: f64, v: [f64; 3]| p_eta(e) * q_v(v) * sqrt_mu(v);

        let mut errs = Vec::new();
        let sizes = [4usize, 8, 16];
        for &n_cells in &sizes {
            let sgrid = Arc::new(SpatialGrid::new(n_cells, eta1).unwrap());
            let ctx =
                Arc::new(TransportContext::new(geom, sgrid.clone(), kc.clone(), 4).unwrap());
            let plan =
                TransportPlan::new(ctx.clone(), TransportCoeffs::plain(eps)).unwrap();

            let ctx_for_src = ctx.clone();
            let shear = alpha / eta1;
            let src = move |e: f64, v: [f64; 3]| {
                let sm = sqrt_mu(v);
                let q = q_v(v);
                let speed = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                let a = eps + ctx_for_src.nu_speed(speed);
                let rm = 1.0 - e;
                // Forward streaming derivative of h* along the curved flow:
                // η̇ = v_η, v̇_η = −v_φ²/(1−η), v̇_φ = v_ηv_φ/(1−η) − (α/η₁)v_η.
                let dh_ve = (dq_ve(v) - 0.5 * v[0] * q) * sm * p_eta(e);
                let dh_vp = (dq_vp(v) - 0.5 * v[1] * q) * sm * p_eta(e);
                let stream = v[0] * dp_eta(e) * q * sm - v[1] * v[1] / rm * dh_ve
                    + (v[0] * v[1] / rm - shear * v[0]) * dh_vp;
                a * h_star(e, v) + stream
            };
            let trace_outer = {
                let h = h_star;
                WallExtra::Analytic(Arc::new(move |v: [f64; 3]| h(0.0, v)))
            };
            let trace_inner = {
                let h = h_star;
                WallExtra::Analytic(Arc::new(move |v: [f64; 3]| h(eta1, v)))
            };
            let bc = WallData {
                outer: WallSide { diffuse: 0.0, form: DiffuseForm::SqrtMu, extra: trace_outer },
                inner: WallSide { diffuse: 0.0, form: DiffuseForm::SqrtMu, extra: trace_inner },
                flux_outer: 0.0,
                flux_inner: 0.0,
            };
            let out = plan.sweep(SourceView::Analytic(&src), &bc);

            let grid = &kc.grid;
            let mut err = 0.0f64;
            for s in 0..out.n_sp {
                let sl = out.slice(s);
                for iv in 0..grid.len() {
                    let e = (sl[iv] - h_star(sgrid.nodes[s], grid.node(iv))).abs();
                    err = err.max(e);
                }
            }
            errs.push(err);
        }
        assert!(
            errs[1] < errs[0] && errs[2] < errs[1],
            "manufactured-solution errors do not decrease: {errs:?}"
        );
        let order = (errs[0] / errs[2]).ln() / 4f64.ln();
        assert!(
            order >= 0.9,
            "manufactured-solution order {order:.2} below 0.9 (errors {errs:?})"
        );
    }

    /// The diffuse closure re-emits exactly the measured outgoing flux, so
    /// the net wall mass flux of the closed pair vanishes; an equilibrium
    /// trace is reproduced identically in distribution form.
    #[test]
    fn diffuse_closure_balances_mass_and_fixes_the_wall_maxwellian() {
        let kc = kctx(10, 4.5);
        let grid = &kc.grid;
        let n_v = grid.len();

        // Equilibrium distribution trace: unit coefficient, exact values.
        let mu_trace: Vec<f64> = grid.mu.clone();
        let wd = diffuse_wall_closure(
            grid,
            None,
            WallTraces { outer: &mu_trace, inner: &mu_trace },
            DiffuseForm::Mu,
        );
        assert!((wd.outer.diffuse - 1.0).abs() <= 1e-14);
        assert!((wd.inner.diffuse - 1.0).abs() <= 1e-14);
        let inc = wd.outer.materialize(grid);
        for iv in 0..n_v {
            assert!((inc[iv] - grid.mu[iv]).abs() <= 1e-15 * grid.mu[iv].max(1e-300));
        }

        // Random fluctuation traces: outgoing and re-emitted fluxes agree.
        let f2 = lcg_field("t", 2, n_v, 1.0);
        let traces = WallTraces { outer: f2.slice(0), inner: f2.slice(1) };
        let wd = diffuse_wall_closure(grid, None, traces, DiffuseForm::SqrtMu);
        for (side, wall, j_meas) in [
            (&wd.outer, Wall::Outer, wd.flux_outer),
            (&wd.inner, Wall::Inner, wd.flux_inner),
        ] {
            let j_in = incoming_flux(grid, side, wall, true);
            assert!(
                (j_in - j_meas).abs() <= 1e-10 * j_meas.abs().max(1.0),
                "wall flux imbalance: re-emitted {j_in:.15e} vs outgoing {j_meas:.15e}"
            );
        }

        // Mixed closure: the plain-weighted channel adds σ times its flux.
        let f1 = lcg_field("u", 2, n_v, 0.5);
        let sigma = 0.7;
        let wd_mixed = diffuse_wall_closure(
            grid,
            Some((WallTraces { outer: f1.slice(0), inner: f1.slice(1) }, sigma)),
            traces,
            DiffuseForm::SqrtMu,
        );
        let expect =
            wd.flux_outer + sigma * outgoing_plain_flux(grid, f1.slice(0), Wall::Outer);
        assert!((wd_mixed.flux_outer - expect).abs() <= 1e-13 * expect.abs().max(1.0));
    }

    /// The exact affine closure solve agrees with re-sweeping the solved
    /// diffuse coefficients, and the solved coefficients reproduce the flux
    /// functional of the closed field.
    #[test]
    fn closed_sweep_solves_the_diffuse_fixed_point() {
        let ctx = tctx(10, 4.5, 8, 0.02, 4);
        let grid = ctx.kctx.grid.clone();
        let plan = TransportPlan::new(ctx.clone(), TransportCoeffs::plain(0.15)).unwrap();
        let src = move |eta: f64, v: [f64; 3]| {
            let s2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
            (1.0 + 0.5 * eta) * (1.0 + 0.1 * v[0]) * (-0.3 * s2).exp()
        };
        let (out, c) = plan
            .sweep_closed(SourceView::Analytic(&src), &WallData::zero(), [0.0, 0.0])
            .unwrap();

        // Consistency of the affine assembly with a direct sweep.
        let bc = WallData {
            outer: WallSide::diffuse(c[0], DiffuseForm::SqrtMu),
            inner: WallSide::diffuse(c[1], DiffuseForm::SqrtMu),
            flux_outer: 0.0,
            flux_inner: 0.0,
        };
        let direct = plan.sweep(SourceView::Analytic(&src), &bc);
        let scale = out.data.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let mut worst = 0.0f64;
        for (a, b) in out.data.iter().zip(direct.data.iter()) {
            worst = worst.max((a - b).abs());
        }
        assert!(worst <= 1e-12 * scale.max(1.0), "affine reassembly defect {worst:.3e}");

        // Fixed-point property of the solved coefficients.
        let cw = maxwell_half_flux(&grid);
        let j0 = outgoing_sqrt_mu_flux(&grid, out.slice(0), Wall::Outer) / cw;
        let j1 = outgoing_sqrt_mu_flux(&grid, out.slice(out.n_sp - 1), Wall::Inner) / cw;
        assert!((j0 - c[0]).abs() <= 1e-11 * c[0].abs().max(1.0));
        assert!((j1 - c[1]).abs() <= 1e-11 * c[1].abs().max(1.0));
        assert!(c[0] > 0.0 && c[1] > 0.0);
    }

    /// A spectral shift large enough to defeat the collision frequency is
    /// rejected at plan construction.
    #[test]
    fn absorption_floor_violations_are_rejected() {
        let ctx = tctx(8, 4.0, 6, 0.02, 4);
        let mut coeffs = TransportCoeffs::plain(0.1);
        coeffs.lambda_shift = 10.0;
        match TransportPlan::new(ctx, coeffs) {
            Err(KineticsError::InvalidConfig(msg)) => {
                assert!(msg.contains("absorption"), "unexpected message: {msg}")
            }
            other => panic!("expected an invalid-config error, got {:?}", other.is_ok()),
        }
    }
}
