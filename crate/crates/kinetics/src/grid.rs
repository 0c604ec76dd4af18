//! Velocity-space lattice with quadrature weights, the unit-sphere collision
//! quadrature rule, and the 1-D radial grid.

use crate::error::{KineticsError, Result};

/// 2π.
pub const TAU: f64 = std::f64::consts::TAU;

/// Normalization constant (2π)^{-3/2} of the unit Maxwellian.
#[inline]
pub fn mu_norm() -> f64 {
    1.0 / (TAU * TAU.sqrt())
}

/// Unit Maxwellian μ(v) = (2π)^{-3/2} exp(-|v|²/2).
#[inline]
pub fn maxwellian(vx: f64, vy: f64, vz: f64) -> f64 {
    mu_norm() * (-0.5 * (vx * vx + vy * vy + vz * vz)).exp()
}

/// Polynomial velocity weight (1+|v|²)^{ℓ/2} evaluated from |v|².
#[inline]
pub fn poly_weight(v_sq: f64, ell: f64) -> f64 {
    (1.0 + v_sq).powf(0.5 * ell)
}

/// Quadrature rule on the unit sphere for the collision integral.
///
/// Nodes are stored as (cosθ, azimuth) pairs relative to the collision axis
/// (the unit vector along v−v*). Weights are plain surface weights — they sum
/// to 4π and the |cosθ| kernel factor is applied by the caller — chosen so
/// that both ∫ dω and ∫ |cosθ| dω are integrated exactly.
#[derive(Clone, Debug)]
pub struct AngularRule {
    pub cos_theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub weight: Vec<f64>,
}

impl AngularRule {
    /// Production rule: 2-node Gauss-Legendre in cosθ per hemisphere crossed
    /// with 4 midpoint azimuths (16 nodes).
    pub fn standard() -> Self {
        let (x, w) = numref::gauss_legendre(2);
        // Map from [-1,1] to [0,1].
        let s: Vec<f64> = x.iter().map(|&t| 0.5 * (t + 1.0)).collect();
        let ws: Vec<f64> = w.iter().map(|&t| 0.5 * t).collect();
        Self::build(&s, &ws, 4)
    }

    /// Coarse rule for quadratic remainder terms: one cosθ node per
    /// hemisphere placed at the |cosθ| first moment, 2 azimuths (4 nodes).
    pub fn coarse() -> Self {
        Self::build(&[0.5], &[1.0], 2)
    }

    /// Tensorize hemisphere cosθ nodes (on (0,1), weights for ∫₀¹ ds) with
    /// midpoint azimuths, mirroring to the lower hemisphere.
    fn build(s_nodes: &[f64], s_weights: &[f64], n_azimuth: usize) -> Self {
        let mut cos_theta = Vec::new();
        let mut phi = Vec::new();
        let mut weight = Vec::new();
        let dphi = TAU / n_azimuth as f64;
        for (&s, &ws) in s_nodes.iter().zip(s_weights) {
            for sign in [1.0, -1.0] {
                for j in 0..n_azimuth {
                    cos_theta.push(sign * s);
                    phi.push((j as f64 + 0.5) * dphi);
                    weight.push(ws * dphi);
                }
            }
        }
        AngularRule { cos_theta, phi, weight }
    }

    pub fn len(&self) -> usize {
        self.weight.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weight.is_empty()
    }

    /// Σ weights — equals 4π for any rule built here.
    pub fn total_weight(&self) -> f64 {
        self.weight.iter().sum()
    }
}

/// Uniform tensor velocity lattice on [-v_max, v_max]³ with uniform cell
/// quadrature weights, cached Maxwellian values, and the angular rules.
///
/// Every node carries the full cell width h, including the boundary nodes:
/// the lattice samples a rapidly decaying integrand truncated from all of
/// velocity space, and giving boundary nodes their whole cell keeps the
/// Maxwellian mass exact to ~1e−9 at the default truncation (halving the
/// endpoint weights as on a finite interval loses an O(h·μ(v_max)) strip).
///
/// Flat index convention: iv = (i·n + j)·n + k where i, j, k index the
/// v_η, v_φ, v_z axes respectively (v_z fastest).
#[derive(Clone, Debug)]
pub struct VelocityGrid {
    pub n: usize,
    pub v_max: f64,
    pub h: f64,
    /// 1-D node coordinates, strictly increasing, exactly mirror-symmetric.
    pub coords: Vec<f64>,
    /// 1-D quadrature weights (h at every node).
    pub w1: Vec<f64>,
    /// Tensor quadrature weights, length n³.
    pub w3: Vec<f64>,
    /// μ at the nodes, length n³.
    pub mu: Vec<f64>,
    /// √μ at the nodes, length n³.
    pub sqrt_mu: Vec<f64>,
    pub angular: AngularRule,
    pub angular_coarse: AngularRule,
}

impl VelocityGrid {
    pub fn new(n: usize, v_max: f64) -> Result<Self> {
        if n < 2 {
            return Err(KineticsError::InvalidConfig(format!(
                "velocity grid needs at least 2 nodes per axis, got {n}"
            )));
        }
        if !(v_max > 0.0) {
            return Err(KineticsError::InvalidConfig(format!(
                "velocity truncation radius must be positive, got {v_max}"
            )));
        }
        let denom = (n - 1) as f64;
        let h = 2.0 * v_max / denom;
        // Node i sits at (2i − (n−1))·v_max/(n−1); the integer prefactor makes
        // the lattice exactly mirror-symmetric in floating point (odd n puts a
        // node exactly at 0).
        let coords: Vec<f64> = (0..n)
            .map(|i| (2 * i as i64 - (n as i64 - 1)) as f64 * (v_max / denom))
            .collect();
        let w1 = vec![h; n];

        let n_v = n * n * n;
        let mut w3 = vec![0.0; n_v];
        let mut mu = vec![0.0; n_v];
        let mut sqrt_mu = vec![0.0; n_v];
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let iv = (i * n + j) * n + k;
                    w3[iv] = w1[i] * w1[j] * w1[k];
                    mu[iv] = maxwellian(coords[i], coords[j], coords[k]);
                    sqrt_mu[iv] = mu[iv].sqrt();
                }
            }
        }
        Ok(VelocityGrid {
            n,
            v_max,
            h,
            coords,
            w1,
            w3,
            mu,
            sqrt_mu,
            angular: AngularRule::standard(),
            angular_coarse: AngularRule::coarse(),
        })
    }

    /// Total node count n³.
    #[inline]
    pub fn len(&self) -> usize {
        self.n * self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.n + j) * self.n + k
    }

    #[inline]
    pub fn decompose(&self, iv: usize) -> (usize, usize, usize) {
        let k = iv % self.n;
        let rest = iv / self.n;
        (rest / self.n, rest % self.n, k)
    }

    #[inline]
    pub fn node(&self, iv: usize) -> [f64; 3] {
        let (i, j, k) = self.decompose(iv);
        [self.coords[i], self.coords[j], self.coords[k]]
    }

    /// Grid quadrature mass Σ w μ (≈ 1 for resolving grids).
    pub fn mass_of_mu(&self) -> f64 {
        self.w3.iter().zip(&self.mu).map(|(w, m)| w * m).sum()
    }

    /// Locate a coordinate inside the closed box; returns the base node index
    /// (≤ n−2) and the fractional offset in [0, 1].
    #[inline]
    fn locate_axis(&self, x: f64) -> (usize, f64) {
        let t = (x - self.coords[0]) / self.h;
        let mut i = t.floor() as isize;
        if i < 0 {
            i = 0;
        }
        if i > self.n as isize - 2 {
            i = self.n as isize - 2;
        }
        let i = i as usize;
        let f = ((x - self.coords[i]) / self.h).clamp(0.0, 1.0);
        (i, f)
    }

    /// Trilinear interpolation stencil at an arbitrary velocity with zero
    /// extension: None when the point lies outside the closed lattice box.
    #[inline]
    pub fn trilinear_zero(&self, v: &[f64; 3]) -> Option<([u32; 8], [f64; 8])> {
        let vm = self.v_max;
        if !(v[0] >= -vm && v[0] <= vm && v[1] >= -vm && v[1] <= vm && v[2] >= -vm && v[2] <= vm) {
            return None;
        }
        Some(self.trilinear_inside(v))
    }

    /// Trilinear interpolation stencil with nearest-face clamping: points
    /// outside the box are first projected onto it.
    #[inline]
    pub fn trilinear_clamped(&self, v: &[f64; 3]) -> ([u32; 8], [f64; 8]) {
        let vm = self.v_max;
        let c = [v[0].clamp(-vm, vm), v[1].clamp(-vm, vm), v[2].clamp(-vm, vm)];
        self.trilinear_inside(&c)
    }

    #[inline]
    fn trilinear_inside(&self, v: &[f64; 3]) -> ([u32; 8], [f64; 8]) {
        let (i, fi) = self.locate_axis(v[0]);
        let (j, fj) = self.locate_axis(v[1]);
        let (k, fk) = self.locate_axis(v[2]);
        let n = self.n;
        let base = (i * n + j) * n + k;
        let sj = n;
        let si = n * n;
        let idx = [
            base as u32,
            (base + 1) as u32,
            (base + sj) as u32,
            (base + sj + 1) as u32,
            (base + si) as u32,
            (base + si + 1) as u32,
            (base + si + sj) as u32,
            (base + si + sj + 1) as u32,
        ];
        let (gi, gj, gk) = (1.0 - fi, 1.0 - fj, 1.0 - fk);
        let wts = [
            gi * gj * gk,
            gi * gj * fk,
            gi * fj * gk,
            gi * fj * fk,
            fi * gj * gk,
            fi * gj * fk,
            fi * fj * gk,
            fi * fj * fk,
        ];
        (idx, wts)
    }

    /// Evaluate a nodal field at an arbitrary velocity, zero outside the box.
    #[inline]
    pub fn eval_zero(&self, f: &[f64], v: &[f64; 3]) -> f64 {
        match self.trilinear_zero(v) {
            None => 0.0,
            Some((idx, w)) => idx.iter().zip(&w).map(|(&i, &wi)| w_get(f, i) * wi).sum(),
        }
    }

    /// Evaluate a nodal field at an arbitrary velocity with face clamping.
    #[inline]
    pub fn eval_clamped(&self, f: &[f64], v: &[f64; 3]) -> f64 {
        let (idx, w) = self.trilinear_clamped(v);
        idx.iter().zip(&w).map(|(&i, &wi)| w_get(f, i) * wi).sum()
    }
}

#[inline]
fn w_get(f: &[f64], i: u32) -> f64 {
    f[i as usize]
}

/// Uniform radial lattice on [0, η₁] with n_cells cells (n_cells+1 nodes) and
/// trapezoid weights.
#[derive(Clone, Debug)]
pub struct SpatialGrid {
    pub n_cells: usize,
    pub eta1: f64,
    pub d_eta: f64,
    pub nodes: Vec<f64>,
    pub w: Vec<f64>,
}

impl SpatialGrid {
    pub fn new(n_cells: usize, eta1: f64) -> Result<Self> {
        if n_cells < 2 {
            return Err(KineticsError::InvalidConfig(format!(
                "radial grid needs at least 2 cells, got {n_cells}"
            )));
        }
        if !(eta1 > 0.0 && eta1 < 1.0) {
            return Err(KineticsError::InvalidConfig(format!(
                "gap width must lie in (0,1), got {eta1}"
            )));
        }
        let d_eta = eta1 / n_cells as f64;
        let nodes: Vec<f64> = (0..=n_cells)
            .map(|i| eta1 * i as f64 / n_cells as f64)
            .collect();
        let mut w = vec![d_eta; n_cells + 1];
        w[0] = 0.5 * d_eta;
        w[n_cells] = 0.5 * d_eta;
        Ok(SpatialGrid { n_cells, eta1, d_eta, nodes, w })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n_cells + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Linear interpolation stencil at a radial position (clamped to the gap).
    #[inline]
    pub fn linear_stencil(&self, eta: f64) -> (usize, f64) {
        let t = (eta / self.d_eta).clamp(0.0, self.n_cells as f64);
        let mut i = t.floor() as usize;
        if i >= self.n_cells {
            i = self.n_cells - 1;
        }
        let f = ((eta - self.nodes[i]) / self.d_eta).clamp(0.0, 1.0);
        (i, f)
    }
}

/// A distribution sampled on SpatialGrid × VelocityGrid, spatial-major:
/// flat index = i_sp · n_v + iv.
#[derive(Clone, Debug)]
pub struct DistField {
    /// Which unknown the values represent (e.g. "G", "g1", "f2", "h1").
    pub tag: &'static str,
    pub n_sp: usize,
    pub n_v: usize,
    pub data: Vec<f64>,
}

impl DistField {
    pub fn zeros(tag: &'static str, n_sp: usize, n_v: usize) -> Self {
        DistField { tag, n_sp, n_v, data: vec![0.0; n_sp * n_v] }
    }

    pub fn from_data(tag: &'static str, n_sp: usize, n_v: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n_sp * n_v, "field shape mismatch");
        DistField { tag, n_sp, n_v, data }
    }

    #[inline]
    pub fn slice(&self, i_sp: usize) -> &[f64] {
        &self.data[i_sp * self.n_v..(i_sp + 1) * self.n_v]
    }

    #[inline]
    pub fn slice_mut(&mut self, i_sp: usize) -> &mut [f64] {
        &mut self.data[i_sp * self.n_v..(i_sp + 1) * self.n_v]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn min(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_mirror_symmetry_even_and_odd() {
        for n in [8usize, 9, 24, 33] {
            let g = VelocityGrid::new(n, 6.0).unwrap();
            for i in 0..n / 2 {
                assert_eq!(g.coords[i].to_bits(), (-g.coords[n - 1 - i]).to_bits());
            }
            if n % 2 == 1 {
                assert_eq!(g.coords[n / 2], 0.0);
            }
            assert!((g.coords[n - 1] - 6.0).abs() < 1e-15);
            assert!((g.coords[1] - g.coords[0] - g.h).abs() < 1e-14);
        }
    }

    #[test]
    fn maxwellian_grid_mass_is_one() {
        // Invariant: Σ w μ = 1 within mass tolerance for resolving grids.
        let g = VelocityGrid::new(24, 6.0).unwrap();
        assert!((g.mass_of_mu() - 1.0).abs() < 1e-8, "mass {}", g.mass_of_mu());
        let g32 = VelocityGrid::new(32, 8.0).unwrap();
        assert!((g32.mass_of_mu() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn angular_rules_integrate_one_and_cos() {
        for rule in [AngularRule::standard(), AngularRule::coarse()] {
            // Plain weights integrate 1 over the sphere: 4π.
            assert!((rule.total_weight() - 2.0 * TAU).abs() < 1e-12);
            // And |cosθ| exactly: 2π.
            let m1: f64 = rule
                .cos_theta
                .iter()
                .zip(&rule.weight)
                .map(|(c, w)| w * c.abs())
                .sum();
            assert!((m1 - TAU).abs() < 1e-12);
        }
        assert_eq!(AngularRule::standard().len(), 16);
        assert_eq!(AngularRule::coarse().len(), 4);
    }

    #[test]
    fn trilinear_reproduces_nodal_and_linear_fields() {
        let g = VelocityGrid::new(9, 3.0).unwrap();
        // A globally linear function is reproduced exactly inside the box.
        let f: Vec<f64> = (0..g.len())
            .map(|iv| {
                let v = g.node(iv);
                1.5 + 0.25 * v[0] - 0.5 * v[1] + 0.125 * v[2]
            })
            .collect();
        for probe in [[0.3, -1.2, 2.9], [-2.99, 0.01, -0.7], [0.0, 0.0, 0.0]] {
            let exact = 1.5 + 0.25 * probe[0] - 0.5 * probe[1] + 0.125 * probe[2];
            assert!((g.eval_zero(&f, &probe) - exact).abs() < 1e-12);
            assert!((g.eval_clamped(&f, &probe) - exact).abs() < 1e-12);
        }
        // Zero extension kicks in outside the box; clamping projects instead.
        assert_eq!(g.eval_zero(&f, &[3.01, 0.0, 0.0]), 0.0);
        let clamped = g.eval_clamped(&f, &[3.5, 0.0, 0.0]);
        assert!((clamped - (1.5 + 0.25 * 3.0)).abs() < 1e-12);
    }

    #[test]
    fn trilinear_weights_sum_to_one_inside() {
        let g = VelocityGrid::new(8, 6.0).unwrap();
        let (_, w) = g.trilinear_zero(&[0.37, -4.99, 5.999]).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn spatial_grid_nodes_and_weights() {
        let s = SpatialGrid::new(32, 0.5).unwrap();
        assert_eq!(s.len(), 33);
        assert_eq!(s.nodes[0], 0.0);
        assert!((s.nodes[32] - 0.5).abs() < 1e-16);
        let total: f64 = s.w.iter().sum();
        assert!((total - 0.5).abs() < 1e-14);
        let (i, f) = s.linear_stencil(0.26);
        assert!((s.nodes[i] + f * s.d_eta - 0.26).abs() < 1e-14);
    }
}
