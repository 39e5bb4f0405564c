//! Surface tension: the direction table used by the geometry layer, the
//! dual temperature map, transfer-matrix and correlation-decay estimators,
//! and the wall free energy.

use crate::geometry::{self, GeometryError, Pt};
use crate::stats::{self, Estimate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use thiserror::Error;

pub const TABLE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TensionError {
    #[error("beta must be positive, got {0}")]
    NonPositiveBeta(f64),
    #[error("strip width {got} exceeds the transfer-matrix cap {cap}")]
    WidthCap { got: usize, cap: usize },
    #[error("direction grid invalid: {0}")]
    BadGrid(String),
    #[error("need at least {need} directions, got {got}")]
    TooFewDirections { got: usize, need: usize },
    #[error("correlation below noise floor at separations {0:?}")]
    NoiseFloor(Vec<usize>),
    #[error("fit failed: {0}")]
    Fit(String),
    #[error("unsupported table version {0}")]
    Version(u32),
    #[error("direction {direction}: {source}")]
    Direction { direction: usize, source: Box<TensionError> },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Sampler(#[from] crate::samplers::SamplerError),
    #[error(transparent)]
    Lattice(#[from] crate::lattice::LatticeError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TensionError>;

/// τ on a grid of directions (angles in [0, 2π), increasing). Between grid
/// directions the homogeneous extension is linear on each cone, so that a
/// convexified table coincides with the support function of its Wulff shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionalTension {
    pub version: u32,
    pub beta: Option<f64>,
    pub directions: Vec<f64>,
    pub tau: Vec<f64>,
    pub err: Vec<f64>,
    pub method: String,
    pub convexified: bool,
}

pub fn unit(theta: f64) -> Pt {
    [theta.cos(), theta.sin()]
}

fn cross(a: Pt, b: Pt) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

impl DirectionalTension {
    pub fn new(directions: Vec<f64>, tau: Vec<f64>, err: Vec<f64>, method: &str) -> Result<Self> {
        let t = DirectionalTension {
            version: TABLE_VERSION,
            beta: None,
            directions,
            tau,
            err,
            method: method.into(),
            convexified: false,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != TABLE_VERSION {
            return Err(TensionError::Version(self.version));
        }
        let k = self.directions.len();
        if k < 3 {
            return Err(TensionError::TooFewDirections { got: k, need: 3 });
        }
        if self.tau.len() != k || self.err.len() != k {
            return Err(TensionError::BadGrid("length mismatch between directions, tau and err".into()));
        }
        for w in self.directions.windows(2) {
            if !(w[1] > w[0]) {
                return Err(TensionError::BadGrid("angles must increase strictly".into()));
            }
        }
        if self.directions[0] < 0.0 || self.directions[k - 1] >= TAU {
            return Err(TensionError::BadGrid("angles must lie in [0, 2π)".into()));
        }
        for i in 0..k {
            let gap = if i + 1 < k { self.directions[i + 1] - self.directions[i] } else { self.directions[0] + TAU - self.directions[i] };
            if gap >= PI - 1e-12 {
                return Err(TensionError::BadGrid(format!("gap after direction {i} is not below π")));
            }
        }
        if let Some(i) = self.tau.iter().position(|t| !t.is_finite()) {
            return Err(TensionError::BadGrid(format!("tau[{i}] is not finite")));
        }
        Ok(())
    }

    /// K equally spaced directions θ_k = 2πk/K with τ(θ_k) = f(θ_k).
    pub fn uniform<F: Fn(f64) -> f64>(k: usize, f: F, method: &str) -> Result<Self> {
        let dirs: Vec<f64> = (0..k).map(|i| TAU * i as f64 / k as f64).collect();
        let tau = dirs.iter().map(|&t| f(t)).collect();
        Self::new(dirs, tau, vec![0.0; k], method)
    }

    /// Isotropic stub τ ≡ c.
    pub fn constant(c: f64, k: usize) -> Result<Self> {
        Self::uniform(k, |_| c, "isotropic")
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn normal(&self, k: usize) -> Pt {
        unit(self.directions[k])
    }

    fn cone(&self, theta: f64) -> usize {
        let t = theta.rem_euclid(TAU);
        match self.directions.partition_point(|&d| d <= t) {
            0 => self.len() - 1,
            p => p - 1,
        }
    }

    /// Homogeneous extension x ↦ τ(x), linear on each grid cone.
    pub fn tau_h(&self, x: Pt) -> f64 {
        if x[0] == 0.0 && x[1] == 0.0 {
            return 0.0;
        }
        let k = self.cone(x[1].atan2(x[0]));
        let k1 = (k + 1) % self.len();
        let (a, b) = (self.normal(k), self.normal(k1));
        let det = cross(a, b);
        let ca = cross(x, b) / det;
        let cb = cross(a, x) / det;
        ca * self.tau[k] + cb * self.tau[k1]
    }

    pub fn tau_at(&self, theta: f64) -> f64 {
        self.tau_h(unit(theta))
    }

    /// τ* = τ(e_2), the tension of the interface parallel to a wall {x_2 = 0}.
    pub fn tau_star(&self) -> f64 {
        self.tau_h([0.0, 1.0])
    }

    pub fn min_tau(&self) -> f64 {
        self.tau.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_tau(&self) -> f64 {
        self.tau.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn anisotropy(&self) -> f64 {
        self.max_tau() / self.min_tau()
    }

    /// Lower convex envelope: τ**(n_k) = h_K(n_k) for the Wulff shape K of the table.
    pub fn convexify(&self) -> Result<Self> {
        let k = geometry::wulff_shape(self)?;
        let mut out = self.clone();
        for i in 0..self.len() {
            out.tau[i] = k.support(self.normal(i)).min(self.tau[i]);
        }
        out.convexified = true;
        Ok(out)
    }

    /// Average over the eight symmetries of the square lattice. Images that
    /// fall between grid directions are interpolated.
    pub fn symmetrize(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.len() {
            let [x, y] = self.normal(i);
            let images = [[x, y], [-x, y], [x, -y], [-x, -y], [y, x], [-y, x], [y, -x], [-y, -x]];
            out.tau[i] = images.iter().map(|&v| self.tau_h(v)).sum::<f64>() / 8.0;
            out.err[i] = self.err[i] / 8f64.sqrt().max(1.0);
        }
        out
    }

    /// Local convexity margins a·τ_{k−1} + b·τ_{k+1} − τ_k, where
    /// n_k = a·n_{k−1} + b·n_{k+1}. All nonnegative iff the cone-linear
    /// extension is convex.
    pub fn convexity_margins(&self) -> Vec<f64> {
        let k = self.len();
        (0..k)
            .map(|i| {
                let (p, n) = ((i + k - 1) % k, (i + 1) % k);
                let (u, v, w) = (self.normal(p), self.normal(i), self.normal(n));
                let det = cross(u, w);
                let a = cross(v, w) / det;
                let b = cross(u, v) / det;
                a * self.tau[p] + b * self.tau[n] - self.tau[i]
            })
            .collect()
    }

    /// Discrete stiffness τ + τ'' at each grid direction, from the convexity
    /// margins (margin ≈ (τ + τ'')·δ₋δ₊/2 for gaps δ₋, δ₊).
    pub fn stiffness(&self) -> Vec<f64> {
        let k = self.len();
        self.convexity_margins()
            .into_iter()
            .enumerate()
            .map(|(i, m)| {
                let dm = (self.directions[i] - self.directions[(i + k - 1) % k]).rem_euclid(TAU);
                let dp = (self.directions[(i + 1) % k] - self.directions[i]).rem_euclid(TAU);
                2.0 * m / (dm * dp)
            })
            .collect()
    }

    /// Minimum of τ(u) + τ(v) − τ(u+v) over pairs of grid directions with
    /// lengths in `scales`: (all pairs, non-parallel pairs only).
    pub fn strong_triangle_margin(&self, scales: &[f64]) -> (f64, f64) {
        let mut all = f64::INFINITY;
        let mut strict = f64::INFINITY;
        for i in 0..self.len() {
            for j in 0..self.len() {
                let (ni, nj) = (self.normal(i), self.normal(j));
                let parallel = cross(ni, nj).abs() < 1e-12;
                for &a in scales {
                    for &b in scales {
                        let u = [a * ni[0], a * ni[1]];
                        let v = [b * nj[0], b * nj[1]];
                        let m = self.tau_h(u) + self.tau_h(v) - self.tau_h([u[0] + v[0], u[1] + v[1]]);
                        all = all.min(m);
                        if !parallel {
                            strict = strict.min(m);
                        }
                    }
                }
            }
        }
        (all, strict)
    }

    /// Pyramidal inequality on random triangles whose two sides have grid
    /// normals: |Δ₀|τ(n₀) ≤ |Δ₁|τ(n₁) + |Δ₂|τ(n₂). Returns the smallest slack.
    pub fn pyramidal_check(&self, trials: usize, rng: &mut crate::rng::RngStream) -> f64 {
        let mut worst = f64::INFINITY;
        for _ in 0..trials {
            let (i, j) = (rng.below(self.len()), rng.below(self.len()));
            let (n1, n2) = (self.normal(i), self.normal(j));
            if cross(n1, n2).abs() < 1e-9 {
                continue;
            }
            let (l1, l2) = (0.1 + rng.uniform(), 0.1 + rng.uniform());
            // closing side: l0·n0 = −(l1·n1 + l2·n2)
            let n0 = [-(l1 * n1[0] + l2 * n2[0]), -(l1 * n1[1] + l2 * n2[1])];
            let slack = l1 * self.tau[i] + l2 * self.tau[j] - self.tau_h(n0);
            worst = worst.min(slack);
        }
        worst
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: DirectionalTension = serde_json::from_str(s)?;
        t.validate()?;
        Ok(t)
    }
}

/// β* with tanh β* = e^{−2β}.
pub fn dual_beta(beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(TensionError::NonPositiveBeta(beta));
    }
    Ok((-2.0 * beta).exp().atanh())
}

/// Fixed point of the duality map, by bisection on tanh β − e^{−2β}.
pub fn self_dual_point() -> f64 {
    let f = |b: f64| b.tanh() - (-2.0 * b).exp();
    let (mut lo, mut hi) = (0.1, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

// ---------------------------------------------------------------- transfer matrix

pub const TRANSFER_WIDTH_CAP: usize = 20;

/// Column transfer matrix of a strip of `w` spins with fixed spins `bot`
/// below and `top` above, in the symmetric form D^{1/2} H D^{1/2}.
struct Strip {
    w: usize,
    beta: f64,
    /// D^{1/2}, scaled so that the largest entry is 1.
    half_d: Vec<f64>,
    /// log of the scale removed from D.
    log_shift: f64,
}

impl Strip {
    fn new(w: usize, beta: f64, bot: i8, top: i8) -> Self {
        let n = 1usize << w;
        let spin = |s: usize, i: usize| if s >> i & 1 == 1 { 1i32 } else { -1 };
        let e: Vec<i32> = (0..n)
            .map(|s| {
                let mut e = spin(s, 0) * bot as i32 + spin(s, w - 1) * top as i32;
                for i in 0..w - 1 {
                    e += spin(s, i) * spin(s, i + 1);
                }
                e
            })
            .collect();
        let emax = *e.iter().max().unwrap() as f64;
        let half_d = e.iter().map(|&x| (0.5 * beta * (x as f64 - emax)).exp()).collect();
        Strip { w, beta, half_d, log_shift: beta * emax }
    }

    /// v ← H v, H = ⊗ [[e^β, e^−β], [e^−β, e^β]].
    fn apply_h(&self, v: &mut [f64]) {
        let (a, b) = (self.beta.exp(), (-self.beta).exp());
        for i in 0..self.w {
            let step = 1usize << i;
            for base in (0..v.len()).step_by(2 * step) {
                for j in base..base + step {
                    let (x, y) = (v[j], v[j + step]);
                    v[j] = a * x + b * y;
                    v[j + step] = b * x + a * y;
                }
            }
        }
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        for (o, (x, d)) in out.iter_mut().zip(v.iter().zip(&self.half_d)) {
            *o = x * d;
        }
        self.apply_h(out);
        for (o, d) in out.iter_mut().zip(&self.half_d) {
            *o *= d;
        }
    }

    /// log of the dominant eigenvalue of D·H (restarted Lanczos).
    fn log_lambda(&self) -> f64 {
        let n = self.half_d.len();
        let m = if self.w >= 18 { 24 } else { 60 }.min(n);
        let mut x: Vec<f64> = (0..n).map(|s| self.half_d[s].sqrt()).collect();
        normalize(&mut x);
        let mut theta_prev = f64::NAN;
        let mut theta = 0.0;
        for _ in 0..200 {
            let mut basis: Vec<Vec<f64>> = vec![x.clone()];
            let (mut alpha, mut betas) = (Vec::new(), Vec::new());
            let mut w = vec![0.0; n];
            for j in 0..m {
                self.apply(&basis[j], &mut w);
                let a = dot(&w, &basis[j]);
                alpha.push(a);
                // full reorthogonalisation, twice
                for _ in 0..2 {
                    for q in &basis {
                        let c = dot(&w, q);
                        w.iter_mut().zip(q).for_each(|(wi, qi)| *wi -= c * qi);
                    }
                }
                let b = dot(&w, &w).sqrt();
                if j + 1 == m || b < 1e-14 * a.abs() {
                    break;
                }
                betas.push(b);
                basis.push(w.iter().map(|v| v / b).collect());
            }
            let k = alpha.len();
            let t = nalgebra::DMatrix::from_fn(k, k, |r, c| {
                if r == c {
                    alpha[r]
                } else if r + 1 == c {
                    betas[r]
                } else if c + 1 == r {
                    betas[c]
                } else {
                    0.0
                }
            });
            let eig = nalgebra::SymmetricEigen::new(t);
            let (top, _) = eig.eigenvalues.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            theta = eig.eigenvalues[top];
            let y = eig.eigenvectors.column(top);
            let mut nx = vec![0.0; n];
            for (j, q) in basis.iter().enumerate().take(k) {
                nx.iter_mut().zip(q).for_each(|(a, b)| *a += y[j] * b);
            }
            normalize(&mut nx);
            x = nx;
            if (theta - theta_prev).abs() <= 1e-14 * theta.abs() {
                break;
            }
            theta_prev = theta;
        }
        theta.ln() + self.log_shift
    }

    /// log Z of the L-column box closed by boundary columns `side` on both ends.
    fn log_z_finite(&self, len: usize, side: &[i8]) -> f64 {
        let n = self.half_d.len();
        let b: usize = side.iter().enumerate().filter(|(_, &s)| s > 0).map(|(i, _)| 1usize << i).sum();
        let mut edge = vec![0.0; n];
        edge[b] = 1.0;
        self.apply_h(&mut edge);
        // D = half_d², carrying the shift
        let mut v: Vec<f64> = edge.iter().zip(&self.half_d).map(|(e, d)| e * d * d).collect();
        let mut log = self.log_shift;
        for _ in 1..len {
            let s = v.iter().cloned().fold(0.0, f64::max);
            v.iter_mut().for_each(|x| *x /= s);
            log += s.ln();
            self.apply_h(&mut v);
            v.iter_mut().zip(&self.half_d).for_each(|(x, d)| *x *= d * d);
            log += self.log_shift;
        }
        log + dot(&v, &edge).ln()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// τ_W = log λ₊ − log λ_± on a strip of width W (mixed: bottom −, top +).
pub fn strip_tension(beta: f64, w: usize) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(TensionError::NonPositiveBeta(beta));
    }
    if w > TRANSFER_WIDTH_CAP {
        return Err(TensionError::WidthCap { got: w, cap: TRANSFER_WIDTH_CAP });
    }
    if w < 2 {
        return Err(TensionError::BadGrid(format!("strip width {w} below 2")));
    }
    let plus = Strip::new(w, beta, 1, 1).log_lambda();
    let mixed = Strip::new(w, beta, -1, 1).log_lambda();
    Ok(plus - mixed)
}

/// −(1/L) log Z_±/Z_+ on the W × L box with side columns matching the bc.
pub fn finite_box_tension(beta: f64, w: usize, len: usize) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(TensionError::NonPositiveBeta(beta));
    }
    if w > TRANSFER_WIDTH_CAP {
        return Err(TensionError::WidthCap { got: w, cap: TRANSFER_WIDTH_CAP });
    }
    if w < 2 || len < 1 {
        return Err(TensionError::BadGrid(format!("box {w} x {len} too small")));
    }
    let plus_side = vec![1i8; w];
    let mixed_side: Vec<i8> = (0..w).map(|i| if i < w / 2 { -1 } else { 1 }).collect();
    let zp = Strip::new(w, beta, 1, 1).log_z_finite(len, &plus_side);
    let zm = Strip::new(w, beta, -1, 1).log_z_finite(len, &mixed_side);
    Ok(-(zm - zp) / len as f64)
}

#[derive(Clone, Debug, Serialize)]
pub struct TransferEstimate {
    pub beta: f64,
    /// Extrapolated τ̂(e_1).
    pub tau: f64,
    /// (W, τ_W) per strip width.
    pub raw: Vec<(usize, f64)>,
    /// Fit τ_W = τ + a/(W + δ)².
    pub a: f64,
    pub delta: f64,
    pub residual: f64,
    /// Relative change of the extrapolation when the widest strip is dropped.
    pub drift: f64,
    /// (W, L, τ at length L, τ at 2L) finite-length checks.
    pub length_checks: Vec<(usize, usize, f64, f64)>,
}

fn extrapolate(raw: &[(usize, f64)]) -> (f64, f64, f64, f64) {
    if raw.len() < 3 {
        let t = raw.last().map_or(f64::NAN, |r| r.1);
        return (t, 0.0, 0.0, f64::NAN);
    }
    let wmin = raw[0].0 as f64;
    let fit = |delta: f64| {
        let rows: Vec<Vec<f64>> = raw.iter().map(|&(w, _)| vec![1.0, 1.0 / (w as f64 + delta).powi(2)]).collect();
        let y: Vec<f64> = raw.iter().map(|r| r.1).collect();
        let (c, _, chi2) = stats::weighted_lstsq(&rows, &y, &vec![1.0; y.len()], false).expect("two parameters");
        (c[0], c[1], chi2)
    };
    let lo = -0.9 * wmin;
    let mut best = (lo, f64::INFINITY);
    let steps = 400;
    for i in 0..=steps {
        let d = lo + (12.0 - lo) * i as f64 / steps as f64;
        let r = fit(d).2;
        if r < best.1 {
            best = (d, r);
        }
    }
    let h = (12.0 - lo) / steps as f64;
    let (mut a, mut b) = (best.0 - h, best.0 + h);
    for _ in 0..100 {
        let m1 = a + (b - a) * 0.382;
        let m2 = a + (b - a) * 0.618;
        if fit(m1).2 < fit(m2).2 {
            b = m2;
        } else {
            a = m1;
        }
    }
    let delta = 0.5 * (a + b);
    let (tau, amp, chi2) = fit(delta);
    (tau, amp, delta, chi2.sqrt())
}

/// Strip tensions for `widths` and the extrapolation in the width;
/// `lengths` adds finite-box checks at lengths L and 2L for the widest strip.
pub fn tension_axis_transfer(beta: f64, widths: &[usize], lengths: &[usize]) -> Result<TransferEstimate> {
    if let Some(&w) = widths.iter().find(|&&w| w > TRANSFER_WIDTH_CAP) {
        return Err(TensionError::WidthCap { got: w, cap: TRANSFER_WIDTH_CAP });
    }
    let mut ws = widths.to_vec();
    ws.sort_unstable();
    ws.dedup();
    let raw = ws.par_iter().map(|&w| strip_tension(beta, w).map(|t| (w, t))).collect::<Result<Vec<_>>>()?;
    let (tau, a, delta, residual) = extrapolate(&raw);
    let drift = if raw.len() >= 4 { ((extrapolate(&raw[..raw.len() - 1]).0 - tau) / tau).abs() } else { f64::NAN };
    let wmax = *ws.last().unwrap_or(&2);
    let length_checks = lengths
        .iter()
        .map(|&l| Ok((wmax, l, finite_box_tension(beta, wmax, l)?, finite_box_tension(beta, wmax, 2 * l)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(TransferEstimate { beta, tau, raw, a, delta, residual, drift, length_checks })
}

// ---------------------------------------------------------------- correlation decay

/// Treatment of the c·log r correction in −log⟨σ_0σ_x⟩ = τr + c·log r + const.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum OzTerm {
    Free,
    Fixed(f64),
    Off,
}

#[derive(Clone, Debug, Serialize)]
pub struct DecayConfig {
    /// Side of the dual torus.
    pub torus: usize,
    /// Independent chains (the error bars come from their spread).
    pub chains: usize,
    pub burn_in: usize,
    /// Recorded SW sweeps per chain.
    pub sweeps: usize,
    /// Origins on the sublattice stride·Z².
    pub origin_stride: usize,
    pub oz: OzTerm,
    pub seed: u64,
}

impl Default for DecayConfig {
    fn default() -> Self {
        DecayConfig { torus: 64, chains: 32, burn_in: 50, sweeps: 300, origin_stride: 2, oz: OzTerm::Free, seed: 1 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DecayFit {
    /// Primitive lattice direction.
    pub direction: [i32; 2],
    pub tau: f64,
    pub err: f64,
    pub c: f64,
    pub chi2: f64,
    pub dof: usize,
    /// (distance, ⟨σ_0σ_x⟩, error) at each requested separation.
    pub correlations: Vec<(f64, f64, f64)>,
    /// Separations dropped as below the noise floor.
    pub flagged: Vec<usize>,
}

/// ⟨σ_0 σ_{r·v}⟩ averaged over the point-group images of v, for each
/// direction and multiple r, from FK connectivities at p* on the dual torus.
fn dual_correlations(beta_star: f64, dirs: &[[i32; 2]], seps: &[usize], cfg: &DecayConfig) -> Result<Vec<Vec<(f64, f64)>>> {
    use crate::lattice::{build_lattice, FkGraph, ShapeSpec, Wiring};
    use crate::samplers::{FkChain, SpinChain};
    let l = cfg.torus;
    let g = build_lattice(&ShapeSpec::torus(2, l))?;
    let fk = FkGraph::new(&g, &Wiring::Periodic)?;
    let p = 1.0 - (-2.0 * beta_star).exp();
    let images: Vec<Vec<[i32; 2]>> = dirs
        .iter()
        .map(|&[x, y]| {
            let mut v = vec![[x, y], [-x, y], [x, -y], [-x, -y], [y, x], [-y, x], [y, -x], [-y, -x]];
            v.sort_unstable();
            v.dedup();
            v
        })
        .collect();
    let stride = cfg.origin_stride.max(1);
    let origins: Vec<usize> = (0..l).step_by(stride).flat_map(|y| (0..l).step_by(stride).map(move |x| x + l * y)).collect();
    let per_chain: Vec<Vec<Vec<f64>>> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| -> Result<Vec<Vec<f64>>> {
            let rng = crate::rng::RngStream::new(cfg.seed, c as u64);
            let mut ch = FkChain::new(fk.clone(), p, rng)?;
            for _ in 0..cfg.burn_in {
                ch.sweep();
            }
            let mut acc = vec![vec![0.0; seps.len()]; dirs.len()];
            for _ in 0..cfg.sweeps {
                ch.sweep();
                let (labels, _) = ch.bonds().clusters(&fk);
                for (di, imgs) in images.iter().enumerate() {
                    for (si, &r) in seps.iter().enumerate() {
                        let mut hits = 0usize;
                        for img in imgs {
                            let (dx, dy) = ((img[0] * r as i32).rem_euclid(l as i32) as usize, (img[1] * r as i32).rem_euclid(l as i32) as usize);
                            for &o in &origins {
                                let (x, y) = (o % l, o / l);
                                let t = (x + dx) % l + l * ((y + dy) % l);
                                hits += (labels[o] == labels[t]) as usize;
                            }
                        }
                        acc[di][si] += hits as f64 / (imgs.len() * origins.len()) as f64;
                    }
                }
            }
            acc.iter_mut().flatten().for_each(|v| *v /= cfg.sweeps as f64);
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..dirs.len())
        .map(|di| {
            (0..seps.len())
                .map(|si| {
                    let xs: Vec<f64> = per_chain.iter().map(|c| c[di][si]).collect();
                    let e = stats::mean_with_error(&xs);
                    (e.value, e.err)
                })
                .collect()
        })
        .collect())
}

fn fit_decay(direction: [i32; 2], seps: &[usize], corr: &[(f64, f64)], oz: OzTerm) -> Result<DecayFit> {
    let norm = ((direction[0] * direction[0] + direction[1] * direction[1]) as f64).sqrt();
    let mut rows = Vec::new();
    let mut y = Vec::new();
    let mut w = Vec::new();
    let mut flagged = Vec::new();
    for (&r, &(c, e)) in seps.iter().zip(corr) {
        if !(c > 3.0 * e) || c <= 0.0 {
            flagged.push(r);
            continue;
        }
        let d = r as f64 * norm;
        rows.push(if oz == OzTerm::Free { vec![d, d.ln(), 1.0] } else { vec![d, 1.0] });
        let fixed = if let OzTerm::Fixed(c0) = oz { c0 * d.ln() } else { 0.0 };
        y.push(-c.ln() - fixed);
        let sy = (e / c).max(1e-6);
        w.push(1.0 / (sy * sy));
    }
    let p = if oz == OzTerm::Free { 3 } else { 2 };
    if seps.len() < p + 1 {
        return Err(TensionError::Fit(format!("{} separations for {} parameters", seps.len(), p)));
    }
    if rows.len() < p + 1 {
        return Err(TensionError::NoiseFloor(flagged));
    }
    let (coef, cov, chi2) = stats::weighted_lstsq(&rows, &y, &w, true).ok_or_else(|| TensionError::Fit("singular normal equations".into()))?;
    Ok(DecayFit {
        direction,
        tau: coef[0],
        err: cov[0][0].sqrt(),
        c: match oz {
            OzTerm::Free => coef[1],
            OzTerm::Fixed(c0) => c0,
            OzTerm::Off => 0.0,
        },
        chi2,
        dof: rows.len() - p,
        correlations: seps.iter().zip(corr).map(|(&r, &(c, e))| (r as f64 * norm, c, e)).collect(),
        flagged,
    })
}

/// τ̂_β(v/|v|) from the decay of dual correlations along the primitive vector v.
pub fn tension_from_dual_decay(beta: f64, direction: [i32; 2], seps: &[usize], cfg: &DecayConfig) -> Result<DecayFit> {
    if direction == [0, 0] {
        return Err(TensionError::BadGrid("zero direction".into()));
    }
    let bs = dual_beta(beta)?;
    let corr = dual_correlations(bs, &[direction], seps, cfg)?;
    fit_decay(direction, seps, &corr[0], cfg.oz)
}

/// Primitive vectors (p, q), 0 ≤ q ≤ p ≤ 1 + K/8, closest in angle to K/8 + 1
/// equally spaced angles of the first octant.
pub fn octant_directions(k: usize) -> Result<Vec<[i32; 2]>> {
    if k < 8 {
        return Err(TensionError::TooFewDirections { got: k, need: 8 });
    }
    if k % 8 != 0 {
        return Err(TensionError::BadGrid(format!("K = {k} is not a multiple of 8")));
    }
    let m = k / 8;
    let mut cands = Vec::new();
    for p in 1..=(1 + m as i32) {
        for q in 0..=p {
            if gcd(p, q) == 1 {
                cands.push([p, q]);
            }
        }
    }
    let mut out: Vec<[i32; 2]> = Vec::new();
    for i in 0..=m {
        let target = PI / 4.0 * i as f64 / m as f64;
        let best = cands
            .iter()
            .filter(|c| !out.contains(c))
            .min_by(|a, b| {
                let da = ((a[1] as f64).atan2(a[0] as f64) - target).abs();
                let db = ((b[1] as f64).atan2(b[0] as f64) - target).abs();
                da.partial_cmp(&db).unwrap().then((a[0] + a[1]).cmp(&(b[0] + b[1])))
            })
            .ok_or_else(|| TensionError::BadGrid(format!("no lattice direction left for K = {k}")))?;
        out.push(*best);
    }
    Ok(out)
}

fn gcd(a: i32, b: i32) -> i32 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// All 8(m) directions generated from the octant list by the point group,
/// as (angle, octant index), sorted by angle.
fn full_grid(oct: &[[i32; 2]]) -> Vec<(f64, usize)> {
    let mut out: Vec<(f64, usize)> = Vec::new();
    for (i, &[p, q]) in oct.iter().enumerate() {
        for [x, y] in [[p, q], [-p, q], [p, -q], [-p, -q], [q, p], [-q, p], [q, -p], [-q, -p]] {
            let a = (y as f64).atan2(x as f64).rem_euclid(TAU);
            if !out.iter().any(|o| (o.0 - a).abs() < 1e-12 || (o.0 - a).abs() > TAU - 1e-12) {
                out.push((a, i));
            }
        }
    }
    out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    out
}

#[derive(Clone, Debug, Serialize)]
pub enum TableMethod {
    /// τ ≡ c (test hook).
    Isotropic(f64),
    /// Dual decay fits anchored to the transfer-matrix axis value.
    DualDecay { widths: Vec<usize>, min_distance: f64, max_distance: f64, decay: DecayConfig },
}

#[derive(Clone, Debug, Serialize)]
pub struct TensionTable {
    pub raw: DirectionalTension,
    pub convexified: DirectionalTension,
    pub fits: Vec<DecayFit>,
    pub axis: Option<TransferEstimate>,
    /// τ_TM(e_1)/τ_decay(e_1).
    pub anchor_scale: f64,
}

/// τ on K lattice-rational directions, symmetrized over the point group,
/// plus its convexification.
pub fn tension_table(beta: f64, k: usize, method: &TableMethod) -> Result<TensionTable> {
    let oct = octant_directions(k)?;
    let grid = full_grid(&oct);
    debug_assert_eq!(grid.len(), k);
    let dirs: Vec<f64> = grid.iter().map(|g| g.0).collect();
    let (tau_oct, err_oct, fits, axis, scale, name) = match method {
        TableMethod::Isotropic(c) => (vec![*c; oct.len()], vec![0.0; oct.len()], Vec::new(), None, 1.0, "isotropic".to_string()),
        TableMethod::DualDecay { widths, min_distance, max_distance, decay } => {
            let bs = dual_beta(beta)?;
            let seps_for = |v: [i32; 2]| -> Vec<usize> {
                let n = ((v[0] * v[0] + v[1] * v[1]) as f64).sqrt();
                let rmax = (*max_distance / n).floor().min((decay.torus / 2) as f64 / v[0].max(v[1]) as f64) as usize;
                let rmin = (*min_distance / n).ceil().max(1.0) as usize;
                (rmin..=rmax.max(rmin)).collect()
            };
            // one run measures every octant direction at its own separations
            let all_seps: Vec<usize> = (1..=oct.iter().map(|&v| *seps_for(v).last().unwrap()).max().unwrap_or(1)).collect();
            let corr = dual_correlations(bs, &oct, &all_seps, decay)?;
            let mut fits = Vec::new();
            for (i, &v) in oct.iter().enumerate() {
                let s = seps_for(v);
                let f = fit_decay(v, &s, &corr[i][s[0] - 1..s[s.len() - 1]], decay.oz).map_err(|e| TensionError::Direction { direction: i, source: Box::new(e) })?;
                fits.push(f);
            }
            let axis = tension_axis_transfer(beta, widths, &[])?;
            let scale = axis.tau / fits[0].tau;
            let tau = fits.iter().map(|f| f.tau * scale).collect();
            let err = fits.iter().map(|f| f.err * scale).collect();
            (tau, err, fits, Some(axis), scale, "dual_decay".to_string())
        }
    };
    let tau = grid.iter().map(|g| tau_oct[g.1]).collect();
    let err = grid.iter().map(|g| err_oct[g.1]).collect();
    let mut raw = DirectionalTension::new(dirs, tau, err, &name)?;
    raw.beta = Some(beta);
    let raw = raw.symmetrize();
    let convexified = raw.convexify()?;
    Ok(TensionTable { raw, convexified, fits, axis, anchor_scale: scale })
}

// ---------------------------------------------------------------- wall free energy

#[derive(Clone, Debug, Serialize)]
pub struct WallConfig {
    /// Wall length and height above the wall.
    pub width: usize,
    pub height: usize,
    /// Periodic along the wall; otherwise the side columns carry plus spins.
    pub periodic: bool,
    pub chains: usize,
    pub burn_in: usize,
    pub sweeps: usize,
    /// Absolute tolerance of the adaptive Simpson rule.
    pub tol: f64,
    pub max_depth: usize,
    pub seed: u64,
}

impl Default for WallConfig {
    fn default() -> Self {
        WallConfig { width: 32, height: 64, periodic: true, chains: 8, burn_in: 2000, sweeps: 8000, tol: 5e-4, max_depth: 5, seed: 7 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct WallPoint {
    pub eta: f64,
    pub tau_bd: Estimate,
    pub converged: bool,
    pub evaluations: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct WallTension {
    pub beta: f64,
    pub points: Vec<WallPoint>,
    pub tau_star: Option<Estimate>,
    /// Smallest η on the grid with τ̂_bd within 2σ of τ̂*.
    pub eta_w: Option<f64>,
}

/// β times the mean wall spin under plus bc and wall field η.
pub fn wall_magnetization(beta: f64, eta: f64, cfg: &WallConfig) -> Result<Estimate> {
    use crate::lattice::{build_lattice, BoundaryCondition, CouplingSpec, ShapeSpec, SpinConfig};
    use crate::samplers::{Glauber, SpinChain};
    let shape = if cfg.periodic { ShapeSpec::cylinder(2, cfg.width, cfg.height) } else { ShapeSpec::slab(2, cfg.width / 2, cfg.height) };
    let g = build_lattice(&shape)?;
    let wall: Vec<usize> = g.wall().iter().map(|&i| i as usize).collect();
    let bc = BoundaryCondition::WallField { eta };
    let c = CouplingSpec::nn(beta);
    // streams keyed by the bits of η so that every evaluation is reproducible
    let key = eta.to_bits();
    let per_chain = (0..cfg.chains)
        .into_par_iter()
        .map(|k| -> Result<f64> {
            let rng = crate::rng::RngStream::new(cfg.seed ^ key, k as u64);
            let mut ch = Glauber::new(&g, &bc, &c, 0.0, SpinConfig::constant(g.n_sites(), 1), rng)?;
            for _ in 0..cfg.burn_in {
                ch.sweep();
            }
            let mut s = 0.0;
            for _ in 0..cfg.sweeps {
                ch.sweep();
                let sp = ch.spins();
                s += wall.iter().map(|&i| sp[i] as f64).sum::<f64>() / wall.len() as f64;
            }
            Ok(beta * s / cfg.sweeps as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(stats::mean_with_error(&per_chain))
}

struct Integrand<'a> {
    beta: f64,
    cfg: &'a WallConfig,
    cache: std::collections::BTreeMap<u64, Estimate>,
}

impl Integrand<'_> {
    fn at(&mut self, x: f64) -> Result<Estimate> {
        let key = x.to_bits();
        if let Some(e) = self.cache.get(&key) {
            return Ok(*e);
        }
        let e = wall_magnetization(self.beta, x, self.cfg)?;
        self.cache.insert(key, e);
        Ok(e)
    }
}

/// Simpson panel over [a, b]: (value, variance, converged).
fn simpson(f: &mut Integrand, a: f64, b: f64, depth: usize) -> Result<(f64, f64, bool)> {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f.at(a)?, f.at(m)?, f.at(b)?);
    let h = b - a;
    let whole = h / 6.0 * (fa.value + 4.0 * fm.value + fb.value);
    let var_whole = (h / 6.0).powi(2) * (fa.err.powi(2) + 16.0 * fm.err.powi(2) + fb.err.powi(2));
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (fl, fr) = (f.at(lm)?, f.at(rm)?);
    let q = h / 12.0;
    let halves = q * (fa.value + 4.0 * fl.value + 2.0 * fm.value + 4.0 * fr.value + fb.value);
    let var_halves = q * q * (fa.err.powi(2) + 16.0 * fl.err.powi(2) + 4.0 * fm.err.powi(2) + 16.0 * fr.err.powi(2) + fb.err.powi(2));
    let diff = (halves - whole).abs();
    let noise = 2.0 * (var_whole + var_halves).sqrt();
    if diff <= 15.0 * f.cfg.tol * h {
        return Ok((halves + (halves - whole) / 15.0, var_halves, true));
    }
    if depth == 0 {
        // out of depth: fine only if the remaining discrepancy is noise
        return Ok((halves, var_halves, diff <= noise));
    }
    let (l, vl, cl) = simpson(f, a, m, depth - 1)?;
    let (r, vr, cr) = simpson(f, m, b, depth - 1)?;
    Ok((l + r, vl + vr, cl && cr))
}

fn integrate(f: &mut Integrand, eta: f64) -> Result<WallPoint> {
    if eta == 0.0 {
        return Ok(WallPoint { eta, tau_bd: Estimate::new(0.0, 0.0), converged: true, evaluations: 0 });
    }
    let before = f.cache.len();
    let a = eta.abs();
    // the integrand is smooth on each side of 0 but not across the wetting points
    let (l, vl, cl) = simpson(f, -a, 0.0, f.cfg.max_depth)?;
    let (r, vr, cr) = simpson(f, 0.0, a, f.cfg.max_depth)?;
    let s = eta.signum();
    Ok(WallPoint { eta, tau_bd: Estimate::new(s * (l + r), (vl + vr).sqrt()), converged: cl && cr, evaluations: f.cache.len() - before })
}

/// τ̂_bd(β, η) = ∫_{−η}^{η} β⟨σ_wall⟩₊^{η'} dη' by adaptive Simpson.
pub fn wall_free_energy(beta: f64, eta: f64, cfg: &WallConfig) -> Result<WallPoint> {
    if !(beta > 0.0) {
        return Err(TensionError::NonPositiveBeta(beta));
    }
    integrate(&mut Integrand { beta, cfg, cache: Default::default() }, eta)
}

/// τ̂_bd over an η grid (shared integrand evaluations) and η̂_w against τ̂*.
pub fn wall_tension_curve(beta: f64, etas: &[f64], cfg: &WallConfig, tau_star: Option<Estimate>) -> Result<WallTension> {
    if !(beta > 0.0) {
        return Err(TensionError::NonPositiveBeta(beta));
    }
    let mut f = Integrand { beta, cfg, cache: Default::default() };
    let points = etas.iter().map(|&e| integrate(&mut f, e)).collect::<Result<Vec<_>>>()?;
    let eta_w = tau_star.and_then(|ts| {
        points
            .iter()
            .filter(|p| p.eta > 0.0 && p.tau_bd.value >= ts.value - 2.0 * (p.tau_bd.err.hypot(ts.err)))
            .map(|p| p.eta)
            .fold(None, |a: Option<f64>, b| Some(a.map_or(b, |a| a.min(b))))
    });
    Ok(WallTension { beta, points, tau_star, eta_w })
}

/// (nondecreasing, concave) on η ≥ 0 within `z` standard errors.
pub fn wall_shape_checks(points: &[WallPoint], z: f64) -> (bool, bool) {
    let mut p: Vec<&WallPoint> = points.iter().filter(|p| p.eta >= 0.0).collect();
    p.sort_by(|a, b| a.eta.partial_cmp(&b.eta).unwrap());
    let mono = p.windows(2).all(|w| w[1].tau_bd.value >= w[0].tau_bd.value - z * w[0].tau_bd.err.hypot(w[1].tau_bd.err));
    let conc = p.windows(3).all(|w| {
        let (x0, x1, x2) = (w[0].eta, w[1].eta, w[2].eta);
        let t = (x1 - x0) / (x2 - x0);
        let chord = (1.0 - t) * w[0].tau_bd.value + t * w[2].tau_bd.value;
        let err = ((1.0 - t) * w[0].tau_bd.err).hypot(t * w[2].tau_bd.err).hypot(w[1].tau_bd.err);
        w[1].tau_bd.value >= chord - z * err
    });
    (mono, conc)
}

// ---------------------------------------------------------------- FK interface

#[derive(Clone, Debug, Serialize)]
pub struct InterfaceRate {
    pub events: usize,
    pub samples: usize,
    /// −(1/N^{d−1}) log P̂ when at least one event was seen.
    pub estimate: Option<Estimate>,
    /// One-sided 95% lower bound on the rate (always reported).
    pub lower_bound: f64,
}

/// −(1/N^{d−1}) log P̂(∂⁺ ↮ ∂⁻) on the wired box of base N and height ⌈εN⌉,
/// counting only paths inside the box.
pub fn fk_interface_probability(beta: f64, d: usize, n: usize, eps: f64, burn_in: usize, samples: usize, seed: u64) -> Result<InterfaceRate> {
    use crate::lattice::{build_lattice, FkGraph, ShapeSpec, Wiring};
    use crate::samplers::{FkChain, SpinChain};
    if !(beta > 0.0) {
        return Err(TensionError::NonPositiveBeta(beta));
    }
    let h = ((eps * n as f64).ceil() as usize).max(2);
    let mut dims = vec![n; d - 1];
    dims.push(h);
    let g = build_lattice(&ShapeSpec::Box { dims })?;
    let fk = FkGraph::new(&g, &Wiring::Wired)?;
    let p = crate::samplers::p_beta(beta);
    let inner: Vec<usize> = (0..fk.n_edges()).filter(|&e| (fk.edges[e][1] as usize) < fk.n_sites && (fk.edges[e][0] as usize) < fk.n_sites).collect();
    let top: Vec<usize> = (0..g.n_sites()).filter(|&i| g.coord(i)[d - 1] as usize == h - 1).collect();
    let bot: Vec<usize> = (0..g.n_sites()).filter(|&i| g.coord(i)[d - 1] == 0).collect();
    let mut ch = FkChain::new(fk.clone(), p, crate::rng::RngStream::new(seed, 0))?;
    for _ in 0..burn_in {
        ch.sweep();
    }
    let mut events = 0;
    let mut uf = crate::unionfind::UnionFind::new(fk.n_sites);
    for _ in 0..samples {
        ch.sweep();
        uf.reset();
        for &e in &inner {
            if ch.bonds().open[e] {
                uf.union(fk.edges[e][0] as usize, fk.edges[e][1] as usize);
            }
        }
        let roots: std::collections::HashSet<usize> = top.iter().map(|&i| uf.find(i)).collect();
        if !bot.iter().any(|&i| roots.contains(&uf.find(i))) {
            events += 1;
        }
    }
    let area = n.pow(d as u32 - 1) as f64;
    let ns = samples as f64;
    let lower_bound = if events == 0 { -(3.0 / ns).ln() / area } else { -((events as f64 + 2.0 * (events as f64).sqrt()) / ns).min(1.0).ln() / area };
    let estimate = (events > 0).then(|| {
        let ph = events as f64 / ns;
        Estimate::new(-ph.ln() / area, ((1.0 - ph) / (ph * ns)).sqrt() / area)
    });
    Ok(InterfaceRate { events, samples, estimate, lower_bound })
}
