//! Block magnetizations and mesoscopic phase labels on dyadic tori.
//!
//! Blocks at scale k are the cubes of side 2^k tiling {0..N−1}^d, N = 2^n,
//! indexed x_0 + b·(x_1 + b·x_2) with b = N/2^k blocks per side.

use crate::geometry::{perimeter_indicator, IndicatorField};
use crate::lattice::{BondConfig, FkGraph, Geometry, LatticeError, ShapeSpec, SpinConfig};
use crate::stats::{self, Estimate};
use crate::unionfind::UnionFind;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CoarseError {
    #[error("side {0} is not a power of two")]
    NotDyadic(usize),
    #[error("scale k = {k} outside 0..={n}")]
    BadScale { k: usize, n: usize },
    #[error("need a cubic torus or box, got {0}")]
    BadShape(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("parameter out of range: {0}")]
    BadParameter(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

pub type Result<T> = std::result::Result<T, CoarseError>;

/// Dimension, side N and n = log₂N of a cubic dyadic lattice.
fn dyadic(g: &Geometry) -> Result<(usize, usize, usize)> {
    let n = match &g.spec {
        ShapeSpec::Torus { n, .. } => *n,
        ShapeSpec::Box { dims } if dims.iter().all(|&x| x == dims[0]) => dims[0],
        s => return Err(CoarseError::BadShape(s.name().into())),
    };
    if !n.is_power_of_two() {
        return Err(CoarseError::NotDyadic(n));
    }
    Ok((g.d, n, n.trailing_zeros() as usize))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BlockGrid {
    pub d: usize,
    pub k: usize,
    /// Blocks per side.
    pub b: usize,
}

impl BlockGrid {
    pub fn len(&self) -> usize {
        self.b.pow(self.d as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.b == 0
    }

    pub fn coord(&self, i: usize) -> [usize; 3] {
        let b = self.b;
        let mut c = [0; 3];
        c[0] = i % b;
        if self.d > 1 {
            c[1] = (i / b) % b;
        }
        if self.d > 2 {
            c[2] = i / (b * b);
        }
        c
    }

    pub fn index(&self, c: [usize; 3]) -> usize {
        c[0] + self.b * (c[1] + self.b * c[2])
    }

    /// The 3^d − 1 *-neighbours on the block torus (deduplicated).
    pub fn star_neighbors(&self, i: usize) -> Vec<usize> {
        let c = self.coord(i);
        let b = self.b as i64;
        let mut out = Vec::new();
        let r = |k: usize| if k < self.d { -1..=1 } else { 0..=0 };
        for dz in r(2) {
            for dy in r(1) {
                for dx in r(0) {
                    if (dx, dy, dz) == (0, 0, 0) {
                        continue;
                    }
                    let q = [
                        (c[0] as i64 + dx).rem_euclid(b) as usize,
                        (c[1] as i64 + dy).rem_euclid(b.max(1)) as usize,
                        (c[2] as i64 + dz).rem_euclid(b.max(1)) as usize,
                    ];
                    let j = self.index(q);
                    if j != i && !out.contains(&j) {
                        out.push(j);
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MagnetizationProfile {
    pub grid: BlockGrid,
    pub values: Vec<f64>,
}

/// Block means M_k of σ.
pub fn local_magnetization(g: &Geometry, sigma: &SpinConfig, k: usize) -> Result<MagnetizationProfile> {
    let (d, n, log) = dyadic(g)?;
    if k > log {
        return Err(CoarseError::BadScale { k, n: log });
    }
    if sigma.spins.len() != g.n_sites() {
        return Err(LatticeError::LengthMismatch { got: sigma.spins.len(), expected: g.n_sites() }.into());
    }
    let grid = BlockGrid { d, k, b: n >> k };
    let mut sums = vec![0i64; grid.len()];
    for (i, c) in g.coords().iter().enumerate() {
        let q = [c[0] as usize >> k, if d > 1 { c[1] as usize >> k } else { 0 }, if d > 2 { c[2] as usize >> k } else { 0 }];
        sums[grid.index(q)] += sigma.spins[i] as i64;
    }
    let vol = (1usize << (k * d)) as f64;
    Ok(MagnetizationProfile { grid, values: sums.into_iter().map(|s| s as f64 / vol).collect() })
}

impl MagnetizationProfile {
    /// Average 2^d blocks into one (scale k + 1).
    pub fn coarsen(&self) -> Result<Self> {
        let g = self.grid;
        if g.b < 2 {
            return Err(CoarseError::BadScale { k: g.k + 1, n: g.k });
        }
        let ng = BlockGrid { d: g.d, k: g.k + 1, b: g.b / 2 };
        let mut v = vec![0.0; ng.len()];
        for i in 0..g.len() {
            let c = g.coord(i);
            v[ng.index([c[0] / 2, c[1] / 2, c[2] / 2])] += self.values[i];
        }
        let f = (1usize << g.d) as f64;
        v.iter_mut().for_each(|x| *x /= f);
        Ok(MagnetizationProfile { grid: ng, values: v })
    }

    /// As a field on the unit torus (cell side 1/b).
    pub fn field(&self, scale: f64) -> IndicatorField {
        let g = self.grid;
        IndicatorField::profile(g.d, [g.b, g.b, g.b], 1.0 / g.b as f64, true, self.values.iter().map(|v| v / scale).collect())
            .expect("consistent grid")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum LabelScheme {
    Averaged,
    AveragedRefined { l0: usize },
    FkCrossing { ell: usize },
    Percolation { ell: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhaseLabelField {
    pub grid: BlockGrid,
    pub zeta: f64,
    pub scheme: LabelScheme,
    pub labels: Vec<i8>,
}

impl PhaseLabelField {
    pub fn zero_fraction(&self) -> f64 {
        self.labels.iter().filter(|&&u| u == 0).count() as f64 / self.labels.len() as f64
    }

    /// *-adjacent pairs carrying opposite signs.
    pub fn assumption_b_violations(&self) -> usize {
        let mut v = 0;
        for i in 0..self.labels.len() {
            if self.labels[i] == 0 {
                continue;
            }
            for j in self.grid.star_neighbors(i) {
                if j > i && self.labels[i] * self.labels[j] < 0 {
                    v += 1;
                }
            }
        }
        v
    }

    /// Indicator with the minus phase as the set (labels 0 count as plus).
    pub fn minus_indicator(&self) -> IndicatorField {
        let g = self.grid;
        let v = self.labels.iter().map(|&u| if u < 0 { -1.0 } else { 1.0 }).collect();
        IndicatorField::new(g.d, [g.b, g.b, g.b], 1.0 / g.b as f64, true, v).expect("±1 values")
    }
}

fn check_zeta(zeta: f64, m_star: f64) -> Result<()> {
    if !(zeta > 0.0 && zeta < m_star) {
        return Err(CoarseError::BadParameter(format!("need 0 < zeta < m*, got zeta = {zeta}, m* = {m_star}")));
    }
    Ok(())
}

fn average_label(m: f64, zeta: f64, m_star: f64) -> i8 {
    if (m - m_star).abs() < zeta {
        1
    } else if (m + m_star).abs() < zeta {
        -1
    } else {
        0
    }
}

/// ±1 where the block mean is within ζ of ±m*, else 0.
pub fn labels_averaged(g: &Geometry, sigma: &SpinConfig, k: usize, zeta: f64, m_star: f64) -> Result<PhaseLabelField> {
    check_zeta(zeta, m_star)?;
    let p = local_magnetization(g, sigma, k)?;
    Ok(PhaseLabelField {
        grid: p.grid,
        zeta,
        scheme: LabelScheme::Averaged,
        labels: p.values.iter().map(|&m| average_label(m, zeta, m_star)).collect(),
    })
}

/// Fine labels at scale ℓ₀, unanimity lift to k₀, then zeroing of
/// *-adjacent opposite signs.
pub fn labels_averaged_refined(
    g: &Geometry,
    sigma: &SpinConfig,
    k0: usize,
    l0: usize,
    zeta: f64,
    m_star: f64,
) -> Result<PhaseLabelField> {
    if l0 >= k0 {
        return Err(CoarseError::BadParameter(format!("need l0 < k0, got {l0} >= {k0}")));
    }
    let fine = labels_averaged(g, sigma, l0, zeta, m_star)?;
    let coarse = local_magnetization(g, sigma, k0)?.grid;
    let f = 1usize << (k0 - l0);
    let mut lifted = vec![0i8; coarse.len()];
    let mut seen = vec![false; coarse.len()];
    for (i, &u) in fine.labels.iter().enumerate() {
        let c = fine.grid.coord(i);
        let j = coarse.index([c[0] / f, c[1] / f, c[2] / f]);
        if !seen[j] {
            lifted[j] = u;
            seen[j] = true;
        } else if lifted[j] != u {
            lifted[j] = 0;
        }
    }
    let mut out = lifted.clone();
    for i in 0..coarse.len() {
        for j in coarse.star_neighbors(i) {
            if lifted[i] * lifted[j] < 0 {
                out[i] = 0;
                out[j] = 0;
            }
        }
    }
    Ok(PhaseLabelField { grid: coarse, zeta, scheme: LabelScheme::AveragedRefined { l0 }, labels: out })
}

/// Outcome of the block events on the doubled box around one block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct BlockEvents {
    /// U: exactly one cluster touches every face.
    pub unique_crossing: bool,
    /// R: all other clusters have ℓ1-diameter ≤ 2^ℓ.
    pub regular: bool,
    /// V: |C* ∩ block|/M^d within ζ of Θ̂.
    pub density_ok: bool,
    pub density: f64,
    /// A site of C* (global index), if C* exists.
    pub anchor: Option<usize>,
}

struct LocalCluster {
    faces: u8,
    lo: [i64; 4],
    hi: [i64; 4],
    inner: usize,
    anchor: usize,
}

/// Block events for every block at scale k (periodic doubled boxes of side 2^{k+1}).
pub fn block_events(g: &Geometry, fk: &FkGraph, bonds: &BondConfig, k: usize, ell: usize, zeta: f64, theta: f64) -> Result<Vec<BlockEvents>> {
    let (d, n, log) = dyadic(g)?;
    if k + 3 > log + 3 || k >= log {
        return Err(CoarseError::BadScale { k, n: log.saturating_sub(1) });
    }
    if ell + 3 > k {
        return Err(CoarseError::BadParameter(format!("need ell <= k - 3, got ell = {ell}, k = {k}")));
    }
    if !g.is_periodic() {
        return Err(CoarseError::BadShape("doubled boxes need a torus".into()));
    }
    let m = 1usize << k;
    let side = 2 * m;
    let grid = BlockGrid { d, k, b: n >> k };
    // adjacency of open bonds
    let mut adj: Vec<Vec<u32>> = vec![Vec::new(); g.n_sites()];
    for (e, &[a, b]) in fk.edges.iter().enumerate() {
        if bonds.open[e] && (b as usize) < fk.n_sites {
            adj[a as usize].push(b);
            adj[b as usize].push(a);
        }
    }
    let signs: Vec<[i64; 3]> = match d {
        2 => vec![[1, 1, 0], [1, -1, 0]],
        _ => vec![[1, 1, 1], [1, 1, -1], [1, -1, 1], [1, -1, -1]],
    };
    let diam_cap = 1i64 << ell;
    let out: Vec<BlockEvents> = (0..grid.len())
        .into_par_iter()
        .map(|bi| {
            let bc = grid.coord(bi);
            let start: Vec<i64> = (0..d).map(|a| (bc[a] * m) as i64 - (m / 2) as i64).collect();
            let vol = side.pow(d as u32);
            let local_index = |c: &[i32; 3]| -> Option<(usize, [i64; 3])> {
                let mut l = [0i64; 3];
                let mut idx = 0usize;
                let mut mul = 1usize;
                for a in 0..d {
                    let x = (c[a] as i64 - start[a]).rem_euclid(n as i64);
                    if x >= side as i64 {
                        return None;
                    }
                    l[a] = x;
                    idx += x as usize * mul;
                    mul *= side;
                }
                Some((idx, l))
            };
            let mut uf = UnionFind::new(vol);
            let mut global = vec![usize::MAX; vol];
            let mut local = vec![[0i64; 3]; vol];
            for (li, slot) in global.iter_mut().enumerate() {
                let mut c = [0i32; 3];
                let mut r = li;
                for a in 0..d {
                    let x = (r % side) as i64;
                    r /= side;
                    local[li][a] = x;
                    c[a] = (start[a] + x).rem_euclid(n as i64) as i32;
                }
                *slot = g.site_at(c).expect("torus site");
            }
            for li in 0..vol {
                let gi = global[li];
                for &gj in &adj[gi] {
                    let cj = g.coord(gj as usize);
                    if let Some((lj, pj)) = local_index(&cj) {
                        // edges must join neighbours inside the box, not across its faces
                        let dist: i64 = (0..d).map(|a| (pj[a] - local[li][a]).abs()).sum();
                        if dist == 1 {
                            uf.union(li, lj);
                        }
                    }
                }
            }
            let mut clusters: std::collections::HashMap<usize, LocalCluster> = std::collections::HashMap::new();
            let lo_in = (m / 2) as i64;
            let hi_in = lo_in + m as i64;
            for li in 0..vol {
                let r = uf.find(li);
                let p = local[li];
                let e = clusters.entry(r).or_insert(LocalCluster { faces: 0, lo: [i64::MAX; 4], hi: [i64::MIN; 4], inner: 0, anchor: global[li] });
                for a in 0..d {
                    if p[a] == 0 {
                        e.faces |= 1 << (2 * a);
                    }
                    if p[a] == side as i64 - 1 {
                        e.faces |= 1 << (2 * a + 1);
                    }
                }
                for (si, s) in signs.iter().enumerate() {
                    let v = s[0] * p[0] + s[1] * p[1] + s[2] * p[2];
                    e.lo[si] = e.lo[si].min(v);
                    e.hi[si] = e.hi[si].max(v);
                }
                if (0..d).all(|a| p[a] >= lo_in && p[a] < hi_in) {
                    e.inner += 1;
                }
            }
            let all_faces = (1u8 << (2 * d)) - 1;
            let crossing: Vec<&LocalCluster> = clusters.values().filter(|c| c.faces == all_faces).collect();
            let mut ev = BlockEvents::default();
            if crossing.len() == 1 {
                ev.unique_crossing = true;
                let cs = crossing[0];
                ev.anchor = Some(cs.anchor);
                ev.density = cs.inner as f64 / m.pow(d as u32) as f64;
                ev.density_ok = (ev.density - theta).abs() <= zeta;
                ev.regular = clusters.values().all(|c| {
                    std::ptr::eq(c, cs) || (0..signs.len()).map(|s| c.hi[s] - c.lo[s]).max().unwrap_or(0) <= diam_cap
                });
            }
            ev
        })
        .collect();
    Ok(out)
}

/// Sign of C* where U, R, V hold and |M_k − sign·m*| < 2ζ; 0 elsewhere.
#[allow(clippy::too_many_arguments)]
pub fn labels_fk(
    g: &Geometry,
    fk: &FkGraph,
    bonds: &BondConfig,
    sigma: &SpinConfig,
    k: usize,
    ell: usize,
    zeta: f64,
    theta: f64,
    m_star: f64,
) -> Result<PhaseLabelField> {
    let ev = block_events(g, fk, bonds, k, ell, zeta, theta)?;
    let prof = local_magnetization(g, sigma, k)?;
    let labels = ev
        .iter()
        .zip(&prof.values)
        .map(|(e, &mk)| match e.anchor {
            Some(a) if e.unique_crossing && e.regular && e.density_ok => {
                let s = sigma.spins[a];
                if (mk - s as f64 * m_star).abs() < 2.0 * zeta {
                    s
                } else {
                    0
                }
            }
            _ => 0,
        })
        .collect();
    Ok(PhaseLabelField { grid: prof.grid, zeta, scheme: LabelScheme::FkCrossing { ell }, labels })
}

/// +1 on regular blocks whose C* belongs to the largest cluster, −1 on the
/// other regular blocks, 0 on irregular ones.
pub fn labels_percolation(g: &Geometry, fk: &FkGraph, bonds: &BondConfig, k: usize, ell: usize, theta: f64, zeta: f64) -> Result<PhaseLabelField> {
    let ev = block_events(g, fk, bonds, k, ell, zeta, theta)?;
    let mut uf = bonds.union_find(fk);
    let mut size = vec![0usize; fk.n_nodes()];
    for i in 0..fk.n_sites {
        let r = uf.find(i);
        size[r] += 1;
    }
    let big = (0..fk.n_nodes()).max_by_key(|&r| size[r]).unwrap_or(0);
    let (d, n, _) = dyadic(g)?;
    let grid = BlockGrid { d, k, b: n >> k };
    let labels = ev
        .iter()
        .map(|e| match e.anchor {
            Some(a) if e.unique_crossing && e.regular && e.density_ok => {
                if uf.find(a) == big {
                    1
                } else {
                    -1
                }
            }
            _ => 0,
        })
        .collect();
    Ok(PhaseLabelField { grid, zeta, scheme: LabelScheme::Percolation { ell }, labels })
}

/// Mean crossing-cluster density over blocks with a unique crossing cluster.
pub fn calibrate_theta(g: &Geometry, fk: &FkGraph, bonds: &BondConfig, k: usize, ell: usize) -> Result<f64> {
    let ev = block_events(g, fk, bonds, k, ell, 1.0, 0.0)?;
    let ds: Vec<f64> = ev.iter().filter(|e| e.unique_crossing).map(|e| e.density).collect();
    Ok(if ds.is_empty() { 0.0 } else { stats::mean(&ds) })
}

/// (1/|Tor|) Σ |f − g| over blocks.
pub fn l1_distance(f: &[f64], fg: BlockGrid, g: &[f64], gg: BlockGrid) -> Result<f64> {
    if fg != gg || f.len() != g.len() {
        return Err(CoarseError::GridMismatch(format!("{fg:?} vs {gg:?}")));
    }
    Ok(f.iter().zip(g).map(|(a, b)| (a - b).abs()).sum::<f64>() / f.len() as f64)
}

/// ‖M_k − m*·u_k‖₁ (normalized).
pub fn profile_label_distance(mk: &MagnetizationProfile, u: &PhaseLabelField, m_star: f64) -> Result<f64> {
    let uv: Vec<f64> = u.labels.iter().map(|&x| m_star * x as f64).collect();
    l1_distance(&mk.values, mk.grid, &uv, u.grid)
}

/// max |M_k − m*·u_k| over blocks with a nonzero label (0 if none).
pub fn check_c3(mk: &MagnetizationProfile, u: &PhaseLabelField, m_star: f64) -> Result<f64> {
    if mk.grid != u.grid {
        return Err(CoarseError::GridMismatch(format!("{:?} vs {:?}", mk.grid, u.grid)));
    }
    Ok(mk
        .values
        .iter()
        .zip(&u.labels)
        .filter(|(_, &l)| l != 0)
        .map(|(m, &l)| (m - m_star * l as f64).abs())
        .fold(0.0, f64::max))
}

#[derive(Clone, Debug, Serialize)]
pub struct ScaleTightness {
    pub k: usize,
    /// Mean fraction of zero labels (the ρ̂_k proxy).
    pub rho: Estimate,
    /// Frequency that two blocks half a torus apart are both zero.
    pub pair_zero: Estimate,
    /// pair_zero ≤ ρ̂²·(1 + 3σ) with σ the relative error of ρ̂².
    pub product_bound_ok: bool,
    pub assumption_b_violations: usize,
    /// Frequency of a perimeter above the threshold a (outside the compact K_a).
    pub outside_compact: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TightnessReport {
    pub scales: Vec<ScaleTightness>,
    pub samples: usize,
    pub low_sample: bool,
    /// ρ̂_k nonincreasing over the supplied scales, with a strict drop overall.
    pub rho_decreasing: bool,
}

/// `fields[s]` holds the label fields of sample s, one per scale (same
/// scales in the same order for every sample).
pub fn tightness_stats(fields: &[Vec<PhaseLabelField>], delta: f64, a: f64) -> TightnessReport {
    let n_scales = fields.first().map_or(0, |f| f.len());
    let mut scales = Vec::new();
    for si in 0..n_scales {
        let zs: Vec<f64> = fields.iter().map(|f| f[si].zero_fraction()).collect();
        let rho = stats::mean_with_error(&zs);
        let grid = fields[0][si].grid;
        let half = grid.b / 2;
        let pairs: Vec<f64> = fields
            .iter()
            .map(|f| {
                let u = &f[si];
                let mut both = 0usize;
                for i in 0..grid.len() {
                    let c = grid.coord(i);
                    let j = grid.index([(c[0] + half) % grid.b, c[1], c[2]]);
                    both += (u.labels[i] == 0 && u.labels[j] == 0) as usize;
                }
                both as f64 / grid.len() as f64
            })
            .collect();
        let pair_zero = stats::mean_with_error(&pairs);
        let r2 = rho.value * rho.value;
        let rel = if rho.value > 0.0 { 2.0 * rho.err / rho.value } else { 0.0 };
        let outside = fields
            .iter()
            .filter(|f| {
                let v = f[si].minus_indicator();
                perimeter_indicator(&v) > a + delta
            })
            .count() as f64
            / fields.len().max(1) as f64;
        scales.push(ScaleTightness {
            k: grid.k,
            rho,
            pair_zero,
            product_bound_ok: pair_zero.value <= r2 * (1.0 + 3.0 * rel) + 3.0 * pair_zero.err,
            assumption_b_violations: fields.iter().map(|f| f[si].assumption_b_violations()).sum(),
            outside_compact: outside,
        });
    }
    let rhos: Vec<f64> = scales.iter().map(|s| s.rho.value).collect();
    let rho_decreasing = rhos.len() >= 2 && rhos.windows(2).all(|w| w[1] <= w[0]) && rhos[rhos.len() - 1] < rhos[0];
    TightnessReport { scales, samples: fields.len(), low_sample: fields.len() < 100, rho_decreasing }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_lattice, Wiring};
    use crate::rng::RngStream;
    use crate::samplers::bernoulli_sample;
    use proptest::prelude::*;

    fn torus(d: usize, n: usize) -> Geometry {
        build_lattice(&ShapeSpec::torus(d, n)).unwrap()
    }

    fn random_spins(n: usize, seed: u64) -> SpinConfig {
        let mut r = RngStream::new(seed, 0);
        SpinConfig { spins: (0..n).map(|_| r.sign()).collect() }
    }

    #[test]
    fn profile_extremes() {
        let g = torus(2, 16);
        let p = local_magnetization(&g, &SpinConfig::constant(256, 1), 2).unwrap();
        assert!(p.values.iter().all(|&v| v == 1.0));
        let s = random_spins(256, 1);
        let top = local_magnetization(&g, &s, 4).unwrap();
        assert_eq!(top.values.len(), 1);
        assert_eq!(top.values[0], s.total() as f64 / 256.0);
        let raw = local_magnetization(&g, &s, 0).unwrap();
        for (i, c) in g.coords().iter().enumerate() {
            assert_eq!(raw.values[raw.grid.index([c[0] as usize, c[1] as usize, 0])], s.spins[i] as f64);
        }
        assert!(matches!(local_magnetization(&torus(2, 12), &SpinConfig::constant(144, 1), 1), Err(CoarseError::NotDyadic(12))));
    }

    proptest! {
        #[test]
        fn refinement_consistency(seed in 0u64..5000, d in 2usize..4) {
            let n = if d == 2 { 16 } else { 8 };
            let g = torus(d, n);
            let s = random_spins(g.n_sites(), seed);
            let p1 = local_magnetization(&g, &s, 1).unwrap();
            let p2 = local_magnetization(&g, &s, 2).unwrap();
            let c = p1.coarsen().unwrap();
            prop_assert_eq!(c.grid, p2.grid);
            for (a, b) in c.values.iter().zip(&p2.values) {
                prop_assert!((a - b).abs() < 1e-15);
            }
        }

        #[test]
        fn block_means_match_recount(seed in 0u64..5000) {
            let g = torus(2, 16);
            let s = random_spins(256, seed);
            let p = local_magnetization(&g, &s, 2).unwrap();
            for bi in 0..p.grid.len() {
                let c = p.grid.coord(bi);
                let mut sum = 0i64;
                for y in 0..4 { for x in 0..4 {
                    sum += s.spins[g.site_at([(4 * c[0] + x) as i32, (4 * c[1] + y) as i32, 0]).unwrap()] as i64;
                }}
                prop_assert_eq!(p.values[bi], sum as f64 / 16.0);
            }
        }

        #[test]
        fn zero_set_shrinks_with_zeta(seed in 0u64..5000) {
            let g = torus(2, 16);
            let s = random_spins(256, seed);
            let a = labels_averaged(&g, &s, 1, 0.1, 0.9).unwrap();
            let b = labels_averaged(&g, &s, 1, 0.2, 0.9).unwrap();
            for (x, y) in a.labels.iter().zip(&b.labels) {
                prop_assert!(*y == 0 && *x == 0 || *y != 0);
            }
            let m = local_magnetization(&g, &s, 1).unwrap();
            prop_assert!(check_c3(&m, &a, 0.9).unwrap() < 0.1);
            let z = a.zero_fraction();
            prop_assert!(profile_label_distance(&m, &a, 0.9).unwrap() <= 0.1 + 2.0 * z);
        }
    }

    #[test]
    fn averaged_labels() {
        let g = torus(2, 16);
        let p = labels_averaged(&g, &SpinConfig::constant(256, 1), 2, 0.1, 0.95).unwrap();
        assert!(p.labels.iter().all(|&u| u == 1));
        let cb = SpinConfig { spins: g.coords().iter().map(|c| if (c[0] + c[1]) % 2 == 0 { 1 } else { -1 }).collect() };
        let q = labels_averaged(&g, &cb, 2, 0.5, 0.95).unwrap();
        assert!(q.labels.iter().all(|&u| u == 0));
        assert!(labels_averaged(&g, &cb, 2, 0.99, 0.95).is_err());
    }

    #[test]
    fn refined_labels() {
        let g = torus(2, 32);
        let half = SpinConfig { spins: g.coords().iter().map(|c| if c[0] < 16 { 1 } else { -1 }).collect() };
        let u = labels_averaged_refined(&g, &half, 3, 1, 0.2, 1.0).unwrap();
        assert_eq!(u.assumption_b_violations(), 0);
        // blocks of side 8: columns 0,1 plus, 2,3 minus; every column touches the
        // other phase across a periodic seam, so all are zeroed
        for i in 0..u.grid.len() {
            assert_eq!(u.labels[i], 0);
        }
        let g = torus(2, 64);
        let half = SpinConfig { spins: g.coords().iter().map(|c| if c[0] < 32 { 1 } else { -1 }).collect() };
        let u = labels_averaged_refined(&g, &half, 3, 1, 0.2, 1.0).unwrap();
        for i in 0..u.grid.len() {
            let x = u.grid.coord(i)[0];
            let band = x == 3 || x == 4 || x == 7 || x == 0;
            assert_eq!(u.labels[i] == 0, band, "block column {x}");
        }
        // one flipped fine block
        let mut s = SpinConfig::constant(64 * 64, 1);
        for y in 10..12 {
            for x in 20..22 {
                s.spins[g.site_at([x, y, 0]).unwrap()] = -1;
            }
        }
        let u = labels_averaged_refined(&g, &s, 3, 1, 0.2, 1.0).unwrap();
        assert_eq!(u.labels.iter().filter(|&&x| x == 0).count(), 1);
        assert_eq!(u.assumption_b_violations(), 0);
    }

    #[test]
    fn fk_labels_extremes() {
        let g = torus(2, 32);
        let fk = FkGraph::new(&g, &Wiring::Periodic).unwrap();
        let all = BondConfig { open: vec![true; fk.n_edges()] };
        let minus = SpinConfig::constant(1024, -1);
        let u = labels_fk(&g, &fk, &all, &minus, 3, 0, 0.1, 1.0, 1.0).unwrap();
        assert!(u.labels.iter().all(|&x| x == -1));
        let none = BondConfig::closed(fk.n_edges());
        let u = labels_fk(&g, &fk, &none, &minus, 3, 0, 0.1, 1.0, 1.0).unwrap();
        assert!(u.labels.iter().all(|&x| x == 0));
        assert!(labels_fk(&g, &fk, &all, &minus, 3, 1, 0.1, 1.0, 1.0).is_err());
        let p = labels_percolation(&g, &fk, &all, 3, 0, 1.0, 0.1).unwrap();
        assert!(p.labels.iter().all(|&x| x == 1));
        let p = labels_percolation(&g, &fk, &none, 3, 0, 1.0, 0.1).unwrap();
        assert!(p.labels.iter().all(|&x| x == 0));
    }

    /// Brute-force events: BFS clusters inside the doubled box by explicit coordinates.
    fn brute_events(g: &Geometry, fk: &FkGraph, b: &BondConfig, k: usize, ell: usize, zeta: f64, theta: f64) -> Vec<(bool, bool, bool)> {
        let (d, n, _) = dyadic(g).unwrap();
        let m = 1usize << k;
        let grid = BlockGrid { d, k, b: n >> k };
        let open: std::collections::HashSet<(usize, usize)> = fk
            .edges
            .iter()
            .enumerate()
            .filter(|(e, _)| b.open[*e])
            .flat_map(|(_, &[x, y])| [(x as usize, y as usize), (y as usize, x as usize)])
            .collect();
        (0..grid.len())
            .map(|bi| {
                let bc = grid.coord(bi);
                let side = 2 * m as i64;
                let mut sites = Vec::new();
                let mut it = [0i64; 3];
                loop {
                    sites.push(it);
                    let mut a = 0;
                    loop {
                        if a == d {
                            break;
                        }
                        it[a] += 1;
                        if it[a] < side {
                            break;
                        }
                        it[a] = 0;
                        a += 1;
                    }
                    if a == d {
                        break;
                    }
                }
                let gid = |l: [i64; 3]| {
                    let mut c = [0i32; 3];
                    for a in 0..d {
                        c[a] = ((bc[a] * m) as i64 - (m / 2) as i64 + l[a]).rem_euclid(n as i64) as i32;
                    }
                    g.site_at(c).unwrap()
                };
                let mut label = std::collections::HashMap::new();
                let mut comps: Vec<Vec<[i64; 3]>> = Vec::new();
                for &s in &sites {
                    if label.contains_key(&s) {
                        continue;
                    }
                    let id = comps.len();
                    let mut comp = vec![s];
                    label.insert(s, id);
                    let mut q = vec![s];
                    while let Some(p) = q.pop() {
                        for a in 0..d {
                            for dl in [-1i64, 1] {
                                let mut r = p;
                                r[a] += dl;
                                if r[a] < 0 || r[a] >= side || label.contains_key(&r) {
                                    continue;
                                }
                                if open.contains(&(gid(p), gid(r))) {
                                    label.insert(r, id);
                                    comp.push(r);
                                    q.push(r);
                                }
                            }
                        }
                    }
                    comps.push(comp);
                }
                let crosses = |c: &Vec<[i64; 3]>| (0..d).all(|a| c.iter().any(|p| p[a] == 0) && c.iter().any(|p| p[a] == side - 1));
                let cross: Vec<usize> = (0..comps.len()).filter(|&i| crosses(&comps[i])).collect();
                if cross.len() != 1 {
                    return (false, false, false);
                }
                let cs = cross[0];
                let diam = |c: &Vec<[i64; 3]>| {
                    let mut best = 0;
                    for x in c {
                        for y in c {
                            best = best.max((0..d).map(|a| (x[a] - y[a]).abs()).sum::<i64>());
                        }
                    }
                    best
                };
                let regular = (0..comps.len()).all(|i| i == cs || diam(&comps[i]) <= 1 << ell);
                let lo = (m / 2) as i64;
                let inner = comps[cs].iter().filter(|p| (0..d).all(|a| p[a] >= lo && p[a] < lo + m as i64)).count();
                let dens = inner as f64 / m.pow(d as u32) as f64;
                (true, regular, (dens - theta).abs() <= zeta)
            })
            .collect()
    }

    #[test]
    fn block_events_match_brute_force() {
        for (d, n, p) in [(2usize, 32usize, 0.55), (2, 32, 0.7), (3, 16, 0.3)] {
            let g = torus(d, n);
            let fk = FkGraph::new(&g, &Wiring::Periodic).unwrap();
            let mut rng = RngStream::new(7, d as u64);
            let b = bernoulli_sample(&fk, p, &mut rng).unwrap();
            let k = 3;
            let fast = block_events(&g, &fk, &b, k, 0, 0.15, p).unwrap();
            let slow = brute_events(&g, &fk, &b, k, 0, 0.15, p);
            for (f, s) in fast.iter().zip(&slow) {
                assert_eq!((f.unique_crossing, f.unique_crossing && f.regular, f.unique_crossing && f.density_ok), *s);
            }
        }
    }

    #[test]
    fn l1_and_tightness() {
        let gr = BlockGrid { d: 2, k: 1, b: 4 };
        assert_eq!(l1_distance(&[1.0; 16], gr, &[1.0; 16], gr).unwrap(), 0.0);
        assert_eq!(l1_distance(&[1.0; 16], gr, &[-1.0; 16], gr).unwrap(), 2.0);
        assert!(l1_distance(&[1.0; 16], gr, &[1.0; 4], BlockGrid { d: 2, k: 2, b: 2 }).is_err());
        let f = |labels: Vec<i8>, k: usize, b: usize| PhaseLabelField { grid: BlockGrid { d: 2, k, b }, zeta: 0.1, scheme: LabelScheme::Averaged, labels };
        let samples: Vec<Vec<PhaseLabelField>> = (0..10)
            .map(|s| vec![f((0..16).map(|i| if (i + s) % 4 == 0 { 0 } else { 1 }).collect(), 1, 4), f(vec![1; 4], 2, 2)])
            .collect();
        let r = tightness_stats(&samples, 0.1, 10.0);
        assert!(r.low_sample);
        assert!(r.rho_decreasing);
        assert_eq!(r.scales[0].assumption_b_violations, 0);
        assert!((r.scales[0].rho.value - 0.25).abs() < 1e-12);
    }
}
