//! Exact enumeration on tiny volumes: Gibbs tables, random-cluster tables,
//! planar duality and random-line weights.
//!
//! Dual vertices are the corners of the unit squares centred at the sites of
//! a planar region. Corner `(a, b)` stands for the point `(a - 1/2, b - 1/2)`.
//! The dual graph has one edge per side of those squares, i.e. one per bond
//! touching the region.

use crate::lattice::{
    BoundaryCondition, CouplingSpec, FkGraph, Geometry, LatticeError, LocalEnv,
};
use crate::stats::{ksum, KahanSum};
use crate::unionfind::UnionFind;
use serde::Serialize;
use std::collections::HashMap;
use thiserror::Error;

pub const MAX_SITES: usize = 24;
pub const MAX_EDGES: usize = 24;
pub const MAX_DUAL_SITES: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum ExactError {
    #[error("enumeration cap exceeded: {what} = {got} > {cap}")]
    CapExceeded { what: &'static str, got: usize, cap: usize },
    #[error("site {0} outside the region")]
    SiteOutOfRange(usize),
    #[error("region is not simply connected")]
    NotSimplyConnected,
    #[error("beta must be positive, got {0}")]
    NonPositiveBeta(f64),
    #[error("dual edge {0:?} is not in the dual domain")]
    EdgeNotInDomain([[i32; 2]; 2]),
    #[error("edge set is not a contour: {0}")]
    NotAContour(String),
    #[error("no configuration has magnetization {0}")]
    InfeasibleMagnetization(i64),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

pub type Result<T> = std::result::Result<T, ExactError>;

/// Exact Gibbs law, indexed by `SpinConfig::index` (bit i set when σ_i = +1).
#[derive(Clone, Debug, Serialize)]
pub struct ExactTable {
    pub n_sites: usize,
    pub probs: Vec<f64>,
    pub log_z: f64,
}

pub fn enumerate_gibbs(g: &Geometry, bc: &BoundaryCondition, c: &CouplingSpec, h: f64) -> Result<ExactTable> {
    let n = g.n_sites();
    if n > MAX_SITES {
        return Err(ExactError::CapExceeded { what: "sites", got: n, cap: MAX_SITES });
    }
    c.validate()?;
    let env = LocalEnv::new(g, bc, &c.kind, h)?;
    let size = 1usize << n;
    let mut s = vec![-1i8; n];
    let mut log_w = vec![0.0; size];
    // Gray-code walk with incremental energy
    let mut e = env.energy(&s);
    let mut idx = 0usize;
    log_w[0] = -c.beta * e;
    for step in 1..size {
        let bit = step.trailing_zeros() as usize;
        let f = env.field(&s, bit);
        e += 2.0 * s[bit] as f64 * f;
        s[bit] = -s[bit];
        idx ^= 1 << bit;
        log_w[idx] = -c.beta * e;
    }
    let mx = log_w.iter().cloned().fold(f64::MIN, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - mx).exp()).collect();
    let z = ksum(w.iter().copied());
    Ok(ExactTable { n_sites: n, probs: w.iter().map(|x| x / z).collect(), log_z: mx + z.ln() })
}

impl ExactTable {
    pub fn expectation<F: Fn(u64) -> f64>(&self, f: F) -> f64 {
        ksum(self.probs.iter().enumerate().map(|(i, p)| p * f(i as u64)))
    }

    pub fn spin(idx: u64, i: usize) -> f64 {
        if idx >> i & 1 == 1 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn magnetization_of(&self, idx: u64) -> i64 {
        2 * (idx.count_ones() as i64) - self.n_sites as i64
    }

    pub fn two_point(&self, i: usize, j: usize) -> f64 {
        self.expectation(|x| Self::spin(x, i) * Self::spin(x, j))
    }

    pub fn mean_spin(&self, i: usize) -> f64 {
        self.expectation(|x| Self::spin(x, i))
    }

    /// Variance of the total magnetization.
    pub fn magnetization_variance(&self) -> f64 {
        let m1 = self.expectation(|x| self.magnetization_of(x) as f64);
        let m2 = self.expectation(|x| (self.magnetization_of(x) as f64).powi(2));
        m2 - m1 * m1
    }

    /// Law conditioned on total magnetization `m`.
    pub fn conditioned(&self, m: i64) -> Result<Vec<f64>> {
        let mut out: Vec<f64> =
            self.probs.iter().enumerate().map(|(i, &p)| if self.magnetization_of(i as u64) == m { p } else { 0.0 }).collect();
        let z = ksum(out.iter().copied());
        if z == 0.0 {
            return Err(ExactError::InfeasibleMagnetization(m));
        }
        out.iter_mut().for_each(|p| *p /= z);
        Ok(out)
    }
}

/// ⟨σ_i σ_j⟩ for the nearest-neighbour model at zero field.
pub fn exact_two_point(g: &Geometry, bc: &BoundaryCondition, beta: f64, i: usize, j: usize) -> Result<f64> {
    for k in [i, j] {
        if k >= g.n_sites() {
            return Err(ExactError::SiteOutOfRange(k));
        }
    }
    let t = enumerate_gibbs(g, bc, &CouplingSpec::nn(beta), 0.0)?;
    Ok(t.two_point(i, j))
}

/// Random-cluster law with cluster weight q, indexed by `BondConfig::index`.
pub fn enumerate_fk(fk: &FkGraph, p: f64, q: f64) -> Result<Vec<f64>> {
    let m = fk.n_edges();
    if m > MAX_EDGES {
        return Err(ExactError::CapExceeded { what: "edges", got: m, cap: MAX_EDGES });
    }
    let mut w = Vec::with_capacity(1 << m);
    let mut uf = UnionFind::new(fk.n_nodes());
    for idx in 0u64..(1 << m) {
        uf.reset();
        let mut k = 0;
        for (e, &[a, b]) in fk.edges.iter().enumerate() {
            if idx >> e & 1 == 1 {
                uf.union(a as usize, b as usize);
                k += 1;
            }
        }
        let comps = (0..fk.n_nodes()).filter(|&x| uf.find(x) == x).count();
        let c = comps - fk.ghost.is_some() as usize;
        w.push(p.powi(k) * (1.0 - p).powi(m as i32 - k) * q.powi(c as i32));
    }
    let z = ksum(w.iter().copied());
    Ok(w.into_iter().map(|x| x / z).collect())
}

/// True when the union of closed unit squares at `sites` is connected and
/// has no holes.
pub fn is_simply_connected(sites: &[[i32; 2]]) -> bool {
    if sites.is_empty() {
        return false;
    }
    let set: std::collections::HashSet<[i32; 2]> = sites.iter().copied().collect();
    // 8-connectivity of the squares (corner contact keeps the union connected)
    let mut seen = std::collections::HashSet::new();
    let mut stack = vec![sites[0]];
    seen.insert(sites[0]);
    while let Some(p) = stack.pop() {
        for dx in -1..=1 {
            for dy in -1..=1 {
                let q = [p[0] + dx, p[1] + dy];
                if set.contains(&q) && seen.insert(q) {
                    stack.push(q);
                }
            }
        }
    }
    if seen.len() != set.len() {
        return false;
    }
    // every empty cell inside the padded bounding box must reach the border
    let (mut lo, mut hi) = ([i32::MAX; 2], [i32::MIN; 2]);
    for s in sites {
        for k in 0..2 {
            lo[k] = lo[k].min(s[k] - 1);
            hi[k] = hi[k].max(s[k] + 1);
        }
    }
    let mut outside = std::collections::HashSet::new();
    let mut stack = vec![lo];
    outside.insert(lo);
    while let Some(p) = stack.pop() {
        for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
            let q = [p[0] + dx, p[1] + dy];
            if q[0] < lo[0] || q[1] < lo[1] || q[0] > hi[0] || q[1] > hi[1] {
                continue;
            }
            if !set.contains(&q) && outside.insert(q) {
                stack.push(q);
            }
        }
    }
    let cells = ((hi[0] - lo[0] + 1) * (hi[1] - lo[1] + 1)) as usize;
    outside.len() + set.len() == cells
}

#[derive(Clone, Debug)]
pub struct DualDomain {
    pub sites: Vec<[i32; 2]>,
    pub vertices: Vec<[i32; 2]>,
    /// Edges as vertex-index pairs, smaller index first.
    pub edges: Vec<[usize; 2]>,
    vindex: HashMap<[i32; 2], usize>,
    eindex: HashMap<[usize; 2], usize>,
}

impl DualDomain {
    pub fn from_sites(sites: &[[i32; 2]]) -> Result<Self> {
        if !is_simply_connected(sites) {
            return Err(ExactError::NotSimplyConnected);
        }
        let mut sites = sites.to_vec();
        sites.sort_by_key(|s| (s[1], s[0]));
        sites.dedup();
        let mut corners: Vec<[i32; 2]> =
            sites.iter().flat_map(|&[x, y]| [[x, y], [x + 1, y], [x, y + 1], [x + 1, y + 1]]).collect();
        corners.sort_by_key(|c| (c[1], c[0]));
        corners.dedup();
        if corners.len() > MAX_DUAL_SITES {
            return Err(ExactError::CapExceeded { what: "dual sites", got: corners.len(), cap: MAX_DUAL_SITES });
        }
        let vindex: HashMap<[i32; 2], usize> = corners.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let mut edges = Vec::new();
        for &[x, y] in &sites {
            let sq = [[x, y], [x + 1, y], [x + 1, y + 1], [x, y + 1]];
            for k in 0..4 {
                let (a, b) = (vindex[&sq[k]], vindex[&sq[(k + 1) % 4]]);
                edges.push([a.min(b), a.max(b)]);
            }
        }
        edges.sort();
        edges.dedup();
        if edges.len() > 64 {
            return Err(ExactError::CapExceeded { what: "dual edges", got: edges.len(), cap: 64 });
        }
        let eindex = edges.iter().enumerate().map(|(i, &e)| (e, i)).collect();
        Ok(DualDomain { sites, vertices: corners, edges, vindex, eindex })
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn vertex(&self, c: [i32; 2]) -> Option<usize> {
        self.vindex.get(&c).copied()
    }

    pub fn edge(&self, a: [i32; 2], b: [i32; 2]) -> Option<usize> {
        let (i, j) = (self.vertex(a)?, self.vertex(b)?);
        self.eindex.get(&[i.min(j), i.max(j)]).copied()
    }

    /// Number of primal bonds touching the region (= number of dual edges).
    pub fn n_bonds(&self) -> usize {
        self.edges.len()
    }

    /// Edge mask of the unit contour around a site.
    pub fn plaquette(&self, site: [i32; 2]) -> Option<u64> {
        let [x, y] = site;
        let sq = [[x, y], [x + 1, y], [x + 1, y + 1], [x, y + 1]];
        let mut m = 0;
        for k in 0..4 {
            m |= 1u64 << self.edge(sq[k], sq[(k + 1) % 4])?;
        }
        Some(m)
    }

    fn vertex_mask(&self, edges: u64) -> u32 {
        let mut m = 0u32;
        let mut e = edges;
        while e != 0 {
            let k = e.trailing_zeros() as usize;
            m |= 1 << self.edges[k][0] | 1 << self.edges[k][1];
            e &= e - 1;
        }
        m
    }

    fn odd_vertices(&self, edges: u64) -> u32 {
        let mut m = 0u32;
        let mut e = edges;
        while e != 0 {
            let k = e.trailing_zeros() as usize;
            m ^= 1 << self.edges[k][0] ^ 1 << self.edges[k][1];
            e &= e - 1;
        }
        m
    }

    /// Connected components of an edge set, as edge masks.
    fn components(&self, edges: u64) -> Vec<u64> {
        let mut uf = UnionFind::new(self.n_vertices());
        let mut e = edges;
        while e != 0 {
            let k = e.trailing_zeros() as usize;
            uf.union(self.edges[k][0], self.edges[k][1]);
            e &= e - 1;
        }
        let mut by_root: Vec<(usize, u64)> = Vec::new();
        let mut e = edges;
        while e != 0 {
            let k = e.trailing_zeros() as usize;
            let r = uf.find(self.edges[k][0]);
            match by_root.iter_mut().find(|(rr, _)| *rr == r) {
                Some((_, m)) => *m |= 1 << k,
                None => by_root.push((r, 1 << k)),
            }
            e &= e - 1;
        }
        by_root.into_iter().map(|(_, m)| m).collect()
    }

    /// Fundamental cycles of a spanning tree, and tree paths from vertex 0.
    fn cycle_basis(&self) -> (Vec<u64>, Vec<u64>) {
        let n = self.n_vertices();
        let mut adj = vec![Vec::new(); n];
        for (k, &[a, b]) in self.edges.iter().enumerate() {
            adj[a].push((b, k));
            adj[b].push((a, k));
        }
        let mut path = vec![u64::MAX; n];
        path[0] = 0;
        let mut tree = 0u64;
        let mut queue = std::collections::VecDeque::from([0usize]);
        while let Some(v) = queue.pop_front() {
            for &(w, k) in &adj[v] {
                if path[w] == u64::MAX {
                    path[w] = path[v] | 1 << k;
                    tree |= 1 << k;
                    queue.push_back(w);
                }
            }
        }
        let mut basis = Vec::new();
        for (k, &[a, b]) in self.edges.iter().enumerate() {
            if tree >> k & 1 == 0 {
                basis.push(path[a] ^ path[b] ^ 1 << k);
            }
        }
        (basis, path)
    }

    /// All even subgraphs (every vertex of even degree).
    pub fn even_subgraphs(&self) -> Vec<u64> {
        let (basis, _) = self.cycle_basis();
        let mut out = Vec::with_capacity(1 << basis.len());
        let mut cur = 0u64;
        out.push(0);
        for step in 1u64..(1 << basis.len()) {
            cur ^= basis[step.trailing_zeros() as usize];
            out.push(cur);
        }
        out
    }

    /// Some edge set whose odd vertices are exactly {u, v}.
    fn path_between(&self, u: usize, v: usize) -> u64 {
        let (_, path) = self.cycle_basis();
        path[u] ^ path[v]
    }
}

/// Outcome of the two duality checks.
#[derive(Clone, Debug, Serialize)]
pub struct DualityReport {
    /// Z^β_+(Λ) by spin enumeration.
    pub lhs_spins: f64,
    /// Z^β_+(Λ) as e^{β|E|} times the closed-contour sum.
    pub lhs_contours: f64,
    /// Z^{β*}(Λ*) by spin enumeration of the dual model, free boundary.
    pub rhs_dual_spins: f64,
    /// Z^{β*}(Λ*) by the high-temperature polygon sum.
    pub rhs_polygons: f64,
    /// Z^β_+(Λ) / Z^{β*}(Λ*), reported as measured.
    pub c_lambda: f64,
    /// Closed form e^{β|E|} / (2^{|V*|} cosh^{|E*|} β*) for comparison.
    pub c_lambda_formula: f64,
    pub max_rel_err: f64,
}

pub(crate) fn dual_beta(beta: f64) -> f64 {
    (-2.0 * beta).exp().atanh()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs())
}

/// Spin sum of the free-boundary Ising model on the dual graph.
fn dual_spin_weights(dom: &DualDomain, beta_star: f64) -> Vec<f64> {
    let n = dom.n_vertices();
    (0u32..(1 << n))
        .map(|s| {
            let mut agree = 0i32;
            for &[a, b] in &dom.edges {
                agree += if (s >> a ^ s >> b) & 1 == 0 { 1 } else { -1 };
            }
            (beta_star * agree as f64).exp()
        })
        .collect()
}

pub fn verify_duality(sites: &[[i32; 2]], beta: f64) -> Result<DualityReport> {
    if beta <= 0.0 {
        return Err(ExactError::NonPositiveBeta(beta));
    }
    let dom = DualDomain::from_sites(sites)?;
    let g = crate::lattice::build_lattice(&crate::lattice::ShapeSpec::Region { sites: sites.to_vec() })?;
    let table = enumerate_gibbs(&g, &BoundaryCondition::Plus, &CouplingSpec::nn(beta), 0.0)?;
    let lhs_spins = table.log_z.exp();
    let n_bonds = g.edges().len() + g.boundary_edges().len();
    debug_assert_eq!(n_bonds, dom.n_bonds());
    let evens = dom.even_subgraphs();
    let w = (-2.0 * beta).exp();
    let contour_sum = ksum(evens.iter().map(|m| w.powi(m.count_ones() as i32)));
    let lhs_contours = (beta * n_bonds as f64).exp() * contour_sum;
    let bs = dual_beta(beta);
    let t = bs.tanh();
    let rhs_dual_spins = ksum(dual_spin_weights(&dom, bs));
    let poly = ksum(evens.iter().map(|m| t.powi(m.count_ones() as i32)));
    let rhs_polygons = 2f64.powi(dom.n_vertices() as i32) * bs.cosh().powi(dom.n_edges() as i32) * poly;
    let c_lambda = lhs_spins / rhs_dual_spins;
    let c_lambda_formula =
        (beta * n_bonds as f64).exp() / (2f64.powi(dom.n_vertices() as i32) * bs.cosh().powi(dom.n_edges() as i32));
    let max_rel_err = [
        rel(lhs_spins, lhs_contours),
        rel(rhs_dual_spins, rhs_polygons),
        rel(c_lambda, c_lambda_formula),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    Ok(DualityReport { lhs_spins, lhs_contours, rhs_dual_spins, rhs_polygons, c_lambda, c_lambda_formula, max_rel_err })
}

/// An open contour with its weight.
#[derive(Clone, Copy, Debug)]
pub struct WeightedLine {
    pub edges: u64,
    pub vertices: u32,
    pub q: f64,
}

/// Random-line weights q^{β*}_{Λ*} on one dual domain.
#[derive(Clone, Debug)]
pub struct RandomLineOracle {
    pub domain: DualDomain,
    pub beta_star: f64,
    t: f64,
    /// g[U] = Σ over even subgraphs with vertex set inside U of t^{|Γ|}.
    g: Vec<f64>,
    evens: Vec<u64>,
}

impl RandomLineOracle {
    pub fn new(domain: DualDomain, beta_star: f64) -> Self {
        let t = beta_star.tanh();
        let evens = domain.even_subgraphs();
        let n = domain.n_vertices();
        let mut acc = vec![KahanSum::new(); 1 << n];
        for &m in &evens {
            acc[domain.vertex_mask(m) as usize].add(t.powi(m.count_ones() as i32));
        }
        let mut g: Vec<f64> = acc.iter().map(|k| k.value()).collect();
        for b in 0..n {
            for u in 0..(1usize << n) {
                if u >> b & 1 == 1 {
                    g[u] += g[u ^ 1 << b];
                }
            }
        }
        RandomLineOracle { domain, beta_star, t, g, evens }
    }

    fn full(&self) -> u32 {
        ((1u64 << self.domain.n_vertices()) - 1) as u32
    }

    /// Z(Λ*) in units of 2^{|V*|} cosh^{|E*|} β*.
    pub fn z(&self) -> f64 {
        self.g[self.full() as usize]
    }

    /// Z(Λ* | F): closed families avoiding the vertex set F.
    pub fn z_avoiding(&self, f: u32) -> f64 {
        self.g[(self.full() & !f) as usize]
    }

    /// Weight of a compatible family given by an edge mask.
    pub fn weight_mask(&self, edges: u64) -> f64 {
        self.t.powi(edges.count_ones() as i32) * self.z_avoiding(self.domain.vertex_mask(edges)) / self.z()
    }

    /// Weight of a family of contours given by dual-edge endpoint pairs.
    pub fn weight(&self, edges: &[[[i32; 2]; 2]]) -> Result<f64> {
        let mut mask = 0u64;
        for e in edges {
            let k = self.domain.edge(e[0], e[1]).ok_or(ExactError::EdgeNotInDomain(*e))?;
            if mask >> k & 1 == 1 {
                return Err(ExactError::NotAContour(format!("edge {e:?} repeated")));
            }
            mask |= 1 << k;
        }
        for comp in self.domain.components(mask) {
            let odd = self.domain.odd_vertices(comp).count_ones();
            if odd != 0 && odd != 2 {
                return Err(ExactError::NotAContour(format!("component with {odd} odd vertices")));
            }
        }
        Ok(self.weight_mask(mask))
    }

    /// All open contours λ with ∂λ = {u, v} and their weights.
    pub fn open_contours(&self, u: usize, v: usize) -> Vec<WeightedLine> {
        let p = self.domain.path_between(u, v);
        let mut seen: HashMap<u64, ()> = HashMap::new();
        let mut out = Vec::new();
        for &c in &self.evens {
            let gamma = p ^ c;
            let lam = self
                .domain
                .components(gamma)
                .into_iter()
                .find(|&m| self.domain.vertex_mask(m) >> u & 1 == 1)
                .expect("u is odd so it carries an edge");
            if seen.insert(lam, ()).is_none() {
                out.push(WeightedLine { edges: lam, vertices: self.domain.vertex_mask(lam), q: self.weight_mask(lam) });
            }
        }
        out
    }

    /// ⟨σ_u σ_v⟩ of the dual model for all pairs, via a Walsh-Hadamard
    /// transform of the Boltzmann weights.
    pub fn dual_two_point(&self) -> Vec<Vec<f64>> {
        let n = self.domain.n_vertices();
        let mut w = dual_spin_weights(&self.domain, self.beta_star);
        let mut h = 1;
        while h < w.len() {
            for i in (0..w.len()).step_by(2 * h) {
                for j in i..i + h {
                    let (a, b) = (w[j], w[j + h]);
                    w[j] = a + b;
                    w[j + h] = a - b;
                }
            }
            h *= 2;
        }
        let z = w[0];
        let mut out = vec![vec![1.0; n]; n];
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    out[a][b] = w[1 << a | 1 << b] / z;
                }
            }
        }
        out
    }
}

pub fn contour_weight(sites: &[[i32; 2]], beta_star: f64, edges: &[[[i32; 2]; 2]]) -> Result<f64> {
    let dom = DualDomain::from_sites(sites)?;
    RandomLineOracle::new(dom, beta_star).weight(edges)
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct IdentityReport {
    pub pairs: usize,
    pub max_rel_err: f64,
}

/// Σ_{λ: u→v} q(λ) against the dual two-point function for every pair.
pub fn check_random_line(o: &RandomLineOracle) -> IdentityReport {
    let corr = o.dual_two_point();
    let n = o.domain.n_vertices();
    let mut rep = IdentityReport::default();
    for u in 0..n {
        for v in u + 1..n {
            let s = ksum(o.open_contours(u, v).iter().map(|l| l.q));
            rep.pairs += 1;
            rep.max_rel_err = rep.max_rel_err.max(rel(s, corr[u][v]));
        }
    }
    rep
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct InequalityReport {
    pub checked: usize,
    pub violations: usize,
    /// Largest (rhs - lhs) / rhs over violated instances, 0 if none.
    pub worst: f64,
}

impl InequalityReport {
    fn record(&mut self, small: f64, big: f64) {
        self.checked += 1;
        if small > big * (1.0 + 1e-12) + 1e-300 {
            self.violations += 1;
            self.worst = self.worst.max((small - big) / big);
        }
    }
}

/// q(λ1 ∪ λ2) ≥ q(λ1) q(λ2) over all pairs of vertex-disjoint open contours.
/// The weights depend on λ only through |λ| and V(λ), so the check runs over
/// distinct vertex sets, which covers every pair.
pub fn check_supermultiplicativity(o: &RandomLineOracle) -> InequalityReport {
    let n = o.domain.n_vertices();
    let mut vsets: Vec<u32> = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            vsets.extend(o.open_contours(u, v).iter().map(|l| l.vertices));
        }
    }
    vsets.sort_unstable();
    vsets.dedup();
    let z = o.z();
    let mut rep = InequalityReport::default();
    for (i, &a) in vsets.iter().enumerate() {
        for &b in &vsets[i + 1..] {
            if a & b == 0 {
                let joint = o.z_avoiding(a | b) / z;
                let prod = (o.z_avoiding(a) / z) * (o.z_avoiding(b) / z);
                rep.record(prod, joint);
            }
        }
    }
    rep
}

/// Σ_{λ: u→v, w ∈ λ} q(λ) ≤ (Σ_{u→w} q)(Σ_{w→v} q) for all distinct u, v, w.
pub fn check_subadditivity(o: &RandomLineOracle) -> InequalityReport {
    let n = o.domain.n_vertices();
    let corr = o.dual_two_point();
    let mut rep = InequalityReport::default();
    for u in 0..n {
        for v in u + 1..n {
            let lines = o.open_contours(u, v);
            for w in 0..n {
                if w == u || w == v {
                    continue;
                }
                let lhs = ksum(lines.iter().filter(|l| l.vertices >> w & 1 == 1).map(|l| l.q));
                rep.record(lhs, corr[u][w] * corr[w][v]);
            }
        }
    }
    rep
}

/// q_{big}(λ) ≤ q_{small}(λ) for every open contour of the smaller domain.
pub fn check_monotonicity(small: &RandomLineOracle, big: &RandomLineOracle) -> InequalityReport {
    let mut rep = InequalityReport::default();
    let sd = &small.domain;
    let bd = &big.domain;
    let n = sd.n_vertices();
    for u in 0..n {
        for v in u + 1..n {
            for l in small.open_contours(u, v) {
                let mut mask = 0u64;
                let mut e = l.edges;
                let mut inside = true;
                while e != 0 {
                    let k = e.trailing_zeros() as usize;
                    let [a, b] = sd.edges[k];
                    match bd.edge(sd.vertices[a], sd.vertices[b]) {
                        Some(kb) => mask |= 1 << kb,
                        None => inside = false,
                    }
                    e &= e - 1;
                }
                if inside {
                    rep.record(big.weight_mask(mask), l.q);
                }
            }
        }
    }
    rep
}

/// All simply connected subsets of a w×h rectangle of cells.
pub fn simply_connected_subsets(w: i32, h: i32) -> Vec<Vec<[i32; 2]>> {
    let cells: Vec<[i32; 2]> = (0..h).flat_map(|y| (0..w).map(move |x| [x, y])).collect();
    let mut out = Vec::new();
    for m in 1u32..(1 << cells.len()) {
        let s: Vec<[i32; 2]> = (0..cells.len()).filter(|&k| m >> k & 1 == 1).map(|k| cells[k]).collect();
        if is_simply_connected(&s) {
            out.push(s);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_lattice, ShapeSpec, Wiring};

    fn region(sites: &[[i32; 2]]) -> Geometry {
        build_lattice(&ShapeSpec::Region { sites: sites.to_vec() }).unwrap()
    }

    fn box_sites(w: i32, h: i32) -> Vec<[i32; 2]> {
        (0..h).flat_map(|y| (0..w).map(move |x| [x, y])).collect()
    }

    #[test]
    fn single_site_free_is_fair() {
        let t = enumerate_gibbs(&region(&[[0, 0]]), &BoundaryCondition::Free, &CouplingSpec::nn(1.0), 0.0).unwrap();
        assert!((t.probs[0] - 0.5).abs() < 1e-15 && (t.probs[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn torus_2x2_hand_table() {
        let g = build_lattice(&ShapeSpec::torus(2, 2)).unwrap();
        let t = enumerate_gibbs(&g, &BoundaryCondition::Periodic, &CouplingSpec::nn(0.5), 0.0).unwrap();
        // sites 0=(0,0) 1=(1,0) 2=(0,1) 3=(1,1); each nn pair carries two bonds
        let pairs = [(0, 1), (0, 2), (1, 3), (2, 3)];
        let w: Vec<f64> = (0u64..16)
            .map(|x| {
                let s = |i: usize| ExactTable::spin(x, i);
                let e: f64 = pairs.iter().map(|&(a, b)| -2.0 * s(a) * s(b)).sum();
                (-0.5 * e).exp()
            })
            .collect();
        let z: f64 = w.iter().sum();
        for k in 0..16 {
            assert!((t.probs[k] - w[k] / z).abs() < 1e-14);
        }
    }

    #[test]
    fn plus_box_center_is_positive() {
        let g = build_lattice(&ShapeSpec::square_box(2, 3)).unwrap();
        let t = enumerate_gibbs(&g, &BoundaryCondition::Plus, &CouplingSpec::nn(0.4), 0.0).unwrap();
        assert!(t.mean_spin(4) > 0.0);
        assert!((ksum(t.probs.iter().copied()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cap_is_refused() {
        let g = build_lattice(&ShapeSpec::square_box(2, 5)).unwrap();
        assert!(matches!(
            enumerate_gibbs(&g, &BoundaryCondition::Plus, &CouplingSpec::nn(0.4), 0.0),
            Err(ExactError::CapExceeded { .. })
        ));
    }

    #[test]
    fn two_point_examples() {
        let g = build_lattice(&ShapeSpec::square_box(2, 3)).unwrap();
        let bc = BoundaryCondition::Free;
        assert!((exact_two_point(&g, &bc, 0.4, 2, 2).unwrap() - 1.0).abs() < 1e-14);
        assert!(exact_two_point(&g, &bc, 0.0, 0, 1).unwrap().abs() < 1e-14);
        assert_eq!(exact_two_point(&g, &bc, 0.4, 0, 9), Err(ExactError::SiteOutOfRange(9)));
        // high-temperature expansion over the 12 edges of the box
        let t = 0.4f64.tanh();
        let edges = g.edges();
        let (mut num, mut den) = (0.0, 0.0);
        for m in 0u32..(1 << edges.len()) {
            let mut deg = [0u8; 9];
            for (k, e) in edges.iter().enumerate() {
                if m >> k & 1 == 1 {
                    deg[e[0] as usize] ^= 1;
                    deg[e[1] as usize] ^= 1;
                }
            }
            let odd: Vec<usize> = (0..9).filter(|&i| deg[i] == 1).collect();
            let w = t.powi(m.count_ones() as i32);
            if odd.is_empty() {
                den += w;
            } else if odd == [0, 1] {
                num += w;
            }
        }
        assert!((exact_two_point(&g, &bc, 0.4, 0, 1).unwrap() - num / den).abs() < 1e-13);
    }

    #[test]
    fn fk_table_is_normalized_and_wired_ok() {
        let g = build_lattice(&ShapeSpec::torus(2, 2)).unwrap();
        let fk = FkGraph::new(&g, &Wiring::Periodic).unwrap();
        let t = enumerate_fk(&fk, 0.5, 2.0).unwrap();
        assert!((ksum(t.iter().copied()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn simple_connectivity() {
        assert!(is_simply_connected(&box_sites(3, 3)));
        assert!(is_simply_connected(&[[0, 0], [1, 1]]));
        let ring: Vec<[i32; 2]> = box_sites(3, 3).into_iter().filter(|&c| c != [1, 1]).collect();
        assert!(!is_simply_connected(&ring));
        assert!(!is_simply_connected(&[[0, 0], [2, 0]]));
        assert_eq!(DualDomain::from_sites(&ring).unwrap_err(), ExactError::NotSimplyConnected);
    }

    #[test]
    fn duality_small_boxes() {
        for (sites, beta) in [(box_sites(2, 2), 0.7), (box_sites(3, 3), 0.3)] {
            let r = verify_duality(&sites, beta).unwrap();
            assert!(r.max_rel_err < 1e-12, "{r:?}");
            assert!(rel(r.lhs_spins, r.c_lambda * r.rhs_polygons) < 1e-12);
        }
        // large beta: contour sum tends to the empty family
        let dom = DualDomain::from_sites(&box_sites(2, 2)).unwrap();
        let w = (-2.0f64 * 40.0).exp();
        let s: f64 = dom.even_subgraphs().iter().map(|m| w.powi(m.count_ones() as i32)).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn plaquette_weight_is_contour_probability() {
        let sites = box_sites(3, 3);
        let beta = 0.8;
        let o = RandomLineOracle::new(DualDomain::from_sites(&sites).unwrap(), dual_beta(beta));
        let g = region(&sites);
        let t = enumerate_gibbs(&g, &BoundaryCondition::Plus, &CouplingSpec::nn(beta), 0.0).unwrap();
        for (site_idx, &c) in g.coords().iter().enumerate() {
            let q = o.weight_mask(o.domain.plaquette([c[0], c[1]]).unwrap());
            // the unit contour is a maximal component iff the 8 surrounding spins (boundary
            // spins included) agree and the site has the opposite sign
            let ring: Vec<Option<usize>> = (-1..=1)
                .flat_map(|dx| (-1..=1).map(move |dy| (dx, dy)))
                .filter(|&d| d != (0, 0))
                .map(|(dx, dy)| g.site_at([c[0] + dx, c[1] + dy, 0]))
                .collect();
            let p = t.expectation(|x| {
                let vals: Vec<f64> = ring.iter().map(|k| k.map_or(1.0, |k| ExactTable::spin(x, k))).collect();
                let ok = vals.iter().all(|&v| v == vals[0]) && ExactTable::spin(x, site_idx) == -vals[0];
                ok as u8 as f64
            });
            assert!(rel(p, q) < 1e-12, "site {c:?}: {p} vs {q}");
        }
        assert_eq!(o.weight(&[]).unwrap(), 1.0);
    }

    #[test]
    fn random_line_identity_on_3x3() {
        let o = RandomLineOracle::new(DualDomain::from_sites(&box_sites(3, 3)).unwrap(), dual_beta(0.8));
        let r = check_random_line(&o);
        assert_eq!(r.pairs, 120);
        assert!(r.max_rel_err < 1e-10, "{r:?}");
    }

    #[test]
    fn weight_rejects_bad_edges() {
        let sites = box_sites(2, 2);
        assert!(matches!(contour_weight(&sites, 0.3, &[[[0, 0], [5, 5]]]), Err(ExactError::EdgeNotInDomain(_))));
        // a "T" has three odd vertices
        let t = [[[1, 0], [1, 1]], [[1, 1], [1, 2]], [[1, 1], [2, 1]]];
        assert!(matches!(contour_weight(&sites, 0.3, &t), Err(ExactError::NotAContour(_))));
    }

    #[test]
    fn inequalities_on_small_domain() {
        let big = RandomLineOracle::new(DualDomain::from_sites(&box_sites(3, 2)).unwrap(), dual_beta(0.7));
        let small = RandomLineOracle::new(DualDomain::from_sites(&box_sites(2, 2)).unwrap(), dual_beta(0.7));
        for r in [check_supermultiplicativity(&big), check_subadditivity(&big), check_monotonicity(&small, &big)] {
            assert!(r.checked > 0);
            assert_eq!(r.violations, 0, "{r:?}");
        }
    }
}
