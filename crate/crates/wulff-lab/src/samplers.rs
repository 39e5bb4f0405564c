//! Markov chains for the Ising, random-cluster and percolation measures.
//!
//! Every chain owns its spin or bond vector and an `RngStream`. A sweep is
//! |Λ| elementary moves (or one cluster update). `run_chain` drives any chain
//! through burn-in and thinning and returns a `SamplerReport`.

use crate::lattice::{
    BondConfig, BoundaryCondition, CouplingKind, CouplingSpec, FkGraph, Geometry, LatticeError, LocalEnv, ShapeSpec,
    SpinConfig,
};
use crate::rng::{RngStream, StreamAddress};
use crate::stats::{self, Estimate};
use crate::unionfind::UnionFind;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("magnetization {target} is not attainable; nearest feasible values are {below:?} and {above:?}")]
    InfeasibleMagnetization { target: i64, below: Option<i64>, above: Option<i64> },
    #[error("parameter out of range: {0}")]
    BadParameter(String),
    #[error("restricted sampling needs a planar nearest-neighbour model: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

pub type Result<T> = std::result::Result<T, SamplerError>;

#[derive(Clone, Debug, Serialize)]
pub struct SamplerReport {
    pub acceptance: f64,
    /// Integrated autocorrelation time of M, in units of recorded samples.
    pub tau_int: f64,
    pub burn_in: usize,
    pub sweeps: usize,
    pub thin: usize,
    pub samples: usize,
    pub start: StreamAddress,
    /// Cached energy/magnetization matched recomputation at every spot check.
    pub cache_consistent: bool,
}

/// A Markov chain on spins.
pub trait SpinChain {
    fn sweep(&mut self);
    fn spins(&self) -> &[i8];
    fn magnetization(&self) -> i64;
    /// Fraction of accepted moves since creation.
    fn acceptance(&self) -> f64;
    fn rng_address(&self) -> StreamAddress;
    /// Recompute cached statistics from scratch; true when they matched.
    fn verify_cache(&mut self) -> bool {
        self.magnetization() == self.spins().iter().map(|&s| s as i64).sum::<i64>()
    }
}

/// Burn in, then record every `thin`-th sweep through `visit`.
pub fn run_chain<C: SpinChain, F: FnMut(&C)>(
    chain: &mut C,
    burn_in: usize,
    sweeps: usize,
    thin: usize,
    mut visit: F,
) -> SamplerReport {
    let start = chain.rng_address();
    let thin = thin.max(1);
    let mut ok = true;
    for k in 0..burn_in {
        chain.sweep();
        if k % 64 == 0 {
            ok &= chain.verify_cache();
        }
    }
    let mut ms = Vec::with_capacity(sweeps / thin + 1);
    for k in 1..=sweeps {
        chain.sweep();
        if k % thin == 0 {
            ms.push(chain.magnetization() as f64);
            visit(chain);
        }
        if k % 256 == 0 {
            ok &= chain.verify_cache();
        }
    }
    SamplerReport {
        acceptance: chain.acceptance(),
        tau_int: if ms.len() > 4 { stats::autocorrelation_time(&ms) } else { 0.5 },
        burn_in,
        sweeps,
        thin,
        samples: ms.len(),
        start,
        cache_consistent: ok,
    }
}

/// Single-site heat bath (systematic scan) for the Gibbs measure with
/// uniform field h and the wall field carried by the boundary condition.
#[derive(Clone, Debug)]
pub struct Glauber {
    env: LocalEnv,
    beta: f64,
    spins: Vec<i8>,
    mag: i64,
    rng: RngStream,
    moves: u64,
    flips: u64,
}

impl Glauber {
    pub fn new(
        g: &Geometry,
        bc: &BoundaryCondition,
        c: &CouplingSpec,
        h: f64,
        init: SpinConfig,
        rng: RngStream,
    ) -> Result<Self> {
        if c.beta < 0.0 {
            return Err(SamplerError::BadParameter(format!("beta = {}", c.beta)));
        }
        c.validate()?;
        check_len(g, &init)?;
        let env = LocalEnv::new(g, bc, &c.kind, h)?;
        let mag = init.total();
        Ok(Glauber { env, beta: c.beta, spins: init.spins, mag, rng, moves: 0, flips: 0 })
    }

    pub fn energy(&self) -> f64 {
        self.env.energy(&self.spins)
    }
}

fn check_len(g: &Geometry, s: &SpinConfig) -> Result<()> {
    if s.spins.len() != g.n_sites() {
        return Err(LatticeError::LengthMismatch { got: s.spins.len(), expected: g.n_sites() }.into());
    }
    Ok(())
}

impl SpinChain for Glauber {
    fn sweep(&mut self) {
        for i in 0..self.spins.len() {
            let f = self.env.field(&self.spins, i);
            let p_plus = 1.0 / (1.0 + (-2.0 * self.beta * f).exp());
            let new = if self.rng.uniform() < p_plus { 1 } else { -1 };
            if new != self.spins[i] {
                self.mag += 2 * new as i64;
                self.spins[i] = new;
                self.flips += 1;
            }
            self.moves += 1;
        }
    }
    fn spins(&self) -> &[i8] {
        &self.spins
    }
    fn magnetization(&self) -> i64 {
        self.mag
    }
    fn acceptance(&self) -> f64 {
        self.flips as f64 / self.moves.max(1) as f64
    }
    fn rng_address(&self) -> StreamAddress {
        self.rng.address()
    }
}

/// Heat-bath chain from a constant start; `visit` sees each recorded state.
#[allow(clippy::too_many_arguments)]
pub fn glauber_sample<F: FnMut(&[i8])>(
    g: &Geometry,
    bc: &BoundaryCondition,
    beta: f64,
    h: f64,
    burn_in: usize,
    sweeps: usize,
    thin: usize,
    rng: RngStream,
    mut visit: F,
) -> Result<SamplerReport> {
    let init = SpinConfig::constant(g.n_sites(), if matches!(bc, BoundaryCondition::Minus) { -1 } else { 1 });
    let mut ch = Glauber::new(g, bc, &CouplingSpec::nn(beta), h, init, rng)?;
    Ok(run_chain(&mut ch, burn_in, sweeps, thin, |c| visit(c.spins())))
}

/// Spin exchange at fixed magnetization: a uniformly chosen (+, −) pair is
/// swapped with the Metropolis rule.
#[derive(Clone, Debug)]
pub struct Kawasaki {
    env: LocalEnv,
    beta: f64,
    spins: Vec<i8>,
    /// Sites of each sign and each site's position in its list.
    plus: Vec<u32>,
    minus: Vec<u32>,
    pos: Vec<u32>,
    mag: i64,
    rng: RngStream,
    moves: u64,
    accepted: u64,
}

/// Nearest attainable magnetizations to `target` on n sites.
pub fn feasible_magnetization(n: usize, target: i64) -> std::result::Result<(), (Option<i64>, Option<i64>)> {
    let n = n as i64;
    if target.abs() <= n && (target - n).rem_euclid(2) == 0 {
        return Ok(());
    }
    let clamp = |m: i64| (m.abs() <= n).then_some(m);
    if target > n {
        return Err((Some(n), None));
    }
    if target < -n {
        return Err((None, Some(-n)));
    }
    Err((clamp(target - 1), clamp(target + 1)))
}

impl Kawasaki {
    pub fn new(g: &Geometry, bc: &BoundaryCondition, c: &CouplingSpec, init: SpinConfig, rng: RngStream) -> Result<Self> {
        check_len(g, &init)?;
        c.validate()?;
        let env = LocalEnv::new(g, bc, &c.kind, 0.0)?;
        let mut plus = Vec::new();
        let mut minus = Vec::new();
        let mut pos = vec![0u32; init.spins.len()];
        for (i, &s) in init.spins.iter().enumerate() {
            let list = if s > 0 { &mut plus } else { &mut minus };
            pos[i] = list.len() as u32;
            list.push(i as u32);
        }
        let mag = init.total();
        Ok(Kawasaki { env, beta: c.beta, spins: init.spins, plus, minus, pos, mag, rng, moves: 0, accepted: 0 })
    }

    /// Uniformly random configuration with total magnetization `target`.
    pub fn random_start(n: usize, target: i64, rng: &mut RngStream) -> Result<SpinConfig> {
        if let Err((below, above)) = feasible_magnetization(n, target) {
            return Err(SamplerError::InfeasibleMagnetization { target, below, above });
        }
        let n_plus = ((n as i64 + target) / 2) as usize;
        let mut s = vec![-1i8; n];
        s[..n_plus].fill(1);
        for i in (1..n).rev() {
            s.swap(i, rng.below(i + 1));
        }
        Ok(SpinConfig { spins: s })
    }

    fn step(&mut self) {
        self.moves += 1;
        if self.plus.is_empty() || self.minus.is_empty() {
            return;
        }
        let a = self.plus[self.rng.below(self.plus.len())] as usize;
        let b = self.minus[self.rng.below(self.minus.len())] as usize;
        let mut de = 2.0 * self.env.field(&self.spins, a);
        self.spins[a] = -1;
        de -= 2.0 * self.env.field(&self.spins, b);
        if de <= 0.0 || self.rng.uniform() < (-self.beta * de).exp() {
            self.spins[b] = 1;
            let (pa, pb) = (self.pos[a] as usize, self.pos[b] as usize);
            self.plus[pa] = b as u32;
            self.minus[pb] = a as u32;
            self.pos.swap(a, b);
            self.accepted += 1;
        } else {
            self.spins[a] = 1;
        }
    }
}

impl SpinChain for Kawasaki {
    fn sweep(&mut self) {
        for _ in 0..self.spins.len() {
            self.step();
        }
    }
    fn spins(&self) -> &[i8] {
        &self.spins
    }
    fn magnetization(&self) -> i64 {
        self.mag
    }
    fn acceptance(&self) -> f64 {
        self.accepted as f64 / self.moves.max(1) as f64
    }
    fn rng_address(&self) -> StreamAddress {
        self.rng.address()
    }
}

#[allow(clippy::too_many_arguments)]
pub fn kawasaki_sample<F: FnMut(&[i8])>(
    g: &Geometry,
    bc: &BoundaryCondition,
    beta: f64,
    m_target: i64,
    burn_in: usize,
    sweeps: usize,
    thin: usize,
    mut rng: RngStream,
    mut visit: F,
) -> Result<SamplerReport> {
    let init = Kawasaki::random_start(g.n_sites(), m_target, &mut rng)?;
    let mut ch = Kawasaki::new(g, bc, &CouplingSpec::nn(beta), init, rng)?;
    Ok(run_chain(&mut ch, burn_in, sweeps, thin, |c| visit(c.spins())))
}

/// FK percolation parameter p_β = 1 − e^{−2β}.
pub fn p_beta(beta: f64) -> f64 {
    1.0 - (-2.0 * beta).exp()
}

/// Random-cluster chain (q = 2) with Swendsen-Wang sweeps and optional
/// single-bond heat-bath sweeps. Spins are the Edwards-Sokal colouring of the
/// current bonds; the wired cluster is always +1.
#[derive(Clone, Debug)]
pub struct FkChain {
    pub fk: FkGraph,
    p: f64,
    q: f64,
    bonds: BondConfig,
    spins: Vec<i8>,
    rng: RngStream,
    heat_bath_sweeps: usize,
    swendsen_wang: bool,
    uf: UnionFind,
    moves: u64,
    opened: u64,
}

impl FkChain {
    pub fn new(fk: FkGraph, p: f64, rng: RngStream) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(SamplerError::BadParameter(format!("p = {p} outside (0,1)")));
        }
        let m = fk.n_edges();
        let n = fk.n_nodes();
        let mut ch = FkChain {
            p,
            q: 2.0,
            bonds: BondConfig::closed(m),
            spins: vec![1; fk.n_sites],
            rng,
            heat_bath_sweeps: 0,
            swendsen_wang: true,
            uf: UnionFind::new(n),
            fk,
            moves: 0,
            opened: 0,
        };
        ch.recolor();
        Ok(ch)
    }

    /// Number of single-bond heat-bath sweeps per `sweep`, and whether a
    /// Swendsen-Wang update follows.
    pub fn with_moves(mut self, heat_bath_sweeps: usize, swendsen_wang: bool) -> Self {
        self.heat_bath_sweeps = heat_bath_sweeps;
        self.swendsen_wang = swendsen_wang || heat_bath_sweeps == 0;
        self
    }

    pub fn bonds(&self) -> &BondConfig {
        &self.bonds
    }

    fn recolor(&mut self) {
        self.spins = edwards_sokal_color(&self.bonds, &self.fk, &mut self.rng).spins;
    }

    fn connected_without(&self, e: usize) -> bool {
        let [a, b] = self.fk.edges[e];
        let n = self.fk.n_nodes();
        let mut adj = vec![Vec::new(); n];
        for (k, &[x, y]) in self.fk.edges.iter().enumerate() {
            if k != e && self.bonds.open[k] {
                adj[x as usize].push(y as usize);
                adj[y as usize].push(x as usize);
            }
        }
        let mut seen = vec![false; n];
        let mut stack = vec![a as usize];
        seen[a as usize] = true;
        while let Some(v) = stack.pop() {
            if v == b as usize {
                return true;
            }
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        false
    }

    fn heat_bath_sweep(&mut self) {
        let pq = self.p / (self.p + self.q * (1.0 - self.p));
        for _ in 0..self.fk.n_edges() {
            let e = self.rng.below(self.fk.n_edges());
            let prob = if self.connected_without(e) { self.p } else { pq };
            let open = self.rng.uniform() < prob;
            self.moves += 1;
            self.opened += open as u64;
            self.bonds.open[e] = open;
        }
        self.recolor();
    }

    fn sw_sweep(&mut self) {
        for (k, &[a, b]) in self.fk.edges.iter().enumerate() {
            let sa = self.spins[a as usize];
            let sb = if Some(b as usize) == self.fk.ghost { 1 } else { self.spins[b as usize] };
            let open = sa == sb && self.rng.uniform() < self.p;
            self.bonds.open[k] = open;
            self.moves += 1;
            self.opened += open as u64;
        }
        self.uf.reset();
        for (k, &[a, b]) in self.fk.edges.iter().enumerate() {
            if self.bonds.open[k] {
                self.uf.union(a as usize, b as usize);
            }
        }
        let n = self.fk.n_nodes();
        let mut color = vec![0i8; n];
        if let Some(gh) = self.fk.ghost {
            let r = self.uf.find(gh);
            color[r] = 1;
        }
        for i in 0..self.fk.n_sites {
            let r = self.uf.find(i);
            if color[r] == 0 {
                color[r] = self.rng.sign();
            }
            self.spins[i] = color[r];
        }
    }
}

impl SpinChain for FkChain {
    fn sweep(&mut self) {
        for _ in 0..self.heat_bath_sweeps {
            self.heat_bath_sweep();
        }
        if self.swendsen_wang {
            self.sw_sweep();
        }
    }
    fn spins(&self) -> &[i8] {
        &self.spins
    }
    fn magnetization(&self) -> i64 {
        self.spins.iter().map(|&s| s as i64).sum()
    }
    /// Fraction of bond updates that left the bond open.
    fn acceptance(&self) -> f64 {
        self.opened as f64 / self.moves.max(1) as f64
    }
    fn rng_address(&self) -> StreamAddress {
        self.rng.address()
    }
}

/// Random-cluster samples; `visit` sees the bond configuration and its colouring.
pub fn fk_sample<F: FnMut(&BondConfig, &[i8])>(
    fk: &FkGraph,
    p: f64,
    burn_in: usize,
    sweeps: usize,
    thin: usize,
    rng: RngStream,
    mut visit: F,
) -> Result<SamplerReport> {
    let mut ch = FkChain::new(fk.clone(), p, rng)?;
    Ok(run_chain(&mut ch, burn_in, sweeps, thin, |c| visit(c.bonds(), c.spins())))
}

/// Colour each cluster ±1 with probability 1/2; the wired cluster is +1.
pub fn edwards_sokal_color(bonds: &BondConfig, fk: &FkGraph, rng: &mut RngStream) -> SpinConfig {
    let mut uf = bonds.union_find(fk);
    let mut color = vec![0i8; fk.n_nodes()];
    if let Some(gh) = fk.ghost {
        let r = uf.find(gh);
        color[r] = 1;
    }
    let mut spins = vec![0i8; fk.n_sites];
    for (i, s) in spins.iter_mut().enumerate() {
        let r = uf.find(i);
        if color[r] == 0 {
            color[r] = rng.sign();
        }
        *s = color[r];
    }
    SpinConfig { spins }
}

pub fn bernoulli_sample(fk: &FkGraph, p: f64, rng: &mut RngStream) -> Result<BondConfig> {
    if !(0.0..=1.0).contains(&p) {
        return Err(SamplerError::BadParameter(format!("p = {p} outside [0,1]")));
    }
    Ok(BondConfig { open: (0..fk.n_edges()).map(|_| rng.uniform() < p).collect() })
}

/// Size of the largest cluster over |Λ| (the wired ghost is not counted).
pub fn largest_cluster_density(bonds: &BondConfig, fk: &FkGraph) -> f64 {
    let mut uf = bonds.union_find(fk);
    let mut size = vec![0usize; fk.n_nodes()];
    for i in 0..fk.n_sites {
        let r = uf.find(i);
        size[r] += 1;
    }
    *size.iter().max().unwrap_or(&0) as f64 / fk.n_sites as f64
}

/// Metropolis chain for the minus-boundary planar model restricted to
/// configurations whose contours all have sup-norm diameter ≤ s.
#[derive(Clone, Debug)]
pub struct Restricted {
    g: Geometry,
    env: LocalEnv,
    bc: BoundaryCondition,
    beta: f64,
    s: usize,
    spins: Vec<i8>,
    mag: i64,
    rng: RngStream,
    moves: u64,
    accepted: u64,
    rejected_by_cutoff: u64,
    // scratch for the contour search, indexed by corner
    stamp: Vec<u32>,
    generation: u32,
    stack: Vec<[i32; 2]>,
}

impl Restricted {
    pub fn new(g: &Geometry, bc: &BoundaryCondition, beta: f64, s: usize, rng: RngStream) -> Result<Self> {
        if g.d != 2 {
            return Err(SamplerError::Unsupported(format!("dimension {}", g.d)));
        }
        if s < 1 {
            return Err(SamplerError::BadParameter("cutoff s must be positive".into()));
        }
        let env = LocalEnv::new(g, bc, &CouplingKind::NnIsing, 0.0)?;
        let (_, ext) = g.bbox();
        let init = match bc {
            BoundaryCondition::Plus => 1,
            _ => -1,
        };
        Ok(Restricted {
            g: g.clone(),
            env,
            bc: bc.clone(),
            beta,
            s,
            spins: vec![init; g.n_sites()],
            mag: init as i64 * g.n_sites() as i64,
            rng,
            moves: 0,
            accepted: 0,
            rejected_by_cutoff: 0,
            stamp: vec![0; (ext[0] + 3) * (ext[1] + 3)],
            generation: 0,
            stack: Vec::new(),
        })
    }

    pub fn cutoff_rejections(&self) -> u64 {
        self.rejected_by_cutoff
    }

    fn spin_at(&self, x: i32, y: i32) -> Option<i8> {
        match self.g.site_at([x, y, 0]) {
            Some(k) => Some(self.spins[k]),
            None => self.bc.boundary_spin(&self.g, [x, y, 0]),
        }
    }

    fn broken(&self, a: [i32; 2], b: [i32; 2]) -> bool {
        match (self.spin_at(a[0], a[1]), self.spin_at(b[0], b[1])) {
            (Some(x), Some(y)) => x != y,
            _ => false,
        }
    }

    fn corner_slot(&self, c: [i32; 2]) -> usize {
        let (o, ext) = self.g.bbox();
        let w = (ext[0] + 3) as i32;
        let (x, y) = if self.g.is_periodic() {
            ((c[0] - o[0]).rem_euclid(ext[0] as i32), (c[1] - o[1]).rem_euclid(ext[1] as i32))
        } else {
            (c[0] - o[0] + 1, c[1] - o[1] + 1)
        };
        (x + w * y) as usize
    }

    /// True if the contours through the corners of site (x, y) all have
    /// diameter ≤ s in the current configuration.
    fn contours_small_around(&mut self, x: i32, y: i32) -> bool {
        self.generation = self.generation.wrapping_add(1);
        if self.generation == 0 {
            self.stamp.fill(0);
            self.generation = 1;
        }
        let gen = self.generation;
        self.stack.clear();
        let starts = [[x, y], [x + 1, y], [x, y + 1], [x + 1, y + 1]];
        let (mut lo, mut hi) = ([i32::MAX; 2], [i32::MIN; 2]);
        for c in starts {
            let k = self.corner_slot(c);
            if self.stamp[k] != gen {
                self.stamp[k] = gen;
                self.stack.push(c);
            }
        }
        let s = self.s as i32;
        while let Some(c) = self.stack.pop() {
            // only corners carrying a contour edge count towards the diameter
            let [a, b] = c;
            let steps = [
                ([a + 1, b], [a, b - 1], [a, b]),
                ([a - 1, b], [a - 1, b - 1], [a - 1, b]),
                ([a, b + 1], [a - 1, b], [a, b]),
                ([a, b - 1], [a - 1, b - 1], [a, b - 1]),
            ];
            let mut on_contour = false;
            for (next, s1, s2) in steps {
                if self.broken(s1, s2) {
                    on_contour = true;
                    let k = self.corner_slot(next);
                    if self.stamp[k] != gen {
                        self.stamp[k] = gen;
                        self.stack.push(next);
                    }
                }
            }
            if on_contour {
                for t in 0..2 {
                    lo[t] = lo[t].min(c[t]);
                    hi[t] = hi[t].max(c[t]);
                }
                if hi[0] - lo[0] > s || hi[1] - lo[1] > s {
                    return false;
                }
            }
        }
        true
    }

    fn step(&mut self) {
        self.moves += 1;
        let i = self.rng.below(self.spins.len());
        let de = 2.0 * self.spins[i] as f64 * self.env.field(&self.spins, i);
        if de > 0.0 && self.rng.uniform() >= (-self.beta * de).exp() {
            return;
        }
        self.spins[i] = -self.spins[i];
        let c = self.g.coord(i);
        if self.contours_small_around(c[0], c[1]) {
            self.mag += 2 * self.spins[i] as i64;
            self.accepted += 1;
        } else {
            self.spins[i] = -self.spins[i];
            self.rejected_by_cutoff += 1;
        }
    }
}

impl SpinChain for Restricted {
    fn sweep(&mut self) {
        for _ in 0..self.spins.len() {
            self.step();
        }
    }
    fn spins(&self) -> &[i8] {
        &self.spins
    }
    fn magnetization(&self) -> i64 {
        self.mag
    }
    fn acceptance(&self) -> f64 {
        self.accepted as f64 / self.moves.max(1) as f64
    }
    fn rng_address(&self) -> StreamAddress {
        self.rng.address()
    }
}

#[allow(clippy::too_many_arguments)]
pub fn restricted_sample<F: FnMut(&[i8])>(
    g: &Geometry,
    beta: f64,
    s: usize,
    burn_in: usize,
    sweeps: usize,
    thin: usize,
    rng: RngStream,
    mut visit: F,
) -> Result<SamplerReport> {
    let mut ch = Restricted::new(g, &BoundaryCondition::Minus, beta, s, rng)?;
    Ok(run_chain(&mut ch, burn_in, sweeps, thin, |c| visit(c.spins())))
}

/// Default cutoff s = K log₂ N.
pub fn default_cutoff(n: usize, k: f64) -> usize {
    (k * (n as f64).log2()).floor() as usize
}

#[derive(Clone, Debug, Serialize)]
pub struct Susceptibility {
    pub chi: Estimate,
    pub effective_samples: f64,
    pub low_confidence: bool,
}

/// χ = Var(M)/|A| from a series of total magnetizations, with a blocked
/// jackknife error. Fewer than 100 effective samples is flagged.
pub fn susceptibility_estimate(ms: &[f64], volume: usize) -> Susceptibility {
    let n_eff = stats::effective_samples(ms);
    let v = volume as f64;
    let chi = stats::jackknife(ms, 20.min(ms.len()), |xs| stats::variance(xs) / v);
    Susceptibility { chi, effective_samples: n_eff, low_confidence: n_eff < 100.0 }
}

/// Run `f` on `n` independent chains in parallel with streams 0..n of `seed`.
pub fn run_parallel<T: Send, F: Fn(usize, RngStream) -> T + Sync>(n: usize, seed: u64, f: F) -> Vec<T> {
    (0..n).into_par_iter().map(|k| f(k, RngStream::new(seed, k as u64))).collect()
}

/// Empirical law of spin configurations (index as in `SpinConfig::index`).
pub fn empirical_law<I: IntoIterator<Item = u64>>(n_sites: usize, draws: I) -> Vec<f64> {
    let mut counts = vec![0u64; 1 << n_sites];
    let mut total = 0u64;
    for x in draws {
        counts[x as usize] += 1;
        total += 1;
    }
    counts.into_iter().map(|c| c as f64 / total.max(1) as f64).collect()
}

pub fn spin_index(s: &[i8]) -> u64 {
    s.iter().enumerate().fold(0u64, |a, (i, &x)| if x > 0 { a | 1 << i } else { a })
}

/// Convenience: geometry of an L×L box.
pub fn square(n: usize) -> Geometry {
    crate::lattice::build_lattice(&ShapeSpec::square_box(2, n)).expect("n >= 2")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{enumerate_fk, enumerate_gibbs};
    use crate::lattice::{build_lattice, Wiring};

    fn torus(n: usize) -> Geometry {
        build_lattice(&ShapeSpec::torus(2, n)).unwrap()
    }

    #[test]
    fn glauber_beta_zero_is_unbiased() {
        let g = torus(4);
        let mut sum = 0.0;
        let mut n = 0.0;
        glauber_sample(&g, &BoundaryCondition::Periodic, 0.0, 0.0, 10, 20000, 1, RngStream::new(1, 0), |s| {
            sum += s[0] as f64;
            n += 1.0;
        })
        .unwrap();
        assert!((sum / n).abs() < 3.0 / n.sqrt() * 1.5);
    }

    #[test]
    fn glauber_law_on_3x3_torus() {
        let g = torus(3);
        let exact = enumerate_gibbs(&g, &BoundaryCondition::Periodic, &CouplingSpec::nn(0.5), 0.0).unwrap();
        let mut idx = Vec::new();
        let rep = glauber_sample(&g, &BoundaryCondition::Periodic, 0.5, 0.0, 100, 200_000, 1, RngStream::new(2, 0), |s| {
            idx.push(spin_index(s))
        })
        .unwrap();
        assert!(rep.cache_consistent);
        assert!((0.0..=1.0).contains(&rep.acceptance));
        let tv = stats::total_variation(&empirical_law(9, idx), &exact.probs);
        assert!(tv < 0.03, "tv = {tv}");
    }

    #[test]
    fn kawasaki_conserves_and_refuses() {
        let g = torus(4);
        let mut rng = RngStream::new(3, 0);
        assert_eq!(
            Kawasaki::random_start(16, 3, &mut rng).unwrap_err(),
            SamplerError::InfeasibleMagnetization { target: 3, below: Some(2), above: Some(4) }
        );
        assert_eq!(
            Kawasaki::random_start(16, 20, &mut rng).unwrap_err(),
            SamplerError::InfeasibleMagnetization { target: 20, below: Some(16), above: None }
        );
        let init = Kawasaki::random_start(16, 4, &mut rng).unwrap();
        let mut ch = Kawasaki::new(&g, &BoundaryCondition::Periodic, &CouplingSpec::nn(0.7), init, rng).unwrap();
        for _ in 0..1000 {
            ch.sweep();
            assert_eq!(ch.spins().iter().map(|&s| s as i64).sum::<i64>(), 4);
        }
        let mut frozen = Kawasaki::new(&g, &BoundaryCondition::Periodic, &CouplingSpec::nn(0.7), SpinConfig::constant(16, 1), RngStream::new(0, 0)).unwrap();
        frozen.sweep();
        assert!(frozen.spins().iter().all(|&s| s == 1));
    }

    #[test]
    fn fk_p_small_closes_everything() {
        let g = torus(4);
        let fk = FkGraph::new(&g, &Wiring::Periodic).unwrap();
        let mut last = None;
        fk_sample(&fk, 1e-12, 0, 3, 1, RngStream::new(4, 0), |b, _| last = Some(b.n_open())).unwrap();
        assert_eq!(last, Some(0));
    }

    #[test]
    fn fk_heat_bath_law_on_four_edges() {
        let g = build_lattice(&ShapeSpec::square_box(2, 2)).unwrap();
        let fk = FkGraph::new(&g, &Wiring::Free).unwrap();
        assert_eq!(fk.n_edges(), 4);
        let exact = enumerate_fk(&fk, 0.6, 2.0).unwrap();
        let mut counts = vec![0.0; 16];
        let mut ch = FkChain::new(fk, 0.6, RngStream::new(5, 0)).unwrap().with_moves(1, false);
        let n = 100_000;
        for _ in 0..n {
            ch.sweep();
            counts[ch.bonds().index() as usize] += 1.0 / n as f64;
        }
        assert!(stats::total_variation(&counts, &exact) < 0.02);
    }

    #[test]
    fn es_coloring_extremes() {
        let g = torus(4);
        let fk = FkGraph::new(&g, &Wiring::Periodic).unwrap();
        let mut rng = RngStream::new(6, 0);
        let all = BondConfig { open: vec![true; fk.n_edges()] };
        let mut plus = 0;
        for _ in 0..2000 {
            let s = edwards_sokal_color(&all, &fk, &mut rng);
            assert!(s.spins.iter().all(|&x| x == s.spins[0]));
            plus += (s.spins[0] == 1) as usize;
        }
        assert!((plus as f64 - 1000.0).abs() < 150.0);
        let none = BondConfig::closed(fk.n_edges());
        let s = edwards_sokal_color(&none, &fk, &mut rng);
        assert!(s.spins.iter().any(|&x| x == 1) || s.spins.iter().any(|&x| x == -1));
        // wired cluster is plus
        let b = build_lattice(&ShapeSpec::square_box(2, 3)).unwrap();
        let wfk = FkGraph::new(&b, &Wiring::Wired).unwrap();
        let s = edwards_sokal_color(&BondConfig { open: vec![true; wfk.n_edges()] }, &wfk, &mut rng);
        assert!(s.spins.iter().all(|&x| x == 1));
    }

    #[test]
    fn bernoulli_fraction() {
        let g = torus(8);
        let fk = FkGraph::new(&g, &Wiring::Periodic).unwrap();
        let mut rng = RngStream::new(7, 0);
        assert!(bernoulli_sample(&fk, 1.0, &mut rng).unwrap().open.iter().all(|&o| o));
        let big = build_lattice(&ShapeSpec::torus(2, 224)).unwrap();
        let bfk = FkGraph::new(&big, &Wiring::Periodic).unwrap();
        let b = bernoulli_sample(&bfk, 0.5, &mut rng).unwrap();
        let m = b.open.len() as f64;
        assert!((b.n_open() as f64 - 0.5 * m).abs() < 3.0 * (0.25 * m).sqrt());
        assert!(bernoulli_sample(&bfk, 1.5, &mut rng).is_err());
    }

    #[test]
    fn restricted_never_exceeds_cutoff() {
        let g = square(12);
        let mut ch = Restricted::new(&g, &BoundaryCondition::Minus, 0.45, 3, RngStream::new(8, 0)).unwrap();
        for _ in 0..200 {
            ch.sweep();
            let sc = SpinConfig { spins: ch.spins().to_vec() };
            let cs = crate::contour::extract_contours(&g, &sc, &BoundaryCondition::Minus).unwrap();
            assert!(cs.iter().all(|c| c.diam_inf <= 3), "contour above cutoff");
        }
        assert!(ch.cutoff_rejections() > 0);
    }

    #[test]
    fn restricted_with_large_cutoff_matches_gibbs() {
        let g = square(3);
        let exact = enumerate_gibbs(&g, &BoundaryCondition::Minus, &CouplingSpec::nn(0.4), 0.0).unwrap();
        let mut idx = Vec::new();
        restricted_sample(&g, 0.4, 10, 100, 200_000, 1, RngStream::new(9, 0), |s| idx.push(spin_index(s))).unwrap();
        assert!(stats::total_variation(&empirical_law(9, idx), &exact.probs) < 0.03);
    }

    #[test]
    fn restricted_tiny_cutoff_freezes() {
        let g = square(8);
        let mut sum = 0.0;
        let mut n = 0.0;
        restricted_sample(&g, 1.5, 1, 10, 200, 1, RngStream::new(10, 0), |s| {
            sum += s.iter().map(|&x| x as f64).sum::<f64>();
            n += 1.0;
        })
        .unwrap();
        assert!(sum / n < -60.0);
    }

    #[test]
    fn susceptibility_of_independent_spins() {
        let mut rng = RngStream::new(11, 0);
        let ms: Vec<f64> = (0..5000).map(|_| (0..64).map(|_| rng.sign() as f64).sum()).collect();
        let s = susceptibility_estimate(&ms, 64);
        assert!((s.chi.value - 1.0).abs() < 3.0 * s.chi.err, "{s:?}");
        assert!(!s.low_confidence);
        assert!(susceptibility_estimate(&ms[..50], 64).low_confidence);
    }

    #[test]
    fn parallel_chains_are_reproducible() {
        let f = |_k: usize, mut r: RngStream| r.uniform();
        assert_eq!(run_parallel(4, 99, f), run_parallel(4, 99, f));
    }
}
