//! Contours of planar spin configurations, their s-skeletons, and droplet
//! statistics for canonical samples.
//!
//! A dual vertex (corner) `[a, b]` is the point (a − ½, b − ½); site (x, y)
//! is the unit cell with corners [x, y] and [x + 1, y + 1].

use crate::geometry::{self, ConvexPolygon, Pt, Segment};
use crate::lattice::{BoundaryCondition, Geometry, LatticeError, SpinConfig};
use crate::stats;
use crate::tension::DirectionalTension;
use crate::unionfind::UnionFind;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ContourError {
    #[error("contours need a planar lattice, got d = {0}")]
    NotPlanar(usize),
    #[error("skeletons need a closed contour")]
    NotClosed,
    #[error("contour diameter {diam} is below the scale {s}")]
    TooSmall { diam: usize, s: usize },
    #[error("skeleton clause {clause} fails: {detail}")]
    Irregular { clause: u8, detail: String },
    #[error("region outside the label field: {0}")]
    RegionOutside(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

pub type Result<T> = std::result::Result<T, ContourError>;

pub type Corner = [i32; 2];

/// Arms at a dual vertex: east, north, west, south.
const ARMS: [Corner; 4] = [[1, 0], [0, 1], [-1, 0], [0, -1]];

/// Corner-rounding partner at a vertex of degree 4: E↔S and W↔N.
const PARTNER: [usize; 4] = [3, 2, 1, 0];

pub fn corner_point(c: Corner) -> Pt {
    [c[0] as f64 - 0.5, c[1] as f64 - 0.5]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Contour {
    /// Dual edges, each with its endpoints in increasing order.
    pub edges: Vec<[Corner; 2]>,
    /// Simple loops (implicitly closed) and arcs after corner rounding.
    pub loops: Vec<Vec<Corner>>,
    pub arcs: Vec<Vec<Corner>>,
    /// Single walk through every edge, when one exists (closed walks repeat
    /// the first vertex at the end).
    pub path: Option<Vec<Corner>>,
    pub closed: bool,
    /// Dual vertices of odd degree.
    pub boundary: Vec<Corner>,
    pub diam_inf: usize,
    /// The contour winds around a periodic direction.
    pub wraps: bool,
    /// Number of enclosed cells (even–odd rule) for closed, non-winding contours.
    pub area: Option<usize>,
}

impl Contour {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Sites enclosed by the contour (even–odd rule by rows).
    pub fn interior(&self) -> Vec<[i32; 2]> {
        if !self.closed || self.wraps {
            return vec![];
        }
        let mut rows: HashMap<i32, Vec<i32>> = HashMap::new();
        for e in &self.edges {
            if e[0][0] == e[1][0] {
                rows.entry(e[0][1]).or_default().push(e[0][0]);
            }
        }
        let mut out = Vec::new();
        let mut keys: Vec<_> = rows.keys().copied().collect();
        keys.sort();
        for y in keys {
            let xs = rows.get_mut(&y).unwrap();
            xs.sort();
            for p in xs.chunks(2) {
                if let [a, b] = p {
                    out.extend((*a..*b).map(|x| [x, y]));
                }
            }
        }
        out
    }

    pub fn segments(&self) -> Vec<Segment> {
        self.edges.iter().map(|e| [corner_point(e[0]), corner_point(e[1])]).collect()
    }

    /// The same point set as `segments`, with collinear unit edges merged
    /// into maximal runs.
    pub fn merged_segments(&self) -> Vec<Segment> {
        let mut out = Vec::new();
        for axis in 0..2 {
            // edges along `axis`, keyed by (fixed coordinate, start)
            let mut es: Vec<(i32, i32)> = self
                .edges
                .iter()
                .filter(|e| e[0][1 - axis] == e[1][1 - axis])
                .map(|e| (e[0][1 - axis], e[0][axis].min(e[1][axis])))
                .collect();
            es.sort();
            es.dedup();
            let mut i = 0;
            while i < es.len() {
                let mut j = i;
                while j + 1 < es.len() && es[j + 1].0 == es[i].0 && es[j + 1].1 == es[j].1 + 1 {
                    j += 1;
                }
                let at = |t: i32| {
                    let mut c = [0; 2];
                    c[axis] = t;
                    c[1 - axis] = es[i].0;
                    corner_point(c)
                };
                out.push([at(es[i].1), at(es[j].1 + 1)]);
                i = j + 1;
            }
        }
        out
    }
}

fn spin_at(g: &Geometry, s: &[i8], bc: &BoundaryCondition, c: [i32; 2]) -> Option<i8> {
    match g.site_at([c[0], c[1], 0]) {
        Some(k) => Some(s[k]),
        None => bc.boundary_spin(g, [c[0], c[1], 0]),
    }
}

/// The broken dual edges of σ, in lattice (unwrapped) corner coordinates.
pub fn broken_edges(g: &Geometry, sigma: &SpinConfig, bc: &BoundaryCondition) -> Result<Vec<[Corner; 2]>> {
    if g.d != 2 {
        return Err(ContourError::NotPlanar(g.d));
    }
    if sigma.spins.len() != g.n_sites() {
        return Err(LatticeError::LengthMismatch { got: sigma.spins.len(), expected: g.n_sites() }.into());
    }
    let s = &sigma.spins;
    let mut out = Vec::new();
    for (i, c) in g.coords().iter().enumerate() {
        let (x, y) = (c[0], c[1]);
        let me = s[i];
        let mut test = |q: [i32; 2], e: [Corner; 2], interior_only: bool| {
            if interior_only && g.site_at([q[0], q[1], 0]).is_some() {
                return;
            }
            if let Some(o) = spin_at(g, s, bc, q) {
                if o != me {
                    out.push(e);
                }
            }
        };
        test([x + 1, y], [[x + 1, y], [x + 1, y + 1]], false);
        test([x, y + 1], [[x, y + 1], [x + 1, y + 1]], false);
        test([x - 1, y], [[x, y], [x, y + 1]], true);
        test([x, y - 1], [[x, y], [x + 1, y]], true);
    }
    Ok(out)
}

fn arm_of(from: Corner, to: Corner, period: Option<[i32; 2]>) -> usize {
    let mut d = [to[0] - from[0], to[1] - from[1]];
    if let Some(p) = period {
        for k in 0..2 {
            if d[k] > 1 {
                d[k] -= p[k];
            } else if d[k] < -1 {
                d[k] += p[k];
            }
        }
    }
    ARMS.iter().position(|a| *a == d).expect("unit dual edge")
}

/// Maximal connected components of the broken dual edges, each traced into
/// simple loops and arcs by the corner-rounding rule.
pub fn extract_contours(g: &Geometry, sigma: &SpinConfig, bc: &BoundaryCondition) -> Result<Vec<Contour>> {
    let period = g.is_periodic().then(|| {
        let (_, e) = g.bbox();
        [e[0] as i32, e[1] as i32]
    });
    let wrap = |c: Corner| -> Corner {
        match period {
            Some(p) => [c[0].rem_euclid(p[0]), c[1].rem_euclid(p[1])],
            None => c,
        }
    };
    let raw = broken_edges(g, sigma, bc)?;
    let mut id: HashMap<Corner, usize> = HashMap::new();
    let mut verts: Vec<Corner> = Vec::new();
    let mut get = |c: Corner| -> usize {
        *id.entry(c).or_insert_with(|| {
            verts.push(c);
            verts.len() - 1
        })
    };
    let edges: Vec<[usize; 2]> = raw.iter().map(|e| [get(wrap(e[0])), get(wrap(e[1]))]).collect();
    let nv = verts.len();
    // arm slots per vertex: edge index or usize::MAX
    let mut arms = vec![[usize::MAX; 4]; nv];
    for (k, &[a, b]) in edges.iter().enumerate() {
        arms[a][arm_of(verts[a], verts[b], period)] = k;
        arms[b][arm_of(verts[b], verts[a], period)] = k;
    }
    let mut uf = UnionFind::new(nv);
    for &[a, b] in &edges {
        uf.union(a, b);
    }
    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    for k in 0..edges.len() {
        groups.entry(uf.find(edges[k][0])).or_default().push(k);
    }
    let mut keys: Vec<usize> = groups.keys().copied().collect();
    keys.sort_by_key(|&r| groups[&r][0]);
    let mut used = vec![false; edges.len()];
    let mut out = Vec::with_capacity(keys.len());
    for r in keys {
        let ks = &groups[&r];
        let mut vs: Vec<usize> = ks.iter().flat_map(|&k| edges[k]).collect();
        vs.sort();
        vs.dedup();
        let degree = |v: usize| arms[v].iter().filter(|&&e| e != usize::MAX).count();
        let odd: Vec<usize> = vs.iter().copied().filter(|&v| degree(v) % 2 == 1).collect();

        // unwrapped coordinates by BFS; a conflict means the contour winds
        let mut pos: HashMap<usize, Corner> = HashMap::new();
        let mut wraps = false;
        let start = vs[0];
        pos.insert(start, verts[start]);
        let mut stack = vec![start];
        while let Some(v) = stack.pop() {
            let pv = pos[&v];
            for (a, &e) in arms[v].iter().enumerate() {
                if e == usize::MAX {
                    continue;
                }
                let w = if edges[e][0] == v { edges[e][1] } else { edges[e][0] };
                let pw = [pv[0] + ARMS[a][0], pv[1] + ARMS[a][1]];
                match pos.get(&w) {
                    Some(&q) => wraps |= q != pw,
                    None => {
                        pos.insert(w, pw);
                        stack.push(w);
                    }
                }
            }
        }

        // tracing
        let walk = |v0: usize, first_arm: usize, used: &mut Vec<bool>| -> Vec<usize> {
            let mut seq = vec![v0];
            let (mut v, mut arm) = (v0, first_arm);
            loop {
                let e = arms[v][arm];
                used[e] = true;
                let w = if edges[e][0] == v { edges[e][1] } else { edges[e][0] };
                seq.push(w);
                let back = (arm + 2) % 4;
                let next = if degree(w) == 4 {
                    let p = PARTNER[back];
                    (!used[arms[w][p]]).then_some(p)
                } else {
                    (0..4).find(|&a| a != back && arms[w][a] != usize::MAX && !used[arms[w][a]])
                };
                match next {
                    Some(a) => {
                        v = w;
                        arm = a;
                    }
                    None => return seq,
                }
            }
        };
        let mut arcs_ix: Vec<Vec<usize>> = Vec::new();
        let mut loops_ix: Vec<Vec<usize>> = Vec::new();
        for &v in &odd {
            let free = |used: &Vec<bool>| (0..4).filter(|&a| arms[v][a] != usize::MAX && !used[arms[v][a]]).collect::<Vec<_>>();
            while let Some(&a) = free(&used).first().filter(|_| free(&used).len() % 2 == 1) {
                arcs_ix.push(walk(v, a, &mut used));
            }
        }
        let mut order: Vec<usize> = vs.clone();
        order.sort_by_key(|&v| (degree(v) == 4, verts[v]));
        for &v in &order {
            while let Some(a) = (0..4).find(|&a| arms[v][a] != usize::MAX && !used[arms[v][a]]) {
                let mut l = walk(v, a, &mut used);
                if l.len() > 1 && l.first() == l.last() {
                    l.pop();
                }
                loops_ix.push(l);
            }
        }
        let to_xy = |seq: &[usize]| -> Vec<Corner> {
            if wraps {
                seq.iter().map(|&v| verts[v]).collect()
            } else {
                seq.iter().map(|&v| pos[&v]).collect()
            }
        };
        let path = splice_walk(&arcs_ix, &loops_ix).map(|p| to_xy(&p));
        let coords: Vec<Corner> = vs.iter().map(|v| if wraps { verts[*v] } else { pos[v] }).collect();
        let diam = if wraps {
            period.map(|p| p[0].max(p[1]) as usize).unwrap_or(0)
        } else {
            let span = |k: usize| {
                let (lo, hi) = coords.iter().fold((i32::MAX, i32::MIN), |(a, b), c| (a.min(c[k]), b.max(c[k])));
                (hi - lo) as usize
            };
            span(0).max(span(1))
        };
        let mut cedges: Vec<[Corner; 2]> = ks
            .iter()
            .map(|&k| {
                let [a, b] = edges[k];
                let (pa, pb) = if wraps { (verts[a], verts[b]) } else { (pos[&a], pos[&b]) };
                if pa <= pb {
                    [pa, pb]
                } else {
                    [pb, pa]
                }
            })
            .collect();
        cedges.sort();
        let closed = odd.is_empty();
        let mut c = Contour {
            edges: cedges,
            loops: loops_ix.iter().map(|l| to_xy(l)).collect(),
            arcs: arcs_ix.iter().map(|l| to_xy(l)).collect(),
            path,
            closed,
            boundary: odd.iter().map(|&v| if wraps { verts[v] } else { pos[&v] }).collect(),
            diam_inf: diam,
            wraps,
            area: None,
        };
        if closed && !wraps {
            c.area = Some(c.interior().len());
        }
        out.push(c);
    }
    Ok(out)
}

/// Merge arcs and loops sharing vertices into one walk; None when the
/// component needs more than one arc.
fn splice_walk(arcs: &[Vec<usize>], loops: &[Vec<usize>]) -> Option<Vec<usize>> {
    let mut main: Vec<usize> = match arcs.len() {
        0 => {
            let mut l = loops.first()?.clone();
            l.push(l[0]);
            l
        }
        1 => arcs[0].clone(),
        _ => return None,
    };
    let mut pending: Vec<&Vec<usize>> = if arcs.is_empty() { loops.iter().skip(1).collect() } else { loops.iter().collect() };
    while !pending.is_empty() {
        let before = pending.len();
        let mut rest = Vec::new();
        for l in pending {
            let at: HashMap<usize, usize> = main.iter().enumerate().map(|(i, &v)| (v, i)).collect();
            if let Some((j, &i)) = l.iter().enumerate().find_map(|(j, v)| at.get(v).map(|i| (j, i))) {
                let mut ins: Vec<usize> = l[j..].iter().chain(l[..j].iter()).copied().collect();
                ins.push(l[j]);
                main.splice(i..=i, ins);
            } else {
                rest.push(l);
            }
        }
        if rest.len() == before {
            return None;
        }
        pending = rest;
    }
    Some(main)
}

/// σ from closed contours: the outer sign flipped once per enclosing contour.
pub fn reconstruct(g: &Geometry, contours: &[Contour], outer: i8) -> SpinConfig {
    let mut s = vec![outer; g.n_sites()];
    for c in contours {
        for cell in c.interior() {
            if let Some(k) = g.site_at([cell[0], cell[1], 0]) {
                s[k] = -s[k];
            }
        }
    }
    SpinConfig { spins: s }
}

/// Split into (s-large, s-small) by diam_∞ > s.
pub fn classify_large(contours: Vec<Contour>, s: usize) -> (Vec<Contour>, Vec<Contour>) {
    contours.into_iter().partition(|c| c.diam_inf > s)
}

fn dist_inf(a: Corner, b: Corner) -> i32 {
    (a[0] - b[0]).abs().max((a[1] - b[1]).abs())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Skeleton {
    pub vertices: Vec<Corner>,
    pub s: usize,
    pub source: usize,
    /// Two or fewer vertices: the cycle does not bound a polygon.
    pub degenerate: bool,
    /// Upper bound on d_H(γ, Pol(S)) in the sup norm.
    pub hausdorff: f64,
}

impl Skeleton {
    pub fn polygon(&self) -> Vec<Pt> {
        self.vertices.iter().map(|&c| corner_point(c)).collect()
    }
}

fn sup_point_seg(p: Pt, s: &Segment) -> f64 {
    let d = [s[1][0] - s[0][0], s[1][1] - s[0][1]];
    let w = [p[0] - s[0][0], p[1] - s[0][1]];
    let f = |t: f64| (w[0] - t * d[0]).abs().max((w[1] - t * d[1]).abs());
    let mut cands = vec![0.0, 1.0];
    for k in 0..2 {
        if d[k] != 0.0 {
            cands.push(w[k] / d[k]);
        }
    }
    for sg in [1.0, -1.0] {
        let den = d[0] - sg * d[1];
        if den != 0.0 {
            cands.push((w[0] - sg * w[1]) / den);
        }
    }
    cands.into_iter().filter(|t| (0.0..=1.0).contains(t)).map(f).fold(f64::INFINITY, f64::min)
}

/// Sup-norm Hausdorff distance between segment soups, sampled at spacing
/// 1/16 and rounded up by the sampling error.
pub fn sup_hausdorff(a: &[Segment], b: &[Segment]) -> f64 {
    let dir = |x: &[Segment], y: &[Segment]| -> f64 {
        let mut best: f64 = 0.0;
        for s in x {
            let len = (s[1][0] - s[0][0]).abs().max((s[1][1] - s[0][1]).abs());
            let m = ((len * 16.0).ceil() as usize).max(1);
            for i in 0..=m {
                let t = i as f64 / m as f64;
                let p = [s[0][0] + t * (s[1][0] - s[0][0]), s[0][1] + t * (s[1][1] - s[0][1])];
                let d = y.iter().map(|q| sup_point_seg(p, q)).fold(f64::INFINITY, f64::min);
                best = best.max(d);
            }
        }
        best + 1.0 / 32.0
    };
    dir(a, b).max(dir(b, a))
}

/// Greedy s-skeleton of a closed contour.
pub fn extract_skeleton(c: &Contour, s: usize, source: usize) -> Result<Skeleton> {
    if !c.closed || c.wraps {
        return Err(ContourError::NotClosed);
    }
    if c.diam_inf < s {
        return Err(ContourError::TooSmall { diam: c.diam_inf, s });
    }
    let mut walk = c.path.clone().ok_or(ContourError::NotClosed)?;
    walk.pop();
    let start = (0..walk.len()).min_by_key(|&i| walk[i]).unwrap();
    walk.rotate_left(start);
    let si = s as i32;
    let mut u = vec![walk[0]];
    for &v in &walk[1..] {
        if dist_inf(v, *u.last().unwrap()) >= si {
            u.push(v);
        }
    }
    // final leg merge
    while u.len() > 2 && 2 * dist_inf(*u.last().unwrap(), u[0]) < si {
        u.pop();
    }
    let degenerate = u.len() <= 2;
    let poly: Vec<Pt> = u.iter().map(|&q| corner_point(q)).collect();
    let hausdorff = sup_hausdorff(&c.segments(), &geometry::segments(&poly, true));
    let sk = Skeleton { vertices: u, s, source, degenerate, hausdorff };
    if !degenerate {
        check_skeleton(&sk, c)?;
    }
    Ok(sk)
}

/// The three defining clauses, checked on an emitted skeleton.
pub fn check_skeleton(sk: &Skeleton, c: &Contour) -> Result<()> {
    let on: std::collections::HashSet<Corner> = c.edges.iter().flat_map(|e| [e[0], e[1]]).collect();
    if let Some(v) = sk.vertices.iter().find(|v| !on.contains(*v)) {
        return Err(ContourError::Irregular { clause: 1, detail: format!("vertex {v:?} is not on the contour") });
    }
    let n = sk.vertices.len();
    let s = sk.s as i32;
    for i in 0..n {
        let d = dist_inf(sk.vertices[i], sk.vertices[(i + 1) % n]);
        if 2 * d < s || d > 2 * s {
            return Err(ContourError::Irregular { clause: 2, detail: format!("leg {i} has length {d}") });
        }
    }
    if sk.hausdorff > sk.s as f64 {
        return Err(ContourError::Irregular { clause: 3, detail: format!("d_H = {} > {}", sk.hausdorff, sk.s) });
    }
    Ok(())
}

/// W(Pol(S)) = Σ τ(u_{i+1} − u_i).
pub fn skeleton_energy(sk: &Skeleton, tau: &DirectionalTension) -> f64 {
    let n = sk.vertices.len();
    (0..n)
        .map(|i| {
            let (a, b) = (sk.vertices[i], sk.vertices[(i + 1) % n]);
            tau.tau_h([(b[0] - a[0]) as f64, (b[1] - a[1]) as f64])
        })
        .sum()
}

/// #(S)·s·min τ ≤ 2·W(Pol(S)).
pub fn vertex_bound_check(sk: &Skeleton, tau: &DirectionalTension, s: usize) -> bool {
    sk.vertices.len() as f64 * s as f64 * tau.min_tau() <= 2.0 * skeleton_energy(sk, tau)
}

/// Sum of skeleton polygon areas, used as a proxy for the phase volume.
pub fn phase_volume_proxy(skeletons: &[Skeleton]) -> f64 {
    skeletons.iter().map(|s| geometry::signed_area(&s.polygon()).abs()).sum()
}

#[derive(Clone, Debug, Serialize)]
pub struct DropletSample {
    pub n_contours: usize,
    pub n_large: usize,
    pub largest_len: usize,
    pub largest_area: Option<usize>,
    pub area_ratio: Option<f64>,
    pub hausdorff: Option<f64>,
    pub sym_diff: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DropletReport {
    pub samples: Vec<DropletSample>,
    pub s: usize,
    pub target_area: f64,
    pub single_large_frequency: f64,
    pub single_large_ci: (f64, f64),
    pub no_large: usize,
    pub median_area_ratio: f64,
    pub median_area_ratio_ci: (f64, f64),
    pub median_hausdorff: f64,
    pub mean_hausdorff: stats::Estimate,
    pub median_sym_diff: f64,
}

#[derive(Clone, Debug)]
pub struct DropletSetup<'a> {
    pub geometry: &'a Geometry,
    pub bc: &'a BoundaryCondition,
    pub s: usize,
    /// Unit-area Wulff shape.
    pub k1: &'a ConvexPolygon,
    pub m_star: f64,
    /// Magnetization excess a_N over −m*|Λ|.
    pub a_n: f64,
    /// Compute the translate-optimized shape distances.
    pub shape_metrics: bool,
}

/// `n_plus` plus spins on the sites nearest the centroid of `k` in its own
/// gauge, minus elsewhere: a discrete Wulff droplet.
pub fn wulff_droplet_start(g: &Geometry, k: &ConvexPolygon, n_plus: usize) -> SpinConfig {
    let mut order: Vec<(f64, usize)> =
        g.coords().iter().enumerate().map(|(i, c)| (k.gauge([c[0] as f64, c[1] as f64]), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut s = vec![-1i8; g.n_sites()];
    for &(_, i) in order.iter().take(n_plus) {
        s[i] = 1;
    }
    SpinConfig { spins: s }
}

pub fn droplet_sample(setup: &DropletSetup, sigma: &SpinConfig) -> Result<DropletSample> {
    let cs = extract_contours(setup.geometry, sigma, setup.bc)?;
    let n_contours = cs.len();
    let target = setup.a_n / (2.0 * setup.m_star);
    let (large, small) = classify_large(cs, setup.s);
    // Shape metrics use the largest contour even when it is not s-large.
    let big = large.iter().chain(small.iter()).max_by_key(|c| (c.len(), c.area.unwrap_or(0)));
    let mut out = DropletSample {
        n_contours,
        n_large: large.len(),
        largest_len: big.map_or(0, |c| c.len()),
        largest_area: big.and_then(|c| c.area),
        area_ratio: None,
        hausdorff: None,
        sym_diff: None,
    };
    if let Some(c) = big {
        out.area_ratio = c.area.map(|a| a as f64 / target);
        if setup.shape_metrics && c.closed && !c.wraps {
            let kv = geometry::dilate(setup.k1, target).expect("positive target");
            out.hausdorff = Some(geometry::best_translate_hausdorff(&c.merged_segments(), &kv, 1e-3).residual);
            out.sym_diff = Some(geometry::best_translate_cells(&c.interior(), &kv, 1e-3).residual);
        }
    }
    Ok(out)
}

/// Per-sample contour analysis (parallel over samples) and aggregates.
pub fn droplet_statistics(setup: &DropletSetup, samples: &[SpinConfig]) -> Result<DropletReport> {
    let per: Vec<DropletSample> = samples.par_iter().map(|s| droplet_sample(setup, s)).collect::<Result<_>>()?;
    let n = per.len();
    let single = per.iter().filter(|p| p.n_large == 1).count();
    let ratios: Vec<f64> = per.iter().filter_map(|p| p.area_ratio).collect();
    let hs: Vec<f64> = per.iter().filter_map(|p| p.hausdorff).collect();
    let ds: Vec<f64> = per.iter().filter_map(|p| p.sym_diff).collect();
    let med = |v: &[f64]| if v.is_empty() { f64::NAN } else { stats::median(v) };
    Ok(DropletReport {
        s: setup.s,
        target_area: setup.a_n / (2.0 * setup.m_star),
        single_large_frequency: single as f64 / n.max(1) as f64,
        single_large_ci: stats::wilson_interval(single, n),
        no_large: per.iter().filter(|p| p.n_large == 0).count(),
        median_area_ratio: med(&ratios),
        median_area_ratio_ci: median_ci(&ratios),
        median_hausdorff: med(&hs),
        mean_hausdorff: if hs.len() > 1 { stats::mean_with_error(&hs) } else { stats::Estimate::new(med(&hs), f64::NAN) },
        median_sym_diff: med(&ds),
        samples: per,
    })
}

/// Distribution-free 95% interval for the median from order statistics.
pub fn median_ci(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let half = 1.96 * (n as f64).sqrt() / 2.0;
    let lo = ((n as f64 / 2.0 - half).floor().max(0.0)) as usize;
    let hi = ((n as f64 / 2.0 + half).ceil() as usize).min(n - 1);
    (v[lo], v[hi])
}

/// A parallelepiped on the unit torus around an interface: tangent extent
/// ±`half_width`, normal extent ±`height`, cut into `layers` sections on
/// each side. R⁺ is the side the normal points into.
#[derive(Clone, Debug, Serialize)]
pub struct SectionStack {
    pub center: Pt,
    pub normal_angle: f64,
    pub half_width: f64,
    pub height: f64,
    pub layers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MinimalSection {
    pub n_plus: usize,
    pub n_minus: usize,
    pub j_plus: usize,
    pub j_minus: usize,
    /// Bad-block count per section, innermost first.
    pub counts_plus: Vec<usize>,
    pub counts_minus: Vec<usize>,
}

/// Section of a block center: (side, layer), or None outside R.
fn section_of(r: &SectionStack, c: Pt) -> Option<(bool, usize)> {
    let n = crate::tension::unit(r.normal_angle);
    let t = [-n[1], n[0]];
    // nearest periodic image
    let dx = [(c[0] - r.center[0] + 0.5).rem_euclid(1.0) - 0.5, (c[1] - r.center[1] + 0.5).rem_euclid(1.0) - 0.5];
    let along = dx[0] * t[0] + dx[1] * t[1];
    let up = dx[0] * n[0] + dx[1] * n[1];
    if along.abs() > r.half_width || up.abs() > r.height || up == 0.0 {
        return None;
    }
    let j = ((up.abs() / r.height) * r.layers as f64).floor() as usize;
    Some((up > 0.0, j.min(r.layers - 1)))
}

/// Bad blocks per section (0 anywhere, −1 in R⁺, +1 in R⁻) and the first
/// section attaining the minimum on each side.
pub fn minimal_section_diagnostic(labels: &crate::coarse::PhaseLabelField, r: &SectionStack) -> Result<MinimalSection> {
    let g = labels.grid;
    if g.d != 2 {
        return Err(ContourError::NotPlanar(g.d));
    }
    let ok = r.layers > 0
        && r.half_width > 0.0
        && r.height > 0.0
        && r.center.iter().all(|x| (0.0..1.0).contains(x))
        && r.half_width.hypot(r.height) < 0.5;
    if !ok {
        return Err(ContourError::RegionOutside(format!("{r:?}")));
    }
    let mut plus = vec![0usize; r.layers];
    let mut minus = vec![0usize; r.layers];
    for i in 0..g.len() {
        let c = g.coord(i);
        let p = [(c[0] as f64 + 0.5) / g.b as f64, (c[1] as f64 + 0.5) / g.b as f64];
        if let Some((up, j)) = section_of(r, p) {
            let u = labels.labels[i];
            if up && u != 1 {
                plus[j] += 1;
            } else if !up && u != -1 {
                minus[j] += 1;
            }
        }
    }
    let argmin = |v: &[usize]| {
        let m = *v.iter().min().unwrap();
        (m, v.iter().position(|&x| x == m).unwrap())
    };
    let (n_plus, j_plus) = argmin(&plus);
    let (n_minus, j_minus) = argmin(&minus);
    Ok(MinimalSection { n_plus, n_minus, j_plus, j_minus, counts_plus: plus, counts_minus: minus })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_lattice, ShapeSpec};
    use crate::rng::RngStream;
    use proptest::prelude::*;

    fn bx(n: usize) -> Geometry {
        build_lattice(&ShapeSpec::square_box(2, n)).unwrap()
    }

    fn config(g: &Geometry, f: impl Fn(i32, i32) -> i8) -> SpinConfig {
        SpinConfig { spins: g.coords().iter().map(|c| f(c[0], c[1])).collect() }
    }

    #[test]
    fn plus_sea_has_no_contours() {
        let g = bx(6);
        assert!(extract_contours(&g, &SpinConfig::constant(36, 1), &BoundaryCondition::Plus).unwrap().is_empty());
    }

    #[test]
    fn single_flip_is_a_plaquette() {
        let g = bx(5);
        let s = config(&g, |x, y| if (x, y) == (2, 2) { -1 } else { 1 });
        let cs = extract_contours(&g, &s, &BoundaryCondition::Plus).unwrap();
        assert_eq!(cs.len(), 1);
        let c = &cs[0];
        assert_eq!((c.len(), c.area, c.closed, c.diam_inf), (4, Some(1), true, 1));
        assert_eq!(c.loops.len(), 1);
        assert_eq!(c.interior(), vec![[2, 2]]);
        let (large, small) = classify_large(cs, 2);
        assert!(large.is_empty() && small.len() == 1);
    }

    #[test]
    fn degree_four_corners_are_rounded() {
        let g = bx(6);
        // SE and NW cells around corner [3, 3] are split off as two loops
        let s = config(&g, |x, y| if (x, y) == (3, 2) || (x, y) == (2, 3) { -1 } else { 1 });
        let cs = extract_contours(&g, &s, &BoundaryCondition::Plus).unwrap();
        assert_eq!(cs.len(), 1);
        assert_eq!(cs[0].loops.len(), 2);
        assert!(cs[0].loops.iter().all(|l| l.len() == 4));
        assert_eq!(cs[0].area, Some(2));
        assert_eq!(cs[0].path.as_ref().unwrap().len(), 9);
        // SW and NE cells are joined into one loop touching itself
        let t = config(&g, |x, y| if (x, y) == (2, 2) || (x, y) == (3, 3) { -1 } else { 1 });
        let ct = extract_contours(&g, &t, &BoundaryCondition::Plus).unwrap();
        assert_eq!(ct.len(), 1);
        assert_eq!(ct[0].loops.len(), 1);
        assert_eq!(ct[0].loops[0].len(), 8);
    }

    #[test]
    fn mixed_bc_gives_one_open_contour() {
        let g = build_lattice(&ShapeSpec::rect(8, 6)).unwrap();
        let bc = BoundaryCondition::MixedPm { normal: [0.0, 1.0, 0.0] };
        let s = config(&g, |_, y| if y >= 3 { 1 } else { -1 });
        let cs = extract_contours(&g, &s, &bc).unwrap();
        let open: Vec<_> = cs.iter().filter(|c| !c.closed).collect();
        assert_eq!(open.len(), 1);
        assert_eq!(open[0].boundary.len(), 2);
        assert!(open[0].path.is_some());
    }

    #[test]
    fn straight_path_is_large() {
        let g = build_lattice(&ShapeSpec::rect(12, 4)).unwrap();
        let bc = BoundaryCondition::MixedPm { normal: [0.0, 1.0, 0.0] };
        let s = config(&g, |_, y| if y >= 2 { 1 } else { -1 });
        let cs = extract_contours(&g, &s, &bc).unwrap();
        let c = cs.iter().find(|c| !c.closed).unwrap();
        assert_eq!(c.diam_inf, 12);
        let (l, _) = classify_large(cs.clone(), 5);
        assert_eq!(l.len(), 1);
    }

    #[test]
    fn torus_winding_contour() {
        let g = build_lattice(&ShapeSpec::torus(2, 6)).unwrap();
        let s = config(&g, |_, y| if y < 3 { -1 } else { 1 });
        let cs = extract_contours(&g, &s, &BoundaryCondition::Periodic).unwrap();
        assert_eq!(cs.len(), 2);
        assert!(cs.iter().all(|c| c.wraps && c.closed && c.area.is_none()));
    }

    fn random_config(g: &Geometry, rng: &mut RngStream, p: f64) -> SpinConfig {
        SpinConfig { spins: (0..g.n_sites()).map(|_| if rng.uniform() < p { -1 } else { 1 }).collect() }
    }

    proptest! {
        #[test]
        fn reconstruction_round_trip(seed in 0u64..10_000, p in 0.05f64..0.7) {
            let g = bx(9);
            let mut rng = RngStream::new(seed, 0);
            let s = random_config(&g, &mut rng, p);
            let cs = extract_contours(&g, &s, &BoundaryCondition::Plus).unwrap();
            prop_assert!(cs.iter().all(|c| c.closed && c.path.is_some()));
            let total: usize = cs.iter().map(|c| c.len()).sum();
            prop_assert_eq!(total, broken_edges(&g, &s, &BoundaryCondition::Plus).unwrap().len());
            prop_assert_eq!(reconstruct(&g, &cs, 1), s);
            for c in &cs {
                let covered: usize = c.loops.iter().map(|l| l.len()).sum();
                prop_assert_eq!(covered, c.len());
            }
        }

        #[test]
        fn merged_segments_cover_the_same_set(seed in 0u64..10_000, p in 0.1f64..0.6) {
            let g = bx(8);
            let mut rng = RngStream::new(seed, 2);
            let s = random_config(&g, &mut rng, p);
            for c in extract_contours(&g, &s, &BoundaryCondition::Plus).unwrap() {
                let (a, b) = (c.segments(), c.merged_segments());
                let len = |v: &[Segment]| v.iter().map(|q| (q[1][0] - q[0][0]).abs() + (q[1][1] - q[0][1]).abs()).sum::<f64>();
                prop_assert!(b.len() <= a.len());
                prop_assert_eq!(len(&a), len(&b));
                prop_assert_eq!(geometry::hausdorff_segments(&a, &b), 0.0);
            }
        }

        #[test]
        fn open_contours_pair_odd_vertices(seed in 0u64..10_000) {
            let g = build_lattice(&ShapeSpec::rect(7, 6)).unwrap();
            let bc = BoundaryCondition::MixedPm { normal: [0.3, 1.0, 0.0] };
            let mut rng = RngStream::new(seed, 1);
            let s = random_config(&g, &mut rng, 0.5);
            let cs = extract_contours(&g, &s, &bc).unwrap();
            let odd: usize = cs.iter().map(|c| c.boundary.len()).sum();
            let arcs: usize = cs.iter().map(|c| c.arcs.len()).sum();
            prop_assert_eq!(odd, 2);
            prop_assert_eq!(arcs, 1);
        }

        #[test]
        fn classification_matches_recount(seed in 0u64..10_000, s in 1usize..6) {
            let g = bx(10);
            let mut rng = RngStream::new(seed, 2);
            let sig = random_config(&g, &mut rng, 0.15);
            let cs = extract_contours(&g, &sig, &BoundaryCondition::Plus).unwrap();
            let brute = cs.iter().filter(|c| {
                let xs: Vec<i32> = c.edges.iter().flat_map(|e| [e[0][0], e[1][0]]).collect();
                let ys: Vec<i32> = c.edges.iter().flat_map(|e| [e[0][1], e[1][1]]).collect();
                let span = (xs.iter().max().unwrap() - xs.iter().min().unwrap()).max(ys.iter().max().unwrap() - ys.iter().min().unwrap());
                span as usize > s
            }).count();
            prop_assert_eq!(classify_large(cs, s).0.len(), brute);
        }
    }

    fn square_contour(side: i32) -> Contour {
        let n = side as usize + 4;
        let g = bx(n);
        let s = config(&g, |x, y| if (2..2 + side).contains(&x) && (2..2 + side).contains(&y) { -1 } else { 1 });
        let mut cs = extract_contours(&g, &s, &BoundaryCondition::Plus).unwrap();
        cs.remove(0)
    }

    #[test]
    fn square_skeleton_is_regular() {
        let s = 3;
        let c = square_contour(8 * s as i32);
        let sk = extract_skeleton(&c, s, 0).unwrap();
        assert_eq!(sk.vertices.len(), 32);
        assert!(!sk.degenerate);
        let n = sk.vertices.len();
        for i in 0..n {
            assert_eq!(dist_inf(sk.vertices[i], sk.vertices[(i + 1) % n]), s as i32);
        }
        assert!(sk.hausdorff <= s as f64);
        let t = DirectionalTension::constant(1.0, 8).unwrap();
        assert!((skeleton_energy(&sk, &t) - 4.0 * 24.0).abs() < 1e-9);
        let mut rot = sk.clone();
        rot.vertices.rotate_left(5);
        assert!((skeleton_energy(&rot, &t) - skeleton_energy(&sk, &t)).abs() < 1e-12);
        assert!(vertex_bound_check(&sk, &t, s));
        assert!((phase_volume_proxy(&[sk]) - 576.0).abs() < 1e-9);
    }

    #[test]
    fn skeleton_of_minimal_contour_is_degenerate() {
        let g = bx(8);
        let sig = config(&g, |x, y| if (2..6).contains(&x) && y == 2 { -1 } else { 1 });
        let c = extract_contours(&g, &sig, &BoundaryCondition::Plus).unwrap().remove(0);
        assert_eq!(c.diam_inf, 4);
        let sk = extract_skeleton(&c, 4, 0).unwrap();
        assert!(sk.degenerate && sk.vertices.len() <= 2);
        assert!(matches!(extract_skeleton(&c, 5, 0), Err(ContourError::TooSmall { .. })));
    }

    #[test]
    fn circle_skeleton() {
        let s = 2usize;
        let r = 20.0 * s as f64;
        let n = (2.0 * r) as usize + 6;
        let g = bx(n);
        let ctr = n as f64 / 2.0;
        let sig = config(&g, |x, y| if (x as f64 - ctr).hypot(y as f64 - ctr) < r { -1 } else { 1 });
        let cs = extract_contours(&g, &sig, &BoundaryCondition::Plus).unwrap();
        assert_eq!(cs.len(), 1);
        let sk = extract_skeleton(&cs[0], s, 0).unwrap();
        assert!(sk.hausdorff <= s as f64);
        let count = sk.vertices.len() as f64;
        assert!(count <= std::f64::consts::TAU * r / (s as f64 / 2.0));
        // legs are at most 2s in the sup norm, and the sup-norm length of the circle is 4√2·r
        assert!(count >= 4.0 * 2f64.sqrt() * r / (2.0 * s as f64) - 1.0);
    }

    #[test]
    fn droplet_sample_on_a_disk() {
        let g = build_lattice(&ShapeSpec::square_box(2, 40)).unwrap();
        let sig = config(&g, |x, y| if (x as f64 - 20.0).hypot(y as f64 - 19.5) < 10.0 { 1 } else { -1 });
        let t = DirectionalTension::constant(1.0, 180).unwrap();
        let k1 = geometry::normalize_unit_volume(&geometry::wulff_shape(&t).unwrap());
        let area = sig.spins.iter().filter(|&&x| x == 1).count() as f64;
        let setup = DropletSetup { geometry: &g, bc: &BoundaryCondition::Minus, s: 8, k1: &k1, m_star: 1.0, a_n: 2.0 * area, shape_metrics: true };
        let d = droplet_sample(&setup, &sig).unwrap();
        assert_eq!(d.n_large, 1);
        assert!((d.area_ratio.unwrap() - 1.0).abs() < 1e-12);
        assert!(d.hausdorff.unwrap() < 1.5, "{:?}", d.hausdorff);
        assert!(d.sym_diff.unwrap() < 0.1 * area);
        let rep = droplet_statistics(&setup, &[sig.clone(), sig]).unwrap();
        assert_eq!(rep.single_large_frequency, 1.0);
    }

    fn label_field(b: usize, mut f: impl FnMut(usize, usize) -> i8) -> crate::coarse::PhaseLabelField {
        let grid = crate::coarse::BlockGrid { d: 2, k: 2, b };
        let labels = (0..grid.len()).map(|i| { let c = grid.coord(i); f(c[0], c[1]) }).collect();
        crate::coarse::PhaseLabelField { grid, zeta: 0.1, scheme: crate::coarse::LabelScheme::Averaged, labels }
    }

    fn stack() -> SectionStack {
        SectionStack { center: [0.5, 0.5], normal_angle: std::f64::consts::FRAC_PI_2, half_width: 0.3, height: 0.3, layers: 4 }
    }

    #[test]
    fn minimal_section_flat_and_finger() {
        let flat = label_field(32, |_, y| if y >= 16 { 1 } else { -1 });
        let m = minimal_section_diagnostic(&flat, &stack()).unwrap();
        assert_eq!((m.n_plus, m.n_minus), (0, 0));
        assert!(m.counts_plus.iter().chain(&m.counts_minus).all(|&c| c == 0));
        let finger = label_field(32, |x, y| if x == 16 { 0 } else if y >= 16 { 1 } else { -1 });
        let m = minimal_section_diagnostic(&finger, &stack()).unwrap();
        assert!(m.n_plus >= 1 && m.n_minus >= 1);
        let mut bad = stack();
        bad.half_width = 0.6;
        assert!(matches!(minimal_section_diagnostic(&flat, &bad), Err(ContourError::RegionOutside(_))));
    }

    proptest! {
        #[test]
        fn minimal_section_recount(seed in 0u64..3000, angle in 0.0f64..6.28) {
            let mut rng = crate::rng::RngStream::new(seed, 9);
            let f = label_field(16, |_, _| rng_label(&mut rng));
            let r = SectionStack { center: [0.41, 0.57], normal_angle: angle, half_width: 0.25, height: 0.2, layers: 3 };
            let m = minimal_section_diagnostic(&f, &r).unwrap();
            // recount block by block with explicit image search
            let n = [angle.cos(), angle.sin()];
            let mut plus = vec![0usize; 3];
            let mut minus = vec![0usize; 3];
            for i in 0..f.grid.len() {
                let c = f.grid.coord(i);
                let p = [(c[0] as f64 + 0.5) / 16.0, (c[1] as f64 + 0.5) / 16.0];
                for ix in -1..=1 { for iy in -1..=1 {
                    let d = [p[0] + ix as f64 - 0.41, p[1] + iy as f64 - 0.57];
                    let up = d[0] * n[0] + d[1] * n[1];
                    let along = -d[0] * n[1] + d[1] * n[0];
                    if along.abs() <= 0.25 && up.abs() <= 0.2 && up != 0.0 {
                        let j = ((up.abs() / 0.2 * 3.0).floor() as usize).min(2);
                        let u = f.labels[i];
                        if up > 0.0 && u != 1 { plus[j] += 1; }
                        if up < 0.0 && u != -1 { minus[j] += 1; }
                    }
                }}
            }
            prop_assert_eq!(&m.counts_plus, &plus);
            prop_assert_eq!(&m.counts_minus, &minus);
            prop_assert_eq!(m.n_plus, *plus.iter().min().unwrap());
        }
    }

    fn rng_label(r: &mut crate::rng::RngStream) -> i8 {
        r.below(3) as i8 - 1
    }
}
