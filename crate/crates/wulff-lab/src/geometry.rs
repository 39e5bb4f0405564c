//! Planar convex geometry: Wulff and Winterbottom constructions, surface
//! energies of polygons, Hausdorff and symmetric-difference metrics, and
//! fields on grids (L1 distance, perimeter, translate fits).

use crate::stats::KahanSum;
use crate::tension::{unit as unit_vec, DirectionalTension};
use std::f64::consts::TAU;
use serde::Serialize;
use thiserror::Error;

pub type Pt = [f64; 2];

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("half-plane intersection has empty interior; offending directions (rad) {0:?}")]
    Degenerate(Vec<f64>),
    #[error("tension must be positive; nonpositive at directions (rad) {0:?}")]
    NonPositiveTension(Vec<f64>),
    #[error("polygon is not convex and counterclockwise")]
    NotConvex,
    #[error("polygon needs three vertices and positive area")]
    DegeneratePolygon,
    #[error("volume must be positive, got {0}")]
    NonPositiveVolume(f64),
    #[error("|tau_bd| = {tau_bd} exceeds tau* = {tau_star}")]
    WallTension { tau_bd: f64, tau_star: f64 },
    #[error("polygon dips below the wall at vertex {0}")]
    BelowWall(usize),
    #[error("field values must be +1 or -1 (index {0})")]
    NotIndicator(usize),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("operation needs a planar field")]
    NotPlanar,
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[inline]
fn sub(a: Pt, b: Pt) -> Pt {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
fn dot(a: Pt, b: Pt) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
fn cross(a: Pt, b: Pt) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

fn norm(a: Pt) -> f64 {
    a[0].hypot(a[1])
}

/// Exact orientation sign of (a, b, c): > 0 for a left turn.
pub fn orient(a: Pt, b: Pt, c: Pt) -> f64 {
    robust::orient2d(
        robust::Coord { x: a[0], y: a[1] },
        robust::Coord { x: b[0], y: b[1] },
        robust::Coord { x: c[0], y: c[1] },
    )
}

/// Signed shoelace area (positive for counterclockwise).
pub fn signed_area(p: &[Pt]) -> f64 {
    let mut s = KahanSum::new();
    for i in 0..p.len() {
        s.add(cross(p[i], p[(i + 1) % p.len()]));
    }
    0.5 * s.value()
}

pub fn polyline_length(p: &[Pt], closed: bool) -> f64 {
    let n = p.len();
    let m = if closed { n } else { n.saturating_sub(1) };
    (0..m).map(|i| norm(sub(p[(i + 1) % n], p[i]))).sum()
}

/// A convex polygon with counterclockwise vertices.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvexPolygon {
    vertices: Vec<Pt>,
    area: f64,
    perimeter: f64,
}

impl ConvexPolygon {
    pub fn new(vertices: Vec<Pt>) -> Result<Self> {
        let mut v: Vec<Pt> = Vec::with_capacity(vertices.len());
        for p in vertices {
            if v.last() != Some(&p) {
                v.push(p);
            }
        }
        while v.len() > 1 && v.first() == v.last() {
            v.pop();
        }
        if v.len() < 3 {
            return Err(GeometryError::DegeneratePolygon);
        }
        let n = v.len();
        for i in 0..n {
            if orient(v[i], v[(i + 1) % n], v[(i + 2) % n]) < 0.0 {
                return Err(GeometryError::NotConvex);
            }
        }
        let area = signed_area(&v);
        if area <= 0.0 {
            return Err(GeometryError::DegeneratePolygon);
        }
        // a polygon winding twice would pass the turn test; its angle sum betrays it
        let turn: f64 = (0..n)
            .map(|i| {
                let a = sub(v[(i + 1) % n], v[i]);
                let b = sub(v[(i + 2) % n], v[(i + 1) % n]);
                cross(a, b).atan2(dot(a, b))
            })
            .sum();
        if turn > 2.0 * std::f64::consts::TAU - 1e-6 {
            return Err(GeometryError::NotConvex);
        }
        let perimeter = polyline_length(&v, true);
        Ok(ConvexPolygon { vertices: v, area, perimeter })
    }

    pub fn vertices(&self) -> &[Pt] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        self.area
    }

    pub fn perimeter(&self) -> f64 {
        self.perimeter
    }

    /// Outward unit normals, one per edge v_i → v_{i+1}.
    pub fn edge_normals(&self) -> Vec<Pt> {
        let n = self.vertices.len();
        (0..n)
            .map(|i| {
                let e = sub(self.vertices[(i + 1) % n], self.vertices[i]);
                let l = norm(e);
                [e[1] / l, -e[0] / l]
            })
            .collect()
    }

    /// Support function h(n) = max over vertices of v·n.
    pub fn support(&self, n: Pt) -> f64 {
        self.vertices.iter().map(|&v| dot(v, n)).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Minkowski gauge of `p` relative to the centroid: the least t with
    /// p ∈ c + t(K − c).
    pub fn gauge(&self, p: Pt) -> f64 {
        let c = self.centroid();
        let x = sub(p, c);
        self.edge_normals().iter().map(|&n| dot(x, n) / (self.support(n) - dot(c, n))).fold(0.0, f64::max)
    }

    pub fn contains(&self, p: Pt) -> bool {
        let n = self.vertices.len();
        (0..n).all(|i| orient(self.vertices[i], self.vertices[(i + 1) % n], p) >= 0.0)
    }

    pub fn centroid(&self) -> Pt {
        let n = self.vertices.len();
        let (mut cx, mut cy) = (KahanSum::new(), KahanSum::new());
        for i in 0..n {
            let (a, b) = (self.vertices[i], self.vertices[(i + 1) % n]);
            let c = cross(a, b);
            cx.add((a[0] + b[0]) * c);
            cy.add((a[1] + b[1]) * c);
        }
        [cx.value() / (6.0 * self.area), cy.value() / (6.0 * self.area)]
    }

    pub fn translate(&self, x: Pt) -> Self {
        ConvexPolygon {
            vertices: self.vertices.iter().map(|v| [v[0] + x[0], v[1] + x[1]]).collect(),
            area: self.area,
            perimeter: self.perimeter,
        }
    }

    /// Dilation about the origin by s > 0.
    pub fn scale(&self, s: f64) -> Self {
        ConvexPolygon {
            vertices: self.vertices.iter().map(|v| [v[0] * s, v[1] * s]).collect(),
            area: self.area * s * s,
            perimeter: self.perimeter * s,
        }
    }

    pub fn bbox(&self) -> (Pt, Pt) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in &self.vertices {
            for k in 0..2 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }
}

/// Keep the part of `poly` on the left of the directed line a → b.
fn clip_left(poly: &[Pt], a: Pt, b: Pt) -> Vec<Pt> {
    let n = poly.len();
    let mut out = Vec::with_capacity(n + 2);
    if n == 0 {
        return out;
    }
    let d = sub(b, a);
    let side = |p: Pt| orient(a, b, p);
    let val = |p: Pt| cross(d, sub(p, a));
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        let (sp, sq) = (side(p), side(q));
        if sp >= 0.0 {
            out.push(p);
        }
        if (sp > 0.0 && sq < 0.0) || (sp < 0.0 && sq > 0.0) {
            let (vp, vq) = (val(p), val(q));
            let t = (vp / (vp - vq)).clamp(0.0, 1.0);
            out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
        }
    }
    out
}

/// Intersection of an arbitrary simple polygon with a convex polygon.
pub fn clip_polygon(subject: &[Pt], window: &ConvexPolygon) -> Vec<Pt> {
    let w = window.vertices();
    let mut cur = subject.to_vec();
    for i in 0..w.len() {
        cur = clip_left(&cur, w[i], w[(i + 1) % w.len()]);
        if cur.is_empty() {
            break;
        }
    }
    cur
}

fn dedup_ring(v: Vec<Pt>, tol: f64) -> Vec<Pt> {
    let mut out: Vec<Pt> = Vec::with_capacity(v.len());
    for p in v {
        if out.last().map_or(true, |q| norm(sub(p, *q)) > tol) {
            out.push(p);
        }
    }
    while out.len() > 1 && norm(sub(out[0], *out.last().unwrap())) <= tol {
        out.pop();
    }
    out
}

/// K = ∩_k {x : x·n_k ≤ τ(n_k)} over the table's directions.
pub fn wulff_shape(tau: &DirectionalTension) -> Result<ConvexPolygon> {
    let bad: Vec<f64> = (0..tau.len()).filter(|&k| !(tau.tau[k] > 0.0)).map(|k| tau.directions[k]).collect();
    if !bad.is_empty() {
        return Err(GeometryError::NonPositiveTension(bad));
    }
    let max_gap = (0..tau.len())
        .map(|k| (tau.directions[(k + 1) % tau.len()] - tau.directions[k]).rem_euclid(std::f64::consts::TAU))
        .fold(0.0, f64::max);
    let r = 2.0 * tau.max_tau() / (max_gap / 2.0).cos().max(1e-6) + 1.0;
    let mut poly = vec![[-r, -r], [r, -r], [r, r], [-r, r]];
    for k in 0..tau.len() {
        let n = tau.normal(k);
        let a = [tau.tau[k] * n[0], tau.tau[k] * n[1]];
        let b = [a[0] - n[1], a[1] + n[0]];
        poly = clip_left(&poly, a, b);
        if poly.len() < 3 {
            return Err(GeometryError::Degenerate(vec![tau.directions[k]]));
        }
    }
    let poly = dedup_ring(poly, 1e-13 * r);
    let tight = |p: &Pt| -> Vec<f64> {
        (0..tau.len())
            .filter(|&k| (dot(*p, tau.normal(k)) - tau.tau[k]).abs() < 1e-9 * r)
            .map(|k| tau.directions[k])
            .collect()
    };
    match ConvexPolygon::new(poly.clone()) {
        Ok(k) if k.area() > 1e-20 * r * r => Ok(k),
        _ => {
            let mut dirs: Vec<f64> = poly.iter().flat_map(tight).collect();
            dirs.sort_by(f64::total_cmp);
            dirs.dedup();
            Err(GeometryError::Degenerate(dirs))
        }
    }
}

/// K_1 = K / √|K|.
pub fn normalize_unit_volume(k: &ConvexPolygon) -> ConvexPolygon {
    k.scale(1.0 / k.area().sqrt())
}

/// K_v = √v · K_1.
pub fn dilate(k1: &ConvexPolygon, v: f64) -> Result<ConvexPolygon> {
    if !(v > 0.0) {
        return Err(GeometryError::NonPositiveVolume(v));
    }
    Ok(k1.scale((v / k1.area()).sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SurfaceEnergy {
    pub value: f64,
    /// Zero-length edges that were skipped.
    pub skipped: usize,
}

/// Σ over edges of τ(outward normal)·length; edge a → b has normal (Δy, −Δx)
/// which is outward for counterclockwise polygons.
pub fn surface_energy(poly: &[Pt], closed: bool, tau: &DirectionalTension) -> SurfaceEnergy {
    let n = poly.len();
    let m = if closed { n } else { n.saturating_sub(1) };
    let mut s = KahanSum::new();
    let mut skipped = 0;
    for i in 0..m {
        let e = sub(poly[(i + 1) % n], poly[i]);
        if e == [0.0, 0.0] {
            skipped += 1;
            continue;
        }
        s.add(tau.tau_h([e[1], -e[0]]));
    }
    SurfaceEnergy { value: s.value(), skipped }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum WettingRegime {
    /// τ_bd = τ*: the crystal does not attach to the wall.
    Free,
    /// |τ_bd| < τ*: truncated Wulff shape.
    Partial,
    /// τ_bd = −τ*: no minimizer; flat layers drive the energy to 0.
    Drying,
}

/// Flat rectangles R_n = [0, n√v] × [0, √v/n] sitting on the wall {y = 0}.
#[derive(Clone, Debug, Serialize)]
pub struct FlatFamily {
    pub volume: f64,
    pub tau_bd: f64,
}

impl FlatFamily {
    pub fn member(&self, n: usize) -> ConvexPolygon {
        let l = n as f64 * self.volume.sqrt();
        let h = self.volume.sqrt() / n as f64;
        ConvexPolygon::new(vec![[0.0, 0.0], [l, 0.0], [l, h], [0.0, h]]).expect("rectangle")
    }

    /// W_{β,η}(R_n) in closed form: top at τ(e_2), wall at τ_bd, sides at τ(±e_1).
    pub fn energy(&self, n: usize, tau: &DirectionalTension) -> f64 {
        let l = n as f64 * self.volume.sqrt();
        let h = self.volume.sqrt() / n as f64;
        l * tau.tau_h([0.0, 1.0]) + l * self.tau_bd + h * (tau.tau_h([1.0, 0.0]) + tau.tau_h([-1.0, 0.0]))
    }
}

#[derive(Clone, Debug, Serialize)]
pub enum Winterbottom {
    /// Shape with its wall line {y = wall}.
    Shape { regime: WettingRegime, polygon: ConvexPolygon, wall: f64 },
    Flat(FlatFamily),
}

impl Winterbottom {
    pub fn regime(&self) -> WettingRegime {
        match self {
            Winterbottom::Shape { regime, .. } => *regime,
            Winterbottom::Flat(_) => WettingRegime::Drying,
        }
    }

    /// Dilate about the wall foot (0, wall) to the given area, wall moved to y = 0.
    pub fn rescaled(&self, v: f64) -> Result<Self> {
        match self {
            Winterbottom::Shape { regime, polygon, wall } => {
                let p = polygon.translate([0.0, -wall]);
                let s = (v / p.area()).sqrt();
                Ok(Winterbottom::Shape { regime: *regime, polygon: p.scale(s), wall: 0.0 })
            }
            Winterbottom::Flat(f) => Ok(Winterbottom::Flat(FlatFamily { volume: v, tau_bd: f.tau_bd })),
        }
    }
}

/// K ∩ {y ≥ −τ_bd} for a wall below the crystal; `tol` decides the regime boundaries.
pub fn winterbottom_shape(tau: &DirectionalTension, tau_bd: f64, tol: f64) -> Result<Winterbottom> {
    let ts = tau.tau_h([0.0, -1.0]);
    if tau_bd.abs() > ts + tol {
        return Err(GeometryError::WallTension { tau_bd, tau_star: ts });
    }
    let k = wulff_shape(tau)?;
    if (tau_bd - ts).abs() <= tol {
        return Ok(Winterbottom::Shape { regime: WettingRegime::Free, polygon: k, wall: -ts });
    }
    if (tau_bd + ts).abs() <= tol {
        return Ok(Winterbottom::Flat(FlatFamily { volume: k.area(), tau_bd }));
    }
    let cut = clip_left(k.vertices(), [0.0, -tau_bd], [1.0, -tau_bd]);
    let (_, hi) = k.bbox();
    let poly = ConvexPolygon::new(dedup_ring(cut, 1e-13 * (1.0 + hi[0].abs())))?;
    Ok(Winterbottom::Shape { regime: WettingRegime::Partial, polygon: poly, wall: -tau_bd })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct WallEnergy {
    /// Bulk edges at τ, wall contact at τ_bd.
    pub priced: f64,
    /// W_β(V) + (τ_bd − τ*)·|∂V ∩ wall|.
    pub corrected: f64,
    pub contact: f64,
}

pub fn winterbottom_energy(v: &ConvexPolygon, tau: &DirectionalTension, tau_bd: f64, wall: f64) -> Result<WallEnergy> {
    let p = v.vertices();
    let scale = 1.0 + p.iter().map(|q| q[0].abs().max(q[1].abs())).fold(0.0, f64::max);
    let eps = 1e-12 * scale;
    if let Some(i) = p.iter().position(|q| q[1] < wall - eps) {
        return Err(GeometryError::BelowWall(i));
    }
    let n = p.len();
    let mut priced = KahanSum::new();
    let mut contact = KahanSum::new();
    for i in 0..n {
        let (a, b) = (p[i], p[(i + 1) % n]);
        let e = sub(b, a);
        if (a[1] - wall).abs() <= eps && (b[1] - wall).abs() <= eps {
            contact.add(norm(e));
            priced.add(norm(e) * tau_bd);
        } else {
            priced.add(tau.tau_h([e[1], -e[0]]));
        }
    }
    let w = surface_energy(p, true, tau).value;
    let corrected = w + (tau_bd - tau.tau_h([0.0, -1.0])) * contact.value();
    Ok(WallEnergy { priced: priced.value(), corrected, contact: contact.value() })
}

pub type Segment = [Pt; 2];

/// Segments of a polyline (a single point gives a degenerate segment).
pub fn segments(p: &[Pt], closed: bool) -> Vec<Segment> {
    match p.len() {
        0 => vec![],
        1 => vec![[p[0], p[0]]],
        n => {
            let m = if closed { n } else { n - 1 };
            (0..m).map(|i| [p[i], p[(i + 1) % n]]).collect()
        }
    }
}

fn point_seg_dist(p: Pt, s: &Segment) -> f64 {
    let d = sub(s[1], s[0]);
    let l2 = dot(d, d);
    let t = if l2 > 0.0 { (dot(sub(p, s[0]), d) / l2).clamp(0.0, 1.0) } else { 0.0 };
    norm(sub(p, [s[0][0] + t * d[0], s[0][1] + t * d[1]]))
}

fn seg_seg_dist(a: &Segment, b: &Segment) -> f64 {
    let o1 = orient(a[0], a[1], b[0]);
    let o2 = orient(a[0], a[1], b[1]);
    let o3 = orient(b[0], b[1], a[0]);
    let o4 = orient(b[0], b[1], a[1]);
    if o1 * o2 < 0.0 && o3 * o4 < 0.0 {
        return 0.0;
    }
    point_seg_dist(a[0], b).min(point_seg_dist(a[1], b)).min(point_seg_dist(b[0], a)).min(point_seg_dist(b[1], a))
}

/// Squared distance from P + tD to segment s as (pieces, breakpoints).
/// Each piece is (c2, c1, c0, t_lo, t_hi).
fn dist2_pieces(p: Pt, d: Pt, s: &Segment) -> Vec<[f64; 5]> {
    let point = |c: Pt, lo: f64, hi: f64| {
        let w = sub(p, c);
        [dot(d, d), 2.0 * dot(d, w), dot(w, w), lo, hi]
    };
    let e = sub(s[1], s[0]);
    let l2 = dot(e, e);
    if l2 == 0.0 {
        return vec![point(s[0], 0.0, 1.0)];
    }
    // projection u(t) = u0 + t·u1
    let u0 = dot(sub(p, s[0]), e) / l2;
    let u1 = dot(d, e) / l2;
    let c0 = cross(e, sub(p, s[0]));
    let c1 = cross(e, d);
    let perp = |lo: f64, hi: f64| [c1 * c1 / l2, 2.0 * c0 * c1 / l2, c0 * c0 / l2, lo, hi];
    if u1.abs() < 1e-300 {
        return vec![if u0 < 0.0 {
            point(s[0], 0.0, 1.0)
        } else if u0 > 1.0 {
            point(s[1], 0.0, 1.0)
        } else {
            perp(0.0, 1.0)
        }];
    }
    let ta = -u0 / u1; // u = 0
    let tb = (1.0 - u0) / u1; // u = 1
    let (t_first, first, t_second, last) = if u1 > 0.0 { (ta, s[0], tb, s[1]) } else { (tb, s[1], ta, s[0]) };
    let mut out = Vec::with_capacity(3);
    let cl = |x: f64| x.clamp(0.0, 1.0);
    if t_first > 0.0 {
        out.push(point(first, 0.0, cl(t_first)));
    }
    if t_second > 0.0 && t_first < 1.0 {
        out.push(perp(cl(t_first), cl(t_second)));
    }
    if t_second < 1.0 {
        out.push(point(last, cl(t_second), 1.0));
    }
    out.retain(|q| q[4] >= q[3]);
    out
}

fn quad_roots(a: f64, b: f64, c: f64, out: &mut Vec<f64>) {
    let scale = a.abs().max(b.abs()).max(c.abs());
    if scale == 0.0 {
        return;
    }
    if a.abs() <= 1e-14 * scale {
        if b.abs() > 1e-300 {
            out.push(-c / b);
        }
        return;
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        if disc > -1e-12 * b * b {
            out.push(-b / (2.0 * a));
        }
        return;
    }
    let sq = disc.sqrt();
    let q = -0.5 * (b + b.signum() * sq);
    if q != 0.0 {
        out.push(q / a);
        out.push(c / q);
    } else {
        out.push(-b / (2.0 * a));
    }
}

/// max over points of A of the distance to B (segment soups).
pub fn directed_hausdorff(a: &[Segment], b: &[Segment]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return if a.is_empty() { 0.0 } else { f64::INFINITY };
    }
    let mut best: f64 = 0.0;
    let mut rel: Vec<usize> = Vec::new();
    let mut ts: Vec<f64> = Vec::new();
    for s in a {
        let (p, d) = (s[0], sub(s[1], s[0]));
        let upper = b.iter().map(|q| point_seg_dist(s[0], q).max(point_seg_dist(s[1], q))).fold(f64::INFINITY, f64::min);
        let end = b.iter().map(|q| point_seg_dist(s[0], q)).fold(f64::INFINITY, f64::min);
        best = best.max(end);
        if upper <= best {
            continue;
        }
        rel.clear();
        rel.extend((0..b.len()).filter(|&j| seg_seg_dist(s, &b[j]) <= upper));
        let pieces: Vec<Vec<[f64; 5]>> = rel.iter().map(|&j| dist2_pieces(p, d, &b[j])).collect();
        ts.clear();
        ts.extend([0.0, 1.0]);
        for pc in &pieces {
            for q in pc {
                ts.push(q[3]);
                ts.push(q[4]);
            }
        }
        let mut roots = Vec::new();
        for i in 0..pieces.len() {
            for j in i + 1..pieces.len() {
                for x in &pieces[i] {
                    for y in &pieces[j] {
                        let (lo, hi) = (x[3].max(y[3]), x[4].min(y[4]));
                        if lo > hi {
                            continue;
                        }
                        roots.clear();
                        quad_roots(x[0] - y[0], x[1] - y[1], x[2] - y[2], &mut roots);
                        ts.extend(roots.iter().filter(|&&t| t >= lo && t <= hi));
                    }
                }
            }
        }
        for &t in &ts {
            let q = [p[0] + t * d[0], p[1] + t * d[1]];
            let f = rel.iter().map(|&j| point_seg_dist(q, &b[j])).fold(f64::INFINITY, f64::min);
            best = best.max(f);
        }
    }
    best
}

pub fn hausdorff_segments(a: &[Segment], b: &[Segment]) -> f64 {
    directed_hausdorff(a, b).max(directed_hausdorff(b, a))
}

/// Hausdorff distance between two polylines or polygon boundaries.
pub fn hausdorff_distance(a: &[Pt], a_closed: bool, b: &[Pt], b_closed: bool) -> f64 {
    hausdorff_segments(&segments(a, a_closed), &segments(b, b_closed))
}

/// Hausdorff distance of two convex polygons as sup |h_A − h_B| over unit
/// directions. Between consecutive edge normals of either polygon both
/// support points are fixed vertices, so the sup on each arc is closed form.
pub fn hausdorff_convex(a: &ConvexPolygon, b: &ConvexPolygon) -> f64 {
    let ang = |n: Pt| n[1].atan2(n[0]).rem_euclid(TAU);
    let mut cuts: Vec<f64> = a.edge_normals().into_iter().chain(b.edge_normals()).map(ang).collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let argmax = |p: &ConvexPolygon, u: Pt| p.vertices().iter().copied().max_by(|x, y| dot(*x, u).total_cmp(&dot(*y, u))).expect("nonempty");
    let mut best: f64 = 0.0;
    for i in 0..cuts.len() {
        let (lo, hi) = (cuts[i], if i + 1 < cuts.len() { cuts[i + 1] } else { cuts[0] + TAU });
        let mid = unit_vec(0.5 * (lo + hi));
        let w = sub(argmax(a, mid), argmax(b, mid));
        best = best.max(dot(w, unit_vec(lo)).abs()).max(dot(w, unit_vec(hi)).abs());
        let r = norm(w);
        if r > 0.0 {
            for t in [ang(w), ang([-w[0], -w[1]])] {
                if (t - lo).rem_euclid(TAU) <= hi - lo {
                    best = best.max(r);
                }
            }
        }
    }
    best
}

/// Best translate of convex b against convex a under [`hausdorff_convex`].
pub fn best_translate_convex(a: &ConvexPolygon, b: &ConvexPolygon, tol: f64) -> TranslateFit {
    let (ca, cb) = (a.centroid(), b.centroid());
    let (lo, hi) = b.bbox();
    let f = |x: Pt| hausdorff_convex(a, &b.translate(x));
    minimize_translate(f, &[sub(ca, cb)], 0.25 * (hi[0] - lo[0]).max(hi[1] - lo[1]), tol)
}

/// |A Δ B| for a simple polygon A (either orientation) and convex B.
pub fn symmetric_difference_area(a: &[Pt], b: &ConvexPolygon) -> f64 {
    let inter = signed_area(&clip_polygon(a, b)).abs();
    signed_area(a).abs() + b.area() - 2.0 * inter
}

/// Maximal horizontal runs of unit cells, as rectangles.
fn cell_runs(cells: &[[i32; 2]]) -> Vec<[Pt; 4]> {
    let mut c: Vec<[i32; 2]> = cells.to_vec();
    c.sort_by_key(|p| (p[1], p[0]));
    c.dedup();
    let mut out = Vec::new();
    let mut i = 0;
    while i < c.len() {
        let mut j = i;
        while j + 1 < c.len() && c[j + 1][1] == c[i][1] && c[j + 1][0] == c[j][0] + 1 {
            j += 1;
        }
        let (x0, x1, y) = (c[i][0] as f64 - 0.5, c[j][0] as f64 + 0.5, c[i][1] as f64);
        out.push([[x0, y - 0.5], [x1, y - 0.5], [x1, y + 0.5], [x0, y + 0.5]]);
        i = j + 1;
    }
    out
}

fn symmetric_difference_runs(runs: &[[Pt; 4]], area: f64, b: &ConvexPolygon) -> f64 {
    let (lo, hi) = b.bbox();
    let mut inter = KahanSum::new();
    for r in runs {
        if r[1][0] < lo[0] || r[0][0] > hi[0] || r[2][1] < lo[1] || r[0][1] > hi[1] {
            continue;
        }
        inter.add(signed_area(&clip_polygon(r, b)));
    }
    area + b.area() - 2.0 * inter.value()
}

/// |A Δ B| where A is a union of unit cells centred at integer points.
pub fn symmetric_difference_cells(cells: &[[i32; 2]], b: &ConvexPolygon) -> f64 {
    let runs = cell_runs(cells);
    let area: f64 = runs.iter().map(|r| r[1][0] - r[0][0]).sum();
    symmetric_difference_runs(&runs, area, b)
}

/// A real field on a uniform grid of cubic cells anchored at the origin.
/// Phase indicators take the values ±1 with −1 inside the set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IndicatorField {
    pub d: usize,
    pub dims: [usize; 3],
    pub cell: f64,
    pub periodic: bool,
    pub values: Vec<f64>,
}

impl IndicatorField {
    /// ±1-valued field.
    pub fn new(d: usize, dims: [usize; 3], cell: f64, periodic: bool, values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|&v| v != 1.0 && v != -1.0) {
            return Err(GeometryError::NotIndicator(i));
        }
        Self::profile(d, dims, cell, periodic, values)
    }

    /// Arbitrary real values (e.g. rescaled block magnetizations).
    pub fn profile(d: usize, dims: [usize; 3], cell: f64, periodic: bool, values: Vec<f64>) -> Result<Self> {
        let dims = if d == 2 { [dims[0], dims[1], 1] } else { dims };
        if d != 2 && d != 3 {
            return Err(GeometryError::GridMismatch(format!("dimension {d}")));
        }
        if values.len() != dims.iter().product::<usize>() {
            return Err(GeometryError::GridMismatch(format!("{} values for dims {:?}", values.len(), dims)));
        }
        Ok(IndicatorField { d, dims, cell, periodic, values })
    }

    pub fn from_fn<F: Fn(Pt) -> f64>(n: [usize; 2], cell: f64, periodic: bool, f: F) -> Self {
        let mut values = Vec::with_capacity(n[0] * n[1]);
        for j in 0..n[1] {
            for i in 0..n[0] {
                values.push(f([(i as f64 + 0.5) * cell, (j as f64 + 0.5) * cell]));
            }
        }
        IndicatorField { d: 2, dims: [n[0], n[1], 1], cell, periodic, values }
    }

    fn idx(&self, c: [usize; 3]) -> usize {
        c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell.powi(self.d as i32)
    }

    pub fn same_grid(&self, o: &Self) -> Result<()> {
        if self.d != o.d || self.dims != o.dims || (self.cell - o.cell).abs() > 1e-12 * self.cell {
            return Err(GeometryError::GridMismatch(format!("{:?}/{} vs {:?}/{}", self.dims, self.cell, o.dims, o.cell)));
        }
        Ok(())
    }

    /// ∫|f − g|.
    pub fn l1(&self, o: &Self) -> Result<f64> {
        self.same_grid(o)?;
        let s: f64 = self.values.iter().zip(&o.values).map(|(a, b)| (a - b).abs()).sum();
        Ok(s * self.cell_volume())
    }
}

/// Total variation on the grid: cell face area × Σ |f_a − f_b|/2 over
/// adjacent cells. For ±1 fields this counts sign-change faces.
pub fn perimeter_indicator(v: &IndicatorField) -> f64 {
    let mut s = KahanSum::new();
    for z in 0..v.dims[2] {
        for y in 0..v.dims[1] {
            for x in 0..v.dims[0] {
                let c = [x, y, z];
                let a = v.values[v.idx(c)];
                for k in 0..v.d {
                    let mut q = c;
                    q[k] += 1;
                    if q[k] == v.dims[k] {
                        if !v.periodic {
                            continue;
                        }
                        q[k] = 0;
                    }
                    s.add(0.5 * (a - v.values[v.idx(q)]).abs());
                }
            }
        }
    }
    s.value() * v.cell.powi(v.d as i32 - 1)
}

/// Fraction of each cell covered by `k`, with periodic images on a torus.
pub fn coverage(field: &IndicatorField, k: &ConvexPolygon) -> Vec<f64> {
    let (nx, ny) = (field.dims[0], field.dims[1]);
    let c = field.cell;
    let (lx, ly) = (nx as f64 * c, ny as f64 * c);
    let mut frac = vec![0.0; nx * ny];
    let shifts: Vec<Pt> = if field.periodic {
        let (lo, hi) = k.bbox();
        let rx = |v: f64, l: f64| (v / l).floor() as i64;
        let mut s = Vec::new();
        for i in -rx(hi[0], lx) - 1..=-rx(lo[0], lx) + 1 {
            for j in -rx(hi[1], ly) - 1..=-rx(lo[1], ly) + 1 {
                s.push([i as f64 * lx, j as f64 * ly]);
            }
        }
        s
    } else {
        vec![[0.0, 0.0]]
    };
    for sh in shifts {
        let p = k.translate(sh);
        let (lo, hi) = p.bbox();
        if hi[0] <= 0.0 || hi[1] <= 0.0 || lo[0] >= lx || lo[1] >= ly {
            continue;
        }
        let j0 = ((lo[1] / c).floor().max(0.0)) as usize;
        let j1 = ((hi[1] / c).ceil().min(ny as f64)) as usize;
        for j in j0..j1 {
            let (y0, y1) = (j as f64 * c, (j + 1) as f64 * c);
            let strip = clip_left(&clip_left(p.vertices(), [1.0, y0], [2.0, y0]), [2.0, y1], [1.0, y1]);
            if strip.len() < 3 {
                continue;
            }
            let (sx0, sx1) = strip.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), q| (a.min(q[0]), b.max(q[0])));
            let i0 = ((sx0 / c).floor().max(0.0)) as usize;
            let i1 = ((sx1 / c).ceil().min(nx as f64)) as usize;
            for i in i0..i1 {
                let (x0, x1) = (i as f64 * c, (i + 1) as f64 * c);
                let piece = clip_left(&clip_left(&strip, [x0, 1.0], [x0, 0.0]), [x1, 0.0], [x1, 1.0]);
                if piece.len() >= 3 {
                    frac[i + nx * j] += signed_area(&piece) / (c * c);
                }
            }
        }
    }
    for f in &mut frac {
        *f = f.clamp(0.0, 1.0);
    }
    frac
}

/// ∫|f − χ| with χ = −1 on K and +1 elsewhere (planar fields).
pub fn l1_to_shape(field: &IndicatorField, k: &ConvexPolygon) -> Result<f64> {
    if field.d != 2 {
        return Err(GeometryError::NotPlanar);
    }
    let frac = coverage(field, k);
    let s: f64 = field
        .values
        .iter()
        .zip(&frac)
        .map(|(&v, &a)| a * (v + 1.0).abs() + (1.0 - a) * (v - 1.0).abs())
        .sum();
    Ok(s * field.cell * field.cell)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TranslateFit {
    pub x: Pt,
    pub residual: f64,
}

/// Coarse-to-fine pattern search of f over translates, starting from a grid
/// of `seeds` and refining the best one until the step drops below `tol`.
pub fn minimize_translate<F: Fn(Pt) -> f64>(f: F, seeds: &[Pt], step: f64, tol: f64) -> TranslateFit {
    let mut best = TranslateFit { x: seeds[0], residual: f64::INFINITY };
    for &s in seeds {
        let r = f(s);
        if r < best.residual {
            best = TranslateFit { x: s, residual: r };
        }
    }
    let mut h = step;
    while h > tol {
        let mut improved = true;
        while improved {
            improved = false;
            let c = best.x;
            for i in -2i32..=2 {
                for j in -2i32..=2 {
                    if i == 0 && j == 0 {
                        continue;
                    }
                    let x = [c[0] + i as f64 * h / 2.0, c[1] + j as f64 * h / 2.0];
                    let r = f(x);
                    if r < best.residual {
                        best = TranslateFit { x, residual: r };
                        improved = true;
                    }
                }
            }
        }
        h /= 4.0;
    }
    best
}

/// min over x of ∫|f − χ_{x+K}| for a planar field.
pub fn best_translate_field(field: &IndicatorField, k: &ConvexPolygon) -> Result<TranslateFit> {
    if field.d != 2 {
        return Err(GeometryError::NotPlanar);
    }
    let kc = k.centroid();
    let (lx, ly) = (field.dims[0] as f64 * field.cell, field.dims[1] as f64 * field.cell);
    let g = 8;
    let mut seeds = Vec::new();
    for i in 0..g {
        for j in 0..g {
            let p = [(i as f64 + 0.5) * lx / g as f64, (j as f64 + 0.5) * ly / g as f64];
            seeds.push([p[0] - kc[0], p[1] - kc[1]]);
        }
    }
    // the centre of mass of the inside phase is a good guess when it is unique
    let (mut sx, mut sy, mut w) = (0.0, 0.0, 0.0);
    for j in 0..field.dims[1] {
        for i in 0..field.dims[0] {
            let m = (1.0 - field.values[i + field.dims[0] * j]).max(0.0);
            sx += m * (i as f64 + 0.5) * field.cell;
            sy += m * (j as f64 + 0.5) * field.cell;
            w += m;
        }
    }
    if w > 0.0 {
        seeds.insert(0, [sx / w - kc[0], sy / w - kc[1]]);
    }
    let f = |x: Pt| l1_to_shape(field, &k.translate(x)).unwrap_or(f64::INFINITY);
    let mut fit = minimize_translate(f, &seeds, lx.max(ly) / g as f64, field.cell * 1e-3);
    if field.periodic {
        fit.x = [(fit.x[0] + kc[0]).rem_euclid(lx) - kc[0], (fit.x[1] + kc[1]).rem_euclid(ly) - kc[1]];
    }
    Ok(fit)
}

/// min over x of d_H(A, x + ∂K), A a segment soup.
pub fn best_translate_hausdorff(a: &[Segment], k: &ConvexPolygon, tol: f64) -> TranslateFit {
    let kb = segments(k.vertices(), true);
    let (mut cx, mut cy, mut w) = (0.0, 0.0, 0.0);
    for s in a {
        let l = norm(sub(s[1], s[0])).max(1e-300);
        cx += l * (s[0][0] + s[1][0]) / 2.0;
        cy += l * (s[0][1] + s[1][1]) / 2.0;
        w += l;
    }
    let kc = k.centroid();
    let x0 = [cx / w - kc[0], cy / w - kc[1]];
    let shifted = |x: Pt| -> Vec<Segment> { kb.iter().map(|s| [[s[0][0] + x[0], s[0][1] + x[1]], [s[1][0] + x[0], s[1][1] + x[1]]]).collect() };
    let f = |x: Pt| hausdorff_segments(a, &shifted(x));
    let (lo, hi) = k.bbox();
    minimize_translate(f, &[x0], 0.25 * (hi[0] - lo[0]).max(hi[1] - lo[1]), tol)
}

/// min over x of |A Δ (x + K)| for a union of unit cells.
pub fn best_translate_cells(cells: &[[i32; 2]], k: &ConvexPolygon, tol: f64) -> TranslateFit {
    let n = cells.len().max(1) as f64;
    let cx = cells.iter().map(|c| c[0] as f64).sum::<f64>() / n;
    let cy = cells.iter().map(|c| c[1] as f64).sum::<f64>() / n;
    let kc = k.centroid();
    let (lo, hi) = k.bbox();
    let runs = cell_runs(cells);
    let area: f64 = runs.iter().map(|r| r[1][0] - r[0][0]).sum();
    let f = |x: Pt| symmetric_difference_runs(&runs, area, &k.translate(x));
    minimize_translate(f, &[[cx - kc[0], cy - kc[1]]], 0.25 * (hi[0] - lo[0]).max(hi[1] - lo[1]), tol)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct BonnesenGap {
    pub energy_gap: f64,
    pub hausdorff_gap: f64,
}

/// W(V) − W(K_1) and min_x d_H(∂V, x + ∂K_1) for a counterclockwise polygon V.
pub fn bonnesen_gap(v: &[Pt], tau: &DirectionalTension, k1: &ConvexPolygon) -> BonnesenGap {
    let e = surface_energy(v, true, tau).value - surface_energy(k1.vertices(), true, tau).value;
    let fit = best_translate_hausdorff(&segments(v, true), k1, 1e-9);
    BonnesenGap { energy_gap: e, hausdorff_gap: fit.residual }
}

/// τ(z−u) + τ(w−z) − τ(w−u).
pub fn oval_defect(u: Pt, w: Pt, z: Pt, tau: &DirectionalTension) -> f64 {
    tau.tau_h(sub(z, u)) + tau.tau_h(sub(w, z)) - tau.tau_h(sub(w, u))
}

/// z ∈ N_K(u, w) = {z : defect ≤ K log s}.
pub fn oval_neighborhood_test(u: Pt, w: Pt, tau: &DirectionalTension, k: f64, s: f64, z: Pt) -> bool {
    oval_defect(u, w, z, tau) <= k * s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;
    use std::f64::consts::{PI, TAU};

    fn iso(k: usize) -> DirectionalTension {
        DirectionalTension::constant(1.0, k).unwrap()
    }

    fn l1_tension(k: usize) -> DirectionalTension {
        DirectionalTension::uniform(k, |t| t.cos().abs() + t.sin().abs(), "l1").unwrap()
    }

    fn disk(r: f64, n: usize) -> Vec<Pt> {
        (0..n).map(|i| [r * (TAU * i as f64 / n as f64).cos(), r * (TAU * i as f64 / n as f64).sin()]).collect()
    }

    fn random_convex(rng: &mut RngStream, n: usize) -> ConvexPolygon {
        let mut a: Vec<f64> = (0..n).map(|_| TAU * rng.uniform()).collect();
        a.sort_by(f64::total_cmp);
        let pts: Vec<Pt> = a.iter().map(|&t| [(1.0 + rng.uniform()) * t.cos(), (0.5 + rng.uniform()) * t.sin()]).collect();
        // convex hull (monotone chain)
        let mut p = pts.clone();
        p.sort_by(|x, y| x[0].total_cmp(&y[0]).then(x[1].total_cmp(&y[1])));
        let mut hull: Vec<Pt> = Vec::new();
        for pass in 0..2 {
            let start = hull.len();
            let it: Box<dyn Iterator<Item = &Pt>> = if pass == 0 { Box::new(p.iter()) } else { Box::new(p.iter().rev()) };
            for &q in it {
                while hull.len() >= start + 2 && orient(hull[hull.len() - 2], hull[hull.len() - 1], q) <= 0.0 {
                    hull.pop();
                }
                hull.push(q);
            }
            hull.pop();
        }
        normalize_unit_volume(&ConvexPolygon::new(hull).unwrap())
    }

    #[test]
    fn isotropic_wulff_is_a_disk() {
        let t = iso(720);
        let k1 = normalize_unit_volume(&wulff_shape(&t).unwrap());
        assert!((k1.area() - 1.0).abs() < 1e-10);
        let r = 1.0 / PI.sqrt();
        let circle = disk(r, 20000);
        assert!(hausdorff_distance(k1.vertices(), true, &circle, true) < 1e-3);
        let w = surface_energy(k1.vertices(), true, &t).value;
        assert!((w - 2.0 * PI.sqrt()).abs() < 1e-3, "{w}");
    }

    #[test]
    fn l1_tension_gives_the_square() {
        let k = wulff_shape(&l1_tension(720)).unwrap();
        assert!((k.area() - 4.0).abs() < 1e-9, "{}", k.area());
        let sq = [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]];
        assert!(hausdorff_distance(k.vertices(), true, &sq, true) < 1e-9);
        let k1 = normalize_unit_volume(&k);
        assert!(hausdorff_distance(k1.vertices(), true, &[[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]], true) < 1e-9);
    }

    #[test]
    fn wulff_scales_with_tension() {
        let a = DirectionalTension::uniform(64, |t| 1.0 + 0.2 * (4.0 * t).cos(), "x").unwrap();
        let mut b = a.clone();
        b.tau.iter_mut().for_each(|x| *x *= 2.0);
        let (ka, kb) = (wulff_shape(&a).unwrap(), wulff_shape(&b).unwrap());
        assert!(hausdorff_distance(ka.scale(2.0).vertices(), true, kb.vertices(), true) < 1e-12);
    }

    #[test]
    fn wulff_rejects_bad_tables() {
        let mut t = iso(8);
        t.tau[3] = 0.0;
        assert!(matches!(wulff_shape(&t), Err(GeometryError::NonPositiveTension(d)) if d.len() == 1));
    }

    #[test]
    fn normalize_and_dilate() {
        let sq = ConvexPolygon::new(vec![[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]]).unwrap();
        let k1 = normalize_unit_volume(&sq);
        assert!((k1.vertices()[2][0] - 0.5).abs() < 1e-15);
        let q = dilate(&k1, 0.25).unwrap();
        assert!((q.area() - 0.25).abs() < 1e-15);
        let back = normalize_unit_volume(&dilate(&k1, 7.0).unwrap());
        for (a, b) in back.vertices().iter().zip(k1.vertices()) {
            assert!((a[0] - b[0]).abs() < 1e-10 && (a[1] - b[1]).abs() < 1e-10);
        }
        assert!(dilate(&k1, 0.0).is_err());
    }

    #[test]
    fn energies_of_simple_shapes() {
        let t = iso(720);
        let sq = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        assert!((surface_energy(&sq, true, &t).value - 4.0).abs() < 1e-12);
        let dup = [[0.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        assert_eq!(surface_energy(&dup, true, &t).skipped, 1);
        let open = surface_energy(&[[0.0, 0.0], [3.0, 0.0]], false, &t).value;
        assert!((open - 3.0).abs() < 1e-12);
    }

    #[test]
    fn isoperimetric_optimality_against_random_polygons() {
        let t = DirectionalTension::uniform(720, |x| 1.0 + 0.15 * (4.0 * x).cos(), "aniso").unwrap().convexify().unwrap();
        let k1 = normalize_unit_volume(&wulff_shape(&t).unwrap());
        let wk = surface_energy(k1.vertices(), true, &t).value;
        let mut rng = RngStream::new(1, 0);
        for _ in 0..200 {
            let n = 3 + rng.below(20);
            let v = random_convex(&mut rng, n);
            assert!(surface_energy(v.vertices(), true, &t).value >= wk - 1e-6);
        }
    }

    #[test]
    fn winterbottom_regimes() {
        let t = iso(720);
        let k = wulff_shape(&t).unwrap();
        let free = winterbottom_shape(&t, t.tau_star(), 1e-12).unwrap();
        match &free {
            Winterbottom::Shape { regime, polygon, .. } => {
                assert_eq!(*regime, WettingRegime::Free);
                assert_eq!(polygon.vertices(), k.vertices());
            }
            _ => panic!(),
        }
        let half = winterbottom_shape(&t, 0.0, 1e-12).unwrap();
        let Winterbottom::Shape { regime, polygon, wall } = &half else { panic!() };
        assert_eq!(*regime, WettingRegime::Partial);
        assert_eq!(*wall, 0.0);
        assert!((polygon.area() - k.area() / 2.0).abs() < 1e-9);
        let e = winterbottom_energy(polygon, &t, 0.0, 0.0).unwrap();
        assert!((e.priced - polygon.perimeter() + e.contact).abs() < 1e-9);
        assert!((e.priced - e.corrected).abs() < 1e-10);
        let Winterbottom::Flat(fam) = winterbottom_shape(&t, -t.tau_star(), 1e-12).unwrap() else { panic!() };
        let mut prev = f64::INFINITY;
        for n in 1..=1000 {
            let en = fam.energy(n, &t);
            let w = winterbottom_energy(&fam.member(n), &t, fam.tau_bd, 0.0).unwrap();
            assert!((w.priced - en).abs() < 1e-9 && (w.corrected - en).abs() < 1e-9);
            assert!(en < prev);
            prev = en;
        }
        assert!(winterbottom_shape(&t, 1.5, 1e-9).is_err());
    }

    #[test]
    fn winterbottom_beats_free_shape() {
        let t = iso(360);
        let k1 = normalize_unit_volume(&wulff_shape(&t).unwrap());
        let wk = surface_energy(k1.vertices(), true, &t).value;
        for tb in [-0.5, 0.0, 0.5] {
            let Winterbottom::Shape { polygon, wall, .. } = winterbottom_shape(&t, tb, 1e-12).unwrap().rescaled(1.0).unwrap() else {
                panic!()
            };
            let e = winterbottom_energy(&polygon, &t, tb, wall).unwrap();
            assert!(e.priced < wk);
        }
        let below = ConvexPolygon::new(vec![[0.0, -1.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(winterbottom_energy(&below, &t, 0.0, 0.0).unwrap_err(), GeometryError::BelowWall(0));
    }

    #[test]
    fn metrics_on_shifted_square() {
        let a = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let b: Vec<Pt> = a.iter().map(|p| [p[0] + 0.1, p[1]]).collect();
        assert_eq!(hausdorff_distance(&a, true, &a, true), 0.0);
        assert!((hausdorff_distance(&a, true, &b, true) - 0.1).abs() < 1e-12);
        let kb = ConvexPolygon::new(b).unwrap();
        assert!((symmetric_difference_area(&a, &kb) - 0.2).abs() < 1e-12);
        let ka = ConvexPolygon::new(a.to_vec()).unwrap();
        assert!(symmetric_difference_area(&a, &ka).abs() < 1e-12);
    }

    #[test]
    fn hausdorff_interior_maximum() {
        // the farthest point of the segment lies midway between the two targets
        let a = [[0.0, 0.0], [2.0, 0.0]];
        let b = [[0.0, 1.0], [0.0, 1.0]];
        let c = [[2.0, 1.0], [2.0, 1.0]];
        let bs = [segments(&b, false)[0], segments(&c, false)[0]];
        let h = directed_hausdorff(&segments(&a, false), &bs);
        assert!((h - 2f64.sqrt()).abs() < 1e-12, "{h}");
    }

    fn raster_hausdorff(a: &ConvexPolygon, b: &ConvexPolygon, m: usize) -> f64 {
        let pts = |p: &ConvexPolygon| -> Vec<Pt> {
            let v = p.vertices();
            let mut out = Vec::new();
            for i in 0..v.len() {
                let (s, e) = (v[i], v[(i + 1) % v.len()]);
                for k in 0..m {
                    let t = k as f64 / m as f64;
                    out.push([s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1])]);
                }
            }
            out
        };
        let (sa, sb) = (segments(a.vertices(), true), segments(b.vertices(), true));
        let d1 = pts(a).iter().map(|&p| sb.iter().map(|s| point_seg_dist(p, s)).fold(f64::INFINITY, f64::min)).fold(0.0, f64::max);
        let d2 = pts(b).iter().map(|&p| sa.iter().map(|s| point_seg_dist(p, s)).fold(f64::INFINITY, f64::min)).fold(0.0, f64::max);
        d1.max(d2)
    }

    #[test]
    fn hausdorff_and_symdiff_match_raster_oracles() {
        let mut rng = RngStream::new(2, 0);
        for _ in 0..20 {
            let a = random_convex(&mut rng, 8);
            let b = random_convex(&mut rng, 8).translate([0.3 * rng.uniform(), 0.3 * rng.uniform()]);
            let exact = hausdorff_distance(a.vertices(), true, b.vertices(), true);
            let raster = raster_hausdorff(&a, &b, 400);
            assert!(exact >= raster - 1e-12 && exact - raster < 0.01, "{exact} {raster}");
            // symmetric difference by midpoint raster
            let m = 400;
            let (lo, hi) = (-2.0, 2.0);
            let h = (hi - lo) / m as f64;
            let mut cnt = 0usize;
            for i in 0..m {
                for j in 0..m {
                    let p = [lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h];
                    cnt += (a.contains(p) != b.contains(p)) as usize;
                }
            }
            let ras = cnt as f64 * h * h;
            let ex = symmetric_difference_area(a.vertices(), &b);
            assert!((ras - ex).abs() < 0.02, "{ras} {ex}");
        }
    }

    #[test]
    fn cells_symdiff() {
        let sq = ConvexPolygon::new(vec![[-0.5, -0.5], [1.5, -0.5], [1.5, 1.5], [-0.5, 1.5]]).unwrap();
        let cells = [[0, 0], [1, 0], [0, 1], [1, 1]];
        assert!(symmetric_difference_cells(&cells, &sq).abs() < 1e-12);
        assert!((symmetric_difference_cells(&cells, &sq.translate([0.25, 0.0])) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn perimeter_of_blocks() {
        let f = IndicatorField::from_fn([16, 16], 0.5, true, |_| 1.0);
        assert_eq!(perimeter_indicator(&f), 0.0);
        let g = IndicatorField::from_fn([16, 16], 0.5, true, |p| if p[0] > 2.0 && p[0] < 4.0 && p[1] > 2.0 && p[1] < 4.0 { -1.0 } else { 1.0 });
        assert!((perimeter_indicator(&g) - 4.0 * 4.0 * 0.5).abs() < 1e-12);
    }

    #[test]
    fn disk_perimeter_has_lattice_bias() {
        // lattice perimeter of a digitized disk tends to (4/π)·2πr = 8r
        let mut prev = f64::INFINITY;
        for res in [64usize, 128, 256, 512] {
            let c = 1.0 / res as f64;
            let f = IndicatorField::from_fn([res, res], c, false, |p| if (p[0] - 0.5).hypot(p[1] - 0.5) < 0.3 { -1.0 } else { 1.0 });
            let ratio = perimeter_indicator(&f) / (TAU * 0.3);
            let err = (ratio - 4.0 / PI).abs();
            assert!(err <= prev + 1e-3);
            prev = err;
        }
        assert!(prev < 0.01);
    }

    #[test]
    fn translate_fits() {
        let t = iso(180);
        let k = dilate(&normalize_unit_volume(&wulff_shape(&t).unwrap()), 100.0).unwrap();
        let x0 = [20.3, 17.8];
        let target = k.translate(x0);
        let mut f = IndicatorField::from_fn([48, 48], 1.0, true, |p| if target.contains(p) { -1.0 } else { 1.0 });
        let fit = best_translate_field(&f, &k).unwrap();
        assert!((fit.x[0] - x0[0]).abs() < 1.0 && (fit.x[1] - x0[1]).abs() < 1.0, "{fit:?}");
        let flat = IndicatorField::from_fn([48, 48], 1.0, true, |_| 1.0);
        let r = best_translate_field(&flat, &k).unwrap().residual;
        assert!((r - 200.0).abs() < 1e-6, "{r}");
        // 5% noise
        let mut rng = RngStream::new(3, 0);
        let mut flips = 0.0;
        for v in f.values.iter_mut() {
            if rng.uniform() < 0.05 {
                *v = -*v;
                flips += 2.0;
            }
        }
        let noisy = best_translate_field(&f, &k).unwrap();
        assert!(noisy.residual <= 2.0 * flips + fit.residual);
        assert!((noisy.x[0] - x0[0]).abs() < 2.0 && (noisy.x[1] - x0[1]).abs() < 2.0);
        for _ in 0..100 {
            let p = [48.0 * rng.uniform(), 48.0 * rng.uniform()];
            assert!(noisy.residual <= l1_to_shape(&f, &k.translate(p)).unwrap() + 1e-9);
        }
    }

    #[test]
    fn bonnesen_gaps() {
        let t = iso(360);
        let k1 = normalize_unit_volume(&wulff_shape(&t).unwrap());
        let g = bonnesen_gap(k1.vertices(), &t, &k1);
        assert!(g.energy_gap.abs() < 1e-12 && g.hausdorff_gap < 1e-6);
        let stretched: Vec<Pt> = k1.vertices().iter().map(|p| [1.1 * p[0], p[1]]).collect();
        let v = normalize_unit_volume(&ConvexPolygon::new(stretched).unwrap());
        let g = bonnesen_gap(v.vertices(), &t, &k1);
        assert!(g.energy_gap > 0.0 && g.hausdorff_gap > 0.0);
    }

    #[test]
    fn oval_is_an_ellipse_for_isotropic_tension() {
        let t = iso(720);
        let (u, w) = ([0.0, 0.0], [4.0, 0.0]);
        assert!(oval_defect(u, w, [1.5, 0.0], &t).abs() < 1e-12);
        let z = [2.0, 1.0];
        let want = 2.0 * 5f64.sqrt() - 4.0;
        assert!((oval_defect(u, w, z, &t) - want).abs() < 1e-4);
        assert!(oval_neighborhood_test(u, w, &t, 1.0, 10.0, z));
    }

    proptest! {
        #[test]
        fn wulff_output_is_convex(c in proptest::collection::vec(0.5f64..2.0, 8..40)) {
            let k = c.len();
            let t = DirectionalTension::new((0..k).map(|i| TAU * i as f64 / k as f64).collect(), c, vec![0.0; k], "rand").unwrap();
            let p = wulff_shape(&t).unwrap();
            let v = p.vertices();
            for i in 0..v.len() {
                for j in 0..v.len() {
                    for m in 0..v.len() {
                        if i < j && j < m {
                            prop_assert!(orient(v[i], v[j], v[m]) >= 0.0);
                        }
                    }
                }
            }
            prop_assert!(p.contains([0.0, 0.0]));
            let conv = t.convexify().unwrap();
            prop_assert!(conv.convexity_margins().iter().all(|&m| m >= -1e-9));
        }

        #[test]
        fn hausdorff_metric_axioms(s in 0u64..1000) {
            let mut rng = RngStream::new(s, 1);
            let a = random_convex(&mut rng, 6);
            let b = random_convex(&mut rng, 6);
            let c = random_convex(&mut rng, 6);
            let h = |x: &ConvexPolygon, y: &ConvexPolygon| hausdorff_distance(x.vertices(), true, y.vertices(), true);
            prop_assert!((h(&a, &b) - h(&b, &a)).abs() < 1e-12);
            prop_assert!(h(&a, &a) < 1e-12);
            prop_assert!(h(&a, &c) <= h(&a, &b) + h(&b, &c) + 1e-12);
        }

        #[test]
        fn convex_hausdorff_matches_segment_hausdorff(s in 0u64..1000, dx in -1.0f64..1.0, dy in -1.0f64..1.0) {
            let mut rng = RngStream::new(s, 3);
            let a = random_convex(&mut rng, 7);
            let b = random_convex(&mut rng, 5).translate([dx, dy]);
            let exact = hausdorff_distance(a.vertices(), true, b.vertices(), true);
            prop_assert!((hausdorff_convex(&a, &b) - exact).abs() < 1e-9, "{} vs {}", hausdorff_convex(&a, &b), exact);
            prop_assert!(hausdorff_convex(&a, &a) < 1e-12);
        }

        #[test]
        fn energy_scale_law(s in 0.1f64..10.0, seed in 0u64..1000) {
            let t = DirectionalTension::uniform(64, |x| 1.0 + 0.3 * (2.0 * x).sin().abs(), "x").unwrap();
            let mut rng = RngStream::new(seed, 2);
            let v = random_convex(&mut rng, 7);
            let w = surface_energy(v.vertices(), true, &t).value;
            let ws = surface_energy(v.scale(s).vertices(), true, &t).value;
            prop_assert!((ws - s * w).abs() <= 1e-12 * ws.abs().max(1.0));
        }
    }
}
