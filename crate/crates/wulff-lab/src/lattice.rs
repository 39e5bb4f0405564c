//! Lattice geometries, boundary conditions, couplings, spin and bond
//! configurations, energy and magnetization.
//!
//! Sites are indexed row-major with the first coordinate running fastest.
//! Exterior boundary sites (outside the region but adjacent to it) get their
//! own index space; a neighbor slot is either an interior site, an exterior
//! site, or nothing (below the wall of a slab, where there are no bonds).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LatticeError {
    #[error("linear size must be at least 2, got {0}")]
    TooSmall(usize),
    #[error("dimension must be 2 or 3, got {0}")]
    BadDimension(usize),
    #[error("polygon is not simple: edges {0} and {1} intersect")]
    NonSimplePolygon(usize, usize),
    #[error("polygon needs at least 3 vertices")]
    DegeneratePolygon,
    #[error("wulff_box polygon must have unit area, got {0}")]
    NotUnitArea(f64),
    #[error("region is empty")]
    EmptyRegion,
    #[error("site {0} outside the geometry")]
    SiteOutOfRange(usize),
    #[error("boundary condition {bc} is not compatible with shape {shape}")]
    IncompatibleBc { bc: String, shape: String },
    #[error("configuration length {got} does not match {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("negative coupling {0}")]
    NegativeCoupling(f64),
    #[error("snapshot: {0}")]
    Snapshot(String),
}

pub type Result<T> = std::result::Result<T, LatticeError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum ShapeSpec {
    /// Periodic {0..n-1}^d.
    Torus { d: usize, n: usize },
    /// {0..dims[k]-1} for each axis.
    Box { dims: Vec<usize> },
    /// {-n..n}^{d-1} x {0..m}; the wall is the layer with last coordinate 0.
    Slab { d: usize, n: usize, m: usize },
    /// {0..n-1}^{d-1} x {0..m}, periodic along the wall (last coordinate 0).
    Cylinder { d: usize, n: usize, m: usize },
    /// Integer points whose centers lie in the closed polygon n*K.
    WulffBox { n: usize, polygon: Vec<[f64; 2]> },
    /// An arbitrary finite set of planar sites.
    Region { sites: Vec<[i32; 2]> },
}

impl ShapeSpec {
    pub fn torus(d: usize, n: usize) -> Self {
        ShapeSpec::Torus { d, n }
    }
    pub fn square_box(d: usize, n: usize) -> Self {
        ShapeSpec::Box { dims: vec![n; d] }
    }
    pub fn rect(w: usize, h: usize) -> Self {
        ShapeSpec::Box { dims: vec![w, h] }
    }
    pub fn slab(d: usize, n: usize, m: usize) -> Self {
        ShapeSpec::Slab { d, n, m }
    }
    pub fn cylinder(d: usize, n: usize, m: usize) -> Self {
        ShapeSpec::Cylinder { d, n, m }
    }

    /// Slab-like shapes: a wall layer at last coordinate 0 with nothing below.
    pub fn has_wall(&self) -> bool {
        matches!(self, ShapeSpec::Slab { .. } | ShapeSpec::Cylinder { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            ShapeSpec::Torus { .. } => "torus",
            ShapeSpec::Box { .. } => "box",
            ShapeSpec::Slab { .. } => "slab",
            ShapeSpec::Cylinder { .. } => "cylinder",
            ShapeSpec::WulffBox { .. } => "wulff_box",
            ShapeSpec::Region { .. } => "region",
        }
    }
}

/// Neighbor slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Nbr {
    Site(usize),
    Ext(usize),
    None,
}

const EXT_BIT: u32 = 1 << 31;
const NO_NBR: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub spec: ShapeSpec,
    pub d: usize,
    coords: Vec<[i32; 3]>,
    origin: [i32; 3],
    extent: [usize; 3],
    lookup: Vec<u32>,
    periodic: bool,
    wrap: [bool; 3],
    nbrs: Vec<u32>,
    ext_coords: Vec<[i32; 3]>,
    edges: Vec<[u32; 2]>,
    boundary_edges: Vec<(u32, u32)>,
    wall: Vec<u32>,
}

pub fn build_lattice(spec: &ShapeSpec) -> Result<Geometry> {
    let (d, coords, periodic) = match spec {
        ShapeSpec::Torus { d, n } | ShapeSpec::Slab { d, n, .. } | ShapeSpec::Cylinder { d, n, .. } if *d != 2 && *d != 3 => {
            let _ = n;
            return Err(LatticeError::BadDimension(*d));
        }
        ShapeSpec::Torus { d, n } => {
            if *n < 2 {
                return Err(LatticeError::TooSmall(*n));
            }
            (*d, grid_coords(&vec![*n; *d], [0; 3]), true)
        }
        ShapeSpec::Box { dims } => {
            if dims.len() != 2 && dims.len() != 3 {
                return Err(LatticeError::BadDimension(dims.len()));
            }
            if let Some(&n) = dims.iter().find(|&&n| n < 2) {
                return Err(LatticeError::TooSmall(n));
            }
            (dims.len(), grid_coords(dims, [0; 3]), false)
        }
        ShapeSpec::Slab { d, n, m } => {
            if *n < 2 {
                return Err(LatticeError::TooSmall(*n));
            }
            if *m < 1 {
                return Err(LatticeError::TooSmall(*m));
            }
            let mut dims = vec![2 * n + 1; d - 1];
            dims.push(m + 1);
            let mut origin = [0i32; 3];
            for o in origin.iter_mut().take(d - 1) {
                *o = -(*n as i32);
            }
            (*d, grid_coords(&dims, origin), false)
        }
        ShapeSpec::Cylinder { d, n, m } => {
            if *n < 2 {
                return Err(LatticeError::TooSmall(*n));
            }
            if *m < 1 {
                return Err(LatticeError::TooSmall(*m));
            }
            let mut dims = vec![*n; d - 1];
            dims.push(m + 1);
            (*d, grid_coords(&dims, [0; 3]), false)
        }
        ShapeSpec::WulffBox { n, polygon } => {
            if *n < 2 {
                return Err(LatticeError::TooSmall(*n));
            }
            check_simple(polygon)?;
            let a = signed_area(polygon).abs();
            if (a - 1.0).abs() > 1e-6 {
                return Err(LatticeError::NotUnitArea(a));
            }
            let nf = *n as f64;
            let scaled: Vec<[f64; 2]> = polygon.iter().map(|p| [p[0] * nf, p[1] * nf]).collect();
            let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
            for p in &scaled {
                for k in 0..2 {
                    lo[k] = lo[k].min(p[k]);
                    hi[k] = hi[k].max(p[k]);
                }
            }
            let mut cs = Vec::new();
            for y in lo[1].ceil() as i32..=hi[1].floor() as i32 {
                for x in lo[0].ceil() as i32..=hi[0].floor() as i32 {
                    if point_in_closed_polygon(&scaled, [x as f64, y as f64]) {
                        cs.push([x, y, 0]);
                    }
                }
            }
            if cs.is_empty() {
                return Err(LatticeError::EmptyRegion);
            }
            (2, cs, false)
        }
        ShapeSpec::Region { sites } => {
            if sites.is_empty() {
                return Err(LatticeError::EmptyRegion);
            }
            let mut cs: Vec<[i32; 3]> = sites.iter().map(|s| [s[0], s[1], 0]).collect();
            cs.sort_by_key(|c| (c[1], c[0]));
            cs.dedup();
            (2, cs, false)
        }
    };
    Ok(assemble(spec.clone(), d, coords, periodic))
}

fn grid_coords(dims: &[usize], origin: [i32; 3]) -> Vec<[i32; 3]> {
    let total: usize = dims.iter().product();
    let mut out = Vec::with_capacity(total);
    for idx in 0..total {
        let mut c = [0i32; 3];
        let mut r = idx;
        for k in 0..dims.len() {
            c[k] = origin[k] + (r % dims[k]) as i32;
            r /= dims[k];
        }
        out.push(c);
    }
    out
}

fn assemble(spec: ShapeSpec, d: usize, coords: Vec<[i32; 3]>, periodic: bool) -> Geometry {
    let mut origin = [i32::MAX; 3];
    let mut hi = [i32::MIN; 3];
    for c in &coords {
        for k in 0..3 {
            origin[k] = origin[k].min(c[k]);
            hi[k] = hi[k].max(c[k]);
        }
    }
    let extent = [
        (hi[0] - origin[0] + 1) as usize,
        (hi[1] - origin[1] + 1) as usize,
        (hi[2] - origin[2] + 1) as usize,
    ];
    let mut lookup = vec![NO_NBR; extent[0] * extent[1] * extent[2]];
    for (i, c) in coords.iter().enumerate() {
        let li = (c[0] - origin[0]) as usize
            + extent[0] * ((c[1] - origin[1]) as usize + extent[1] * (c[2] - origin[2]) as usize);
        lookup[li] = i as u32;
    }
    let is_slab = spec.has_wall();
    let mut wrap = [periodic && d > 0, periodic && d > 1, periodic && d > 2];
    if let ShapeSpec::Cylinder { .. } = spec {
        for w in wrap.iter_mut().take(d - 1) {
            *w = true;
        }
    }
    let mut g = Geometry {
        spec,
        d,
        coords,
        origin,
        extent,
        lookup,
        periodic,
        wrap,
        nbrs: Vec::new(),
        ext_coords: Vec::new(),
        edges: Vec::new(),
        boundary_edges: Vec::new(),
        wall: Vec::new(),
    };
    let mut ext_index = std::collections::HashMap::new();
    let n = g.coords.len();
    let mut nbrs = vec![NO_NBR; n * 2 * d];
    for i in 0..n {
        let c = g.coords[i];
        for k in 0..d {
            for (s, step) in [(0usize, 1i32), (1, -1)] {
                let mut q = c;
                q[k] += step;
                let slot = i * 2 * d + 2 * k + s;
                if let Some(j) = g.site_at(q) {
                    nbrs[slot] = j as u32;
                } else if is_slab && k == d - 1 && q[k] < 0 {
                    nbrs[slot] = NO_NBR;
                } else {
                    let len = ext_index.len();
                    let e = *ext_index.entry(q).or_insert_with(|| {
                        g.ext_coords.push(q);
                        len
                    });
                    nbrs[slot] = EXT_BIT | e as u32;
                }
            }
        }
    }
    g.nbrs = nbrs;
    for i in 0..n {
        for k in 0..d {
            let v = g.nbrs[i * 2 * d + 2 * k];
            if v != NO_NBR && v & EXT_BIT == 0 {
                g.edges.push([i as u32, v]);
            }
        }
        for s in 0..2 * d {
            let v = g.nbrs[i * 2 * d + s];
            if v != NO_NBR && v & EXT_BIT != 0 {
                g.boundary_edges.push((i as u32, v & !EXT_BIT));
            }
        }
    }
    if is_slab {
        g.wall = (0..n as u32).filter(|&i| g.coords[i as usize][d - 1] == 0).collect();
    }
    g
}

impl Geometry {
    pub fn n_sites(&self) -> usize {
        self.coords.len()
    }

    /// Interior edges (both endpoints in the region). On small tori the same
    /// pair may appear twice.
    pub fn edges(&self) -> &[[u32; 2]] {
        &self.edges
    }

    /// Bonds from a region site to an exterior boundary site, as (site, ext id).
    pub fn boundary_edges(&self) -> &[(u32, u32)] {
        &self.boundary_edges
    }

    pub fn n_exterior(&self) -> usize {
        self.ext_coords.len()
    }

    pub fn exterior_coord(&self, e: usize) -> [i32; 3] {
        self.ext_coords[e]
    }

    pub fn coord(&self, i: usize) -> [i32; 3] {
        self.coords[i]
    }

    pub fn coords(&self) -> &[[i32; 3]] {
        &self.coords
    }

    pub fn is_periodic(&self) -> bool {
        self.periodic
    }

    pub fn wall(&self) -> &[u32] {
        &self.wall
    }

    pub fn bbox(&self) -> ([i32; 3], [usize; 3]) {
        (self.origin, self.extent)
    }

    /// Side length for tori and cubic boxes.
    pub fn linear_size(&self) -> usize {
        match &self.spec {
            ShapeSpec::Torus { n, .. } | ShapeSpec::WulffBox { n, .. } | ShapeSpec::Slab { n, .. } | ShapeSpec::Cylinder { n, .. } => *n,
            ShapeSpec::Box { dims } => dims[0],
            ShapeSpec::Region { .. } => self.extent[0].max(self.extent[1]),
        }
    }

    #[inline]
    pub fn nbr(&self, i: usize, slot: usize) -> Nbr {
        let v = self.nbrs[i * 2 * self.d + slot];
        if v == NO_NBR {
            Nbr::None
        } else if v & EXT_BIT != 0 {
            Nbr::Ext((v & !EXT_BIT) as usize)
        } else {
            Nbr::Site(v as usize)
        }
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = Nbr> + '_ {
        (0..2 * self.d).map(move |s| self.nbr(i, s))
    }

    /// Site at integer coordinates (wrapped on a torus).
    pub fn site_at(&self, c: [i32; 3]) -> Option<usize> {
        let mut q = [0usize; 3];
        for k in 0..3 {
            let mut x = c[k] - self.origin[k];
            if self.wrap[k] {
                x = x.rem_euclid(self.extent[k] as i32);
            }
            if x < 0 || x as usize >= self.extent[k] {
                return None;
            }
            q[k] = x as usize;
        }
        let v = self.lookup[q[0] + self.extent[0] * (q[1] + self.extent[1] * q[2])];
        (v != NO_NBR).then_some(v as usize)
    }

    /// Geometric center of the bounding box.
    pub fn center(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for k in 0..self.d {
            c[k] = self.origin[k] as f64 + (self.extent[k] as f64 - 1.0) / 2.0;
        }
        c
    }

    pub fn is_wall(&self, i: usize) -> bool {
        self.spec.has_wall() && self.coords[i][self.d - 1] == 0
    }
}

fn signed_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    let mut a = 0.0;
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        a += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * a
}

fn check_simple(poly: &[[f64; 2]]) -> Result<()> {
    let n = poly.len();
    if n < 3 {
        return Err(LatticeError::DegeneratePolygon);
    }
    for i in 0..n {
        for j in i + 1..n {
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            let (c, e) = (poly[j], poly[(j + 1) % n]);
            if segments_intersect(a, b, c, e) {
                return Err(LatticeError::NonSimplePolygon(i, j));
            }
        }
    }
    if signed_area(poly).abs() < 1e-300 {
        return Err(LatticeError::DegeneratePolygon);
    }
    Ok(())
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    robust::orient2d(
        robust::Coord { x: a[0], y: a[1] },
        robust::Coord { x: b[0], y: b[1] },
        robust::Coord { x: c[0], y: c[1] },
    )
}

fn on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

fn segments_intersect(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let (o1, o2, o3, o4) = (orient(a, b, c), orient(a, b, d), orient(c, d, a), orient(c, d, b));
    if o1 * o2 < 0.0 && o3 * o4 < 0.0 {
        return true;
    }
    (o1 == 0.0 && on_segment(a, b, c))
        || (o2 == 0.0 && on_segment(a, b, d))
        || (o3 == 0.0 && on_segment(c, d, a))
        || (o4 == 0.0 && on_segment(c, d, b))
}

fn point_in_closed_polygon(poly: &[[f64; 2]], p: [f64; 2]) -> bool {
    let n = poly.len();
    let mut inside = false;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        let dist = seg_dist(a, b, p);
        if dist <= 1e-9 {
            return true;
        }
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

fn seg_dist(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let l2 = dx * dx + dy * dy;
    let t = if l2 > 0.0 { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / l2).clamp(0.0, 1.0) } else { 0.0 };
    ((a[0] + t * dx - p[0]).powi(2) + (a[1] + t * dy - p[1]).powi(2)).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "bc", rename_all = "snake_case")]
pub enum BoundaryCondition {
    Plus,
    Minus,
    Free,
    Periodic,
    /// +1 on exterior sites with (x - center)·n >= 0, -1 otherwise.
    MixedPm { normal: [f64; 3] },
    /// Plus outside, no bonds below the wall, field eta on wall sites.
    WallField { eta: f64 },
}

impl BoundaryCondition {
    pub fn name(&self) -> String {
        match self {
            BoundaryCondition::Plus => "plus".into(),
            BoundaryCondition::Minus => "minus".into(),
            BoundaryCondition::Free => "free".into(),
            BoundaryCondition::Periodic => "periodic".into(),
            BoundaryCondition::MixedPm { normal } => format!("mixed_pm({},{},{})", normal[0], normal[1], normal[2]),
            BoundaryCondition::WallField { eta } => format!("wall_field({eta})"),
        }
    }

    pub fn eta(&self) -> f64 {
        match self {
            BoundaryCondition::WallField { eta } => *eta,
            _ => 0.0,
        }
    }

    pub fn check(&self, g: &Geometry) -> Result<()> {
        let bad = match self {
            BoundaryCondition::Periodic => !g.is_periodic(),
            BoundaryCondition::WallField { .. } => !g.spec.has_wall(),
            _ => false,
        };
        if bad {
            return Err(LatticeError::IncompatibleBc { bc: self.name(), shape: g.spec.name().into() });
        }
        Ok(())
    }

    /// Spin imposed at an exterior coordinate, or None for free boundaries.
    pub fn boundary_spin(&self, g: &Geometry, c: [i32; 3]) -> Option<i8> {
        match self {
            BoundaryCondition::Plus | BoundaryCondition::WallField { .. } => Some(1),
            BoundaryCondition::Minus => Some(-1),
            BoundaryCondition::Free | BoundaryCondition::Periodic => None,
            BoundaryCondition::MixedPm { normal } => {
                let ctr = g.center();
                let dot: f64 = (0..g.d).map(|k| (c[k] as f64 - ctr[k]) * normal[k]).sum();
                Some(if dot >= 0.0 { 1 } else { -1 })
            }
        }
    }

    /// Boundary spins for every exterior site of `g`.
    pub fn exterior_spins(&self, g: &Geometry) -> Vec<Option<i8>> {
        (0..g.n_exterior()).map(|e| self.boundary_spin(g, g.exterior_coord(e))).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum CouplingKind {
    NnIsing,
    /// Symmetric table of (offset, J) pairs; list both signs of each offset.
    FiniteRange { table: Vec<([i32; 3], f64)> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingSpec {
    pub kind: CouplingKind,
    pub beta: f64,
}

impl CouplingSpec {
    pub fn nn(beta: f64) -> Self {
        CouplingSpec { kind: CouplingKind::NnIsing, beta }
    }

    pub fn validate(&self) -> Result<()> {
        if let CouplingKind::FiniteRange { table } = &self.kind {
            if let Some(&(_, j)) = table.iter().find(|(_, j)| *j < 0.0) {
                return Err(LatticeError::NegativeCoupling(j));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpinConfig {
    pub spins: Vec<i8>,
}

impl SpinConfig {
    pub fn constant(n: usize, s: i8) -> Self {
        SpinConfig { spins: vec![s; n] }
    }

    /// Configuration whose bits (LSB = site 0) encode the `+1` sites.
    pub fn from_index(n: usize, idx: u64) -> Self {
        SpinConfig { spins: (0..n).map(|i| if idx >> i & 1 == 1 { 1 } else { -1 }).collect() }
    }

    pub fn index(&self) -> u64 {
        self.spins.iter().enumerate().fold(0u64, |acc, (i, &s)| if s > 0 { acc | 1 << i } else { acc })
    }

    pub fn flipped(&self) -> Self {
        SpinConfig { spins: self.spins.iter().map(|s| -s).collect() }
    }

    pub fn total(&self) -> i64 {
        self.spins.iter().map(|&s| s as i64).sum()
    }
}

/// Energy `-Σ J σσ - h Σ σ - η Σ_wall σ`, in units of J.
pub fn hamiltonian(
    g: &Geometry,
    sigma: &SpinConfig,
    bc: &BoundaryCondition,
    kind: &CouplingKind,
    h: f64,
) -> Result<f64> {
    if sigma.spins.len() != g.n_sites() {
        return Err(LatticeError::LengthMismatch { got: sigma.spins.len(), expected: g.n_sites() });
    }
    bc.check(g)?;
    let s = &sigma.spins;
    let mut e = crate::stats::KahanSum::new();
    match kind {
        CouplingKind::NnIsing => {
            for &[a, b] in g.edges() {
                e.add(-(s[a as usize] * s[b as usize]) as f64);
            }
            let ext = bc.exterior_spins(g);
            for &(i, x) in g.boundary_edges() {
                if let Some(b) = ext[x as usize] {
                    e.add(-(s[i as usize] * b) as f64);
                }
            }
        }
        CouplingKind::FiniteRange { table } => {
            for i in 0..g.n_sites() {
                let c = g.coord(i);
                for &(o, j) in table {
                    let q = [c[0] + o[0], c[1] + o[1], c[2] + o[2]];
                    match g.site_at(q) {
                        Some(k) => e.add(-0.5 * j * (s[i] * s[k]) as f64),
                        None => {
                            if below_wall(g, q) {
                                continue;
                            }
                            if let Some(b) = bc.boundary_spin(g, q) {
                                e.add(-j * (s[i] * b) as f64);
                            }
                        }
                    }
                }
            }
        }
    }
    for &x in s {
        e.add(-h * x as f64);
    }
    let eta = bc.eta();
    if eta != 0.0 {
        for &w in g.wall() {
            e.add(-eta * s[w as usize] as f64);
        }
    }
    Ok(e.value())
}

fn below_wall(g: &Geometry, q: [i32; 3]) -> bool {
    g.spec.has_wall() && q[g.d - 1] < 0
}

/// Local-field tables for single-site updates: the field at site i is
/// `Σ_k J_k σ_{nbr_k} + ext[i]`, where `ext` collects boundary spins, h and
/// the wall field.
#[derive(Clone, Debug)]
pub struct LocalEnv {
    pub start: Vec<u32>,
    pub nbr: Vec<u32>,
    pub j: Vec<f64>,
    pub ext: Vec<f64>,
    pub uniform_j: bool,
}

impl LocalEnv {
    pub fn new(g: &Geometry, bc: &BoundaryCondition, kind: &CouplingKind, h: f64) -> Result<Self> {
        bc.check(g)?;
        let n = g.n_sites();
        let mut start = Vec::with_capacity(n + 1);
        let mut nbr = Vec::new();
        let mut jv = Vec::new();
        let mut ext = vec![h; n];
        let spins = bc.exterior_spins(g);
        start.push(0);
        for i in 0..n {
            match kind {
                CouplingKind::NnIsing => {
                    for nb in g.neighbors(i) {
                        match nb {
                            Nbr::Site(k) => {
                                nbr.push(k as u32);
                                jv.push(1.0);
                            }
                            Nbr::Ext(e) => {
                                if let Some(b) = spins[e] {
                                    ext[i] += b as f64;
                                }
                            }
                            Nbr::None => {}
                        }
                    }
                }
                CouplingKind::FiniteRange { table } => {
                    let c = g.coord(i);
                    for &(o, j) in table {
                        let q = [c[0] + o[0], c[1] + o[1], c[2] + o[2]];
                        match g.site_at(q) {
                            Some(k) => {
                                nbr.push(k as u32);
                                jv.push(j);
                            }
                            None if !below_wall(g, q) => {
                                if let Some(b) = bc.boundary_spin(g, q) {
                                    ext[i] += j * b as f64;
                                }
                            }
                            None => {}
                        }
                    }
                }
            }
            if g.is_wall(i) {
                ext[i] += bc.eta();
            }
            start.push(nbr.len() as u32);
        }
        Ok(LocalEnv { start, nbr, j: jv, ext, uniform_j: matches!(kind, CouplingKind::NnIsing) })
    }

    #[inline]
    pub fn field(&self, s: &[i8], i: usize) -> f64 {
        let (a, b) = (self.start[i] as usize, self.start[i + 1] as usize);
        let mut f = self.ext[i];
        if self.uniform_j {
            let mut acc = 0i32;
            for &k in &self.nbr[a..b] {
                acc += s[k as usize] as i32;
            }
            f += acc as f64;
        } else {
            for t in a..b {
                f += self.j[t] * s[self.nbr[t] as usize] as f64;
            }
        }
        f
    }

    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.nbr[self.start[i] as usize..self.start[i + 1] as usize]
    }

    /// Energy, consistent with `hamiltonian` for the same inputs.
    pub fn energy(&self, s: &[i8]) -> f64 {
        let mut e = crate::stats::KahanSum::new();
        for i in 0..s.len() {
            let (a, b) = (self.start[i] as usize, self.start[i + 1] as usize);
            let mut pair = 0.0;
            for t in a..b {
                pair += self.j[t] * s[self.nbr[t] as usize] as f64;
            }
            e.add(-(s[i] as f64) * (0.5 * pair + self.ext[i]));
        }
        e.value()
    }
}

/// Total and density magnetization over a region.
pub fn magnetization(sigma: &SpinConfig, region: &[usize]) -> Result<(i64, f64)> {
    if region.is_empty() {
        return Err(LatticeError::EmptyRegion);
    }
    let mut m = 0i64;
    for &i in region {
        m += *sigma.spins.get(i).ok_or(LatticeError::SiteOutOfRange(i))? as i64;
    }
    Ok((m, m as f64 / region.len() as f64))
}

/// FK boundary wiring π.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "wiring", rename_all = "snake_case")]
pub enum Wiring {
    Wired,
    Free,
    Periodic,
    /// Per exterior site: wired (true) or free.
    Mixed { wired: Vec<bool> },
}

/// Edge set of the random-cluster model: interior edges plus bonds to the
/// π-wired exterior, which is collapsed into a single ghost node.
#[derive(Clone, Debug)]
pub struct FkGraph {
    pub n_sites: usize,
    pub ghost: Option<usize>,
    pub edges: Vec<[u32; 2]>,
}

impl FkGraph {
    pub fn new(g: &Geometry, pi: &Wiring) -> Result<Self> {
        if matches!(pi, Wiring::Periodic) != g.is_periodic() && !matches!(pi, Wiring::Free) {
            return Err(LatticeError::IncompatibleBc { bc: format!("{pi:?}"), shape: g.spec.name().into() });
        }
        let n = g.n_sites();
        let mut edges: Vec<[u32; 2]> = g.edges().to_vec();
        let wired = |e: usize| match pi {
            Wiring::Wired => true,
            Wiring::Mixed { wired } => wired.get(e).copied().unwrap_or(false),
            _ => false,
        };
        let mut ghost = None;
        for &(i, e) in g.boundary_edges() {
            if wired(e as usize) {
                ghost = Some(n);
                edges.push([i, n as u32]);
            }
        }
        Ok(FkGraph { n_sites: n, ghost, edges })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_sites + self.ghost.is_some() as usize
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BondConfig {
    pub open: Vec<bool>,
}

impl BondConfig {
    pub fn closed(m: usize) -> Self {
        BondConfig { open: vec![false; m] }
    }

    pub fn from_index(m: usize, idx: u64) -> Self {
        BondConfig { open: (0..m).map(|e| idx >> e & 1 == 1).collect() }
    }

    pub fn index(&self) -> u64 {
        self.open.iter().enumerate().fold(0u64, |a, (e, &o)| if o { a | 1 << e } else { a })
    }

    pub fn n_open(&self) -> usize {
        self.open.iter().filter(|&&o| o).count()
    }

    /// Union-find over the open edges of `fk`.
    pub fn union_find(&self, fk: &FkGraph) -> crate::unionfind::UnionFind {
        let mut uf = crate::unionfind::UnionFind::new(fk.n_nodes());
        for (e, &[a, b]) in fk.edges.iter().enumerate() {
            if self.open[e] {
                uf.union(a as usize, b as usize);
            }
        }
        uf
    }

    /// Cluster labels for region sites and c^π: the number of clusters not
    /// attached to the wired ghost.
    pub fn clusters(&self, fk: &FkGraph) -> (Vec<u32>, usize) {
        let mut uf = self.union_find(fk);
        let (labels, k) = uf.labels();
        let c = match fk.ghost {
            Some(_) => k - 1,
            None => k,
        };
        (labels, c)
    }
}

/// Snapshot header. The binary layout is the magic line `WLSNAP1`, one line
/// of JSON with this header, then `len` bits packed LSB-first, where bit i is
/// spin i == +1 (spins) or edge i open (bonds).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub shape: ShapeSpec,
    pub d: usize,
    pub n: usize,
    pub m: usize,
    pub bc: String,
    pub beta: f64,
    pub h: f64,
    pub eta: f64,
    pub seed: u64,
    pub kind: String,
    pub len: usize,
}

pub fn encode_snapshot(header: &SnapshotHeader, bits: &[bool]) -> Vec<u8> {
    let mut out = b"WLSNAP1\n".to_vec();
    out.extend(serde_json::to_vec(header).expect("header serializes"));
    out.push(b'\n');
    let mut bytes = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    out.extend(bytes);
    out
}

pub fn decode_snapshot(data: &[u8]) -> Result<(SnapshotHeader, Vec<bool>)> {
    let rest = data.strip_prefix(b"WLSNAP1\n").ok_or_else(|| LatticeError::Snapshot("bad magic".into()))?;
    let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| LatticeError::Snapshot("missing header".into()))?;
    let header: SnapshotHeader =
        serde_json::from_slice(&rest[..nl]).map_err(|e| LatticeError::Snapshot(e.to_string()))?;
    let body = &rest[nl + 1..];
    if body.len() != header.len.div_ceil(8) {
        return Err(LatticeError::Snapshot(format!("expected {} payload bytes, got {}", header.len.div_ceil(8), body.len())));
    }
    let bits = (0..header.len).map(|i| body[i / 8] >> (i % 8) & 1 == 1).collect();
    Ok((header, bits))
}
