//! Presets, flat key = value configurations, run manifests and reports.
//!
//! A run lives in one output directory: `config.txt` (canonical form),
//! `manifest.json`, and one subdirectory per stage. Stages whose recorded
//! outputs are still present with matching digests are not run again, so an
//! interrupted run resumes where it stopped.
//!
//! The pipeline functions (`dks_droplets`, `fk_tightness`, `wulff_fit`,
//! `restricted_gaussianity`, `estimate_m_star`) are public so that tests
//! and other callers can use them without the file plumbing.

use crate::coarse::{self, CoarseError, PhaseLabelField, TightnessReport};
use crate::contour::{self, ContourError, DropletReport, DropletSetup};
use crate::exact::{self, ExactError};
use crate::geometry::{self, ConvexPolygon, GeometryError, WettingRegime, Winterbottom};
use crate::lattice::{self, BoundaryCondition, CouplingSpec, FkGraph, LatticeError, ShapeSpec, SpinConfig, Wiring};
use crate::rng::RngStream;
use crate::samplers::{self, FkChain, Kawasaki, SamplerError, SpinChain, Susceptibility};
use crate::stats::{self, Estimate};
use crate::tension::{self, DecayConfig, DirectionalTension, OzTerm, TableMethod, TensionError, WallConfig};
use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown preset `{name}`; available presets: {available}")]
    UnknownPreset { name: String, available: String },
    #[error("config is for preset `{config}` but preset `{requested}` was requested")]
    PresetMismatch { requested: String, config: String },
    #[error("preset `{preset}` has no key `{key}`; its keys are: {allowed}")]
    UnknownKey { preset: String, key: String, allowed: String },
    #[error("key `{0}` is given twice")]
    DuplicateKey(String),
    #[error("key `{key}`: cannot read `{value}` as {expected}")]
    BadValue { key: String, value: String, expected: String },
    #[error("no output directory: set `out` in the config or pass one explicitly")]
    NoOutputDir,
    #[error("{dir} holds a run of config {found}, not {expected}; use a fresh directory")]
    ConfigMismatch { dir: String, found: String, expected: String },
    #[error("no manifest in {0}")]
    NoManifest(String),
    #[error("stage `{stage}`: {msg}")]
    Stage { stage: String, msg: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Exact(#[from] ExactError),
    #[error(transparent)]
    Tension(#[from] TensionError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Contour(#[from] ContourError),
    #[error(transparent)]
    Coarse(#[from] CoarseError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.display().to_string(), source }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Seed of a named stream under a configuration seed.
pub fn stage_seed(seed: u64, label: &str) -> u64 {
    let h = Sha256::digest(format!("{seed}/{label}").as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

// ---------------------------------------------------------------- keys and presets

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Float,
    Int,
    FloatList,
    IntList,
    Choice(&'static [&'static str]),
    /// `free`, `off` or a fixed coefficient.
    Oz,
    Text,
}

impl Kind {
    fn describe(&self) -> String {
        match self {
            Kind::Float => "a number".into(),
            Kind::Int => "a nonnegative integer".into(),
            Kind::FloatList => "a comma-separated list of numbers".into(),
            Kind::IntList => "a comma-separated list of integers".into(),
            Kind::Choice(c) => format!("one of {}", c.join(", ")),
            Kind::Oz => "`free`, `off` or a number".into(),
            Kind::Text => "text".into(),
        }
    }

    fn accepts(&self, v: &str) -> bool {
        let v = v.trim();
        let list = |f: &dyn Fn(&str) -> bool| !v.is_empty() && v.split(',').all(|x| f(x.trim()));
        match self {
            Kind::Float => v.parse::<f64>().map_or(false, f64::is_finite),
            Kind::Int => v.parse::<u64>().is_ok(),
            Kind::FloatList => list(&|x| x.parse::<f64>().map_or(false, f64::is_finite)),
            Kind::IntList => list(&|x| x.parse::<u64>().is_ok()),
            Kind::Choice(c) => c.contains(&v),
            Kind::Oz => v == "free" || v == "off" || v.parse::<f64>().map_or(false, f64::is_finite),
            Kind::Text => true,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct KeySpec {
    pub name: &'static str,
    pub kind: Kind,
    pub default: &'static str,
    pub doc: &'static str,
}

const fn key(name: &'static str, kind: Kind, default: &'static str, doc: &'static str) -> KeySpec {
    KeySpec { name, kind, default, doc }
}

type StageFn = fn(&StageCtx) -> Result<StageOutput>;

#[derive(Clone, Copy)]
pub struct StageSpec {
    pub name: &'static str,
    pub deps: &'static [&'static str],
    run: StageFn,
}

#[derive(Clone, Copy)]
pub struct PresetSpec {
    pub name: &'static str,
    pub doc: &'static str,
    pub keys: &'static [KeySpec],
    pub stages: &'static [StageSpec],
}

impl std::fmt::Debug for PresetSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PresetSpec").field("name", &self.name).finish()
    }
}

const TENSION_KEYS: [KeySpec; 9] = [
    key("directions", Kind::Int, "16", "grid directions of the τ table (multiple of 8)"),
    key("widths", Kind::IntList, "4,6,8,10,12,14", "transfer-matrix strip widths for the axis anchor"),
    key("min_distance", Kind::Float, "2", "smallest separation used in the decay fits"),
    key("max_distance", Kind::Float, "10", "largest separation used in the decay fits"),
    key("decay_torus", Kind::Int, "64", "side of the dual torus"),
    key("decay_chains", Kind::Int, "32", "independent dual chains"),
    key("decay_burn_in", Kind::Int, "50", "burn-in sweeps per dual chain"),
    key("decay_sweeps", Kind::Int, "600", "recorded sweeps per dual chain"),
    key("oz", Kind::Oz, "0.5", "coefficient of the log r term: free, off or fixed"),
];

const MSTAR_KEYS: [KeySpec; 3] = [
    key("mstar_n", Kind::Int, "32", "torus side of the m* run"),
    key("mstar_burn_in", Kind::Int, "500", "burn-in sweeps of the m* run"),
    key("mstar_sweeps", Kind::Int, "4000", "recorded sweeps of the m* run"),
];

macro_rules! keys {
    ($($k:expr),* $(; $($arr:expr),*)?) => {{
        const K: &[KeySpec] = &concat_keys!([$($k),*] $(, $($arr),*)?);
        K
    }};
}

// Small helper to splice the shared key arrays into a preset's key list.
macro_rules! concat_keys {
    ([$($k:expr),*]) => { [$($k),*] };
    ([$($k:expr),*], $a:expr) => { concat_keys!(@one [$($k),*] $a) };
    ([$($k:expr),*], $a:expr, $b:expr) => { concat_keys!(@two [$($k),*] $a, $b) };
    (@one [$($k:expr),*] $a:expr) => {{
        const A: &[KeySpec] = &$a;
        const N: usize = [$($k),*].len() + A.len();
        const OUT: [KeySpec; N] = {
            let head = [$($k),*];
            let mut out = [key("", Kind::Text, "", ""); N];
            let mut i = 0;
            while i < head.len() { out[i] = head[i]; i += 1; }
            let mut j = 0;
            while j < A.len() { out[head.len() + j] = A[j]; j += 1; }
            out
        };
        OUT
    }};
    (@two [$($k:expr),*] $a:expr, $b:expr) => {{
        const A: &[KeySpec] = &$a;
        const B: &[KeySpec] = &$b;
        const N: usize = [$($k),*].len() + A.len() + B.len();
        const OUT: [KeySpec; N] = {
            let head = [$($k),*];
            let mut out = [key("", Kind::Text, "", ""); N];
            let mut i = 0;
            while i < head.len() { out[i] = head[i]; i += 1; }
            let mut j = 0;
            while j < A.len() { out[head.len() + j] = A[j]; j += 1; }
            let mut l = 0;
            while l < B.len() { out[head.len() + A.len() + l] = B[l]; l += 1; }
            out
        };
        OUT
    }};
}

static PRESETS: &[PresetSpec] = &[
    PresetSpec {
        name: "duality-selftest",
        doc: "Low/high-temperature duality, random-line identity and q-weight inequalities on every simply connected domain inside a max_side × max_side box.",
        keys: keys![
            key("betas", Kind::FloatList, "0.3,0.7,1.1", "inverse temperatures"),
            key("max_side", Kind::Int, "3", "side of the enclosing box")
        ],
        stages: &[
            StageSpec { name: "identities", deps: &[], run: stage_identities },
            StageSpec { name: "inequalities", deps: &[], run: stage_inequalities },
        ],
    },
    PresetSpec {
        name: "tension-curve",
        doc: "Surface tension table from dual correlation decay anchored to transfer-matrix strips, its convexification, and the convexity, stiffness and strong-triangle scans.",
        keys: keys![
            key("beta", Kind::Float, "0.6", "inverse temperature"),
            key("method", Kind::Choice(&["dual-decay", "isotropic"]), "dual-decay", "table estimator");
            TENSION_KEYS
        ],
        stages: &[
            StageSpec { name: "table", deps: &[], run: stage_table },
            StageSpec { name: "checks", deps: &["table"], run: stage_table_checks },
        ],
    },
    PresetSpec {
        name: "wulff-gallery",
        doc: "Unit-area Wulff shape and its surface energy for a supplied tension: isotropic, ℓ1, or a table file written by tension-curve.",
        keys: keys![
            key("tau", Kind::Choice(&["isotropic", "l1", "file"]), "isotropic", "tension source"),
            key("tau_file", Kind::Text, "", "DirectionalTension JSON when tau = file"),
            key("directions", Kind::Int, "720", "grid directions for the analytic tensions")
        ],
        stages: &[StageSpec { name: "shape", deps: &[], run: stage_gallery }],
    },
    PresetSpec {
        name: "dks-droplet",
        doc: "Canonical droplet in a Wulff box with minus boundary: frequency of a single s-large contour, enclosed area against a_N/(2m*), and distance to the Wulff shape.",
        keys: keys![
            key("beta", Kind::Float, "0.8", "inverse temperature"),
            key("n", Kind::Int, "64", "linear size of the Wulff box"),
            key("samples", Kind::Int, "200", "recorded configurations in total"),
            key("chains", Kind::Int, "8", "independent Kawasaki chains"),
            key("burn_in", Kind::Int, "200", "burn-in sweeps per chain"),
            key("thin", Kind::Int, "20", "sweeps between recorded configurations"),
            key("s_factor", Kind::Float, "8", "s = floor(s_factor · log2 n)");
            TENSION_KEYS, MSTAR_KEYS
        ],
        stages: &[
            StageSpec { name: "tension", deps: &[], run: stage_table },
            StageSpec { name: "mstar", deps: &[], run: stage_mstar },
            StageSpec { name: "droplets", deps: &["tension", "mstar"], run: stage_droplets },
        ],
    },
    PresetSpec {
        name: "l1-tightness",
        doc: "FK phase labels on a torus: zero-label fraction per scale, Assumption B violations, and the per-sample bound ‖M_k − m*u_k‖₁ ≤ ζ + 2ρ.",
        keys: keys![
            key("beta", Kind::Float, "0.8", "inverse temperature"),
            key("n", Kind::Int, "64", "torus side (power of two)"),
            key("scales", Kind::IntList, "3,4,5", "block scales k (ℓ = k − 3)"),
            key("zeta_factor", Kind::Float, "0.2", "ζ = zeta_factor · m*"),
            key("samples", Kind::Int, "200", "recorded FK configurations"),
            key("burn_in", Kind::Int, "50", "burn-in sweeps"),
            key("thin", Kind::Int, "2", "sweeps between recorded configurations"),
            key("calibration", Kind::Int, "10", "configurations used to calibrate Θ"),
            key("delta", Kind::Float, "0.1", "perimeter slack δ"),
            key("perimeter_a", Kind::Float, "4", "perimeter threshold a");
            MSTAR_KEYS
        ],
        stages: &[
            StageSpec { name: "mstar", deps: &[], run: stage_mstar },
            StageSpec { name: "labels", deps: &["mstar"], run: stage_tightness },
        ],
    },
    PresetSpec {
        name: "l1-wulff-fit",
        doc: "Canonical Kawasaki on tori of increasing size with a minus droplet: L1 distance of M_k/m* to the best translate of the Wulff shape.",
        keys: keys![
            key("beta", Kind::Float, "0.8", "inverse temperature"),
            key("sizes", Kind::IntList, "32,64", "torus sides (powers of two)"),
            key("volume", Kind::Float, "0.2", "droplet volume fraction"),
            key("samples", Kind::Int, "100", "recorded configurations per size"),
            key("chains", Kind::Int, "4", "independent chains per size"),
            key("burn_in", Kind::Int, "200", "burn-in sweeps"),
            key("thin", Kind::Int, "20", "sweeps between recorded configurations");
            TENSION_KEYS, MSTAR_KEYS
        ],
        stages: &[
            StageSpec { name: "tension", deps: &[], run: stage_table },
            StageSpec { name: "mstar", deps: &[], run: stage_mstar },
            StageSpec { name: "fit", deps: &["tension", "mstar"], run: stage_wulff_fit },
        ],
    },
    PresetSpec {
        name: "wetting-scan",
        doc: "Wall free energy τ_bd(η) by integrating the wall magnetization, its shape checks against τ*, and the Winterbottom shape at each η.",
        keys: keys![
            key("beta", Kind::Float, "0.7", "inverse temperature"),
            key("etas", Kind::FloatList, "0,0.25,0.5,0.75,1", "wall fields"),
            key("width", Kind::Int, "32", "wall length (periodic)"),
            key("height", Kind::Int, "64", "height above the wall"),
            key("chains", Kind::Int, "8", "chains per integrand point"),
            key("burn_in", Kind::Int, "2000", "burn-in sweeps per chain"),
            key("sweeps", Kind::Int, "8000", "recorded sweeps per chain"),
            key("tol", Kind::Float, "0.0005", "adaptive Simpson tolerance"),
            key("max_depth", Kind::Int, "5", "adaptive Simpson depth"),
            key("tm_widths", Kind::IntList, "4,6,8,10,12", "strip widths for τ*"),
            key("z", Kind::Float, "2", "error-bar multiple in the checks")
        ],
        stages: &[
            StageSpec { name: "tau_star", deps: &[], run: stage_tau_star },
            StageSpec { name: "wall", deps: &["tau_star"], run: stage_wall },
            StageSpec { name: "shapes", deps: &["wall"], run: stage_wetting_shapes },
        ],
    },
    PresetSpec {
        name: "interface-rate",
        doc: "Probability that the top and bottom of a wired box are not FK-connected, as a rate per unit base area.",
        keys: keys![
            key("beta", Kind::Float, "0.8", "inverse temperature"),
            key("d", Kind::Int, "2", "dimension"),
            key("n", Kind::Int, "12", "base side"),
            key("eps", Kind::Float, "0.5", "height / n"),
            key("burn_in", Kind::Int, "100", "burn-in sweeps"),
            key("samples", Kind::Int, "2000", "recorded configurations")
        ],
        stages: &[StageSpec { name: "rate", deps: &[], run: stage_interface_rate }],
    },
];

pub fn presets() -> &'static [PresetSpec] {
    PRESETS
}

pub fn preset(name: &str) -> Result<&'static PresetSpec> {
    PRESETS.iter().find(|p| p.name == name).ok_or_else(|| ExperimentError::UnknownPreset {
        name: name.into(),
        available: PRESETS.iter().map(|p| p.name).collect::<Vec<_>>().join(", "),
    })
}

// ---------------------------------------------------------------- configuration

/// A preset with every key resolved. Keys not named in a config file take
/// the documented defaults, and the canonical form lists them all.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub preset: String,
    pub seed: u64,
    /// Not part of the canonical form: moving a run does not change it.
    pub out_dir: Option<PathBuf>,
    params: BTreeMap<String, String>,
}

impl ExperimentConfig {
    pub fn new(preset_name: &str) -> Result<Self> {
        let p = preset(preset_name)?;
        let params = p.keys.iter().map(|k| (k.name.to_string(), k.default.to_string())).collect();
        Ok(ExperimentConfig { preset: p.name.into(), seed: 1, out_dir: None, params })
    }

    /// Parse `key = value` lines; `#` starts a comment. `preset` must come
    /// before any preset key.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: Option<ExperimentConfig> = None;
        let mut pending: Vec<(usize, String, String)> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ExperimentError::Parse { line: i + 1, msg: format!("expected `key = value`, got `{line}`") })?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if !seen.insert(k.clone()) {
                return Err(ExperimentError::DuplicateKey(k));
            }
            if k == "preset" {
                cfg = Some(ExperimentConfig::new(&v)?);
            } else {
                pending.push((i + 1, k, v));
            }
        }
        let mut cfg = cfg.ok_or_else(|| ExperimentError::Parse { line: 0, msg: "no `preset` line".into() })?;
        for (_, k, v) in pending {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, k: &str, v: &str) -> Result<()> {
        let bad = |expected: String| ExperimentError::BadValue { key: k.into(), value: v.into(), expected };
        match k {
            "seed" => self.seed = v.parse().map_err(|_| bad("a 64-bit unsigned integer".into()))?,
            "out" => self.out_dir = Some(PathBuf::from(v)),
            "preset" => {
                if v != self.preset {
                    return Err(ExperimentError::PresetMismatch { requested: v.into(), config: self.preset.clone() });
                }
            }
            _ => {
                let p = preset(&self.preset)?;
                let spec = p.keys.iter().find(|s| s.name == k).ok_or_else(|| ExperimentError::UnknownKey {
                    preset: self.preset.clone(),
                    key: k.into(),
                    allowed: p.keys.iter().map(|s| s.name).collect::<Vec<_>>().join(", "),
                })?;
                if !spec.kind.accepts(v) {
                    return Err(bad(spec.kind.describe()));
                }
                self.params.insert(k.into(), v.trim().into());
            }
        }
        Ok(())
    }

    pub fn get(&self, k: &str) -> &str {
        self.params.get(k).map(String::as_str).unwrap_or_else(|| panic!("preset {} has no key {k}", self.preset))
    }

    fn bad(&self, k: &str, expected: &str) -> ExperimentError {
        ExperimentError::BadValue { key: k.into(), value: self.get(k).into(), expected: expected.into() }
    }

    pub fn f64(&self, k: &str) -> Result<f64> {
        self.get(k).parse().map_err(|_| self.bad(k, "a number"))
    }

    pub fn usize(&self, k: &str) -> Result<usize> {
        self.get(k).parse().map_err(|_| self.bad(k, "an integer"))
    }

    pub fn f64_list(&self, k: &str) -> Result<Vec<f64>> {
        self.get(k).split(',').map(|x| x.trim().parse().map_err(|_| self.bad(k, "a list of numbers"))).collect()
    }

    pub fn usize_list(&self, k: &str) -> Result<Vec<usize>> {
        self.get(k).split(',').map(|x| x.trim().parse().map_err(|_| self.bad(k, "a list of integers"))).collect()
    }

    pub fn oz(&self, k: &str) -> Result<OzTerm> {
        Ok(match self.get(k) {
            "free" => OzTerm::Free,
            "off" => OzTerm::Off,
            v => OzTerm::Fixed(v.parse().map_err(|_| self.bad(k, "free, off or a number"))?),
        })
    }

    /// Sorted `key = value` lines, preset and seed first.
    pub fn canonical(&self) -> String {
        let mut s = format!("preset = {}\nseed = {}\n", self.preset, self.seed);
        for (k, v) in &self.params {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical().as_bytes())
    }
}

// ---------------------------------------------------------------- manifest

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl FileDigest {
    pub fn of(path: &str, bytes: &[u8]) -> Self {
        FileDigest { path: path.into(), sha256: sha256_hex(bytes), bytes: bytes.len() as u64 }
    }
}

fn check(name: &str, pass: bool, detail: String) -> Check {
    Check { name: name.into(), pass, detail }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub seed: u64,
    pub files: Vec<FileDigest>,
    pub checks: Vec<Check>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub preset: String,
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
    /// Unix seconds.
    pub started: u64,
    pub finished: Option<u64>,
    pub stages: Vec<StageRecord>,
    /// Stages taken over from an earlier, interrupted run (not persisted).
    #[serde(skip)]
    pub reused: Vec<String>,
}

pub const MANIFEST: &str = "manifest.json";

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(MANIFEST);
        if !p.exists() {
            return Err(ExperimentError::NoManifest(dir.display().to_string()));
        }
        let text = std::fs::read_to_string(&p).map_err(io_err(&p))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(MANIFEST), serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn checks(&self) -> impl Iterator<Item = (&str, &Check)> {
        self.stages.iter().flat_map(|s| s.checks.iter().map(move |c| (s.name.as_str(), c)))
    }

    pub fn all_checks_pass(&self) -> bool {
        self.checks().all(|(_, c)| c.pass)
    }

    /// Recorded files that are missing or whose digest changed.
    pub fn verify(&self, dir: &Path) -> Vec<String> {
        let mut bad = Vec::new();
        for f in self.stages.iter().flat_map(|s| &s.files) {
            match std::fs::read(dir.join(&f.path)) {
                Ok(b) if sha256_hex(&b) == f.sha256 => {}
                Ok(_) => bad.push(format!("{} (digest changed)", f.path)),
                Err(_) => bad.push(format!("{} (missing)", f.path)),
            }
        }
        bad
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

fn now() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

// ---------------------------------------------------------------- running

pub struct StageCtx<'a> {
    pub cfg: &'a ExperimentConfig,
    pub dir: &'a Path,
    pub stage: &'static str,
    pub seed: u64,
}

impl StageCtx<'_> {
    fn read(&self, stage: &str, file: &str) -> Result<String> {
        let p = self.dir.join(stage).join(file);
        std::fs::read_to_string(&p).map_err(io_err(&p))
    }

    fn read_json<T: DeserializeOwned>(&self, stage: &str, file: &str) -> Result<T> {
        Ok(serde_json::from_str(&self.read(stage, file)?)?)
    }

    fn err(&self, msg: impl Into<String>) -> ExperimentError {
        ExperimentError::Stage { stage: self.stage.into(), msg: msg.into() }
    }
}

#[derive(Default)]
pub struct StageOutput {
    pub files: Vec<(String, Vec<u8>)>,
    pub checks: Vec<Check>,
}

impl StageOutput {
    fn json<T: Serialize>(mut self, name: &str, v: &T) -> Result<Self> {
        let mut s = serde_json::to_string_pretty(v)?;
        s.push('\n');
        self.files.push((name.into(), s.into_bytes()));
        Ok(self)
    }

    fn text(mut self, name: &str, s: String) -> Self {
        self.files.push((name.into(), s.into_bytes()));
        self
    }

    fn check(mut self, c: Check) -> Self {
        self.checks.push(c);
        self
    }
}

/// Run (or resume) `name` with `cfg` in `cfg.out_dir`.
pub fn run_preset(name: &str, cfg: &ExperimentConfig) -> Result<RunManifest> {
    let spec = preset(name)?;
    if cfg.preset != spec.name {
        return Err(ExperimentError::PresetMismatch { requested: name.into(), config: cfg.preset.clone() });
    }
    let dir = cfg.out_dir.clone().ok_or(ExperimentError::NoOutputDir)?;
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let hash = cfg.hash();
    let mut manifest = match RunManifest::load(&dir) {
        Ok(m) if m.config_hash != hash => {
            return Err(ExperimentError::ConfigMismatch { dir: dir.display().to_string(), found: m.config_hash, expected: hash })
        }
        Ok(mut m) => {
            // keep the stages whose outputs survived intact
            m.stages.retain(|s| {
                s.files.iter().all(|f| std::fs::read(dir.join(&f.path)).map_or(false, |b| sha256_hex(&b) == f.sha256))
            });
            m.reused = m.stages.iter().map(|s| s.name.clone()).collect();
            m.finished = None;
            m
        }
        Err(ExperimentError::NoManifest(_)) => RunManifest {
            preset: spec.name.into(),
            config_hash: hash,
            seed: cfg.seed,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            started: now(),
            finished: None,
            stages: vec![],
            reused: vec![],
        },
        Err(e) => return Err(e),
    };
    write_atomic(&dir.join("config.txt"), cfg.canonical().as_bytes())?;
    manifest.save(&dir)?;
    loop {
        let done: Vec<&str> = manifest.stages.iter().map(|s| s.name.as_str()).collect();
        let ready: Vec<&StageSpec> =
            spec.stages.iter().filter(|s| !done.contains(&s.name) && s.deps.iter().all(|d| done.contains(d))).collect();
        if ready.is_empty() {
            break;
        }
        let results: Vec<(&StageSpec, Result<StageOutput>)> = ready
            .par_iter()
            .map(|s| {
                let ctx = StageCtx { cfg, dir: &dir, stage: s.name, seed: stage_seed(cfg.seed, s.name) };
                (*s, (s.run)(&ctx))
            })
            .collect();
        for (s, out) in results {
            let out = out?;
            let mut files = Vec::new();
            for (f, bytes) in &out.files {
                let rel = format!("{}/{}", s.name, f);
                write_atomic(&dir.join(&rel), bytes)?;
                files.push(FileDigest::of(&rel, bytes));
            }
            manifest.stages.push(StageRecord { name: s.name.into(), seed: stage_seed(cfg.seed, s.name), files, checks: out.checks });
            manifest.save(&dir)?;
        }
    }
    // stages in preset order, whatever order they completed in
    manifest.stages.sort_by_key(|r| spec.stages.iter().position(|s| s.name == r.name));
    manifest.finished = Some(now());
    manifest.save(&dir)?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub preset: String,
    pub config_hash: String,
    pub stages: Vec<StageRecord>,
    pub missing: Vec<String>,
    pub all_checks_pass: bool,
}

/// Write `report.txt` and `report.json` next to the manifest. Output depends
/// only on the manifest and the files, so re-exporting is byte-identical.
pub fn export_report(dir: &Path) -> Result<Report> {
    let m = RunManifest::load(dir)?;
    let missing = m.verify(dir);
    let report = Report {
        preset: m.preset.clone(),
        config_hash: m.config_hash.clone(),
        stages: m.stages.clone(),
        missing: missing.clone(),
        all_checks_pass: m.all_checks_pass() && missing.is_empty(),
    };
    write_atomic(&dir.join("report.txt"), render_report(&m, &missing).as_bytes())?;
    let mut js = serde_json::to_string_pretty(&report)?;
    js.push('\n');
    write_atomic(&dir.join("report.json"), js.as_bytes())?;
    Ok(report)
}

pub fn render_report(m: &RunManifest, missing: &[String]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "preset   {}", m.preset);
    let _ = writeln!(s, "config   {}", m.config_hash);
    let _ = writeln!(s, "seed     {}", m.seed);
    let _ = writeln!(s, "version  {}", m.tool_version);
    if m.stages.is_empty() {
        s.push_str("\nno stages\n");
        return s;
    }
    for st in &m.stages {
        let _ = writeln!(s, "\n[{}]", st.name);
        for f in &st.files {
            let _ = writeln!(s, "  file  {}  {} bytes  sha256 {}", f.path, f.bytes, &f.sha256[..16]);
        }
        for c in &st.checks {
            let _ = writeln!(s, "  {}  {}  {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
    }
    if !missing.is_empty() {
        s.push_str("\nmissing stage outputs:\n");
        for f in missing {
            let _ = writeln!(s, "  {f}");
        }
    }
    let n_fail = m.checks().filter(|(_, c)| !c.pass).count();
    let _ = writeln!(s, "\n{} checks, {} failed{}", m.checks().count(), n_fail, if m.finished.is_none() { ", run incomplete" } else { "" });
    s
}

// ---------------------------------------------------------------- pipelines

/// m̂*: mean magnetization per site of heat-bath chains on the n-torus
/// started from all plus (they stay in the plus phase below T_c).
pub fn estimate_m_star(beta: f64, n: usize, burn_in: usize, sweeps: usize, seed: u64) -> Result<Estimate> {
    let g = lattice::build_lattice(&ShapeSpec::torus(2, n))?;
    let vol = (n * n) as f64;
    let mut ms = Vec::with_capacity(sweeps);
    samplers::glauber_sample(&g, &BoundaryCondition::Periodic, beta, 0.0, burn_in, sweeps, 1, RngStream::new(seed, 0), |s| {
        ms.push(s.iter().map(|&x| x as f64).sum::<f64>() / vol)
    })?;
    Ok(stats::mean_with_error(&ms))
}

#[derive(Clone, Debug, Serialize)]
pub struct DksParams {
    pub beta: f64,
    pub n: usize,
    pub samples: usize,
    pub chains: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub s: usize,
    pub m_star: f64,
}

/// Canonical (M = 0, or 1 on an odd box) Kawasaki chains in the Wulff box
/// n·K₁ with minus boundary, started from a Wulff droplet of half the volume.
pub fn dks_droplets(k1: &ConvexPolygon, p: &DksParams, seed: u64) -> Result<DropletReport> {
    let g = lattice::build_lattice(&ShapeSpec::WulffBox { n: p.n, polygon: k1.vertices().to_vec() })?;
    let ns = g.n_sites();
    let bc = BoundaryCondition::Minus;
    let kbox = k1.scale(p.n as f64);
    let chains = p.chains.max(1);
    let per = p.samples.div_ceil(chains);
    let runs = samplers::run_parallel(chains, seed, |_, rng| -> Result<Vec<SpinConfig>> {
        let init = contour::wulff_droplet_start(&g, &kbox, ns.div_ceil(2));
        let mut ch = Kawasaki::new(&g, &bc, &CouplingSpec::nn(p.beta), init, rng)?;
        let mut out = Vec::with_capacity(per);
        samplers::run_chain(&mut ch, p.burn_in, per * p.thin, p.thin, |c| out.push(SpinConfig { spins: c.spins().to_vec() }));
        Ok(out)
    });
    let mut samples = Vec::with_capacity(per * chains);
    for r in runs {
        samples.extend(r?);
    }
    samples.truncate(p.samples);
    let setup = DropletSetup { geometry: &g, bc: &bc, s: p.s, k1, m_star: p.m_star, a_n: p.m_star * ns as f64, shape_metrics: true };
    Ok(contour::droplet_statistics(&setup, &samples)?)
}

#[derive(Clone, Debug, Serialize)]
pub struct TightnessParams {
    pub beta: f64,
    pub n: usize,
    pub scales: Vec<usize>,
    pub zeta: f64,
    pub m_star: f64,
    pub samples: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub calibration: usize,
    pub delta: f64,
    pub perimeter_a: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TightnessRun {
    pub report: TightnessReport,
    /// Calibrated crossing-cluster density per scale.
    pub theta: Vec<f64>,
    /// Samples where ‖M_k − m*u_k‖₁ > ζ + 2ρ at some scale.
    pub bound_violations: usize,
    /// Smallest slack ζ + 2ρ − ‖M_k − m*u_k‖₁ over samples and scales.
    pub bound_min_slack: f64,
}

/// FK phase labels at scales k with ℓ = k − 3 on the n-torus.
pub fn fk_tightness(p: &TightnessParams, seed: u64) -> Result<TightnessRun> {
    let g = lattice::build_lattice(&ShapeSpec::torus(2, p.n))?;
    let fk = FkGraph::new(&g, &Wiring::Periodic)?;
    if let Some(&k) = p.scales.iter().find(|&&k| k < 3) {
        return Err(CoarseError::BadParameter(format!("scale k = {k} leaves no room for ℓ = k − 3")).into());
    }
    let mut ch = FkChain::new(fk.clone(), samplers::p_beta(p.beta), RngStream::new(seed, 0))?;
    for _ in 0..p.burn_in {
        ch.sweep();
    }
    let mut theta = vec![0.0; p.scales.len()];
    let n_cal = p.calibration.max(1);
    for _ in 0..n_cal {
        ch.sweep();
        for (t, &k) in theta.iter_mut().zip(&p.scales) {
            *t += coarse::calibrate_theta(&g, &fk, ch.bonds(), k, k - 3)? / n_cal as f64;
        }
    }
    let mut fields: Vec<Vec<PhaseLabelField>> = Vec::with_capacity(p.samples);
    let (mut bound_violations, mut bound_min_slack) = (0, f64::INFINITY);
    for _ in 0..p.samples {
        for _ in 0..p.thin.max(1) {
            ch.sweep();
        }
        let sigma = SpinConfig { spins: ch.spins().to_vec() };
        let mut row = Vec::with_capacity(p.scales.len());
        let mut ok = true;
        for (&k, &th) in p.scales.iter().zip(&theta) {
            let u = coarse::labels_fk(&g, &fk, ch.bonds(), &sigma, k, k - 3, p.zeta, th, p.m_star)?;
            let mk = coarse::local_magnetization(&g, &sigma, k)?;
            let slack = p.zeta + 2.0 * u.zero_fraction() - coarse::profile_label_distance(&mk, &u, p.m_star)?;
            bound_min_slack = bound_min_slack.min(slack);
            ok &= slack >= 0.0;
            row.push(u);
        }
        bound_violations += !ok as usize;
        fields.push(row);
    }
    let report = coarse::tightness_stats(&fields, p.delta, p.perimeter_a);
    Ok(TightnessRun { report, theta, bound_violations, bound_min_slack })
}

#[derive(Clone, Debug, Serialize)]
pub struct WulffFitParams {
    pub beta: f64,
    pub n: usize,
    pub volume: f64,
    pub m_star: f64,
    pub samples: usize,
    pub chains: usize,
    pub burn_in: usize,
    pub thin: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct WulffFit {
    pub n: usize,
    pub k: usize,
    pub residual: Estimate,
    pub residuals: Vec<f64>,
}

/// Canonical Kawasaki on the n-torus with a minus droplet of the given
/// volume fraction in the plus phase; per sample, min over translates of
/// ‖M_k/m* − χ‖₁ at k = log₂n − 3, χ = −1 on the translate of K₁ scaled to
/// that volume.
pub fn wulff_fit(k1: &ConvexPolygon, p: &WulffFitParams, seed: u64) -> Result<WulffFit> {
    if !p.n.is_power_of_two() || p.n < 16 {
        return Err(CoarseError::NotDyadic(p.n).into());
    }
    let g = lattice::build_lattice(&ShapeSpec::torus(2, p.n))?;
    let ns = p.n * p.n;
    let n_minus = (p.volume * ns as f64).round() as usize;
    let kbox = geometry::dilate(k1, n_minus as f64)?;
    let kbox = kbox.translate({
        let c = kbox.centroid();
        [p.n as f64 / 2.0 - c[0], p.n as f64 / 2.0 - c[1]]
    });
    let shape = geometry::dilate(k1, p.volume)?;
    let k = p.n.trailing_zeros() as usize - 3;
    let chains = p.chains.max(1);
    let per = p.samples.div_ceil(chains);
    let runs = samplers::run_parallel(chains, seed, |_, rng| -> Result<Vec<f64>> {
        let init = contour::wulff_droplet_start(&g, &kbox, n_minus).flipped();
        let mut ch = Kawasaki::new(&g, &BoundaryCondition::Periodic, &CouplingSpec::nn(p.beta), init, rng)?;
        let mut out = Vec::with_capacity(per);
        let mut err = None;
        samplers::run_chain(&mut ch, p.burn_in, per * p.thin, p.thin, |c| {
            let sigma = SpinConfig { spins: c.spins().to_vec() };
            match coarse::local_magnetization(&g, &sigma, k)
                .map_err(ExperimentError::from)
                .and_then(|m| Ok(geometry::best_translate_field(&m.field(p.m_star), &shape)?.residual))
            {
                Ok(r) => out.push(r),
                Err(e) => err = Some(e),
            }
        });
        err.map_or(Ok(out), Err)
    });
    let mut residuals = Vec::new();
    for r in runs {
        residuals.extend(r?);
    }
    residuals.truncate(p.samples);
    Ok(WulffFit { n: p.n, k, residual: stats::mean_with_error(&residuals), residuals })
}

#[derive(Clone, Debug, Serialize)]
pub struct GaussianityParams {
    pub beta: f64,
    pub n: usize,
    pub s: usize,
    pub chains: usize,
    pub burn_in: usize,
    pub sweeps: usize,
    pub thin: usize,
    /// Sweeps of the unrestricted torus run that gives χ̂.
    pub chi_sweeps: usize,
    pub bootstrap: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GaussianityRun {
    pub samples: usize,
    pub mean: f64,
    pub variance: Estimate,
    pub skewness: Estimate,
    pub excess_kurtosis: Estimate,
    pub chi: Susceptibility,
    /// Var(M_A) / (χ̂ |A|).
    pub variance_ratio: Estimate,
}

/// Moments of M_A, A the n×n box, under the minus-boundary restricted phase.
pub fn restricted_gaussianity(p: &GaussianityParams, seed: u64) -> Result<GaussianityRun> {
    let g = samplers::square(p.n);
    let chains = p.chains.max(1);
    let runs = samplers::run_parallel(chains, seed, |_, rng| -> Result<Vec<f64>> {
        let mut ms = Vec::new();
        samplers::restricted_sample(&g, p.beta, p.s, p.burn_in, p.sweeps, p.thin, rng, |s| {
            ms.push(s.iter().map(|&x| x as f64).sum())
        })?;
        Ok(ms)
    });
    let mut ms = Vec::new();
    for r in runs {
        ms.extend(r?);
    }
    let vol = p.n * p.n;
    let torus = lattice::build_lattice(&ShapeSpec::torus(2, p.n))?;
    let mut mt = Vec::with_capacity(p.chi_sweeps);
    samplers::glauber_sample(&torus, &BoundaryCondition::Periodic, p.beta, 0.0, p.burn_in, p.chi_sweeps, 1, RngStream::new(seed, chains as u64), |s| {
        mt.push(s.iter().map(|&x| x as f64).sum())
    })?;
    let chi = samplers::susceptibility_estimate(&mt, vol);
    let mut rng = RngStream::new(seed, chains as u64 + 1);
    let variance = stats::bootstrap(&ms, p.bootstrap, &mut rng, stats::variance);
    let skewness = stats::bootstrap(&ms, p.bootstrap, &mut rng, stats::skewness);
    let excess_kurtosis = stats::bootstrap(&ms, p.bootstrap, &mut rng, stats::excess_kurtosis);
    let denom = chi.chi.value * vol as f64;
    let ratio = variance.value / denom;
    let rel = ((variance.err / variance.value).powi(2) + (chi.chi.err / chi.chi.value).powi(2)).sqrt();
    Ok(GaussianityRun {
        samples: ms.len(),
        mean: stats::mean(&ms),
        variance,
        skewness,
        excess_kurtosis,
        chi,
        variance_ratio: Estimate::new(ratio, ratio * rel),
    })
}

/// The convexified table for the shapes, and its unit-area Wulff shape.
pub fn unit_wulff(tau: &DirectionalTension) -> Result<ConvexPolygon> {
    Ok(geometry::normalize_unit_volume(&geometry::wulff_shape(tau)?))
}

// ---------------------------------------------------------------- stages

fn csv_row(v: &[String]) -> String {
    let mut s = v.join(",");
    s.push('\n');
    s
}

fn stage_identities(ctx: &StageCtx) -> Result<StageOutput> {
    let side = ctx.cfg.usize("max_side")? as i32;
    let domains = exact::simply_connected_subsets(side, side);
    let mut csv = String::from("beta,domains,duality_max_rel_err,random_line_pairs,random_line_max_rel_err\n");
    let mut out = StageOutput::default();
    for beta in ctx.cfg.f64_list("betas")? {
        let bs = tension::dual_beta(beta)?;
        let rows: Vec<(f64, usize, f64)> = domains
            .par_iter()
            .map(|d| -> Result<(f64, usize, f64)> {
                let dual = exact::verify_duality(d, beta)?.max_rel_err;
                let o = exact::RandomLineOracle::new(exact::DualDomain::from_sites(d)?, bs);
                let r = exact::check_random_line(&o);
                Ok((dual, r.pairs, r.max_rel_err))
            })
            .collect::<Result<_>>()?;
        let dual = rows.iter().map(|r| r.0).fold(0.0, f64::max);
        let pairs: usize = rows.iter().map(|r| r.1).sum();
        let line = rows.iter().map(|r| r.2).fold(0.0, f64::max);
        csv += &csv_row(&[beta.to_string(), domains.len().to_string(), format!("{dual:e}"), pairs.to_string(), format!("{line:e}")]);
        out = out
            .check(check(&format!("duality beta={beta}"), dual < 1e-10, format!("max relative error {dual:.2e} over {} domains", domains.len())))
            .check(check(&format!("random line beta={beta}"), line < 1e-10, format!("max relative error {line:.2e} over {pairs} pairs")));
    }
    Ok(out.text("identities.csv", csv))
}

fn stage_inequalities(ctx: &StageCtx) -> Result<StageOutput> {
    let side = ctx.cfg.usize("max_side")? as i32;
    let domains = exact::simply_connected_subsets(side, side);
    let mut csv = String::from("beta,supermultiplicative_checked,supermultiplicative_violations,subadditive_checked,subadditive_violations\n");
    let mut out = StageOutput::default();
    for beta in ctx.cfg.f64_list("betas")? {
        let bs = tension::dual_beta(beta)?;
        let reps: Vec<[usize; 4]> = domains
            .par_iter()
            .map(|d| -> Result<[usize; 4]> {
                let o = exact::RandomLineOracle::new(exact::DualDomain::from_sites(d)?, bs);
                let a = exact::check_supermultiplicativity(&o);
                let b = exact::check_subadditivity(&o);
                Ok([a.checked, a.violations, b.checked, b.violations])
            })
            .collect::<Result<_>>()?;
        let t = reps.iter().fold([0; 4], |acc, r| [acc[0] + r[0], acc[1] + r[1], acc[2] + r[2], acc[3] + r[3]]);
        csv += &csv_row(&[beta.to_string(), t[0].to_string(), t[1].to_string(), t[2].to_string(), t[3].to_string()]);
        out = out.check(check(
            &format!("q-weight inequalities beta={beta}"),
            t[1] == 0 && t[3] == 0,
            format!("{} + {} violations in {} + {} checks", t[1], t[3], t[0], t[2]),
        ));
    }
    Ok(out.text("inequalities.csv", csv))
}

fn table_method(cfg: &ExperimentConfig, seed: u64) -> Result<TableMethod> {
    if cfg.params.get("method").map(String::as_str) == Some("isotropic") {
        return Ok(TableMethod::Isotropic(1.0));
    }
    Ok(TableMethod::DualDecay {
        widths: cfg.usize_list("widths")?,
        min_distance: cfg.f64("min_distance")?,
        max_distance: cfg.f64("max_distance")?,
        decay: DecayConfig {
            torus: cfg.usize("decay_torus")?,
            chains: cfg.usize("decay_chains")?,
            burn_in: cfg.usize("decay_burn_in")?,
            sweeps: cfg.usize("decay_sweeps")?,
            oz: cfg.oz("oz")?,
            seed,
            ..DecayConfig::default()
        },
    })
}

fn tension_csv(t: &tension::TensionTable) -> String {
    let mut s = String::from("theta,tau_raw,err,tau_convexified\n");
    for i in 0..t.raw.len() {
        s += &csv_row(&[
            format!("{:.12}", t.raw.directions[i]),
            format!("{:.12}", t.raw.tau[i]),
            format!("{:.12}", t.raw.err[i]),
            format!("{:.12}", t.convexified.tau[i]),
        ]);
    }
    s
}

fn stage_table(ctx: &StageCtx) -> Result<StageOutput> {
    let beta = ctx.cfg.f64("beta")?;
    let t = tension::tension_table(beta, ctx.cfg.usize("directions")?, &table_method(ctx.cfg, ctx.seed)?)?;
    let mut conv = t.convexified.to_json()?;
    conv.push('\n');
    StageOutput::default().json("table.json", &t).map(|o| o.text("tension.csv", tension_csv(&t)).text("convexified.json", conv))
}

fn stage_table_checks(ctx: &StageCtx) -> Result<StageOutput> {
    let tau = DirectionalTension::from_json(&ctx.read("table", "convexified.json")?)?;
    let margins = tau.convexity_margins().into_iter().fold(f64::INFINITY, f64::min);
    let stiff = tau.stiffness().into_iter().fold(f64::INFINITY, f64::min);
    let (_, strong) = tau.strong_triangle_margin(&[1.0, 2.0, 3.0]);
    #[derive(Serialize)]
    struct Scan {
        min_convexity_margin: f64,
        min_stiffness: f64,
        min_strong_triangle_margin: f64,
        anisotropy: f64,
    }
    let scan = Scan { min_convexity_margin: margins, min_stiffness: stiff, min_strong_triangle_margin: strong, anisotropy: tau.anisotropy() };
    StageOutput::default().json("scan.json", &scan).map(|o| {
        o.check(check("convexity margins", margins >= -1e-12, format!("min {margins:.3e}")))
            .check(check("stiffness", stiff > 0.0, format!("min {stiff:.4}")))
            .check(check("strong triangle", strong >= -1e-12, format!("min {strong:.3e}")))
    })
}

fn stage_gallery(ctx: &StageCtx) -> Result<StageOutput> {
    let k = ctx.cfg.usize("directions")?;
    let tau = match ctx.cfg.get("tau") {
        "isotropic" => DirectionalTension::constant(1.0, k)?,
        "l1" => DirectionalTension::uniform(k, |t| t.cos().abs() + t.sin().abs(), "l1")?,
        _ => {
            let p = PathBuf::from(ctx.cfg.get("tau_file"));
            if p.as_os_str().is_empty() {
                return Err(ctx.err("tau = file needs tau_file"));
            }
            DirectionalTension::from_json(&std::fs::read_to_string(&p).map_err(io_err(&p))?)?
        }
    };
    let tau = tau.convexify()?;
    let k1 = unit_wulff(&tau)?;
    let w = geometry::surface_energy(k1.vertices(), true, &tau).value;
    let mut csv = String::from("x,y\n");
    for v in k1.vertices() {
        csv += &csv_row(&[format!("{:.12}", v[0]), format!("{:.12}", v[1])]);
    }
    #[derive(Serialize)]
    struct Gallery {
        vertices: usize,
        area: f64,
        energy: f64,
        energy_over_2_sqrt_pi: f64,
        anisotropy: f64,
    }
    let g = Gallery {
        vertices: k1.vertices().len(),
        area: k1.area(),
        energy: w,
        energy_over_2_sqrt_pi: w / (2.0 * std::f64::consts::PI.sqrt()),
        anisotropy: tau.anisotropy(),
    };
    let mut out = StageOutput::default()
        .text("shape.csv", csv)
        .json("report.json", &g)?
        .check(check("unit area", (g.area - 1.0).abs() < 1e-9, format!("area {:.12}", g.area)));
    if ctx.cfg.get("tau") == "isotropic" {
        let dev = (g.energy_over_2_sqrt_pi - 1.0) * 2.0 * std::f64::consts::PI.sqrt();
        out = out.check(check("disk energy", dev.abs() < 1e-3, format!("W - 2 sqrt(pi) = {dev:.2e}")));
    }
    Ok(out)
}

fn stage_mstar(ctx: &StageCtx) -> Result<StageOutput> {
    let c = ctx.cfg;
    let m = estimate_m_star(c.f64("beta")?, c.usize("mstar_n")?, c.usize("mstar_burn_in")?, c.usize("mstar_sweeps")?, ctx.seed)?;
    StageOutput::default().json("mstar.json", &m)
}

fn stage_droplets(ctx: &StageCtx) -> Result<StageOutput> {
    let c = ctx.cfg;
    let tau = DirectionalTension::from_json(&ctx.read("tension", "convexified.json")?)?;
    let m: Estimate = ctx.read_json("mstar", "mstar.json")?;
    let n = c.usize("n")?;
    let p = DksParams {
        beta: c.f64("beta")?,
        n,
        samples: c.usize("samples")?,
        chains: c.usize("chains")?,
        burn_in: c.usize("burn_in")?,
        thin: c.usize("thin")?,
        s: (c.f64("s_factor")? * (n as f64).log2()).floor() as usize,
        m_star: m.value,
    };
    let r = dks_droplets(&unit_wulff(&tau)?, &p, ctx.seed)?;
    let mut csv = String::from("sample,n_contours,n_large,largest_len,largest_area,area_ratio,hausdorff,sym_diff\n");
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.6}"));
    for (i, s) in r.samples.iter().enumerate() {
        csv += &csv_row(&[
            i.to_string(),
            s.n_contours.to_string(),
            s.n_large.to_string(),
            s.largest_len.to_string(),
            s.largest_area.map_or(String::new(), |a| a.to_string()),
            opt(s.area_ratio),
            opt(s.hausdorff),
            opt(s.sym_diff),
        ]);
    }
    let single = r.single_large_frequency;
    let area = r.median_area_ratio;
    Ok(StageOutput::default()
        .text("samples.csv", csv)
        .json("report.json", &r)?
        .json("params.json", &p)?
        .check(check("single s-large contour", single >= 0.8, format!("frequency {single:.3}, 95% CI {:.3}..{:.3}", r.single_large_ci.0, r.single_large_ci.1)))
        .check(check("enclosed area", (area - 1.0).abs() <= 0.15, format!("median ratio {area:.4}"))))
}

fn stage_tightness(ctx: &StageCtx) -> Result<StageOutput> {
    let c = ctx.cfg;
    let m: Estimate = ctx.read_json("mstar", "mstar.json")?;
    let p = TightnessParams {
        beta: c.f64("beta")?,
        n: c.usize("n")?,
        scales: c.usize_list("scales")?,
        zeta: c.f64("zeta_factor")? * m.value,
        m_star: m.value,
        samples: c.usize("samples")?,
        burn_in: c.usize("burn_in")?,
        thin: c.usize("thin")?,
        calibration: c.usize("calibration")?,
        delta: c.f64("delta")?,
        perimeter_a: c.f64("perimeter_a")?,
    };
    let r = fk_tightness(&p, ctx.seed)?;
    let mut csv = String::from("k,rho,rho_err,pair_zero,pair_zero_err,assumption_b_violations,outside_compact\n");
    for s in &r.report.scales {
        csv += &csv_row(&[
            s.k.to_string(),
            format!("{:.6}", s.rho.value),
            format!("{:.6}", s.rho.err),
            format!("{:.6}", s.pair_zero.value),
            format!("{:.6}", s.pair_zero.err),
            s.assumption_b_violations.to_string(),
            format!("{:.6}", s.outside_compact),
        ]);
    }
    let b: usize = r.report.scales.iter().map(|s| s.assumption_b_violations).sum();
    let rhos: Vec<String> = r.report.scales.iter().map(|s| format!("{:.4}", s.rho.value)).collect();
    Ok(StageOutput::default()
        .text("scales.csv", csv)
        .json("tightness.json", &r)?
        .check(check("rho decreasing", r.report.rho_decreasing, format!("rho = {}", rhos.join(", "))))
        .check(check("assumption B", b == 0, format!("{b} violations")))
        .check(check("label bound", r.bound_violations == 0, format!("min slack {:.4}", r.bound_min_slack))))
}

fn stage_wulff_fit(ctx: &StageCtx) -> Result<StageOutput> {
    let c = ctx.cfg;
    let tau = DirectionalTension::from_json(&ctx.read("tension", "convexified.json")?)?;
    let m: Estimate = ctx.read_json("mstar", "mstar.json")?;
    let k1 = unit_wulff(&tau)?;
    let mut fits = Vec::new();
    for n in c.usize_list("sizes")? {
        let p = WulffFitParams {
            beta: c.f64("beta")?,
            n,
            volume: c.f64("volume")?,
            m_star: m.value,
            samples: c.usize("samples")?,
            chains: c.usize("chains")?,
            burn_in: c.usize("burn_in")?,
            thin: c.usize("thin")?,
        };
        fits.push(wulff_fit(&k1, &p, stage_seed(ctx.seed, &n.to_string()))?);
    }
    let mut csv = String::from("n,k,residual,err\n");
    for f in &fits {
        csv += &csv_row(&[f.n.to_string(), f.k.to_string(), format!("{:.6}", f.residual.value), format!("{:.6}", f.residual.err)]);
    }
    let dec = fits.windows(2).all(|w| w[1].residual.value < w[0].residual.value);
    let vals: Vec<String> = fits.iter().map(|f| format!("{:.4}", f.residual.value)).collect();
    Ok(StageOutput::default()
        .text("fit.csv", csv)
        .json("fit.json", &fits)?
        .check(check("residual decreases with N", dec, vals.join(" > "))))
}

fn stage_tau_star(ctx: &StageCtx) -> Result<StageOutput> {
    let t = tension::tension_axis_transfer(ctx.cfg.f64("beta")?, &ctx.cfg.usize_list("tm_widths")?, &[])?;
    StageOutput::default().json("transfer.json", &t)?.json("tau_star.json", &Estimate::new(t.tau, t.drift.abs()))
}

fn wall_config(c: &ExperimentConfig, seed: u64) -> Result<WallConfig> {
    Ok(WallConfig {
        width: c.usize("width")?,
        height: c.usize("height")?,
        periodic: true,
        chains: c.usize("chains")?,
        burn_in: c.usize("burn_in")?,
        sweeps: c.usize("sweeps")?,
        tol: c.f64("tol")?,
        max_depth: c.usize("max_depth")?,
        seed,
    })
}

fn stage_wall(ctx: &StageCtx) -> Result<StageOutput> {
    let c = ctx.cfg;
    let tau_star: Estimate = ctx.read_json("tau_star", "tau_star.json")?;
    let w = tension::wall_tension_curve(c.f64("beta")?, &c.f64_list("etas")?, &wall_config(c, ctx.seed)?, Some(tau_star))?;
    let z = c.f64("z")?;
    let mut csv = String::from("eta,tau_bd,err,converged\n");
    for p in &w.points {
        csv += &csv_row(&[p.eta.to_string(), format!("{:.6}", p.tau_bd.value), format!("{:.6}", p.tau_bd.err), p.converged.to_string()]);
    }
    let (mono, concave) = tension::wall_shape_checks(&w.points, z);
    let zero_ok = w.points.iter().filter(|p| p.eta == 0.0).all(|p| p.tau_bd.value == 0.0);
    let bounded = w.points.iter().all(|p| p.tau_bd.value.abs() <= tau_star.value + z * (p.tau_bd.err + tau_star.err));
    Ok(StageOutput::default()
        .text("wetting.csv", csv)
        .json("wall.json", &w)?
        .check(check("zero at eta = 0", zero_ok, "exact by construction".into()))
        .check(check("nondecreasing", mono, format!("within {z} error bars")))
        .check(check("concave", concave, format!("within {z} error bars")))
        .check(check("bounded by tau*", bounded, format!("tau* = {:.4}", tau_star.value))))
}

fn stage_wetting_shapes(ctx: &StageCtx) -> Result<StageOutput> {
    #[derive(Deserialize)]
    struct Pt {
        eta: f64,
        tau_bd: Estimate,
    }
    #[derive(Deserialize)]
    struct Curve {
        points: Vec<Pt>,
        tau_star: Option<Estimate>,
    }
    let w: Curve = ctx.read_json("wall", "wall.json")?;
    let ts = w.tau_star.ok_or_else(|| ctx.err("wall curve has no tau*"))?;
    // isotropic tension at the measured axis value
    let tau = DirectionalTension::constant(ts.value, 360)?;
    let z = ctx.cfg.f64("z")?;
    let mut regimes = String::from("eta,tau_bd,regime,area,wall\n");
    let mut shapes = String::from("eta,x,y\n");
    for p in &w.points {
        let tol = z * (p.tau_bd.err + ts.err);
        let bd = p.tau_bd.value.clamp(-ts.value, ts.value);
        let shape = geometry::winterbottom_shape(&tau, bd, tol.max(1e-9))?.rescaled(1.0)?;
        let regime = match shape.regime() {
            WettingRegime::Free => "free",
            WettingRegime::Partial => "partial",
            WettingRegime::Drying => "drying",
        };
        match &shape {
            Winterbottom::Shape { polygon, wall, .. } => {
                regimes += &csv_row(&[p.eta.to_string(), format!("{:.6}", p.tau_bd.value), regime.into(), format!("{:.6}", polygon.area()), format!("{wall:.6}")]);
                for v in polygon.vertices() {
                    shapes += &csv_row(&[p.eta.to_string(), format!("{:.9}", v[0]), format!("{:.9}", v[1])]);
                }
            }
            Winterbottom::Flat(f) => {
                regimes += &csv_row(&[p.eta.to_string(), format!("{:.6}", p.tau_bd.value), regime.into(), format!("{:.6}", f.volume), String::new()]);
            }
        }
    }
    Ok(StageOutput::default().text("regimes.csv", regimes).text("shapes.csv", shapes))
}

fn stage_interface_rate(ctx: &StageCtx) -> Result<StageOutput> {
    let c = ctx.cfg;
    let r = tension::fk_interface_probability(
        c.f64("beta")?,
        c.usize("d")?,
        c.usize("n")?,
        c.f64("eps")?,
        c.usize("burn_in")?,
        c.usize("samples")?,
        ctx.seed,
    )?;
    StageOutput::default().json("rate.json", &r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(label: &str) -> tempfile::TempDir {
        tempfile::Builder::new().prefix(label).tempdir().unwrap()
    }

    #[test]
    fn every_preset_has_unique_keys_and_valid_defaults() {
        for p in presets() {
            let mut names: Vec<&str> = p.keys.iter().map(|k| k.name).collect();
            names.sort();
            let n = names.len();
            names.dedup();
            assert_eq!(n, names.len(), "{}", p.name);
            for k in p.keys {
                assert!(k.kind.accepts(k.default) || k.kind == Kind::Text, "{} {}", p.name, k.name);
                assert!(!["seed", "out", "preset"].contains(&k.name));
            }
            for s in p.stages {
                assert!(s.deps.iter().all(|d| p.stages.iter().any(|t| t.name == *d)));
            }
        }
        assert_eq!(presets().len(), 8);
    }

    #[test]
    fn parse_round_trips_through_canonical_form() {
        let c = ExperimentConfig::parse("# a run\npreset = dks-droplet\nn = 32  # smaller\nseed=9\nout = /tmp/x\n").unwrap();
        assert_eq!(c.usize("n").unwrap(), 32);
        assert_eq!(c.seed, 9);
        assert_eq!(c.out_dir.as_deref(), Some(Path::new("/tmp/x")));
        let back = ExperimentConfig::parse(&c.canonical()).unwrap();
        assert_eq!(back.canonical(), c.canonical());
        assert_eq!(back.hash(), c.hash());
        assert!(!c.canonical().contains("/tmp/x"));
    }

    #[test]
    fn config_errors_are_specific() {
        let e = ExperimentConfig::parse("preset = dks-droplet\nzeta = 1\n").unwrap_err();
        assert!(matches!(e, ExperimentError::UnknownKey { ref key, .. } if key == "zeta"), "{e}");
        assert!(e.to_string().contains("beta"));
        assert!(matches!(ExperimentConfig::parse("preset = nope\n"), Err(ExperimentError::UnknownPreset { .. })));
        assert!(matches!(ExperimentConfig::parse("preset = dks-droplet\nn = 3.5\n"), Err(ExperimentError::BadValue { .. })));
        assert!(matches!(ExperimentConfig::parse("n = 3\n"), Err(ExperimentError::Parse { .. })));
        assert!(matches!(ExperimentConfig::parse("preset = dks-droplet\nn = 3\nn = 4\n"), Err(ExperimentError::DuplicateKey(_))));
        assert!(matches!(ExperimentConfig::parse("preset = dks-droplet\njunk\n"), Err(ExperimentError::Parse { line: 2, .. })));
        let c = ExperimentConfig::new("wulff-gallery").unwrap();
        assert!(matches!(run_preset("dks-droplet", &c), Err(ExperimentError::PresetMismatch { .. })));
        assert!(matches!(run_preset("wulff-gallery", &c), Err(ExperimentError::NoOutputDir)));
    }

    #[test]
    fn stage_seeds_differ_by_name_and_seed() {
        assert_ne!(stage_seed(1, "a"), stage_seed(1, "b"));
        assert_ne!(stage_seed(1, "a"), stage_seed(2, "a"));
        assert_eq!(stage_seed(3, "x"), stage_seed(3, "x"));
    }

    fn gallery(dir: &Path, tau: &str) -> RunManifest {
        let mut c = ExperimentConfig::new("wulff-gallery").unwrap();
        c.set("tau", tau).unwrap();
        c.out_dir = Some(dir.to_path_buf());
        run_preset("wulff-gallery", &c).unwrap()
    }

    #[test]
    fn isotropic_gallery_is_the_disk() {
        let d = tmp("gallery");
        let m = gallery(d.path(), "isotropic");
        let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.path().join("shape/report.json")).unwrap()).unwrap();
        let w = r["energy"].as_f64().unwrap();
        assert!((w - 2.0 * std::f64::consts::PI.sqrt()).abs() < 1e-3, "{w}");
        assert!((r["area"].as_f64().unwrap() - 1.0).abs() < 1e-12);
        assert!(m.verify(d.path()).is_empty());
        assert!(m.finished.is_some());
    }

    #[test]
    fn identical_configs_give_identical_digests() {
        let (a, b) = (tmp("det-a"), tmp("det-b"));
        let run = |dir: &Path| {
            let mut c = ExperimentConfig::new("duality-selftest").unwrap();
            c.set("max_side", "2").unwrap();
            c.set("betas", "0.4,0.9").unwrap();
            c.out_dir = Some(dir.to_path_buf());
            run_preset("duality-selftest", &c).unwrap()
        };
        let (ma, mb) = (run(a.path()), run(b.path()));
        assert_eq!(ma.stages, mb.stages);
        assert!(ma.all_checks_pass());
    }

    #[test]
    fn interrupted_runs_resume_and_reports_are_idempotent() {
        let d = tmp("resume");
        let mut c = ExperimentConfig::new("duality-selftest").unwrap();
        c.set("max_side", "2").unwrap();
        c.out_dir = Some(d.path().to_path_buf());
        let full = run_preset("duality-selftest", &c).unwrap();
        // drop one stage record and damage the other stage's output
        let mut m = full.clone();
        m.stages.retain(|s| s.name == "identities");
        m.finished = None;
        m.save(d.path()).unwrap();
        let again = run_preset("duality-selftest", &c).unwrap();
        assert_eq!(again.reused, vec!["identities".to_string()]);
        assert_eq!(again.stages, full.stages);
        std::fs::write(d.path().join("identities/identities.csv"), "x").unwrap();
        let third = run_preset("duality-selftest", &c).unwrap();
        assert_eq!(third.reused, vec!["inequalities".to_string()]);
        assert_eq!(third.stages, full.stages);

        let r1 = export_report(d.path()).unwrap();
        let b1 = std::fs::read(d.path().join("report.txt")).unwrap();
        let j1 = std::fs::read(d.path().join("report.json")).unwrap();
        let r2 = export_report(d.path()).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(b1, std::fs::read(d.path().join("report.txt")).unwrap());
        assert_eq!(j1, std::fs::read(d.path().join("report.json")).unwrap());
        assert!(r1.missing.is_empty() && r1.all_checks_pass);

        std::fs::remove_file(d.path().join("inequalities/inequalities.csv")).unwrap();
        let r3 = export_report(d.path()).unwrap();
        assert_eq!(r3.missing.len(), 1);
        assert!(!r3.all_checks_pass);
        assert!(std::fs::read_to_string(d.path().join("report.txt")).unwrap().contains("missing"));
    }

    #[test]
    fn a_changed_config_does_not_reuse_a_directory() {
        let d = tmp("mismatch");
        gallery(d.path(), "isotropic");
        let mut c = ExperimentConfig::new("wulff-gallery").unwrap();
        c.set("tau", "l1").unwrap();
        c.out_dir = Some(d.path().to_path_buf());
        assert!(matches!(run_preset("wulff-gallery", &c), Err(ExperimentError::ConfigMismatch { .. })));
    }

    #[test]
    fn empty_manifest_reports_no_stages() {
        let m = RunManifest {
            preset: "wulff-gallery".into(),
            config_hash: "0".into(),
            seed: 1,
            tool_version: "0".into(),
            started: 0,
            finished: None,
            stages: vec![],
            reused: vec![],
        };
        let d = tmp("empty");
        m.save(d.path()).unwrap();
        let r = export_report(d.path()).unwrap();
        assert!(r.stages.is_empty());
        assert!(std::fs::read_to_string(d.path().join("report.txt")).unwrap().contains("no stages"));
    }

    #[test]
    fn l1_gallery_is_the_square() {
        let d = tmp("square");
        gallery(d.path(), "l1");
        let csv = std::fs::read_to_string(d.path().join("shape/shape.csv")).unwrap();
        let pts: Vec<[f64; 2]> = csv
            .lines()
            .skip(1)
            .map(|l| {
                let (x, y) = l.split_once(',').unwrap();
                [x.parse().unwrap(), y.parse().unwrap()]
            })
            .collect();
        assert!(pts.len() >= 4);
        assert!(pts.iter().all(|p| (p[0].abs().max(p[1].abs()) - 0.5).abs() < 1e-9), "{pts:?}");
        for c in [[0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5], [0.5, -0.5]] {
            assert!(pts.iter().any(|p| (p[0] - c[0]).abs() + (p[1] - c[1]).abs() < 1e-9));
        }
    }
}
