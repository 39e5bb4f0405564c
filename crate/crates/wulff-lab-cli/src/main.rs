//! `wulff-lab`: command-line front end.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 a check failed.

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use wulff_lab::coarse::{self, PhaseLabelField};
use wulff_lab::contour::{self, DropletSetup};
use wulff_lab::exact;
use wulff_lab::experiments::{self, ExperimentConfig, FileDigest};
use wulff_lab::geometry::{self, ConvexPolygon, Pt};
use wulff_lab::lattice::{
    self, decode_snapshot, encode_snapshot, BondConfig, BoundaryCondition, CouplingSpec, FkGraph, Geometry, ShapeSpec,
    SnapshotHeader, SpinConfig, Wiring,
};
use wulff_lab::rng::RngStream;
use wulff_lab::samplers::{self, FkChain, Glauber, Kawasaki, Restricted, SamplerReport, SpinChain};
use wulff_lab::tension::{self, DecayConfig, DirectionalTension, OzTerm, TableMethod};

/// Default output root for `run` when neither the config nor `--out` names one.
const OUT_ENV: &str = "WULFF_LAB_OUT";

#[derive(Parser)]
#[command(name = "wulff-lab", version, about = "Lattice samplers, surface tension and crystal shapes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Exact law of a small instance as JSON (configuration index -> probability)
    Enumerate(EnumerateArgs),
    /// Run a sampler and write snapshots plus a manifest
    Sample(SampleArgs),
    /// Directional surface tension table (JSON)
    Tension(TensionArgs),
    /// Unit-area Wulff shape (vertex CSV) and energy report for a tension table
    Wulff(WulffArgs),
    /// Hausdorff and symmetric-difference distances between two shape files
    ShapeCompare(CompareArgs),
    /// Analyse a snapshot directory
    #[command(subcommand)]
    Analyze(Analyze),
    /// Run an experiment preset
    Run(RunArgs),
    /// Write report.txt/report.json for a run directory and print the summary
    Report {
        dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Glauber,
    Kawasaki,
    Fk,
    Restricted,
}

#[derive(Clone, Copy, ValueEnum)]
enum ShapeKind {
    Torus,
    Box,
    Cylinder,
    Slab,
    Wulff,
}

#[derive(Clone, Copy, ValueEnum)]
enum Bc {
    Plus,
    Minus,
    Free,
    Periodic,
    Wall,
}

#[derive(Args)]
struct Domain {
    #[arg(long, value_enum, default_value = "box")]
    shape: ShapeKind,
    /// Linear size (for wulff: the box is N·K₁)
    #[arg(long = "N", default_value_t = 3)]
    n: usize,
    /// Height for cylinder and slab (defaults to N)
    #[arg(long = "M")]
    m: Option<usize>,
    /// Tension table defining K₁ for the wulff shape (default: isotropic)
    #[arg(long)]
    tension_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "free")]
    bc: Bc,
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long, default_value_t = 0.0)]
    h: f64,
    /// Wall field (bc = wall)
    #[arg(long, default_value_t = 0.0)]
    eta: f64,
}

#[derive(Args)]
struct EnumerateArgs {
    #[command(flatten)]
    domain: Domain,
    /// gibbs, or fk for the random-cluster law over edge subsets
    #[arg(long, default_value = "gibbs", value_parser = ["gibbs", "fk"])]
    law: String,
    #[arg(long, default_value_t = 2.0)]
    q: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long, value_enum, default_value = "glauber")]
    model: Model,
    #[command(flatten)]
    domain: Domain,
    /// Total magnetization for kawasaki
    #[arg(long)]
    constraint: Option<i64>,
    /// Contour cutoff s for restricted (default 8·log2 N)
    #[arg(long)]
    cutoff: Option<usize>,
    #[arg(long, default_value_t = 100)]
    burn_in: usize,
    #[arg(long, default_value_t = 1000)]
    sweeps: usize,
    #[arg(long, default_value_t = 10)]
    thin: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TensionArgs {
    #[arg(long)]
    beta: f64,
    #[arg(long, default_value_t = 16)]
    directions: usize,
    #[arg(long, default_value = "dual-decay", value_parser = ["dual-decay", "isotropic"])]
    method: String,
    #[arg(long, value_delimiter = ',', default_value = "4,6,8,10,12,14,16")]
    widths: Vec<usize>,
    #[arg(long, default_value_t = 3.0)]
    min_distance: f64,
    #[arg(long, default_value_t = 16.0)]
    max_distance: f64,
    #[arg(long, default_value_t = 64)]
    torus: usize,
    #[arg(long, default_value_t = 32)]
    chains: usize,
    #[arg(long, default_value_t = 50)]
    burn_in: usize,
    #[arg(long, default_value_t = 600)]
    sweeps: usize,
    /// free, off, or a fixed log-term coefficient
    #[arg(long, default_value = "free")]
    oz: String,
    /// Emit the raw table instead of its convexification
    #[arg(long)]
    raw: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WulffArgs {
    /// Tension table JSON; omit for an analytic tension
    #[arg(long)]
    tension_file: Option<PathBuf>,
    #[arg(long, default_value = "isotropic", value_parser = ["isotropic", "l1"])]
    tau: String,
    #[arg(long, default_value_t = 720)]
    directions: usize,
    /// Area of the output shape
    #[arg(long, default_value_t = 1.0)]
    volume: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    a: PathBuf,
    b: PathBuf,
    /// Also report distances after the best translate of b
    #[arg(long)]
    translate: bool,
}

#[derive(Subcommand)]
enum Analyze {
    /// Contours, s-large counts and Wulff distances per snapshot
    Contours(ContoursArgs),
    /// Mesoscopic phase labels and tightness statistics
    Labels(LabelsArgs),
}

#[derive(Args)]
struct ContoursArgs {
    dir: PathBuf,
    /// s (default 8·log2 N)
    #[arg(long)]
    cutoff: Option<usize>,
    /// Tension table for the Wulff target (default: isotropic)
    #[arg(long)]
    tension_file: Option<PathBuf>,
    /// Compute translate-optimized distances to the Wulff shape
    #[arg(long)]
    wulff_target: bool,
    /// m* (default: the exact planar value at the snapshot β)
    #[arg(long)]
    m_star: Option<f64>,
}

#[derive(Args)]
struct LabelsArgs {
    dir: PathBuf,
    #[arg(long, default_value = "averaged", value_parser = ["averaged", "fk", "percolation"])]
    scheme: String,
    #[arg(long, value_delimiter = ',', default_value = "3")]
    k: Vec<usize>,
    /// ζ as a fraction of m*
    #[arg(long, default_value_t = 0.2)]
    zeta: f64,
    /// ℓ (default k − 3)
    #[arg(long)]
    ell: Option<usize>,
    /// Θ for the FK schemes (default: calibrated on the first snapshot)
    #[arg(long)]
    theta_ref: Option<f64>,
    #[arg(long)]
    m_star: Option<f64>,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    #[arg(long, default_value_t = 4.0)]
    perimeter_a: f64,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a key: --set n=32
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// List presets and their keys instead of running
    #[arg(long)]
    list: bool,
}

type Res<T> = Result<T, Box<dyn std::error::Error>>;

enum Outcome {
    Ok,
    ChecksFailed,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli.cmd) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::ChecksFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Cmd) -> Res<Outcome> {
    match cmd {
        Cmd::Enumerate(a) => enumerate(a),
        Cmd::Sample(a) => sample(a),
        Cmd::Tension(a) => tension_cmd(a),
        Cmd::Wulff(a) => wulff(a),
        Cmd::ShapeCompare(a) => compare(a),
        Cmd::Analyze(Analyze::Contours(a)) => contours(a),
        Cmd::Analyze(Analyze::Labels(a)) => labels(a),
        Cmd::Run(a) => run(a),
        Cmd::Report { dir } => report(&dir),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Res<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d)?;
    }
    std::fs::write(path, bytes).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn emit(out: Option<&Path>, v: &Value) -> Res<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    match out {
        Some(p) => write(p, s.as_bytes()),
        None => {
            print!("{s}");
            Ok(())
        }
    }
}

fn read_tension(p: &Path) -> Res<DirectionalTension> {
    let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
    Ok(DirectionalTension::from_json(&text)?)
}

fn unit_shape(tension_file: Option<&Path>) -> Res<ConvexPolygon> {
    let tau = match tension_file {
        Some(p) => read_tension(p)?.convexify()?,
        None => DirectionalTension::constant(1.0, 720)?,
    };
    Ok(experiments::unit_wulff(&tau)?)
}

/// Spontaneous magnetization of the planar nearest-neighbour model.
fn planar_m_star(beta: f64) -> f64 {
    let s = (2.0 * beta).sinh();
    if s <= 1.0 {
        0.0
    } else {
        (1.0 - s.powi(-4)).powf(0.125)
    }
}

fn shape_spec(d: &Domain) -> Res<ShapeSpec> {
    let m = d.m.unwrap_or(d.n);
    Ok(match d.shape {
        ShapeKind::Torus => ShapeSpec::torus(2, d.n),
        ShapeKind::Box => ShapeSpec::square_box(2, d.n),
        ShapeKind::Cylinder => ShapeSpec::Cylinder { d: 2, n: d.n, m },
        ShapeKind::Slab => ShapeSpec::slab(2, d.n, m),
        ShapeKind::Wulff => ShapeSpec::WulffBox { n: d.n, polygon: unit_shape(d.tension_file.as_deref())?.vertices().to_vec() },
    })
}

fn boundary(d: &Domain) -> BoundaryCondition {
    match d.bc {
        Bc::Plus => BoundaryCondition::Plus,
        Bc::Minus => BoundaryCondition::Minus,
        Bc::Free => BoundaryCondition::Free,
        Bc::Periodic => BoundaryCondition::Periodic,
        Bc::Wall => BoundaryCondition::WallField { eta: d.eta },
    }
}

fn wiring(bc: &BoundaryCondition) -> Res<Wiring> {
    Ok(match bc {
        BoundaryCondition::Plus | BoundaryCondition::Minus => Wiring::Wired,
        BoundaryCondition::Free => Wiring::Free,
        BoundaryCondition::Periodic => Wiring::Periodic,
        other => return Err(format!("the FK model takes plus, minus, free or periodic boundaries, not {}", other.name()).into()),
    })
}

fn enumerate(a: EnumerateArgs) -> Res<Outcome> {
    let g = lattice::build_lattice(&shape_spec(&a.domain)?)?;
    let bc = boundary(&a.domain);
    let table: BTreeMap<String, f64>;
    let mut info = json!({
        "shape": g.spec.name(),
        "sites": g.n_sites(),
        "bc": bc.name(),
        "beta": a.domain.beta,
        "law": a.law,
    });
    if a.law == "fk" {
        let fk = FkGraph::new(&g, &wiring(&bc)?)?;
        let probs = exact::enumerate_fk(&fk, samplers::p_beta(a.domain.beta), a.q)?;
        info["q"] = json!(a.q);
        info["edges"] = json!(fk.n_edges());
        table = probs.iter().enumerate().map(|(i, p)| (i.to_string(), *p)).collect();
    } else {
        let t = exact::enumerate_gibbs(&g, &bc, &CouplingSpec::nn(a.domain.beta), a.domain.h)?;
        info["h"] = json!(a.domain.h);
        info["log_z"] = json!(t.log_z);
        table = t.probs.iter().enumerate().map(|(i, p)| (i.to_string(), *p)).collect();
    }
    info["probabilities"] = json!(table);
    emit(a.out.as_deref(), &info)?;
    Ok(Outcome::Ok)
}

fn initial_state(g: &Geometry, bc: &BoundaryCondition, constraint: Option<i64>) -> Res<SpinConfig> {
    let n = g.n_sites() as i64;
    match constraint {
        Some(m) => {
            if m.abs() > n || (n - m) % 2 != 0 {
                return Err(format!("magnetization {m} is impossible on {n} sites").into());
            }
            let plus = ((n + m) / 2) as usize;
            Ok(SpinConfig { spins: (0..n as usize).map(|i| if i < plus { 1 } else { -1 }).collect() })
        }
        None => Ok(SpinConfig::constant(g.n_sites(), if matches!(bc, BoundaryCondition::Minus) { -1 } else { 1 })),
    }
}

fn sample(a: SampleArgs) -> Res<Outcome> {
    let d = &a.domain;
    let spec = shape_spec(d)?;
    let g = lattice::build_lattice(&spec)?;
    let bc = boundary(d);
    bc.check(&g)?;
    let rng = RngStream::new(a.seed, 0);
    let coupling = CouplingSpec::nn(d.beta);
    let header = |kind: &str, len: usize| SnapshotHeader {
        shape: spec.clone(),
        d: g.d,
        n: d.n,
        m: d.m.unwrap_or(d.n),
        bc: bc.name(),
        beta: d.beta,
        h: d.h,
        eta: d.eta,
        seed: a.seed,
        kind: kind.into(),
        len,
    };
    let mut files = Vec::new();
    let mut save = |sub: &str, i: usize, bytes: Vec<u8>| -> Res<()> {
        let rel = format!("{sub}/{i:06}.snap");
        write(&a.out.join(&rel), &bytes)?;
        files.push(FileDigest::of(&rel, &bytes));
        Ok(())
    };
    let mut count = 0;
    let mut err: Option<Box<dyn std::error::Error>> = None;
    let mut record_spins = |s: &[i8], count: &mut usize| {
        let bits: Vec<bool> = s.iter().map(|&x| x > 0).collect();
        if let Err(e) = save("spins", *count, encode_snapshot(&header("spins", bits.len()), &bits)) {
            err.get_or_insert(e);
        }
        *count += 1;
    };
    let report: SamplerReport = match a.model {
        Model::Glauber => {
            let mut ch = Glauber::new(&g, &bc, &coupling, d.h, initial_state(&g, &bc, None)?, rng)?;
            samplers::run_chain(&mut ch, a.burn_in, a.sweeps, a.thin, |c| record_spins(c.spins(), &mut count))
        }
        Model::Kawasaki => {
            let m = a.constraint.ok_or("kawasaki needs --constraint M")?;
            let mut ch = Kawasaki::new(&g, &bc, &coupling, initial_state(&g, &bc, Some(m))?, rng)?;
            samplers::run_chain(&mut ch, a.burn_in, a.sweeps, a.thin, |c| record_spins(c.spins(), &mut count))
        }
        Model::Restricted => {
            let s = a.cutoff.unwrap_or_else(|| samplers::default_cutoff(d.n, 8.0));
            let mut ch = Restricted::new(&g, &bc, d.beta, s, rng)?;
            samplers::run_chain(&mut ch, a.burn_in, a.sweeps, a.thin, |c| record_spins(c.spins(), &mut count))
        }
        Model::Fk => {
            let fk = FkGraph::new(&g, &wiring(&bc)?)?;
            let mut ch = FkChain::new(fk, samplers::p_beta(d.beta), rng)?;
            let mut bonds: Vec<Vec<u8>> = Vec::new();
            let r = samplers::run_chain(&mut ch, a.burn_in, a.sweeps, a.thin, |c| {
                record_spins(c.spins(), &mut count);
                let open = &c.bonds().open;
                bonds.push(encode_snapshot(&header("bonds", open.len()), open));
            });
            drop(record_spins);
            for (i, b) in bonds.into_iter().enumerate() {
                save("bonds", i, b)?;
            }
            r
        }
    };
    if let Some(e) = err {
        return Err(e);
    }
    let model = match a.model {
        Model::Glauber => "glauber",
        Model::Kawasaki => "kawasaki",
        Model::Fk => "fk",
        Model::Restricted => "restricted",
    };
    let manifest = json!({
        "model": model,
        "header": header("spins", g.n_sites()),
        "constraint": a.constraint,
        "cutoff": a.cutoff,
        "report": report,
        "files": files,
    });
    emit(Some(&a.out.join("manifest.json")), &manifest)?;
    eprintln!("{} samples, acceptance {:.3}, tau_int {:.2}", report.samples, report.acceptance, report.tau_int);
    Ok(Outcome::Ok)
}

fn tension_cmd(a: TensionArgs) -> Res<Outcome> {
    let method = if a.method == "isotropic" {
        TableMethod::Isotropic(1.0)
    } else {
        let oz = match a.oz.as_str() {
            "free" => OzTerm::Free,
            "off" => OzTerm::Off,
            v => OzTerm::Fixed(v.parse().map_err(|_| format!("--oz takes free, off or a number, not {v}"))?),
        };
        TableMethod::DualDecay {
            widths: a.widths.clone(),
            min_distance: a.min_distance,
            max_distance: a.max_distance,
            decay: DecayConfig { torus: a.torus, chains: a.chains, burn_in: a.burn_in, sweeps: a.sweeps, oz, seed: a.seed, ..DecayConfig::default() },
        }
    };
    let t = tension::tension_table(a.beta, a.directions, &method)?;
    let table = if a.raw { &t.raw } else { &t.convexified };
    emit(a.out.as_deref(), &serde_json::to_value(table)?)?;
    Ok(Outcome::Ok)
}

fn shape_csv(v: &[Pt]) -> String {
    let mut s = String::from("x,y\n");
    for p in v {
        s += &format!("{:.12},{:.12}\n", p[0], p[1]);
    }
    s
}

fn read_shape(p: &Path) -> Res<Vec<Pt>> {
    let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with(|c: char| c.is_alphabetic())) {
            continue;
        }
        let bad = || format!("{}:{}: expected `x,y`", p.display(), i + 1);
        let (x, y) = line.split_once(',').ok_or_else(bad)?;
        pts.push([x.trim().parse().map_err(|_| bad())?, y.trim().parse().map_err(|_| bad())?]);
    }
    Ok(pts)
}

fn wulff(a: WulffArgs) -> Res<Outcome> {
    let tau = match &a.tension_file {
        Some(p) => read_tension(p)?,
        None if a.tau == "l1" => DirectionalTension::uniform(a.directions, |t| t.cos().abs() + t.sin().abs(), "l1")?,
        None => DirectionalTension::constant(1.0, a.directions)?,
    }
    .convexify()?;
    let k = geometry::dilate(&experiments::unit_wulff(&tau)?, a.volume)?;
    let w = geometry::surface_energy(k.vertices(), true, &tau).value;
    write(&a.out.join("shape.csv"), shape_csv(k.vertices()).as_bytes())?;
    let rep = json!({
        "method": tau.method,
        "beta": tau.beta,
        "directions": tau.directions.len(),
        "vertices": k.vertices().len(),
        "area": k.area(),
        "energy": w,
        "energy_unit_area": w / a.volume.sqrt(),
        "anisotropy": tau.anisotropy(),
    });
    emit(Some(&a.out.join("energy.json")), &rep)?;
    println!("W = {w:.6} (area {:.6}, {} vertices)", k.area(), k.vertices().len());
    Ok(Outcome::Ok)
}

fn compare(a: CompareArgs) -> Res<Outcome> {
    let (pa, pb) = (read_shape(&a.a)?, read_shape(&a.b)?);
    let kb = ConvexPolygon::new(pb.clone()).map_err(|e| format!("{}: the second shape must be convex ({e})", a.b.display()))?;
    // both convex: the support-function form is exact and much cheaper
    let ka = ConvexPolygon::new(pa.clone()).ok();
    let hausdorff = match &ka {
        Some(ka) => geometry::hausdorff_convex(ka, &kb),
        None => geometry::hausdorff_distance(&pa, true, &pb, true),
    };
    let mut rep = json!({
        "area_a": geometry::signed_area(&pa).abs(),
        "area_b": kb.area(),
        "a_convex": ka.is_some(),
        "hausdorff": hausdorff,
        "symmetric_difference": geometry::symmetric_difference_area(&pa, &kb),
    });
    if a.translate {
        let fit = match &ka {
            Some(ka) => geometry::best_translate_convex(ka, &kb, 1e-7),
            None => geometry::best_translate_hausdorff(&geometry::segments(&pa, true), &kb, 1e-4),
        };
        let moved = kb.translate(fit.x);
        rep["best_translate"] = json!({
            "shift": fit.x,
            "hausdorff": fit.residual,
            "symmetric_difference": geometry::symmetric_difference_area(&pa, &moved),
        });
    }
    emit(None, &rep)?;
    Ok(Outcome::Ok)
}

struct Snapshots {
    header: SnapshotHeader,
    spins: Vec<SpinConfig>,
    bonds: Vec<BondConfig>,
}

fn read_snapshots(dir: &Path, need_bonds: bool) -> Res<Snapshots> {
    let list = |sub: &str| -> Res<Vec<PathBuf>> {
        let d = dir.join(sub);
        if !d.is_dir() {
            return Ok(vec![]);
        }
        let mut v: Vec<PathBuf> = std::fs::read_dir(&d)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "snap")).collect();
        v.sort();
        Ok(v)
    };
    let mut header = None;
    let mut spins = Vec::new();
    for p in list("spins")? {
        let (h, bits) = decode_snapshot(&std::fs::read(&p)?)?;
        spins.push(SpinConfig { spins: bits.iter().map(|&b| if b { 1 } else { -1 }).collect() });
        header.get_or_insert(h);
    }
    let header = header.ok_or_else(|| format!("no spin snapshots in {}", dir.join("spins").display()))?;
    let mut bonds = Vec::new();
    if need_bonds {
        for p in list("bonds")? {
            bonds.push(BondConfig { open: decode_snapshot(&std::fs::read(&p)?)?.1 });
        }
        if bonds.len() != spins.len() {
            return Err(format!("{} has {} spin and {} bond snapshots; FK schemes need both (sample --model fk)", dir.display(), spins.len(), bonds.len()).into());
        }
    }
    Ok(Snapshots { header, spins, bonds })
}

fn bc_from_name(name: &str, eta: f64) -> Res<BoundaryCondition> {
    Ok(match name {
        "plus" => BoundaryCondition::Plus,
        "minus" => BoundaryCondition::Minus,
        "free" => BoundaryCondition::Free,
        "periodic" => BoundaryCondition::Periodic,
        n if n.starts_with("wall_field") => BoundaryCondition::WallField { eta },
        n => return Err(format!("snapshot boundary `{n}` is not supported here").into()),
    })
}

fn contours(a: ContoursArgs) -> Res<Outcome> {
    let snaps = read_snapshots(&a.dir, false)?;
    let h = &snaps.header;
    let g = lattice::build_lattice(&h.shape)?;
    let bc = bc_from_name(&h.bc, h.eta)?;
    let m_star = a.m_star.unwrap_or_else(|| planar_m_star(h.beta));
    let k1 = unit_shape(a.tension_file.as_deref())?;
    let vol = g.n_sites() as f64;
    let mean_m = snaps.spins.iter().map(|s| s.total() as f64).sum::<f64>() / snaps.spins.len() as f64;
    let setup = DropletSetup {
        geometry: &g,
        bc: &bc,
        s: a.cutoff.unwrap_or_else(|| samplers::default_cutoff(h.n, 8.0)),
        k1: &k1,
        m_star,
        a_n: mean_m + m_star * vol,
        shape_metrics: a.wulff_target,
    };
    let r = contour::droplet_statistics(&setup, &snaps.spins)?;
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.6}"));
    let mut csv = String::from("sample,n_contours,n_large,largest_len,largest_area,area_ratio,hausdorff,sym_diff\n");
    for (i, s) in r.samples.iter().enumerate() {
        csv += &format!(
            "{i},{},{},{},{},{},{},{}\n",
            s.n_contours,
            s.n_large,
            s.largest_len,
            s.largest_area.map_or(String::new(), |v| v.to_string()),
            opt(s.area_ratio),
            opt(s.hausdorff),
            opt(s.sym_diff)
        );
    }
    let out = a.dir.join("analysis");
    write(&out.join("contours.csv"), csv.as_bytes())?;
    emit(Some(&out.join("contours.json")), &serde_json::to_value(&r)?)?;
    println!(
        "{} samples, s = {}, single s-large contour frequency {:.3} (95% CI {:.3}..{:.3}), median area ratio {:.4}",
        r.samples.len(),
        r.s,
        r.single_large_frequency,
        r.single_large_ci.0,
        r.single_large_ci.1,
        r.median_area_ratio
    );
    Ok(Outcome::Ok)
}

/// `value:count` runs over the block order of the grid.
fn run_length(labels: &[i8]) -> String {
    let mut out: Vec<String> = Vec::new();
    let mut i = 0;
    while i < labels.len() {
        let j = labels[i..].iter().position(|&u| u != labels[i]).map_or(labels.len(), |p| i + p);
        out.push(format!("{}:{}", labels[i], j - i));
        i = j;
    }
    out.join(" ")
}

fn labels(a: LabelsArgs) -> Res<Outcome> {
    let fk_scheme = a.scheme != "averaged";
    let snaps = read_snapshots(&a.dir, fk_scheme)?;
    let h = &snaps.header;
    let g = lattice::build_lattice(&h.shape)?;
    let m_star = a.m_star.unwrap_or_else(|| planar_m_star(h.beta));
    let zeta = a.zeta * m_star;
    let fk = if fk_scheme { Some(FkGraph::new(&g, &wiring(&bc_from_name(&h.bc, h.eta)?)?)?) } else { None };
    let mut thetas = Vec::new();
    for &k in &a.k {
        let ell = a.ell.unwrap_or(k.saturating_sub(3));
        let theta = match (&fk, a.theta_ref) {
            (Some(_), Some(t)) => t,
            (Some(fk), None) => coarse::calibrate_theta(&g, fk, &snaps.bonds[0], k, ell)?,
            (None, _) => f64::NAN,
        };
        thetas.push((k, ell, theta));
    }
    let mut fields: Vec<Vec<PhaseLabelField>> = Vec::with_capacity(snaps.spins.len());
    let mut csv = String::from("sample,k,zero_fraction,labels\n");
    for (i, sigma) in snaps.spins.iter().enumerate() {
        let mut row = Vec::new();
        for &(k, ell, theta) in &thetas {
            let u = match (&fk, a.scheme.as_str()) {
                (Some(fk), "fk") => coarse::labels_fk(&g, fk, &snaps.bonds[i], sigma, k, ell, zeta, theta, m_star)?,
                (Some(fk), _) => coarse::labels_percolation(&g, fk, &snaps.bonds[i], k, ell, theta, zeta)?,
                (None, _) => coarse::labels_averaged(&g, sigma, k, zeta, m_star)?,
            };
            csv += &format!("{i},{k},{:.6},{}\n", u.zero_fraction(), run_length(&u.labels));
            row.push(u);
        }
        fields.push(row);
    }
    let report = coarse::tightness_stats(&fields, a.delta, a.perimeter_a);
    let out = a.dir.join("analysis");
    write(&out.join("labels.csv"), csv.as_bytes())?;
    let js = json!({
        "scheme": a.scheme,
        "m_star": m_star,
        "zeta": zeta,
        "scales": thetas.iter().map(|&(k, ell, theta)| json!({"k": k, "ell": ell, "theta": if theta.is_nan() { Value::Null } else { json!(theta) }})).collect::<Vec<_>>(),
        "report": report,
    });
    emit(Some(&out.join("tightness.json")), &js)?;
    for s in &report.scales {
        println!("k = {}: rho = {:.4} ± {:.4}, assumption B violations {}", s.k, s.rho.value, s.rho.err, s.assumption_b_violations);
    }
    Ok(Outcome::Ok)
}

fn run(a: RunArgs) -> Res<Outcome> {
    if a.list {
        for p in experiments::presets() {
            println!("{}\n  {}", p.name, p.doc);
            for k in p.keys {
                println!("    {:<16} {:<22} {}", k.name, if k.default.is_empty() { "\"\"" } else { k.default }, k.doc);
            }
            println!("    stages: {}", p.stages.iter().map(|s| s.name).collect::<Vec<_>>().join(", "));
        }
        return Ok(Outcome::Ok);
    }
    let mut cfg = match (&a.config, &a.preset) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, Some(name)) => ExperimentConfig::new(name)?,
        (None, None) => return Err("give --preset NAME or --config FILE (see run --list)".into()),
    };
    for kv in &a.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(o) = &a.out {
        cfg.out_dir = Some(o.clone());
    }
    if cfg.out_dir.is_none() {
        let root = std::env::var_os(OUT_ENV).ok_or_else(|| format!("no output directory: pass --out, set `out` in the config, or set {OUT_ENV}"))?;
        cfg.out_dir = Some(PathBuf::from(root).join(format!("{}-{}", cfg.preset, &cfg.hash()[..12])));
    }
    let preset = cfg.preset.clone();
    let m = experiments::run_preset(&preset, &cfg)?;
    let dir = cfg.out_dir.as_deref().expect("set above");
    if !m.reused.is_empty() {
        eprintln!("resumed: reused {}", m.reused.join(", "));
    }
    report(dir)
}

fn report(dir: &Path) -> Res<Outcome> {
    let r = experiments::export_report(dir)?;
    print!("{}", std::fs::read_to_string(dir.join("report.txt"))?);
    Ok(if r.all_checks_pass { Outcome::Ok } else { Outcome::ChecksFailed })
}
