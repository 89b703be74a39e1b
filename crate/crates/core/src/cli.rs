//! Command-line driver: load two endpoint densities, solve, write results.
//!
//! Exit status is `0` on convergence, `2` when the iteration cap is reached
//! and `1` on usage, input or output errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Parser;
use sha2::{Digest, Sha256};

use crate::assembly::{BoundaryData, Preconditioner};
use crate::io::{load_density, write_outputs, Manifest};
use crate::mesh::{BoundaryCondition, SpaceTimeMesh};
use crate::prox::{SourceKind, SourceModel};
use crate::solver::{DrSolver, SolverConfig, Termination};

pub const VERSION: &str = env!("SRCOT_VERSION");

#[derive(Debug, Parser)]
#[command(name = "srcot", version = VERSION, about = "Unbalanced optimal transport geodesics with a source term")]
struct Args {
    /// Initial density (PGM P2/P5 or CSV matrix)
    #[arg(long)]
    a: Option<PathBuf>,
    /// Final density (PGM P2/P5 or CSV matrix)
    #[arg(long)]
    b: Option<PathBuf>,
    /// Cells per spatial axis [default: 64]
    #[arg(long)]
    nx: Option<usize>,
    /// Time slabs [default: 32]
    #[arg(long)]
    nt: Option<usize>,
    /// Source penalty weight [default: 1]
    #[arg(long)]
    delta: Option<f64>,
    /// Douglas-Rachford step [default: 1]
    #[arg(long)]
    gamma: Option<f64>,
    /// Relaxation in (0,2) [default: 1.8]
    #[arg(long)]
    alpha: Option<f64>,
    /// Iteration cap [default: 5000]
    #[arg(long)]
    iters: Option<usize>,
    /// Relative fixed-point residual tolerance [default: 1e-5]
    #[arg(long = "fp-tol")]
    fp_tol: Option<f64>,
    /// none | l2l2 | l1l1 | l2huber [default: l2huber]
    #[arg(long)]
    source: Option<String>,
    /// Huber parameter [default: 0.1]
    #[arg(long)]
    beta: Option<f64>,
    /// neumann | periodic [default: neumann]
    #[arg(long)]
    bc: Option<String>,
    /// Relative CG tolerance [default: 1e-9]
    #[arg(long = "cg-tol")]
    cg_tol: Option<f64>,
    /// CG preconditioner, tensor | jacobi [default: tensor]
    #[arg(long)]
    precond: Option<String>,
    /// Density of a PGM pixel at maxval, or CSV multiplier [default: 1]
    #[arg(long)]
    scale: Option<f64>,
    /// Output directory [default: out]
    #[arg(long)]
    out: Option<PathBuf>,
    /// key=value file with the same keys as the long options
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print a progress line every N iterations, 0 for none [default: 100]
    #[arg(long = "log-every")]
    log_every: Option<usize>,
}

/// Fully resolved run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub a: PathBuf,
    pub b: PathBuf,
    pub nx: usize,
    pub nt: usize,
    pub scale: Option<f64>,
    pub out: PathBuf,
    pub log_every: usize,
    pub solver: SolverConfig,
}

const KEYS: &[&str] = &[
    "a", "b", "nx", "nt", "delta", "gamma", "alpha", "iters", "fp-tol", "source", "beta", "bc", "cg-tol", "precond",
    "scale", "out", "log-every",
];

fn parse_config_file(path: &Path) -> Result<Manifest, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut m = Manifest::default();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("{}:{}: expected key=value", path.display(), n + 1))?;
        let k = k.trim().replace('_', "-");
        if !KEYS.contains(&k.as_str()) {
            return Err(format!("{}:{}: unknown key '{k}'", path.display(), n + 1));
        }
        m.set(&k, v.trim());
    }
    Ok(m)
}

fn pick<T: FromStr>(flag: Option<T>, file: &Manifest, key: &str, default: Option<T>) -> Result<Option<T>, String> {
    if flag.is_some() {
        return Ok(flag);
    }
    match file.get(key) {
        Some(v) => v.parse().map(Some).map_err(|_| format!("invalid value '{v}' for '{key}' in config file")),
        None => Ok(default),
    }
}

fn resolve(args: Args) -> Result<RunSettings, String> {
    let file = match &args.config {
        Some(p) => parse_config_file(p)?,
        None => Manifest::default(),
    };
    let d = SolverConfig::default();
    let required = |v: Option<PathBuf>, key: &str| v.ok_or_else(|| format!("missing required input --{key}"));
    let source: String = pick(args.source, &file, "source", Some("l2huber".into()))?.unwrap();
    let kind = SourceKind::from_str(&source).map_err(|e| e.to_string())?;
    let beta = pick(args.beta, &file, "beta", Some(d.source.beta))?.unwrap();
    let bc: String = pick(args.bc, &file, "bc", Some("neumann".into()))?.unwrap();
    let bc = BoundaryCondition::from_str(&bc).map_err(|e| e.to_string())?;
    let precond: String = pick(args.precond, &file, "precond", Some("tensor".into()))?.unwrap();
    let precond = Preconditioner::from_str(&precond)?;
    let solver = SolverConfig {
        delta: pick(args.delta, &file, "delta", Some(d.delta))?.unwrap(),
        gamma: pick(args.gamma, &file, "gamma", Some(d.gamma))?.unwrap(),
        alpha: pick(args.alpha, &file, "alpha", Some(d.alpha))?.unwrap(),
        max_iters: pick(args.iters, &file, "iters", Some(d.max_iters))?.unwrap(),
        fp_tol: pick(args.fp_tol, &file, "fp-tol", Some(d.fp_tol))?.unwrap(),
        cg_tol: pick(args.cg_tol, &file, "cg-tol", Some(d.cg_tol))?.unwrap(),
        preconditioner: precond,
        source: SourceModel::new(kind, beta).map_err(|e| e.to_string())?,
        bc,
        ..d
    };
    solver.validate().map_err(|e| e.to_string())?;
    let scale = pick(args.scale, &file, "scale", None)?;
    if let Some(s) = scale {
        if !(s > 0.0 && s.is_finite()) {
            return Err(format!("scale must be positive, got {s}"));
        }
    }
    Ok(RunSettings {
        a: required(pick(args.a, &file, "a", None)?, "a")?,
        b: required(pick(args.b, &file, "b", None)?, "b")?,
        nx: pick(args.nx, &file, "nx", Some(64))?.unwrap(),
        nt: pick(args.nt, &file, "nt", Some(32))?.unwrap(),
        scale,
        out: pick(args.out, &file, "out", Some(PathBuf::from("out")))?.unwrap(),
        log_every: pick(args.log_every, &file, "log-every", Some(100))?.unwrap(),
        solver,
    })
}

/// Parses `argv` (including the program name) and applies the precedence
/// flags > config file > defaults.
pub fn parse_settings<I, T>(argv: I) -> Result<RunSettings, String>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = Args::try_parse_from(argv).map_err(|e| e.to_string())?;
    resolve(args)
}

fn sha256_file(path: &Path) -> Result<String, String> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn base_manifest(s: &RunSettings, mesh: &SpaceTimeMesh) -> Result<Manifest, String> {
    let c = &s.solver;
    let mut m = Manifest::default();
    m.set("version", VERSION);
    m.set("status", "running");
    m.set("outputs", "pending");
    m.set("a", s.a.display());
    m.set("a_sha256", sha256_file(&s.a)?);
    m.set("b", s.b.display());
    m.set("b_sha256", sha256_file(&s.b)?);
    m.set("nx", s.nx);
    m.set("nt", s.nt);
    m.set("n_vertices", mesh.n_vertices());
    m.set("n_tets", mesh.n_tets());
    m.set("bc", c.bc.as_str());
    m.set("source", c.source.kind.as_str());
    m.set("beta", c.source.beta);
    m.set("delta", c.delta);
    m.set("gamma", c.gamma);
    m.set("alpha", c.alpha);
    m.set("iters", c.max_iters);
    m.set("fp_tol", c.fp_tol);
    m.set("cg_tol", c.cg_tol);
    m.set("precond", c.preconditioner.as_str());
    m.set("scale", s.scale.map_or("default".to_string(), |v| v.to_string()));
    Ok(m)
}

fn execute(s: &RunSettings) -> Result<i32, String> {
    if s.solver.source.kind == SourceKind::L1L1 {
        eprintln!("warning: the l1l1 source model has no existence theory for this problem; results are heuristic");
    }
    let mesh = SpaceTimeMesh::new(s.nx, s.nt, s.solver.bc).map_err(|e| e.to_string())?;
    let ua = load_density(&s.a, s.nx, s.scale).map_err(|e| e.to_string())?;
    let ub = load_density(&s.b, s.nx, s.scale).map_err(|e| e.to_string())?;
    let bdata = BoundaryData::new(&mesh, ua, ub).map_err(|e| e.to_string())?;

    fs::create_dir_all(&s.out).map_err(|e| format!("{}: {e}", s.out.display()))?;
    let manifest_path = s.out.join("manifest.txt");
    let mut manifest = base_manifest(s, &mesh)?;
    manifest.set("mass_a", bdata.mass_a(&mesh));
    manifest.set("mass_b", bdata.mass_b(&mesh));
    manifest.write(&manifest_path).map_err(|e| e.to_string())?;

    let log_every = s.log_every;
    let mut solver = DrSolver::new(&mesh, &bdata, s.solver).map_err(|e| e.to_string())?;
    let result = solver
        .run(|st| {
            if log_every > 0 && (st.iter == 1 || st.iter % log_every == 0) {
                eprintln!(
                    "iter {:>6}  residual {:.3e}  energy {:.6e}  transport {:.6e}  source {:.6e}  mass_defect {:.1e}",
                    st.iter,
                    st.fixed_point_residual,
                    st.energy,
                    st.transport_energy,
                    st.source_energy,
                    st.mass_balance_defect
                );
            }
        })
        .map_err(|e| e.to_string())?;

    let last = result.final_stats().copied();
    manifest.set("status", if result.converged() { "converged" } else { "max_iters_reached" });
    manifest.set("converged", result.converged());
    manifest.set("iterations", result.stats.len());
    manifest.set("wall_seconds", result.wall_seconds);
    if let Some(st) = last {
        manifest.set("final_residual", st.fixed_point_residual);
        manifest.set("initial_residual", result.stats[0].fixed_point_residual);
        manifest.set("energy", st.energy);
        manifest.set("transport_energy", st.transport_energy);
        manifest.set("source_energy", st.source_energy);
        manifest.set("mass_defect", st.mass_balance_defect);
    }
    manifest.set("outputs", "partial");
    manifest.write(&manifest_path).map_err(|e| e.to_string())?;

    let scales = write_outputs(&mesh, &bdata, &result.state, &result.stats, &s.out).map_err(|e| e.to_string())?;
    manifest.set("density_norm", scales.density);
    manifest.set("momentum_norm", scales.momentum);
    manifest.set("source_norm", scales.source);
    manifest.set("outputs", "complete");
    manifest.write(&manifest_path).map_err(|e| e.to_string())?;

    if let Some(st) = last {
        println!(
            "{} after {} iterations: energy {:.6e} (transport {:.6e}, source {:.6e}), residual {:.3e}",
            if result.converged() { "converged" } else { "stopped" },
            result.stats.len(),
            st.energy,
            st.transport_energy,
            st.source_energy,
            st.fixed_point_residual
        );
    }
    Ok(match result.termination {
        Termination::Converged => 0,
        Termination::MaxItersReached => 2,
    })
}

/// Entry point of the `srcot` binary; returns the process exit status.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match resolve(args).and_then(|s| execute(&s)) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            1
        }
    }
}
