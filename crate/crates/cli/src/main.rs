mod manifest;
mod repro;
mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::Deserialize;

use rsi_core::data::{self, UniformInputSampler, PENDULUM_HOLD};
use rsi_core::ident;
use rsi_core::io::from_rows;
use rsi_core::model::{pendulum, stream_rng, Scenario};
use rsi_core::synth::trace_to_csv;
use rsi_core::verify::{self, DEFAULT_TOL};
use rsi_core::{
    assemble_opd, assemble_opm, certify_rsi, check_pe, kappa_search, Dataset, Error, InputSet, RsiCertificate,
    SafetySet, SearchMode, SolveOptions, SynthConfig,
};

use manifest::{sibling, RunManifest};

/// Robust safety-invariant ellipsoids and controllers for linear systems
/// with bounded disturbances, from a model or from one trajectory of data.
///
/// Exit codes: 0 success, 2 infeasible or negative diagnostic, 3 input
/// error, 4 solver or numerical failure.
#[derive(Parser)]
#[command(name = "rsi", version)]
struct Cli {
    /// Solver feasibility tolerance; the optimality tolerance is set to ten
    /// times this value.
    #[arg(long, global = true, env = "RSI_SOLVER_TOL")]
    solver_tol: Option<f64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a built-in scenario (system, sets, disturbance law) as JSON.
    Preset(PresetArgs),
    /// Record one trajectory under held uniform random inputs.
    Collect(CollectArgs),
    /// Synthesize a certificate with the kappa search.
    Synth(SynthArgs),
    /// Check a certificate analytically against a system.
    Certify(CertifyArgs),
    /// Closed-loop Monte-Carlo runs from the certified ellipsoid.
    McVerify(McArgs),
    /// Project a certified ellipsoid onto two coordinates.
    Project(ProjectArgs),
    /// Least-squares fit of (A, B) and convergence traces.
    Ident(IdentArgs),
    /// Run the whole pendulum case study and write a report.
    ReproPendulum(repro::ReproArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetName {
    Pendulum,
}

#[derive(Args)]
struct PresetArgs {
    #[arg(value_enum)]
    name: PresetName,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CollectArgs {
    /// Scenario JSON (A, B, safety_a, input_b, gamma, density).
    #[arg(long)]
    system: PathBuf,
    #[arg(long)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
    /// Keep sampling past --steps until the rank condition holds.
    #[arg(long)]
    extend_until_pe: bool,
    #[arg(long, default_value_t = 10_000)]
    max_steps: usize,
    #[arg(long, default_value_t = pendulum::SEED)]
    seed: u64,
    /// Samples each input draw is held for.
    #[arg(long, default_value_t = PENDULUM_HOLD)]
    hold: usize,
    /// Initial state, comma separated (default: origin).
    #[arg(long, value_delimiter = ',')]
    x0: Option<Vec<f64>>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Mode {
    Model,
    Data,
}

#[derive(Clone, Copy, ValueEnum)]
enum SearchArg {
    MaxVolume,
    MaxKappa,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    mode: Mode,
    /// Scenario JSON; required for --mode model.
    #[arg(long)]
    system: Option<PathBuf>,
    /// Dataset CSV; required for --mode data.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// JSON with safety_a and input_b (and optionally gamma); defaults to --system.
    #[arg(long)]
    sets: Option<PathBuf>,
    /// Disturbance bound; defaults to the gamma of the sets file.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, default_value_t = 0.9)]
    kappa_init: f64,
    /// Width at which the kappa bisection stops.
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    /// Solve budget of the kappa search.
    #[arg(long, default_value_t = 30)]
    max_iter: usize,
    #[arg(long, value_enum, default_value = "max-volume")]
    search: SearchArg,
    #[arg(long)]
    out: PathBuf,
    /// Recorded in the certificate and manifest.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CertifyArgs {
    #[arg(long)]
    system: PathBuf,
    #[arg(long)]
    cert: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    /// Also write the report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct McArgs {
    #[arg(long)]
    system: PathBuf,
    #[arg(long)]
    cert: PathBuf,
    #[arg(long, default_value_t = 100)]
    traj: usize,
    #[arg(long, default_value_t = 200)]
    horizon: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = pendulum::SEED)]
    seed: u64,
    /// Multiplies the scenario's gamma for stress runs.
    #[arg(long, default_value_t = 1.0)]
    gamma_scale: f64,
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    cert: PathBuf,
    /// Two 1-based coordinates, e.g. 1,2.
    #[arg(long, value_delimiter = ',')]
    dims: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    points: usize,
}

#[derive(Args)]
struct IdentArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Fit result JSON (default: <dataset>.ident.json).
    #[arg(long)]
    out: Option<PathBuf>,
    /// 1-based entry of A_hat to trace over prefixes, e.g. 3,3.
    #[arg(long, value_delimiter = ',')]
    trace_entry: Option<Vec<usize>>,
    /// Prefix lengths: `start:stop[:step]` or a comma list.
    #[arg(long)]
    grid: Option<String>,
    /// Trace CSV (default: <dataset>.trace.csv).
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// Scenario JSON of the true system, to report the estimation error.
    #[arg(long)]
    system: Option<PathBuf>,
}

/// How a command ended when it did not error.
#[derive(Debug, PartialEq)]
pub enum Status {
    Ok,
    Negative,
}

/// Exit code for an error chain.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::NoFeasibleKappa { .. } | Error::InsufficientExcitation { .. } => 2,
                Error::Solver(_) | Error::SingularShape { .. } => 4,
                _ => 3,
            };
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(3) } else { ExitCode::SUCCESS };
        }
    };
    let solver = match solver_options(cli.solver_tol) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(3);
        }
    };
    let result = match cli.command {
        Command::Preset(a) => preset(a),
        Command::Collect(a) => collect(a),
        Command::Synth(a) => synth(a, solver),
        Command::Certify(a) => certify(a),
        Command::McVerify(a) => mc_verify(a),
        Command::Project(a) => project(a),
        Command::Ident(a) => ident_cmd(a),
        Command::ReproPendulum(a) => repro::run(a, solver),
    };
    match result {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Negative) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn solver_options(tol: Option<f64>) -> Result<SolveOptions> {
    let mut s = SolveOptions::default();
    if let Some(t) = tol {
        if !(t > 0.0 && t < 1.0) {
            bail!("solver tolerance must lie in (0, 1), got {t}");
        }
        s.feas_tol = t;
        s.opt_tol = 10.0 * t;
    }
    Ok(s)
}

fn load_scenario(m: &mut RunManifest, path: &Path) -> Result<Scenario> {
    let text = m.read_input(path, true)?;
    Scenario::from_json(&text).with_context(|| format!("invalid scenario {}", path.display()))
}

fn load_cert(m: &mut RunManifest, path: &Path) -> Result<RsiCertificate> {
    let text = m.read_input(path, false)?;
    RsiCertificate::from_json(&text).with_context(|| format!("invalid certificate {}", path.display()))
}

fn load_dataset(m: &mut RunManifest, path: &Path) -> Result<Dataset> {
    let text = m.read_input(path, false)?;
    Dataset::from_csv(&text).with_context(|| format!("invalid dataset {}", path.display()))
}

#[derive(Deserialize)]
struct SetsFile {
    safety_a: Vec<Vec<f64>>,
    input_b: Vec<Vec<f64>>,
    #[serde(default)]
    gamma: Option<f64>,
}

fn load_sets(m: &mut RunManifest, path: &Path, n: usize, mu: usize) -> Result<(SafetySet, InputSet, Option<f64>)> {
    let text = m.read_input(path, true)?;
    let f: SetsFile = serde_json::from_str(&text).with_context(|| format!("invalid sets file {}", path.display()))?;
    let rows = |r: &[Vec<f64>], cols: usize| -> Result<nalgebra::DMatrix<f64>> {
        let mat = from_rows(r)?;
        if mat.nrows() == 0 {
            return Ok(nalgebra::DMatrix::zeros(0, cols));
        }
        if mat.ncols() != cols {
            bail!(Error::Dimension(format!("set rows have {} entries, expected {cols}", mat.ncols())));
        }
        Ok(mat)
    };
    Ok((SafetySet::new(rows(&f.safety_a, n)?)?, InputSet::new(rows(&f.input_b, mu)?)?, f.gamma))
}

fn preset(a: PresetArgs) -> Result<Status> {
    let mut m = RunManifest::new("preset");
    let text = match a.name {
        PresetName::Pendulum => serde_json::to_string_pretty(&pendulum::scenario_file())?,
    };
    m.write_output(&a.out, &text)?;
    m.finish(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(Status::Ok)
}

fn collect(a: CollectArgs) -> Result<Status> {
    let mut m = RunManifest::new("collect");
    m.seed = Some(a.seed);
    let sc = load_scenario(&mut m, &a.system)?;
    let n = sc.system.n();
    let x0 = match &a.x0 {
        Some(v) if v.len() != n => bail!(Error::Dimension(format!("--x0 has {} entries, system has n = {n}", v.len()))),
        Some(v) => DVector::from_vec(v.clone()),
        None => DVector::zeros(n),
    };
    let dm = sc.disturbance.with_seed(a.seed);
    let mut sampler = UniformInputSampler::new(&sc.input, stream_rng(a.seed, 1))?.with_hold(a.hold);
    let (ds, report) = if a.extend_until_pe {
        match m.time("collect", || {
            data::extend_until_pe(&sc.system, &x0, &dm, &mut sampler, a.steps, a.max_steps, None)
        }) {
            Ok(r) => r,
            Err(Error::InsufficientExcitation { samples, rank, required, report }) => {
                m.write_output(&sibling(&a.out, ".pe.json"), &serde_json::to_string_pretty(&report)?)?;
                m.finish(&a.out)?;
                eprintln!(
                    "no persistent excitation after {samples} samples: rank [X0; U0] = {rank} < {required}; \
                     the set of systems consistent with the data is unbounded"
                );
                return Ok(Status::Negative);
            }
            Err(e) => return Err(e.into()),
        }
    } else {
        let mut c = data::Collector::new(&sc.system, &x0, &dm)?;
        m.time("collect", || -> Result<()> {
            for _ in 0..a.steps {
                c.push_from(&mut sampler)?;
            }
            Ok(())
        })?;
        let ds = c.dataset();
        let report = check_pe(&ds, None);
        (ds, report)
    };
    m.write_output(&a.out, &ds.to_csv())?;
    m.write_output(&sibling(&a.out, ".pe.json"), &serde_json::to_string_pretty(&report)?)?;
    m.finish(&a.out)?;
    println!(
        "samples: {}, rank_xu: {}/{}, hankel_rank: {}/{}, pe_satisfied: {}",
        report.samples,
        report.rank_xu,
        report.required_xu,
        report.hankel_rank.map_or("n/a".to_string(), |r| r.to_string()),
        report.required_hankel,
        report.pe_satisfied
    );
    Ok(if report.pe_satisfied { Status::Ok } else { Status::Negative })
}

fn synth(a: SynthArgs, solver: SolveOptions) -> Result<Status> {
    let mut m = RunManifest::new("synth");
    m.seed = a.seed;
    m.solver = Some(solver);
    let cfg = SynthConfig {
        kappa_init: a.kappa_init,
        e: a.tol,
        i_max: a.max_iter,
        search_mode: match a.search {
            SearchArg::MaxVolume => SearchMode::MaxVolume,
            SearchArg::MaxKappa => SearchMode::MaxKappa,
        },
        solver,
        ..SynthConfig::default()
    };
    let sets_path = a.sets.as_ref().or(a.system.as_ref()).ok_or_else(|| anyhow!("--sets (or --system) is required"))?;
    let result = match a.mode {
        Mode::Model => {
            let path = a.system.as_ref().ok_or_else(|| anyhow!("--mode model needs --system"))?;
            let sc = load_scenario(&mut m, path)?;
            let (safety, input, file_gamma) = if a.sets.is_some() {
                load_sets(&mut m, sets_path, sc.system.n(), sc.system.m())?
            } else {
                (sc.safety.clone(), sc.input.clone(), Some(sc.disturbance.gamma()))
            };
            let gamma = a.gamma.or(file_gamma).ok_or_else(|| anyhow!("no gamma given"))?;
            m.time("search", || kappa_search(|k| assemble_opm(&sc.system, &safety, &input, gamma, k), &cfg))
        }
        Mode::Data => {
            let path = a.dataset.as_ref().ok_or_else(|| anyhow!("--mode data needs --dataset"))?;
            let ds = load_dataset(&mut m, path)?;
            let (safety, input, file_gamma) = load_sets(&mut m, sets_path, ds.n(), ds.m())?;
            let gamma = a.gamma.or(file_gamma).ok_or_else(|| anyhow!("no gamma given"))?;
            let pe = check_pe(&ds, None);
            if !pe.feasible_set_bounded {
                eprintln!(
                    "warning: rank [X0; U0] = {} < {}; the set of systems consistent with the data is unbounded \
                     and a feasible solution is unlikely",
                    pe.rank_xu, pe.required_xu
                );
            }
            m.time("search", || {
                kappa_search(|k| assemble_opd(&ds, &safety, &input, gamma, k, cfg.eps_floor), &cfg)
            })
        }
    };
    let trace_path = sibling(&a.out, ".trace.csv");
    match result {
        Ok(mut out) => {
            out.best.seed = a.seed;
            m.write_output(&a.out, &out.best.to_json()?)?;
            m.write_output(&trace_path, &trace_to_csv(&out.trace))?;
            m.finish(&a.out)?;
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "feasible: kappa = {}, log det Q = {:.6}, solves = {}",
                out.best.kappa,
                out.best.log_det_q,
                out.trace.len()
            );
            Ok(Status::Ok)
        }
        Err(Error::NoFeasibleKappa { solves, trace }) => {
            m.write_output(&trace_path, &trace_to_csv(&trace))?;
            m.finish(&a.out)?;
            eprintln!("infeasible: no feasible kappa after {solves} solves");
            Ok(Status::Negative)
        }
        Err(e) => {
            m.finish(&a.out)?;
            Err(e.into())
        }
    }
}

fn certify(a: CertifyArgs) -> Result<Status> {
    let mut m = RunManifest::new("certify");
    m.cert_tol = Some(a.tol);
    let sc = load_scenario(&mut m, &a.system)?;
    let cert = load_cert(&mut m, &a.cert)?;
    let report = certify_rsi(&sc.system, &cert, &sc.safety, &sc.input, a.tol)?;
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(out) = &a.out {
        m.write_output(out, &text)?;
        m.finish(out)?;
    }
    Ok(if report.pass { Status::Ok } else { Status::Negative })
}

fn mc_verify(a: McArgs) -> Result<Status> {
    let mut m = RunManifest::new("mc-verify");
    m.seed = Some(a.seed);
    let sc = load_scenario(&mut m, &a.system)?;
    let cert = load_cert(&mut m, &a.cert)?;
    let dm = sc.disturbance.with_gamma(sc.disturbance.gamma() * a.gamma_scale)?;
    let out = m.time("simulate", || {
        verify::monte_carlo_invariance(&sc.system, &cert, &sc.safety, &sc.input, a.traj, a.horizon, &dm, a.seed)
    })?;
    m.write_output(&a.out.join("report.json"), &serde_json::to_string_pretty(&out.report)?)?;
    m.write_output(&a.out.join("trajectories.csv"), &verify::runs_to_csv(&out.runs))?;
    m.finish(&a.out)?;
    let r = &out.report;
    println!(
        "violations: {}, safety_violations: {}, input_violations: {}, max_level: {:.6}",
        r.violations, r.safety_violations, r.input_violations, r.max_level
    );
    for w in &r.warnings {
        eprintln!("warning: {w}");
    }
    let clean = r.violations == 0 && r.safety_violations == 0 && r.input_violations == 0;
    Ok(if clean { Status::Ok } else { Status::Negative })
}

fn one_based_pair(v: &[usize], what: &str) -> Result<(usize, usize)> {
    match v {
        [i, j] if *i >= 1 && *j >= 1 => Ok((i - 1, j - 1)),
        _ => bail!(Error::Domain(format!("{what} must be two 1-based indices"))),
    }
}

fn project(a: ProjectArgs) -> Result<Status> {
    let mut m = RunManifest::new("project");
    let cert = load_cert(&mut m, &a.cert)?;
    let (i, j) = one_based_pair(&a.dims, "--dims")?;
    let shape = verify::project_ellipsoid(&cert.q, (i, j))?;
    let pts = verify::ellipse_polyline(&shape, a.points);
    let names = (format!("x{}", i + 1), format!("x{}", j + 1));
    m.write_output(&a.out, &verify::polyline_to_csv(&pts, (&names.0, &names.1)))?;
    m.finish(&a.out)?;
    let axes: Vec<f64> = rsi_core::linalg::sym_eigenvalues(&shape).iter().rev().map(|l| l.max(0.0).sqrt()).collect();
    println!(
        "shape: [[{}, {}], [{}, {}]], semi-axes: {:.6}, {:.6}",
        shape[(0, 0)],
        shape[(0, 1)],
        shape[(1, 0)],
        shape[(1, 1)],
        axes[0],
        axes[1]
    );
    Ok(Status::Ok)
}

fn parse_grid(text: &str, max: usize) -> Result<Vec<usize>> {
    let bad = || Error::Parse(format!("bad grid '{text}'; use start:stop[:step] or a comma list"));
    let grid: Vec<usize> = if text.contains(':') {
        let parts: Vec<usize> = text.split(':').map(|p| p.trim().parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
        let (start, stop, step) = match parts[..] {
            [a, b] => (a, b, 1),
            [a, b, c] if c > 0 => (a, b, c),
            _ => return Err(bad().into()),
        };
        (start..=stop.min(max)).step_by(step).collect()
    } else {
        text.split(',').map(|p| p.trim().parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?
    };
    if grid.is_empty() {
        return Err(bad().into());
    }
    Ok(grid)
}

fn ident_cmd(a: IdentArgs) -> Result<Status> {
    let mut m = RunManifest::new("ident");
    let ds = load_dataset(&mut m, &a.dataset)?;
    let fit = ident::least_squares_fit(&ds)?;
    let out = a.out.clone().unwrap_or_else(|| sibling(&a.dataset, ".ident.json"));
    m.write_output(&out, &fit.to_json()?)?;
    println!("regressor_rank: {}, residual_norm: {:.6e}", fit.regressor_rank, fit.residual_norm);
    println!("A_hat = {:.6}B_hat = {:.6}", fit.a_hat, fit.b_hat);
    for w in &fit.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(path) = &a.system {
        let sc = load_scenario(&mut m, path)?;
        let da = (sc.system.a() - &fit.a_hat).singular_values().max();
        let db = (sc.system.b() - &fit.b_hat).singular_values().max();
        println!("||A - A_hat||_2 = {da:.6e}, ||B - B_hat||_2 = {db:.6e}");
    }
    if let Some(entry) = &a.trace_entry {
        let e = one_based_pair(entry, "--trace-entry")?;
        let grid = match &a.grid {
            Some(g) => parse_grid(g, ds.len())?,
            None => ((ds.n() + ds.m()).max(1)..=ds.len()).collect(),
        };
        let trace = m.time("trace", || ident::prefix_trace(&ds, e, &grid))?;
        let path = a.trace_out.clone().unwrap_or_else(|| sibling(&a.dataset, ".trace.csv"));
        m.write_output(&path, &ident::convergence_to_csv(&trace))?;
        println!("trace of A_hat({},{}) over {} prefixes written to {}", e.0 + 1, e.1 + 1, trace.len(), path.display());
    }
    m.finish(&out)?;
    Ok(Status::Ok)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        assert_eq!(parse_grid("2:10:4", 100).unwrap(), vec![2, 6, 10]);
        assert_eq!(parse_grid("5,7", 100).unwrap(), vec![5, 7]);
        assert_eq!(parse_grid("1:500", 3).unwrap(), vec![1, 2, 3]);
        assert!(parse_grid("a:b", 3).is_err());
    }

    #[test]
    fn exit_codes() {
        let e: anyhow::Error = Error::NoFeasibleKappa { solves: 1, trace: vec![] }.into();
        assert_eq!(exit_code(&e), 2);
        assert_eq!(exit_code(&Error::Solver("x".into()).into()), 4);
        assert_eq!(exit_code(&Error::Parse("x".into()).into()), 3);
        assert_eq!(exit_code(&anyhow!("plain")), 3);
    }
}
