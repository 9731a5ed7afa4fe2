//! End-to-end pendulum case study.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use nalgebra::DVector;

use rsi_core::data::{extend_until_pe, pendulum_dataset, UniformInputSampler, PENDULUM_HOLD, PENDULUM_SAMPLES};
use rsi_core::ident::{self, PENDULUM_IDENT_BASELINE, PENDULUM_IDENT_SAMPLES};
use rsi_core::model::{pendulum, stream_rng, HalfspaceSet};
use rsi_core::synth::trace_to_csv;
use rsi_core::verify::{self, ClosedLoopRun, McReport, DEFAULT_TOL};
use rsi_core::{assemble_opd, assemble_opm, certify_rsi, check_pe, kappa_search, SolveOptions, SynthConfig};

use crate::manifest::RunManifest;
use crate::svg::{Plot, Series};
use crate::Status;

#[derive(Args)]
pub struct ReproArgs {
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = pendulum::SEED)]
    seed: u64,
    /// Length of the data-driven experiment.
    #[arg(long, default_value_t = PENDULUM_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 100)]
    traj: usize,
    #[arg(long, default_value_t = 200)]
    horizon: usize,
}

struct Check {
    name: &'static str,
    ok: bool,
    detail: String,
}

/// Runs `f` as a named stage; a failure aborts with the stage name after the
/// manifest has been written.
fn stage<T>(m: &mut RunManifest, out: &std::path::Path, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = std::time::Instant::now();
    let r = f();
    m.timings.insert(name.to_string(), t.elapsed().as_secs_f64());
    match r {
        Ok(v) => {
            eprintln!("[{name}] done in {:.2} s", t.elapsed().as_secs_f64());
            Ok(v)
        }
        Err(e) => {
            let manifest = std::mem::replace(m, RunManifest::new("repro-pendulum"));
            let path = manifest.finish(out)?;
            Err(e.context(format!("stage '{name}' failed (manifest: {})", path.display())))
        }
    }
}

fn runs_plot(title: &str, runs: &[ClosedLoopRun], dims: (usize, usize), ellipse: &[(f64, f64)], limits: (Option<f64>, Option<f64>)) -> String {
    let mut p = Plot::new(title, &format!("x{}", dims.0 + 1), &format!("x{}", dims.1 + 1));
    for run in runs {
        p.add(Series::line(run.states.iter().map(|x| (x[dims.0], x[dims.1])).collect(), "#9db4d8").width(0.6));
    }
    p.add(Series::line(ellipse.to_vec(), "#c0392b").closed().width(1.8));
    let span = ellipse.iter().fold((0.0f64, 0.0f64), |acc, q| (acc.0.max(q.0.abs()), acc.1.max(q.1.abs())));
    if let Some(l) = limits.0 {
        if l < 3.0 * span.0 {
            for s in [-l, l] {
                p.add(Series::line(vec![(s, -span.1), (s, span.1)], "black").dashed());
            }
        }
    }
    if let Some(l) = limits.1 {
        if l < 3.0 * span.1 {
            for s in [-l, l] {
                p.add(Series::line(vec![(-span.0, s), (span.0, s)], "black").dashed());
            }
        }
    }
    p.render()
}

fn fmt_row(k: &nalgebra::DMatrix<f64>) -> String {
    let v: Vec<String> = k.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", v.join(", "))
}

fn mc_line(r: &McReport) -> String {
    format!(
        "{} trajectories x {} steps: {} ellipsoid exits, {} safety violations, {} input violations, max level {:.4}",
        r.trajectories, r.horizon, r.violations, r.safety_violations, r.input_violations, r.max_level
    )
}

pub fn run(a: ReproArgs, solver: SolveOptions) -> Result<Status> {
    let out = a.out.clone();
    std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut m = RunManifest::new("repro-pendulum");
    m.seed = Some(a.seed);
    m.solver = Some(solver);
    m.cert_tol = Some(DEFAULT_TOL);
    let sys = pendulum::system();
    let safety = pendulum::safety();
    let input = pendulum::input();
    let gamma = pendulum::GAMMA;
    let dm = pendulum::disturbance().with_seed(a.seed);
    let cfg = SynthConfig { solver, ..SynthConfig::default() };
    let mut checks: Vec<Check> = Vec::new();
    let mut md = String::new();
    let _ = writeln!(md, "# Inverted pendulum: data-driven robust safety-invariant set\n");
    let _ = writeln!(
        md,
        "Seed {}, gamma = {gamma:e}, safety |x1| <= 1, |x3| <= pi/12, input |u| <= 5, disturbances from the \
         orthant-weighted density.\n",
        a.seed
    );

    m.write_output(&out.join("system.json"), &serde_json::to_string_pretty(&pendulum::scenario_file())?)?;

    // Model-based reference; its gain also drives the identification experiment.
    let model = stage(&mut m, &out, "model-synthesis", || {
        Ok(kappa_search(|k| assemble_opm(&sys, &safety, &input, gamma, k), &cfg)?)
    })?;
    m.write_output(&out.join("cert_model.json"), &model.best.to_json()?)?;
    let model_report = certify_rsi(&sys, &model.best, &safety, &input, DEFAULT_TOL)?;
    let _ = writeln!(md, "## Model-based reference\n");
    let _ = writeln!(
        md,
        "kappa = {:.5}, log det Q = {:.4}, K = {}, certification {}.\n",
        model.best.kappa,
        model.best.log_det_q,
        fmt_row(&model.best.k),
        if model_report.pass { "passes" } else { "fails" }
    );

    // Indirect baseline.
    let (ident_ds, trace) = stage(&mut m, &out, "identification", || {
        let ds = ident::pendulum_ident_dataset(&model.best.k, a.seed, PENDULUM_IDENT_SAMPLES)?;
        let grid: Vec<usize> = (6..=ds.len()).collect();
        let trace = ident::prefix_trace(&ds, (2, 2), &grid)?;
        Ok((ds, trace))
    })?;
    m.write_output(&out.join("ident_trace.csv"), &ident::convergence_to_csv(&trace))?;
    let a33 = sys.a()[(2, 2)];
    let longest = ident::longest_run_within(&trace, a33, 1e-2);
    let baseline_ds = ident_ds.prefix(PENDULUM_IDENT_BASELINE)?;
    let indirect = stage(&mut m, &out, "indirect-baseline", || {
        Ok(ident::indirect_pipeline(&baseline_ds, &safety, &input, gamma, &cfg, Some(&sys))?)
    })?;
    m.write_output(&out.join("ident.json"), &indirect.ident.to_json()?)?;
    m.write_output(&out.join("cert_indirect.json"), &indirect.search.best.to_json()?)?;
    let est = indirect.ident.system()?;
    let self_report = certify_rsi(&est, &indirect.search.best, &safety, &input, DEFAULT_TOL)?;
    let truth_report = certify_rsi(&sys, &indirect.search.best, &safety, &input, DEFAULT_TOL)?;
    let indirect_mc = stage(&mut m, &out, "indirect-monte-carlo", || {
        Ok(verify::monte_carlo_invariance(&sys, &indirect.search.best, &safety, &input, a.traj, a.horizon, &dm, a.seed)?)
    })?;
    m.write_output(&out.join("indirect_mc.json"), &serde_json::to_string_pretty(&indirect_mc.report)?)?;
    let r = &indirect_mc.report;
    let indirect_fails = r.violations + r.safety_violations + r.input_violations > 0;
    let mut trace_plot = Plot::new("Least-squares estimate of A(3,3) vs. number of samples", "N", "A_hat(3,3)");
    trace_plot.add(Series::line(trace.iter().map(|&(n, v)| (n as f64, v)).collect(), "#2c7fb8"));
    let n_max = trace.last().map_or(1.0, |t| t.0 as f64);
    trace_plot.add(Series::line(vec![(0.0, a33), (n_max, a33)], "black").dashed());
    let trace_svg = trace_plot.render();
    m.write_output(&out.join("ident_trace.svg"), &trace_svg)?;
    let _ = writeln!(md, "## Indirect baseline (identify, then design)\n");
    let _ = writeln!(
        md,
        "{} samples under u = Kx + w, |w| <= {:e}. The estimate of A(3,3) (true {a33}) stays within 1e-2 of the \
         true value for at most {longest} consecutive N. Fit on the first {} samples:\n",
        PENDULUM_IDENT_SAMPLES,
        ident::PENDULUM_IDENT_AMPLITUDE,
        PENDULUM_IDENT_BASELINE
    );
    let _ = writeln!(md, "```text\nA_hat = {:.4}B_hat = {:.4}```\n", indirect.ident.a_hat, indirect.ident.b_hat);
    let _ = writeln!(
        md,
        "||A - A_hat||_2 = {:.4}, ||B - B_hat||_2 = {:.4}. {}. Certificate on the estimate: kappa = {:.5}, \
         certification against the estimate {}, against the true system {}. Closed loop on the true system: {}.\n",
        indirect.honesty.delta_a.unwrap_or(f64::NAN),
        indirect.honesty.delta_b.unwrap_or(f64::NAN),
        indirect.honesty.statement,
        indirect.search.best.kappa,
        if self_report.pass { "passes" } else { "fails" },
        if truth_report.pass { "passes" } else { "fails" },
        mc_line(r)
    );
    let _ = writeln!(md, "{trace_svg}\n");
    checks.push(Check {
        name: "estimate does not settle (no 500-long window within 1e-2)",
        ok: longest < 500,
        detail: format!("longest window {longest}"),
    });
    checks.push(Check {
        name: "indirect certificate fails on the true system (exits or violations)",
        ok: indirect_fails,
        detail: mc_line(r),
    });

    // Data collection with the rank check first, then synthesis.
    let pe_min = stage(&mut m, &out, "pe-collection", || {
        let mut sampler = UniformInputSampler::new(&input, stream_rng(a.seed, 1))?.with_hold(PENDULUM_HOLD);
        let (_, rep) = extend_until_pe(&sys, &DVector::zeros(4), &dm, &mut sampler, 1, a.samples.max(1), None)?;
        Ok(rep.samples)
    })?;
    let ds = pendulum_dataset(a.samples, a.seed)?;
    let pe = check_pe(&ds, None);
    m.write_output(&out.join("dataset.csv"), &ds.to_csv())?;
    m.write_output(&out.join("dataset.pe.json"), &serde_json::to_string_pretty(&pe)?)?;
    let data = stage(&mut m, &out, "data-synthesis", || {
        Ok(kappa_search(|k| assemble_opd(&ds, &safety, &input, gamma, k, cfg.eps_floor), &cfg)?)
    })?;
    let mut cert = data.best.clone();
    cert.seed = Some(a.seed);
    m.write_output(&out.join("cert_data.json"), &cert.to_json()?)?;
    m.write_output(&out.join("cert_data.trace.csv"), &trace_to_csv(&data.trace))?;
    let report = stage(&mut m, &out, "certification", || Ok(certify_rsi(&sys, &cert, &safety, &input, DEFAULT_TOL)?))?;
    m.write_output(&out.join("certify.json"), &serde_json::to_string_pretty(&report)?)?;
    let mc = stage(&mut m, &out, "monte-carlo", || {
        Ok(verify::monte_carlo_invariance(&sys, &cert, &safety, &input, a.traj, a.horizon, &dm, a.seed)?)
    })?;
    m.write_output(&out.join("mc_report.json"), &serde_json::to_string_pretty(&mc.report)?)?;
    m.write_output(&out.join("trajectories.csv"), &verify::runs_to_csv(&mc.runs))?;

    let mut inputs_csv = String::from("traj,k,u1\n");
    for (t, run) in mc.runs.iter().enumerate() {
        for (k, u) in run.inputs.iter().enumerate() {
            let _ = writeln!(inputs_csv, "{t},{k},{}", rsi_core::io::fmt_f64(u[0]));
        }
    }
    m.write_output(&out.join("inputs.csv"), &inputs_csv)?;

    let _ = writeln!(md, "## Direct data-driven synthesis\n");
    let _ = writeln!(
        md,
        "Inputs uniform on |u| <= 5, each held {PENDULUM_HOLD} samples, from the origin. The rank condition \
         rank [X0; U0] = 5 first holds at N = {pe_min}; synthesis uses N = {} (rank {}, input Hankel rank {}).\n",
        ds.len(),
        pe.rank_xu,
        pe.hankel_rank.map_or("n/a".into(), |h| h.to_string())
    );
    let _ = writeln!(
        md,
        "kappa = {:.5} after {} solves, log det Q = {:.4}, K = {}.\n",
        cert.kappa,
        data.trace.len(),
        cert.log_det_q,
        fmt_row(&cert.k)
    );
    let _ = writeln!(
        md,
        "Certification against the true system: contraction {:.6} <= kappa {:.6}, lambda_min(Q) = {:.3e} >= c = {:.3e}, \
         worst safety margin {:.4}, worst input margin {:.4}: {}.\n",
        report.cond1_value,
        report.kappa,
        report.cond2_value,
        report.c,
        report.worst_safety_margin(),
        report.worst_input_margin(),
        if report.pass { "pass" } else { "FAIL" }
    );
    let _ = writeln!(md, "Monte-Carlo on the true system: {}.\n", mc_line(&mc.report));

    let limits = safety.rows();
    let bound = |i: usize| {
        limits.row_iter().filter_map(|r| (r[i] > 0.0).then(|| 1.0 / r[i])).fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |x| x.min(v))))
    };
    for (dims, name) in [((0usize, 1usize), "x1x2"), ((2, 3), "x3x4")] {
        let shape = verify::project_ellipsoid(&cert.q, dims)?;
        let pts = verify::ellipse_polyline(&shape, 256);
        let names = (format!("x{}", dims.0 + 1), format!("x{}", dims.1 + 1));
        m.write_output(&out.join(format!("ellipse_{name}.csv")), &verify::polyline_to_csv(&pts, (&names.0, &names.1)))?;
        let svg = runs_plot(
            &format!("Projection onto ({}, {}) with closed-loop trajectories", names.0, names.1),
            &mc.runs,
            dims,
            &pts,
            (bound(dims.0), bound(dims.1)),
        );
        m.write_output(&out.join(format!("ellipse_{name}.svg")), &svg)?;
        let _ = writeln!(md, "{svg}\n");
    }
    let mut up = Plot::new("Inputs along the closed-loop trajectories", "k", "u");
    for run in &mc.runs {
        up.add(Series::line(run.inputs.iter().enumerate().map(|(k, u)| (k as f64, u[0])).collect(), "#9db4d8").width(0.6));
    }
    let u_max = mc.runs.iter().flat_map(|r| r.inputs.iter()).fold(0.0f64, |acc, u| acc.max(u[0].abs()));
    if u_max > 1.0 {
        for s in [-5.0, 5.0] {
            up.add(Series::line(vec![(0.0, s), (a.horizon as f64, s)], "black").dashed());
        }
    }
    let input_svg = up.render();
    m.write_output(&out.join("inputs.svg"), &input_svg)?;
    let _ = writeln!(md, "{input_svg}\n");

    checks.push(Check {
        name: "data-driven kappa in (0.9, 1)",
        ok: cert.kappa > 0.9 && cert.kappa < 1.0,
        detail: format!("kappa = {:.5}", cert.kappa),
    });
    checks.push(Check {
        name: "data-driven certificate passes against the true system",
        ok: report.pass && report.worst_safety_margin() <= 1.0 + 1e-6 && report.worst_input_margin() <= 1.0 + 1e-6,
        detail: report.diagnostics.join("; "),
    });
    let r = &mc.report;
    checks.push(Check {
        name: "Monte-Carlo: no ellipsoid, safety or input violations",
        ok: r.violations == 0 && r.safety_violations == 0 && r.input_violations == 0,
        detail: mc_line(r),
    });
    let _ = writeln!(md, "## Checks\n\n| check | result | detail |\n|---|---|---|");
    for c in &checks {
        let _ = writeln!(md, "| {} | {} | {} |", c.name, if c.ok { "ok" } else { "FAIL" }, c.detail);
    }
    let mut all_ok = true;
    for c in &checks {
        println!("{} {}: {}", if c.ok { "ok  " } else { "FAIL" }, c.name, c.detail);
        all_ok &= c.ok;
    }
    m.write_output(&out.join("report.md"), &md)?;
    let path = m.finish(&out)?;
    println!("report: {}, manifest: {}", out.join("report.md").display(), path.display());
    Ok(if all_ok { Status::Ok } else { Status::Negative })
}
