//! Analytic certification, sampling-based falsification, Monte-Carlo runs and
//! ellipse projections.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, lambda_max, lambda_min, quad_inv, sqrt_psd, symmetrize};
use crate::model::{stream_rng, uniform_ball, DisturbanceModel, HalfspaceSet, InputSet, LinearSystem, SafetySet};
use crate::synth::RsiCertificate;

/// Default certification tolerance.
pub const DEFAULT_TOL: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertReport {
    /// `sup { xᵀFᵀQ⁻¹Fx : xᵀQ⁻¹x ≤ 1 }` with `F = A + BK`; must be `≤ κ`.
    pub cond1_value: f64,
    /// `λmin(Q)`; must be `≥ c`.
    pub cond2_value: f64,
    pub kappa: f64,
    pub c: f64,
    /// `a_i Q a_iᵀ` per safety row.
    pub safety_margins: Vec<f64>,
    /// `b_j K Q Kᵀ b_jᵀ` per input row.
    pub input_margins: Vec<f64>,
    pub pass: bool,
    pub tolerance: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl CertReport {
    pub fn worst_safety_margin(&self) -> f64 {
        self.safety_margins.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn worst_input_margin(&self) -> f64 {
        self.input_margins.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

fn check_dims(sys: &LinearSystem, cert: &RsiCertificate) -> Result<()> {
    if cert.n() != sys.n() || cert.m() != sys.m() || cert.q.ncols() != sys.n() || cert.k.ncols() != sys.n() {
        return Err(Error::Dimension(format!(
            "certificate is for n = {}, m = {}, system has n = {}, m = {}",
            cert.n(),
            cert.m(),
            sys.n(),
            sys.m()
        )));
    }
    Ok(())
}

/// Eigenvalue form of the two invariance conditions plus the constraint
/// margins, evaluated against a given system.
pub fn certify_rsi(
    sys: &LinearSystem,
    cert: &RsiCertificate,
    safety: &SafetySet,
    input: &InputSet,
    tol: f64,
) -> Result<CertReport> {
    check_dims(sys, cert)?;
    if safety.dim() != sys.n() || input.dim() != sys.m() {
        return Err(Error::Dimension("constraint sets do not match the system".into()));
    }
    let q = symmetrize(&cert.q);
    let chol = cholesky(&q)?;
    let f = sys.closed_loop(&cert.k)?;
    // Y = L⁻¹ F Q^{1/2}, so YᵀY = Q^{1/2} Fᵀ Q⁻¹ F Q^{1/2}.
    let y = chol.l().solve_lower_triangular(&(&f * sqrt_psd(&q))).ok_or_else(|| Error::SingularShape {
        lambda_min: lambda_min(&q),
        condition: f64::INFINITY,
    })?;
    let cond1_value = lambda_max(&(y.transpose() * &y));
    let cond2_value = lambda_min(&q);

    let mut diagnostics = Vec::new();
    let c = if cert.kappa >= 1.0 {
        if cert.gamma > 0.0 {
            diagnostics.push(format!(
                "{}",
                Error::KappaOneWithDisturbance { gamma: cert.gamma }
            ));
        }
        0.0
    } else {
        cert.gamma / (1.0 - cert.kappa.sqrt()).powi(2)
    };

    let safety_margins: Vec<f64> =
        safety.rows().row_iter().map(|a| (&a * &q * a.transpose())[(0, 0)]).collect();
    let kqk = &cert.k * &q * cert.k.transpose();
    let input_margins: Vec<f64> = input.rows().row_iter().map(|b| (&b * &kqk * b.transpose())[(0, 0)]).collect();

    let ok1 = cond1_value <= cert.kappa + tol;
    let ok2 = cond2_value >= c - tol;
    if !ok1 {
        diagnostics.push(format!("contraction {cond1_value:.9e} exceeds kappa = {}", cert.kappa));
    }
    if !ok2 {
        diagnostics.push(format!("lambda_min(Q) = {cond2_value:.9e} is below c = {c:.9e}"));
    }
    for (i, m) in safety_margins.iter().enumerate() {
        if *m > 1.0 + tol {
            diagnostics.push(format!("safety row {i}: a Q a' = {m:.9e} > 1"));
        }
    }
    for (j, m) in input_margins.iter().enumerate() {
        if *m > 1.0 + tol {
            diagnostics.push(format!("input row {j}: b K Q K' b' = {m:.9e} > 1"));
        }
    }
    let kappa_one_bad = cert.kappa >= 1.0 && cert.gamma > 0.0;
    let pass = ok1
        && ok2
        && !kappa_one_bad
        && safety_margins.iter().all(|m| *m <= 1.0 + tol)
        && input_margins.iter().all(|m| *m <= 1.0 + tol);
    Ok(CertReport {
        cond1_value,
        cond2_value,
        kappa: cert.kappa,
        c,
        safety_margins,
        input_margins,
        pass,
        tolerance: tol,
        diagnostics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    UniformVolume,
    Boundary,
}

/// Draws from `{x : xᵀQ⁻¹x ≤ 1}` through a cached `Q^{1/2}`.
#[derive(Debug, Clone)]
pub struct EllipsoidSampler {
    root: DMatrix<f64>,
}

impl EllipsoidSampler {
    pub fn new(q: &DMatrix<f64>) -> Result<Self> {
        cholesky(q)?;
        Ok(Self { root: sqrt_psd(q) })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, mode: SampleMode) -> DVector<f64> {
        let n = self.root.nrows();
        let z = match mode {
            SampleMode::UniformVolume => uniform_ball(n, 1.0, rng),
            SampleMode::Boundary => loop {
                let g = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                let norm = g.norm();
                if norm > 0.0 {
                    break g / norm;
                }
            },
        };
        &self.root * z
    }
}

pub fn sample_in_ellipsoid<R: Rng + ?Sized>(q: &DMatrix<f64>, rng: &mut R, mode: SampleMode) -> Result<DVector<f64>> {
    Ok(EllipsoidSampler::new(q)?.sample(rng, mode))
}

/// Largest `(Fx + d)ᵀQ⁻¹(Fx + d)` over `x` on the ellipsoid boundary and `d`
/// alternately on the sphere `‖d‖ = √γ` and inside the ball.
pub fn one_step_falsify<R: Rng + ?Sized>(
    sys: &LinearSystem,
    cert: &RsiCertificate,
    n_samples: usize,
    rng: &mut R,
) -> Result<f64> {
    check_dims(sys, cert)?;
    let chol = cholesky(&cert.q)?;
    let f = sys.closed_loop(&cert.k)?;
    let sampler = EllipsoidSampler::new(&cert.q)?;
    let radius = cert.gamma.sqrt();
    let n = sys.n();
    let mut worst = f64::NEG_INFINITY;
    for s in 0..n_samples {
        let x = sampler.sample(rng, SampleMode::Boundary);
        let d = if radius == 0.0 {
            DVector::zeros(n)
        } else if s % 2 == 0 {
            crate::model::unit_sphere(n, rng) * radius
        } else {
            uniform_ball(n, radius, rng)
        };
        worst = worst.max(quad_inv(&chol, &(&f * x + d)));
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub trajectories: usize,
    pub horizon: usize,
    /// State samples with `xᵀQ⁻¹x > 1 + tol`.
    pub violations: usize,
    /// State samples outside the safety set.
    pub safety_violations: usize,
    /// Inputs outside the input set.
    pub input_violations: usize,
    /// Trajectories with at least one violation of any kind.
    pub violating_trajectories: usize,
    pub max_level: f64,
    pub tolerance: f64,
    pub certified: bool,
    /// Simulated disturbance bound exceeds the certified one.
    pub disturbance_mismatch: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// One closed-loop run: states `x(0..=H)` and inputs `u(0..H)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopRun {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub levels: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct McOutcome {
    pub report: McReport,
    pub runs: Vec<ClosedLoopRun>,
}

/// Closed-loop runs of `u = Kx` from initial states uniform in the ellipsoid.
/// Trajectory `i` draws its initial state and disturbances from RNG stream
/// `i + 1` of `seed`; results are merged in trajectory order.
#[allow(clippy::too_many_arguments)]
pub fn monte_carlo_invariance(
    sys: &LinearSystem,
    cert: &RsiCertificate,
    safety: &SafetySet,
    input: &InputSet,
    n_traj: usize,
    horizon: usize,
    dm: &DisturbanceModel,
    seed: u64,
) -> Result<McOutcome> {
    check_dims(sys, cert)?;
    if dm.dim() != sys.n() {
        return Err(Error::Dimension("disturbance dimension does not match the system".into()));
    }
    let tol = DEFAULT_TOL;
    let cert_report = certify_rsi(sys, cert, safety, input, tol)?;
    let mut warnings = Vec::new();
    if !cert_report.pass {
        warnings.push(format!("certificate does not pass certification: {}", cert_report.diagnostics.join("; ")));
    }
    let mismatch = dm.gamma() > cert.gamma * (1.0 + 1e-12);
    let chol = cholesky(&cert.q)?;
    let sampler = EllipsoidSampler::new(&cert.q)?;
    let f = sys.closed_loop(&cert.k)?;

    let runs: Vec<ClosedLoopRun> = (0..n_traj)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64 + 1);
            let mut x = sampler.sample(&mut rng, SampleMode::UniformVolume);
            let mut states = vec![x.clone()];
            let mut inputs = Vec::with_capacity(horizon);
            let mut levels = vec![quad_inv(&chol, &x)];
            for _ in 0..horizon {
                let u = &cert.k * &x;
                let d = dm.sample(&mut rng);
                x = &f * &x + d;
                inputs.push(u);
                levels.push(quad_inv(&chol, &x));
                states.push(x.clone());
            }
            ClosedLoopRun { states, inputs, levels }
        })
        .collect();

    let mut report = McReport {
        trajectories: n_traj,
        horizon,
        violations: 0,
        safety_violations: 0,
        input_violations: 0,
        violating_trajectories: 0,
        max_level: f64::NEG_INFINITY,
        tolerance: tol,
        certified: cert_report.pass,
        disturbance_mismatch: mismatch,
        warnings,
    };
    for run in &runs {
        let before = report.violations + report.safety_violations + report.input_violations;
        for (x, level) in run.states.iter().zip(&run.levels) {
            report.max_level = report.max_level.max(*level);
            if *level > 1.0 + tol {
                report.violations += 1;
            }
            if safety.contains(x)?.margin > 1.0 + tol {
                report.safety_violations += 1;
            }
        }
        for u in &run.inputs {
            if input.contains(u)?.margin > 1.0 + tol {
                report.input_violations += 1;
            }
        }
        if report.violations + report.safety_violations + report.input_violations > before {
            report.violating_trajectories += 1;
        }
    }
    let any = report.violations + report.safety_violations + report.input_violations > 0;
    if any && mismatch {
        report.warnings.push(format!(
            "violations are attributed to the disturbance mismatch: simulated gamma = {:e} exceeds the certified gamma = {:e}",
            dm.gamma(),
            cert.gamma
        ));
    } else if mismatch {
        report.warnings.push(format!(
            "simulated gamma = {:e} exceeds the certified gamma = {:e}; invariance is not guaranteed",
            dm.gamma(),
            cert.gamma
        ));
    }
    Ok(McOutcome { report, runs })
}

/// CSV of closed-loop runs: `traj,k,x1..xn,u1..um,level` (the last state of
/// each run has empty input fields).
pub fn runs_to_csv(runs: &[ClosedLoopRun]) -> String {
    let n = runs.first().map_or(0, |r| r.states[0].len());
    let m = runs.first().and_then(|r| r.inputs.first()).map_or(0, |u| u.len());
    let mut out = String::from("traj,k");
    for i in 1..=n {
        out.push_str(&format!(",x{i}"));
    }
    for j in 1..=m {
        out.push_str(&format!(",u{j}"));
    }
    out.push_str(",level\n");
    for (t, run) in runs.iter().enumerate() {
        for (k, x) in run.states.iter().enumerate() {
            out.push_str(&format!("{t},{k}"));
            for v in x.iter() {
                out.push_str(&format!(",{}", crate::io::fmt_f64(*v)));
            }
            match run.inputs.get(k) {
                Some(u) => {
                    for v in u.iter() {
                        out.push_str(&format!(",{}", crate::io::fmt_f64(*v)));
                    }
                }
                None => out.push_str(&",".repeat(m)),
            }
            out.push_str(&format!(",{}\n", crate::io::fmt_f64(run.levels[k])));
        }
    }
    out
}

/// Shape of the projection of `{xᵀQ⁻¹x ≤ 1}` onto coordinates `(i, j)`
/// (0-based): the principal submatrix `Q[{i,j},{i,j}]`.
pub fn project_ellipsoid(q: &DMatrix<f64>, dims: (usize, usize)) -> Result<DMatrix<f64>> {
    let n = q.nrows();
    let (i, j) = dims;
    if i >= n || j >= n || i == j {
        return Err(Error::Domain(format!("cannot project an {n}-dimensional ellipsoid onto ({i}, {j})")));
    }
    cholesky(q)?;
    Ok(DMatrix::from_row_slice(2, 2, &[q[(i, i)], q[(i, j)], q[(j, i)], q[(j, j)]]))
}

/// Closed boundary polyline of `{yᵀ S⁻¹ y ≤ 1}` for a 2×2 shape `S`.
pub fn ellipse_polyline(shape: &DMatrix<f64>, points: usize) -> Vec<(f64, f64)> {
    let root = sqrt_psd(shape);
    (0..points)
        .map(|k| {
            let t = 2.0 * std::f64::consts::PI * k as f64 / points as f64;
            let p = &root * DVector::from_vec(vec![t.cos(), t.sin()]);
            (p[0], p[1])
        })
        .collect()
}

pub fn polyline_to_csv(points: &[(f64, f64)], names: (&str, &str)) -> String {
    let mut out = format!("{},{}\n", names.0, names.1);
    for (a, b) in points {
        out.push_str(&format!("{},{}\n", crate::io::fmt_f64(*a), crate::io::fmt_f64(*b)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{Provenance, Tolerances};

    fn cert(q: DMatrix<f64>, k: DMatrix<f64>, kappa: f64, gamma: f64) -> RsiCertificate {
        let c = if kappa < 1.0 { gamma / (1.0 - kappa.sqrt()).powi(2) } else { 0.0 };
        RsiCertificate {
            log_det_q: q.determinant().ln(),
            q,
            k,
            kappa,
            gamma,
            c,
            provenance: Provenance::ModelBased,
            slack: None,
            tolerances: Tolerances::default(),
            seed: None,
        }
    }

    fn empty_sets(n: usize, m: usize) -> (SafetySet, InputSet) {
        (SafetySet::new(DMatrix::zeros(0, n)).unwrap(), InputSet::new(DMatrix::zeros(0, m)).unwrap())
    }

    #[test]
    fn diagonal_contraction() {
        let sys = LinearSystem::new(DMatrix::identity(2, 2) * 0.5, DMatrix::identity(2, 2)).unwrap();
        let c = cert(DMatrix::identity(2, 2), DMatrix::zeros(2, 2), 0.25, 0.0);
        let (s, u) = empty_sets(2, 2);
        let r = certify_rsi(&sys, &c, &s, &u, DEFAULT_TOL).unwrap();
        assert!((r.cond1_value - 0.25).abs() < 1e-14);
        assert!(r.pass);
    }

    #[test]
    fn cond2_threshold() {
        let sys = LinearSystem::new(DMatrix::identity(2, 2) * 0.5, DMatrix::identity(2, 2)).unwrap();
        let c = cert(DMatrix::identity(2, 2), DMatrix::zeros(2, 2), 0.25, 0.04);
        let (s, u) = empty_sets(2, 2);
        let r = certify_rsi(&sys, &c, &s, &u, DEFAULT_TOL).unwrap();
        assert!((r.c - 0.16).abs() < 1e-15);
        assert_eq!(r.cond2_value, 1.0);
        assert!(r.pass);
    }

    #[test]
    fn kappa_one_with_disturbance_fails() {
        let sys = LinearSystem::new(DMatrix::identity(1, 1) * 0.5, DMatrix::identity(1, 1)).unwrap();
        let c = cert(DMatrix::identity(1, 1), DMatrix::zeros(1, 1), 1.0, 0.01);
        let (s, u) = empty_sets(1, 1);
        let r = certify_rsi(&sys, &c, &s, &u, DEFAULT_TOL).unwrap();
        assert!(!r.pass);
        assert!(r.diagnostics.iter().any(|d| d.contains("kappa = 1")));
    }

    #[test]
    fn boundary_samples_lie_on_the_shell() {
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let mut rng = stream_rng(3, 0);
        for _ in 0..1000 {
            let x = sample_in_ellipsoid(&q, &mut rng, SampleMode::Boundary).unwrap();
            assert!((x[0] * x[0] / 4.0 + x[1] * x[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn projections() {
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0, 1.0, 1.0]));
        assert_eq!(project_ellipsoid(&q, (0, 1)).unwrap(), DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0])));
        assert_eq!(project_ellipsoid(&DMatrix::identity(4, 4), (2, 3)).unwrap(), DMatrix::identity(2, 2));
        assert!(project_ellipsoid(&q, (0, 4)).is_err());
        assert!(project_ellipsoid(&q, (1, 1)).is_err());
    }

    #[test]
    fn polyline_semi_axes() {
        let pts = ellipse_polyline(&DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0])), 256);
        assert_eq!(pts.len(), 256);
        let max_x = pts.iter().map(|p| p.0).fold(f64::MIN, f64::max);
        let max_y = pts.iter().map(|p| p.1).fold(f64::MIN, f64::max);
        assert!((max_x - 2.0).abs() < 1e-12 && (max_y - 1.0).abs() < 1e-3);
    }

    #[test]
    fn autonomous_contraction_has_no_violations() {
        let sys = LinearSystem::new(DMatrix::identity(2, 2) * 0.5, DMatrix::zeros(2, 1)).unwrap();
        let c = cert(DMatrix::identity(2, 2), DMatrix::zeros(1, 2), 0.25, 0.0);
        let (s, u) = empty_sets(2, 1);
        let out = monte_carlo_invariance(&sys, &c, &s, &u, 20, 30, &DisturbanceModel::zero(2), 1).unwrap();
        assert_eq!(out.report.violations, 0);
        assert_eq!(out.runs.len(), 20);
        assert!(out.report.certified);
    }
}
