//! Ellipsoidal robust safety-invariant sets as max-det LMI programs.
//!
//! Both branches search for `Q ≻ 0` and a gain variable `G = K Q`:
//!
//! * model based (`G = K̄`): contraction block
//!   `[κQ, (AQ + BK̄)ᵀ; AQ + BK̄, Q] ⪰ 0`;
//! * data driven (`G = Z̄`): one `(3n + m)`-sized block that certifies the
//!   contraction for every `(A, B)` consistent with the recorded data up to
//!   `dᵀd ≤ γ`, with one multiplier `ε_p` per sample.
//!
//! Both add `Q ⪰ cI` with `c = γ / (1 − √κ)²`, the safety rows
//! `a_i Q a_iᵀ ≤ 1`, and the input blocks `[1, b_j G; Gᵀb_jᵀ, Q] ⪰ 0`, and
//! maximize `log det Q`. The controller is `K = G Q⁻¹`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{check_pe, Dataset, PeReport};
use crate::error::{Error, Result};
use crate::io::matrix;
use crate::linalg::{cholesky, lambda_max, lambda_min, symmetrize};
use crate::lmi::{self, LmiProblem, LmiSolution, SolveOptions, SolveStatus};
use crate::model::{HalfspaceSet, InputSet, LinearSystem, SafetySet};

/// Default lower bound on each multiplier `ε_p`.
pub const EPS_FLOOR: f64 = 1e-9;
/// `Q ⪰ δI` replaces `Q ≻ 0` when `c = 0`.
pub const Q_FLOOR: f64 = 1e-9;

/// `γ / (1 − √κ)²`, or 0 at `κ = 1` (which only admits `γ = 0`).
pub fn c_bound(gamma: f64, kappa: f64) -> Result<f64> {
    if !(kappa > 0.0 && kappa <= 1.0) {
        return Err(Error::Domain(format!("kappa must lie in (0, 1], got {kappa}")));
    }
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::Domain(format!("gamma must be finite and nonnegative, got {gamma}")));
    }
    if kappa == 1.0 {
        if gamma > 0.0 {
            return Err(Error::KappaOneWithDisturbance { gamma });
        }
        return Ok(0.0);
    }
    Ok(gamma / (1.0 - kappa.sqrt()).powi(2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    ModelBased,
    DataDriven { samples: usize, dataset_hash: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub feas_tol: f64,
    pub opt_tol: f64,
    pub eps_floor: f64,
    pub q_floor: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        let s = SolveOptions::default();
        Self { feas_tol: s.feas_tol, opt_tol: s.opt_tol, eps_floor: EPS_FLOOR, q_floor: Q_FLOOR }
    }
}

/// Invariant ellipsoid `{x : xᵀQ⁻¹x ≤ 1}` with its gain `u = Kx`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsiCertificate {
    #[serde(rename = "Q", with = "matrix")]
    pub q: DMatrix<f64>,
    #[serde(rename = "K", with = "matrix")]
    pub k: DMatrix<f64>,
    pub kappa: f64,
    pub gamma: f64,
    pub c: f64,
    pub provenance: Provenance,
    /// Multipliers `ε_p` of the data-driven branch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slack: Option<Vec<f64>>,
    pub log_det_q: f64,
    pub tolerances: Tolerances,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl RsiCertificate {
    pub fn n(&self) -> usize {
        self.q.nrows()
    }

    pub fn m(&self) -> usize {
        self.k.nrows()
    }

    /// Checks shapes and the stored invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.q.ncols() != n || self.k.ncols() != n || n == 0 {
            return Err(Error::Dimension(format!(
                "Q is {}x{} and K is {}x{}",
                self.q.nrows(),
                self.q.ncols(),
                self.k.nrows(),
                self.k.ncols()
            )));
        }
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(Error::Domain(format!("kappa must lie in (0, 1], got {}", self.kappa)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Domain(format!("gamma must be nonnegative, got {}", self.gamma)));
        }
        let lmin = lambda_min(&self.q);
        if !(lmin > 0.0) {
            return Err(Error::SingularShape { lambda_min: lmin, condition: f64::INFINITY });
        }
        if let (Provenance::DataDriven { samples, .. }, Some(eps)) = (&self.provenance, &self.slack) {
            if eps.len() != *samples {
                return Err(Error::Dimension(format!("{} multipliers for {samples} samples", eps.len())));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    /// `xᵀQ⁻¹x` via a Cholesky solve.
    pub fn level(&self, x: &DVector<f64>) -> Result<f64> {
        let chol = cholesky(&self.q)?;
        Ok(crate::linalg::quad_inv(&chol, x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMode {
    #[default]
    MaxVolume,
    MaxKappa,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub kappa_init: f64,
    /// Stop once the bracket around the feasibility frontier is this narrow.
    pub e: f64,
    /// Solve budget.
    pub i_max: usize,
    pub search_mode: SearchMode,
    pub eps_floor: f64,
    pub solver: SolveOptions,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            kappa_init: 0.9,
            e: 1e-3,
            i_max: 30,
            search_mode: SearchMode::MaxVolume,
            eps_floor: EPS_FLOOR,
            solver: SolveOptions::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa_init > 0.0 && self.kappa_init <= 1.0) {
            return Err(Error::Domain(format!("kappa_init must lie in (0, 1], got {}", self.kappa_init)));
        }
        if !(self.e > 0.0) {
            return Err(Error::Domain(format!("bisection width must be positive, got {}", self.e)));
        }
        if self.i_max == 0 {
            return Err(Error::Domain("i_max must be at least 1".into()));
        }
        if !(self.eps_floor > 0.0) {
            return Err(Error::Domain(format!("eps_floor must be positive, got {}", self.eps_floor)));
        }
        Ok(())
    }

    pub fn tolerances(&self) -> Tolerances {
        Tolerances { feas_tol: self.solver.feas_tol, opt_tol: self.solver.opt_tol, eps_floor: self.eps_floor, q_floor: Q_FLOOR }
    }
}

/// An assembled program plus what is needed to read a certificate back.
#[derive(Debug, Clone)]
pub struct SynthProblem {
    pub problem: LmiProblem,
    pub provenance: Provenance,
    pub gamma: f64,
    pub kappa: f64,
    pub c: f64,
    pub eps_floor: f64,
    /// Rank diagnostics of the data (data-driven branch only).
    pub pe: Option<PeReport>,
    pub warnings: Vec<String>,
}

impl SynthProblem {
    pub fn solve(&self, opts: &SolveOptions) -> LmiSolution {
        lmi::solve(&self.problem, opts)
    }
}

fn add_common(
    p: &mut LmiProblem,
    n: usize,
    q_id: lmi::VarId,
    g_id: lmi::VarId,
    c: f64,
    safety: &SafetySet,
    input: &InputSet,
) -> Result<()> {
    let qv = p.var(q_id).clone();
    let gv = p.var(g_id).clone();
    let i_n = DMatrix::identity(n, n);

    let floor = if c > 0.0 { c } else { Q_FLOOR };
    let mut lower = p.block(n);
    lower.place_var(0, 0, &qv, &i_n, &i_n)?.place_const(0, 0, &(-floor * &i_n))?;
    p.add_psd("Q >= cI", lower)?;

    for (i, a) in safety.rows().row_iter().enumerate() {
        let a = DMatrix::from_row_slice(1, n, a.clone_owned().as_slice());
        let mut e = p.block(1);
        e.place_const(0, 0, &DMatrix::identity(1, 1))?.place_var(0, 0, &qv, &(-&a), &a.transpose())?;
        p.add_nonneg(&format!("safety row {i}"), e)?;
    }

    let m = gv.shape().0;
    for (j, b) in input.rows().row_iter().enumerate() {
        let b = DMatrix::from_row_slice(1, b.ncols(), b.clone_owned().as_slice());
        if b.ncols() != m {
            return Err(Error::Dimension(format!("input row {j} has {} entries, expected {m}", b.ncols())));
        }
        let mut e = p.block(1 + n);
        e.place_const(0, 0, &DMatrix::identity(1, 1))?
            .place_var(0, 1, &gv, &b, &i_n)?
            .place_var(1, 1, &qv, &i_n, &i_n)?;
        p.add_psd(&format!("input row {j}"), e)?;
    }
    p.maximize_log_det(q_id)
}

fn check_sets(n: usize, m: usize, safety: &SafetySet, input: &InputSet) -> Result<()> {
    if safety.dim() != n {
        return Err(Error::Dimension(format!("safety set has dimension {}, state has {n}", safety.dim())));
    }
    if input.dim() != m {
        return Err(Error::Dimension(format!("input set has dimension {}, input has {m}", input.dim())));
    }
    Ok(())
}

/// Model-based program with variables `Q` and `Kbar`.
pub fn assemble_opm(
    sys: &LinearSystem,
    safety: &SafetySet,
    input: &InputSet,
    gamma: f64,
    kappa: f64,
) -> Result<SynthProblem> {
    let c = c_bound(gamma, kappa)?;
    let (n, m) = (sys.n(), sys.m());
    check_sets(n, m, safety, input)?;
    let mut p = LmiProblem::new();
    let q = p.symmetric("Q", n);
    let kb = p.matrix("Kbar", m, n);
    let (qv, kv) = (p.var(q).clone(), p.var(kb).clone());
    let i_n = DMatrix::identity(n, n);

    let mut contraction = p.block(2 * n);
    contraction
        .place_var(0, 0, &qv, &(kappa * &i_n), &i_n)?
        .place_var(n, 0, &qv, sys.a(), &i_n)?
        .place_var(n, 0, &kv, sys.b(), &i_n)?
        .place_var(n, n, &qv, &i_n, &i_n)?;
    p.add_psd("contraction", contraction)?;
    add_common(&mut p, n, q, kb, c, safety, input)?;
    Ok(SynthProblem {
        problem: p,
        provenance: Provenance::ModelBased,
        gamma,
        kappa,
        c,
        eps_floor: 0.0,
        pe: None,
        warnings: Vec::new(),
    })
}

/// Data-driven program with variables `Q`, `Zbar` and `eps_1 .. eps_N`.
pub fn assemble_opd(
    ds: &Dataset,
    safety: &SafetySet,
    input: &InputSet,
    gamma: f64,
    kappa: f64,
    eps_floor: f64,
) -> Result<SynthProblem> {
    let c = c_bound(gamma, kappa)?;
    if ds.is_empty() {
        return Err(Error::Shape("the dataset has no samples".into()));
    }
    if !(eps_floor > 0.0) {
        return Err(Error::Domain(format!("eps_floor must be positive, got {eps_floor}")));
    }
    let (n, m, len) = (ds.n(), ds.m(), ds.len());
    check_sets(n, m, safety, input)?;
    let pe = check_pe(ds, None);
    let mut warnings = Vec::new();
    if !pe.feasible_set_bounded {
        warnings.push(format!(
            "rank([X0; U0]) = {} < n + m = {}: the set of systems consistent with the data is unbounded, \
             so a feasible solution is unlikely",
            pe.rank_xu, pe.required_xu
        ));
    }

    let mut p = LmiProblem::new();
    let q = p.symmetric("Q", n);
    let zb = p.matrix("Zbar", m, n);
    let eps: Vec<_> = (0..len).map(|k| p.scalar(&format!("eps_{}", k + 1), Some(eps_floor), None)).collect();
    let (qv, zv) = (p.var(q).clone(), p.var(zb).clone());
    let i_n = DMatrix::identity(n, n);
    let i_m = DMatrix::identity(m, m);

    let size = 3 * n + m;
    let (r1, r2, r3) = (n, 2 * n, 2 * n + m);
    let mut big = p.block(size);
    big.place_var(0, 0, &qv, &(kappa * &i_n), &i_n)?
        .place_var(r1, r1, &qv, &(-&i_n), &i_n)?
        .place_var(r2, r1, &zv, &(-&i_m), &i_n)?
        .place_var(r2, r3, &zv, &i_m, &i_n)?
        .place_var(r3, r3, &qv, &i_n, &i_n)?;
    for (k, id) in eps.iter().enumerate() {
        let mut v = DVector::zeros(size);
        v.rows_mut(0, n).copy_from(&ds.x1().column(k));
        v.rows_mut(r1, n).copy_from(&(-ds.x0().column(k)));
        v.rows_mut(r2, m).copy_from(&(-ds.u0().column(k)));
        let mut term = &v * v.transpose();
        for i in 0..n {
            term[(i, i)] -= gamma;
        }
        let var = p.var(*id).clone();
        big.add_scalar_term(&var, &term)?;
    }
    p.add_psd("data contraction", big)?;
    add_common(&mut p, n, q, zb, c, safety, input)?;
    Ok(SynthProblem {
        problem: p,
        provenance: Provenance::DataDriven { samples: len, dataset_hash: ds.content_hash() },
        gamma,
        kappa,
        c,
        eps_floor,
        pe: Some(pe),
        warnings,
    })
}

/// Reads `Q` and `K = G Q⁻¹` off a solution (`G` is `Kbar` or `Zbar`).
pub fn extract_certificate(
    sol: &LmiSolution,
    provenance: &Provenance,
    gamma: f64,
    kappa: f64,
) -> Result<RsiCertificate> {
    if !sol.status.is_feasible() {
        return Err(Error::Solver(format!("cannot extract a certificate from a {:?} solve", sol.status)));
    }
    let c = c_bound(gamma, kappa)?;
    let q = symmetrize(sol.value("Q").ok_or_else(|| Error::Problem("solution has no Q".into()))?);
    let gain_name = match provenance {
        Provenance::ModelBased => "Kbar",
        Provenance::DataDriven { .. } => "Zbar",
    };
    let g = sol.value(gain_name).ok_or_else(|| Error::Problem(format!("solution has no {gain_name}")))?;
    let lmin = lambda_min(&q);
    let condition = lambda_max(&q) / lmin;
    if !(lmin > Q_FLOOR * 0.5) || !condition.is_finite() || condition > 1e14 {
        return Err(Error::SingularShape { lambda_min: lmin, condition });
    }
    let chol = cholesky(&q)?;
    // K Q = G with Q symmetric, so K = (Q⁻¹ Gᵀ)ᵀ.
    let k = chol.solve(&g.transpose()).transpose();
    let slack = match provenance {
        Provenance::ModelBased => None,
        Provenance::DataDriven { samples, .. } => Some(
            (1..=*samples)
                .map(|p| {
                    sol.value(&format!("eps_{p}"))
                        .map(|v| v[(0, 0)])
                        .ok_or_else(|| Error::Problem(format!("solution has no eps_{p}")))
                })
                .collect::<Result<Vec<f64>>>()?,
        ),
    };
    let log_det_q = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(RsiCertificate {
        q,
        k,
        kappa,
        gamma,
        c,
        provenance: provenance.clone(),
        slack,
        log_det_q,
        tolerances: Tolerances::default(),
        seed: None,
    })
}

/// One solve of the κ search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub kappa: f64,
    pub status: SolveStatus,
    /// `log det Q` when feasible.
    pub objective: Option<f64>,
    /// Phase I shift when infeasible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<f64>,
    pub iterations: usize,
}

pub fn trace_to_csv(trace: &[TraceEntry]) -> String {
    let mut out = String::from("solve,kappa,status,log_det_q,shift,iterations\n");
    for (i, t) in trace.iter().enumerate() {
        let obj = t.objective.map(crate::io::fmt_f64).unwrap_or_default();
        let shift = t.shift.map(crate::io::fmt_f64).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{:?},{},{},{}\n",
            i + 1,
            crate::io::fmt_f64(t.kappa),
            t.status,
            obj,
            shift,
            t.iterations
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best: RsiCertificate,
    pub trace: Vec<TraceEntry>,
    pub warnings: Vec<String>,
}

const KAPPA_LO: f64 = f64::EPSILON;
const KAPPA_HI: f64 = 1.0 - f64::EPSILON;

/// Bisection on feasibility in κ.
///
/// The first solve is at `kappa_init`. While nothing is feasible the search
/// halves the widest unexplored gap above `kappa_init` (below it once the
/// upper range is resolved to `e`). Once a feasible κ is known it bisects
/// between it and the
/// nearest infeasible κ above, until that bracket is narrower than `e` or
/// `i_max` solves have run. The returned certificate is the feasible solve
/// with the largest κ or the largest `log det Q`, per `search_mode`.
pub fn kappa_search<F>(mut assembler: F, cfg: &SynthConfig) -> Result<SearchOutcome>
where
    F: FnMut(f64) -> Result<SynthProblem>,
{
    cfg.validate()?;
    let mut trace = Vec::new();
    let mut feasible: Vec<RsiCertificate> = Vec::new();
    let mut warnings = Vec::new();
    let mut numerical_failures = 0usize;

    let mut probe = |kappa: f64, trace: &mut Vec<TraceEntry>, feasible: &mut Vec<RsiCertificate>| -> Result<bool> {
        let sp = assembler(kappa)?;
        for w in &sp.warnings {
            if !warnings.contains(w) {
                warnings.push(w.clone());
            }
        }
        let sol = sp.solve(&cfg.solver);
        let mut entry =
            TraceEntry { kappa, status: sol.status, objective: None, shift: sol.best_shift, iterations: sol.iterations };
        let ok = if sol.status.is_feasible() {
            match extract_certificate(&sol, &sp.provenance, sp.gamma, sp.kappa) {
                Ok(mut cert) => {
                    cert.tolerances = cfg.tolerances();
                    entry.objective = Some(cert.log_det_q);
                    feasible.push(cert);
                    true
                }
                Err(e) => {
                    warnings.push(format!("kappa = {kappa}: {e}"));
                    entry.status = SolveStatus::NumericalFailure;
                    false
                }
            }
        } else {
            false
        };
        if entry.status == SolveStatus::NumericalFailure {
            numerical_failures += 1;
        }
        trace.push(entry);
        Ok(ok)
    };

    // Probed κ values, kept sorted, with their feasibility.
    let mut probed: Vec<(f64, bool)> = Vec::new();
    let insert = |probed: &mut Vec<(f64, bool)>, k: f64, ok: bool| {
        let pos = probed.partition_point(|&(v, _)| v < k);
        probed.insert(pos, (k, ok));
    };

    let ok = probe(cfg.kappa_init, &mut trace, &mut feasible)?;
    insert(&mut probed, cfg.kappa_init, ok);

    while trace.len() < cfg.i_max {
        let best_feasible = probed.iter().rev().find(|p| p.1).map(|p| p.0);
        let next = match best_feasible {
            Some(kf) => {
                let hi = probed.iter().find(|p| p.0 > kf && !p.1).map_or(KAPPA_HI, |p| p.0);
                if hi - kf <= cfg.e {
                    break;
                }
                0.5 * (kf + hi)
            }
            None => {
                // Refine the unexplored gaps above kappa_init first (widest
                // first, ties toward 1), then those below it.
                let mut edges = vec![KAPPA_LO];
                edges.extend(probed.iter().map(|p| p.0));
                edges.push(KAPPA_HI);
                let gaps = edges.windows(2).map(|w| (w[0], w[1])).filter(|(a, b)| b - a > cfg.e);
                let (upper, lower): (Vec<_>, Vec<_>) = gaps.partition(|&(a, _)| a >= cfg.kappa_init);
                let widest = |v: Vec<(f64, f64)>| {
                    v.into_iter().max_by(|x, y| (x.1 - x.0).total_cmp(&(y.1 - y.0)).then(x.0.total_cmp(&y.0)))
                };
                match widest(upper).or_else(|| widest(lower)) {
                    Some((a, b)) => 0.5 * (a + b),
                    None => break,
                }
            }
        };
        let ok = probe(next, &mut trace, &mut feasible)?;
        insert(&mut probed, next, ok);
    }

    let best = match cfg.search_mode {
        SearchMode::MaxKappa => feasible.into_iter().max_by(|a, b| a.kappa.total_cmp(&b.kappa)),
        SearchMode::MaxVolume => feasible.into_iter().max_by(|a, b| a.log_det_q.total_cmp(&b.log_det_q)),
    };
    match best {
        Some(best) => Ok(SearchOutcome { best, trace, warnings }),
        None if numerical_failures == trace.len() => Err(Error::Solver(format!(
            "all {} solves ended in numerical failure",
            trace.len()
        ))),
        None => Err(Error::NoFeasibleKappa { solves: trace.len(), trace }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(a: f64, b: f64) -> LinearSystem {
        LinearSystem::new(DMatrix::from_element(1, 1, a), DMatrix::from_element(1, 1, b)).unwrap()
    }

    fn unit_sets() -> (SafetySet, InputSet) {
        (SafetySet::symmetric_bounds(1, &[(0, 1.0)]).unwrap(), InputSet::symmetric_bounds(1, &[(0, 1.0)]).unwrap())
    }

    #[test]
    fn c_rule() {
        assert!((c_bound(0.01, 0.25).unwrap() - 0.04).abs() < 1e-15);
        assert_eq!(c_bound(0.0, 1.0).unwrap(), 0.0);
        assert!(matches!(c_bound(1e-6, 1.0), Err(Error::KappaOneWithDisturbance { .. })));
        assert!(c_bound(0.0, 0.0).is_err());
    }

    #[test]
    fn scalar_model_based() {
        let (s, u) = unit_sets();
        let sp = assemble_opm(&scalar(0.5, 1.0), &s, &u, 0.0, 0.25).unwrap();
        let sol = sp.solve(&SolveOptions::default());
        assert_eq!(sol.status, SolveStatus::Optimal);
        let cert = extract_certificate(&sol, &sp.provenance, 0.0, 0.25).unwrap();
        assert!((cert.q[(0, 0)] - 1.0).abs() < 1e-6);
        // Any k in [-1, 0] is optimal for Q = 1.
        let k = cert.k[(0, 0)];
        assert!((-1.0..=0.0).contains(&k), "{k}");

        // The hand-checked point Q = 1, Kbar = -0.5 satisfies every block.
        let prog = crate::lmi::logdet_reform(&sp.problem);
        let x = DVector::from_vec(vec![1.0, -0.5]);
        assert!(prog.worst_violation(&x) >= -1e-15);
    }

    #[test]
    fn lower_block_uses_c() {
        let (s, u) = unit_sets();
        let sp = assemble_opm(&scalar(0.5, 1.0), &s, &u, 0.01, 0.25).unwrap();
        assert!((sp.c - 0.04).abs() < 1e-15);
        let lower = &sp.problem.psd_constraints()[1];
        assert_eq!(lower.label, "Q >= cI");
        assert!((lower.expr.constant[(0, 0)] + 0.04).abs() < 1e-15);
    }

    #[test]
    fn gain_recovery() {
        let mut sol = LmiSolution {
            status: SolveStatus::Optimal,
            assignments: Default::default(),
            objective_value: 0.0,
            worst_psd_violation: 0.0,
            infeasibility_bound: None,
            best_shift: None,
            iterations: 0,
            point: DVector::zeros(0),
            message: String::new(),
        };
        sol.assignments.insert("Q".into(), DMatrix::from_element(1, 1, 4.0));
        sol.assignments.insert("Kbar".into(), DMatrix::from_element(1, 1, -2.0));
        let cert = extract_certificate(&sol, &Provenance::ModelBased, 0.0, 0.5).unwrap();
        assert_eq!(cert.k[(0, 0)], -0.5);

        let z = DMatrix::from_row_slice(1, 2, &[0.3, -0.7]);
        sol.assignments.insert("Q".into(), DMatrix::identity(2, 2));
        sol.assignments.insert("Zbar".into(), z.clone());
        sol.assignments.insert("eps_1".into(), DMatrix::from_element(1, 1, 0.1));
        let prov = Provenance::DataDriven { samples: 1, dataset_hash: "x".into() };
        let cert = extract_certificate(&sol, &prov, 0.0, 0.5).unwrap();
        assert_eq!(cert.k, z);
        assert_eq!(cert.slack, Some(vec![0.1]));
    }

    #[test]
    fn singular_shape_is_reported() {
        let mut sol = LmiSolution {
            status: SolveStatus::Feasible,
            assignments: Default::default(),
            objective_value: 0.0,
            worst_psd_violation: 0.0,
            infeasibility_bound: None,
            best_shift: None,
            iterations: 0,
            point: DVector::zeros(0),
            message: String::new(),
        };
        sol.assignments.insert("Q".into(), DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        sol.assignments.insert("Kbar".into(), DMatrix::zeros(1, 2));
        assert!(matches!(
            extract_certificate(&sol, &Provenance::ModelBased, 0.0, 0.5),
            Err(Error::SingularShape { .. })
        ));
    }

    #[test]
    fn data_block_shapes() {
        let sys = crate::model::pendulum::system();
        let u = DMatrix::from_fn(1, 12, |_, k| ((k * 7919) % 11) as f64 - 5.0);
        let ds = crate::data::collect(&sys, &DVector::zeros(4), &u, &crate::model::DisturbanceModel::zero(4)).unwrap();
        let sp = assemble_opd(
            &ds,
            &crate::model::pendulum::safety(),
            &crate::model::pendulum::input(),
            1e-6,
            0.9,
            EPS_FLOOR,
        )
        .unwrap();
        let big = &sp.problem.psd_constraints()[0];
        assert_eq!(big.expr.size(), 13);
        assert_eq!(sp.problem.variables().len(), 2 + 12);
    }

    #[test]
    fn search_respects_budget() {
        let (s, _) = unit_sets();
        let none = InputSet::symmetric_bounds(1, &[(0, 1.0)]).unwrap();
        let cfg = SynthConfig { kappa_init: 0.5, i_max: 1, ..Default::default() };
        let out = kappa_search(|k| assemble_opm(&scalar(0.5, 0.0), &s, &none, 0.0, k), &cfg).unwrap();
        assert_eq!(out.trace.len(), 1);
        assert_eq!(out.trace[0].kappa, 0.5);
    }

    #[test]
    fn unstabilizable_plant_has_no_kappa() {
        let (s, u) = unit_sets();
        let cfg = SynthConfig { kappa_init: 0.5, i_max: 6, ..Default::default() };
        let err = kappa_search(|k| assemble_opm(&scalar(2.0, 0.0), &s, &u, 0.0, k), &cfg).unwrap_err();
        match err {
            Error::NoFeasibleKappa { solves, trace } => {
                assert!(solves <= 6);
                assert_eq!(trace.len(), solves);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn certificate_json_roundtrip() {
        let (s, u) = unit_sets();
        let sp = assemble_opm(&scalar(0.5, 1.0), &s, &u, 0.0, 0.25).unwrap();
        let sol = sp.solve(&SolveOptions::default());
        let cert = extract_certificate(&sol, &sp.provenance, 0.0, 0.25).unwrap();
        let back = RsiCertificate::from_json(&cert.to_json().unwrap()).unwrap();
        assert_eq!(back, cert);
    }
}
