//! Primal log-barrier path following for max-det programs.
//!
//! Phase I minimizes a shift `s` such that every constraint shifted by `s`
//! holds; a centered point with `s < 0` is strictly feasible, and a centered
//! point with `s − m/t > 0` proves infeasibility (`m` is the barrier degree).
//! Phase II follows the central path of
//! `t · (−log det G(x)) − Σ log det F_i(x) − Σ log g_j(x)` whose duality gap
//! at the exact center is `m_F / t`.
//!
//! Every coordinate is additionally boxed to `|x_k| ≤ box_bound`, which keeps
//! Newton systems nonsingular on problems with unbounded recession
//! directions. The box counts toward the barrier degree like any other row.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{logdet_reform, AffineSym, ConeProgram, LmiProblem, ScalarAffine};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    /// Minimum strict-feasibility margin; phase I declares infeasibility
    /// once the best achievable margin is provably below it.
    pub feas_tol: f64,
    /// Bound on the objective suboptimality (duality gap).
    pub opt_tol: f64,
    /// Total Newton steps over both phases.
    pub max_iter: usize,
    pub box_bound: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { feas_tol: 1e-9, opt_tol: 1e-8, max_iter: 1500, box_bound: 1e6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Feasible,
    Infeasible,
    NumericalFailure,
}

impl SolveStatus {
    pub fn is_feasible(self) -> bool {
        matches!(self, Self::Optimal | Self::Feasible)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmiSolution {
    pub status: SolveStatus,
    pub assignments: BTreeMap<String, DMatrix<f64>>,
    /// `log det V` at the returned point (`NaN` for feasibility problems or
    /// when no feasible point was found).
    pub objective_value: f64,
    /// Smallest eigenvalue over all blocks (and smallest scalar slack).
    pub worst_psd_violation: f64,
    /// Lower bound on the phase I optimum when infeasibility was declared.
    pub infeasibility_bound: Option<f64>,
    /// Smallest uniform shift that made every constraint hold, when
    /// infeasibility was declared (how far from feasible the problem is).
    pub best_shift: Option<f64>,
    pub iterations: usize,
    pub point: DVector<f64>,
    pub message: String,
}

impl LmiSolution {
    pub fn value(&self, name: &str) -> Option<&DMatrix<f64>> {
        self.assignments.get(name)
    }
}

const NEWTON_TOL: f64 = 1e-9;
const ARMIJO: f64 = 0.01;
const MU: f64 = 10.0;

struct Block<'a> {
    expr: &'a AffineSym,
    weight: f64,
    shifted: bool,
}

struct Row<'a> {
    expr: std::borrow::Cow<'a, ScalarAffine>,
    shifted: bool,
}

/// `c·z − Σ w_i log det(F_i(x) [+ s I]) − Σ log(g_j(x) [+ s])` over
/// `z = (x, s)` (the shift coordinate only exists in phase I).
struct Barrier<'a> {
    n: usize,
    shift: Option<usize>,
    blocks: Vec<Block<'a>>,
    rows: Vec<Row<'a>>,
    c: DVector<f64>,
}

enum Center {
    Done,
    Stopped,
    Budget,
    Failed(String),
}

impl<'a> Barrier<'a> {
    fn dim(&self) -> usize {
        self.n + usize::from(self.shift.is_some())
    }

    fn shift_value(&self, z: &DVector<f64>) -> f64 {
        self.shift.map_or(0.0, |i| z[i])
    }

    fn block_matrix(&self, b: &Block, z: &DVector<f64>) -> DMatrix<f64> {
        let mut m = b.expr.constant.clone();
        for (&k, f) in &b.expr.coeffs {
            if z[k] != 0.0 {
                m += f * z[k];
            }
        }
        if b.shifted {
            let s = self.shift_value(z);
            for i in 0..m.nrows() {
                m[(i, i)] += s;
            }
        }
        m
    }

    fn row_value(&self, r: &Row, z: &DVector<f64>) -> f64 {
        let mut v = r.expr.constant;
        for (&k, &a) in &r.expr.coeffs {
            v += a * z[k];
        }
        if r.shifted {
            v += self.shift_value(z);
        }
        v
    }

    fn value(&self, z: &DVector<f64>) -> Option<f64> {
        let mut f = self.c.dot(z);
        for b in &self.blocks {
            let chol = Cholesky::new(self.block_matrix(b, z))?;
            f -= b.weight * 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        }
        for r in &self.rows {
            let g = self.row_value(r, z);
            if !(g > 0.0) {
                return None;
            }
            f -= g.ln();
        }
        f.is_finite().then_some(f)
    }

    fn derivatives(&self, z: &DVector<f64>) -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
        let d = self.dim();
        let mut f = self.c.dot(z);
        let mut grad = self.c.clone();
        let mut hess = DMatrix::zeros(d, d);
        for b in &self.blocks {
            let size = b.expr.size();
            let chol = Cholesky::new(self.block_matrix(b, z))?;
            f -= b.weight * 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let linv = chol.l().solve_lower_triangular(&DMatrix::identity(size, size))?;
            let mut idx: Vec<usize> = Vec::with_capacity(b.expr.coeffs.len() + 1);
            let mut ws: Vec<DMatrix<f64>> = Vec::with_capacity(b.expr.coeffs.len() + 1);
            for (&k, fk) in &b.expr.coeffs {
                idx.push(k);
                ws.push(&linv * fk * linv.transpose());
            }
            if b.shifted {
                idx.push(self.shift.expect("shifted blocks only exist in phase I"));
                ws.push(&linv * linv.transpose());
            }
            for (a, wa) in ws.iter().enumerate() {
                grad[idx[a]] -= b.weight * wa.trace();
                for c in 0..=a {
                    let h = b.weight * wa.dot(&ws[c]);
                    hess[(idx[a], idx[c])] += h;
                    if a != c {
                        hess[(idx[c], idx[a])] += h;
                    }
                }
            }
        }
        for r in &self.rows {
            let g = self.row_value(r, z);
            if !(g > 0.0) {
                return None;
            }
            f -= g.ln();
            let mut idx: Vec<(usize, f64)> = r.expr.coeffs.iter().map(|(&k, &a)| (k, a)).collect();
            if r.shifted {
                idx.push((self.shift.expect("phase I"), 1.0));
            }
            for &(k, a) in &idx {
                grad[k] -= a / g;
                for &(l, b) in &idx {
                    hess[(k, l)] += a * b / (g * g);
                }
            }
        }
        (f.is_finite() && grad.iter().all(|v| v.is_finite())).then_some((f, grad, hess))
    }

    /// Damped Newton centering; `stop` is checked after every step.
    fn center(&self, z: &mut DVector<f64>, budget: &mut usize, stop: &dyn Fn(&DVector<f64>) -> bool) -> Center {
        loop {
            if *budget == 0 {
                return Center::Budget;
            }
            let Some((f, grad, hess)) = self.derivatives(z) else {
                return Center::Failed("barrier undefined at an interior iterate".into());
            };
            let Some(dz) = newton_direction(&hess, &grad) else {
                return Center::Failed("Newton system could not be factored".into());
            };
            let lambda2 = -grad.dot(&dz);
            if !lambda2.is_finite() {
                return Center::Failed("non-finite Newton decrement".into());
            }
            if lambda2 * 0.5 <= NEWTON_TOL {
                return Center::Done;
            }
            *budget -= 1;
            let mut step = 1.0;
            let accepted = loop {
                let trial = &*z + &dz * step;
                if let Some(ft) = self.value(&trial) {
                    if ft < f && ft <= f - ARMIJO * step * lambda2 {
                        break Some(trial);
                    }
                }
                step *= 0.5;
                if step < 1e-14 {
                    break None;
                }
            };
            match accepted {
                Some(next) => *z = next,
                // Rounding prevents further progress: treat as centered.
                None => return Center::Done,
            }
            if stop(z) {
                return Center::Stopped;
            }
        }
    }
}

/// Solves `H d = −g` after Jacobi scaling, regularizing if needed.
fn newton_direction(hess: &DMatrix<f64>, grad: &DVector<f64>) -> Option<DVector<f64>> {
    let d = hess.nrows();
    let scale = DVector::from_iterator(d, (0..d).map(|i| {
        let h = hess[(i, i)];
        if h > 0.0 && h.is_finite() {
            1.0 / h.sqrt()
        } else {
            1.0
        }
    }));
    let mut scaled = hess.clone();
    for i in 0..d {
        for j in 0..d {
            scaled[(i, j)] *= scale[i] * scale[j];
        }
    }
    let rhs = -grad.component_mul(&scale);
    for reg in [0.0, 1e-14, 1e-12, 1e-10, 1e-8, 1e-6] {
        let mut m = scaled.clone();
        for i in 0..d {
            m[(i, i)] += reg;
        }
        if let Some(ch) = Cholesky::new(m) {
            let y = ch.solve(&rhs);
            if y.iter().all(|v| v.is_finite()) {
                return Some(y.component_mul(&scale));
            }
        }
    }
    None
}

fn box_rows(n: usize, bound: f64) -> Vec<ScalarAffine> {
    let mut rows = Vec::with_capacity(2 * n);
    for k in 0..n {
        for sign in [1.0, -1.0] {
            let mut e = ScalarAffine { constant: bound, ..Default::default() };
            e.coeffs.insert(k, -sign);
            rows.push(e);
        }
    }
    rows
}

/// Raw result of [`solve_program`].
#[derive(Debug, Clone)]
pub struct ProgramResult {
    pub status: SolveStatus,
    pub point: DVector<f64>,
    pub objective_value: f64,
    pub worst_violation: f64,
    pub infeasibility_bound: Option<f64>,
    pub best_shift: Option<f64>,
    pub iterations: usize,
    pub message: String,
}

pub fn solve_program(prog: &ConeProgram, opts: &SolveOptions) -> ProgramResult {
    let n = prog.dim;
    let mut budget = opts.max_iter;
    let boxes = box_rows(n, opts.box_bound);
    let fail = |msg: String, point: DVector<f64>, used: usize| ProgramResult {
        status: SolveStatus::NumericalFailure,
        point,
        objective_value: f64::NAN,
        worst_violation: f64::NAN,
        infeasibility_bound: None,
        best_shift: None,
        iterations: used,
        message: msg,
    };

    // Phase I over z = (x, s).
    let s_idx = n;
    let mut shifted_blocks: Vec<Block> =
        prog.lmis.iter().map(|(_, f)| Block { expr: f, weight: 1.0, shifted: true }).collect();
    if let Some(g) = &prog.objective {
        shifted_blocks.push(Block { expr: g, weight: 1.0, shifted: true });
    }
    let mut rows: Vec<Row> = prog
        .linear
        .iter()
        .map(|(_, g)| Row { expr: std::borrow::Cow::Borrowed(g), shifted: true })
        .collect();
    rows.extend(boxes.iter().map(|g| Row { expr: std::borrow::Cow::Borrowed(g), shifted: false }));
    let mut floor = ScalarAffine { constant: 1.0, ..Default::default() };
    floor.coeffs.insert(s_idx, 1.0);
    rows.push(Row { expr: std::borrow::Cow::Owned(floor), shifted: false });

    let x0 = DVector::zeros(n);
    let worst0 = prog.worst_violation(&x0);
    let mut c = DVector::zeros(n + 1);
    c[s_idx] = 1.0;
    let mut phase1 = Barrier { n, shift: Some(s_idx), blocks: shifted_blocks, rows, c: c.clone() };
    let degree1 = phase1.blocks.iter().map(|b| b.expr.size()).sum::<usize>() as f64 + phase1.rows.len() as f64;

    let mut z = DVector::zeros(n + 1);
    z[s_idx] = if worst0.is_finite() { (-worst0).max(0.0) + 1.0 } else { 1.0 };
    let mut t = 1.0;
    let strictly_feasible = |z: &DVector<f64>| z[s_idx] < 0.0;
    let x = if strictly_feasible(&z) {
        x0
    } else {
        loop {
            phase1.c = &c * t;
            match phase1.center(&mut z, &mut budget, &strictly_feasible) {
                Center::Failed(msg) => return fail(format!("phase I: {msg}"), z.rows(0, n).into_owned(), opts.max_iter - budget),
                Center::Budget => {
                    return fail("phase I: iteration budget exhausted".into(), z.rows(0, n).into_owned(), opts.max_iter)
                }
                Center::Done | Center::Stopped => {}
            }
            let s = z[s_idx];
            if s < 0.0 {
                break z.rows(0, n).into_owned();
            }
            let gap = degree1 / t;
            if s - gap > 0.0 || gap < opts.feas_tol {
                return ProgramResult {
                    status: SolveStatus::Infeasible,
                    point: z.rows(0, n).into_owned(),
                    objective_value: f64::NAN,
                    worst_violation: prog.worst_violation(&z.rows(0, n).into_owned()),
                    infeasibility_bound: Some(s - gap),
                    best_shift: Some(s),
                    iterations: opts.max_iter - budget,
                    message: format!("best shift {s:.3e}, lower bound {:.3e}", s - gap),
                };
            }
            t *= MU;
        }
    };

    let Some(objective) = &prog.objective else {
        let worst = prog.worst_violation(&x);
        return ProgramResult {
            status: SolveStatus::Feasible,
            point: x,
            objective_value: f64::NAN,
            worst_violation: worst,
            infeasibility_bound: None,
            best_shift: None,
            iterations: opts.max_iter - budget,
            message: "strictly feasible point found".into(),
        };
    };

    // Phase II.
    let mut blocks: Vec<Block> = prog.lmis.iter().map(|(_, f)| Block { expr: f, weight: 1.0, shifted: false }).collect();
    let degree2 = blocks.iter().map(|b| b.expr.size()).sum::<usize>() as f64
        + prog.linear.len() as f64
        + boxes.len() as f64;
    blocks.push(Block { expr: objective, weight: 1.0, shifted: false });
    let rows: Vec<Row> = prog
        .linear
        .iter()
        .map(|(_, g)| g)
        .chain(boxes.iter())
        .map(|g| Row { expr: std::borrow::Cow::Borrowed(g), shifted: false })
        .collect();
    let obj_idx = blocks.len() - 1;
    let mut phase2 = Barrier { n, shift: None, blocks, rows, c: DVector::zeros(n) };
    let mut x = x;
    let mut t = 1.0;
    let never = |_: &DVector<f64>| false;
    let (status, message) = loop {
        phase2.blocks[obj_idx].weight = t;
        match phase2.center(&mut x, &mut budget, &never) {
            Center::Failed(msg) => {
                if phase2.value(&x).is_some() {
                    break (SolveStatus::Feasible, format!("phase II stopped early: {msg}"));
                }
                return fail(format!("phase II: {msg}"), x, opts.max_iter - budget);
            }
            Center::Budget => break (SolveStatus::Feasible, "iteration budget exhausted before the gap closed".into()),
            Center::Done | Center::Stopped => {}
        }
        let gap = degree2 / t;
        if gap < opts.opt_tol {
            break (SolveStatus::Optimal, format!("duality gap {gap:.1e}"));
        }
        t *= MU;
    };
    let objective_value = prog.objective_at(&x).unwrap_or(f64::NAN);
    ProgramResult {
        status,
        worst_violation: prog.worst_violation(&x),
        point: x,
        objective_value,
        infeasibility_bound: None,
        best_shift: None,
        iterations: opts.max_iter - budget,
        message,
    }
}

/// Solves an [`LmiProblem`] through [`logdet_reform`].
pub fn solve(p: &LmiProblem, opts: &SolveOptions) -> LmiSolution {
    let prog = logdet_reform(p);
    let r = solve_program(&prog, opts);
    LmiSolution {
        status: r.status,
        assignments: p.assignments(&r.point),
        objective_value: r.objective_value,
        worst_psd_violation: r.worst_violation,
        infeasibility_bound: r.infeasibility_bound,
        best_shift: r.best_shift,
        iterations: r.iterations,
        point: r.point,
        message: r.message,
    }
}
