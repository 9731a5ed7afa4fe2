//! Linear matrix inequality problems with an optional log-det objective.
//!
//! A problem declares matrix and scalar decision variables, symmetric blocks
//! that are affine in them and must be positive semidefinite, affine scalar
//! inequalities, and either pure feasibility or `maximize log det V` for one
//! symmetric variable `V`. [`logdet_reform`] flattens it into a
//! [`ConeProgram`] over a coordinate vector, which [`solve`] handles with a
//! primal barrier method.

mod program;
mod solver;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub use program::{logdet_reform, ConeProgram};
pub use solver::{solve, solve_program, LmiSolution, SolveOptions, SolveStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    Symmetric(usize),
    Matrix(usize, usize),
    Scalar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variable {
    pub name: String,
    pub kind: VarKind,
    /// Index of the first coordinate in the flattened decision vector.
    pub offset: usize,
    /// Scalar variables only.
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

impl Variable {
    pub fn shape(&self) -> (usize, usize) {
        match self.kind {
            VarKind::Symmetric(n) => (n, n),
            VarKind::Matrix(r, c) => (r, c),
            VarKind::Scalar => (1, 1),
        }
    }

    /// Number of free coordinates.
    pub fn len(&self) -> usize {
        match self.kind {
            VarKind::Symmetric(n) => n * (n + 1) / 2,
            VarKind::Matrix(r, c) => r * c,
            VarKind::Scalar => 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Matrix position(s) driven by local coordinate `k`. Symmetric variables
    /// enumerate the upper triangle row by row.
    fn coordinate(&self, k: usize) -> (usize, usize) {
        match self.kind {
            VarKind::Symmetric(n) => {
                let mut k = k;
                for i in 0..n {
                    let row_len = n - i;
                    if k < row_len {
                        return (i, i + k);
                    }
                    k -= row_len;
                }
                unreachable!("coordinate out of range")
            }
            VarKind::Matrix(_, c) => (k / c, k % c),
            VarKind::Scalar => (0, 0),
        }
    }

    /// Unit matrix of local coordinate `k`.
    pub fn basis(&self, k: usize) -> DMatrix<f64> {
        let (r, c) = self.shape();
        let (i, j) = self.coordinate(k);
        let mut e = DMatrix::zeros(r, c);
        e[(i, j)] = 1.0;
        if matches!(self.kind, VarKind::Symmetric(_)) {
            e[(j, i)] = 1.0;
        }
        e
    }

    /// Rebuilds the variable's value from the flattened vector.
    pub fn value(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (r, c) = self.shape();
        let mut out = DMatrix::zeros(r, c);
        for k in 0..self.len() {
            let (i, j) = self.coordinate(k);
            let v = x[self.offset + k];
            out[(i, j)] = v;
            if matches!(self.kind, VarKind::Symmetric(_)) {
                out[(j, i)] = v;
            }
        }
        out
    }

    /// Writes `value` into the flattened vector (upper triangle for symmetric).
    pub fn store(&self, value: &DMatrix<f64>, x: &mut DVector<f64>) {
        for k in 0..self.len() {
            let (i, j) = self.coordinate(k);
            x[self.offset + k] = value[(i, j)];
        }
    }
}

/// Symmetric matrix `F0 + Σ_k x_k F_k`; coefficients are keyed by global
/// coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineSym {
    pub constant: DMatrix<f64>,
    pub coeffs: BTreeMap<usize, DMatrix<f64>>,
}

impl AffineSym {
    pub fn zeros(size: usize) -> Self {
        Self { constant: DMatrix::zeros(size, size), coeffs: BTreeMap::new() }
    }

    pub fn size(&self) -> usize {
        self.constant.nrows()
    }

    fn add_at(target: &mut DMatrix<f64>, r0: usize, c0: usize, t: &DMatrix<f64>) {
        if r0 == c0 {
            let sym = (t + t.transpose()) * 0.5;
            let mut v = target.view_mut((r0, c0), sym.shape());
            v += &sym;
        } else {
            let mut v = target.view_mut((r0, c0), t.shape());
            v += t;
            let mut w = target.view_mut((c0, r0), (t.ncols(), t.nrows()));
            w += &t.transpose();
        }
    }

    fn check_fit(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Result<()> {
        let s = self.size();
        if r0 + rows > s || c0 + cols > s || (r0 == c0 && rows != cols) {
            return Err(Error::Problem(format!(
                "a {rows}x{cols} term at ({r0}, {c0}) does not fit a symmetric {s}x{s} block"
            )));
        }
        Ok(())
    }

    /// Adds the constant `m` at block position `(r0, c0)`, mirrored to
    /// `(c0, r0)` when off the diagonal. Diagonal placements are symmetrized.
    pub fn place_const(&mut self, r0: usize, c0: usize, m: &DMatrix<f64>) -> Result<&mut Self> {
        self.check_fit(r0, c0, m.nrows(), m.ncols())?;
        Self::add_at(&mut self.constant, r0, c0, m);
        Ok(self)
    }

    /// Adds `left · X · right` at block position `(r0, c0)` (mirrored as in
    /// [`AffineSym::place_const`]).
    pub fn place_var(
        &mut self,
        r0: usize,
        c0: usize,
        var: &Variable,
        left: &DMatrix<f64>,
        right: &DMatrix<f64>,
    ) -> Result<&mut Self> {
        let (vr, vc) = var.shape();
        if left.ncols() != vr || right.nrows() != vc {
            return Err(Error::Problem(format!(
                "cannot form L·{}·R with L {}x{}, {} {}x{}, R {}x{}",
                var.name,
                left.nrows(),
                left.ncols(),
                var.name,
                vr,
                vc,
                right.nrows(),
                right.ncols()
            )));
        }
        self.check_fit(r0, c0, left.nrows(), right.ncols())?;
        let size = self.size();
        for k in 0..var.len() {
            let t = left * var.basis(k) * right;
            if t.iter().all(|&v| v == 0.0) {
                continue;
            }
            let entry = self.coeffs.entry(var.offset + k).or_insert_with(|| DMatrix::zeros(size, size));
            Self::add_at(entry, r0, c0, &t);
        }
        Ok(self)
    }

    /// Adds `x · m` for a scalar variable and a full-size symmetric `m`.
    pub fn add_scalar_term(&mut self, var: &Variable, m: &DMatrix<f64>) -> Result<&mut Self> {
        if var.kind != VarKind::Scalar || m.shape() != (self.size(), self.size()) {
            return Err(Error::Problem(format!("scalar term on {} has the wrong shape", var.name)));
        }
        let size = self.size();
        let entry = self.coeffs.entry(var.offset).or_insert_with(|| DMatrix::zeros(size, size));
        *entry += crate::linalg::symmetrize(m);
        Ok(self)
    }

    pub fn eval(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut out = self.constant.clone();
        for (&k, f) in &self.coeffs {
            if x[k] != 0.0 {
                out += f * x[k];
            }
        }
        out
    }

    /// Reads a 1×1 expression as a scalar affine form.
    pub fn to_scalar(&self) -> Result<ScalarAffine> {
        if self.size() != 1 {
            return Err(Error::Problem("only 1x1 expressions convert to scalars".into()));
        }
        Ok(ScalarAffine {
            constant: self.constant[(0, 0)],
            coeffs: self.coeffs.iter().map(|(&k, m)| (k, m[(0, 0)])).collect(),
        })
    }
}

/// `c0 + Σ_k a_k x_k`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScalarAffine {
    pub constant: f64,
    pub coeffs: BTreeMap<usize, f64>,
}

impl ScalarAffine {
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        self.constant + self.coeffs.iter().map(|(&k, &a)| a * x[k]).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsdConstraint {
    pub label: String,
    pub expr: AffineSym,
}

/// `expr ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarConstraint {
    pub label: String,
    pub expr: ScalarAffine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Feasibility,
    MaximizeLogDet(VarId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmiProblem {
    vars: Vec<Variable>,
    dim: usize,
    psd: Vec<PsdConstraint>,
    scalar: Vec<ScalarConstraint>,
    objective: Objective,
}

impl Default for LmiProblem {
    fn default() -> Self {
        Self::new()
    }
}

impl LmiProblem {
    pub fn new() -> Self {
        Self { vars: Vec::new(), dim: 0, psd: Vec::new(), scalar: Vec::new(), objective: Objective::Feasibility }
    }

    fn push_var(&mut self, name: &str, kind: VarKind, lower: Option<f64>, upper: Option<f64>) -> VarId {
        let v = Variable { name: name.to_string(), kind, offset: self.dim, lower, upper };
        self.dim += v.len();
        self.vars.push(v);
        VarId(self.vars.len() - 1)
    }

    pub fn symmetric(&mut self, name: &str, n: usize) -> VarId {
        self.push_var(name, VarKind::Symmetric(n), None, None)
    }

    pub fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> VarId {
        self.push_var(name, VarKind::Matrix(rows, cols), None, None)
    }

    pub fn scalar(&mut self, name: &str, lower: Option<f64>, upper: Option<f64>) -> VarId {
        self.push_var(name, VarKind::Scalar, lower, upper)
    }

    pub fn var(&self, id: VarId) -> &Variable {
        &self.vars[id.0]
    }

    pub fn variables(&self) -> &[Variable] {
        &self.vars
    }

    /// Number of scalar coordinates.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn block(&self, size: usize) -> AffineSym {
        AffineSym::zeros(size)
    }

    pub fn add_psd(&mut self, label: &str, expr: AffineSym) -> Result<()> {
        self.check_expr(&expr)?;
        self.psd.push(PsdConstraint { label: label.to_string(), expr });
        Ok(())
    }

    /// `expr ≥ 0` for a 1×1 expression.
    pub fn add_nonneg(&mut self, label: &str, expr: AffineSym) -> Result<()> {
        self.check_expr(&expr)?;
        self.scalar.push(ScalarConstraint { label: label.to_string(), expr: expr.to_scalar()? });
        Ok(())
    }

    fn check_expr(&self, expr: &AffineSym) -> Result<()> {
        if let Some((&k, _)) = expr.coeffs.iter().find(|(&k, _)| k >= self.dim) {
            return Err(Error::Problem(format!("coordinate {k} references an undeclared variable")));
        }
        if expr.constant.nrows() != expr.constant.ncols() {
            return Err(Error::Problem("PSD block must be square".into()));
        }
        Ok(())
    }

    pub fn maximize_log_det(&mut self, id: VarId) -> Result<()> {
        if !matches!(self.var(id).kind, VarKind::Symmetric(_)) {
            return Err(Error::Problem("log-det objective needs a symmetric variable".into()));
        }
        self.objective = Objective::MaximizeLogDet(id);
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        self.objective
    }

    pub fn psd_constraints(&self) -> &[PsdConstraint] {
        &self.psd
    }

    pub fn scalar_constraints(&self) -> &[ScalarConstraint] {
        &self.scalar
    }

    pub fn find_var(&self, name: &str) -> Option<VarId> {
        self.vars.iter().position(|v| v.name == name).map(VarId)
    }

    /// Variable name → value at the flattened point `x`.
    pub fn assignments(&self, x: &DVector<f64>) -> BTreeMap<String, DMatrix<f64>> {
        self.vars.iter().map(|v| (v.name.clone(), v.value(x))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_coordinates_roundtrip() {
        let mut p = LmiProblem::new();
        let q = p.symmetric("Q", 3);
        let v = p.var(q).clone();
        assert_eq!(v.len(), 6);
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 5.0, 3.0, 5.0, 6.0]);
        let mut x = DVector::zeros(p.dim());
        v.store(&m, &mut x);
        assert_eq!(v.value(&x), m);
    }

    #[test]
    fn off_diagonal_placement_is_mirrored() {
        let mut p = LmiProblem::new();
        let k = p.matrix("K", 1, 2);
        let kv = p.var(k).clone();
        let mut blk = p.block(3);
        blk.place_var(2, 0, &kv, &DMatrix::identity(1, 1), &DMatrix::identity(2, 2)).unwrap();
        let mut x = DVector::zeros(p.dim());
        x[0] = 7.0;
        x[1] = -1.0;
        let f = blk.eval(&x);
        assert_eq!(f[(2, 0)], 7.0);
        assert_eq!(f[(0, 2)], 7.0);
        assert_eq!(f[(1, 2)], -1.0);
        assert_eq!(f, f.transpose());
    }

    #[test]
    fn misfit_terms_are_rejected() {
        let mut p = LmiProblem::new();
        let q = p.symmetric("Q", 2);
        let qv = p.var(q).clone();
        let mut blk = p.block(3);
        assert!(blk.place_var(2, 2, &qv, &DMatrix::identity(2, 2), &DMatrix::identity(2, 2)).is_err());
        assert!(p.maximize_log_det(q).is_ok());
        let s = p.scalar("s", None, None);
        assert!(p.maximize_log_det(s).is_err());
    }
}
