use std::fmt::Write as _;

use nalgebra::DVector;

use super::{AffineSym, LmiProblem, Objective, ScalarAffine};
use crate::linalg::lambda_min;

/// Max-det program over the flattened coordinate vector `x ∈ R^dim`:
///
/// ```text
/// minimize    −log det G(x)
/// subject to  F_i(x) ⪰ 0,   g_j(x) ≥ 0,   G(x) ≻ 0
/// ```
///
/// with every `F_i`, `G` symmetric-affine and every `g_j` affine. The log-det
/// term is kept as is: it is its own self-concordant barrier, so no epigraph
/// or exponential-cone lifting is introduced and the optimizer of the program
/// is exactly the optimizer of the source problem. Without an objective the
/// program is a pure feasibility problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ConeProgram {
    pub dim: usize,
    pub objective: Option<AffineSym>,
    pub lmis: Vec<(String, AffineSym)>,
    pub linear: Vec<(String, ScalarAffine)>,
}

/// Flattens a problem. Scalar bounds turn into linear rows.
pub fn logdet_reform(p: &LmiProblem) -> ConeProgram {
    let objective = match p.objective() {
        Objective::Feasibility => None,
        Objective::MaximizeLogDet(id) => {
            let v = p.var(id);
            let n = v.shape().0;
            let mut g = AffineSym::zeros(n);
            g.place_var(0, 0, v, &nalgebra::DMatrix::identity(n, n), &nalgebra::DMatrix::identity(n, n))
                .expect("identity placement fits");
            Some(g)
        }
    };
    let lmis = p.psd_constraints().iter().map(|c| (c.label.clone(), c.expr.clone())).collect();
    let mut linear: Vec<(String, ScalarAffine)> =
        p.scalar_constraints().iter().map(|c| (c.label.clone(), c.expr.clone())).collect();
    for v in p.variables() {
        if let Some(lo) = v.lower {
            let mut e = ScalarAffine { constant: -lo, ..Default::default() };
            e.coeffs.insert(v.offset, 1.0);
            linear.push((format!("{} >= {lo:e}", v.name), e));
        }
        if let Some(hi) = v.upper {
            let mut e = ScalarAffine { constant: hi, ..Default::default() };
            e.coeffs.insert(v.offset, -1.0);
            linear.push((format!("{} <= {hi:e}", v.name), e));
        }
    }
    ConeProgram { dim: p.dim(), objective, lmis, linear }
}

impl ConeProgram {
    /// `log det G(x)`, or `None` when `G(x)` is not positive definite or
    /// there is no objective.
    pub fn objective_at(&self, x: &DVector<f64>) -> Option<f64> {
        let g = self.objective.as_ref()?.eval(x);
        let chol = nalgebra::Cholesky::new(crate::linalg::symmetrize(&g))?;
        Some(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
    }

    /// Smallest eigenvalue / value over all constraints (and `G`) at `x`.
    pub fn worst_violation(&self, x: &DVector<f64>) -> f64 {
        let blocks = self.lmis.iter().map(|(_, f)| f).chain(self.objective.iter());
        let psd = blocks.map(|f| lambda_min(&f.eval(x))).fold(f64::INFINITY, f64::min);
        let lin = self.linear.iter().map(|(_, g)| g.eval(x)).fold(f64::INFINITY, f64::min);
        psd.min(lin)
    }

    /// Plain-text summary for cross-checking against an external solver:
    /// dimensions, block sizes, and per-block sparsity (coordinates touched).
    ///
    /// ```text
    /// cone-program v1
    /// dim <d>
    /// objective logdet size <s> coords <k>   | objective none
    /// lmi <label> size <s> coords <k> nnz <z>
    /// linear <label> coords <k>
    /// ```
    pub fn dump(&self) -> String {
        let mut out = String::from("cone-program v1\n");
        let _ = writeln!(out, "dim {}", self.dim);
        match &self.objective {
            Some(g) => {
                let _ = writeln!(out, "objective logdet size {} coords {}", g.size(), g.coeffs.len());
            }
            None => out.push_str("objective none\n"),
        }
        for (label, f) in &self.lmis {
            let nnz: usize = f.coeffs.values().map(|m| m.iter().filter(|&&v| v != 0.0).count()).sum();
            let _ = writeln!(
                out,
                "lmi {} size {} coords {} nnz {}",
                label.replace(' ', "_"),
                f.size(),
                f.coeffs.len(),
                nnz
            );
        }
        for (label, g) in &self.linear {
            let _ = writeln!(out, "linear {} coords {}", label.replace(' ', "_"), g.coeffs.len());
        }
        out
    }
}
