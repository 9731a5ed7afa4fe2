//! Least-squares identification and the identify-then-synthesize baseline.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Collector, Dataset, FeedbackExcitation, InputSampler};
use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::linalg::{default_rank_tol, pinv};
use crate::model::{DisturbanceModel, InputSet, LinearSystem, SafetySet};
use crate::synth::{assemble_opm, kappa_search, SearchOutcome, SynthConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentResult {
    #[serde(rename = "A_hat", with = "crate::io::matrix")]
    pub a_hat: DMatrix<f64>,
    #[serde(rename = "B_hat", with = "crate::io::matrix")]
    pub b_hat: DMatrix<f64>,
    /// Frobenius norm of `X1 − Â X0 − B̂ U0`.
    pub residual_norm: f64,
    pub regressor_rank: usize,
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl IdentResult {
    pub fn system(&self) -> Result<LinearSystem> {
        LinearSystem::new(self.a_hat.clone(), self.b_hat.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `[Â B̂] = X1 · pinv([X0; U0])`, with the pseudo-inverse cut at the same
/// relative tolerance the rank check uses.
pub fn least_squares_fit(ds: &Dataset) -> Result<IdentResult> {
    if ds.is_empty() {
        return Err(Error::Shape("cannot fit a model to an empty dataset".into()));
    }
    let (n, m) = (ds.n(), ds.m());
    let z = ds.stacked();
    let (zp, rank) = pinv(&z, default_rank_tol(z.nrows(), z.ncols()));
    let w = ds.x1() * zp;
    let a_hat = w.columns(0, n).into_owned();
    let b_hat = w.columns(n, m).into_owned();
    let residual_norm = (ds.x1() - &w * &z).norm();
    let mut warnings = Vec::new();
    if rank < n + m {
        warnings.push(format!(
            "regressor rank {rank} < {}: the fit is the minimum-norm solution and not unique",
            n + m
        ));
    }
    Ok(IdentResult { a_hat, b_hat, residual_norm, regressor_rank: rank, samples: ds.len(), warnings })
}

/// What the baseline certificate does and does not say.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HonestyReport {
    pub statement: String,
    /// `‖A − Â‖₂`, reported only when the true system is supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_b: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct IndirectOutcome {
    pub ident: IdentResult,
    pub search: SearchOutcome,
    pub honesty: HonestyReport,
}

pub const HONESTY_STATEMENT: &str = "certificate valid for the identified model (A_hat, B_hat) only; \
     no guarantee for the true system";

/// Fit `(Â, B̂)`, then run the model-based κ search on it.
pub fn indirect_pipeline(
    ds: &Dataset,
    safety: &SafetySet,
    input: &InputSet,
    gamma: f64,
    cfg: &SynthConfig,
    truth: Option<&LinearSystem>,
) -> Result<IndirectOutcome> {
    let ident = least_squares_fit(ds)?;
    let est = ident.system()?;
    let search = kappa_search(|k| assemble_opm(&est, safety, input, gamma, k), cfg)?;
    let spectral = |m: DMatrix<f64>| m.singular_values().max();
    let honesty = HonestyReport {
        statement: HONESTY_STATEMENT.to_string(),
        delta_a: truth.map(|t| spectral(t.a() - &ident.a_hat)),
        delta_b: truth.map(|t| spectral(t.b() - &ident.b_hat)),
    };
    Ok(IndirectOutcome { ident, search, honesty })
}

/// `Â(entry)` fitted on every prefix length in `grid` (0-based entry, grid
/// increasing).
pub fn prefix_trace(ds: &Dataset, entry: (usize, usize), grid: &[usize]) -> Result<Vec<(usize, f64)>> {
    let n = ds.n();
    if entry.0 >= n || entry.1 >= n {
        return Err(Error::Domain(format!("entry {entry:?} is outside a {n}x{n} matrix")));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Domain("prefix grid must be strictly increasing".into()));
    }
    if let Some(&bad) = grid.iter().find(|&&len| len == 0 || len > ds.len()) {
        return Err(Error::Domain(format!("prefix length {bad} outside 1..={}", ds.len())));
    }
    grid.par_iter()
        .map(|&len| {
            let fit = least_squares_fit(&ds.prefix(len)?)?;
            Ok((len, fit.a_hat[entry]))
        })
        .collect()
}

/// Runs one trajectory of `max(grid)` samples from `x0` and traces
/// `Â(entry)` over its prefixes.
pub fn convergence_trace<S: InputSampler + ?Sized>(
    sys: &LinearSystem,
    x0: &DVector<f64>,
    dm: &DisturbanceModel,
    sampler: &mut S,
    entry: (usize, usize),
    grid: &[usize],
) -> Result<(Dataset, Vec<(usize, f64)>)> {
    let len = grid.last().copied().unwrap_or(0);
    let mut c = Collector::new(sys, x0, dm)?;
    for _ in 0..len {
        c.push_from(sampler)?;
    }
    let ds = c.dataset();
    let trace = prefix_trace(&ds, entry, grid)?;
    Ok((ds, trace))
}

pub fn convergence_to_csv(trace: &[(usize, f64)]) -> String {
    let mut out = String::from("N,value\n");
    for (len, v) in trace {
        out.push_str(&format!("{len},{}\n", fmt_f64(*v)));
    }
    out
}

/// Longest run of consecutive trace points within `tol` of `target`.
pub fn longest_run_within(trace: &[(usize, f64)], target: f64, tol: f64) -> usize {
    let mut best = 0;
    let mut run = 0;
    for (_, v) in trace {
        if (v - target).abs() <= tol {
            run += 1;
            best = best.max(run);
        } else {
            run = 0;
        }
    }
    best
}

/// A long experiment under `u = K x + w`, `w` uniform on `[-amplitude,
/// amplitude]^m`, from `x0`. Excitation draws use RNG stream 1 of the
/// disturbance seed, disturbances stream 0.
pub fn closed_loop_experiment(
    sys: &LinearSystem,
    gain: &DMatrix<f64>,
    amplitude: f64,
    x0: &DVector<f64>,
    dm: &DisturbanceModel,
    samples: usize,
) -> Result<Dataset> {
    sys.closed_loop(gain)?;
    let mut sampler = FeedbackExcitation::new(gain.clone(), amplitude, crate::model::stream_rng(dm.seed(), 1));
    let mut c = Collector::new(sys, x0, dm)?;
    for _ in 0..samples {
        c.push_from(&mut sampler)?;
    }
    Ok(c.dataset())
}

/// Excitation amplitude of the pendulum identification experiment.
pub const PENDULUM_IDENT_AMPLITUDE: f64 = 1e-3;
/// Length of the pendulum identification experiment.
pub const PENDULUM_IDENT_SAMPLES: usize = 5000;
/// Prefix used by the identify-then-synthesize baseline.
pub const PENDULUM_IDENT_BASELINE: usize = 500;

/// The pendulum identification experiment: preset disturbances reseeded with
/// `seed`, `u = K x + w` from the origin.
pub fn pendulum_ident_dataset(gain: &DMatrix<f64>, seed: u64, samples: usize) -> Result<Dataset> {
    let sys = crate::model::pendulum::system();
    let dm = crate::model::pendulum::disturbance().with_seed(seed);
    closed_loop_experiment(&sys, gain, PENDULUM_IDENT_AMPLITUDE, &DVector::zeros(4), &dm, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::collect;
    use crate::model::stream_rng;
    use rand::Rng;

    #[test]
    fn noise_free_fit_is_exact() {
        let sys = crate::model::pendulum::system();
        let mut rng = stream_rng(5, 0);
        let u = DMatrix::from_fn(1, 40, |_, _| rng.random_range(-1.0..1.0));
        let ds = collect(&sys, &DVector::from_vec(vec![0.1, 0.0, -0.1, 0.0]), &u, &DisturbanceModel::zero(4)).unwrap();
        let fit = least_squares_fit(&ds).unwrap();
        assert!((&fit.a_hat - sys.a()).amax() < 1e-9);
        assert!((&fit.b_hat - sys.b()).amax() < 1e-9);
        assert_eq!(fit.regressor_rank, 5);
        assert!(fit.warnings.is_empty());
    }

    #[test]
    fn rank_deficiency_is_flagged() {
        let sys = crate::model::pendulum::system();
        let u = DMatrix::zeros(1, 20);
        let ds = collect(&sys, &DVector::zeros(4), &u, &DisturbanceModel::zero(4)).unwrap();
        let fit = least_squares_fit(&ds).unwrap();
        assert_eq!(fit.regressor_rank, 0);
        assert_eq!(fit.warnings.len(), 1);
    }

    #[test]
    fn runs() {
        let t = vec![(1, 0.0), (2, 1.0), (3, 1.001), (4, 0.999), (5, 2.0)];
        assert_eq!(longest_run_within(&t, 1.0, 1e-2), 3);
        assert_eq!(convergence_to_csv(&t[..1]), "N,value\n1,0.0\n");
    }
}
