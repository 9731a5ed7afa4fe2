//! Input-state datasets from a single trajectory and persistency-of-excitation
//! diagnostics.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt_f64, parse_csv, parse_field, sha256_hex};
use crate::linalg::{default_rank_tol, numerical_rank};
use crate::model::{step, DisturbanceModel, HalfspaceSet, InputSet, LinearSystem, SimRng};

/// Samples of one trajectory: column `p` of `x0`, `u0` and `x1` holds
/// `x(p)`, `u(p)` and `x(p+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x0: DMatrix<f64>,
    x1: DMatrix<f64>,
    u0: DMatrix<f64>,
}

impl Dataset {
    pub fn new(x0: DMatrix<f64>, x1: DMatrix<f64>, u0: DMatrix<f64>) -> Result<Self> {
        let n = x0.ncols();
        if x1.ncols() != n || u0.ncols() != n {
            return Err(Error::Dimension(format!(
                "X0, X1, U0 must share the column count, got {}, {}, {}",
                x0.ncols(),
                x1.ncols(),
                u0.ncols()
            )));
        }
        if x0.nrows() != x1.nrows() {
            return Err(Error::Dimension("X0 and X1 must have the same number of rows".into()));
        }
        Ok(Self { x0, x1, u0 })
    }

    pub fn x0(&self) -> &DMatrix<f64> {
        &self.x0
    }

    pub fn x1(&self) -> &DMatrix<f64> {
        &self.x1
    }

    pub fn u0(&self) -> &DMatrix<f64> {
        &self.u0
    }

    pub fn n(&self) -> usize {
        self.x0.nrows()
    }

    pub fn m(&self) -> usize {
        self.u0.nrows()
    }

    /// Sample count `N`.
    pub fn len(&self) -> usize {
        self.x0.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[X0; U0]`.
    pub fn stacked(&self) -> DMatrix<f64> {
        let (n, m, len) = (self.n(), self.m(), self.len());
        let mut out = DMatrix::zeros(n + m, len);
        out.rows_mut(0, n).copy_from(&self.x0);
        out.rows_mut(n, m).copy_from(&self.u0);
        out
    }

    /// The first `len` samples.
    pub fn prefix(&self, len: usize) -> Result<Self> {
        if len > self.len() {
            return Err(Error::Shape(format!("prefix {len} exceeds {} samples", self.len())));
        }
        Ok(Self {
            x0: self.x0.columns(0, len).into_owned(),
            x1: self.x1.columns(0, len).into_owned(),
            u0: self.u0.columns(0, len).into_owned(),
        })
    }

    /// Largest `‖X1(p) − A X0(p) − B U0(p)‖²` over the samples.
    pub fn max_residual_sq(&self, sys: &LinearSystem) -> f64 {
        let r = &self.x1 - sys.a() * &self.x0 - sys.b() * &self.u0;
        r.column_iter().map(|c| c.norm_squared()).fold(0.0, f64::max)
    }

    /// CSV `p,x0_1..x0_n,x1_1..x1_n,u_1..u_m`, rows `p = 1..N`.
    pub fn to_csv(&self) -> String {
        let (n, m) = (self.n(), self.m());
        let mut out = String::from("p");
        for i in 1..=n {
            let _ = write!(out, ",x0_{i}");
        }
        for i in 1..=n {
            let _ = write!(out, ",x1_{i}");
        }
        for i in 1..=m {
            let _ = write!(out, ",u_{i}");
        }
        out.push('\n');
        for p in 0..self.len() {
            let _ = write!(out, "{}", p + 1);
            for v in self.x0.column(p).iter().chain(self.x1.column(p).iter()).chain(self.u0.column(p).iter()) {
                let _ = write!(out, ",{}", fmt_f64(*v));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let (header, rows) = parse_csv(text)?;
        let count = |prefix: &str| header.iter().filter(|h| h.starts_with(prefix)).count();
        let n = count("x0_");
        let m = count("u_");
        if header.first().map(String::as_str) != Some("p") || count("x1_") != n || header.len() != 1 + 2 * n + m {
            return Err(Error::Parse(format!("unexpected dataset header {header:?}")));
        }
        let len = rows.len();
        let mut x0 = DMatrix::zeros(n, len);
        let mut x1 = DMatrix::zeros(n, len);
        let mut u0 = DMatrix::zeros(m, len);
        for (p, row) in rows.iter().enumerate() {
            let line = p + 2;
            for i in 0..n {
                x0[(i, p)] = parse_field(&row[1 + i], line)?;
                x1[(i, p)] = parse_field(&row[1 + n + i], line)?;
            }
            for j in 0..m {
                u0[(j, p)] = parse_field(&row[1 + 2 * n + j], line)?;
            }
        }
        Self::new(x0, x1, u0)
    }

    /// SHA-256 of the CSV serialization.
    pub fn content_hash(&self) -> String {
        sha256_hex(self.to_csv().as_bytes())
    }
}

/// Rank facts about a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeReport {
    pub samples: usize,
    /// `rank([X0; U0])`.
    pub rank_xu: usize,
    /// `n + m`.
    pub required_xu: usize,
    /// Rank of the depth-`(n+1)` input Hankel matrix; `None` when `N < n+1`.
    pub hankel_rank: Option<usize>,
    /// `m (n+1)`.
    pub required_hankel: usize,
    /// The stacked data matrix has full row rank.
    pub pe_satisfied: bool,
    /// The input sequence is persistently exciting of order `n+1`.
    pub input_exciting: bool,
    /// The set of systems consistent with the data is bounded exactly when
    /// `rank([X0; U0]) = n + m`.
    pub feasible_set_bounded: bool,
    pub tolerance_used: f64,
}

/// Block-Hankel matrix of depth `depth`: block row `i` holds columns
/// `i .. i + N − depth` of `u0`.
pub fn hankel(u0: &DMatrix<f64>, depth: usize) -> Result<DMatrix<f64>> {
    let (m, len) = u0.shape();
    if depth == 0 || len < depth {
        return Err(Error::Shape(format!("need at least {depth} samples for a depth-{depth} Hankel matrix, got {len}")));
    }
    let cols = len - depth + 1;
    let mut h = DMatrix::zeros(m * depth, cols);
    for i in 0..depth {
        h.view_mut((i * m, 0), (m, cols)).copy_from(&u0.columns(i, cols));
    }
    Ok(h)
}

/// Rank diagnostics. `rank_tol` is relative to the largest singular value;
/// `None` selects `1e-9 · max(rows, cols)` per matrix.
pub fn check_pe(ds: &Dataset, rank_tol: Option<f64>) -> PeReport {
    let (n, m) = (ds.n(), ds.m());
    let stacked = ds.stacked();
    let tol_xu = rank_tol.unwrap_or_else(|| default_rank_tol(stacked.nrows(), stacked.ncols()));
    let rank_xu = numerical_rank(&stacked, tol_xu);
    let hankel_rank = hankel(ds.u0(), n + 1).ok().map(|h| {
        let tol = rank_tol.unwrap_or_else(|| default_rank_tol(h.nrows(), h.ncols()));
        numerical_rank(&h, tol)
    });
    let required_xu = n + m;
    let required_hankel = m * (n + 1);
    let full = rank_xu == required_xu;
    PeReport {
        samples: ds.len(),
        rank_xu,
        required_xu,
        hankel_rank,
        required_hankel,
        pe_satisfied: full,
        input_exciting: hankel_rank == Some(required_hankel),
        feasible_set_bounded: full,
        tolerance_used: tol_xu,
    }
}

/// Chooses the next input during data collection.
pub trait InputSampler {
    fn next_input(&mut self, k: usize, x: &DVector<f64>) -> DVector<f64>;
}

impl<F: FnMut(usize, &DVector<f64>) -> DVector<f64>> InputSampler for F {
    fn next_input(&mut self, k: usize, x: &DVector<f64>) -> DVector<f64> {
        self(k, x)
    }
}

/// I.i.d. uniform inputs on the bounding box of an input set, rejected until
/// they fall inside the set. With a hold of `h`, each draw is repeated for
/// `h` consecutive samples.
pub struct UniformInputSampler {
    set: InputSet,
    bounds: Vec<(f64, f64)>,
    rng: SimRng,
    hold: usize,
    current: Option<(DVector<f64>, usize)>,
}

impl UniformInputSampler {
    pub fn new(set: &InputSet, rng: SimRng) -> Result<Self> {
        let bounds = set
            .bounding_box()
            .into_iter()
            .enumerate()
            .map(|(j, b)| b.ok_or_else(|| Error::Domain(format!("input coordinate {j} is unbounded"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { set: set.clone(), bounds, rng, hold: 1, current: None })
    }

    pub fn with_hold(mut self, hold: usize) -> Self {
        self.hold = hold.max(1);
        self
    }

    fn draw(&mut self) -> DVector<f64> {
        for _ in 0..10_000 {
            let u = DVector::from_iterator(
                self.bounds.len(),
                self.bounds.iter().map(|&(lo, hi)| self.rng.random_range(lo..=hi)),
            );
            if self.set.contains(&u).map(|m| m.inside).unwrap_or(false) {
                return u;
            }
        }
        DVector::zeros(self.bounds.len())
    }
}

impl InputSampler for UniformInputSampler {
    fn next_input(&mut self, _k: usize, _x: &DVector<f64>) -> DVector<f64> {
        match &mut self.current {
            Some((u, used)) if *used < self.hold => {
                *used += 1;
                u.clone()
            }
            _ => {
                let u = self.draw();
                self.current = Some((u.clone(), 1));
                u
            }
        }
    }
}

/// `u = K x + w` with `w` uniform on `[-amplitude, amplitude]^m`; keeps an
/// open-loop unstable plant bounded over long experiments.
pub struct FeedbackExcitation {
    gain: DMatrix<f64>,
    amplitude: f64,
    rng: SimRng,
}

impl FeedbackExcitation {
    pub fn new(gain: DMatrix<f64>, amplitude: f64, rng: SimRng) -> Self {
        Self { gain, amplitude, rng }
    }
}

impl InputSampler for FeedbackExcitation {
    fn next_input(&mut self, _k: usize, x: &DVector<f64>) -> DVector<f64> {
        let a = self.amplitude;
        let w = DVector::from_fn(self.gain.nrows(), |_, _| self.rng.random_range(-a..=a));
        &self.gain * x + w
    }
}

pub struct ZeroInput(pub usize);

impl InputSampler for ZeroInput {
    fn next_input(&mut self, _k: usize, _x: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.0)
    }
}

/// Grows one trajectory sample by sample.
pub struct Collector<'a> {
    sys: &'a LinearSystem,
    dm: &'a DisturbanceModel,
    rng: SimRng,
    x: DVector<f64>,
    x0: Vec<DVector<f64>>,
    x1: Vec<DVector<f64>>,
    u0: Vec<DVector<f64>>,
}

impl<'a> Collector<'a> {
    pub fn new(sys: &'a LinearSystem, x0: &DVector<f64>, dm: &'a DisturbanceModel) -> Result<Self> {
        if x0.len() != sys.n() || dm.dim() != sys.n() {
            return Err(Error::Dimension(format!("x0 and disturbances must live in R^{}", sys.n())));
        }
        Ok(Self { sys, dm, rng: dm.rng(0), x: x0.clone(), x0: Vec::new(), x1: Vec::new(), u0: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn push(&mut self, u: DVector<f64>) -> Result<()> {
        let d = self.dm.sample(&mut self.rng);
        let next = step(self.sys, &self.x, &u, &d)?;
        self.x0.push(std::mem::replace(&mut self.x, next.clone()));
        self.x1.push(next);
        self.u0.push(u);
        Ok(())
    }

    pub fn push_from<S: InputSampler + ?Sized>(&mut self, sampler: &mut S) -> Result<()> {
        let u = sampler.next_input(self.len(), &self.x);
        self.push(u)
    }

    pub fn dataset(&self) -> Dataset {
        let (n, m) = (self.sys.n(), self.sys.m());
        let cols = |v: &[DVector<f64>], rows: usize| {
            if v.is_empty() {
                DMatrix::zeros(rows, 0)
            } else {
                DMatrix::from_columns(v)
            }
        };
        Dataset { x0: cols(&self.x0, n), x1: cols(&self.x1, n), u0: cols(&self.u0, m) }
    }
}

/// Runs the plant on the given `m × N` input sequence and packs the samples.
pub fn collect(sys: &LinearSystem, x0: &DVector<f64>, inputs: &DMatrix<f64>, dm: &DisturbanceModel) -> Result<Dataset> {
    if inputs.nrows() != sys.m() {
        return Err(Error::Dimension(format!("inputs must have {} rows, got {}", sys.m(), inputs.nrows())));
    }
    if inputs.ncols() == 0 {
        return Err(Error::Shape("need at least one input sample".into()));
    }
    let mut c = Collector::new(sys, x0, dm)?;
    for u in inputs.column_iter() {
        c.push(u.into_owned())?;
    }
    Ok(c.dataset())
}

/// Samples held per input draw in the pendulum experiment.
pub const PENDULUM_HOLD: usize = 10;
/// Trajectory length used for the pendulum data-driven synthesis.
pub const PENDULUM_SAMPLES: usize = 150;

/// One pendulum experiment from the origin: inputs uniform on `|u| ≤ 5`,
/// each held for [`PENDULUM_HOLD`] samples, disturbances from the preset
/// law. Inputs use RNG stream 1 of `seed`, disturbances stream 0.
pub fn pendulum_dataset(samples: usize, seed: u64) -> Result<Dataset> {
    let sys = crate::model::pendulum::system();
    let dm = crate::model::pendulum::disturbance().with_seed(seed);
    let mut sampler =
        UniformInputSampler::new(&crate::model::pendulum::input(), crate::model::stream_rng(seed, 1))?
            .with_hold(PENDULUM_HOLD);
    let mut c = Collector::new(&sys, &DVector::zeros(4), &dm)?;
    for _ in 0..samples {
        c.push_from(&mut sampler)?;
    }
    Ok(c.dataset())
}

/// Extends a single trajectory until the rank condition holds or `n_max`
/// samples have been taken.
pub fn extend_until_pe<S: InputSampler + ?Sized>(
    sys: &LinearSystem,
    x0: &DVector<f64>,
    dm: &DisturbanceModel,
    sampler: &mut S,
    n_start: usize,
    n_max: usize,
    rank_tol: Option<f64>,
) -> Result<(Dataset, PeReport)> {
    if n_start > n_max || n_max == 0 {
        return Err(Error::Domain(format!("need 1 <= N_start <= N_max, got {n_start}, {n_max}")));
    }
    let mut c = Collector::new(sys, x0, dm)?;
    while c.len() < n_start.max(1) {
        c.push_from(sampler)?;
    }
    loop {
        let ds = c.dataset();
        let report = check_pe(&ds, rank_tol);
        if report.pe_satisfied {
            return Ok((ds, report));
        }
        if c.len() >= n_max {
            return Err(Error::InsufficientExcitation {
                samples: c.len(),
                rank: report.rank_xu,
                required: report.required_xu,
                report: Box::new(report),
            });
        }
        c.push_from(sampler)?;
    }
}
