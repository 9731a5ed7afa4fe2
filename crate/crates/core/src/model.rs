//! Discrete-time linear plants with bounded additive disturbances,
//! polyhedral safety/input sets, and trajectory simulation.
//!
//! The plant is `x(k+1) = A x(k) + B u(k) + d(k)` with `dᵀd ≤ γ`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt_f64, from_rows, to_rows};

/// Seeded generator used for every random draw in the crate.
pub type SimRng = ChaCha8Rng;

/// Independent substream `stream` of the generator seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::Dimension(format!("A must be square, got {}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != a.nrows() {
            return Err(Error::Dimension(format!(
                "B has {} rows but A is {}x{}",
                b.nrows(),
                a.nrows(),
                a.ncols()
            )));
        }
        if a.nrows() == 0 || b.ncols() == 0 {
            return Err(Error::Dimension("empty system".into()));
        }
        if !crate::linalg::all_finite(&a) || !crate::linalg::all_finite(&b) {
            return Err(Error::Domain("system matrices must be finite".into()));
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Input dimension.
    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// `A + B K`.
    pub fn closed_loop(&self, k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if k.shape() != (self.m(), self.n()) {
            return Err(Error::Dimension(format!(
                "gain must be {}x{}, got {}x{}",
                self.m(),
                self.n(),
                k.nrows(),
                k.ncols()
            )));
        }
        Ok(&self.a + &self.b * k)
    }
}

/// Result of a half-space membership test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Membership {
    pub inside: bool,
    /// Largest row product `max_i r_i·p`.
    pub margin: f64,
}

/// A polyhedron `{p : r_i·p ≤ 1}` given by its rows.
pub trait HalfspaceSet {
    fn rows(&self) -> &DMatrix<f64>;

    fn dim(&self) -> usize {
        self.rows().ncols()
    }

    fn contains(&self, point: &DVector<f64>) -> Result<Membership> {
        if point.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "point has length {}, set lives in R^{}",
                point.len(),
                self.dim()
            )));
        }
        let prod = self.rows() * point;
        let margin = prod.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // An empty row list is all of R^n.
        let margin = if margin.is_finite() { margin } else { 0.0 };
        Ok(Membership { inside: margin <= 1.0, margin })
    }
}

fn check_rows(rows: &DMatrix<f64>, what: &str) -> Result<()> {
    if !crate::linalg::all_finite(rows) {
        return Err(Error::Domain(format!("{what} rows must be finite")));
    }
    if let Some(i) = rows.row_iter().position(|r| r.iter().all(|&v| v == 0.0)) {
        return Err(Error::Domain(format!("{what} row {i} is zero")));
    }
    Ok(())
}

fn symmetric_rows(dim: usize, bounds: &[(usize, f64)]) -> Result<DMatrix<f64>> {
    let mut rows = DMatrix::zeros(2 * bounds.len(), dim);
    for (k, &(i, limit)) in bounds.iter().enumerate() {
        if i >= dim || limit <= 0.0 || !limit.is_finite() {
            return Err(Error::Domain(format!("bad bound |p_{i}| <= {limit}")));
        }
        rows[(2 * k, i)] = 1.0 / limit;
        rows[(2 * k + 1, i)] = -1.0 / limit;
    }
    Ok(rows)
}

/// Safety set `S = {x : a_i x ≤ 1}`; the origin is interior by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SafetySet {
    a_rows: DMatrix<f64>,
}

impl SafetySet {
    pub fn new(a_rows: DMatrix<f64>) -> Result<Self> {
        check_rows(&a_rows, "safety")?;
        Ok(Self { a_rows })
    }

    /// `|x_i| ≤ limit` for each `(i, limit)`, zero-based coordinates.
    pub fn symmetric_bounds(n: usize, bounds: &[(usize, f64)]) -> Result<Self> {
        Self::new(symmetric_rows(n, bounds)?)
    }

    /// Every row multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(&self.a_rows * factor)
    }
}

impl HalfspaceSet for SafetySet {
    fn rows(&self) -> &DMatrix<f64> {
        &self.a_rows
    }
}

/// Input set `U = {u : b_j u ≤ 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSet {
    b_rows: DMatrix<f64>,
}

impl InputSet {
    pub fn new(b_rows: DMatrix<f64>) -> Result<Self> {
        check_rows(&b_rows, "input")?;
        Ok(Self { b_rows })
    }

    pub fn symmetric_bounds(m: usize, bounds: &[(usize, f64)]) -> Result<Self> {
        Self::new(symmetric_rows(m, bounds)?)
    }

    /// Axis-aligned bounding box of the polytope, `None` along unbounded axes.
    ///
    /// Only exact for sets made of axis-aligned rows; for general rows the
    /// per-axis bound is taken from the axis-aligned rows alone.
    pub fn bounding_box(&self) -> Vec<Option<(f64, f64)>> {
        let m = self.dim();
        let mut lo = vec![f64::NEG_INFINITY; m];
        let mut hi = vec![f64::INFINITY; m];
        for r in self.b_rows.row_iter() {
            let nz: Vec<usize> = (0..m).filter(|&j| r[j] != 0.0).collect();
            if let [j] = nz[..] {
                if r[j] > 0.0 {
                    hi[j] = hi[j].min(1.0 / r[j]);
                } else {
                    lo[j] = lo[j].max(1.0 / r[j]);
                }
            }
        }
        lo.into_iter()
            .zip(hi)
            .map(|(l, h)| (l.is_finite() && h.is_finite()).then_some((l, h)))
            .collect()
    }
}

impl HalfspaceSet for InputSet {
    fn rows(&self) -> &DMatrix<f64> {
        &self.b_rows
    }
}

/// Law of the disturbance samples inside the ball `dᵀd ≤ γ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Density {
    /// Uniform on the ball.
    Uniform,
    /// Piecewise constant: `5/(π²γ²)` on the nonnegative orthant of the
    /// ball, `9/(5π²γ²)` on the rest. Four-dimensional only.
    #[serde(alias = "orthant_weighted")]
    Orthant,
    Zero,
}

/// Acceptance probability of a non-orthant uniform draw: the ratio of the two
/// density levels, `(9/5) / 5`.
const ORTHANT_REJECT_ACCEPT: f64 = 9.0 / 25.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceModel {
    dim: usize,
    gamma: f64,
    density: Density,
    seed: u64,
}

impl DisturbanceModel {
    pub fn new(dim: usize, gamma: f64, density: Density, seed: u64) -> Result<Self> {
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(Error::Domain(format!("gamma must be finite and >= 0, got {gamma}")));
        }
        if density == Density::Orthant && dim != 4 {
            return Err(Error::UnsupportedDensity(format!(
                "the orthant-weighted density is defined for n = 4 only (got n = {dim})"
            )));
        }
        Ok(Self { dim, gamma, density, seed })
    }

    pub fn zero(dim: usize) -> Self {
        Self { dim, gamma: 0.0, density: Density::Zero, seed: 0 }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn density(&self) -> Density {
        self.density
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Same law with a different bound.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(self.dim, gamma, self.density, self.seed)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// Substream `stream` of this model's seed.
    pub fn rng(&self, stream: u64) -> SimRng {
        stream_rng(self.seed, stream)
    }

    /// One draw; always satisfies `dᵀd ≤ γ`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match self.density {
            Density::Zero => DVector::zeros(self.dim),
            Density::Uniform => uniform_ball(self.dim, self.gamma.sqrt(), rng),
            Density::Orthant => loop {
                let d = uniform_ball(self.dim, self.gamma.sqrt(), rng);
                if d.iter().all(|&v| v >= 0.0) || rng.random::<f64>() < ORTHANT_REJECT_ACCEPT {
                    break d;
                }
            },
        }
    }
}

/// Uniform draw from the Euclidean ball of the given radius: Gaussian
/// direction scaled by `r · U^{1/n}`.
pub fn uniform_ball<R: Rng + ?Sized>(dim: usize, radius: f64, rng: &mut R) -> DVector<f64> {
    if dim == 0 || radius == 0.0 {
        return DVector::zeros(dim);
    }
    let dir = unit_sphere(dim, rng);
    let u: f64 = rng.random();
    dir * (radius * u.powf(1.0 / dim as f64))
}

/// Uniform direction on the unit sphere.
pub fn unit_sphere<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let z = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = z.norm();
        if norm > 1e-300 {
            break z / norm;
        }
    }
}

/// Free draw `sample_disturbance(dm)` on a caller-provided stream.
pub fn sample_disturbance<R: Rng + ?Sized>(dm: &DisturbanceModel, rng: &mut R) -> DVector<f64> {
    dm.sample(rng)
}

/// `A x + B u + d`.
pub fn step(sys: &LinearSystem, x: &DVector<f64>, u: &DVector<f64>, d: &DVector<f64>) -> Result<DVector<f64>> {
    let n = sys.n();
    if x.len() != n || d.len() != n || u.len() != sys.m() {
        return Err(Error::Dimension(format!(
            "step expects x, d in R^{n} and u in R^{}, got {}, {}, {}",
            sys.m(),
            x.len(),
            d.len(),
            u.len()
        )));
    }
    Ok(sys.a() * x + sys.b() * u + d)
}

/// How inputs are chosen during simulation.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    /// Open-loop inputs `u(0..H-1)`.
    Inputs(Vec<DVector<f64>>),
    /// State feedback `u = K x`.
    Feedback(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub disturbances: Option<Vec<DVector<f64>>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }

    /// CSV with header `k,x1..xn,u1..um,d1..dn`; the final row (k = H) leaves
    /// the input and disturbance fields empty.
    pub fn to_csv(&self) -> String {
        let n = self.states.first().map_or(0, |x| x.len());
        let m = self.inputs.first().map_or(0, |u| u.len());
        let mut out = String::from("k");
        for i in 1..=n {
            let _ = write!(out, ",x{i}");
        }
        for i in 1..=m {
            let _ = write!(out, ",u{i}");
        }
        for i in 1..=n {
            let _ = write!(out, ",d{i}");
        }
        out.push('\n');
        for (k, x) in self.states.iter().enumerate() {
            let _ = write!(out, "{k}");
            for v in x.iter() {
                let _ = write!(out, ",{}", fmt_f64(*v));
            }
            match self.inputs.get(k) {
                Some(u) => u.iter().for_each(|v| {
                    let _ = write!(out, ",{}", fmt_f64(*v));
                }),
                None => (0..m).for_each(|_| out.push(',')),
            }
            match self.disturbances.as_ref().and_then(|d| d.get(k)) {
                Some(d) => d.iter().for_each(|v| {
                    let _ = write!(out, ",{}", fmt_f64(*v));
                }),
                None => (0..n).for_each(|_| out.push(',')),
            }
            out.push('\n');
        }
        out
    }
}

/// Simulates `H` steps drawing disturbances from `dm` on stream 0 of its seed.
pub fn simulate(
    sys: &LinearSystem,
    x0: &DVector<f64>,
    policy: &Policy,
    dm: &DisturbanceModel,
    horizon: usize,
) -> Result<Trajectory> {
    let mut rng = dm.rng(0);
    simulate_with_rng(sys, x0, policy, dm, horizon, &mut rng)
}

pub fn simulate_with_rng<R: Rng + ?Sized>(
    sys: &LinearSystem,
    x0: &DVector<f64>,
    policy: &Policy,
    dm: &DisturbanceModel,
    horizon: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    if horizon == 0 {
        return Err(Error::Domain("horizon must be >= 1".into()));
    }
    if x0.len() != sys.n() || dm.dim() != sys.n() {
        return Err(Error::Dimension(format!(
            "x0 and disturbances must live in R^{}, got {} and {}",
            sys.n(),
            x0.len(),
            dm.dim()
        )));
    }
    match policy {
        Policy::Inputs(us) if us.len() < horizon => {
            return Err(Error::Dimension(format!(
                "input sequence has {} entries, horizon is {horizon}",
                us.len()
            )))
        }
        Policy::Feedback(k) => {
            sys.closed_loop(k)?;
        }
        _ => {}
    }
    let mut states = Vec::with_capacity(horizon + 1);
    let mut inputs = Vec::with_capacity(horizon);
    let mut dists = Vec::with_capacity(horizon);
    let mut x = x0.clone();
    for k in 0..horizon {
        let u = match policy {
            Policy::Inputs(us) => us[k].clone(),
            Policy::Feedback(gain) => gain * &x,
        };
        let d = dm.sample(rng);
        let next = step(sys, &x, &u, &d)?;
        states.push(std::mem::replace(&mut x, next));
        inputs.push(u);
        dists.push(d);
    }
    states.push(x);
    Ok(Trajectory { states, inputs, disturbances: Some(dists) })
}

/// Membership of `point` in a safety or input set.
pub fn contains<S: HalfspaceSet + ?Sized>(set: &S, point: &DVector<f64>) -> Result<Membership> {
    set.contains(point)
}

/// A plant together with its constraint sets and disturbance model.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub system: LinearSystem,
    pub safety: SafetySet,
    pub input: InputSet,
    pub disturbance: DisturbanceModel,
}

/// On-disk JSON layout of a [`Scenario`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioFile {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    pub safety_a: Vec<Vec<f64>>,
    pub input_b: Vec<Vec<f64>>,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default = "default_density")]
    pub density: Density,
    #[serde(default)]
    pub seed: u64,
    /// Free-form annotations (e.g. the sampling time of a discretized model).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
}

fn default_density() -> Density {
    Density::Zero
}

impl Scenario {
    pub fn from_file(f: &ScenarioFile) -> Result<Self> {
        let system = LinearSystem::new(from_rows(&f.a)?, from_rows(&f.b)?)?;
        let n = system.n();
        let m = system.m();
        let safety_rows = from_rows(&f.safety_a)?;
        let input_rows = from_rows(&f.input_b)?;
        if safety_rows.nrows() > 0 && safety_rows.ncols() != n {
            return Err(Error::Dimension(format!("safety_a rows must have {n} entries")));
        }
        if input_rows.nrows() > 0 && input_rows.ncols() != m {
            return Err(Error::Dimension(format!("input_b rows must have {m} entries")));
        }
        let safety_rows = if safety_rows.nrows() == 0 { DMatrix::zeros(0, n) } else { safety_rows };
        let input_rows = if input_rows.nrows() == 0 { DMatrix::zeros(0, m) } else { input_rows };
        Ok(Self {
            system,
            safety: SafetySet::new(safety_rows)?,
            input: InputSet::new(input_rows)?,
            disturbance: DisturbanceModel::new(n, f.gamma, f.density, f.seed)?,
        })
    }

    pub fn to_file(&self) -> ScenarioFile {
        ScenarioFile {
            a: to_rows(self.system.a()),
            b: to_rows(self.system.b()),
            safety_a: to_rows(self.safety.rows()),
            input_b: to_rows(self.input.rows()),
            gamma: self.disturbance.gamma(),
            density: self.disturbance.density(),
            seed: self.disturbance.seed(),
            metadata: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ScenarioFile = serde_json::from_str(text)?;
        Self::from_file(&f)
    }
}

/// The linearized cart-pole used as the reference case study.
pub mod pendulum {
    use super::*;

    /// Sampling time of the discretization, seconds.
    pub const TAU: f64 = 0.02;
    /// Disturbance bound `(0.05 τ)²`.
    pub const GAMMA: f64 = 1e-6;
    pub const SEED: u64 = 42;

    pub fn system() -> LinearSystem {
        let a = DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, 0.02, 0.0, 0.0, //
                0.0, 1.0, 0.0, 0.0, //
                0.0, 0.0, 1.0042, 0.0194, //
                0.0, 0.0, 0.4208, 0.9466,
            ],
        );
        let b = DMatrix::from_column_slice(4, 1, &[0.0002, 0.0200, -0.0004, -0.0429]);
        LinearSystem::new(a, b).expect("preset is well formed")
    }

    /// Cart position within ±1 m, pendulum angle within ±π/12 rad.
    pub fn safety() -> SafetySet {
        SafetySet::symmetric_bounds(4, &[(0, 1.0), (2, std::f64::consts::PI / 12.0)]).expect("preset")
    }

    /// Cart acceleration within ±5 m/s².
    pub fn input() -> InputSet {
        InputSet::symmetric_bounds(1, &[(0, 5.0)]).expect("preset")
    }

    pub fn disturbance() -> DisturbanceModel {
        DisturbanceModel::new(4, GAMMA, Density::Orthant, SEED).expect("preset")
    }

    pub fn scenario() -> Scenario {
        Scenario { system: system(), safety: safety(), input: input(), disturbance: disturbance() }
    }

    pub fn scenario_file() -> ScenarioFile {
        let mut f = scenario().to_file();
        f.metadata = Some(serde_json::json!({ "name": "inverted-pendulum", "tau": TAU }));
        f
    }
}
