//! Safety controllers for linear systems with bounded disturbances.
//!
//! The crate computes ellipsoidal robust safety-invariant sets
//! `{x : xᵀQ⁻¹x ≤ 1}` together with linear feedback gains `u = Kx`, either
//! from a known model or directly from one recorded input-state trajectory,
//! and checks the result analytically and by simulation.
//!
//! * [`model`]: plants, constraint sets, disturbance laws, simulation.
//! * [`data`]: datasets and persistency-of-excitation diagnostics.
//! * [`lmi`]: LMI problems and the log-det barrier solver.
//! * [`synth`]: model-based and data-driven synthesis, κ search.
//! * [`verify`]: analytic certification, falsification, Monte-Carlo runs.
//! * [`ident`]: least-squares identification baseline.

pub mod data;
pub mod error;
pub mod ident;
pub mod io;
pub mod linalg;
pub mod lmi;
pub mod model;
pub mod synth;
pub mod verify;

pub use data::{check_pe, collect, extend_until_pe, hankel, pendulum_dataset, Dataset, PeReport};
pub use error::{Error, Result};
pub use lmi::{LmiProblem, LmiSolution, SolveOptions, SolveStatus};
pub use model::{
    pendulum, simulate, step, Density, DisturbanceModel, HalfspaceSet, InputSet, LinearSystem, Policy, SafetySet,
    Scenario, Trajectory,
};
pub use synth::{
    assemble_opd, assemble_opm, c_bound, extract_certificate, kappa_search, Provenance, RsiCertificate, SearchMode,
    SearchOutcome, SynthConfig, TraceEntry,
};
pub use ident::{indirect_pipeline, least_squares_fit, IdentResult};
pub use verify::{certify_rsi, monte_carlo_invariance, one_step_falsify, CertReport, McReport};
