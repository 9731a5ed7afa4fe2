use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rsi_core::data::{collect, pendulum_dataset, FeedbackExcitation};
use rsi_core::ident::{self, convergence_trace, indirect_pipeline, least_squares_fit};
use rsi_core::model::{pendulum, stream_rng, Density, DisturbanceModel, InputSet, LinearSystem, SafetySet};
use rsi_core::synth::SearchOutcome;
use rsi_core::verify::{
    certify_rsi, monte_carlo_invariance, one_step_falsify, sample_in_ellipsoid, SampleMode, DEFAULT_TOL,
};
use rsi_core::{assemble_opd, assemble_opm, kappa_search, Error, Provenance, RsiCertificate, SynthConfig};

fn model_search() -> SearchOutcome {
    kappa_search(
        |k| assemble_opm(&pendulum::system(), &pendulum::safety(), &pendulum::input(), pendulum::GAMMA, k),
        &SynthConfig::default(),
    )
    .unwrap()
}

fn scalar() -> (LinearSystem, SafetySet, InputSet) {
    (
        LinearSystem::new(DMatrix::from_element(1, 1, 0.5), DMatrix::from_element(1, 1, 1.0)).unwrap(),
        SafetySet::symmetric_bounds(1, &[(0, 1.0)]).unwrap(),
        InputSet::symmetric_bounds(1, &[(0, 1.0)]).unwrap(),
    )
}

#[test]
fn model_certificate_passes_and_simulates_cleanly() {
    let out = model_search();
    let sys = pendulum::system();
    let r = certify_rsi(&sys, &out.best, &pendulum::safety(), &pendulum::input(), DEFAULT_TOL).unwrap();
    assert!(r.pass, "{:?}", r.diagnostics);
    assert!(out.best.kappa > 0.9 && out.best.kappa < 1.0);
    let mc = monte_carlo_invariance(&sys, &out.best, &pendulum::safety(), &pendulum::input(), 50, 100, &pendulum::disturbance(), 9)
        .unwrap();
    assert_eq!((mc.report.violations, mc.report.safety_violations, mc.report.input_violations), (0, 0, 0));
    assert!(!mc.report.disturbance_mismatch);
}

#[test]
fn rank_deficient_data_warns_and_is_infeasible() {
    let sys = pendulum::system();
    let ds = collect(&sys, &DVector::zeros(4), &DMatrix::zeros(1, 30), &pendulum::disturbance()).unwrap();
    let sp = assemble_opd(&ds, &pendulum::safety(), &pendulum::input(), pendulum::GAMMA, 0.98, 1e-9).unwrap();
    assert!(sp.warnings.iter().any(|w| w.contains("unbounded")));
    let cfg = SynthConfig { i_max: 4, ..SynthConfig::default() };
    let r = kappa_search(|k| assemble_opd(&ds, &pendulum::safety(), &pendulum::input(), pendulum::GAMMA, k, 1e-9), &cfg);
    assert!(matches!(r, Err(Error::NoFeasibleKappa { .. })));
}

#[test]
fn data_certificate_records_provenance() {
    // Short, noise-free experiment keeps this fast.
    let sys = pendulum::system();
    let mut rng = stream_rng(11, 0);
    let u = DMatrix::from_fn(1, 30, |_, _| rng.random_range(-5.0..5.0));
    let ds = collect(&sys, &DVector::zeros(4), &u, &DisturbanceModel::zero(4)).unwrap();
    let out = kappa_search(|k| assemble_opd(&ds, &pendulum::safety(), &pendulum::input(), 0.0, k, 1e-9), &SynthConfig::default())
        .unwrap();
    match &out.best.provenance {
        Provenance::DataDriven { samples, dataset_hash } => {
            assert_eq!(*samples, 30);
            assert_eq!(dataset_hash, &ds.content_hash());
        }
        p => panic!("unexpected provenance {p:?}"),
    }
    assert_eq!(out.best.slack.as_ref().map(Vec::len), Some(30));
    let r = certify_rsi(&sys, &out.best, &pendulum::safety(), &pendulum::input(), DEFAULT_TOL).unwrap();
    assert!(r.pass, "{:?}", r.diagnostics);
}

#[test]
fn falsifier_matches_contraction_without_disturbance() {
    let (sys, s, u) = scalar();
    let out = kappa_search(|k| assemble_opm(&sys, &s, &u, 0.0, k), &SynthConfig::default()).unwrap();
    let r = certify_rsi(&sys, &out.best, &s, &u, DEFAULT_TOL).unwrap();
    let max = one_step_falsify(&sys, &out.best, 1000, &mut stream_rng(1, 0)).unwrap();
    // In 1-D the boundary is two points, so the sup is attained exactly.
    assert!((max - r.cond1_value).abs() < 1e-12);
    assert!(max <= out.best.kappa + 1e-9);
}

/// Exhaustive (x, d) grid against the certifier on scalar systems.
#[test]
fn scalar_certifier_agrees_with_grid() {
    let (sys, s, u) = scalar();
    let mut checked = 0;
    for &(q, k, kappa, gamma) in &[
        (1.0, -0.5, 0.1, 0.0),
        (1.0, 0.0, 0.25, 0.0),
        (1.0, 0.0, 0.2, 0.0),
        (0.5, -0.3, 0.1, 0.01),
        (0.9, -0.5, 0.2, 0.2),
        (0.9, -0.5, 0.5, 0.05),
    ] {
        let c = gamma / (1.0 - f64::sqrt(kappa)).powi(2);
        let cert = RsiCertificate {
            q: DMatrix::from_element(1, 1, q),
            k: DMatrix::from_element(1, 1, k),
            kappa,
            gamma,
            c,
            provenance: Provenance::ModelBased,
            slack: None,
            log_det_q: f64::ln(q),
            tolerances: Default::default(),
            seed: None,
        };
        let r = certify_rsi(&sys, &cert, &s, &u, DEFAULT_TOL).unwrap();
        // One step from the set under every admissible disturbance stays in
        // the set; the certifier's conditions are sufficient for that.
        let f = 0.5 + k;
        let root = q.sqrt();
        let mut worst: f64 = 0.0;
        for i in -1000..=1000 {
            let x = root * i as f64 * 1e-3;
            for j in -100..=100 {
                let d = gamma.sqrt() * j as f64 * 1e-2;
                worst = worst.max((f * x + d).powi(2) / q);
            }
        }
        if r.pass {
            assert!(worst <= 1.0 + 1e-9, "certified ({q}, {k}, {kappa}, {gamma}) but grid max {worst}");
            checked += 1;
        }
        // Cond. 1 alone is exactly the d = 0 supremum.
        assert!((r.cond1_value - f * f).abs() < 1e-12);
    }
    assert!(checked >= 3);
}

#[test]
fn stress_disturbance_is_attributed() {
    let (sys, s, u) = scalar();
    let cfg = SynthConfig { kappa_init: 0.3, ..SynthConfig::default() };
    let out = kappa_search(|k| assemble_opm(&sys, &s, &u, 1e-2, k), &cfg).unwrap();
    let dm = DisturbanceModel::new(1, 1e-2, Density::Uniform, 4).unwrap().with_gamma(4.0).unwrap();
    let mc = monte_carlo_invariance(&sys, &out.best, &s, &u, 50, 50, &dm, 4).unwrap();
    assert!(mc.report.disturbance_mismatch);
    assert!(mc.report.violations > 0);
    assert!(mc.report.warnings.iter().any(|w| w.contains("attributed to the disturbance mismatch")));
}

#[test]
fn uniform_samples_are_centred_with_radial_law() {
    let q2 = DMatrix::identity(2, 2);
    let mut rng = stream_rng(12, 0);
    let n = 100_000;
    let mut mean = DVector::zeros(2);
    for _ in 0..n {
        mean += sample_in_ellipsoid(&q2, &mut rng, SampleMode::UniformVolume).unwrap();
    }
    mean /= n as f64;
    // Each coordinate has variance 1/4 on the unit disk.
    assert!(mean.amax() < 3.0 * (0.25 / n as f64).sqrt());

    // Radial CDF of the level r = sqrt(x'Q^{-1}x) is r^n.
    let q = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0, 0.5]));
    let m = 20_000;
    let mut r: Vec<f64> = (0..m)
        .map(|_| {
            let x = sample_in_ellipsoid(&q, &mut rng, SampleMode::UniformVolume).unwrap();
            (x[0] * x[0] / 4.0 + x[1] * x[1] + x[2] * x[2] / 0.5).sqrt()
        })
        .collect();
    r.sort_by(f64::total_cmp);
    let ks = r
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let cdf = v.powi(3);
            (cdf - i as f64 / m as f64).abs().max((cdf - (i + 1) as f64 / m as f64).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 1.63 / (m as f64).sqrt(), "KS statistic {ks}");
}

#[test]
fn noiseless_indirect_pipeline_matches_model_based() {
    let sys = pendulum::system();
    let mut rng = stream_rng(13, 0);
    let u = DMatrix::from_fn(1, 40, |_, _| rng.random_range(-5.0..5.0));
    let ds = collect(&sys, &DVector::zeros(4), &u, &DisturbanceModel::zero(4)).unwrap();
    let out = indirect_pipeline(&ds, &pendulum::safety(), &pendulum::input(), pendulum::GAMMA, &SynthConfig::default(), Some(&sys))
        .unwrap();
    let direct = model_search();
    assert_eq!(out.search.best.kappa, direct.best.kappa);
    assert!((out.search.best.log_det_q - direct.best.log_det_q).abs() < 1e-5);
    assert!(out.honesty.delta_a.unwrap() < 1e-9);
    assert!(out.honesty.statement.contains("identified model"));
}

#[test]
fn estimate_certificate_certifies_against_estimate() {
    let model = model_search();
    let ds = ident::pendulum_ident_dataset(&model.best.k, 1, 500).unwrap();
    let out = indirect_pipeline(&ds, &pendulum::safety(), &pendulum::input(), pendulum::GAMMA, &SynthConfig::default(), None)
        .unwrap();
    assert!(out.honesty.delta_a.is_none() && out.honesty.delta_b.is_none());
    let est = out.ident.system().unwrap();
    let r = certify_rsi(&est, &out.search.best, &pendulum::safety(), &pendulum::input(), DEFAULT_TOL).unwrap();
    assert!(r.pass, "{:?}", r.diagnostics);
}

#[test]
fn single_sample_fit_is_minimum_norm() {
    let sys = LinearSystem::new(DMatrix::from_element(1, 1, 0.7), DMatrix::from_element(1, 1, 1.0)).unwrap();
    let ds = collect(&sys, &DVector::from_vec(vec![2.0]), &DMatrix::from_element(1, 1, 1.0), &DisturbanceModel::zero(1)).unwrap();
    let fit = least_squares_fit(&ds).unwrap();
    assert_eq!(fit.regressor_rank, 1);
    assert_eq!(fit.warnings.len(), 1);
    // x1 = 2.4 from z = (2, 1): minimum-norm W = 2.4 z' / |z|^2.
    assert!((fit.a_hat[(0, 0)] - 0.96).abs() < 1e-12);
    assert!((fit.b_hat[(0, 0)] - 0.48).abs() < 1e-12);
    assert!(fit.residual_norm < 1e-12);
}

#[test]
fn noise_free_trace_is_exact() {
    let sys = pendulum::system();
    let model = model_search();
    let mut sampler = FeedbackExcitation::new(model.best.k.clone(), 0.1, stream_rng(14, 1));
    let grid: Vec<usize> = (10..=1000).step_by(10).collect();
    let (_, trace) =
        convergence_trace(&sys, &DVector::zeros(4), &DisturbanceModel::zero(4), &mut sampler, (2, 2), &grid).unwrap();
    assert_eq!(trace.len(), grid.len());
    assert!(trace.iter().all(|(_, v)| (v - 1.0042).abs() < 1e-9));
}

#[test]
fn symmetric_noise_trace_settles() {
    let sys = pendulum::system();
    let model = model_search();
    for seed in 1..=3 {
        let dm = DisturbanceModel::new(4, pendulum::GAMMA, Density::Uniform, seed).unwrap();
        let mut sampler = FeedbackExcitation::new(model.best.k.clone(), 1.0, stream_rng(seed, 1));
        let grid: Vec<usize> = (100..=5000).step_by(10).collect();
        let (_, trace) = convergence_trace(&sys, &DVector::zeros(4), &dm, &mut sampler, (2, 2), &grid).unwrap();
        let dev = |lo: usize, hi: usize| {
            let v: Vec<f64> = trace.iter().filter(|t| t.0 >= lo && t.0 <= hi).map(|t| (t.1 - 1.0042).abs()).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let (early, late) = (dev(100, 600), dev(4500, 5000));
        assert!(late < early && late < 2e-3, "seed {seed}: early {early}, late {late}");
    }
}

#[test]
fn pendulum_dataset_is_reproducible() {
    let a = pendulum_dataset(60, 7).unwrap();
    let b = pendulum_dataset(60, 7).unwrap();
    let c = pendulum_dataset(60, 8).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_ne!(a.content_hash(), c.content_hash());
    // Inputs are held for ten samples.
    assert!(a.u0().columns(0, 10).iter().all(|&v| v == a.u0()[(0, 0)]));
    assert_ne!(a.u0()[(0, 9)], a.u0()[(0, 10)]);
}
