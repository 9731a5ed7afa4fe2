use nalgebra::DMatrix;
use proptest::prelude::*;
use rsi_core::model::{stream_rng, InputSet, LinearSystem, SafetySet};
use rsi_core::verify::{certify_rsi, one_step_falsify, sample_in_ellipsoid, SampleMode, DEFAULT_TOL};
use rsi_core::{c_bound, Dataset, Provenance, RsiCertificate};

const N: usize = 3;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

fn spd() -> impl Strategy<Value = DMatrix<f64>> {
    matrix(N, N, -1.0, 1.0).prop_map(|l| &l * l.transpose() + DMatrix::identity(N, N) * 0.2)
}

fn orthogonal() -> impl Strategy<Value = DMatrix<f64>> {
    matrix(N, N, -1.0, 1.0).prop_filter_map("singular draw", |m| {
        let qr = m.qr();
        let r = qr.r();
        (0..N).all(|i| r[(i, i)].abs() > 1e-3).then(|| qr.q())
    })
}

fn cert(q: DMatrix<f64>, k: DMatrix<f64>, kappa: f64, gamma: f64) -> RsiCertificate {
    RsiCertificate {
        log_det_q: q.determinant().ln(),
        q,
        k,
        kappa,
        gamma,
        c: c_bound(gamma, kappa).unwrap(),
        provenance: Provenance::ModelBased,
        slack: None,
        tolerances: Default::default(),
        seed: None,
    }
}

/// Box rows `|x_i| ≤ b_i` and `|u| ≤ b` loose enough that only the
/// contraction and disturbance conditions matter.
fn loose_sets(q: &DMatrix<f64>, k: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut a = DMatrix::zeros(2 * N, N);
    for i in 0..N {
        let b = 2.0 * q[(i, i)].sqrt();
        a[(2 * i, i)] = 1.0 / b;
        a[(2 * i + 1, i)] = -1.0 / b;
    }
    let ub = 2.0 * (k * q * k.transpose())[(0, 0)].sqrt();
    let b = DMatrix::from_row_slice(2, 1, &[1.0 / ub, -1.0 / ub]);
    (a, b)
}

/// A certificate tuned so both conditions hold with a small margin.
fn certified_case(
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
) -> Option<(LinearSystem, RsiCertificate, SafetySet, InputSet)> {
    let scale = 0.8 / a.norm().max(1.0);
    let sys = LinearSystem::new(a * scale, b).ok()?;
    let (sa, ib) = loose_sets(&q, &k);
    let (safety, input) = (SafetySet::new(sa).ok()?, InputSet::new(ib).ok()?);
    let probe = certify_rsi(&sys, &cert(q.clone(), k.clone(), 0.5, 0.0), &safety, &input, DEFAULT_TOL).ok()?;
    let kappa = probe.cond1_value + 1e-3;
    if !(kappa < 0.98 && kappa > 1e-3) {
        return None;
    }
    let lmin = q.symmetric_eigenvalues().min();
    let gamma = 0.99 * lmin * (1.0 - kappa.sqrt()).powi(2);
    Some((sys, cert(q, k, kappa, gamma), safety, input))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn certified_sets_survive_falsification(
        a in matrix(N, N, -1.0, 1.0),
        b in matrix(N, 1, -1.0, 1.0),
        q in spd(),
        k in matrix(1, N, -0.5, 0.5),
        seed in any::<u64>(),
    ) {
        let case = certified_case(a, b, q, k);
        prop_assume!(case.is_some());
        let (sys, c, s, u) = case.unwrap();
        let r = certify_rsi(&sys, &c, &s, &u, DEFAULT_TOL).unwrap();
        prop_assert!(r.pass, "{:?}", r.diagnostics);
        let worst = one_step_falsify(&sys, &c, 2000, &mut stream_rng(seed, 0)).unwrap();
        prop_assert!(worst <= 1.0 + 1e-9, "post level {}", worst);
    }

    #[test]
    fn conditions_are_invariant_under_rotation(
        a in matrix(N, N, -1.0, 1.0),
        b in matrix(N, 1, -1.0, 1.0),
        q in spd(),
        k in matrix(1, N, -0.5, 0.5),
        t in orthogonal(),
    ) {
        let sys = LinearSystem::new(a.clone(), b.clone()).unwrap();
        let (sa, ib) = loose_sets(&q, &k);
        let c = cert(q.clone(), k.clone(), 0.5, 0.0);
        let r = certify_rsi(&sys, &c, &SafetySet::new(sa.clone()).unwrap(), &InputSet::new(ib.clone()).unwrap(), DEFAULT_TOL).unwrap();

        let tt = t.transpose();
        let sys2 = LinearSystem::new(&t * a * &tt, &t * b).unwrap();
        let c2 = cert(&t * q * &tt, k * &tt, 0.5, 0.0);
        let r2 = certify_rsi(&sys2, &c2, &SafetySet::new(sa * &tt).unwrap(), &InputSet::new(ib).unwrap(), DEFAULT_TOL).unwrap();

        prop_assert!((r.cond1_value - r2.cond1_value).abs() < 1e-10 * r.cond1_value.max(1.0));
        prop_assert!((r.cond2_value - r2.cond2_value).abs() < 1e-10);
        for (m1, m2) in r.safety_margins.iter().zip(&r2.safety_margins) {
            prop_assert!((m1 - m2).abs() < 1e-10);
        }
    }

    #[test]
    fn boundary_samples_lie_on_the_shell(q in spd(), seed in any::<u64>()) {
        let chol = q.clone().cholesky().unwrap();
        let mut rng = stream_rng(seed, 0);
        for _ in 0..50 {
            let x = sample_in_ellipsoid(&q, &mut rng, SampleMode::Boundary).unwrap();
            let level = x.dot(&chol.solve(&x));
            prop_assert!((level - 1.0).abs() < 1e-12, "level {}", level);
            let y = sample_in_ellipsoid(&q, &mut rng, SampleMode::UniformVolume).unwrap();
            prop_assert!(y.dot(&chol.solve(&y)) <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn dataset_csv_round_trips(
        x0 in matrix(2, 5, -1e3, 1e3),
        x1 in matrix(2, 5, -1e-6, 1e-6),
        u0 in matrix(1, 5, -7.0, 7.0),
    ) {
        let ds = Dataset::new(x0, x1, u0).unwrap();
        let back = Dataset::from_csv(&ds.to_csv()).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(back.content_hash(), ds.content_hash());
    }

    #[test]
    fn certificate_json_round_trips(q in spd(), k in matrix(1, N, -10.0, 10.0), kappa in 0.01f64..0.999, gamma in 0.0f64..1.0) {
        let mut c = cert(q, k, kappa, gamma);
        c.seed = Some(7);
        c.provenance = Provenance::DataDriven { samples: 2, dataset_hash: "ab".into() };
        c.slack = Some(vec![1e-9, 0.25]);
        let back = RsiCertificate::from_json(&c.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn c_bound_is_monotone(g1 in 0.0f64..10.0, dg in 0.0f64..1.0, k1 in 0.001f64..0.99, dk in 0.0f64..0.009) {
        let base = c_bound(g1, k1).unwrap();
        prop_assert!(c_bound(g1 + dg, k1).unwrap() >= base);
        prop_assert!(c_bound(g1, k1 + dk).unwrap() >= base);
        prop_assert!(base >= g1);
    }
}

#[test]
fn c_bound_edges() {
    assert_eq!(c_bound(0.0, 1.0).unwrap(), 0.0);
    assert!(c_bound(0.1, 1.0).is_err());
    assert!(c_bound(0.1, 0.0).is_err());
    assert!(c_bound(-1.0, 0.5).is_err());
}
