use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use weaktomo_core::design::random_waveform;
use weaktomo_core::dynamics::{
    for_each_heisenberg_sample, observable_history, schrodinger_expectations, Route,
};
use weaktomo_core::estimator::{
    accumulate, entropy, estimate, reconstruct, InformationMatrix, RunData, DEFAULT_EPS_REL,
    DEFAULT_RCOND,
};
use weaktomo_core::measurement::{simulate_record, simulate_record_with_sigma, SnrSpec};
use weaktomo_core::operator::{
    make_spin_system, random_density_matrix, random_pure_state, HermitianOperator, OperatorVector,
    SpinSystem,
};
use weaktomo_core::physics::{PhysicsParams, BETA_D1};
use weaktomo_core::C64;

fn short_params(f: f64, duration: f64) -> PhysicsParams {
    let sys = make_spin_system(f).unwrap();
    let mut p = PhysicsParams::cesium(sys, BETA_D1);
    p.duration = duration;
    p
}

/// `Tr[A B]` straight from the matrices.
fn trace_product(a: &DMatrix<C64>, b: &DMatrix<C64>) -> f64 {
    (a * b).trace().re
}

/// Least squares through the normal equations of the full-coordinate
/// system, with the trace fixed to one, solved by Cholesky on the matrices
/// themselves rather than through the library's estimator.
fn oracle_estimate(sys: &SpinSystem, ops: &[DMatrix<C64>], data: &[f64]) -> DMatrix<C64> {
    let d = sys.dim();
    let basis = sys.basis();
    let n = basis.len();
    let mut a = DMatrix::<f64>::zeros(ops.len(), n);
    let mut y = DVector::<f64>::zeros(ops.len());
    for (i, o) in ops.iter().enumerate() {
        for (j, e) in basis.iter().enumerate() {
            a[(i, j)] = trace_product(o, e);
        }
        y[i] = data[i] - o.trace().re / d as f64;
    }
    let ata = a.transpose() * &a;
    let aty = a.transpose() * y;
    let x = ata.cholesky().expect("full-rank design").solve(&aty);
    let mut rho = DMatrix::<C64>::identity(d, d) / C64::new(d as f64, 0.0);
    for (j, e) in basis.iter().enumerate() {
        rho += e * C64::new(x[j], 0.0);
    }
    rho
}

#[test]
fn noiseless_records_are_inverted_exactly() {
    let p = short_params(1.0, 4e-4);
    let w = random_waveform(8, p.duration, 3).unwrap();
    let hist = observable_history(&w, &p).unwrap();
    let ops: Vec<DMatrix<C64>> = hist
        .ops
        .iter()
        .map(|o| p.sys.devectorize(o).unwrap().into_matrix())
        .collect();
    for seed in 0..4 {
        let rho0 = random_density_matrix(3, 3, seed).unwrap();
        let rec = simulate_record(&rho0, &hist, &p.sys, SnrSpec::noiseless(), 0, 1).unwrap();
        let direct: Vec<f64> = ops
            .iter()
            .map(|o| trace_product(o, rho0.matrix()))
            .collect();
        for (m, want) in rec.values.iter().zip(&direct) {
            assert!((m - want).abs() < 1e-12);
        }
        let out = reconstruct(
            &[RunData {
                history: &hist,
                record: &rec,
            }],
            &p.sys,
            None,
            DEFAULT_RCOND,
            DEFAULT_EPS_REL,
        )
        .unwrap();
        assert_eq!(out.rank, 8);
        let oracle = oracle_estimate(&p.sys, &ops, &rec.values);
        assert!((out.rho_hat.matrix() - &oracle).norm() < 1e-8);
        assert!(out.rho_hat.frobenius_distance(&rho0) < 1e-8);
        assert!((out.rho_pos.matrix() - rho0.matrix()).norm() < 1e-8);
    }
}

#[test]
fn filtered_noiseless_records_are_inverted_exactly() {
    let p = short_params(1.0, 4e-4);
    let w = random_waveform(8, p.duration, 5).unwrap();
    let hist = observable_history(&w, &p).unwrap();
    let psi = random_pure_state(3, 11);
    let rho0 = HermitianOperator::pure_state(&psi);
    for window in [3, 5] {
        let rec = simulate_record(&rho0, &hist, &p.sys, SnrSpec::noiseless(), 0, window).unwrap();
        let out = reconstruct(
            &[RunData {
                history: &hist,
                record: &rec,
            }],
            &p.sys,
            Some(&psi),
            DEFAULT_RCOND,
            DEFAULT_EPS_REL,
        )
        .unwrap();
        assert!(
            out.rho_hat.frobenius_distance(&rho0) < 1e-8,
            "window {window}"
        );
        assert!(out.fidelity.unwrap() > 1.0 - 1e-9);
    }
}

#[test]
fn heisenberg_and_schrodinger_pictures_agree() {
    let mut p = short_params(1.5, 2e-4);
    p.background_std_hz = 0.0;
    p.quadrature_points = 1;
    let w = random_waveform(6, p.duration, 9).unwrap();
    let rho0 = random_density_matrix(4, 4, 2).unwrap();
    let fz = HermitianOperator::new(p.sys.fz().clone()).unwrap();
    let steps = [0, 1, 17, 64, 150, 200];
    let b0 = 2.0 * std::f64::consts::PI * 40.0;
    let forward = schrodinger_expectations(&rho0, &fz, &w, &p, b0, &steps).unwrap();
    let r = p.sys.vectorize(&rho0).unwrap().to_full();
    let mut backward = vec![f64::NAN; steps.len()];
    for route in [Route::Auto, Route::Superoperator] {
        for_each_heisenberg_sample(&w, &p, b0, route, |j, o| {
            if let Some(slot) = steps.iter().position(|&s| s == j) {
                backward[slot] = o.iter().zip(r.iter()).map(|(a, b)| a * b).sum();
            }
        })
        .unwrap();
        for (a, b) in forward.iter().zip(&backward) {
            assert!((a - b).abs() < 1e-10, "{route:?}: {a} vs {b}");
        }
    }
}

#[test]
fn halving_the_step_moves_the_history_by_less_than_a_millionth() {
    // Operating regime: 50 knots over the full 4 ms record.
    let sys = make_spin_system(3.0).unwrap();
    let mut p = PhysicsParams::cesium(sys, BETA_D1);
    let w = random_waveform(50, p.duration, 4).unwrap();
    let coarse = observable_history(&w, &p).unwrap();
    p.dt_fine /= 2.0;
    let fine = observable_history(&w, &p).unwrap();
    let mut worst = 0.0f64;
    for (a, b) in coarse.ops.iter().zip(&fine.ops) {
        let diff = &a.to_full() - &b.to_full();
        worst = worst.max(diff.norm());
    }
    assert!(worst < 1e-6, "step-halving change {worst}");
}

#[test]
fn least_squares_estimate_is_unbiased() {
    let p = short_params(1.0, 2e-4);
    let w = random_waveform(6, p.duration, 21).unwrap();
    let hist = observable_history(&w, &p).unwrap();
    let rho0 = random_density_matrix(3, 2, 8).unwrap();
    let truth = p.sys.vectorize(&rho0).unwrap();
    let sigma = 0.05;
    let base = InformationMatrix::zeros(8);
    let n = 600;
    let mut sum = DVector::<f64>::zeros(8);
    let mut sum_sq = DVector::<f64>::zeros(8);
    for k in 0..n {
        let rec = simulate_record_with_sigma(&rho0, &hist, &p.sys, sigma, 1000 + k, 1).unwrap();
        let info = accumulate(&hist, &rec, Some(&base)).unwrap();
        let est = p
            .sys
            .vectorize(&estimate(&info, &p.sys, DEFAULT_RCOND).unwrap())
            .unwrap();
        let e = &est.coeffs - &truth.coeffs;
        sum += &e;
        sum_sq += e.component_mul(&e);
    }
    let nf = n as f64;
    for q in 0..8 {
        let mean = sum[q] / nf;
        let var = (sum_sq[q] / nf - mean * mean) * nf / (nf - 1.0);
        let se = (var / nf).sqrt();
        assert!(
            mean.abs() < 3.0 * se,
            "component {q}: bias {mean} vs SE {se}"
        );
    }
}

#[test]
fn runs_accumulate_information_across_waveforms() {
    let p = short_params(1.0, 2e-4);
    let rho0 = random_density_matrix(3, 3, 1).unwrap();
    let mut hists = Vec::new();
    let mut recs = Vec::new();
    for s in 0..3 {
        let w = random_waveform(6, p.duration, 40 + s).unwrap();
        let h = observable_history(&w, &p).unwrap();
        recs.push(simulate_record(&rho0, &h, &p.sys, SnrSpec::new(30.0), s, 1).unwrap());
        hists.push(h);
    }
    let mut last = f64::INFINITY;
    for k in 1..=3 {
        let runs: Vec<_> = (0..k)
            .map(|i| RunData {
                history: &hists[i],
                record: &recs[i],
            })
            .collect();
        let out = reconstruct(&runs, &p.sys, None, DEFAULT_RCOND, DEFAULT_EPS_REL).unwrap();
        assert!(out.entropy <= last + 1e-12);
        assert!(out.rho_pos.is_density_matrix(1e-9));
        last = out.entropy;
    }
}

fn random_history(n_traceless: usize, rows: usize, seed: u64) -> Vec<OperatorVector> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..rows)
        .map(|_| {
            let mut v = OperatorVector::zeros(n_traceless);
            for c in v.coeffs.iter_mut() {
                *c = rng.random_range(-1.0..1.0);
            }
            v.trace_part = rng.random_range(-1.0..1.0);
            v
        })
        .collect()
}

fn info_from(ops: Vec<OperatorVector>, sigma: f64) -> InformationMatrix {
    use weaktomo_core::dynamics::ObservableHistory;
    let n = ops.len();
    let hist = ObservableHistory {
        ops,
        times: (0..n).map(|i| i as f64).collect(),
        params_digest: String::new(),
        filter_window: 1,
    };
    InformationMatrix::from_model(&hist, sigma)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adding_a_run_never_lowers_any_eigenvalue(
        d in 2usize..5,
        rows_a in 1usize..12,
        rows_b in 1usize..12,
        seed in any::<u64>(),
        sigma in 0.05f64..2.0,
    ) {
        let n = d * d - 1;
        let a = info_from(random_history(n, rows_a, seed), sigma);
        let b = info_from(random_history(n, rows_b, seed ^ 0x9e37), sigma);
        let mut both = a.clone();
        both.merge(&b).unwrap();
        let ea = a.eigenvalues();
        let eb = both.eigenvalues();
        let scale = eb.max().max(1.0);
        for (x, y) in ea.iter().zip(eb.iter()) {
            prop_assert!(*y >= *x - 1e-10 * scale);
        }
        prop_assert!(entropy(&both, DEFAULT_EPS_REL) <= entropy(&a, DEFAULT_EPS_REL) + 1e-9);
    }

    #[test]
    fn estimate_is_hermitian_with_unit_trace(seed in any::<u64>(), rank in 1usize..4) {
        let sys = make_spin_system(1.0).unwrap();
        let ops = random_history(8, 10, seed);
        let rho0 = random_density_matrix(3, rank, seed).unwrap();
        let r = sys.vectorize(&rho0).unwrap();
        let values: Vec<f64> = ops.iter().map(|o| o.dot(&r)).collect();
        let n = ops.len();
        let hist = weaktomo_core::dynamics::ObservableHistory {
            ops,
            times: (0..n).map(|i| i as f64).collect(),
            params_digest: String::new(),
            filter_window: 1,
        };
        let rec = weaktomo_core::measurement::MeasurementRecord {
            values,
            sigma: 0.0,
            times: hist.times.clone(),
            seed: 0,
            filter_window: 1,
        };
        let out = reconstruct(&[RunData { history: &hist, record: &rec }], &sys, None, DEFAULT_RCOND, DEFAULT_EPS_REL)
            .unwrap();
        let m = out.rho_hat.matrix();
        prop_assert!((m - m.adjoint()).norm() < 1e-12);
        prop_assert!((out.rho_hat.trace() - 1.0).abs() < 1e-12);
        prop_assert!(out.rho_hat.frobenius_distance(&rho0) < 1e-8, "dist {} rank {}", out.rho_hat.frobenius_distance(&rho0), out.rank);
        prop_assert!((out.rho_pos.trace() - 1.0).abs() < 1e-12);
    }
}
