//! Small-scale self-checks behind the `validate` subcommand.
//!
//! Every check runs against a caller-supplied spin system so that a broken
//! operator basis can be injected as a negative control.

use std::f64::consts::PI;

use weaktomo_core::design::random_waveform;
use weaktomo_core::dynamics::{
    for_each_heisenberg_sample, observable_history, schrodinger_expectations, Route,
};
use weaktomo_core::estimator::{
    reconstruct, InformationMatrix, RunData, DEFAULT_EPS_REL, DEFAULT_RCOND,
};
use weaktomo_core::linalg::{eigh, expm};
use weaktomo_core::measurement::{
    expected_signal, simulate_record, simulate_record_with_sigma, SnrSpec,
};
use weaktomo_core::nalgebra::DMatrix;
use weaktomo_core::operator::{random_density_matrix, HermitianOperator, SpinSystem};
use weaktomo_core::physics::{PhysicsParams, BETA_D1};
use weaktomo_core::C64;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Outcome = Result<String, String>;

fn check(name: &'static str, f: impl FnOnce() -> Outcome) -> Check {
    match f() {
        Ok(detail) => Check {
            name,
            passed: true,
            detail,
        },
        Err(detail) => Check {
            name,
            passed: false,
            detail,
        },
    }
}

fn within(name: &str, value: f64, tol: f64) -> Outcome {
    if value <= tol {
        Ok(format!("{name} {value:.3e} <= {tol:.0e}"))
    } else {
        Err(format!("{name} {value:.3e} > {tol:.0e}"))
    }
}

fn core_err(e: weaktomo_core::Error) -> String {
    e.to_string()
}

/// Short record regime: 100 bins, 8 knots.
fn short_params(sys: &SpinSystem) -> PhysicsParams {
    let mut p = PhysicsParams::cesium(sys.clone(), BETA_D1);
    p.duration = 4e-4;
    p
}

/// Runs every check against `sys`.
pub fn run_checks(sys: &SpinSystem) -> Vec<Check> {
    vec![
        check("basis_orthonormal", || basis_orthonormal(sys)),
        check("vectorize_round_trip", || vectorize_round_trip(sys)),
        check("adjoint_consistency_closed", || {
            adjoint_consistency(sys, 0.0, 1e-8)
        }),
        check("adjoint_consistency_lossy", || {
            adjoint_consistency(sys, 1e3, 1e-6)
        }),
        check("information_monotonicity", || information_monotonicity(sys)),
        check("noiseless_exactness", || noiseless_exactness(sys, 1)),
        check("filter_consistency", || noiseless_exactness(sys, 3)),
        check("noise_statistics", || noise_statistics(sys)),
        check("expm_oracle", expm_oracle),
    ]
}

/// Machine-readable table: `check,status,detail`.
pub fn format_table(checks: &[Check]) -> String {
    let mut out = String::from("check,status,detail\n");
    for c in checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        out.push_str(&format!(
            "{},{},\"{}\"\n",
            c.name,
            status,
            c.detail.replace('"', "'")
        ));
    }
    out
}

fn basis_orthonormal(sys: &SpinSystem) -> Outcome {
    let basis = sys.basis();
    let mut worst = 0.0f64;
    for (i, a) in basis.iter().enumerate() {
        worst = worst.max(a.trace().norm());
        worst = worst.max((a - a.adjoint()).norm());
        for (j, b) in basis.iter().enumerate() {
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max(((a * b).trace() - C64::new(want, 0.0)).norm());
        }
    }
    if basis.len() != sys.dim() * sys.dim() - 1 {
        return Err(format!(
            "{} basis elements for d = {}",
            basis.len(),
            sys.dim()
        ));
    }
    within("Gram deviation", worst, 1e-12)
}

fn vectorize_round_trip(sys: &SpinSystem) -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let rho = random_density_matrix(sys.dim(), sys.dim(), seed).map_err(core_err)?;
        let back = sys
            .devectorize(&sys.vectorize(&rho).map_err(core_err)?)
            .map_err(core_err)?;
        worst = worst.max(back.frobenius_distance(&rho));
    }
    within("round-trip error", worst, 1e-12)
}

fn adjoint_consistency(sys: &SpinSystem, gamma: f64, tol: f64) -> Outcome {
    let mut p = short_params(sys);
    p.gamma = gamma;
    p.background_std_hz = 0.0;
    p.quadrature_points = 1;
    let fz = HermitianOperator::new(sys.fz().clone()).map_err(core_err)?;
    let steps = [0, 3, 50, 211, p.n_steps()];
    let mut worst = 0.0f64;
    for seed in 0..3u64 {
        let w = random_waveform(8, p.duration, 100 + seed).map_err(core_err)?;
        let rho = random_density_matrix(sys.dim(), sys.dim(), seed).map_err(core_err)?;
        let b0 = 2.0 * PI * 25.0 * seed as f64;
        let forward = schrodinger_expectations(&rho, &fz, &w, &p, b0, &steps).map_err(core_err)?;
        let r = sys.vectorize(&rho).map_err(core_err)?.to_full();
        let mut backward = vec![f64::NAN; steps.len()];
        for_each_heisenberg_sample(&w, &p, b0, Route::Auto, |j, o| {
            for (slot, _) in steps.iter().enumerate().filter(|(_, &s)| s == j) {
                backward[slot] = o.iter().zip(r.iter()).map(|(a, b)| a * b).sum();
            }
        })
        .map_err(core_err)?;
        for (a, b) in forward.iter().zip(&backward) {
            worst = worst.max((a - b).abs());
        }
    }
    within("max |Heisenberg - Schrodinger|", worst, tol)
}

fn information_monotonicity(sys: &SpinSystem) -> Outcome {
    let p = short_params(sys);
    let w = random_waveform(8, p.duration, 7).map_err(core_err)?;
    let hist = observable_history(&w, &p).map_err(core_err)?;
    let mut worst = 0.0f64;
    for cut in [1, 10, 37, 80] {
        let mut head = hist.clone();
        head.ops.truncate(cut);
        head.times.truncate(cut);
        let mut tail = hist.clone();
        tail.ops.drain(..cut);
        tail.times.drain(..cut);
        let before = InformationMatrix::from_model(&head, 1.0);
        let mut after = before.clone();
        after
            .merge(&InformationMatrix::from_model(&tail, 1.0))
            .map_err(core_err)?;
        let eb = before.eigenvalues();
        let ea = after.eigenvalues();
        let scale = ea.max().max(f64::MIN_POSITIVE);
        for (x, y) in eb.iter().zip(ea.iter()) {
            worst = worst.max((x - y) / scale);
        }
    }
    within("largest relative eigenvalue drop", worst, 1e-10)
}

fn noiseless_exactness(sys: &SpinSystem, window: usize) -> Outcome {
    let p = short_params(sys);
    let w = random_waveform(8, p.duration, 3).map_err(core_err)?;
    let hist = observable_history(&w, &p).map_err(core_err)?;
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let rho = random_density_matrix(sys.dim(), sys.dim(), 50 + seed).map_err(core_err)?;
        let rec =
            simulate_record(&rho, &hist, sys, SnrSpec::noiseless(), 0, window).map_err(core_err)?;
        let out = reconstruct(
            &[RunData {
                history: &hist,
                record: &rec,
            }],
            sys,
            None,
            DEFAULT_RCOND,
            DEFAULT_EPS_REL,
        )
        .map_err(core_err)?;
        if out.rank != sys.n_traceless() {
            return Err(format!(
                "information rank {} of {}",
                out.rank,
                sys.n_traceless()
            ));
        }
        worst = worst.max(out.rho_hat.frobenius_distance(&rho));
    }
    within("max reconstruction error", worst, 1e-8)
}

fn noise_statistics(sys: &SpinSystem) -> Outcome {
    let mut p = PhysicsParams::cesium(sys.clone(), BETA_D1);
    p.quadrature_points = 1;
    p.background_std_hz = 0.0;
    let w = random_waveform(50, p.duration, 1).map_err(core_err)?;
    let hist = observable_history(&w, &p).map_err(core_err)?;
    let rho = random_density_matrix(sys.dim(), sys.dim(), 4).map_err(core_err)?;
    let sigma = 0.2;
    let rec = simulate_record_with_sigma(&rho, &hist, sys, sigma, 11, 1).map_err(core_err)?;
    let mean = expected_signal(&rho, &hist, sys).map_err(core_err)?;
    let res: Vec<f64> = rec.values.iter().zip(&mean).map(|(a, b)| a - b).collect();
    let k = res.len() as f64;
    let var = res.iter().map(|x| x * x).sum::<f64>() / k;
    let r1 = res.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / (k * var);
    let ratio = var / (sigma * sigma);
    if (ratio - 1.0).abs() > 0.15 || r1.abs() > 3.0 / k.sqrt() {
        return Err(format!(
            "variance ratio {ratio:.3}, lag-1 correlation {r1:.3}"
        ));
    }
    Ok(format!(
        "variance ratio {ratio:.3}, lag-1 correlation {r1:.3}"
    ))
}

/// `exp(iA)` for Hermitian `A` against its spectral form.
fn expm_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for (k, scale) in [0.01, 0.5, 3.0, 40.0].into_iter().enumerate() {
        let d = 4 + k;
        let a = DMatrix::from_fn(d, d, |i, j| {
            let x = ((i * 31 + j * 17 + k) % 11) as f64 / 11.0 - 0.5;
            let y = ((i * 13 + j * 29 + 3 * k) % 7) as f64 / 7.0 - 0.5;
            C64::new(x, y)
        });
        let h = (&a + a.adjoint()) * C64::new(0.5 * scale, 0.0);
        let got = expm(&(&h * C64::new(0.0, 1.0))).map_err(core_err)?;
        let (vals, vecs) = eigh(&h);
        let phases = DMatrix::from_diagonal(&vals.map(|l| C64::new(l.cos(), l.sin())));
        let want = &vecs * phases * vecs.adjoint();
        worst = worst.max((&got - &want).norm() / want.norm());
    }
    within("relative error", worst, 1e-12)
}
