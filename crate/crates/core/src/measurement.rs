//! Synthetic measurement records.
//!
//! Records are per atom: the ensemble size multiplies both the signal and
//! the noise floor that defines the SNR, so it is divided out and the SNR is
//! the only noise parameter.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::dynamics::ObservableHistory;
use crate::error::invalid;
use crate::operator::{HermitianOperator, OperatorVector, SpinSystem};
use crate::Result;

/// Default moving-average window for the low-pass filter.
pub const DEFAULT_FILTER_WINDOW: usize = 3;

/// Signal-to-noise ratio per coarse-grained sample, `M_max / σ` with
/// `M_max = F`. Infinity selects the noiseless mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnrSpec {
    pub snr: f64,
}

impl SnrSpec {
    pub fn new(snr: f64) -> Self {
        Self { snr }
    }

    pub fn noiseless() -> Self {
        Self { snr: f64::INFINITY }
    }
}

pub fn sigma_from_snr(s: SnrSpec, sys: &SpinSystem) -> Result<f64> {
    if s.snr.is_nan() || s.snr <= 0.0 {
        return Err(invalid!("SNR must be positive, got {}", s.snr));
    }
    if s.snr.is_infinite() {
        return Ok(0.0);
    }
    Ok(sys.spin().value() / s.snr)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementRecord {
    pub values: Vec<f64>,
    /// Noise standard deviation per unfiltered sample; zero when noiseless.
    pub sigma: f64,
    pub times: Vec<f64>,
    pub seed: u64,
    pub filter_window: usize,
}

impl MeasurementRecord {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Noiseless signal `Tr[O_i ρ0]` for every bin.
pub fn expected_signal(
    rho0: &HermitianOperator,
    hist: &ObservableHistory,
    sys: &SpinSystem,
) -> Result<Vec<f64>> {
    let r = sys.vectorize(rho0)?;
    if r.coeffs.len() != hist.n_traceless() {
        return Err(invalid!(
            "state has {} traceless coordinates, history has {}",
            r.coeffs.len(),
            hist.n_traceless()
        ));
    }
    Ok(hist.ops.iter().map(|o| o.dot(&r)).collect())
}

/// Simulates `M_i = Tr[O_i ρ0] + σ W_i` from a raw history and low-pass
/// filters it with a centered moving average of width `window`.
///
/// Noise comes from ChaCha8 seeded with `seed` through `seed_from_u64`.
pub fn simulate_record(
    rho0: &HermitianOperator,
    hist: &ObservableHistory,
    sys: &SpinSystem,
    snr: SnrSpec,
    seed: u64,
    window: usize,
) -> Result<MeasurementRecord> {
    let sigma = sigma_from_snr(snr, sys)?;
    simulate_record_with_sigma(rho0, hist, sys, sigma, seed, window)
}

pub fn simulate_record_with_sigma(
    rho0: &HermitianOperator,
    hist: &ObservableHistory,
    sys: &SpinSystem,
    sigma: f64,
    seed: u64,
    window: usize,
) -> Result<MeasurementRecord> {
    check_window(window)?;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(invalid!(
            "noise scale must be finite and non-negative, got {sigma}"
        ));
    }
    if hist.filter_window != 1 {
        return Err(invalid!(
            "records must be simulated from the unfiltered history"
        ));
    }
    if rho0.dim() != sys.dim() {
        return Err(invalid!(
            "state dimension {} does not match spin dimension {}",
            rho0.dim(),
            sys.dim()
        ));
    }
    if !rho0.is_density_matrix(1e-9) {
        return Err(invalid!("initial state is not a density matrix"));
    }
    let mut raw = expected_signal(rho0, hist, sys)?;
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for m in raw.iter_mut() {
            let w: f64 = StandardNormal.sample(&mut rng);
            *m += sigma * w;
        }
    }
    Ok(MeasurementRecord {
        values: moving_average(&raw, window),
        sigma,
        times: hist.times.clone(),
        seed,
        filter_window: window,
    })
}

fn check_window(window: usize) -> Result<()> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(invalid!(
            "filter window must be odd and positive, got {window}"
        ));
    }
    Ok(())
}

/// Centered moving average, truncated at the edges.
pub fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let n = x.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            x[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Applies the record filter to the model operators so that model and data
/// go through the same transform.
pub fn apply_filter(hist: &ObservableHistory, window: usize) -> Result<ObservableHistory> {
    check_window(window)?;
    if window == 1 {
        return Ok(hist.clone());
    }
    if hist.filter_window != 1 {
        return Err(invalid!(
            "history is already filtered with window {}",
            hist.filter_window
        ));
    }
    let n = hist.len();
    let half = window / 2;
    let ops = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            let count = (hi - lo + 1) as f64;
            let mut acc = OperatorVector::zeros(hist.n_traceless());
            for o in &hist.ops[lo..=hi] {
                acc.trace_part += o.trace_part;
                acc.coeffs += &o.coeffs;
            }
            acc.trace_part /= count;
            acc.coeffs /= count;
            acc
        })
        .collect();
    Ok(ObservableHistory {
        ops,
        times: hist.times.clone(),
        params_digest: hist.params_digest.clone(),
        filter_window: window,
    })
}
