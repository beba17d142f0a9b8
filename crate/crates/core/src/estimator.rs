//! Gaussian least-squares inversion of measurement records.
//!
//! Estimation works on the traceless coordinates `c` of
//! `ρ = I/d + Σ_j c_j E_j`, which makes the unit-trace constraint exact.
//! Each sample contributes `M_i - Tr[O_i]/d = a_i · c + noise` with `a_i` the
//! traceless coordinates of `O_i`, so the information matrix is
//! `R = σ⁻² Σ a_i a_iᵀ` and the estimate solves `R c = b`.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::ObservableHistory;
use crate::error::invalid;
use crate::linalg::{eigh_real, eigvalsh_real};
use crate::measurement::{apply_filter, MeasurementRecord};
use crate::operator::{fidelity, project_positive, HermitianOperator, OperatorVector, SpinSystem};
use crate::{Error, Result, C64};

/// Relative eigenvalue cutoff for the pseudo-inverse of `R`.
pub const DEFAULT_RCOND: f64 = 1e-10;
/// Relative regularization added to every eigenvalue in the entropy.
pub const DEFAULT_EPS_REL: f64 = 1e-9;

/// Quadratic form and data vector of the Gaussian likelihood on traceless
/// coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct InformationMatrix {
    pub r: DMatrix<f64>,
    pub b: DVector<f64>,
    pub sample_count: usize,
    /// Noise scale of the most recently added record.
    pub sigma: f64,
}

/// Per-sample weight `1/σ²`; noiseless records get unit weight, which leaves
/// the estimate unchanged.
fn noise_weight(sigma: f64) -> f64 {
    if sigma > 0.0 {
        1.0 / (sigma * sigma)
    } else {
        1.0
    }
}

impl InformationMatrix {
    pub fn zeros(n_traceless: usize) -> Self {
        Self {
            r: DMatrix::zeros(n_traceless, n_traceless),
            b: DVector::zeros(n_traceless),
            sample_count: 0,
            sigma: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// Information carried by the model alone (`b = 0`), at noise `sigma`.
    pub fn from_model(hist: &ObservableHistory, sigma: f64) -> Self {
        let a = traceless_rows(&hist.ops);
        let r = a.tr_mul(&a) * noise_weight(sigma);
        Self {
            r,
            b: DVector::zeros(a.ncols()),
            sample_count: hist.len(),
            sigma,
        }
    }

    /// Adds another chunk of information in place.
    pub fn merge(&mut self, other: &InformationMatrix) -> Result<()> {
        if other.dim() != self.dim() {
            return Err(invalid!(
                "information dimension {} vs {}",
                other.dim(),
                self.dim()
            ));
        }
        self.r += &other.r;
        self.b += &other.b;
        self.sample_count += other.sample_count;
        self.sigma = other.sigma;
        Ok(())
    }

    /// Eigenvalues of `R`, ascending.
    pub fn eigenvalues(&self) -> DVector<f64> {
        eigvalsh_real(&self.r)
    }
}

/// `K × (d²-1)` matrix whose rows are the traceless coordinates of `ops`.
pub(crate) fn traceless_rows(ops: &[OperatorVector]) -> DMatrix<f64> {
    let n = ops.first().map_or(0, |o| o.coeffs.len());
    DMatrix::from_fn(ops.len(), n, |i, j| ops[i].coeffs[j])
}

/// Adds one record to `prior` (or to zero information).
pub fn accumulate(
    hist: &ObservableHistory,
    rec: &MeasurementRecord,
    prior: Option<&InformationMatrix>,
) -> Result<InformationMatrix> {
    if hist.len() != rec.len() {
        return Err(invalid!(
            "history has {} bins but record has {} samples",
            hist.len(),
            rec.len()
        ));
    }
    if hist.filter_window != rec.filter_window {
        return Err(invalid!(
            "history filtered with window {} but record with window {}",
            hist.filter_window,
            rec.filter_window
        ));
    }
    let n = hist.n_traceless();
    if let Some(p) = prior {
        if p.dim() != n {
            return Err(invalid!(
                "prior dimension {} does not match history dimension {n}",
                p.dim()
            ));
        }
    }
    // The state's identity coordinate is 1/sqrt(d) with d = sqrt(n + 1).
    let rho_trace_part = ((n + 1) as f64).sqrt().sqrt().recip();
    let a = traceless_rows(&hist.ops);
    let weight = noise_weight(rec.sigma);
    let centered = DVector::from_iterator(
        hist.len(),
        hist.ops
            .iter()
            .zip(&rec.values)
            .map(|(o, m)| m - o.trace_part * rho_trace_part),
    );
    let mut info = prior
        .cloned()
        .unwrap_or_else(|| InformationMatrix::zeros(n));
    info.r += a.tr_mul(&a) * weight;
    info.b += a.tr_mul(&centered) * weight;
    info.sample_count += hist.len();
    info.sigma = rec.sigma;
    Ok(info)
}

/// Least-squares estimate `I/d + Σ ĉ_j E_j` with `ĉ = R⁺ b`, dropping
/// eigen-directions below `rcond · λ_max` (those stay at the maximally
/// mixed value).
pub fn estimate(
    info: &InformationMatrix,
    sys: &SpinSystem,
    rcond: f64,
) -> Result<HermitianOperator> {
    if info.dim() != sys.n_traceless() {
        return Err(invalid!(
            "information dimension {} does not match spin system",
            info.dim()
        ));
    }
    let (vals, vecs) = eigh_real(&info.r);
    let lmax = vals.iter().copied().fold(0.0, f64::max);
    if !(lmax > 1e-300) || !lmax.is_finite() {
        return Err(Error::NoInformation);
    }
    let proj = vecs.tr_mul(&info.b);
    let mut c = DVector::zeros(info.dim());
    for (k, &l) in vals.iter().enumerate() {
        if l >= rcond * lmax {
            c += vecs.column(k) * (proj[k] / l);
        }
    }
    let d = sys.dim() as f64;
    sys.devectorize(&OperatorVector {
        trace_part: 1.0 / d.sqrt(),
        coeffs: c,
    })
}

/// `-Σ_j ln(λ_j + eps_rel · λ_max)` over the eigenvalues of `R`.
pub fn entropy(info: &InformationMatrix, eps_rel: f64) -> f64 {
    entropy_from_eigenvalues(info.eigenvalues().as_slice(), eps_rel)
}

pub fn entropy_from_eigenvalues(vals: &[f64], eps_rel: f64) -> f64 {
    let lmax = vals.iter().copied().fold(0.0, f64::max).max(f64::EPSILON);
    let floor = eps_rel * lmax;
    -vals.iter().map(|&l| (l.max(0.0) + floor).ln()).sum::<f64>()
}

/// Number of eigenvalues above `rcond · λ_max`.
pub fn numerical_rank(vals: &[f64], rcond: f64) -> usize {
    let lmax = vals.iter().copied().fold(0.0, f64::max);
    if lmax <= 0.0 {
        return 0;
    }
    vals.iter().filter(|&&l| l > rcond * lmax).count()
}

/// One measurement run: its model history and the record it produced. A raw
/// history is filtered to the record's window before use.
#[derive(Clone, Copy, Debug)]
pub struct RunData<'a> {
    pub history: &'a ObservableHistory,
    pub record: &'a MeasurementRecord,
}

#[derive(Clone, Debug)]
pub struct ReconstructionResult {
    pub rho_hat: HermitianOperator,
    pub rho_pos: HermitianOperator,
    pub entropy: f64,
    pub rank: usize,
    pub fidelity: Option<f64>,
    /// Spectrum of `R`, ascending.
    pub eigenvalues: DVector<f64>,
}

/// Accumulates every run, estimates, projects onto density matrices and
/// reports the diagnostics.
pub fn reconstruct(
    runs: &[RunData<'_>],
    sys: &SpinSystem,
    reference: Option<&DVector<C64>>,
    rcond: f64,
    eps_rel: f64,
) -> Result<ReconstructionResult> {
    if runs.is_empty() {
        return Err(invalid!("reconstruction needs at least one run"));
    }
    let mut info = InformationMatrix::zeros(sys.n_traceless());
    for run in runs {
        let filtered;
        let hist = if run.history.filter_window == 1 && run.record.filter_window != 1 {
            filtered = apply_filter(run.history, run.record.filter_window)?;
            &filtered
        } else {
            run.history
        };
        info = accumulate(hist, run.record, Some(&info))?;
    }
    let rho_hat = estimate(&info, sys, rcond)?;
    let rho_pos = project_positive(&rho_hat)?;
    let eigenvalues = info.eigenvalues();
    let fidelity = reference.map(|psi| fidelity(psi, &rho_pos)).transpose()?;
    Ok(ReconstructionResult {
        entropy: entropy_from_eigenvalues(eigenvalues.as_slice(), eps_rel),
        rank: numerical_rank(eigenvalues.as_slice(), rcond),
        rho_hat,
        rho_pos,
        fidelity,
        eigenvalues,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::make_spin_system;
    use alloc::vec::Vec;
    use approx::assert_abs_diff_eq;
    use core::f64::consts::E;

    fn history_of(sys: &SpinSystem, mats: &[&DMatrix<C64>]) -> ObservableHistory {
        let ops: Vec<_> = mats
            .iter()
            .map(|m| {
                sys.vectorize(&HermitianOperator::new((*m).clone()).unwrap())
                    .unwrap()
            })
            .collect();
        let n = ops.len();
        ObservableHistory {
            ops,
            times: (0..n).map(|i| i as f64).collect(),
            params_digest: "t".into(),
            filter_window: 1,
        }
    }

    fn record(values: Vec<f64>, sigma: f64) -> MeasurementRecord {
        let n = values.len();
        MeasurementRecord {
            values,
            sigma,
            times: (0..n).map(|i| i as f64).collect(),
            seed: 0,
            filter_window: 1,
        }
    }

    #[test]
    fn single_basis_sample_is_rank_one() {
        let sys = make_spin_system(1.0).unwrap();
        let hist = history_of(&sys, &[&sys.basis()[0]]);
        let info = accumulate(&hist, &record(alloc::vec![0.3], 1.0), None).unwrap();
        let mut want = DMatrix::zeros(8, 8);
        want[(0, 0)] = 1.0;
        assert_abs_diff_eq!(info.r, want, epsilon = 1e-15);
        assert_eq!(
            numerical_rank(info.eigenvalues().as_slice(), DEFAULT_RCOND),
            1
        );
    }

    #[test]
    fn repeating_a_record_doubles_everything() {
        let sys = make_spin_system(1.0).unwrap();
        let hist = history_of(&sys, &[sys.fx(), sys.fz(), sys.fy()]);
        let rec = record(alloc::vec![0.2, -0.1, 0.4], 0.5);
        let once = accumulate(&hist, &rec, None).unwrap();
        let twice = accumulate(&hist, &rec, Some(&once)).unwrap();
        assert_abs_diff_eq!(twice.r, &once.r * 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(twice.b, &once.b * 2.0, epsilon = 1e-14);
        assert_eq!(twice.sample_count, 6);
    }

    #[test]
    fn spin_half_vector_history_gives_half_identity() {
        let sys = make_spin_system(0.5).unwrap();
        let hist = history_of(&sys, &[sys.fx(), sys.fy(), sys.fz()]);
        let info = accumulate(&hist, &record(alloc::vec![0.0; 3], 1.0), None).unwrap();
        assert_abs_diff_eq!(info.r, DMatrix::identity(3, 3) * 0.5, epsilon = 1e-15);
    }

    #[test]
    fn length_or_window_mismatch_is_rejected() {
        let sys = make_spin_system(0.5).unwrap();
        let hist = history_of(&sys, &[sys.fx(), sys.fy()]);
        assert!(accumulate(&hist, &record(alloc::vec![0.0; 3], 1.0), None).is_err());
        let mut rec = record(alloc::vec![0.0; 2], 1.0);
        rec.filter_window = 3;
        assert!(accumulate(&hist, &rec, None).is_err());
    }

    #[test]
    fn fz_only_data_from_mixed_state_stays_mixed() {
        let sys = make_spin_system(3.0).unwrap();
        let hist = history_of(&sys, &[sys.fz(), sys.fz()]);
        let info = accumulate(&hist, &record(alloc::vec![0.0, 0.0], 0.1), None).unwrap();
        let rho = estimate(&info, &sys, DEFAULT_RCOND).unwrap();
        let mixed = sys.identity() / C64::new(7.0, 0.0);
        assert!((rho.matrix() - mixed).norm() < 1e-14);
        assert_abs_diff_eq!(rho.trace(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn empty_information_is_an_error() {
        let sys = make_spin_system(1.0).unwrap();
        let info = InformationMatrix::zeros(8);
        assert_eq!(
            estimate(&info, &sys, DEFAULT_RCOND),
            Err(Error::NoInformation)
        );
    }

    #[test]
    fn entropy_examples() {
        assert_abs_diff_eq!(
            entropy_from_eigenvalues(&[E, E * E], 0.0),
            -3.0,
            epsilon = 1e-14
        );
        assert_abs_diff_eq!(
            entropy_from_eigenvalues(&[E, E * E], 1e-15),
            -3.0,
            epsilon = 1e-12
        );

        let vals = [0.5, 1.5, 3.0, 7.0];
        let doubled: Vec<f64> = vals.iter().map(|v| 2.0 * v).collect();
        let drop = entropy_from_eigenvalues(&vals, 0.0) - entropy_from_eigenvalues(&doubled, 0.0);
        assert_abs_diff_eq!(drop, 4.0 * 2f64.ln(), epsilon = 1e-12);

        let deficient = [0.0, 0.0, 2.0, 5.0];
        let s = entropy_from_eigenvalues(&deficient, 1e-9);
        let want = -2.0 * (1e-9f64 * 5.0).ln() - (2.0 + 5e-9f64).ln() - (5.0 + 5e-9f64).ln();
        assert_abs_diff_eq!(s, want, epsilon = 1e-10);
        assert!(s.is_finite());
    }

    #[test]
    fn noise_scale_shifts_entropy_and_keeps_eigenvectors() {
        let sys = make_spin_system(0.5).unwrap();
        let hist = history_of(
            &sys,
            &[
                sys.fx(),
                sys.fz(),
                &(sys.fx() + sys.fy() * C64::new(2.0, 0.0)),
            ],
        );
        let a = InformationMatrix::from_model(&hist, 1.0);
        let b = InformationMatrix::from_model(&hist, 3.0);
        assert_abs_diff_eq!(b.r, &a.r / 9.0, epsilon = 1e-14);
        let shift = entropy(&b, 0.0) - entropy(&a, 0.0);
        assert_abs_diff_eq!(shift, 3.0 * 2.0 * 3f64.ln(), epsilon = 1e-10);
        let (_, va) = eigh_real(&a.r);
        let (_, vb) = eigh_real(&b.r);
        for k in 0..3 {
            assert_abs_diff_eq!(va.column(k).dot(&vb.column(k)).abs(), 1.0, epsilon = 1e-10);
        }
    }
}
