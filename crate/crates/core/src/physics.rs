//! Physical parameters of the probed ensemble.

use alloc::vec::Vec;
use core::f64::consts::TAU;

use nalgebra::DMatrix;

use crate::error::invalid;
use crate::linalg::eigh_real;
use crate::operator::SpinSystem;
use crate::Result;

/// Nonlinearity ratio with the probe tuned between the excited hyperfine
/// levels of the D1 line.
pub const BETA_D1: f64 = 7.67;
/// Nonlinearity ratio far detuned from the D2 line.
pub const BETA_D2: f64 = 0.81;

/// Branching fraction used by [`DissipatorModel::isotropic`].
pub const DEFAULT_BRANCHING: f64 = 0.5;

/// Optical-pumping model for the dissipator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DissipatorModel {
    /// Every scattered atom leaves the measured manifold; observables decay
    /// uniformly at rate γ.
    LossOnly,
    /// A fraction `branching` of scattering events returns the atom to the
    /// manifold with isotropically randomized spin, the rest is loss.
    IsotropicPumping { branching: f64 },
}

impl DissipatorModel {
    pub fn isotropic() -> Self {
        Self::IsotropicPumping {
            branching: DEFAULT_BRANCHING,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PhysicsParams {
    pub sys: SpinSystem,
    /// Ratio of the `Fx²` light-shift strength to the scattering rate.
    pub beta: f64,
    /// Photon scattering rate (1/s).
    pub gamma: f64,
    /// Control Larmor angular frequency |Ω| (rad/s).
    pub larmor_omega: f64,
    /// Standard deviation of the inhomogeneous background Larmor frequency
    /// (Hz, not rad/s).
    pub background_std_hz: f64,
    /// Total record duration (s).
    pub duration: f64,
    /// Detector coarse-graining time Δt (s).
    pub dt_coarse: f64,
    /// Propagation step δt (s).
    pub dt_fine: f64,
    pub dissipator: DissipatorModel,
    /// Gauss-Hermite nodes for the background average; odd.
    pub quadrature_points: usize,
}

impl PhysicsParams {
    /// Cesium ground-manifold defaults: γ = 10³ s⁻¹, |Ω| = 2π·15 kHz,
    /// 60 Hz background spread, T = 4 ms, Δt = 4 μs, δt = Δt/4, loss-only
    /// dissipation and 7 quadrature nodes.
    pub fn cesium(sys: SpinSystem, beta: f64) -> Self {
        Self {
            sys,
            beta,
            gamma: 1e3,
            larmor_omega: TAU * 15e3,
            background_std_hz: 60.0,
            duration: 4e-3,
            dt_coarse: 4e-6,
            dt_fine: 1e-6,
            dissipator: DissipatorModel::LossOnly,
            quadrature_points: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(invalid!("{name} must be finite and non-negative, got {v}"))
            }
        };
        finite_nonneg("beta", self.beta)?;
        finite_nonneg("gamma", self.gamma)?;
        finite_nonneg("background_std_hz", self.background_std_hz)?;
        if !self.larmor_omega.is_finite() {
            return Err(invalid!("larmor_omega must be finite"));
        }
        for (name, v) in [
            ("duration", self.duration),
            ("dt_coarse", self.dt_coarse),
            ("dt_fine", self.dt_fine),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid!("{name} must be positive, got {v}"));
            }
        }
        integer_ratio(self.dt_coarse, self.dt_fine).ok_or_else(|| {
            invalid!(
                "dt_fine {} does not divide dt_coarse {}",
                self.dt_fine,
                self.dt_coarse
            )
        })?;
        integer_ratio(self.duration, self.dt_coarse).ok_or_else(|| {
            invalid!(
                "dt_coarse {} does not divide duration {}",
                self.dt_coarse,
                self.duration
            )
        })?;
        if self.quadrature_points == 0 || self.quadrature_points.is_multiple_of(2) {
            return Err(invalid!(
                "quadrature_points must be odd and positive, got {}",
                self.quadrature_points
            ));
        }
        if let DissipatorModel::IsotropicPumping { branching } = self.dissipator {
            if !(0.0..=1.0).contains(&branching) {
                return Err(invalid!(
                    "branching fraction must lie in [0, 1], got {branching}"
                ));
            }
        }
        Ok(())
    }

    /// Number of coarse-grained bins `K = T/Δt`.
    pub fn n_bins(&self) -> usize {
        (self.duration / self.dt_coarse).round() as usize
    }

    /// Propagation steps per coarse-grained bin.
    pub fn steps_per_bin(&self) -> usize {
        (self.dt_coarse / self.dt_fine).round() as usize
    }

    pub fn n_steps(&self) -> usize {
        self.n_bins() * self.steps_per_bin()
    }

    /// Coefficient of the `Fx²` term (rad/s).
    pub fn nonlinear_rate(&self) -> f64 {
        self.beta * self.gamma
    }

    /// Background Larmor shifts (rad/s) and probability weights summing to
    /// one. A zero spread collapses to the single node `(0, 1)`.
    pub fn background_nodes(&self) -> Vec<(f64, f64)> {
        let sigma = TAU * self.background_std_hz;
        if sigma == 0.0 || self.quadrature_points == 1 {
            return alloc::vec![(0.0, 1.0)];
        }
        gauss_hermite_normal(self.quadrature_points)
            .into_iter()
            .map(|(z, w)| (sigma * z, w))
            .collect()
    }
}

fn integer_ratio(num: f64, den: f64) -> Option<usize> {
    let r = num / den;
    let n = r.round();
    if n >= 1.0 && (r - n).abs() <= 1e-9 * n {
        Some(n as usize)
    } else {
        None
    }
}

/// Nodes and weights integrating against the standard normal density, from
/// the eigen-decomposition of the probabilists' Hermite Jacobi matrix.
pub fn gauss_hermite_normal(n: usize) -> Vec<(f64, f64)> {
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let (vals, vecs) = eigh_real(&jacobi);
    let mut nodes: Vec<(f64, f64)> = (0..n)
        .map(|k| (vals[k], vecs[(0, k)] * vecs[(0, k)]))
        .collect();
    // Exact symmetry about zero.
    for k in 0..n / 2 {
        let (a, b) = (nodes[k], nodes[n - 1 - k]);
        let x = 0.5 * (b.0 - a.0);
        let w = 0.5 * (a.1 + b.1);
        nodes[k] = (-x, w);
        nodes[n - 1 - k] = (x, w);
    }
    if n % 2 == 1 {
        nodes[n / 2].0 = 0.0;
    }
    let total: f64 = nodes.iter().map(|p| p.1).sum();
    nodes.iter_mut().for_each(|p| p.1 /= total);
    nodes
}
