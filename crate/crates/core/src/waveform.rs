//! Planar control waveforms defined by knot angles.
//!
//! The field direction `φ(t)` is a Catmull-Rom spline through the knot
//! angles after shortest-arc unwrapping, with knots at `t_k = k T/(n-1)` and
//! linear extrapolation for the phantom end points. The spline is C¹ and
//! free of 2π branch-cut jumps.

use alloc::vec::Vec;
use core::f64::consts::{PI, TAU};

use num_traits::Euclid;

use crate::error::invalid;
use crate::Result;

/// Fewest knots a waveform may have.
pub const MIN_KNOTS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ControlWaveform {
    knot_angles: Vec<f64>,
    duration: f64,
    unwrapped: Vec<f64>,
}

impl ControlWaveform {
    /// Angles are reduced into `[0, 2π)`.
    pub fn new(knot_angles: Vec<f64>, duration: f64) -> Result<Self> {
        if knot_angles.len() < MIN_KNOTS {
            return Err(invalid!(
                "waveform needs at least {MIN_KNOTS} knots, got {}",
                knot_angles.len()
            ));
        }
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(invalid!(
                "waveform duration must be positive, got {duration}"
            ));
        }
        if knot_angles.iter().any(|a| !a.is_finite()) {
            return Err(invalid!("knot angles must be finite"));
        }
        let knot_angles: Vec<f64> = knot_angles.into_iter().map(reduce_angle).collect();
        let unwrapped = unwrap(&knot_angles);
        Ok(Self {
            knot_angles,
            duration,
            unwrapped,
        })
    }

    /// Constant direction `angle` over `[0, duration]`.
    pub fn constant(n: usize, angle: f64, duration: f64) -> Result<Self> {
        Self::new(alloc::vec![angle; n], duration)
    }

    pub fn knot_angles(&self) -> &[f64] {
        &self.knot_angles
    }

    pub fn n_knots(&self) -> usize {
        self.knot_angles.len()
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn knot_spacing(&self) -> f64 {
        self.duration / (self.n_knots() - 1) as f64
    }

    pub fn knot_time(&self, k: usize) -> f64 {
        k as f64 * self.knot_spacing()
    }

    /// Copy with knot `k` replaced by `angle`.
    pub fn with_knot(&self, k: usize, angle: f64) -> Self {
        let mut angles = self.knot_angles.clone();
        angles[k] = reduce_angle(angle);
        let unwrapped = unwrap(&angles);
        Self {
            knot_angles: angles,
            duration: self.duration,
            unwrapped,
        }
    }

    /// Copy with every knot rotated by `offset`.
    pub fn rotated(&self, offset: f64) -> Self {
        let angles: Vec<f64> = self
            .knot_angles
            .iter()
            .map(|a| reduce_angle(a + offset))
            .collect();
        let unwrapped = unwrap(&angles);
        Self {
            knot_angles: angles,
            duration: self.duration,
            unwrapped,
        }
    }

    /// Interpolated field angle at `t`, not reduced modulo 2π. `t` is clamped
    /// into `[0, T]`.
    pub fn angle_at(&self, t: f64) -> f64 {
        let n = self.n_knots();
        let h = self.knot_spacing();
        let x = (t / h).clamp(0.0, (n - 1) as f64);
        let seg = (x.floor() as usize).min(n - 2);
        let u = x - seg as f64;
        let p = |k: isize| -> f64 {
            if k < 0 {
                2.0 * self.unwrapped[0] - self.unwrapped[1]
            } else if k as usize >= n {
                2.0 * self.unwrapped[n - 1] - self.unwrapped[n - 2]
            } else {
                self.unwrapped[k as usize]
            }
        };
        let s = seg as isize;
        let (p0, p1, p2, p3) = (p(s - 1), p(s), p(s + 1), p(s + 2));
        0.5 * (2.0 * p1
            + (p2 - p0) * u
            + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * u * u
            + (3.0 * p1 - p0 - 3.0 * p2 + p3) * u * u * u)
    }

    /// Field direction `(cos φ, sin φ)` at `t`.
    pub fn direction_at(&self, t: f64) -> (f64, f64) {
        let phi = self.angle_at(t);
        (phi.cos(), phi.sin())
    }

    /// Time interval over which knot `k` influences `φ`.
    pub fn support_of_knot(&self, k: usize) -> (f64, f64) {
        let n = self.n_knots() as isize;
        let k = k as isize;
        let lo = (k - 2).max(0);
        let hi = (k + 2).min(n - 1);
        (self.knot_time(lo as usize), self.knot_time(hi as usize))
    }
}

fn reduce_angle(a: f64) -> f64 {
    let r = Euclid::rem_euclid(&a, &TAU);
    if r >= TAU {
        0.0
    } else {
        r
    }
}

fn unwrap(angles: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(angles.len());
    let mut prev = angles[0];
    out.push(prev);
    for w in angles.windows(2) {
        let step = Euclid::rem_euclid(&(w[1] - w[0] + PI), &TAU) - PI;
        prev += step;
        out.push(prev);
    }
    out
}
