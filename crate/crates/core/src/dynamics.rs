//! Heisenberg-picture propagation of the measured observable `Fz`.
//!
//! The Hamiltonian is
//!
//! ```text
//! H(t) = |Ω| (cos φ(t) Fx + sin φ(t) Fy) + b0 Fz + β γ Fx²      (ħ = 1)
//! ```
//!
//! and the adjoint generator acting on an observable `A` is
//! `i[H, A] - (γ/2) D†[A]`. Each propagation step freezes the generator with
//! a sixth-order Magnus exponent built from three Gauss-Legendre samples,
//! then exponentiates it. Samples of `O(t)` at the step boundaries are
//! averaged into coarse-grained bins with a composite Newton-Cotes rule and
//! finally averaged over the Gauss-Hermite background nodes.
//!
//! Two propagation routes exist. Under [`DissipatorModel::LossOnly`] the
//! dissipator is a scalar decay that commutes with everything, so the
//! evolution factors into `e^{-γt} U†(t) Fz U(t)` and only `d × d` unitaries
//! are propagated. Otherwise the full `d² × d²` superoperator is propagated.

use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::error::invalid;
use crate::linalg::{cmul_to, expm, magnus6, SkewStepper, MAGNUS_NODES};
use crate::operator::{HermitianOperator, OperatorVector, SpinSystem};
use crate::physics::{DissipatorModel, PhysicsParams};
use crate::waveform::ControlWaveform;
use crate::{Error, Result, C64};

/// `H(t)` for waveform `w` and background Larmor shift `b0_shift` (rad/s).
pub fn build_hamiltonian(
    t: f64,
    w: &ControlWaveform,
    b0_shift: f64,
    p: &PhysicsParams,
) -> Result<HermitianOperator> {
    check_time(t, p)?;
    let parts = HamiltonianParts::new(p);
    Ok(HermitianOperator::from_matrix_unchecked(
        parts.hamiltonian(w, b0_shift, t),
    ))
}

fn check_time(t: f64, p: &PhysicsParams) -> Result<()> {
    let slack = 1e-12 * p.duration;
    if !(t >= -slack && t <= p.duration + slack) {
        return Err(invalid!("time {t} outside [0, {}]", p.duration));
    }
    Ok(())
}

fn check_waveform(w: &ControlWaveform, p: &PhysicsParams) -> Result<()> {
    if (w.duration() - p.duration).abs() > 1e-9 * p.duration {
        return Err(invalid!(
            "waveform duration {} does not match record duration {}",
            w.duration(),
            p.duration
        ));
    }
    Ok(())
}

/// Fixed operator pieces of `H(t)`, pre-scaled by their rates.
#[derive(Clone, Debug)]
pub(crate) struct HamiltonianParts {
    x: DMatrix<C64>,
    y: DMatrix<C64>,
    z: DMatrix<C64>,
    constant: DMatrix<C64>,
}

impl HamiltonianParts {
    pub(crate) fn new(p: &PhysicsParams) -> Self {
        let sys = &p.sys;
        let om = C64::new(p.larmor_omega, 0.0);
        Self {
            x: sys.fx() * om,
            y: sys.fy() * om,
            z: sys.fz().clone(),
            constant: sys.fx() * sys.fx() * C64::new(p.nonlinear_rate(), 0.0),
        }
    }

    pub(crate) fn hamiltonian(&self, w: &ControlWaveform, b0: f64, t: f64) -> DMatrix<C64> {
        let (c, s) = w.direction_at(t);
        &self.x * C64::new(c, 0.0)
            + &self.y * C64::new(s, 0.0)
            + &self.z * C64::new(b0, 0.0)
            + &self.constant
    }

    /// `out = -i H(t)`.
    fn minus_i_h_into(&self, w: &ControlWaveform, b0: f64, t: f64, out: &mut DMatrix<C64>) {
        let (c, s) = w.direction_at(t);
        let it = out
            .as_mut_slice()
            .iter_mut()
            .zip(self.x.as_slice().iter())
            .zip(self.y.as_slice().iter());
        for (((o, x), y), (z, k)) in it.zip(
            self.z
                .as_slice()
                .iter()
                .zip(self.constant.as_slice().iter()),
        ) {
            let h = x * c + y * s + z * b0 + k;
            *o = C64::new(h.im, -h.re);
        }
    }
}

/// Step unitaries of `H(t)` with reusable buffers.
#[derive(Clone, Debug)]
pub(crate) struct UnitaryStepper {
    parts: HamiltonianParts,
    samples: [DMatrix<C64>; 3],
    stepper: SkewStepper,
}

impl UnitaryStepper {
    pub(crate) fn new(p: &PhysicsParams) -> Self {
        let d = p.sys.dim();
        Self {
            parts: HamiltonianParts::new(p),
            samples: core::array::from_fn(|_| DMatrix::zeros(d, d)),
            stepper: SkewStepper::new(d),
        }
    }

    /// Unitary for the step `[t, t + dt]`, written into `out`.
    pub(crate) fn step(
        &mut self,
        w: &ControlWaveform,
        b0: f64,
        t: f64,
        dt: f64,
        out: &mut DMatrix<C64>,
    ) -> Result<()> {
        for (c, a) in MAGNUS_NODES.iter().zip(self.samples.iter_mut()) {
            self.parts.minus_i_h_into(w, b0, t + c * dt, a);
        }
        let [a1, a2, a3] = &self.samples;
        self.stepper.step([a1, a2, a3], dt, out)
    }
}

/// Adjoint (Heisenberg) generator on the full `d²` coordinate vector
/// `[Tr A/sqrt(d), Tr E_1 A, ...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub matrix: DMatrix<f64>,
}

/// Adjoint generator for Hamiltonian `h` and the dissipator of `p`.
pub fn build_generator(h: &HermitianOperator, p: &PhysicsParams) -> Result<Generator> {
    if h.dim() != p.sys.dim() {
        return Err(invalid!(
            "Hamiltonian dimension {} does not match spin dimension {}",
            h.dim(),
            p.sys.dim()
        ));
    }
    let mut g = commutator_superop(&p.sys, h.matrix());
    g += dissipator_superop(p);
    Ok(Generator { matrix: g })
}

/// Full orthonormal operator basis `[I/sqrt(d), E_1, ...]`.
fn full_basis(sys: &SpinSystem) -> Vec<DMatrix<C64>> {
    let d = sys.dim();
    let mut out = Vec::with_capacity(d * d);
    out.push(sys.identity() * C64::new(1.0 / (d as f64).sqrt(), 0.0));
    out.extend(sys.basis().iter().cloned());
    out
}

/// Matrix of `A -> op(A)` on full coordinates.
fn superop_matrix(sys: &SpinSystem, op: impl Fn(&DMatrix<C64>) -> DMatrix<C64>) -> DMatrix<f64> {
    let basis = full_basis(sys);
    let n = basis.len();
    let mut g = DMatrix::zeros(n, n);
    let mut col = alloc::vec![0.0; n];
    for (k, b) in basis.iter().enumerate() {
        sys.gell_mann_coords_into(&op(b), &mut col);
        g.column_mut(k).copy_from_slice(&col);
    }
    g
}

/// `A -> i[H, A]`.
fn commutator_superop(sys: &SpinSystem, h: &DMatrix<C64>) -> DMatrix<f64> {
    let i = C64::new(0.0, 1.0);
    superop_matrix(sys, |a| (h * a - a * h) * i)
}

/// `A -> -(γ/2) D†[A]`.
fn dissipator_superop(p: &PhysicsParams) -> DMatrix<f64> {
    let sys = &p.sys;
    let n = sys.dim() * sys.dim();
    match p.dissipator {
        DissipatorModel::LossOnly => DMatrix::identity(n, n) * (-p.gamma),
        DissipatorModel::IsotropicPumping { branching } => {
            let f = sys.spin().value();
            let mix = 2.0 * branching / (f * (f + 1.0));
            let half_gamma = C64::new(0.5 * p.gamma, 0.0);
            superop_matrix(sys, |a| {
                let mut sandwich = DMatrix::<C64>::zeros(a.nrows(), a.ncols());
                for q in 0..3 {
                    let fq = sys.component(q);
                    sandwich += fq * a * fq;
                }
                (a * C64::new(2.0, 0.0) - sandwich * C64::new(mix, 0.0)) * (-half_gamma)
            })
        }
    }
}

/// `exp(G dt)` on full coordinates.
pub fn step_propagator(g: &Generator, dt: f64) -> Result<DMatrix<f64>> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(invalid!("step length must be positive, got {dt}"));
    }
    expm(&(&g.matrix * dt))
}

/// Frozen adjoint generator over one step from the generator sampled at the
/// three Gauss-Legendre nodes, such that the step propagator is
/// `exp(G_eff dt)` and the observable update is `P ← P exp(G_eff dt)`.
pub fn effective_step_generator(samples: [&Generator; 3], dt: f64) -> Generator {
    let neg = |g: &Generator| -&g.matrix;
    let omega = -magnus6(&neg(samples[0]), &neg(samples[1]), &neg(samples[2]), dt);
    Generator { matrix: omega / dt }
}

/// Superoperator pieces of the adjoint generator; `G(t)` is their linear
/// combination.
#[derive(Clone, Debug)]
struct GeneratorParts {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
    z: DMatrix<f64>,
    constant: DMatrix<f64>,
}

impl GeneratorParts {
    fn new(p: &PhysicsParams) -> Self {
        let sys = &p.sys;
        let om = C64::new(p.larmor_omega, 0.0);
        let fxx = sys.fx() * sys.fx() * C64::new(p.nonlinear_rate(), 0.0);
        Self {
            x: commutator_superop(sys, &(sys.fx() * om)),
            y: commutator_superop(sys, &(sys.fy() * om)),
            z: commutator_superop(sys, sys.fz()),
            constant: commutator_superop(sys, &fxx) + dissipator_superop(p),
        }
    }

    fn at(&self, w: &ControlWaveform, b0: f64, t: f64) -> DMatrix<f64> {
        let (c, s) = w.direction_at(t);
        &self.x * c + &self.y * s + &self.z * b0 + &self.constant
    }
}

/// Which propagation route to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    /// Unitary route when the dissipator allows it, superoperator otherwise.
    Auto,
    /// Always propagate the full superoperator.
    Superoperator,
}

/// Visits `O(t_j)` for `t_j = j δt`, `j = 0..=N`, as full `d²` coordinates,
/// for one background shift `b0` (rad/s).
pub fn for_each_heisenberg_sample(
    w: &ControlWaveform,
    p: &PhysicsParams,
    b0: f64,
    route: Route,
    mut visit: impl FnMut(usize, &[f64]),
) -> Result<()> {
    p.validate()?;
    check_waveform(w, p)?;
    let sys = &p.sys;
    let d = sys.dim();
    let n_steps = p.n_steps();
    let dt = p.dt_fine;
    let mut coords = alloc::vec![0.0; d * d];

    let unitary = route == Route::Auto && p.dissipator == DissipatorModel::LossOnly;
    if unitary {
        let mut stepper = UnitaryStepper::new(p);
        let fz_diag: Vec<f64> = (0..d).map(|i| sys.fz()[(i, i)].re).collect();
        let mut u = DMatrix::<C64>::identity(d, d);
        let mut scaled = DMatrix::<C64>::zeros(d, d);
        let mut o = DMatrix::<C64>::zeros(d, d);
        let mut next = DMatrix::<C64>::zeros(d, d);
        let mut v = DMatrix::<C64>::zeros(d, d);
        for j in 0..=n_steps {
            let t = j as f64 * dt;
            conjugate_diagonal(&u, &fz_diag, (-p.gamma * t).exp(), &mut scaled, &mut o);
            sys.gell_mann_coords_into(&o, &mut coords);
            visit(j, &coords);
            if j == n_steps {
                break;
            }
            stepper.step(w, b0, t, dt, &mut v)?;
            cmul_to(&v, &u, &mut next);
            core::mem::swap(&mut u, &mut next);
        }
    } else {
        let parts = GeneratorParts::new(p);
        let fz = HermitianOperator::from_matrix_unchecked(sys.fz().clone());
        let o0 = sys.vectorize(&fz)?.to_full();
        let n = d * d;
        let mut prop = DMatrix::<f64>::identity(n, n);
        let mut next = DMatrix::<f64>::zeros(n, n);
        let mut o = DVector::<f64>::zeros(n);
        for j in 0..=n_steps {
            let t = j as f64 * dt;
            prop.mul_to(&o0, &mut o);
            coords.copy_from_slice(o.as_slice());
            visit(j, &coords);
            if j == n_steps {
                break;
            }
            let g = MAGNUS_NODES.map(|c| Generator {
                matrix: parts.at(w, b0, t + c * dt),
            });
            let eff = effective_step_generator([&g[0], &g[1], &g[2]], dt);
            let step = step_propagator(&eff, dt)?;
            prop.mul_to(&step, &mut next);
            core::mem::swap(&mut prop, &mut next);
        }
    }
    Ok(())
}

/// `out = scale · U† diag(z) U`, using `scaled` as scratch.
pub(crate) fn conjugate_diagonal(
    u: &DMatrix<C64>,
    z: &[f64],
    scale: f64,
    scaled: &mut DMatrix<C64>,
    out: &mut DMatrix<C64>,
) {
    let d = u.nrows();
    for c in 0..d {
        for r in 0..d {
            scaled[(r, c)] = u[(r, c)] * (z[r] * scale);
        }
    }
    // Hermitian result: fill the upper triangle and mirror it.
    for j in 0..d {
        let sj = scaled.column(j);
        for i in 0..=j {
            let ui = u.column(i);
            let mut acc = C64::new(0.0, 0.0);
            for k in 0..d {
                acc += ui[k].conj() * sj[k];
            }
            out[(i, j)] = acc;
            out[(j, i)] = acc.conj();
        }
    }
}

/// Expectation values `Tr[O ρ(t_j)]` at the requested step indices, from
/// forward (Schrödinger-picture) propagation of `rho0` with the full
/// superoperator.
pub fn schrodinger_expectations(
    rho0: &HermitianOperator,
    observable: &HermitianOperator,
    w: &ControlWaveform,
    p: &PhysicsParams,
    b0: f64,
    step_indices: &[usize],
) -> Result<Vec<f64>> {
    p.validate()?;
    check_waveform(w, p)?;
    let sys = &p.sys;
    let mut r = sys.vectorize(rho0)?.to_full();
    let o = sys.vectorize(observable)?.to_full();
    let parts = GeneratorParts::new(p);
    let last = step_indices.iter().copied().max().unwrap_or(0);
    if last > p.n_steps() {
        return Err(invalid!(
            "step index {last} beyond the {} propagation steps",
            p.n_steps()
        ));
    }
    let dt = p.dt_fine;
    let mut values = alloc::vec![0.0; step_indices.len()];
    for j in 0..=last {
        for (slot, _) in step_indices.iter().enumerate().filter(|(_, &s)| s == j) {
            values[slot] = o.dot(&r);
        }
        if j == last {
            break;
        }
        let t = j as f64 * dt;
        // State generator is the transpose of the adjoint one.
        let l = MAGNUS_NODES.map(|c| parts.at(w, b0, t + c * dt).transpose());
        r = expm(&magnus6(&l[0], &l[1], &l[2], dt))? * r;
    }
    Ok(values)
}

/// Weights of the composite Newton-Cotes rule over `s + 1` equally spaced
/// samples of one bin, normalized to sum to one: Boole when `s` is a multiple
/// of four, Simpson when even, trapezoid otherwise.
pub fn bin_weights(s: usize) -> Vec<f64> {
    let mut w = alloc::vec![0.0; s + 1];
    if s.is_multiple_of(4) {
        for k in (0..s).step_by(4) {
            for (o, c) in [7.0, 32.0, 12.0, 32.0, 7.0].iter().enumerate() {
                w[k + o] += c * 4.0 / 90.0;
            }
        }
    } else if s.is_multiple_of(2) {
        for k in (0..s).step_by(2) {
            for (o, c) in [1.0, 4.0, 1.0].iter().enumerate() {
                w[k + o] += c * 2.0 / 6.0;
            }
        }
    } else {
        for k in 0..s {
            w[k] += 0.5;
            w[k + 1] += 0.5;
        }
    }
    w.iter_mut().for_each(|x| *x /= s as f64);
    w
}

/// Adds `weight · sample` into the bins the sample belongs to.
pub(crate) fn scatter_into_bins(
    j: usize,
    sample: &[f64],
    weight: f64,
    bin_w: &[f64],
    n_bins: usize,
    out: &mut [f64],
) {
    let s = bin_w.len() - 1;
    let width = sample.len();
    let (bin, pos) = (j / s, j % s);
    let mut add = |b: usize, c: f64| {
        let row = &mut out[b * width..(b + 1) * width];
        for (r, x) in row.iter_mut().zip(sample) {
            *r += c * x;
        }
    };
    if bin < n_bins {
        add(bin, weight * bin_w[pos]);
    }
    if pos == 0 && bin > 0 {
        add(bin - 1, weight * bin_w[s]);
    }
}

/// Coarse-grained, background-averaged measurement operators `{O_i}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservableHistory {
    pub ops: Vec<OperatorVector>,
    /// Bin centers (s).
    pub times: Vec<f64>,
    /// SHA-256 of the generating parameters and waveform, hex.
    pub params_digest: String,
    /// Moving-average window already applied; 1 for a raw history.
    pub filter_window: usize,
}

impl ObservableHistory {
    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Number of traceless coordinates per operator.
    pub fn n_traceless(&self) -> usize {
        self.ops.first().map_or(0, |o| o.coeffs.len())
    }

    /// SHA-256 over the bit patterns of every stored coordinate, hex.
    pub fn content_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.params_digest.as_bytes());
        h.update((self.filter_window as u64).to_le_bytes());
        for (op, t) in self.ops.iter().zip(&self.times) {
            h.update(t.to_bits().to_le_bytes());
            h.update(op.trace_part.to_bits().to_le_bytes());
            for c in op.coeffs.iter() {
                h.update(c.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub(crate) fn from_flat(flat: &[f64], width: usize, p: &PhysicsParams, digest: String) -> Self {
        let n_bins = flat.len() / width;
        let ops = (0..n_bins)
            .map(|i| OperatorVector::from_full(&flat[i * width..(i + 1) * width]))
            .collect();
        let times = (0..n_bins)
            .map(|i| (i as f64 + 0.5) * p.dt_coarse)
            .collect();
        Self {
            ops,
            times,
            params_digest: digest,
            filter_window: 1,
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    use core::fmt::Write;
    let mut s = String::with_capacity(2 * bytes.len());
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// SHA-256 of everything that determines an observable history.
pub fn params_digest(w: &ControlWaveform, p: &PhysicsParams) -> String {
    let mut h = Sha256::new();
    h.update(p.sys.spin().twice().to_le_bytes());
    for v in [
        p.beta,
        p.gamma,
        p.larmor_omega,
        p.background_std_hz,
        p.duration,
        p.dt_coarse,
        p.dt_fine,
    ] {
        h.update(v.to_bits().to_le_bytes());
    }
    match p.dissipator {
        DissipatorModel::LossOnly => h.update([0u8]),
        DissipatorModel::IsotropicPumping { branching } => {
            h.update([1u8]);
            h.update(branching.to_bits().to_le_bytes());
        }
    }
    h.update((p.quadrature_points as u64).to_le_bytes());
    h.update(w.duration().to_bits().to_le_bytes());
    for a in w.knot_angles() {
        h.update(a.to_bits().to_le_bytes());
    }
    hex(&h.finalize())
}

/// Measurement operators `{O_i}` for waveform `w`.
pub fn observable_history(w: &ControlWaveform, p: &PhysicsParams) -> Result<ObservableHistory> {
    observable_history_with(w, p, Route::Auto)
}

pub fn observable_history_with(
    w: &ControlWaveform,
    p: &PhysicsParams,
    route: Route,
) -> Result<ObservableHistory> {
    p.validate()?;
    check_waveform(w, p)?;
    let d = p.sys.dim();
    let width = d * d;
    let n_bins = p.n_bins();
    let bin_w = bin_weights(p.steps_per_bin());
    let mut flat = alloc::vec![0.0; n_bins * width];
    for (b0, weight) in p.background_nodes() {
        for_each_heisenberg_sample(w, p, b0, route, |j, sample| {
            scatter_into_bins(j, sample, weight, &bin_w, n_bins, &mut flat);
        })?;
    }
    if flat.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericalFailure(
            "non-finite observable history".into(),
        ));
    }
    Ok(ObservableHistory::from_flat(
        &flat,
        width,
        p,
        params_digest(w, p),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::make_spin_system;
    use crate::physics::BETA_D1;
    use approx::assert_abs_diff_eq;
    use core::f64::consts::{PI, TAU};

    fn short_params(f: f64) -> PhysicsParams {
        let mut p = PhysicsParams::cesium(make_spin_system(f).unwrap(), BETA_D1);
        p.duration = 2e-4;
        p
    }

    fn wave(p: &PhysicsParams, seed: u64) -> ControlWaveform {
        let mut x = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        let angles = (0..8)
            .map(|_| {
                x = x
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                (x >> 11) as f64 / (1u64 << 53) as f64 * TAU
            })
            .collect();
        ControlWaveform::new(angles, p.duration).unwrap()
    }

    fn frozen(p: &mut PhysicsParams) {
        p.larmor_omega = 0.0;
        p.beta = 0.0;
        p.gamma = 0.0;
        p.background_std_hz = 0.0;
    }

    #[test]
    fn hamiltonian_with_only_the_control_term() {
        let mut p = short_params(3.0);
        p.beta = 0.0;
        let w = ControlWaveform::constant(6, 0.0, p.duration).unwrap();
        let h = build_hamiltonian(1e-4, &w, 0.0, &p).unwrap();
        let want = p.sys.fx() * C64::new(p.larmor_omega, 0.0);
        assert!((h.matrix() - want).norm() < 1e-9);
        assert!(build_hamiltonian(3e-4, &w, 0.0, &p).is_err());
        assert!(build_hamiltonian(-1e-9, &w, 0.0, &p).is_err());
    }

    #[test]
    fn nonlinear_coefficient_in_the_d1_regime() {
        let mut p = short_params(3.0);
        p.larmor_omega = 0.0;
        let w = ControlWaveform::constant(6, 0.0, p.duration).unwrap();
        let h = build_hamiltonian(0.0, &w, 0.0, &p).unwrap();
        let fxx = p.sys.fx() * p.sys.fx();
        assert!((h.matrix() - fxx * C64::new(7670.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn generator_gives_larmor_precession() {
        let mut p = short_params(1.0);
        p.gamma = 0.0;
        let omega = 2.5;
        let h = HermitianOperator::new(p.sys.fz() * C64::new(omega, 0.0)).unwrap();
        let g = build_generator(&h, &p).unwrap();
        let vec_of = |m: &DMatrix<C64>| {
            p.sys
                .vectorize(&HermitianOperator::new(m.clone()).unwrap())
                .unwrap()
                .to_full()
        };
        let dfx = &g.matrix * vec_of(p.sys.fx());
        let want = vec_of(p.sys.fy()) * (-omega);
        assert!((dfx - want).norm() < 1e-12);
    }

    #[test]
    fn loss_only_generator_is_pure_decay() {
        let mut p = short_params(1.5);
        p.gamma = 700.0;
        let zero = HermitianOperator::new(DMatrix::zeros(4, 4)).unwrap();
        let g = build_generator(&zero, &p).unwrap();
        let prop = step_propagator(&g, 1e-3).unwrap();
        let want = DMatrix::<f64>::identity(16, 16) * (-0.7f64).exp();
        assert!((prop - want).norm() < 1e-13);
    }

    #[test]
    fn closed_generator_is_antisymmetric() {
        let mut p = short_params(2.0);
        p.gamma = 0.0;
        let w = wave(&p, 3);
        let h = build_hamiltonian(5e-5, &w, 40.0, &p).unwrap();
        let g = build_generator(&h, &p).unwrap();
        assert!((&g.matrix + g.matrix.transpose()).norm() < 1e-9 * g.matrix.norm());
    }

    #[test]
    fn isotropic_dissipator_preserves_vector_operators_direction() {
        let mut p = short_params(1.0);
        p.dissipator = DissipatorModel::isotropic();
        p.gamma = 1.0;
        let zero = HermitianOperator::new(DMatrix::zeros(3, 3)).unwrap();
        let g = build_generator(&zero, &p).unwrap();
        let fz = p
            .sys
            .vectorize(&HermitianOperator::new(p.sys.fz().clone()).unwrap())
            .unwrap()
            .to_full();
        // Σ Fq Fz Fq = (F(F+1) - 1) Fz for any F.
        let f = 1.0;
        let rate = -0.5 * (2.0 - 2.0 * 0.5 * (f * (f + 1.0) - 1.0) / (f * (f + 1.0)));
        assert!((&g.matrix * &fz - &fz * rate).norm() < 1e-12);
    }

    #[test]
    fn quarter_period_rotation_maps_fx_to_minus_fy() {
        let mut p = short_params(1.5);
        p.gamma = 0.0;
        let omega = 3.0;
        let h = HermitianOperator::new(p.sys.fz() * C64::new(omega, 0.0)).unwrap();
        let g = build_generator(&h, &p).unwrap();
        let prop = step_propagator(&g, PI / (2.0 * omega)).unwrap();
        let vec_of = |m: &DMatrix<C64>| {
            p.sys
                .vectorize(&HermitianOperator::new(m.clone()).unwrap())
                .unwrap()
                .to_full()
        };
        let got = prop * vec_of(p.sys.fx());
        assert!((got + vec_of(p.sys.fy())).norm() < 1e-12);
    }

    #[test]
    fn semigroup_property() {
        let mut p = short_params(1.0);
        p.dissipator = DissipatorModel::isotropic();
        let w = wave(&p, 9);
        let h = build_hamiltonian(1e-4, &w, 100.0, &p).unwrap();
        let g = build_generator(&h, &p).unwrap();
        let a = step_propagator(&g, 2e-6).unwrap();
        let b = step_propagator(&g, 4e-6).unwrap();
        assert!((&a * &a - &b).norm() < 1e-9);
        assert!(step_propagator(&g, 0.0).is_err());
    }

    #[test]
    fn frozen_dynamics_keep_fz() {
        let mut p = short_params(3.0);
        frozen(&mut p);
        let w = wave(&p, 1);
        let hist = observable_history(&w, &p).unwrap();
        assert_eq!(hist.len(), p.n_bins());
        let fz = p
            .sys
            .vectorize(&HermitianOperator::new(p.sys.fz().clone()).unwrap())
            .unwrap();
        for op in &hist.ops {
            assert!((op.to_full() - fz.to_full()).norm() < 1e-12);
        }
    }

    #[test]
    fn loss_only_norm_follows_the_decay_envelope() {
        let mut p = short_params(3.0);
        frozen(&mut p);
        p.gamma = 1e3;
        let w = wave(&p, 2);
        let hist = observable_history(&w, &p).unwrap();
        let fz_norm = 28f64.sqrt();
        let x = 0.5 * p.gamma * p.dt_coarse;
        for (op, &t) in hist.ops.iter().zip(&hist.times) {
            let want = fz_norm * (-p.gamma * t).exp() * x.sinh() / x;
            assert_abs_diff_eq!(op.norm(), want, epsilon = 1e-12 * fz_norm);
        }
        // With precession on, the envelope still holds up to the shrinkage of
        // averaging a rotating operator over one bin.
        p.larmor_omega = TAU * 15e3;
        let hist = observable_history(&w, &p).unwrap();
        for (op, &t) in hist.ops.iter().zip(&hist.times) {
            let want = fz_norm * (-p.gamma * t).exp();
            assert!((op.norm() - want).abs() < 1e-2 * want);
        }
    }

    #[test]
    fn unitary_and_superoperator_routes_agree() {
        let mut p = short_params(1.5);
        p.duration = 8e-5;
        let w = ControlWaveform::new(alloc::vec![0.3, 2.0, 4.4, 1.1, 5.9], p.duration).unwrap();
        let a = observable_history_with(&w, &p, Route::Auto).unwrap();
        let b = observable_history_with(&w, &p, Route::Superoperator).unwrap();
        for (x, y) in a.ops.iter().zip(&b.ops) {
            assert!((x.to_full() - y.to_full()).norm() < 1e-10);
        }
    }

    #[test]
    fn history_is_deterministic() {
        let p = short_params(1.0);
        let w = wave(&p, 5);
        let a = observable_history(&w, &p).unwrap();
        let b = observable_history(&w, &p).unwrap();
        assert_eq!(a.content_digest(), b.content_digest());
        assert_eq!(a.params_digest, b.params_digest);
        let other = observable_history(&w.with_knot(2, 1.0), &p).unwrap();
        assert_ne!(a.params_digest, other.params_digest);
    }

    #[test]
    fn bin_weights_integrate_polynomials() {
        for s in [1, 2, 3, 4, 6, 8] {
            let w = bin_weights(s);
            assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
            let mean_sq: f64 = w
                .iter()
                .enumerate()
                .map(|(k, c)| c * (k as f64 / s as f64).powi(2))
                .sum();
            if s % 2 == 0 {
                assert_abs_diff_eq!(mean_sq, 1.0 / 3.0, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn mismatched_waveform_duration_is_rejected() {
        let p = short_params(1.0);
        let w = ControlWaveform::constant(5, 0.0, 2.0 * p.duration).unwrap();
        assert!(observable_history(&w, &p).is_err());
    }
}
