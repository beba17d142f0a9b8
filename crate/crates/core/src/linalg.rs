//! Dense linear-algebra helpers: matrix exponential, Hermitian eigensolves
//! and the sixth-order Magnus step used to freeze a time-dependent generator
//! over one propagation step.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{ComplexField, DMatrix, DVector, SymmetricEigen};

use crate::{Error, Result, C64};

const THETA_3: f64 = 1.495585217958292e-2;
const THETA_5: f64 = 2.539_398_330_063_23e-1;
const THETA_7: f64 = 9.504178996162932e-1;
const THETA_9: f64 = 2.097847961257068e0;
const THETA_13: f64 = 5.371920351148152e0;

const PADE_3: [f64; 4] = [120., 60., 12., 1.];
const PADE_5: [f64; 6] = [30240., 15120., 3360., 420., 30., 1.];
const PADE_7: [f64; 8] = [
    17297280., 8648640., 1995840., 277200., 25200., 1512., 56., 1.,
];
const PADE_9: [f64; 10] = [
    17643225600.,
    8821612800.,
    2075673600.,
    302702400.,
    30270240.,
    2162160.,
    110880.,
    3960.,
    90.,
    1.,
];
const PADE_13: [f64; 14] = [
    64764752532480000.,
    32382376266240000.,
    7771770303897600.,
    1187353796428800.,
    129060195264000.,
    10559470521600.,
    670442572800.,
    33522128640.,
    1323241920.,
    40840800.,
    960960.,
    16380.,
    182.,
    1.,
];

/// Maximum absolute column sum.
pub fn norm1<T: ComplexField<RealField = f64>>(a: &DMatrix<T>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|x| x.clone().modulus()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring with a diagonal Padé
/// approximant of degree 3, 5, 7, 9 or 13, picked from the 1-norm.
pub fn expm<T>(a: &DMatrix<T>) -> Result<DMatrix<T>>
where
    T: ComplexField<RealField = f64> + Copy,
{
    if !a.is_square() {
        return Err(Error::InvalidArgument(format!(
            "expm of a non-square {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    let n = a.nrows();
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericalFailure(
            "non-finite entry in expm input".into(),
        ));
    }
    let norm = norm1(a);
    let out = if norm <= THETA_3 {
        pade_low(a, &PADE_3)?
    } else if norm <= THETA_5 {
        pade_low(a, &PADE_5)?
    } else if norm <= THETA_7 {
        pade_low(a, &PADE_7)?
    } else if norm <= THETA_9 {
        pade_low(a, &PADE_9)?
    } else {
        let s = (norm / THETA_13).log2().ceil().max(0.0) as i32;
        let scaled = a * T::from_real(2f64.powi(-s));
        let mut x = pade_13(&scaled)?;
        let mut tmp = DMatrix::zeros(n, n);
        for _ in 0..s {
            x.mul_to(&x, &mut tmp);
            core::mem::swap(&mut x, &mut tmp);
        }
        x
    };
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericalFailure(
            "non-finite entry in expm output".into(),
        ));
    }
    Ok(out)
}

fn pade_low<T>(a: &DMatrix<T>, b: &[f64]) -> Result<DMatrix<T>>
where
    T: ComplexField<RealField = f64> + Copy,
{
    let n = a.nrows();
    let m = b.len() - 1;
    let a2 = a * a;
    let mut u_inner = DMatrix::<T>::identity(n, n) * T::from_real(b[1]);
    let mut v = DMatrix::<T>::identity(n, n) * T::from_real(b[0]);
    let mut power = a2.clone();
    let mut k = 2;
    while k <= m {
        v += &power * T::from_real(b[k]);
        u_inner += &power * T::from_real(b[k + 1]);
        k += 2;
        if k <= m {
            power = &power * &a2;
        }
    }
    let u = a * u_inner;
    solve_pade(u, v)
}

fn pade_13<T>(a: &DMatrix<T>) -> Result<DMatrix<T>>
where
    T: ComplexField<RealField = f64> + Copy,
{
    let b = &PADE_13;
    let n = a.nrows();
    let r = |x: f64| T::from_real(x);
    let id = DMatrix::<T>::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let u_hi = &a6 * r(b[13]) + &a4 * r(b[11]) + &a2 * r(b[9]);
    let u_inner = &a6 * u_hi + &a6 * r(b[7]) + &a4 * r(b[5]) + &a2 * r(b[3]) + &id * r(b[1]);
    let u = a * u_inner;
    let v_hi = &a6 * r(b[12]) + &a4 * r(b[10]) + &a2 * r(b[8]);
    let v = &a6 * v_hi + &a6 * r(b[6]) + &a4 * r(b[4]) + &a2 * r(b[2]) + &id * r(b[0]);
    solve_pade(u, v)
}

fn solve_pade<T>(u: DMatrix<T>, v: DMatrix<T>) -> Result<DMatrix<T>>
where
    T: ComplexField<RealField = f64> + Copy,
{
    let p = &v + &u;
    let q = v - u;
    q.lu()
        .solve(&p)
        .ok_or_else(|| Error::NumericalFailure("singular Padé denominator".into()))
}

/// `[a, b] = ab - ba`.
pub fn commutator<T>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T>
where
    T: ComplexField<RealField = f64> + Copy,
{
    a * b - b * a
}

/// Gauss-Legendre nodes on `[0, 1]` used by [`magnus6`].
pub const MAGNUS_NODES: [f64; 3] = [
    0.5 - 0.387_298_334_620_741_7,
    0.5,
    0.5 + 0.387_298_334_620_741_7,
];

/// Sixth-order Magnus exponent for `Y' = A(t) Y` over one step of length
/// `h`, from `A` sampled at the three [`MAGNUS_NODES`].
///
/// `Y(t + h) = exp(Ω) Y(t)` with the returned `Ω`. For the right-acting
/// equation `Y' = Y A(t)` use `-magnus6(-A1, -A2, -A3, h)`.
pub fn magnus6<T>(a1: &DMatrix<T>, a2: &DMatrix<T>, a3: &DMatrix<T>, h: f64) -> DMatrix<T>
where
    T: ComplexField<RealField = f64> + Copy,
{
    let r = |x: f64| T::from_real(x);
    let sqrt15 = 15f64.sqrt();
    let alpha1 = a2 * r(h);
    let alpha2 = (a3 - a1) * r(sqrt15 * h / 3.0);
    let alpha3 = (a3 - a2 * r(2.0) + a1) * r(10.0 * h / 3.0);
    let c1 = commutator(&alpha1, &alpha2);
    let c2 = commutator(&alpha1, &(&alpha3 * r(2.0) + &c1)) * r(-1.0 / 60.0);
    let left = &alpha1 * r(-20.0) - &alpha3 + c1;
    let right = &alpha2 + c2;
    alpha1 + alpha3 * r(1.0 / 12.0) + commutator(&left, &right) * r(1.0 / 240.0)
}

/// `out = a b` for square matrices of equal size.
pub(crate) fn cmul_to(a: &DMatrix<C64>, b: &DMatrix<C64>, out: &mut DMatrix<C64>) {
    let n = a.nrows();
    let (a, b) = (a.as_slice(), b.as_slice());
    let o = out.as_mut_slice();
    for j in 0..n {
        let oc = &mut o[j * n..(j + 1) * n];
        oc.fill(C64::new(0.0, 0.0));
        for k in 0..n {
            let (br, bi) = (b[k + j * n].re, b[k + j * n].im);
            for (x, y) in oc.iter_mut().zip(&a[k * n..(k + 1) * n]) {
                x.re += y.re * br - y.im * bi;
                x.im += y.re * bi + y.im * br;
            }
        }
    }
}

/// Maximum absolute column sum without the overflow-safe `hypot`.
fn norm1_fast(a: &DMatrix<C64>) -> f64 {
    a.as_slice()
        .chunks_exact(a.nrows())
        .map(|c| c.iter().map(|x| x.norm_sqr().sqrt()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `out = [a, b]` for skew-Hermitian `a` and `b`, where `ba = (ab)†`.
fn skew_commutator_to(
    a: &DMatrix<C64>,
    b: &DMatrix<C64>,
    tmp: &mut DMatrix<C64>,
    out: &mut DMatrix<C64>,
) {
    cmul_to(a, b, tmp);
    let n = a.nrows();
    let t = tmp.as_slice();
    for (j, col) in out.as_mut_slice().chunks_exact_mut(n).enumerate() {
        for (i, o) in col.iter_mut().enumerate() {
            *o = t[i + j * n] - t[j + i * n].conj();
        }
    }
}

/// Buffers for repeated `exp(magnus6(A1, A2, A3, h))` with skew-Hermitian
/// samples, as in unitary propagation. Commutators of skew-Hermitian
/// matrices cost one product instead of two, and the exponential is a
/// degree-7 Padé approximant with scaling and squaring.
#[derive(Clone, Debug)]
pub(crate) struct SkewStepper {
    alpha1: DMatrix<C64>,
    alpha2: DMatrix<C64>,
    alpha3: DMatrix<C64>,
    c1: DMatrix<C64>,
    work: DMatrix<C64>,
    comm: DMatrix<C64>,
    tmp: DMatrix<C64>,
    omega: DMatrix<C64>,
    a2: DMatrix<C64>,
    a4: DMatrix<C64>,
    a6: DMatrix<C64>,
}

impl SkewStepper {
    pub(crate) fn new(n: usize) -> Self {
        let z = DMatrix::zeros(n, n);
        Self {
            alpha1: z.clone(),
            alpha2: z.clone(),
            alpha3: z.clone(),
            c1: z.clone(),
            work: z.clone(),
            comm: z.clone(),
            tmp: z.clone(),
            omega: z.clone(),
            a2: z.clone(),
            a4: z.clone(),
            a6: z,
        }
    }

    /// `out = exp(magnus6(a[0], a[1], a[2], h))`.
    pub(crate) fn step(
        &mut self,
        a: [&DMatrix<C64>; 3],
        h: f64,
        out: &mut DMatrix<C64>,
    ) -> Result<()> {
        let k2 = 15f64.sqrt() * h / 3.0;
        let k3 = 10.0 * h / 3.0;
        let (s1, s2, s3) = (a[0].as_slice(), a[1].as_slice(), a[2].as_slice());
        let it = self
            .alpha1
            .as_mut_slice()
            .iter_mut()
            .zip(self.alpha2.as_mut_slice().iter_mut())
            .zip(self.alpha3.as_mut_slice().iter_mut());
        for (((((b1, b2), b3), x1), x2), x3) in it.zip(s1).zip(s2).zip(s3) {
            *b1 = x2 * h;
            *b2 = (x3 - x1) * k2;
            *b3 = (x3 - x2 * 2.0 + x1) * k3;
        }
        skew_commutator_to(&self.alpha1, &self.alpha2, &mut self.tmp, &mut self.c1);
        for ((w, a3), c1) in self
            .work
            .as_mut_slice()
            .iter_mut()
            .zip(self.alpha3.as_slice().iter())
            .zip(self.c1.as_slice().iter())
        {
            *w = a3 * 2.0 + c1;
        }
        skew_commutator_to(&self.alpha1, &self.work, &mut self.tmp, &mut self.comm);
        let it = self
            .work
            .as_mut_slice()
            .iter_mut()
            .zip(self.alpha2.as_mut_slice().iter_mut());
        for ((((w, a2), a1), a3), (c1, cm)) in it
            .zip(self.alpha1.as_slice().iter())
            .zip(self.alpha3.as_slice().iter())
            .zip(self.c1.as_slice().iter().zip(self.comm.as_slice().iter()))
        {
            *w = a1 * -20.0 - a3 + c1;
            *a2 -= cm / 60.0;
        }
        skew_commutator_to(&self.work, &self.alpha2, &mut self.tmp, &mut self.comm);
        let it = self
            .omega
            .as_mut_slice()
            .iter_mut()
            .zip(self.alpha1.as_slice().iter())
            .zip(self.alpha3.as_slice().iter());
        for (((o, a1), a3), cm) in it.zip(self.comm.as_slice().iter()) {
            *o = a1 + a3 / 12.0 + cm / 240.0;
        }
        self.expm_into(out)
    }

    fn expm_into(&mut self, out: &mut DMatrix<C64>) -> Result<()> {
        let n = self.omega.nrows();
        let norm = norm1_fast(&self.omega);
        if !norm.is_finite() {
            return Err(Error::NumericalFailure(
                "non-finite entry in expm input".into(),
            ));
        }
        let s = if norm > THETA_7 {
            (norm / THETA_7).log2().ceil() as i32
        } else {
            0
        };
        if s > 0 {
            self.omega *= C64::new(2f64.powi(-s), 0.0);
        }
        let b = &PADE_7;
        cmul_to(&self.omega, &self.omega, &mut self.a2);
        cmul_to(&self.a2, &self.a2, &mut self.a4);
        cmul_to(&self.a4, &self.a2, &mut self.a6);
        let it = self
            .tmp
            .as_mut_slice()
            .iter_mut()
            .zip(self.work.as_mut_slice().iter_mut());
        for (((t, w), a2), (a4, a6)) in it
            .zip(self.a2.as_slice().iter())
            .zip(self.a4.as_slice().iter().zip(self.a6.as_slice().iter()))
        {
            *t = a6 * b[7] + a4 * b[5] + a2 * b[3];
            *w = a6 * b[6] + a4 * b[4] + a2 * b[2];
        }
        for d in 0..n {
            self.tmp[(d, d)] += b[1];
            self.work[(d, d)] += b[0];
        }
        // U = A (...), then solve (V - U) X = V + U.
        cmul_to(&self.omega, &self.tmp, &mut self.comm);
        let it = self
            .tmp
            .as_mut_slice()
            .iter_mut()
            .zip(out.as_mut_slice().iter_mut());
        for ((t, o), (&u, &v)) in
            it.zip(self.comm.as_slice().iter().zip(self.work.as_slice().iter()))
        {
            *t = v - u;
            *o = v + u;
        }
        solve_in_place(&mut self.tmp, out)?;
        for _ in 0..s {
            cmul_to(out, out, &mut self.tmp);
            core::mem::swap(out, &mut self.tmp);
        }
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericalFailure(
                "non-finite entry in expm output".into(),
            ));
        }
        Ok(())
    }
}

/// Overwrites `rhs` with `lhs⁻¹ rhs` by column-oriented Gaussian
/// elimination with partial pivoting; `lhs` is destroyed.
fn solve_in_place(lhs: &mut DMatrix<C64>, rhs: &mut DMatrix<C64>) -> Result<()> {
    let n = lhs.nrows();
    let m = rhs.ncols();
    let l = lhs.as_mut_slice();
    let r = rhs.as_mut_slice();
    for k in 0..n {
        let col = &l[k * n..(k + 1) * n];
        let piv = (k..n)
            .max_by(|&a, &b| col[a].norm_sqr().total_cmp(&col[b].norm_sqr()))
            .unwrap_or(k);
        if col[piv].norm_sqr() == 0.0 || !col[piv].is_finite() {
            return Err(Error::NumericalFailure("singular Padé denominator".into()));
        }
        if piv != k {
            for j in 0..n {
                l.swap(k + j * n, piv + j * n);
            }
            for j in 0..m {
                r.swap(k + j * n, piv + j * n);
            }
        }
        let inv = C64::new(1.0, 0.0) / l[k + k * n];
        for i in k + 1..n {
            l[i + k * n] *= inv;
        }
        let (head, tail) = l.split_at_mut((k + 1) * n);
        let mult = &head[k * n + k + 1..(k + 1) * n];
        for cj in tail.chunks_exact_mut(n) {
            let f = cj[k];
            for (x, &li) in cj[k + 1..].iter_mut().zip(mult) {
                *x -= li * f;
            }
        }
        for cj in r.chunks_exact_mut(n) {
            let f = cj[k];
            for (x, &li) in cj[k + 1..].iter_mut().zip(mult) {
                *x -= li * f;
            }
        }
    }
    for cj in r.chunks_exact_mut(n) {
        for k in (0..n).rev() {
            let x = cj[k] / l[k + k * n];
            cj[k] = x;
            for (y, &u) in cj[..k].iter_mut().zip(&l[k * n..k * n + k]) {
                *y -= u * x;
            }
        }
    }
    Ok(())
}

/// Eigen-decomposition of a Hermitian matrix with eigenvalues in ascending
/// order.
pub fn eigh(a: &DMatrix<C64>) -> (DVector<f64>, DMatrix<C64>) {
    let eig = SymmetricEigen::new(a.clone());
    sort_eigen(eig.eigenvalues, eig.eigenvectors)
}

/// Eigen-decomposition of a real symmetric matrix with eigenvalues in
/// ascending order.
pub fn eigh_real(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(a.clone());
    sort_eigen(eig.eigenvalues, eig.eigenvectors)
}

/// Eigenvalues of a real symmetric matrix, ascending.
pub fn eigvalsh_real(a: &DMatrix<f64>) -> DVector<f64> {
    let mut vals: Vec<f64> = a.clone().symmetric_eigenvalues().iter().copied().collect();
    vals.sort_by(|x, y| x.total_cmp(y));
    DVector::from_vec(vals)
}

fn sort_eigen<T: ComplexField<RealField = f64>>(
    vals: DVector<f64>,
    vecs: DMatrix<T>,
) -> (DVector<f64>, DMatrix<T>) {
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&i, &j| vals[i].total_cmp(&vals[j]));
    let sorted_vals = DVector::from_iterator(vals.len(), order.iter().map(|&i| vals[i]));
    let sorted_vecs = DMatrix::from_fn(vecs.nrows(), vecs.ncols(), |r, c| {
        vecs[(r, order[c])].clone()
    });
    (sorted_vals, sorted_vecs)
}

/// Frobenius norm of `a - b`.
pub fn frobenius_distance<T: ComplexField<RealField = f64> + Copy>(
    a: &DMatrix<T>,
    b: &DMatrix<T>,
) -> f64 {
    (a - b).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Unscaled Taylor series with scaling by powers of two chosen from the
    /// norm; shares nothing with the Padé path.
    fn taylor_oracle(a: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.nrows();
        let norm = norm1(a);
        let s = if norm > 0.5 {
            (norm / 0.5).log2().ceil() as i32
        } else {
            0
        };
        let scaled = a / 2f64.powi(s);
        let mut sum = DMatrix::identity(n, n);
        let mut term = DMatrix::identity(n, n);
        for k in 1..40 {
            term = &term * &scaled / k as f64;
            sum += &term;
        }
        for _ in 0..s {
            sum = &sum * &sum;
        }
        sum
    }

    #[test]
    fn exponential_of_zero_is_identity() {
        let z = DMatrix::<f64>::zeros(5, 5);
        assert_eq!(expm(&z).unwrap(), DMatrix::identity(5, 5));
    }

    #[test]
    fn skew_stepper_matches_generic_magnus_and_expm() {
        let mut x = 7u64;
        let mut next = || {
            x = x
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (x >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for (n, scale) in [(2, 0.1), (7, 1.0), (9, 3.0), (5, 40.0)] {
            let mut stepper = SkewStepper::new(n);
            let samples: Vec<DMatrix<C64>> = (0..3)
                .map(|_| {
                    let m = DMatrix::from_fn(n, n, |_, _| C64::new(next(), next()));
                    (&m - m.adjoint()) * C64::new(scale, 0.0)
                })
                .collect();
            let want = expm(&magnus6(&samples[0], &samples[1], &samples[2], 0.3)).unwrap();
            let mut got = DMatrix::zeros(n, n);
            stepper
                .step([&samples[0], &samples[1], &samples[2]], 0.3, &mut got)
                .unwrap();
            assert!(
                (&got - &want).norm() < 1e-12 * want.norm(),
                "n={n} err {}",
                (&got - &want).norm()
            );
            let unitarity = (got.adjoint() * &got - DMatrix::<C64>::identity(n, n)).norm();
            assert!(
                unitarity < 1e-13 * scale.max(1.0) * n as f64,
                "unitarity {unitarity}"
            );
        }
    }

    #[test]
    fn rotation_generator_exponentiates_to_rotation() {
        for &angle in &[1e-3f64, 0.2, 0.9, 2.0, 7.5, 40.0] {
            let g = DMatrix::from_row_slice(2, 2, &[0.0, -angle, angle, 0.0]);
            let e = expm(&g).unwrap();
            let want = DMatrix::from_row_slice(
                2,
                2,
                &[angle.cos(), -angle.sin(), angle.sin(), angle.cos()],
            );
            assert_abs_diff_eq!(e, want, epsilon = 1e-12 * angle.max(1.0));
        }
    }

    #[test]
    fn every_pade_degree_matches_taylor() {
        let base = DMatrix::from_fn(6, 6, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.6);
        let base = &base / norm1(&base);
        for &scale in &[0.01, 0.2, 0.8, 1.9, 5.0, 25.0] {
            let a = &base * scale;
            let got = expm(&a).unwrap();
            let want = taylor_oracle(&a);
            let rel = (&got - &want).norm() / want.norm();
            assert!(rel < 1e-12, "scale {scale}: rel {rel}");
        }
    }

    #[test]
    fn complex_exponential_is_unitary_for_antihermitian() {
        let h = DMatrix::from_fn(4, 4, |i, j| {
            let re = (i + j) as f64 * 0.1;
            let im = if i == j {
                0.0
            } else {
                (i as f64 - j as f64) * 0.05
            };
            C64::new(re, im)
        });
        let a = h.map(|z| z * C64::new(0.0, -1.0));
        let u = expm(&a).unwrap();
        let should_be_id = u.adjoint() * &u;
        assert_abs_diff_eq!(
            frobenius_distance(&should_be_id, &DMatrix::identity(4, 4)),
            0.0,
            epsilon = 1e-13
        );
    }

    #[test]
    fn nonfinite_input_is_a_numerical_failure() {
        let mut a = DMatrix::<f64>::zeros(3, 3);
        a[(1, 2)] = f64::NAN;
        assert!(matches!(expm(&a), Err(Error::NumericalFailure(_))));
    }

    #[test]
    fn magnus_is_exact_for_constant_generator() {
        let a = DMatrix::from_row_slice(2, 2, &[0.1, -0.7, 0.4, -0.2]);
        let om = magnus6(&a, &a, &a, 0.3);
        assert_abs_diff_eq!(om, &a * 0.3, epsilon = 1e-15);
    }

    #[test]
    fn magnus_converges_at_sixth_order() {
        // y' = A(t) y with non-commuting A(t) = [[0, t], [-1, 0]].
        let gen = |t: f64| DMatrix::from_row_slice(2, 2, &[0.0, t, -1.0, 0.0]);
        let solve = |steps: usize| {
            let h = 1.0 / steps as f64;
            let mut y = DMatrix::<f64>::identity(2, 2);
            for k in 0..steps {
                let t = k as f64 * h;
                let a: Vec<_> = MAGNUS_NODES.iter().map(|c| gen(t + c * h)).collect();
                y = expm(&magnus6(&a[0], &a[1], &a[2], h)).unwrap() * y;
            }
            y
        };
        let reference = solve(512);
        let e1 = (solve(4) - &reference).norm();
        let e2 = (solve(8) - &reference).norm();
        let order = (e1 / e2).log2();
        assert!(order > 5.5, "observed order {order}");
    }
}
