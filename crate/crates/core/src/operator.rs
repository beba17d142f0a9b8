//! Hermitian operator algebra for a single spin-F.
//!
//! States are ordered `|F, m>` with `m` descending, so `Fz` is
//! `diag(F, F-1, ..., -F)`. Operators are vectorized on the orthonormal basis
//! `{I/sqrt(d), E_1, ..., E_{d²-1}}` where the `E_j` are the generalized
//! Gell-Mann matrices: symmetric pairs, then antisymmetric pairs, then the
//! diagonal family.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::invalid;
use crate::linalg::eigh;
use crate::{Error, Result, C64};

/// Largest supported Hilbert-space dimension.
pub const MAX_DIM: usize = 100;

/// Relative tolerance for Hermiticity checks.
pub const HERMITIAN_TOL: f64 = 1e-12;

/// A spin quantum number `F ∈ {1/2, 1, 3/2, ...}`, stored as `2F`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Spin {
    twice: u32,
}

impl Spin {
    pub fn from_twice(twice: u32) -> Result<Self> {
        if twice == 0 {
            return Err(invalid!("spin must be at least 1/2"));
        }
        if twice as usize + 1 > MAX_DIM {
            return Err(invalid!(
                "spin {}/2 exceeds the supported dimension {MAX_DIM}",
                twice
            ));
        }
        Ok(Self { twice })
    }

    pub fn new(f: f64) -> Result<Self> {
        let twice = 2.0 * f;
        if !twice.is_finite() || twice < 0.5 || (twice - twice.round()).abs() > 1e-9 {
            return Err(invalid!("spin {f} is not a positive half-integer"));
        }
        Self::from_twice(twice.round() as u32)
    }

    pub fn twice(self) -> u32 {
        self.twice
    }

    pub fn value(self) -> f64 {
        self.twice as f64 / 2.0
    }

    pub fn dim(self) -> usize {
        self.twice as usize + 1
    }
}

/// Which generalized Gell-Mann family a basis element belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum GellMann {
    Symmetric(usize, usize),
    Antisymmetric(usize, usize),
    Diagonal(usize),
}

/// Spin matrices and operator basis for one spin-F.
#[derive(Clone, Debug)]
pub struct SpinSystem {
    spin: Spin,
    fx: DMatrix<C64>,
    fy: DMatrix<C64>,
    fz: DMatrix<C64>,
    basis: Vec<DMatrix<C64>>,
    labels: Vec<GellMann>,
}

/// Builds the spin system for `F = f`.
pub fn make_spin_system(f: f64) -> Result<SpinSystem> {
    Ok(SpinSystem::new(Spin::new(f)?))
}

impl SpinSystem {
    pub fn new(spin: Spin) -> Self {
        let d = spin.dim();
        let f = spin.value();
        let m = |i: usize| f - i as f64;

        let mut raise = DMatrix::<C64>::zeros(d, d);
        for i in 1..d {
            let mi = m(i);
            raise[(i - 1, i)] = C64::new((f * (f + 1.0) - mi * (mi + 1.0)).sqrt(), 0.0);
        }
        let lower = raise.adjoint();
        let fx = (&raise + &lower) * C64::new(0.5, 0.0);
        let fy = (&raise - &lower) * C64::new(0.0, -0.5);
        let fz = DMatrix::from_diagonal(&DVector::from_fn(d, |i, _| C64::new(m(i), 0.0)));

        let mut labels = Vec::with_capacity(d * d - 1);
        for a in 0..d {
            for b in a + 1..d {
                labels.push(GellMann::Symmetric(a, b));
            }
        }
        for a in 0..d {
            for b in a + 1..d {
                labels.push(GellMann::Antisymmetric(a, b));
            }
        }
        for l in 1..d {
            labels.push(GellMann::Diagonal(l));
        }
        let basis = labels.iter().map(|&g| gell_mann_matrix(d, g)).collect();

        Self {
            spin,
            fx,
            fy,
            fz,
            basis,
            labels,
        }
    }

    /// Replaces the operator basis without any checks. Only meant for
    /// exercising validation code with a deliberately broken basis.
    #[doc(hidden)]
    pub fn with_basis_unchecked(mut self, basis: Vec<DMatrix<C64>>) -> Self {
        self.basis = basis;
        self
    }

    pub fn spin(&self) -> Spin {
        self.spin
    }

    pub fn dim(&self) -> usize {
        self.spin.dim()
    }

    /// Number of traceless coordinates, `d² - 1`.
    pub fn n_traceless(&self) -> usize {
        self.dim() * self.dim() - 1
    }

    pub fn fx(&self) -> &DMatrix<C64> {
        &self.fx
    }

    pub fn fy(&self) -> &DMatrix<C64> {
        &self.fy
    }

    pub fn fz(&self) -> &DMatrix<C64> {
        &self.fz
    }

    pub fn basis(&self) -> &[DMatrix<C64>] {
        &self.basis
    }

    pub fn identity(&self) -> DMatrix<C64> {
        DMatrix::identity(self.dim(), self.dim())
    }

    /// Spin component `q ∈ {0, 1, 2}` for x, y, z.
    pub fn component(&self, q: usize) -> &DMatrix<C64> {
        match q {
            0 => &self.fx,
            1 => &self.fy,
            _ => &self.fz,
        }
    }

    /// Coordinates of a Hermitian operator on the stored basis.
    pub fn vectorize(&self, a: &HermitianOperator) -> Result<OperatorVector> {
        self.check_dim(a.dim())?;
        let d = self.dim();
        let coeffs = DVector::from_iterator(
            self.basis.len(),
            self.basis.iter().map(|e| trace_product(e, &a.matrix).re),
        );
        Ok(OperatorVector {
            trace_part: a.matrix.trace().re / (d as f64).sqrt(),
            coeffs,
        })
    }

    /// Inverse of [`vectorize`](Self::vectorize).
    pub fn devectorize(&self, v: &OperatorVector) -> Result<HermitianOperator> {
        if v.coeffs.len() != self.basis.len() {
            return Err(invalid!(
                "operator vector has {} coefficients, expected {}",
                v.coeffs.len(),
                self.basis.len()
            ));
        }
        let d = self.dim();
        let mut m = self.identity() * C64::new(v.trace_part / (d as f64).sqrt(), 0.0);
        for (e, &c) in self.basis.iter().zip(v.coeffs.iter()) {
            m += e * C64::new(c, 0.0);
        }
        Ok(HermitianOperator::from_matrix_unchecked(m))
    }

    /// Writes `[Tr A/sqrt(d), Tr E_1 A, ...]` for a Hermitian matrix into
    /// `out` (length `d²`), reading the generalized Gell-Mann structure
    /// directly instead of forming the products. Assumes the generated
    /// basis, not one installed through `with_basis_unchecked`.
    pub fn gell_mann_coords_into(&self, a: &DMatrix<C64>, out: &mut [f64]) {
        let d = self.dim();
        let sqrt2 = core::f64::consts::SQRT_2;
        out[0] = (0..d).map(|i| a[(i, i)].re).sum::<f64>() / (d as f64).sqrt();
        let mut prefix = a[(0, 0)].re;
        for (slot, label) in out[1..].iter_mut().zip(&self.labels) {
            *slot = match *label {
                GellMann::Symmetric(p, q) => sqrt2 * a[(p, q)].re,
                GellMann::Antisymmetric(p, q) => -sqrt2 * a[(p, q)].im,
                GellMann::Diagonal(l) => {
                    let lf = l as f64;
                    let v = (prefix - lf * a[(l, l)].re) / (lf * (lf + 1.0)).sqrt();
                    prefix += a[(l, l)].re;
                    v
                }
            };
        }
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim() {
            return Err(invalid!(
                "operator dimension {d} does not match spin dimension {}",
                self.dim()
            ));
        }
        Ok(())
    }
}

fn gell_mann_matrix(d: usize, g: GellMann) -> DMatrix<C64> {
    let mut m = DMatrix::<C64>::zeros(d, d);
    let s = core::f64::consts::FRAC_1_SQRT_2;
    match g {
        GellMann::Symmetric(a, b) => {
            m[(a, b)] = C64::new(s, 0.0);
            m[(b, a)] = C64::new(s, 0.0);
        }
        GellMann::Antisymmetric(a, b) => {
            m[(a, b)] = C64::new(0.0, -s);
            m[(b, a)] = C64::new(0.0, s);
        }
        GellMann::Diagonal(l) => {
            let norm = 1.0 / ((l * (l + 1)) as f64).sqrt();
            for k in 0..l {
                m[(k, k)] = C64::new(norm, 0.0);
            }
            m[(l, l)] = C64::new(-(l as f64) * norm, 0.0);
        }
    }
    m
}

/// `Tr[A B]` without forming the product.
pub(crate) fn trace_product(a: &DMatrix<C64>, b: &DMatrix<C64>) -> C64 {
    let d = a.nrows();
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..d {
        for j in 0..d {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

/// A `d × d` complex Hermitian matrix (observable or density matrix).
#[derive(Clone, Debug, PartialEq)]
pub struct HermitianOperator {
    matrix: DMatrix<C64>,
}

impl HermitianOperator {
    /// Validates Hermiticity to [`HERMITIAN_TOL`] relative to the Frobenius
    /// norm, then stores the exactly symmetrized matrix.
    pub fn new(matrix: DMatrix<C64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(invalid!(
                "operator must be square, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            ));
        }
        if matrix
            .iter()
            .any(|z| !z.re.is_finite() || !z.im.is_finite())
        {
            return Err(invalid!("operator has non-finite entries"));
        }
        let skew = (&matrix - matrix.adjoint()).norm();
        let scale = matrix.norm().max(f64::MIN_POSITIVE);
        if skew > HERMITIAN_TOL * scale {
            return Err(invalid!("operator is not Hermitian (|A - A†| = {skew:e})"));
        }
        Ok(Self::from_matrix_unchecked(matrix))
    }

    /// Symmetrizes without validation.
    pub(crate) fn from_matrix_unchecked(matrix: DMatrix<C64>) -> Self {
        let sym = (&matrix + matrix.adjoint()) * C64::new(0.5, 0.0);
        Self { matrix: sym }
    }

    /// Builds `|ψ><ψ|`.
    pub fn pure_state(psi: &DVector<C64>) -> Self {
        Self::from_matrix_unchecked(psi * psi.adjoint())
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<C64> {
        self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace().re
    }

    /// Eigenvalues, ascending.
    pub fn eigenvalues(&self) -> DVector<f64> {
        eigh(&self.matrix).0
    }

    /// Checks that this is a density matrix: trace one and positive
    /// semidefinite, both to `tol`.
    pub fn is_density_matrix(&self, tol: f64) -> bool {
        (self.trace() - 1.0).abs() <= tol && self.eigenvalues().iter().all(|&l| l >= -tol)
    }

    pub fn frobenius_distance(&self, other: &Self) -> f64 {
        (&self.matrix - &other.matrix).norm()
    }
}

/// Coordinates of a Hermitian operator: `trace_part` multiplies `I/sqrt(d)`,
/// `coeffs[j]` multiplies `E_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorVector {
    pub trace_part: f64,
    pub coeffs: DVector<f64>,
}

impl OperatorVector {
    pub fn zeros(n_traceless: usize) -> Self {
        Self {
            trace_part: 0.0,
            coeffs: DVector::zeros(n_traceless),
        }
    }

    /// Builds from a full `d²` slice laid out as `[trace_part, coeffs...]`.
    pub fn from_full(full: &[f64]) -> Self {
        Self {
            trace_part: full[0],
            coeffs: DVector::from_column_slice(&full[1..]),
        }
    }

    /// Full `d²` vector `[trace_part, coeffs...]`.
    pub fn to_full(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.coeffs.len() + 1);
        v[0] = self.trace_part;
        v.rows_mut(1, self.coeffs.len()).copy_from(&self.coeffs);
        v
    }

    /// Hilbert-Schmidt inner product of the operators the vectors represent.
    pub fn dot(&self, other: &Self) -> f64 {
        self.trace_part * other.trace_part + self.coeffs.dot(&other.coeffs)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

/// `Tr[A B]` for Hermitian `A`, `B`.
pub fn hs_inner(a: &HermitianOperator, b: &HermitianOperator) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(invalid!("dimension mismatch: {} vs {}", a.dim(), b.dim()));
    }
    Ok(trace_product(&a.matrix, &b.matrix).re)
}

/// Clips negative eigenvalues to zero and renormalizes to unit trace.
pub fn project_positive(rho_hat: &HermitianOperator) -> Result<HermitianOperator> {
    let (vals, vecs) = eigh(&rho_hat.matrix);
    let clipped: Vec<f64> = vals.iter().map(|&l| l.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    // Relative floor so round-off positives on a negative-definite input
    // are not promoted to a state.
    let scale = vals.iter().fold(0.0f64, |m, l| m.max(l.abs()));
    if !(total > 1e-14 * scale) || total <= 0.0 {
        return Err(Error::DegenerateEstimate);
    }
    let d = rho_hat.dim();
    let mut out = DMatrix::<C64>::zeros(d, d);
    for (k, &l) in clipped.iter().enumerate() {
        if l > 0.0 {
            let v = vecs.column(k);
            out += (v * v.adjoint()) * C64::new(l / total, 0.0);
        }
    }
    Ok(HermitianOperator::from_matrix_unchecked(out))
}

/// `<ψ0| ρ |ψ0>`, clamped to `[0, 1]` against round-off.
pub fn fidelity(psi0: &DVector<C64>, rho: &HermitianOperator) -> Result<f64> {
    if psi0.len() != rho.dim() {
        return Err(invalid!(
            "state length {} does not match operator dimension {}",
            psi0.len(),
            rho.dim()
        ));
    }
    let norm = psi0.norm();
    if (norm - 1.0).abs() > 1e-10 {
        return Err(invalid!("reference state is not normalized (|ψ| = {norm})"));
    }
    let value = (psi0.adjoint() * &rho.matrix * psi0)[(0, 0)].re;
    Ok(value.clamp(0.0, 1.0))
}

fn ginibre(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<C64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        C64::new(re, im)
    })
}

/// Random normalized state, Haar distributed.
pub fn random_pure_state(d: usize, seed: u64) -> DVector<C64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = ginibre(d, 1, &mut rng);
    let v = g.column(0).into_owned();
    let n = v.norm();
    v / C64::new(n, 0.0)
}

/// Random density matrix `G G† / Tr[G G†]` with `G` a `d × rank` Ginibre
/// matrix. `rank = d` gives the Hilbert-Schmidt ensemble.
pub fn random_density_matrix(d: usize, rank: usize, seed: u64) -> Result<HermitianOperator> {
    if d == 0 || rank == 0 || rank > d {
        return Err(invalid!("need 1 <= rank <= d, got rank {rank} for d = {d}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = ginibre(d, rank, &mut rng);
    let mut m = &g * g.adjoint();
    let tr = m.trace().re;
    m /= C64::new(tr, 0.0);
    let m = (&m + m.adjoint()) * C64::new(0.5, 0.0);
    Ok(HermitianOperator::from_matrix_unchecked(m))
}
