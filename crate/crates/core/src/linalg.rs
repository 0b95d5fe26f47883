//! Sparse direct solves and a shift-invert Arnoldi eigensolver.
//!
//! Factorisations come from faer's sparse LU. The Krylov iteration, the
//! restart-free Ritz extraction and the inverse-iteration polish are local.

use faer::sparse::{SparseColMat, Triplet};
use faer::traits::ComplexField;
use faer::Mat;
use faer::prelude::Solve;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Factored square sparse matrix.
pub struct SparseLu<T: ComplexField> {
    lu: faer::sparse::linalg::solvers::Lu<usize, T>,
    n: usize,
}

impl<T: ComplexField + Copy> SparseLu<T> {
    /// Factors the `n × n` matrix given by `(row, col, value)` triplets.
    /// Duplicate positions are summed.
    pub fn factor(n: usize, entries: &[(usize, usize, T)]) -> Result<Self> {
        let triplets: Vec<Triplet<usize, usize, T>> =
            entries.iter().map(|&(r, c, v)| Triplet::new(r, c, v)).collect();
        let mat = SparseColMat::<usize, T>::try_new_from_triplets(n, n, &triplets)
            .map_err(|e| Error::Solver(format!("matrix construction: {e:?}")))?;
        let lu = mat
            .sp_lu()
            .map_err(|e| Error::Solver(format!("sparse LU failed: {e:?}")))?;
        Ok(Self { lu, n })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, rhs: &[T]) -> Vec<T> {
        assert_eq!(rhs.len(), self.n);
        let mut b = Mat::<T>::from_fn(self.n, 1, |i, _| rhs[i]);
        self.lu.solve_in_place(b.as_mut());
        (0..self.n).map(|i| b[(i, 0)]).collect()
    }
}

impl SparseLu<f64> {
    /// Factors `A` with row `pin` replaced by the unit row `e_pin`. For an
    /// operator with a one-dimensional null space and a left null vector
    /// that is nonzero at `pin`, the result is regular.
    pub fn factor_pinned(n: usize, entries: &[(usize, usize, f64)], pin: usize) -> Result<Self> {
        let mut e: Vec<(usize, usize, f64)> = entries.iter().copied().filter(|&(r, _, _)| r != pin).collect();
        e.push((pin, pin, 1.0));
        Self::factor(n, &e)
    }
}

pub fn dot_c(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn norm_c(a: &[Complex64]) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

/// A matrix that can be applied to complex vectors and exported as
/// triplets for factorisation.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply_c(&self, x: &[Complex64]) -> Vec<Complex64>;
    /// Entries of `A − shift·I`.
    fn shifted_entries(&self, shift: Complex64) -> Vec<(usize, usize, Complex64)>;
}

/// Ritz approximation of an eigenpair of `A`.
#[derive(Debug, Clone)]
pub struct RitzPair {
    pub value: Complex64,
    pub vector: Vec<Complex64>,
    /// `‖Ax − λx‖ / ‖x‖` in the Euclidean norm.
    pub residual: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ArnoldiOptions {
    pub krylov_dim: usize,
    /// Number of Ritz pairs returned, ordered by distance to the shift.
    pub n_eigs: usize,
}

impl Default for ArnoldiOptions {
    fn default() -> Self {
        Self {
            krylov_dim: 40,
            n_eigs: 6,
        }
    }
}

/// Eigenvalues of `A` closest to `shift`, from an Arnoldi factorisation of
/// `(A − shift·I)⁻¹`.
pub fn shift_invert_arnoldi<A: LinearOperator + ?Sized>(
    op: &A,
    shift: Complex64,
    start: &[Complex64],
    opts: ArnoldiOptions,
) -> Result<Vec<RitzPair>> {
    let n = op.dim();
    let lu = SparseLu::factor(n, &op.shifted_entries(shift))?;
    let m = opts.krylov_dim.min(n).max(2);

    let mut basis: Vec<Vec<Complex64>> = Vec::with_capacity(m + 1);
    let nrm = norm_c(start);
    if !(nrm > 0.0) || !nrm.is_finite() {
        return Err(Error::Eigen("start vector must be nonzero and finite".into()));
    }
    basis.push(start.iter().map(|v| v / nrm).collect());
    let mut h = vec![vec![Complex64::new(0.0, 0.0); m]; m + 1];
    let mut dim = m;
    for j in 0..m {
        let mut w = lu.solve(&basis[j]);
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Eigen(format!("shifted operator is singular at {shift}")));
        }
        let w_norm0 = norm_c(&w);
        // Classical Gram-Schmidt with one round of reorthogonalisation.
        for _ in 0..2 {
            for (i, v) in basis.iter().enumerate() {
                let c = dot_c(v, &w);
                h[i][j] += c;
                for (wk, vk) in w.iter_mut().zip(v) {
                    *wk -= c * vk;
                }
            }
        }
        let beta = norm_c(&w);
        h[j + 1][j] = Complex64::new(beta, 0.0);
        if beta <= 1e-13 * w_norm0 {
            dim = j + 1;
            break;
        }
        if j + 1 < m {
            basis.push(w.iter().map(|v| v / beta).collect());
        }
    }

    let hm = Mat::<Complex64>::from_fn(dim, dim, |r, c| h[r][c]);
    let eig = hm
        .eigen()
        .map_err(|e| Error::Eigen(format!("dense eigendecomposition failed: {e:?}")))?;
    let s = eig.S().column_vector();
    let u = eig.U();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| s[b].norm().total_cmp(&s[a].norm()));

    let mut out = Vec::new();
    for &c in order.iter().take(opts.n_eigs) {
        let theta = s[c];
        if theta.norm() == 0.0 {
            continue;
        }
        let value = shift + theta.inv();
        let mut vector = vec![Complex64::new(0.0, 0.0); n];
        for (r, v) in basis.iter().take(dim).enumerate() {
            let coef = u[(r, c)];
            for (x, vk) in vector.iter_mut().zip(v) {
                *x += coef * vk;
            }
        }
        let nv = norm_c(&vector);
        for x in vector.iter_mut() {
            *x /= nv;
        }
        let residual = eigen_residual(op, value, &vector);
        out.push(RitzPair {
            value,
            vector,
            residual,
        });
    }
    Ok(out)
}

pub fn eigen_residual<A: LinearOperator + ?Sized>(op: &A, value: Complex64, vector: &[Complex64]) -> f64 {
    let av = op.apply_c(vector);
    let r: Vec<Complex64> = av.iter().zip(vector).map(|(a, x)| a - value * x).collect();
    norm_c(&r) / norm_c(vector)
}

/// Inverse iteration at a fixed shift with Rayleigh-quotient eigenvalue
/// updates, stopped when the Euclidean residual of the unit vector drops
/// below `tol`. Returns the best pair seen.
pub fn inverse_iteration<A: LinearOperator + ?Sized>(
    op: &A,
    guess: &RitzPair,
    tol: f64,
    max_iter: usize,
) -> Result<RitzPair> {
    let n = op.dim();
    // Offset the shift slightly so the factorisation stays regular when the
    // Ritz value is already accurate to rounding.
    let offset = Complex64::new(1e-10 * (1.0 + guess.value.norm()), 0.0);
    let lu = SparseLu::factor(n, &op.shifted_entries(guess.value + offset))?;
    let mut x = guess.vector.clone();
    let mut best = guess.clone();
    for _ in 0..max_iter {
        let y = lu.solve(&x);
        let ny = norm_c(&y);
        if !ny.is_finite() || ny == 0.0 {
            break;
        }
        x = y.iter().map(|v| v / ny).collect();
        let ax = op.apply_c(&x);
        let value = dot_c(&x, &ax);
        let residual = eigen_residual(op, value, &x);
        if residual < best.residual {
            best = RitzPair {
                value,
                vector: x.clone(),
                residual,
            };
        }
        if residual <= tol {
            break;
        }
    }
    Ok(best)
}
