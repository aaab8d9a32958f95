//! Kernels over feature vectors, Gram assembly and regularized solves.

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::linalg::{least_squares, Cholesky, Mat};
use crate::scalar::{dot, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelKind<T> {
    /// `exp(⟨x,y⟩ / (τ sqrt(⟨x,x⟩⟨y,y⟩ + ε)))`
    ExpCosSim { tau: T, epsilon: T },
    /// `exp(-|x - y|² / ℓ²)`
    SquaredExponential { length: T },
}

/// Validated kernel parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec<T> {
    kind: KernelKind<T>,
}

impl<T: Scalar> KernelSpec<T> {
    pub fn exp_cos_sim(tau: T, epsilon: T) -> Result<Self> {
        if !(tau >= T::lit(0.05) && tau <= T::one()) {
            return Err(invalid(format!("tau must lie in [0.05, 1], got {tau}")));
        }
        if !(epsilon > T::zero()) || !epsilon.is_finite() {
            return Err(invalid(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Self {
            kind: KernelKind::ExpCosSim { tau, epsilon },
        })
    }

    pub fn squared_exponential(length: T) -> Result<Self> {
        if !(length > T::zero()) || !length.is_finite() {
            return Err(invalid(format!("length must be positive, got {length}")));
        }
        Ok(Self {
            kind: KernelKind::SquaredExponential { length },
        })
    }

    pub fn kind(&self) -> KernelKind<T> {
        self.kind
    }

    /// Kernel value without the dimension check.
    #[inline]
    pub fn eval_unchecked(&self, x: &[T], y: &[T]) -> T {
        match self.kind {
            KernelKind::ExpCosSim { tau, epsilon } => {
                let c = dot(x, y) / (dot(x, x) * dot(y, y) + epsilon).sqrt();
                (c / tau).exp()
            }
            KernelKind::SquaredExponential { length } => {
                let mut d2 = T::zero();
                for (&a, &b) in x.iter().zip(y) {
                    d2 += (a - b) * (a - b);
                }
                (-d2 / (length * length)).exp()
            }
        }
    }

    /// Natural log of the kernel value.
    #[inline]
    pub fn log_eval_unchecked(&self, x: &[T], y: &[T]) -> T {
        match self.kind {
            KernelKind::ExpCosSim { tau, epsilon } => dot(x, y) / (dot(x, x) * dot(y, y) + epsilon).sqrt() / tau,
            KernelKind::SquaredExponential { length } => {
                let mut d2 = T::zero();
                for (&a, &b) in x.iter().zip(y) {
                    d2 += (a - b) * (a - b);
                }
                -d2 / (length * length)
            }
        }
    }
}

pub fn eval_kernel<T: Scalar>(spec: &KernelSpec<T>, x: &[T], y: &[T]) -> Result<T> {
    if x.len() != y.len() {
        return Err(invalid(format!("feature dimensions differ: {} vs {}", x.len(), y.len())));
    }
    Ok(spec.eval_unchecked(x, y))
}

/// Kernel matrix between two feature sets (rows are points).
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix<T> {
    pub values: Mat<T>,
    pub spec: KernelSpec<T>,
}

impl<T: Scalar> GramMatrix<T> {
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }
}

/// `G[i][j] = k(X_i, Y_j)`. Identical for any thread count.
pub fn gram<T: Scalar>(spec: &KernelSpec<T>, xs: &Mat<T>, ys: &Mat<T>) -> Result<GramMatrix<T>> {
    if xs.rows() > 0 && ys.rows() > 0 && xs.cols() != ys.cols() {
        return Err(invalid(format!("feature dimensions differ: {} vs {}", xs.cols(), ys.cols())));
    }
    let (n, m) = (xs.rows(), ys.rows());
    let mut values = Mat::zeros(n, m);
    if m > 0 {
        let rows: Vec<Vec<T>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let xi = xs.row(i);
                (0..m).map(|j| spec.eval_unchecked(xi, ys.row(j))).collect()
            })
            .collect();
        for (i, r) in rows.into_iter().enumerate() {
            values.row_mut(i).copy_from_slice(&r);
        }
    }
    Ok(GramMatrix { values, spec: *spec })
}

/// Jitter used for the first escalation when the caller asked for none.
pub const DEFAULT_JITTER: f64 = 1e-4;
const MAX_ESCALATIONS: usize = 4;

/// How a regularized system was factorized.
#[derive(Debug, Clone)]
pub enum Factorization<T> {
    Cholesky(Cholesky<T>),
    /// Cholesky failed at every jitter; the regularized matrix is kept for
    /// least-squares solves.
    LeastSquares(Mat<T>),
}

/// Factorization of `K + jitter·I` after any escalation.
#[derive(Debug, Clone)]
pub struct RegularizedFactor<T> {
    pub factor: Factorization<T>,
    pub jitter: T,
}

impl<T: Scalar> RegularizedFactor<T> {
    pub fn is_least_squares(&self) -> bool {
        matches!(self.factor, Factorization::LeastSquares(_))
    }

    pub fn solve(&self, b: &Mat<T>) -> Result<Mat<T>> {
        let z = match &self.factor {
            Factorization::Cholesky(c) => c.solve(b),
            Factorization::LeastSquares(k) => least_squares(k, b, T::epsilon() * T::lit(16.0))?,
        };
        if !z.all_finite() {
            return Err(Error::NumericalFailure {
                jitter: self.jitter.as_f64(),
                reason: "solution contains non-finite values".into(),
            });
        }
        Ok(z)
    }
}

/// Factorizes `K + jitter·I`, multiplying the jitter by ten (starting from
/// [`DEFAULT_JITTER`] when zero) up to four times before falling back to
/// least squares.
pub fn regularized_factor<T: Scalar>(k: &Mat<T>, jitter: T) -> Result<RegularizedFactor<T>> {
    if !k.is_square() {
        return Err(invalid(format!("kernel matrix must be square, got {}x{}", k.rows(), k.cols())));
    }
    if !(jitter >= T::zero()) {
        return Err(invalid("jitter must be non-negative"));
    }
    let asym = k.asymmetry().unwrap_or(T::zero());
    if !(asym <= T::lit(1e-8)) {
        return Err(invalid(format!("kernel matrix is not symmetric (max asymmetry {asym})")));
    }
    let mut j = jitter;
    for attempt in 0..=MAX_ESCALATIONS {
        if attempt > 0 {
            j = if j == T::zero() { T::lit(DEFAULT_JITTER) } else { j * T::lit(10.0) };
        }
        let mut kj = k.clone();
        kj.add_diagonal(j);
        if let Some(c) = Cholesky::factor(&kj) {
            return Ok(RegularizedFactor {
                factor: Factorization::Cholesky(c),
                jitter: j,
            });
        }
    }
    let mut kj = k.clone();
    kj.add_diagonal(jitter);
    if !kj.all_finite() {
        return Err(Error::NumericalFailure {
            jitter: j.as_f64(),
            reason: "kernel matrix contains non-finite values".into(),
        });
    }
    Ok(RegularizedFactor {
        factor: Factorization::LeastSquares(kj),
        jitter: j,
    })
}

/// Result of [`regularized_solve`].
#[derive(Debug, Clone)]
pub struct SolveOutcome<T> {
    pub solution: Mat<T>,
    /// Jitter of the successful factorization (the final escalated value on fallback).
    pub jitter: T,
    /// Set when the least-squares fallback produced the solution.
    pub least_squares: bool,
}

/// Solves `(K + jitter·I) Z = B`.
pub fn regularized_solve<T: Scalar>(k: &GramMatrix<T>, b: &Mat<T>, jitter: T) -> Result<SolveOutcome<T>> {
    if b.rows() != k.rows() {
        return Err(invalid(format!(
            "right-hand side has {} rows, kernel matrix has {}",
            b.rows(),
            k.rows()
        )));
    }
    let f = regularized_factor(&k.values, jitter)?;
    let solution = f.solve(b)?;
    Ok(SolveOutcome {
        solution,
        jitter: f.jitter,
        least_squares: f.is_least_squares(),
    })
}
