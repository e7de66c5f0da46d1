//! Kernels, polynomial and covariate-interacted regression bases, and the
//! bandwidth scaling matrix.

use serde::{Deserialize, Serialize};

use crate::error::{RdError, Result};
use crate::linalg::Matrix;
use crate::scalar::{lit, to_f64, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    #[default]
    Triangular,
    Uniform,
    Epanechnikov,
}

impl KernelKind {
    pub fn eval<T: Scalar>(self, u: T) -> T {
        kernel_eval(u, self)
    }
}

/// Symmetric kernel weight at `u`; zero outside `[-1, 1]`.
pub fn kernel_eval<T: Scalar>(u: T, kind: KernelKind) -> T {
    let a = u.abs();
    if !(a <= T::one()) {
        return T::zero();
    }
    match kind {
        KernelKind::Triangular => T::one() - a,
        KernelKind::Uniform => lit(0.5),
        KernelKind::Epanechnikov => lit::<T>(0.75) * (T::one() - a * a),
    }
}

/// `(1, u, .., u^q)`.
pub fn poly_basis<T: Scalar>(u: T, q: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(q + 1);
    let mut acc = T::one();
    for _ in 0..=q {
        out.push(acc);
        acc *= u;
    }
    out
}

/// `(r_p(u)', w' (x) r_s(u)')'`: the main polynomial followed by one block of
/// `w_l * r_s(u)` per covariate.
pub fn interacted_basis<T: Scalar>(u: T, w: &[T], p: usize, s: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(1 + p + w.len() * (1 + s));
    interacted_basis_into(u, w, p, s, &mut out);
    out
}

pub(crate) fn interacted_basis_into<T: Scalar>(
    u: T,
    w: &[T],
    p: usize,
    s: usize,
    out: &mut Vec<T>,
) {
    out.clear();
    out.extend(poly_basis(u, p));
    let rs = poly_basis(u, s);
    for &wl in w {
        out.extend(rs.iter().map(|&r| wl * r));
    }
}

/// Diagonal of `H_{p,s}(h)`: `(h^0..h^p, then d copies of h^0..h^s)`.
pub fn scaling_diag<T: Scalar>(h: T, p: usize, s: usize, d: usize) -> Result<Vec<T>> {
    if !(h > T::zero()) || !h.is_finite() {
        return Err(RdError::NonPositiveBandwidth(to_f64(h)));
    }
    let mut out = poly_basis(h, p);
    let hs = poly_basis(h, s);
    for _ in 0..d {
        out.extend_from_slice(&hs);
    }
    Ok(out)
}

pub fn scaling_matrix<T: Scalar>(h: T, p: usize, s: usize, d: usize) -> Result<Matrix<T>> {
    Ok(Matrix::from_diag(&scaling_diag(h, p, s, d)?))
}
