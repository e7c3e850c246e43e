//! Small dense helpers shared by the solver and the population simulator.
//!
//! Dimensions in this crate are tiny (n, m <= 8), so processes are stored as
//! flat `f64` slices and multiplied against `nalgebra` matrices by hand to
//! avoid per-node allocations.

use nalgebra::{DMatrix, DVector};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// `out += scale * m * v`
#[inline]
pub fn mv_add(out: &mut [f64], m: &Mat, v: &[f64], scale: f64) {
    debug_assert_eq!(m.nrows(), out.len());
    debug_assert_eq!(m.ncols(), v.len());
    for (j, &vj) in v.iter().enumerate() {
        if vj == 0.0 {
            continue;
        }
        let s = scale * vj;
        for (i, o) in out.iter_mut().enumerate() {
            *o += m[(i, j)] * s;
        }
    }
}

/// `out += scale * mᵀ * v`
#[inline]
pub fn mtv_add(out: &mut [f64], m: &Mat, v: &[f64], scale: f64) {
    debug_assert_eq!(m.ncols(), out.len());
    debug_assert_eq!(m.nrows(), v.len());
    for (j, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (i, &vi) in v.iter().enumerate() {
            acc += m[(i, j)] * vi;
        }
        *o += scale * acc;
    }
}

/// `out = m * v`
#[inline]
pub fn mv(out: &mut [f64], m: &Mat, v: &[f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    mv_add(out, m, v, 1.0);
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `⟨m a, a⟩`
#[inline]
pub fn quad_form(m: &Mat, a: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        for j in 0..a.len() {
            acc += a[i] * m[(i, j)] * a[j];
        }
    }
    acc
}

#[inline]
pub fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

pub fn max_abs(m: &Mat) -> f64 {
    m.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

/// Largest absolute entry of `m - mᵀ`; zero for non-square input is never
/// returned (callers check shape first).
pub fn asymmetry(m: &Mat) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn symmetrized(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues(m: &Mat) -> Vec<f64> {
    let mut ev: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn is_diagonal(m: &Mat) -> bool {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if i != j && m[(i, j)] != 0.0 {
                return false;
            }
        }
    }
    true
}

/// `Some(c)` when `m == c·I` exactly.
pub fn scalar_multiple_of_identity(m: &Mat) -> Option<f64> {
    if !is_diagonal(m) || m.nrows() == 0 {
        return None;
    }
    let c = m[(0, 0)];
    (0..m.nrows()).all(|i| m[(i, i)] == c).then_some(c)
}

pub fn identity(n: usize) -> Mat {
    Mat::identity(n, n)
}

pub fn zeros(r: usize, c: usize) -> Mat {
    Mat::zeros(r, c)
}

pub fn to_vec(v: &Vector) -> Vec<f64> {
    v.iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_helpers_agree_with_nalgebra() {
        let m = Mat::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0]);
        let v = [0.3, -2.0, 1.5];
        let mut out = [0.0; 2];
        mv(&mut out, &m, &v);
        let expect = &m * Vector::from_column_slice(&v);
        assert!((out[0] - expect[0]).abs() < 1e-15 && (out[1] - expect[1]).abs() < 1e-15);

        let w = [1.0, -1.0];
        let mut out_t = [0.0; 3];
        mtv_add(&mut out_t, &m, &w, 2.0);
        let expect_t = m.transpose() * Vector::from_column_slice(&w) * 2.0;
        for i in 0..3 {
            assert!((out_t[i] - expect_t[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_multiple_detection() {
        assert_eq!(scalar_multiple_of_identity(&(identity(3) * 2.5)), Some(2.5));
        let mut m = identity(2);
        m[(0, 1)] = 1e-20;
        assert_eq!(scalar_multiple_of_identity(&m), None);
    }
}
