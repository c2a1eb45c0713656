use nalgebra::linalg::{QR, SVD};

use super::Matrix;
use crate::error::{Error, Result};

/// The `rank` leading left singular vectors of `m`, as an orthonormal
/// `rows x rank` matrix.
///
/// Columns are ordered by decreasing singular value; each column is signed
/// so that its largest-magnitude entry (first one on ties) is positive.
pub fn leading_left_singular_vectors(m: &Matrix, rank: usize) -> Result<Matrix> {
    let avail = m.rows().min(m.cols());
    if rank == 0 || rank > avail {
        return Err(Error::invalid(format!(
            "cannot take {rank} singular vectors of a {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    let svd = SVD::try_new(m.to_nalgebra(), true, false, f64::EPSILON, 0)
        .ok_or_else(|| Error::Degenerate("SVD did not converge".into()))?;
    let u = svd.u.as_ref().expect("u requested");
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));

    let mut out = Matrix::zeros(m.rows(), rank);
    for (j, &src) in order.iter().take(rank).enumerate() {
        let col = u.column(src);
        let mut pivot = 0;
        for i in 1..col.len() {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..m.rows() {
            out.set(i, j, sign * col[i]);
        }
    }
    Ok(out)
}

/// Thin QR factorisation `m = q r` with `q` orthonormal (`rows x cols`) and
/// `r` upper triangular with a non-negative diagonal.
pub fn thin_qr(m: &Matrix) -> Result<(Matrix, Matrix)> {
    if m.rows() < m.cols() {
        return Err(Error::shape(format!(
            "thin QR needs rows >= cols, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let qr = QR::new(m.to_nalgebra());
    let mut q = Matrix::from_nalgebra(&qr.q());
    let mut r = Matrix::from_nalgebra(&qr.r());
    for j in 0..r.rows() {
        if r.get(j, j) < 0.0 {
            for c in 0..r.cols() {
                r.set(j, c, -r.get(j, c));
            }
            for i in 0..q.rows() {
                q.set(i, j, -q.get(i, j));
            }
        }
    }
    Ok((q, r))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singular_vectors_are_orthonormal_and_signed() {
        let m = Matrix::from_rows(&[
            vec![3.0, 1.0, 0.0, 2.0],
            vec![-1.0, 0.5, 4.0, 0.0],
            vec![0.0, 2.0, 1.0, -3.0],
        ])
        .unwrap();
        let u = leading_left_singular_vectors(&m, 2).unwrap();
        assert!(u.orthonormality_error() < 1e-12);
        for j in 0..2 {
            let col = u.col(j);
            let pivot = col.iter().cloned().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            assert!(pivot > 0.0);
        }
        assert!(leading_left_singular_vectors(&m, 4).is_err());
    }

    #[test]
    fn qr_reconstructs_with_positive_diagonal() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5], vec![2.0, 2.0]]).unwrap();
        let (q, r) = thin_qr(&m).unwrap();
        assert!(q.orthonormality_error() < 1e-12);
        assert!(r.get(0, 0) > 0.0 && r.get(1, 1) > 0.0);
        assert!(q.matmul(&r).unwrap().max_abs_diff(&m) < 1e-12);
    }
}
