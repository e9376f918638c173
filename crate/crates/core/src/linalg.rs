//! Dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};
use rand::Rng;
use rand_distr::StandardNormal;

pub type Mat = DMatrix<f64>;

/// Flips column signs so that each column's largest-magnitude entry is
/// positive. The same flips are applied to the paired columns of `partner`.
pub fn fix_signs(primary: &mut Mat, mut partner: Option<&mut Mat>) {
    for j in 0..primary.ncols() {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for i in 0..primary.nrows() {
            let x = primary[(i, j)];
            if x.abs() > best {
                best = x.abs();
                sign = x.signum();
            }
        }
        if sign < 0.0 {
            primary.column_mut(j).neg_mut();
            if let Some(other) = partner.as_deref_mut() {
                other.column_mut(j).neg_mut();
            }
        }
    }
}

/// Thin dense SVD with non-increasing singular values and the crate's sign
/// convention. Returns `(U, s, V)` with `m = U diag(s) Vᵀ`.
pub fn dense_svd(m: &Mat) -> (Mat, Vec<f64>, Mat) {
    let svd = SVD::new(m.clone(), true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let mut u_sorted = Mat::zeros(u.nrows(), order.len());
    let mut v_sorted = Mat::zeros(v_t.ncols(), order.len());
    let mut values = Vec::with_capacity(order.len());
    for (k, &j) in order.iter().enumerate() {
        u_sorted.set_column(k, &u.column(j));
        v_sorted.set_column(k, &v_t.row(j).transpose());
        values.push(s[j]);
    }
    fix_signs(&mut u_sorted, Some(&mut v_sorted));
    (u_sorted, values, v_sorted)
}

/// Full symmetric eigendecomposition sorted by algebraic value, largest first.
pub fn dense_sym_eigen(m: &Mat) -> (Vec<f64>, Mat) {
    let sym = 0.5 * (m + m.transpose());
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut vecs = Mat::zeros(m.nrows(), order.len());
    let mut vals = Vec::with_capacity(order.len());
    for (k, &j) in order.iter().enumerate() {
        vecs.set_column(k, &eig.eigenvectors.column(j));
        vals.push(eig.eigenvalues[j]);
    }
    fix_signs(&mut vecs, None);
    (vals, vecs)
}

/// Orthonormal basis of the column span (first `ncols` left singular vectors).
pub fn orthonormal_basis(m: &Mat) -> Mat {
    let (u, _, _) = dense_svd(m);
    u.columns(0, m.ncols().min(m.nrows())).into_owned()
}

/// Orthogonal polar factor `U Vᵀ` of a square matrix.
pub fn polar(m: &Mat) -> Mat {
    let (u, _, v) = dense_svd(m);
    u * v.transpose()
}

pub fn standard_normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Haar-distributed orthogonal matrix via QR with sign correction.
pub fn haar_orthogonal<R: Rng + ?Sized>(p: usize, rng: &mut R) -> Mat {
    let g = standard_normal_matrix(p, p, rng);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..p {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `‖Qᵀ Q − I‖_max`
pub fn orthonormality_defect(q: &Mat) -> f64 {
    let gram = q.transpose() * q;
    let mut worst = 0.0f64;
    for i in 0..gram.nrows() {
        for j in 0..gram.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[(i, j)] - target).abs());
        }
    }
    worst
}

pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

pub fn spectral_norm(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    dense_svd(m).1.first().copied().unwrap_or(0.0)
}

/// Symmetric positive semi-definite factor `F` with `F Fᵀ = sigma`, keeping
/// only eigen-directions above the clamp threshold. Eigenvalues below
/// `-tol * ‖sigma‖` are rejected.
pub fn psd_factor(sigma: &Mat, tol: f64) -> Result<Mat, (f64, f64)> {
    let n = sigma.nrows();
    if n == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    let (vals, vecs) = dense_sym_eigen(sigma);
    let scale = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let floor = -tol * scale;
    if let Some(&worst) = vals.iter().find(|&&v| v < floor) {
        return Err((worst, floor));
    }
    let keep: Vec<usize> = (0..n).filter(|&j| vals[j] > tol * scale && vals[j] > 0.0).collect();
    let mut factor = Mat::zeros(n, keep.len());
    for (k, &j) in keep.iter().enumerate() {
        factor.set_column(k, &(vecs.column(j) * vals[j].sqrt()));
    }
    Ok(factor)
}

pub fn column_means(m: &Mat) -> DVector<f64> {
    let rows = m.nrows().max(1) as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / rows))
}

/// Row-major nested vectors, used by the JSON file formats.
pub mod rows_serde {
    use super::Mat;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Mat, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        from_rows(&rows).map_err(D::Error::custom)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Mat, String> {
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err("ragged matrix rows".into());
        }
        Ok(Mat::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::seeded_rng;

    #[test]
    fn svd_sorted_and_signed() {
        let mut rng = seeded_rng(3);
        let m = standard_normal_matrix(7, 5, &mut rng);
        let (u, s, v) = dense_svd(&m);
        assert!(s.windows(2).all(|w| w[0] >= w[1]));
        let recon = &u * Mat::from_diagonal(&DVector::from_vec(s.clone())) * v.transpose();
        assert!((recon - &m).norm() < 1e-10);
        for j in 0..u.ncols() {
            let col = u.column(j);
            let idx = col.iamax();
            assert!(col[idx] > 0.0);
        }
    }

    #[test]
    fn haar_is_orthogonal() {
        let mut rng = seeded_rng(9);
        let q = haar_orthogonal(5, &mut rng);
        assert!(orthonormality_defect(&q) < 1e-12);
    }

    #[test]
    fn psd_factor_rejects_negative_definite() {
        let m = Mat::from_diagonal(&DVector::from_vec(vec![1.0, -0.5]));
        assert!(psd_factor(&m, 1e-10).is_err());
        let ok = Mat::from_diagonal(&DVector::from_vec(vec![4.0, 0.0, -1e-14]));
        let f = psd_factor(&ok, 1e-10).unwrap();
        assert_eq!(f.ncols(), 1);
        assert!(((&f * f.transpose()) - Mat::from_diagonal(&DVector::from_vec(vec![4.0, 0.0, 0.0]))).norm() < 1e-12);
    }
}
