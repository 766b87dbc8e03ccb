//! Dense linear-algebra helpers shared by the subspace and transfer code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

/// Row means of a feature-major matrix (one row per feature, one column per sample).
pub fn row_means(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.ncols() as f64;
    DVector::from_iterator(x.nrows(), x.row_iter().map(|r| r.sum() / n))
}

/// Unbiased (1/(n-1)) covariance of the columns of a feature-major matrix.
pub fn column_covariance(x: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut centered = x.clone();
    for mut col in centered.column_iter_mut() {
        col -= mean;
    }
    let denom = (x.ncols().max(2) - 1) as f64;
    let mut cov = &centered * centered.transpose() / denom;
    symmetrize(&mut cov);
    cov
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn skew(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m - m.transpose()) * 0.5
}

/// Frobenius inner product.
pub fn inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Largest absolute entry of `M Mᵀ - I`.
pub fn orthogonality_error(m: &DMatrix<f64>) -> f64 {
    let g = m * m.transpose();
    let mut worst = 0.0_f64;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

/// Q factor of a QR decomposition, with column signs chosen so that R has a
/// positive diagonal. This makes the factor unique and the retraction smooth.
pub fn qf(m: &DMatrix<f64>) -> DMatrix<f64> {
    let qr = m.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..q.ncols().min(r.nrows()) {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Haar-distributed random orthogonal matrix.
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    qf(&g)
}

/// Inverse principal square root of a symmetric positive-definite matrix,
/// together with the eigen-decomposition used to build it.
pub fn inv_sqrt_spd(m: &DMatrix<f64>) -> (DMatrix<f64>, SymmetricEigen<f64, nalgebra::Dyn>) {
    let eig = SymmetricEigen::new(m.clone());
    let inv_root = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| 1.0 / l.sqrt()),
    );
    let v = &eig.eigenvectors;
    let mut out = v * DMatrix::from_diagonal(&inv_root) * v.transpose();
    symmetrize(&mut out);
    (out, eig)
}

/// Principal angles (radians, ascending) between the column spaces of `a` and `b`.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    let qa = orthonormal_basis(a);
    let qb = orthonormal_basis(b);
    let m = qa.transpose() * qb;
    let svd = m.svd(false, false);
    let mut angles: Vec<f64> = svd
        .singular_values
        .iter()
        .map(|&s| s.clamp(-1.0, 1.0).acos())
        .collect();
    angles.sort_by(|x, y| x.partial_cmp(y).unwrap());
    angles
}

fn orthonormal_basis(a: &DMatrix<f64>) -> DMatrix<f64> {
    let qr = a.clone().qr();
    let q = qr.q();
    q.columns(0, a.ncols().min(a.nrows())).into_owned()
}

/// Row-major `[[..], [..]]` serde representation for `DMatrix<f64>`.
pub mod serde_matrix {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        from_rows(&rows).map_err(D::Error::custom)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err("ragged matrix rows".to_string());
        }
        Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }
}

/// Plain array serde representation for `DVector<f64>`.
pub mod serde_vector {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        let data: Vec<f64> = Vec::deserialize(d)?;
        Ok(DVector::from_vec(data))
    }
}
