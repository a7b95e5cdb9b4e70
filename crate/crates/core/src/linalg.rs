//! Small dense linear-algebra helpers shared across the crate.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Spectral norm (largest singular value) by power iteration on `MᵀM`.
///
/// Stops once the estimate stalls to 1e-13 relative change, or after 1000
/// iterations. The starting vector is drawn from a fixed-seed RNG so the
/// result is deterministic. The returned value never exceeds the true norm.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
    let mut v = DVector::from_fn(m.ncols(), |_, _| {
        let x: f64 = StandardNormal.sample(&mut rng);
        x
    });
    let nv = v.norm();
    if nv == 0.0 {
        return 0.0;
    }
    v /= nv;

    let mut sigma = 0.0;
    for _ in 0..1000 {
        let mv = m * &v;
        let new_sigma = mv.norm();
        if new_sigma == 0.0 {
            return 0.0;
        }
        let w = m.transpose() * mv;
        let nw = w.norm();
        if nw == 0.0 {
            return new_sigma;
        }
        v = w / nw;
        if (new_sigma - sigma).abs() <= 1e-13 * new_sigma.max(1.0) {
            return new_sigma;
        }
        sigma = new_sigma;
    }
    sigma
}

/// Spectral radius: max |λ| over the eigenvalues of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    assert_eq!(m.nrows(), m.ncols(), "spectral radius needs a square matrix");
    if m.nrows() == 0 {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|l| l.norm())
        .fold(0.0, f64::max)
}

/// Seeded random PSD matrix `W = MᵀM + eps·I` with `M` standard normal.
pub fn random_psd<R: Rng>(n: usize, eps: f64, rng: &mut R) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| {
        let x: f64 = StandardNormal.sample(rng);
        x
    });
    m.transpose() * &m + DMatrix::identity(n, n) * eps
}

/// Symmetric square root of a PSD matrix via eigendecomposition.
///
/// Eigenvalues in `[-1e-10, 0)` are clamped to zero; anything more negative
/// is rejected as indefinite.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimensions("psd_sqrt needs a square matrix".into()));
    }
    if m.nrows() == 0 {
        return Ok(m.clone());
    }
    let sym = 0.5 * (m + m.transpose());
    let eig = sym.symmetric_eigen();
    let mut d = eig.eigenvalues.clone();
    for v in d.iter_mut() {
        if *v < 0.0 {
            if *v < -1e-10 {
                return Err(Error::Indefinite(format!(
                    "eigenvalue {v:.3e} below zero in covariance"
                )));
            }
            *v = 0.0;
        }
        *v = v.sqrt();
    }
    let u = &eig.eigenvectors;
    Ok(u * DMatrix::from_diagonal(&d) * u.transpose())
}

/// True iff every entry is finite.
pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// True iff every entry is finite.
pub fn vec_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Row-major nested arrays, the wire representation of a matrix.
pub fn mat_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Parse row-major nested arrays into a matrix, checking rectangularity.
pub fn mat_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Format("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}
