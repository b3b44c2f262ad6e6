//! Sample moments and the Fréchet distance between Gaussian fits.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub const FRECHET_RIDGE: f64 = 1e-6;

/// Mean and unbiased covariance of row vectors.
pub fn mean_cov(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::Invalid("moments need at least two samples".into()));
    }
    let d = rows[0].len();
    let mut mean = DVector::zeros(d);
    for r in rows {
        if r.len() != d {
            return Err(Error::Invalid("samples of different sizes".into()));
        }
        mean += DVector::from_column_slice(r);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        let c = DVector::from_column_slice(r) - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    Ok((mean, cov))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frechet {
    pub distance: f64,
    /// A covariance was singular and `FRECHET_RIDGE * I` was added to both.
    pub ridge_applied: bool,
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

/// `|mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa^{1/2} Sb Sa^{1/2})^{1/2})`.
pub fn frechet_gaussian(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Frechet {
    let scale = cov_a.trace().abs().max(cov_b.trace().abs()).max(1.0);
    let singular = min_eig(cov_a) <= 1e-12 * scale || min_eig(cov_b) <= 1e-12 * scale;
    let (ca, cb) = if singular {
        let r = DMatrix::identity(cov_a.nrows(), cov_a.ncols()) * FRECHET_RIDGE;
        (cov_a + &r, cov_b + &r)
    } else {
        (cov_a.clone(), cov_b.clone())
    };
    let sa = sym_sqrt(&ca);
    let inner = &sa * &cb * &sa;
    let cross = sym_sqrt(&((&inner + inner.transpose()) * 0.5)).trace();
    let diff = mu_a - mu_b;
    Frechet {
        distance: (diff.dot(&diff) + ca.trace() + cb.trace() - 2.0 * cross).max(0.0),
        ridge_applied: singular,
    }
}

/// Fréchet distance between Gaussian fits of two sets of feature vectors.
pub fn frechet_proxy(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Frechet> {
    let (ma, ca) = mean_cov(a)?;
    let (mb, cb) = mean_cov(b)?;
    if ma.len() != mb.len() {
        return Err(Error::Invalid("feature sets of different widths".into()));
    }
    Ok(frechet_gaussian(&ma, &ca, &mb, &cb))
}
