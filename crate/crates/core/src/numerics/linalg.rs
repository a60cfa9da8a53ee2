//! Small dense linear algebra: symmetric eigendecomposition by cyclic Jacobi
//! rotations, PSD square roots and sample Gaussian statistics.

use serde::{Deserialize, Serialize};

use super::tensor::{matmul, Tensor};
use crate::error::{invalid, shape, Result};

/// Elementwise tolerance for accepting a matrix as symmetric.
pub const SYMMETRY_TOL: f64 = 1e-9;

const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Mean vector and covariance matrix of a sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// `d × d`, symmetric.
    pub cov: Tensor,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased (`1/(n-1)`) covariance of the rows of `samples`.
pub fn gaussian_stats(samples: &Tensor) -> Result<GaussianStats> {
    let (n, d) = samples.dims2()?;
    if n < 2 {
        return Err(invalid(format!("gaussian_stats needs at least 2 rows, got {n}")));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(samples.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = Tensor::zeros(vec![d, d]);
    let mut centered = vec![0.0; d];
    for i in 0..n {
        for ((c, v), m) in centered.iter_mut().zip(samples.row(i)).zip(&mean) {
            *c = v - m;
        }
        for a in 0..d {
            for b in a..d {
                let v = cov.get(a, b) + centered[a] * centered[b];
                cov.set(a, b, v);
            }
        }
    }
    let norm = 1.0 / (n as f64 - 1.0);
    for a in 0..d {
        for b in a..d {
            let v = cov.get(a, b) * norm;
            cov.set(a, b, v);
            cov.set(b, a, v);
        }
    }
    Ok(GaussianStats { mean, cov })
}

/// Eigenvalues and column eigenvectors of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    /// Column `k` is the eigenvector of `values[k]`.
    pub vectors: Tensor,
}

pub fn check_symmetric(m: &Tensor, tol: f64) -> Result<usize> {
    let (r, c) = m.dims2()?;
    if r != c {
        return Err(shape(format!("expected a square matrix, got {r}x{c}")));
    }
    for i in 0..r {
        for j in (i + 1)..r {
            let (a, b) = (m.get(i, j), m.get(j, i));
            if (a - b).abs() > tol * (1.0 + a.abs().max(b.abs())) {
                return Err(invalid(format!("matrix not symmetric at ({i},{j}): {a} vs {b}")));
            }
        }
    }
    Ok(r)
}

/// Cyclic Jacobi eigendecomposition. Iterates until the off-diagonal
/// Frobenius norm falls below `1e-12` relative to the matrix norm.
pub fn sym_eigen(m: &Tensor) -> Result<SymEigen> {
    let n = check_symmetric(m, SYMMETRY_TOL)?;
    let mut a = symmetrize(m);
    let mut v = Tensor::identity(n);
    let scale = a.frobenius().max(f64::MIN_POSITIVE);

    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= JACOBI_TOL * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let values = (0..n).map(|i| a.get(i, i)).collect();
    Ok(SymEigen { values, vectors: v })
}

/// Principal square root of a symmetric PSD matrix. Negative eigenvalues
/// (round-off) are clamped to zero.
pub fn psd_sqrt(m: &Tensor) -> Result<Tensor> {
    let eig = sym_eigen(m)?;
    let n = eig.values.len();
    let roots: Vec<f64> = eig.values.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let mut out = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in i..n {
            let s: f64 = (0..n).map(|k| eig.vectors.get(i, k) * roots[k] * eig.vectors.get(j, k)).sum();
            out.set(i, j, s);
            out.set(j, i, s);
        }
    }
    Ok(out)
}

/// Trace of the square root of `Σ_a Σ_b`, computed as the PSD root of the
/// symmetric congruence `√Σ_a · Σ_b · √Σ_a` (same spectrum as `Σ_a Σ_b`).
pub fn trace_sqrt_product(a: &Tensor, b: &Tensor) -> Result<f64> {
    let ra = psd_sqrt(a)?;
    let inner = symmetrize(&matmul(&matmul(&ra, b)?, &ra)?);
    psd_sqrt(&inner)?.trace()
}

pub fn symmetrize(m: &Tensor) -> Tensor {
    let n = m.rows();
    let mut out = m.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m.get(i, j) + m.get(j, i));
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    out
}
