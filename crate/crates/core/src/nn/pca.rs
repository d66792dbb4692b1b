use crate::error::{MeterError, Result};
use crate::nn::tensor::Matrix;

/// Sample covariance matrix (divisor n−1) of row-vector observations.
pub fn covariance(data: &[Vec<f64>]) -> Result<Matrix> {
    if data.len() < 2 {
        return Err(MeterError::Contract(format!(
            "covariance needs at least 2 samples, got {}",
            data.len()
        )));
    }
    let d = data[0].len();
    let n = data.len() as f64;
    let mut mean = vec![0.0; d];
    for x in data {
        if x.len() != d {
            return Err(MeterError::shape("covariance", d, x.len()));
        }
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut cov = Matrix::zeros(d, d);
    for x in data {
        for i in 0..d {
            let di = x[i] - mean[i];
            for j in i..d {
                let dj = x[j] - mean[j];
                let v = cov.get(i, j) + di * dj;
                cov.set(i, j, v);
            }
        }
    }
    let denom = n - 1.0;
    for i in 0..d {
        for j in i..d {
            let v = cov.get(i, j) / denom;
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }
    Ok(cov)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors-as-columns), unsorted.
pub fn jacobi_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let (n, m) = a.shape();
    if n != m {
        return Err(MeterError::shape("jacobi_eigen", "square", format!("{n}x{m}")));
    }
    let mut a = a.clone();
    let mut q = Matrix::identity(n);
    let scale: f64 = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| a.get(i, j).abs())
        .fold(0.0, f64::max)
        .max(1.0);
    let tol = 1e-14 * scale;

    const MAX_SWEEPS: usize = 64;
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for r in (p + 1)..n {
                off += a.get(p, r).abs();
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for r in (p + 1)..n {
                let apq = a.get(p, r);
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(r, r);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // rotate rows/columns p and r
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, r);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, r, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(r, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(r, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let qkp = q.get(k, p);
                    let qkq = q.get(k, r);
                    q.set(k, p, c * qkp - s * qkq);
                    q.set(k, r, s * qkp + c * qkq);
                }
            }
        }
    }
    let eigenvalues = (0..n).map(|i| a.get(i, i)).collect();
    Ok((eigenvalues, q))
}

/// Smallest k such that the top-k covariance eigenvalues explain at least
/// `explained` of the total variance. Zero total variance yields 1.
pub fn pca_latent_dim(data: &[Vec<f64>], explained: f64) -> Result<usize> {
    if !(explained > 0.0 && explained <= 1.0) {
        return Err(MeterError::Contract(format!(
            "explained variance fraction must lie in (0, 1], got {explained}"
        )));
    }
    let cov = covariance(data)?;
    let (mut eigenvalues, _) = jacobi_eigen(&cov)?;
    eigenvalues.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let total: f64 = eigenvalues.iter().filter(|v| **v > 0.0).sum();
    if total <= 0.0 {
        return Ok(1);
    }
    // eigenvalues below numerical noise count as rank-deficient zeros
    let floor = 1e-12 * total;
    let target = explained * total * (1.0 - 1e-12);
    let mut acc = 0.0;
    for (i, ev) in eigenvalues.iter().enumerate() {
        if *ev <= floor {
            break;
        }
        acc += ev;
        if acc >= target {
            return Ok(i + 1);
        }
    }
    Ok(eigenvalues.iter().filter(|v| **v > floor).count().max(1))
}
