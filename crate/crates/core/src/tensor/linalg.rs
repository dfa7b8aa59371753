use super::Tensor;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;

/// Eigendecomposition of a symmetric `[D, D]` array.
///
/// Returns eigenvalues in descending order and a `[D, D]` array whose
/// columns are the matching orthonormal eigenvectors.
pub fn eigh(s: &Tensor) -> Result<(Vec<f32>, Tensor)> {
    let (n, m) = s.rows_cols()?;
    if n != m {
        return Err(Error::dim("columns", format!("eigh needs a square matrix, got {n}x{m}")));
    }
    let scale = s.data().iter().fold(0.0f32, |acc, v| acc.max(v.abs())).max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            if (s.data()[i * n + j] - s.data()[j * n + i]).abs() > 1e-6 * scale {
                return Err(Error::invalid(format!("matrix is not symmetric at ({i}, {j})")));
            }
        }
    }
    let a: Vec<f64> = s.data().iter().map(|&v| v as f64).collect();
    let (values, vectors) = symmetric_eigen(n, &a)?;
    Ok((
        values.iter().map(|&v| v as f32).collect(),
        Tensor::new(vec![n, n], vectors.iter().map(|&v| v as f32).collect())?,
    ))
}

/// Cyclic Jacobi eigensolver on a row-major `n × n` symmetric matrix.
///
/// Only the upper triangle is read. Eigenvalues come back sorted descending;
/// eigenvectors are the columns of the returned row-major matrix.
pub fn symmetric_eigen(n: usize, matrix: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if matrix.len() != n * n {
        return Err(Error::dim("matrix", format!("expected {} entries, got {}", n * n, matrix.len())));
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("eigendecomposition of a non-finite matrix".into()));
    }
    let mut a = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i..n {
            a[i * n + j] = matrix[i * n + j];
            a[j * n + i] = matrix[i * n + j];
        }
    }
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let total: f64 = a.iter().map(|x| x * x).sum();
    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off <= 1e-24 * total.max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "Jacobi eigensolver did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0f64; n * n];
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            vectors[row * n + col] = v[row * n + src];
        }
    }
    Ok((values, vectors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_has_unit_eigenvalues() {
        let mut id = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            id.data_mut()[i * 5] = 1.0;
        }
        let (vals, _) = eigh(&id).unwrap();
        assert_eq!(vals, vec![1.0; 4]);
    }

    #[test]
    fn diagonal_is_sorted_and_axis_aligned() {
        let s = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 3.0]).unwrap();
        let (vals, vecs) = eigh(&s).unwrap();
        assert_eq!(vals, vec![3.0, 1.0]);
        // first column is ±e_1
        assert_eq!(vecs.data()[0], 0.0);
        assert_eq!(vecs.data()[2].abs(), 1.0);
    }

    #[test]
    fn rejects_asymmetric_input() {
        let s = Tensor::new(vec![2, 2], vec![1.0, 2.0, 0.0, 1.0]).unwrap();
        assert!(matches!(eigh(&s), Err(Error::Validation(_))));
    }

    #[test]
    fn random_symmetric_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 8;
        let mut s = vec![0.0f64; n * n];
        for i in 0..n {
            for j in i..n {
                let v: f64 = rng.random_range(-2.0..2.0);
                s[i * n + j] = v;
                s[j * n + i] = v;
            }
        }
        let (vals, v) = symmetric_eigen(n, &s).unwrap();
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        for i in 0..n {
            for j in 0..n {
                let recon: f64 = (0..n).map(|k| v[i * n + k] * vals[k] * v[j * n + k]).sum();
                assert!((recon - s[i * n + j]).abs() < 1e-4);
                let gram: f64 = (0..n).map(|k| v[k * n + i] * v[k * n + j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((gram - expect).abs() < 1e-6);
            }
        }
    }
}
