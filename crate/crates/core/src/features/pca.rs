use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{symmetric_eigen, Tensor};

const CHUNK: usize = 4096;

/// Principal component projection fitted on descriptor rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f32>,
    /// `[D_in, D]`, orthonormal columns ordered by decreasing variance.
    pub components: Tensor,
    pub explained_variance: Vec<f32>,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.explained_variance.len()
    }

    /// `(row - mean) · components` for every row of a `[T, D_in]` matrix.
    pub fn project(&self, rows: &Tensor) -> Result<Tensor> {
        let (t, d_in) = rows.rows_cols()?;
        if d_in != self.input_dim() {
            return Err(Error::invalid(format!(
                "PCA fitted on {} dims, rows have {d_in}",
                self.input_dim()
            )));
        }
        let d = self.output_dim();
        let comps = self.components.data();
        let mut out = vec![0.0f32; t * d];
        out.par_chunks_mut(d.max(1)).enumerate().for_each(|(r, dst)| {
            let row = rows.row(r);
            for (k, v) in dst.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                for (i, (&x, &m)) in row.iter().zip(&self.mean).enumerate() {
                    acc += (x - m) as f64 * comps[i * d + k] as f64;
                }
                *v = acc as f32;
            }
        });
        Tensor::new(vec![t, d], out)
    }

    /// Maps projected rows back to the input space.
    pub fn reconstruct(&self, projected: &Tensor) -> Result<Tensor> {
        let (t, d) = projected.rows_cols()?;
        if d != self.output_dim() {
            return Err(Error::invalid("projected rows do not match the PCA output dimension"));
        }
        let d_in = self.input_dim();
        let comps = self.components.data();
        let mut out = Vec::with_capacity(t * d_in);
        for r in 0..t {
            let z = projected.row(r);
            for i in 0..d_in {
                let acc: f64 = (0..d).map(|k| z[k] as f64 * comps[i * d + k] as f64).sum();
                out.push((acc + self.mean[i] as f64) as f32);
            }
        }
        Tensor::new(vec![t, d_in], out)
    }
}

/// Fits a `dim`-component PCA by eigendecomposition of the (biased, `1/T`)
/// covariance of `rows`.
pub fn fit_pca(rows: &Tensor, dim: usize) -> Result<PcaModel> {
    let (t, d_in) = rows.rows_cols()?;
    if dim == 0 || dim > d_in {
        return Err(Error::invalid(format!("PCA dimension {dim} must be in 1..={d_in}")));
    }
    if t < dim {
        return Err(Error::invalid(format!("PCA needs at least {dim} rows, got {t}")));
    }
    let n = t as f64;
    let sums: Vec<Vec<f64>> = (0..t)
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut s = vec![0.0f64; d_in];
            for &r in chunk {
                for (a, &x) in s.iter_mut().zip(rows.row(r)) {
                    *a += x as f64;
                }
            }
            s
        })
        .collect();
    let mut mean = vec![0.0f64; d_in];
    for s in &sums {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);

    let partial: Vec<Vec<f64>> = (0..t)
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut cov = vec![0.0f64; d_in * d_in];
            let mut centered = vec![0.0f64; d_in];
            for &r in chunk {
                for ((c, &x), &m) in centered.iter_mut().zip(rows.row(r)).zip(&mean) {
                    *c = x as f64 - m;
                }
                for i in 0..d_in {
                    let ci = centered[i];
                    let dst = &mut cov[i * d_in..(i + 1) * d_in];
                    for j in i..d_in {
                        dst[j] += ci * centered[j];
                    }
                }
            }
            cov
        })
        .collect();
    let mut cov = vec![0.0f64; d_in * d_in];
    for p in &partial {
        for (c, v) in cov.iter_mut().zip(p) {
            *c += v;
        }
    }
    cov.iter_mut().for_each(|c| *c /= n);

    let (values, vectors) = symmetric_eigen(d_in, &cov)?;
    let mut components = vec![0.0f32; d_in * dim];
    for k in 0..dim {
        // Sign convention: the largest-magnitude entry of each component is positive.
        let pivot = (0..d_in)
            .max_by(|&a, &b| vectors[a * d_in + k].abs().total_cmp(&vectors[b * d_in + k].abs()))
            .unwrap_or(0);
        let sign = if vectors[pivot * d_in + k] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d_in {
            components[i * dim + k] = (sign * vectors[i * d_in + k]) as f32;
        }
    }
    Ok(PcaModel {
        mean: mean.iter().map(|&m| m as f32).collect(),
        components: Tensor::new(vec![d_in, dim], components)?,
        explained_variance: values[..dim].iter().map(|&v| v.max(0.0) as f32).collect(),
    })
}
