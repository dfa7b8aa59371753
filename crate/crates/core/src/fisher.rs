//! Fisher Vector encoding of descriptor sets, normalisation and fusion with
//! global feature vectors.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::LocalDescriptorSet;
use crate::gmm::GaussianMixture;

const CHUNK: usize = 1024;

/// Gradient statistics of a descriptor set with respect to the mixture
/// weights, means and standard deviations, whitened by the diagonal Fisher
/// information.
///
/// Layout: `K` weight terms, then `K·D` mean terms, then `K·D` deviation
/// terms, both component-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherVector {
    pub values: Vec<f64>,
    pub components: usize,
    pub dim: usize,
}

impl FisherVector {
    pub fn expected_len(components: usize, dim: usize) -> usize {
        components * (2 * dim + 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn weight_block(&self) -> &[f64] {
        &self.values[..self.components]
    }

    pub fn mean_block(&self) -> &[f64] {
        let k = self.components;
        &self.values[k..k + k * self.dim]
    }

    pub fn sigma_block(&self) -> &[f64] {
        let k = self.components;
        &self.values[k + k * self.dim..]
    }

    /// Power normalisation followed by L2 normalisation.
    pub fn normalized(&self) -> FisherVector {
        FisherVector {
            values: l2_normalize(&power_normalize(&self.values)),
            components: self.components,
            dim: self.dim,
        }
    }
}

/// Encodes `x` under `gmm`:
///
/// ```text
/// G_w[i]     = 1/(T√w_i)  Σ_t (γ_i(x_t) − w_i)
/// G_μ[i,d]   = 1/(T√w_i)  Σ_t γ_i(x_t) (x_t,d − μ_i,d) / σ_i,d
/// G_σ[i,d]   = 1/(T√2w_i) Σ_t γ_i(x_t) [(x_t,d − μ_i,d)² / σ_i,d² − 1]
/// ```
pub fn encode(gmm: &GaussianMixture, x: &LocalDescriptorSet) -> Result<FisherVector> {
    let k = gmm.components();
    let d = gmm.dim();
    if x.dim() != d {
        return Err(Error::invalid(format!("mixture has dimension {d}, descriptors have {}", x.dim())));
    }
    if x.is_empty() {
        return Err(Error::invalid("cannot encode an empty descriptor set"));
    }
    let t = x.len();
    let stddev: Vec<f64> = gmm.variances().iter().map(|v| v.sqrt()).collect();
    let (gamma, _) = gmm.posteriors(x)?;

    // Per-chunk sufficient statistics, reduced in chunk order.
    let stats_len = k + 2 * k * d;
    let partial: Vec<Vec<f64>> = (0..t)
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|rows| {
            let mut s = vec![0.0f64; stats_len];
            for &r in rows {
                let row = x.row(r);
                let g = &gamma[r * k..(r + 1) * k];
                for i in 0..k {
                    let gi = g[i];
                    s[i] += gi;
                    if gi == 0.0 {
                        continue;
                    }
                    let mu = gmm.mean(i);
                    let sd = &stddev[i * d..(i + 1) * d];
                    let (s_mu, s_sigma) = s[k..].split_at_mut(k * d);
                    for j in 0..d {
                        let z = (row[j] as f64 - mu[j]) / sd[j];
                        s_mu[i * d + j] += gi * z;
                        s_sigma[i * d + j] += gi * (z * z - 1.0);
                    }
                }
            }
            s
        })
        .collect();
    let mut stats = vec![0.0f64; stats_len];
    for p in &partial {
        for (a, b) in stats.iter_mut().zip(p) {
            *a += b;
        }
    }

    let tf = t as f64;
    let mut values = vec![0.0f64; stats_len];
    for i in 0..k {
        let w = gmm.weights()[i];
        let sw = w.sqrt();
        values[i] = (stats[i] - tf * w) / (tf * sw);
        for j in 0..d {
            values[k + i * d + j] = stats[k + i * d + j] / (tf * sw);
            values[k + k * d + i * d + j] = stats[k + k * d + i * d + j] / (tf * (2.0 * w).sqrt());
        }
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("Fisher vector has non-finite entries".into()));
    }
    Ok(FisherVector { values, components: k, dim: d })
}

/// Signed square root, elementwise.
pub fn power_normalize(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.signum() * x.abs().sqrt()).map(|x| if x == 0.0 { 0.0 } else { x }).collect()
}

/// Scales to unit Euclidean norm; vectors with norm ≤ 1e-12 are returned unchanged.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-12 {
        v.iter().map(|x| x / norm).collect()
    } else {
        v.to_vec()
    }
}

/// Which global vectors are appended to the Fisher Vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Fv,
    FvFc,
    FvAe,
    FcFvAe,
}

impl Variant {
    pub fn uses_fc(self) -> bool {
        matches!(self, Variant::FvFc | Variant::FcFvAe)
    }

    pub fn uses_ssl(self) -> bool {
        matches!(self, Variant::FvAe | Variant::FcFvAe)
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Fv => "FV",
            Variant::FvFc => "FV+FC",
            Variant::FvAe => "FVAE",
            Variant::FcFvAe => "FCFVAE",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fv" => Ok(Variant::Fv),
            "fvfc" | "fv+fc" => Ok(Variant::FvFc),
            "fvae" => Ok(Variant::FvAe),
            "fcfvae" => Ok(Variant::FcFvAe),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Fv,
    Fc,
    Ssl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub offset: usize,
    pub len: usize,
}

/// A Fisher Vector concatenated with optional FC and SSL segments.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedDescriptor {
    pub variant: Variant,
    pub values: Vec<f64>,
    pub segments: Vec<Segment>,
}

impl FusedDescriptor {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, kind: SegmentKind) -> Option<&[f64]> {
        self.segments
            .iter()
            .find(|s| s.kind == kind)
            .map(|s| &self.values[s.offset..s.offset + s.len])
    }
}

/// Concatenates `[FV, FC?, SSL?]` as required by `variant`.
///
/// `fv` is expected to be normalised already; FC and SSL are L2-normalised
/// here, each on its own.
pub fn fuse(fv: &FisherVector, ssl: Option<&[f32]>, fc: Option<&[f32]>, variant: Variant) -> Result<FusedDescriptor> {
    let mut values = fv.values.clone();
    let mut segments = vec![Segment { kind: SegmentKind::Fv, offset: 0, len: fv.len() }];
    let mut push = |kind, v: &[f32], values: &mut Vec<f64>| {
        let as64: Vec<f64> = v.iter().map(|&x| x as f64).collect();
        segments.push(Segment { kind, offset: values.len(), len: v.len() });
        values.extend(l2_normalize(&as64));
    };
    if variant.uses_fc() {
        let fc = fc.ok_or_else(|| Error::invalid(format!("variant {variant} needs an FC vector")))?;
        push(SegmentKind::Fc, fc, &mut values);
    }
    if variant.uses_ssl() {
        let ssl = ssl.ok_or_else(|| Error::invalid(format!("variant {variant} needs an SSL vector")))?;
        push(SegmentKind::Ssl, ssl, &mut values);
    }
    Ok(FusedDescriptor { variant, values, segments })
}
