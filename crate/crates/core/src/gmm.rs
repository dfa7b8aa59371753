//! Diagonal-covariance Gaussian mixture fitted by expectation-maximisation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::LocalDescriptorSet;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const CHUNK: usize = 1024;
const LLOYD_ITERS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GmmInit {
    KMeans,
    Random,
}

impl std::str::FromStr for GmmInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans" => Ok(GmmInit::KMeans),
            "random" => Ok(GmmInit::Random),
            other => Err(Error::Config(format!("unknown GMM init '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub components: usize,
    pub max_iters: usize,
    /// Stop once the relative change of the log-likelihood drops below this.
    pub tol: f64,
    pub variance_floor: f64,
    pub seed: u64,
    pub init: GmmInit,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            components: 16,
            max_iters: 100,
            tol: 1e-5,
            variance_floor: 1e-4,
            seed: 0,
            init: GmmInit::KMeans,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(Error::invalid("GMM needs at least one component"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("EM tolerance must be positive"));
        }
        if !(self.variance_floor > 0.0) {
            return Err(Error::invalid("variance floor must be positive"));
        }
        Ok(())
    }
}

/// `K` diagonal Gaussians over `D` dimensions. Parameters are kept in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    dim: usize,
    weights: Vec<f64>,
    /// `[K, D]`, row-major.
    means: Vec<f64>,
    /// `[K, D]`, the diagonal of each covariance.
    variances: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::invalid("mixture has no components"));
        }
        if means.len() % k != 0 || means.is_empty() || means.len() != variances.len() {
            return Err(Error::invalid(format!(
                "{} means and {} variances for {k} components",
                means.len(),
                variances.len()
            )));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::invalid("mixture weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("mixture weights sum to {total}")));
        }
        if variances.iter().any(|&v| !(v > 0.0) || !v.is_finite()) || means.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("means must be finite and variances positive"));
        }
        Ok(GaussianMixture { dim: means.len() / k, weights, means, variances })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn mean(&self, i: usize) -> &[f64] {
        &self.means[i * self.dim..(i + 1) * self.dim]
    }

    pub fn variance(&self, i: usize) -> &[f64] {
        &self.variances[i * self.dim..(i + 1) * self.dim]
    }

    fn log_norms(&self) -> Vec<f64> {
        (0..self.components())
            .map(|i| {
                let log_det: f64 = self.variance(i).iter().map(|v| v.ln()).sum();
                self.weights[i].ln() - 0.5 * (self.dim as f64 * LN_2PI + log_det)
            })
            .collect()
    }

    /// `log(w_i) + log u_i(x)` for every component.
    fn joint_log_densities(&self, log_norms: &[f64], x: &[f32], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let mu = self.mean(i);
            let var = self.variance(i);
            let mut q = 0.0;
            for d in 0..self.dim {
                let diff = x[d] as f64 - mu[d];
                q += diff * diff / var[d];
            }
            *o = log_norms[i] - 0.5 * q;
        }
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim {
            return Err(Error::invalid(format!("mixture has dimension {}, data has {d}", self.dim)));
        }
        Ok(())
    }

    /// Posterior probability of each component given `x`.
    pub fn responsibilities(&self, x: &[f32]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        let norms = self.log_norms();
        let mut g = vec![0.0; self.components()];
        self.joint_log_densities(&norms, x, &mut g);
        normalize_log(&mut g);
        Ok(g)
    }

    /// `Σ_t log Σ_i w_i u_i(x_t)`.
    pub fn log_likelihood(&self, x: &LocalDescriptorSet) -> Result<f64> {
        self.check_dim(x.dim())?;
        let norms = self.log_norms();
        let k = self.components();
        let parts: Vec<f64> = (0..x.len())
            .collect::<Vec<_>>()
            .par_chunks(CHUNK)
            .map(|rows| {
                let mut buf = vec![0.0; k];
                rows.iter()
                    .map(|&t| {
                        self.joint_log_densities(&norms, x.row(t), &mut buf);
                        log_sum_exp(&buf)
                    })
                    .sum::<f64>()
            })
            .collect();
        Ok(parts.iter().sum())
    }

    /// Responsibilities of every row, `[T, K]`, plus the total log-likelihood.
    pub fn posteriors(&self, x: &LocalDescriptorSet) -> Result<(Vec<f64>, f64)> {
        self.check_dim(x.dim())?;
        let norms = self.log_norms();
        let k = self.components();
        let mut gamma = vec![0.0f64; x.len() * k];
        let parts: Vec<f64> = gamma
            .par_chunks_mut(CHUNK * k)
            .enumerate()
            .map(|(c, block)| {
                let mut ll = 0.0;
                for (r, g) in block.chunks_mut(k).enumerate() {
                    self.joint_log_densities(&norms, x.row(c * CHUNK + r), g);
                    ll += normalize_log(g);
                }
                ll
            })
            .collect();
        Ok((gamma, parts.iter().sum()))
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Turns log-weights into a probability vector in place; returns their log-sum.
fn normalize_log(v: &mut [f64]) -> f64 {
    let lse = log_sum_exp(v);
    for x in v.iter_mut() {
        *x = (*x - lse).exp();
    }
    lse
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &m)| (x as f64 - m).powi(2)).sum()
}

fn nearest(x: &[f32], centers: &[f64], d: usize) -> (usize, f64) {
    centers
        .chunks(d)
        .enumerate()
        .map(|(i, c)| (i, sq_dist(x, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn global_variance(x: &LocalDescriptorSet, floor: f64) -> Vec<f64> {
    let d = x.dim();
    let n = x.len() as f64;
    let mut mean = vec![0.0; d];
    for t in 0..x.len() {
        for (m, &v) in mean.iter_mut().zip(x.row(t)) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for t in 0..x.len() {
        for ((s, &v), m) in var.iter_mut().zip(x.row(t)).zip(&mean) {
            *s += (v as f64 - m).powi(2);
        }
    }
    var.iter().map(|s| (s / n).max(floor)).collect()
}

/// k-means++ seeding followed by Lloyd iterations. Weights are cluster
/// fractions and variances the floored within-cluster variances.
pub fn kmeans_init(x: &LocalDescriptorSet, k: usize, seed: u64, variance_floor: f64) -> Result<GaussianMixture> {
    let t = x.len();
    let d = x.dim();
    if k == 0 {
        return Err(Error::invalid("k-means needs at least one cluster"));
    }
    if t < k {
        return Err(Error::invalid(format!("{t} descriptors cannot seed {k} components")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<f64> = Vec::with_capacity(k * d);
    let first = rng.random_range(0..t);
    centers.extend(x.row(first).iter().map(|&v| v as f64));
    let mut dist: Vec<f64> = (0..t).map(|r| sq_dist(x.row(r), &centers[..d])).collect();
    for _ in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = t - 1;
            for (r, &w) in dist.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    chosen = r;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..t)
        };
        let start = centers.len();
        centers.extend(x.row(pick).iter().map(|&v| v as f64));
        for (r, dr) in dist.iter_mut().enumerate() {
            *dr = dr.min(sq_dist(x.row(r), &centers[start..]));
        }
    }

    let mut assign = vec![0usize; t];
    for _ in 0..LLOYD_ITERS {
        assign
            .par_iter_mut()
            .enumerate()
            .for_each(|(r, a)| *a = nearest(x.row(r), &centers, d).0);
        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        for (r, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, &v) in sums[a * d..(a + 1) * d].iter_mut().zip(x.row(r)) {
                *s += v as f64;
            }
        }
        for i in 0..k {
            if counts[i] > 0 {
                for j in 0..d {
                    centers[i * d + j] = sums[i * d + j] / counts[i] as f64;
                }
            }
        }
    }
    assign
        .par_iter_mut()
        .enumerate()
        .for_each(|(r, a)| *a = nearest(x.row(r), &centers, d).0);

    let mut counts = vec![0usize; k];
    let mut sq = vec![0.0f64; k * d];
    for (r, &a) in assign.iter().enumerate() {
        counts[a] += 1;
        for ((s, &v), m) in sq[a * d..(a + 1) * d].iter_mut().zip(x.row(r)).zip(&centers[a * d..]) {
            *s += (v as f64 - m).powi(2);
        }
    }
    let fallback = global_variance(x, variance_floor);
    let mut variances = vec![0.0f64; k * d];
    for i in 0..k {
        for j in 0..d {
            variances[i * d + j] = if counts[i] > 1 {
                (sq[i * d + j] / counts[i] as f64).max(variance_floor)
            } else if counts[i] == 1 {
                variance_floor
            } else {
                fallback[j]
            };
        }
    }
    // Empty clusters keep a small positive weight so the mixture stays valid.
    let raw: Vec<f64> = counts.iter().map(|&c| (c as f64).max(0.5) / t as f64).collect();
    let total: f64 = raw.iter().sum();
    let weights = raw.iter().map(|w| w / total).collect();
    GaussianMixture::new(weights, centers, variances)
}

fn random_init(x: &LocalDescriptorSet, k: usize, seed: u64, variance_floor: f64) -> Result<GaussianMixture> {
    let t = x.len();
    if t < k {
        return Err(Error::invalid(format!("{t} descriptors cannot seed {k} components")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, t, k);
    let means = picks.iter().flat_map(|r| x.row(r).iter().map(|&v| v as f64)).collect();
    let var = global_variance(x, variance_floor);
    let variances = (0..k).flat_map(|_| var.iter().copied()).collect();
    GaussianMixture::new(vec![1.0 / k as f64; k], means, variances)
}

/// Result of [`fit_em`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    pub mixture: GaussianMixture,
    /// Log-likelihood of the initial parameters and after every M-step.
    pub loglik_history: Vec<f64>,
    pub converged: bool,
}

/// Fits a mixture to the descriptors by EM.
pub fn fit_em(x: &LocalDescriptorSet, config: &EmConfig) -> Result<EmFit> {
    config.validate()?;
    let k = config.components;
    let t = x.len();
    let d = x.dim();
    if t < k {
        return Err(Error::invalid(format!("{t} descriptors cannot fit {k} components")));
    }
    let mut gmm = match config.init {
        GmmInit::KMeans => kmeans_init(x, k, config.seed, config.variance_floor)?,
        GmmInit::Random => random_init(x, k, config.seed, config.variance_floor)?,
    };
    let mut reseed_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9E37_79B9));
    let (mut gamma, mut ll) = gmm.posteriors(x)?;
    let mut history = vec![ll];
    let mut converged = false;

    for iter in 0..config.max_iters {
        // M-step: weighted counts, then means, then centred second moments.
        let mut counts = vec![0.0f64; k];
        for g in gamma.chunks(k) {
            for (c, &v) in counts.iter_mut().zip(g) {
                *c += v;
            }
        }
        let mut means = vec![0.0f64; k * d];
        for (r, g) in gamma.chunks(k).enumerate() {
            let row = x.row(r);
            for i in 0..k {
                let gi = g[i];
                if gi == 0.0 {
                    continue;
                }
                for (m, &v) in means[i * d..(i + 1) * d].iter_mut().zip(row) {
                    *m += gi * v as f64;
                }
            }
        }
        let mut variances = vec![0.0f64; k * d];
        for i in 0..k {
            if counts[i] < 1e-10 {
                continue;
            }
            for m in &mut means[i * d..(i + 1) * d] {
                *m /= counts[i];
            }
        }
        for (r, g) in gamma.chunks(k).enumerate() {
            let row = x.row(r);
            for i in 0..k {
                let gi = g[i];
                if gi == 0.0 {
                    continue;
                }
                let mu = &means[i * d..(i + 1) * d];
                for ((s, &v), m) in variances[i * d..(i + 1) * d].iter_mut().zip(row).zip(mu) {
                    *s += gi * (v as f64 - m).powi(2);
                }
            }
        }
        let fallback = global_variance(x, config.variance_floor);
        for i in 0..k {
            if counts[i] < 1e-10 {
                let r = reseed_rng.random_range(0..t);
                log::warn!("EM iteration {iter}: component {i} is empty, reseeding at descriptor {r}");
                for j in 0..d {
                    means[i * d + j] = x.row(r)[j] as f64;
                    variances[i * d + j] = fallback[j];
                }
                counts[i] = 1.0;
                continue;
            }
            for v in &mut variances[i * d..(i + 1) * d] {
                *v = (*v / counts[i]).max(config.variance_floor);
            }
        }
        let total: f64 = counts.iter().sum();
        let weights = counts.iter().map(|c| c / total).collect();
        gmm = GaussianMixture::new(weights, means, variances)?;

        let (g, new_ll) = gmm.posteriors(x)?;
        if !new_ll.is_finite() {
            return Err(Error::Numeric(format!("EM log-likelihood diverged at iteration {iter}")));
        }
        gamma = g;
        history.push(new_ll);
        let rel = (new_ll - ll).abs() / ll.abs().max(f64::MIN_POSITIVE);
        ll = new_ll;
        if rel < config.tol {
            converged = true;
            break;
        }
    }
    Ok(EmFit { mixture: gmm, loglik_history: history, converged })
}
