//! One-vs-rest linear SVM over the explicit Bhattacharyya feature map.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Image of a vector under `x ↦ sign(x)·√|x|`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiVector {
    pub values: Vec<f64>,
}

impl PhiVector {
    /// Wraps values that are already in feature-map space.
    pub fn from_mapped(values: Vec<f64>) -> Self {
        PhiVector { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dot(&self, other: &PhiVector) -> f64 {
        dot(&self.values, &other.values)
    }
}

pub fn phi_transform(x: &[f64]) -> PhiVector {
    PhiVector { values: crate::fisher::power_normalize(x) }
}

/// `Σ sign(x_i y_i) √|x_i y_i|`.
pub fn bhattacharyya(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("vector lengths differ: {} and {}", x.len(), y.len())));
    }
    Ok(x.iter().zip(y).map(|(&a, &b)| (a * b).signum() * (a * b).abs().sqrt()).sum())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmConfig {
    pub c: f64,
    /// Stop once the largest projected-gradient magnitude of an epoch falls below this.
    pub tol: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig { c: 1.0, tol: 1e-4, max_epochs: 1000, seed: 0 }
    }
}

impl SvmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) || !self.c.is_finite() {
            return Err(Error::invalid(format!("C must be positive, got {}", self.c)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("SVM tolerance must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::invalid("SVM needs at least one epoch"));
        }
        Ok(())
    }
}

/// One `(w, b)` pair per class. Parameters are kept in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvmModel {
    pub classes: Vec<u32>,
    /// `[classes, dim]`, row-major.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub c: f64,
}

impl LinearSvmModel {
    pub fn new(classes: Vec<u32>, weights: Vec<f64>, biases: Vec<f64>, c: f64) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::invalid("an SVM model needs at least two classes"));
        }
        if biases.len() != classes.len() || weights.len() % classes.len() != 0 {
            return Err(Error::invalid("weights and biases do not match the class count"));
        }
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("SVM parameters are not finite".into()));
        }
        Ok(LinearSvmModel { classes, weights, biases, c })
    }

    pub fn dim(&self) -> usize {
        self.weights.len() / self.classes.len()
    }

    pub fn weight(&self, class_index: usize) -> &[f64] {
        let d = self.dim();
        &self.weights[class_index * d..(class_index + 1) * d]
    }

    /// `w_c·x + b_c` for every class.
    pub fn scores(&self, x: &PhiVector) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!("model has dimension {}, input has {}", self.dim(), x.len())));
        }
        Ok((0..self.classes.len()).map(|c| dot(self.weight(c), &x.values) + self.biases[c]).collect())
    }

    /// Highest-scoring class; ties go to the smallest class index.
    pub fn predict(&self, x: &PhiVector) -> Result<(u32, Vec<f64>)> {
        let scores = self.scores(x)?;
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        Ok((self.classes[best], scores))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub epochs: usize,
    pub violation: f64,
    pub converged: bool,
}

/// Dual coordinate descent for the L1-loss SVM
/// `min ½(‖w‖² + b²) + C Σ max(0, 1 − y_i(w·x_i + b))`.
///
/// The bias is an extra feature fixed at 1 and is regularised with `w`.
pub fn train_binary(features: &[PhiVector], y: &[f64], config: &SvmConfig, seed: u64) -> Result<BinaryFit> {
    config.validate()?;
    let n = features.len();
    if n == 0 || y.len() != n {
        return Err(Error::invalid("binary SVM needs matching non-empty features and targets"));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::invalid("feature vectors have different lengths"));
    }
    let q: Vec<f64> = features.iter().map(|f| f.dot(f) + 1.0).collect();
    let mut alpha = vec![0.0f64; n];
    let mut w = vec![0.0f64; d];
    let mut b = 0.0f64;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violation = f64::INFINITY;
    let mut epochs = 0;
    while epochs < config.max_epochs {
        epochs += 1;
        order.shuffle(&mut rng);
        violation = 0.0;
        for &i in &order {
            let x = &features[i].values;
            let g = y[i] * (dot(&w, x) + b) - 1.0;
            let pg = if alpha[i] <= 0.0 {
                g.min(0.0)
            } else if alpha[i] >= config.c {
                g.max(0.0)
            } else {
                g
            };
            violation = f64::max(violation, pg.abs());
            if pg.abs() > 1e-15 {
                let old = alpha[i];
                alpha[i] = (old - g / q[i]).clamp(0.0, config.c);
                let delta = (alpha[i] - old) * y[i];
                for (wj, xj) in w.iter_mut().zip(x) {
                    *wj += delta * xj;
                }
                b += delta;
            }
        }
        if violation < config.tol {
            break;
        }
    }
    let converged = violation < config.tol;
    if !converged {
        log::warn!("SVM stopped after {epochs} epochs with violation {violation:.3e}");
    }
    if w.iter().any(|v| !v.is_finite()) || !b.is_finite() {
        return Err(Error::Numeric("SVM weights are not finite".into()));
    }
    Ok(BinaryFit { weights: w, bias: b, epochs, violation, converged })
}

/// Primal objective `½(‖w‖² + b²) + C Σ hinge`.
pub fn primal_objective(features: &[PhiVector], y: &[f64], w: &[f64], b: f64, c: f64) -> f64 {
    let reg = 0.5 * (dot(w, w) + b * b);
    let loss: f64 = features.iter().zip(y).map(|(f, &yi)| (1.0 - yi * (dot(w, &f.values) + b)).max(0.0)).sum();
    reg + c * loss
}

/// Fits one binary SVM per class (class vs. rest). Classes are the sorted
/// distinct labels.
pub fn train_ovr(features: &[PhiVector], labels: &[u32], config: &SvmConfig) -> Result<LinearSvmModel> {
    config.validate()?;
    if features.len() != labels.len() {
        return Err(Error::invalid(format!("{} features but {} labels", features.len(), labels.len())));
    }
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::invalid("one-vs-rest training needs at least two classes"));
    }
    let fits: Vec<Result<BinaryFit>> = classes
        .par_iter()
        .enumerate()
        .map(|(ci, &class)| {
            let y: Vec<f64> = labels.iter().map(|&l| if l == class { 1.0 } else { -1.0 }).collect();
            let seed = config.seed.wrapping_add((ci as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            train_binary(features, &y, config, seed)
        })
        .collect();
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for fit in fits {
        let fit = fit?;
        weights.extend(fit.weights);
        biases.push(fit.bias);
    }
    LinearSvmModel::new(classes, weights, biases, config.c)
}
