use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::AutoencoderModel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adds i.i.d. Gaussian noise of standard deviation `sigma` and clips to `[0, 1]`.
pub fn add_noise(image: &Tensor, sigma: f32, seed: u64) -> Result<Tensor> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("noise sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let normal = Normal::new(0.0f32, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = image.clone();
    for v in out.data_mut() {
        *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Mixes the run seed with epoch and sample indices into an independent stream.
fn noise_seed(seed: u64, epoch: usize, sample: usize) -> u64 {
    let mut z = seed
        ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (sample as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean per-image reconstruction loss of every epoch.
    pub loss_history: Vec<f64>,
}

impl AutoencoderModel {
    /// Minibatch SGD on the reconstruction loss.
    ///
    /// With `denoising` set, each input is a freshly noised copy of the image
    /// and the clean image is the target. Per-sample gradients are computed in
    /// parallel and summed in sample order, so results do not depend on the
    /// thread count.
    pub fn train(&mut self, images: &[Tensor]) -> Result<TrainReport> {
        if images.is_empty() {
            return Err(Error::invalid("cannot train on an empty image set"));
        }
        for img in images {
            self.check_input(img)?;
        }
        let cfg = self.config.clone();
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5DEE_CE66_D);
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut history = Vec::with_capacity(cfg.epochs);

        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0f64;
            for batch in order.chunks(cfg.batch_size) {
                let model = &*self;
                let results: Vec<Result<(f64, AutoencoderModel)>> = batch
                    .par_iter()
                    .map(|&idx| {
                        let target = &images[idx];
                        if cfg.denoising {
                            let noisy = add_noise(target, cfg.noise_sigma, noise_seed(cfg.seed, epoch, idx))?;
                            model.loss_and_gradients(&noisy, target)
                        } else {
                            model.loss_and_gradients(target, target)
                        }
                    })
                    .collect();
                let mut sum: Option<AutoencoderModel> = None;
                for r in results {
                    let (loss, grads) = r?;
                    if !loss.is_finite() {
                        return Err(Error::Numeric(format!("non-finite loss in epoch {epoch}")));
                    }
                    epoch_loss += loss;
                    match sum.as_mut() {
                        None => sum = Some(grads),
                        Some(acc) => {
                            for (a, g) in acc.params_mut().into_iter().zip(grads.params()) {
                                a.axpy(1.0, g)?;
                            }
                        }
                    }
                }
                let step = -cfg.learning_rate / batch.len() as f32;
                if step != 0.0 {
                    let sum = sum.expect("non-empty batch");
                    for (p, g) in self.params_mut().into_iter().zip(sum.params()) {
                        p.axpy(step, g)?;
                    }
                }
            }
            let mean = epoch_loss / images.len() as f64;
            if !mean.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss in epoch {epoch}")));
            }
            log::debug!("autoencoder epoch {epoch}: loss {mean:.6}");
            history.push(mean);
        }
        if self.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("autoencoder weights diverged".into()));
        }
        Ok(TrainReport { loss_history: history })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::AutoencoderConfig;
    use rand::Rng;

    fn images(n: usize, size: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let f: f32 = rng.random_range(0.2..0.8);
                let data = (0..size * size)
                    .map(|i| 0.5 + 0.4 * ((i % size) as f32 * f).sin())
                    .collect();
                Tensor::new(vec![1, size, size], data).unwrap()
            })
            .collect()
    }

    fn cfg() -> AutoencoderConfig {
        AutoencoderConfig {
            in_channels: 1,
            levels: 1,
            base_channels: 4,
            epochs: 3,
            batch_size: 2,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn noise_zero_sigma_is_identity() {
        let x = images(1, 8, 0).remove(0);
        assert_eq!(add_noise(&x, 0.0, 1).unwrap(), x);
        assert!(add_noise(&x, -0.1, 1).is_err());
    }

    #[test]
    fn noise_is_deterministic_and_clipped() {
        let x = images(1, 8, 0).remove(0);
        let a = add_noise(&x, 0.1, 5).unwrap();
        assert_eq!(a, add_noise(&x, 0.1, 5).unwrap());
        assert_ne!(a, add_noise(&x, 0.1, 6).unwrap());
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn noise_has_requested_std() {
        let x = Tensor::full(&[1, 64, 64], 0.5);
        let y = add_noise(&x, 0.1, 3).unwrap();
        let diffs: Vec<f64> = y
            .data()
            .iter()
            .zip(x.data())
            .map(|(&a, &b)| (a - b) as f64)
            .filter(|d| d.abs() < 0.5)
            .collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64;
        assert!((var.sqrt() - 0.1).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut m = AutoencoderModel::new(cfg()).unwrap();
        assert!(matches!(m.train(&[]), Err(Error::Validation(_))));
    }

    #[test]
    fn zero_learning_rate_freezes_weights() {
        let mut m = AutoencoderModel::new(AutoencoderConfig { learning_rate: 0.0, ..cfg() }).unwrap();
        let before = m.clone();
        let report = m.train(&images(4, 8, 1)).unwrap();
        assert_eq!(m, before);
        assert!(report.loss_history.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn training_is_reproducible() {
        let data = images(5, 8, 2);
        for denoising in [false, true] {
            let c = AutoencoderConfig { denoising, ..cfg() };
            let mut a = AutoencoderModel::new(c.clone()).unwrap();
            let mut b = AutoencoderModel::new(c).unwrap();
            let ra = a.train(&data).unwrap();
            let rb = b.train(&data).unwrap();
            assert_eq!(ra, rb);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn diverging_training_reports_numeric_error() {
        let mut m = AutoencoderModel::new(AutoencoderConfig { learning_rate: 1e30, epochs: 5, ..cfg() }).unwrap();
        assert!(matches!(m.train(&images(4, 8, 3)), Err(Error::Numeric(_))));
    }
}
