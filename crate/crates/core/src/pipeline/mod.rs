//! End-to-end orchestration: per round, pretrain the autoencoder, fit the
//! descriptor reduction and the mixture on training images, encode every
//! image, train the classifier and score the test side.

pub mod config;
pub mod dataset;
pub mod metrics;
pub mod splits;
pub mod synthetic;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autoencoder::{AutoencoderConfig, AutoencoderModel};
use crate::classifier::{train_ovr, LinearSvmModel, PhiVector, SvmConfig};
use crate::error::{Error, Result};
use crate::features::{builtin_tap_maps, fc_vector, read_feature_file, BackboneOutputs, DescriptorReducer, LocalDescriptorSet};
use crate::fisher::{encode, fuse, power_normalize, FusedDescriptor, SegmentKind, Variant};
use crate::gmm::{fit_em, EmConfig, GaussianMixture};
use crate::io::Bundle;
use crate::tensor::{reflect_pad, Tensor};

pub use config::{Backbone, PipelineConfig};
pub use dataset::{load_dataset, ColorMode, Dataset, DatasetSpec, ImageRecord, ResizeMode};
pub use metrics::{compute_metrics, EvalReport, MeanStd, RoundMetrics};
pub use splits::{make_splits, Split, SplitKind, SplitProtocol};

/// Stages that fit parameters to data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Pretrain,
    Reduction,
    Mixture,
    Classifier,
}

/// Sees which images every fitting stage consumes.
pub trait PipelineObserver: Sync {
    fn consumed(&self, round: usize, stage: Stage, indices: &[usize]);
}

pub struct NoObserver;

impl PipelineObserver for NoObserver {
    fn consumed(&self, _: usize, _: Stage, _: &[usize]) {}
}

/// Seed of a stage in a given round; round 0 uses the configured seed as is.
pub fn round_seed(seed: u64, round: usize) -> u64 {
    seed.wrapping_add((round as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Reflect-pads an image so the autoencoder can pool it `levels` times.
pub fn prepare_image(image: &Tensor, levels: usize) -> Result<Tensor> {
    reflect_pad(image, 1 << levels)
}

/// Trains a fresh autoencoder on the given images.
pub fn pretrain(dataset: &Dataset, indices: &[usize], config: &AutoencoderConfig) -> Result<AutoencoderModel> {
    let images = indices
        .iter()
        .map(|&i| prepare_image(&dataset.records[i].image, config.levels))
        .collect::<Result<Vec<_>>>()?;
    let mut model = AutoencoderModel::new(config.clone())?;
    let report = model.train(&images)?;
    log::info!(
        "autoencoder trained on {} images, loss {:.5} -> {:.5}",
        images.len(),
        report.loss_history.first().copied().unwrap_or(f64::NAN),
        report.loss_history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(model)
}

/// Everything the backbone produces for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    pub maps: Vec<(u32, Tensor)>,
    pub ssl: Option<Vec<f32>>,
    pub fc: Option<Vec<f32>>,
}

/// Location of the external feature file of a dataset image.
pub fn feature_path(dir: &Path, relative: &str) -> PathBuf {
    dir.join(relative).with_extension("tfv")
}

/// Runs the backbone over every image of the dataset.
pub fn extract_features(config: &PipelineConfig, dataset: &Dataset, model: Option<&AutoencoderModel>) -> Result<Vec<ImageFeatures>> {
    let taps = &config.taps.taps;
    dataset
        .records
        .par_iter()
        .map(|rec| {
            let padded = match model {
                Some(m) => Some(prepare_image(&rec.image, m.config.levels)?),
                None => None,
            };
            let ssl = match (model, &padded) {
                (Some(m), Some(img)) => Some(m.ssl_vector(img)?),
                _ => None,
            };
            match &config.backbone {
                Backbone::Builtin => {
                    let m = model.ok_or_else(|| Error::invalid("builtin backbone needs a trained autoencoder"))?;
                    let img = padded.as_ref().expect("padded with the model");
                    let maps = builtin_tap_maps(m, img, taps)?;
                    let ssl = ssl.expect("computed with the model");
                    let fc = fc_vector(&BackboneOutputs::Builtin { ssl: ssl.clone(), supervised_head: None })?;
                    Ok(ImageFeatures { maps, ssl: Some(ssl), fc: Some(fc) })
                }
                Backbone::External { dir } => {
                    let file = read_feature_file(feature_path(dir, &rec.path))?;
                    Ok(ImageFeatures { maps: file.maps, ssl, fc: file.fc })
                }
            }
        })
        .collect()
}

pub fn fit_reducer(config: &PipelineConfig, features: &[ImageFeatures], train: &[usize]) -> Result<DescriptorReducer> {
    let maps: Vec<Vec<(u32, Tensor)>> = train.iter().map(|&i| features[i].maps.clone()).collect();
    DescriptorReducer::fit(&config.taps, &maps)
}

pub fn describe(reducer: &DescriptorReducer, features: &[ImageFeatures]) -> Result<Vec<LocalDescriptorSet>> {
    features.par_iter().map(|f| reducer.apply(&f.maps)).collect()
}

/// Fits the mixture on the pooled descriptors of the training images,
/// subsampled uniformly when there are more than `max_descriptors`.
pub fn fit_mixture(
    em: &EmConfig,
    max_descriptors: usize,
    descriptors: &[LocalDescriptorSet],
    train: &[usize],
) -> Result<GaussianMixture> {
    let pooled = LocalDescriptorSet::concat(train.iter().map(|&i| &descriptors[i]))?;
    let pooled = if max_descriptors > 0 && pooled.len() > max_descriptors {
        let mut rng = ChaCha8Rng::seed_from_u64(em.seed ^ 0xD1B5_4A32_D192_ED03);
        let mut pick = rand::seq::index::sample(&mut rng, pooled.len(), max_descriptors).into_vec();
        pick.sort_unstable();
        let d = pooled.dim();
        let mut data = Vec::with_capacity(pick.len() * d);
        for &r in &pick {
            data.extend_from_slice(pooled.row(r));
        }
        let taps = pick.iter().map(|&r| pooled.taps()[r]).collect();
        LocalDescriptorSet::new(Tensor::new(vec![pick.len(), d], data)?, taps)?
    } else {
        pooled
    };
    let fit = fit_em(&pooled, em)?;
    log::info!(
        "mixture fitted on {} descriptors, log-likelihood {:.4}{}",
        pooled.len(),
        fit.loglik_history.last().copied().unwrap_or(f64::NAN),
        if fit.converged { "" } else { " (iteration cap reached)" }
    );
    Ok(fit.mixture)
}

/// Normalised Fisher Vector of every image, fused with the global vectors
/// the variant asks for.
pub fn encode_images(
    variant: Variant,
    gmm: &GaussianMixture,
    descriptors: &[LocalDescriptorSet],
    features: &[ImageFeatures],
) -> Result<Vec<FusedDescriptor>> {
    descriptors
        .par_iter()
        .zip(features)
        .map(|(x, f)| {
            let fv = encode(gmm, x)?.normalized();
            fuse(&fv, f.ssl.as_deref(), f.fc.as_deref(), variant)
        })
        .collect()
}

/// Maps a fused descriptor into the linear feature space of the
/// Bhattacharyya kernel. The FV segment is already power-normalised, so only
/// the FC and SSL segments are transformed.
pub fn to_phi(fused: &FusedDescriptor) -> PhiVector {
    let mut values = fused.values.clone();
    for seg in &fused.segments {
        if seg.kind != SegmentKind::Fv {
            let range = seg.offset..seg.offset + seg.len;
            let mapped = power_normalize(&values[range.clone()]);
            values[range].copy_from_slice(&mapped);
        }
    }
    PhiVector::from_mapped(values)
}

pub fn train_classifier(config: &SvmConfig, phis: &[PhiVector], labels: &[u32], train: &[usize]) -> Result<LinearSvmModel> {
    let x: Vec<PhiVector> = train.iter().map(|&i| phis[i].clone()).collect();
    let y: Vec<u32> = train.iter().map(|&i| labels[i]).collect();
    train_ovr(&x, &y, config)
}

pub fn predict_all(model: &LinearSvmModel, phis: &[PhiVector], indices: &[usize]) -> Result<Vec<u32>> {
    indices.iter().map(|&i| model.predict(&phis[i]).map(|(l, _)| l)).collect()
}

/// Per-round copy of the configuration with decorrelated stage seeds.
pub fn round_config(config: &PipelineConfig, round: usize) -> PipelineConfig {
    let mut c = config.clone();
    c.autoencoder.seed = round_seed(config.autoencoder.seed, round);
    c.em.seed = round_seed(config.em.seed, round);
    c.svm.seed = round_seed(config.svm.seed, round);
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub metrics: RoundMetrics,
    pub descriptor_len: usize,
    pub bundle: Bundle,
}

pub fn run_round(
    config: &PipelineConfig,
    dataset: &Dataset,
    split: &Split,
    round: usize,
    observer: &dyn PipelineObserver,
) -> Result<RoundOutcome> {
    let cfg = round_config(config, round);
    let autoencoder = if cfg.needs_autoencoder() {
        let pool: Vec<usize> = if cfg.transductive { (0..dataset.len()).collect() } else { split.train.clone() };
        observer.consumed(round, Stage::Pretrain, &pool);
        Some(pretrain(dataset, &pool, &cfg.autoencoder)?)
    } else {
        None
    };
    let features = extract_features(&cfg, dataset, autoencoder.as_ref())?;
    observer.consumed(round, Stage::Reduction, &split.train);
    let reducer = fit_reducer(&cfg, &features, &split.train)?;
    let descriptors = describe(&reducer, &features)?;
    observer.consumed(round, Stage::Mixture, &split.train);
    let gmm = fit_mixture(&cfg.em, cfg.gmm_max_descriptors, &descriptors, &split.train)?;
    let fused = encode_images(cfg.variant, &gmm, &descriptors, &features)?;
    let phis: Vec<PhiVector> = fused.iter().map(to_phi).collect();
    let labels = dataset.labels();
    observer.consumed(round, Stage::Classifier, &split.train);
    let svm = train_classifier(&cfg.svm, &phis, &labels, &split.train)?;
    let predicted = predict_all(&svm, &phis, &split.test)?;
    let truth: Vec<u32> = split.test.iter().map(|&i| labels[i]).collect();
    let metrics = compute_metrics(&truth, &predicted, dataset.class_names.len())?;
    log::info!("round {}: accuracy {:.4}", round + 1, metrics.accuracy);
    Ok(RoundOutcome {
        metrics,
        descriptor_len: fused.first().map_or(0, FusedDescriptor::len),
        bundle: Bundle {
            autoencoder,
            reducer: Some(reducer),
            gmm: Some(gmm),
            svm: Some(svm),
            variant: Some(cfg.variant),
            class_names: dataset.class_names.clone(),
        },
    })
}

/// Runs every round of the protocol on an already loaded dataset. Returns
/// the report and the models of the first round.
pub fn run_on_dataset(config: &PipelineConfig, dataset: &Dataset, observer: &dyn PipelineObserver) -> Result<(EvalReport, Bundle)> {
    config.validate()?;
    let splits = make_splits(dataset, &config.protocol)?;
    let outcomes: Vec<RoundOutcome> = splits
        .par_iter()
        .enumerate()
        .map(|(r, s)| run_round(config, dataset, s, r, observer).map_err(|e| e.in_round(r + 1)))
        .collect::<Result<_>>()?;
    let descriptor_len = outcomes.first().map_or(0, |o| o.descriptor_len);
    let mut outcomes = outcomes.into_iter();
    let first = outcomes.next().expect("at least one round");
    let bundle = first.bundle;
    let rounds = std::iter::once(first.metrics).chain(outcomes.map(|o| o.metrics)).collect();
    Ok((EvalReport::new(config.variant, dataset.class_names.clone(), descriptor_len, rounds), bundle))
}

/// Loads the configured dataset and evaluates it.
pub fn run_pipeline(config: &PipelineConfig) -> Result<EvalReport> {
    config.validate()?;
    let dataset = load_dataset(&config.dataset)?;
    Ok(run_on_dataset(config, &dataset, &NoObserver)?.0)
}
