//! Local descriptor harvesting from convolutional feature maps.
//!
//! Every spatial position of a `[C, H, W]` map yields one `C`-dimensional
//! descriptor. Maps come from "taps", identified by depth: tap 0 is the
//! deepest stage of the backbone, tap 1 the one before it, and so on.

mod pca;

pub use pca::{fit_pca, PcaModel};

use std::path::Path;

use crate::autoencoder::AutoencoderModel;
use crate::error::{Error, Result};
use crate::io::tfv::{self, Record};
use crate::tensor::Tensor;

/// Tap id under which feature files store the pre-classifier (FC) vector.
pub const FC_TAP: u32 = u32::MAX;

/// Channel reduction applied to taps wider than the target dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Pca,
    AvgPool,
    MaxPool,
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pca" => Ok(Reduction::Pca),
            "avgpool" | "avg" => Ok(Reduction::AvgPool),
            "maxpool" | "max" => Ok(Reduction::MaxPool),
            other => Err(Error::Config(format!("unknown reduction '{other}'"))),
        }
    }
}

/// Which taps feed the descriptor set and how they are brought to a common
/// dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct TapConfig {
    /// Tap ids, deepest first.
    pub taps: Vec<u32>,
    pub reduction: Reduction,
    pub target_dim: usize,
}

impl Default for TapConfig {
    fn default() -> Self {
        TapConfig::deepest(2, Reduction::Pca, 64)
    }
}

impl TapConfig {
    /// The `layers` deepest taps.
    pub fn deepest(layers: usize, reduction: Reduction, target_dim: usize) -> Self {
        TapConfig {
            taps: (0..layers as u32).collect(),
            reduction,
            target_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.taps.is_empty() {
            return Err(Error::invalid("at least one tap is required"));
        }
        if self.target_dim == 0 {
            return Err(Error::invalid("target dimension must be positive"));
        }
        Ok(())
    }

    /// Checks the target dimension against the channel count of every tap.
    pub fn check_channels(&self, channels: &[usize]) -> Result<()> {
        let min = channels.iter().copied().min().unwrap_or(0);
        if self.target_dim > min {
            return Err(Error::invalid(format!(
                "target dimension {} exceeds the narrowest tap ({min} channels)",
                self.target_dim
            )));
        }
        Ok(())
    }
}

/// The aggregated descriptors of one image: a `[T, D]` matrix plus the tap
/// each row came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDescriptorSet {
    rows: Tensor,
    taps: Vec<u32>,
}

impl LocalDescriptorSet {
    pub fn new(rows: Tensor, taps: Vec<u32>) -> Result<Self> {
        let (t, _) = rows.rows_cols()?;
        if taps.len() != t {
            return Err(Error::invalid(format!("{} provenance tags for {t} rows", taps.len())));
        }
        if !rows.is_finite() {
            return Err(Error::Numeric("descriptor set contains non-finite values".into()));
        }
        Ok(LocalDescriptorSet { rows, taps })
    }

    /// Builds a single-tap set from row vectors of equal length.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("rows have different lengths"));
        }
        let data = rows.iter().flatten().copied().collect();
        LocalDescriptorSet::new(Tensor::new(vec![rows.len(), d], data)?, vec![0; rows.len()])
    }

    pub fn len(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.rows.row(i)
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn taps(&self) -> &[u32] {
        &self.taps
    }

    /// Concatenates several sets, for instance the training descriptors of
    /// many images.
    pub fn concat<'a>(sets: impl IntoIterator<Item = &'a LocalDescriptorSet>) -> Result<Self> {
        let mut data = Vec::new();
        let mut taps = Vec::new();
        let mut dim = None;
        for s in sets {
            match dim {
                None => dim = Some(s.dim()),
                Some(d) if d != s.dim() => {
                    return Err(Error::invalid(format!("cannot mix dimensions {d} and {}", s.dim())))
                }
                _ => {}
            }
            data.extend_from_slice(s.rows.data());
            taps.extend_from_slice(&s.taps);
        }
        let d = dim.unwrap_or(0);
        LocalDescriptorSet::new(Tensor::new(vec![taps.len(), d], data)?, taps)
    }
}

/// One descriptor per spatial position: row `h·W + w` is the channel vector
/// at `(h, w)`.
pub fn map_to_descriptors(map: &Tensor) -> Result<Tensor> {
    let (c, h, w) = map.chw()?;
    let d = map.data();
    let hw = h * w;
    let mut out = vec![0.0f32; hw * c];
    for ch in 0..c {
        let plane = &d[ch * hw..(ch + 1) * hw];
        for (pos, &v) in plane.iter().enumerate() {
            out[pos * c + ch] = v;
        }
    }
    Tensor::new(vec![hw, c], out)
}

/// Inverse of [`map_to_descriptors`].
pub fn descriptors_to_map(rows: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (t, c) = rows.rows_cols()?;
    if t != h * w {
        return Err(Error::dim("rows", format!("{t} rows cannot fill a {h}x{w} map")));
    }
    let mut out = vec![0.0f32; t * c];
    for pos in 0..t {
        for (ch, &v) in rows.row(pos).iter().enumerate() {
            out[ch * t + pos] = v;
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Brings `[T, D_in]` rows to `[T, dim]`.
///
/// PCA projects with a fitted model; average and max pooling reduce
/// contiguous channel groups of size `D_in / dim`.
pub fn reduce(rows: &Tensor, method: Reduction, dim: usize, pca: Option<&PcaModel>) -> Result<Tensor> {
    let (t, d_in) = rows.rows_cols()?;
    match method {
        Reduction::Pca => {
            let pca = pca.ok_or_else(|| Error::invalid("PCA reduction needs a fitted model"))?;
            if pca.output_dim() != dim {
                return Err(Error::invalid(format!(
                    "PCA model has {} components, {dim} requested",
                    pca.output_dim()
                )));
            }
            pca.project(rows)
        }
        Reduction::AvgPool | Reduction::MaxPool => {
            if dim == 0 || d_in % dim != 0 {
                return Err(Error::invalid(format!("pooling needs {dim} to divide {d_in}")));
            }
            let group = d_in / dim;
            let mut out = Vec::with_capacity(t * dim);
            for r in 0..t {
                for g in rows.row(r).chunks(group) {
                    out.push(match method {
                        Reduction::AvgPool => (g.iter().map(|&v| v as f64).sum::<f64>() / group as f64) as f32,
                        _ => g.iter().copied().fold(f32::NEG_INFINITY, f32::max),
                    });
                }
            }
            Tensor::new(vec![t, dim], out)
        }
    }
}

/// Stacks per-tap descriptor matrices, preserving tap order.
pub fn aggregate(tap_outputs: &[(u32, Tensor)]) -> Result<LocalDescriptorSet> {
    let Some((_, first)) = tap_outputs.first() else {
        return Err(Error::invalid("no tap outputs to aggregate"));
    };
    let (_, d) = first.rows_cols()?;
    let mut data = Vec::new();
    let mut taps = Vec::new();
    for (tap, m) in tap_outputs {
        let (t, dm) = m.rows_cols()?;
        if dm != d {
            return Err(Error::invalid(format!("tap {tap} has dimension {dm}, expected {d}")));
        }
        data.extend_from_slice(m.data());
        taps.extend(std::iter::repeat_n(*tap, t));
    }
    LocalDescriptorSet::new(Tensor::new(vec![taps.len(), d], data)?, taps)
}

/// Maps of the requested taps from the autoencoder's encoder: tap 0 is the
/// bottleneck `B`, tap `t ≥ 1` is encoder output `E_{J-t+1}`.
pub fn builtin_tap_maps(model: &AutoencoderModel, image: &Tensor, taps: &[u32]) -> Result<Vec<(u32, Tensor)>> {
    let (enc, b) = model.encode(image)?;
    let j = enc.len();
    taps.iter()
        .map(|&t| match t as usize {
            0 => Ok((t, b.clone())),
            depth if depth <= j => Ok((t, enc[j - depth].clone())),
            _ => Err(Error::invalid(format!("tap {t} is deeper than the {j}-level encoder"))),
        })
        .collect()
}

/// What a backbone exposes besides its feature maps.
#[derive(Debug, Clone, PartialEq)]
pub enum BackboneOutputs {
    /// The pretrained autoencoder. It has no supervised head, so its FC vector
    /// falls back to the pooled bottleneck.
    Builtin { ssl: Vec<f32>, supervised_head: Option<Vec<f32>> },
    /// Precomputed features read from a TFV1 file.
    External { fc: Option<Vec<f32>> },
}

/// The pre-classifier feature vector of a backbone.
pub fn fc_vector(outputs: &BackboneOutputs) -> Result<Vec<f32>> {
    match outputs {
        BackboneOutputs::Builtin { supervised_head: Some(v), .. } => Ok(v.clone()),
        BackboneOutputs::Builtin { ssl, .. } => Ok(ssl.clone()),
        BackboneOutputs::External { fc: Some(v) } => Ok(v.clone()),
        BackboneOutputs::External { fc: None } => {
            Err(Error::Unsupported("feature file carries no FC vector".into()))
        }
    }
}

/// Contents of an external feature file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub maps: Vec<(u32, Tensor)>,
    pub fc: Option<Vec<f32>>,
}

impl FeatureFile {
    pub fn from_records(records: Vec<Record>) -> Result<Self> {
        let mut maps = Vec::new();
        let mut fc = None;
        for r in records {
            match (r.tap, r.array.rank()) {
                (FC_TAP, 1) => fc = Some(r.array.into_data()),
                (FC_TAP, rank) => {
                    return Err(Error::invalid(format!("FC record must be a vector, got rank {rank}")))
                }
                (tap, 3) => maps.push((tap, r.array)),
                (tap, rank) => {
                    return Err(Error::invalid(format!("tap {tap} must be a [C, H, W] map, got rank {rank}")))
                }
            }
        }
        if maps.is_empty() {
            return Err(Error::invalid("feature file contains no feature maps"));
        }
        Ok(FeatureFile { maps, fc })
    }

    pub fn to_records(&self) -> Vec<Record> {
        let mut out: Vec<Record> = self.maps.iter().map(|(t, m)| Record::new(*t, m.clone())).collect();
        if let Some(fc) = &self.fc {
            out.push(Record::new(FC_TAP, Tensor::from_vec(fc.clone())));
        }
        out
    }

    /// Map of a given tap.
    pub fn tap(&self, tap: u32) -> Result<&Tensor> {
        self.maps
            .iter()
            .find(|(t, _)| *t == tap)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::invalid(format!("feature file has no tap {tap}")))
    }
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureFile> {
    FeatureFile::from_records(tfv::read_file(path)?)
}

pub fn write_feature_file(path: impl AsRef<Path>, file: &FeatureFile) -> Result<()> {
    tfv::write_file(path, &file.to_records())
}

/// Feature maps of an external file, keyed by tap id.
pub fn ingest_feature_file(path: impl AsRef<Path>) -> Result<Vec<(u32, Tensor)>> {
    Ok(read_feature_file(path)?.maps)
}

/// Fitted per-tap reduction turning raw tap maps into descriptor sets.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorReducer {
    pub config: TapConfig,
    /// PCA models for the taps that need one.
    pub pcas: Vec<(u32, PcaModel)>,
}

impl DescriptorReducer {
    /// Fits PCA (when configured) on the pooled descriptors of the given
    /// training images. Only taps wider than the target dimension are reduced.
    pub fn fit(config: &TapConfig, train_maps: &[Vec<(u32, Tensor)>]) -> Result<Self> {
        config.validate()?;
        let first = train_maps.first().ok_or_else(|| Error::invalid("no training maps"))?;
        let channels = config
            .taps
            .iter()
            .map(|&t| {
                first
                    .iter()
                    .find(|(id, _)| *id == t)
                    .map(|(_, m)| m.shape()[0])
                    .ok_or_else(|| Error::invalid(format!("tap {t} missing from feature maps")))
            })
            .collect::<Result<Vec<_>>>()?;
        config.check_channels(&channels)?;
        let mut pcas = Vec::new();
        if config.reduction == Reduction::Pca {
            for (&tap, &ch) in config.taps.iter().zip(&channels) {
                if ch <= config.target_dim {
                    continue;
                }
                let mut data = Vec::new();
                let mut rows = 0;
                for maps in train_maps {
                    let m = find_tap(maps, tap)?;
                    let d = map_to_descriptors(m)?;
                    rows += d.shape()[0];
                    data.extend_from_slice(d.data());
                }
                let pooled = Tensor::new(vec![rows, ch], data)?;
                pcas.push((tap, fit_pca(&pooled, config.target_dim)?));
            }
        }
        Ok(DescriptorReducer { config: config.clone(), pcas })
    }

    /// Descriptor set of one image.
    pub fn apply(&self, maps: &[(u32, Tensor)]) -> Result<LocalDescriptorSet> {
        let mut outs = Vec::with_capacity(self.config.taps.len());
        for &tap in &self.config.taps {
            let rows = map_to_descriptors(find_tap(maps, tap)?)?;
            let ch = rows.shape()[1];
            let reduced = if ch > self.config.target_dim {
                let pca = self.pcas.iter().find(|(t, _)| *t == tap).map(|(_, p)| p);
                reduce(&rows, self.config.reduction, self.config.target_dim, pca)?
            } else if ch == self.config.target_dim {
                rows
            } else {
                return Err(Error::invalid(format!(
                    "tap {tap} has {ch} channels, fewer than the target {}",
                    self.config.target_dim
                )));
            };
            outs.push((tap, reduced));
        }
        aggregate(&outs)
    }
}

fn find_tap(maps: &[(u32, Tensor)], tap: u32) -> Result<&Tensor> {
    maps.iter()
        .find(|(t, _)| *t == tap)
        .map(|(_, m)| m)
        .ok_or_else(|| Error::invalid(format!("tap {tap} missing from feature maps")))
}
