//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments start with '#'
//! dataset.root = data/fmd
//! protocol.kind = half_random
//! gmm.k = 16
//! variant = fvae
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::autoencoder::AutoencoderConfig;
use crate::classifier::SvmConfig;
use crate::error::{Error, Result};
use crate::features::{Reduction, TapConfig};
use crate::fisher::Variant;
use crate::gmm::EmConfig;

use super::dataset::{ColorMode, DatasetSpec, ResizeMode};
use super::splits::{SplitKind, SplitProtocol};

/// Where local feature maps come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Backbone {
    /// Taps of the autoencoder trained inside the pipeline.
    Builtin,
    /// TFV1 files mirroring the dataset layout, one `.tfv` per image.
    External { dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub dataset: DatasetSpec,
    pub protocol: SplitProtocol,
    pub variant: Variant,
    pub backbone: Backbone,
    pub autoencoder: AutoencoderConfig,
    /// Pretrain on every image rather than the training split only.
    pub transductive: bool,
    pub taps: TapConfig,
    pub em: EmConfig,
    /// Cap on the training descriptors used to fit the mixture; 0 means no cap.
    pub gmm_max_descriptors: usize,
    pub svm: SvmConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dataset: DatasetSpec::default(),
            protocol: SplitProtocol::default(),
            variant: Variant::FvAe,
            backbone: Backbone::Builtin,
            autoencoder: AutoencoderConfig::default(),
            transductive: false,
            taps: TapConfig::default(),
            em: EmConfig::default(),
            gmm_max_descriptors: 200_000,
            svm: SvmConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{value}' for {key}"))),
    }
}

/// Rewrites validation failures as configuration errors.
fn as_config<T>(r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Validation(m) => Error::Config(m),
        other => other,
    })
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config error: "))))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = PipelineConfig::parse(&text)?;
        // Relative paths are resolved against the config file's directory.
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.dataset.root);
        if let Some(dir) = cfg.protocol.split_dir.as_mut() {
            rebase(dir);
        }
        if let Backbone::External { dir } = &mut cfg.backbone {
            rebase(dir);
        }
        Ok(cfg)
    }

    /// Sets one key. `seed` sets every stage seed at once.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.set_seed(parse(key, value)?),
            "variant" => self.variant = value.parse()?,
            "backbone" => {
                self.backbone = match value {
                    "builtin" => Backbone::Builtin,
                    _ => Backbone::External { dir: PathBuf::from(value) },
                }
            }
            "dataset.root" => self.dataset.root = PathBuf::from(value),
            "dataset.width" => self.dataset.resize_width = parse(key, value)?,
            "dataset.resize" => self.dataset.resize_mode = value.parse()?,
            "dataset.color" => {
                self.dataset.color = value.parse()?;
                self.autoencoder.in_channels = self.dataset.color.channels();
            }
            "dataset.group_pattern" => self.dataset.group_pattern = Some(value.to_string()),
            "protocol.kind" => self.protocol.kind = value.parse()?,
            "protocol.rounds" => self.protocol.rounds = parse(key, value)?,
            "protocol.seed" => self.protocol.seed = parse(key, value)?,
            "protocol.split_dir" => self.protocol.split_dir = Some(PathBuf::from(value)),
            "ae.levels" => self.autoencoder.levels = parse(key, value)?,
            "ae.base_channels" => self.autoencoder.base_channels = parse(key, value)?,
            "ae.denoising" => self.autoencoder.denoising = parse_bool(key, value)?,
            "ae.noise_sigma" => self.autoencoder.noise_sigma = parse(key, value)?,
            "ae.lr" => self.autoencoder.learning_rate = parse(key, value)?,
            "ae.epochs" => self.autoencoder.epochs = parse(key, value)?,
            "ae.batch_size" => self.autoencoder.batch_size = parse(key, value)?,
            "ae.seed" => self.autoencoder.seed = parse(key, value)?,
            "ae.transductive" => self.transductive = parse_bool(key, value)?,
            "features.layers" => {
                let n: usize = parse(key, value)?;
                self.taps.taps = (0..n as u32).collect();
            }
            "features.taps" => {
                self.taps.taps = value
                    .split(',')
                    .map(|t| parse(key, t.trim()))
                    .collect::<Result<Vec<u32>>>()?;
            }
            "features.reduction" => self.taps.reduction = value.parse::<Reduction>()?,
            "features.dim" => self.taps.target_dim = parse(key, value)?,
            "gmm.k" => self.em.components = parse(key, value)?,
            "gmm.max_iters" => self.em.max_iters = parse(key, value)?,
            "gmm.tol" => self.em.tol = parse(key, value)?,
            "gmm.init" => self.em.init = value.parse()?,
            "gmm.seed" => self.em.seed = parse(key, value)?,
            "gmm.max_descriptors" => self.gmm_max_descriptors = parse(key, value)?,
            "svm.c" => self.svm.c = parse(key, value)?,
            "svm.tol" => self.svm.tol = parse(key, value)?,
            "svm.max_epochs" => self.svm.max_epochs = parse(key, value)?,
            "svm.seed" => self.svm.seed = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.protocol.seed = seed;
        self.autoencoder.seed = seed;
        self.em.seed = seed;
        self.svm.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        as_config(self.autoencoder.validate())?;
        as_config(self.taps.validate())?;
        as_config(self.em.validate())?;
        as_config(self.svm.validate())?;
        if self.protocol.rounds == 0 {
            return Err(Error::Config("protocol.rounds must be positive".into()));
        }
        if self.dataset.resize_width == 0 {
            return Err(Error::Config("dataset.width must be positive".into()));
        }
        if self.autoencoder.in_channels != self.dataset.color.channels() {
            return Err(Error::Config(format!(
                "autoencoder expects {} channels but dataset.color gives {}",
                self.autoencoder.in_channels,
                self.dataset.color.channels()
            )));
        }
        if self.protocol.kind == SplitKind::Predefined && self.protocol.split_dir.is_none() {
            return Err(Error::Config("predefined protocol needs protocol.split_dir".into()));
        }
        if self.protocol.kind == SplitKind::SampleHoldout && self.dataset.group_pattern.is_none() {
            return Err(Error::Config("sample_holdout protocol needs dataset.group_pattern".into()));
        }
        Ok(())
    }

    /// Whether the autoencoder has to be trained for this configuration.
    pub fn needs_autoencoder(&self) -> bool {
        self.backbone == Backbone::Builtin || self.variant.uses_ssl()
    }
}

impl FromStr for ResizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed_width_keep_aspect" | "keep_aspect" => Ok(ResizeMode::FixedWidthKeepAspect),
            "square" => Ok(ResizeMode::Square),
            "none" => Ok(ResizeMode::None),
            other => Err(Error::Config(format!("unknown resize mode '{other}'"))),
        }
    }
}

impl FromStr for ColorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(ColorMode::Rgb),
            "gray" | "grey" => Ok(ColorMode::Gray),
            other => Err(Error::Config(format!("unknown color mode '{other}'"))),
        }
    }
}

impl FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "half_random" => Ok(SplitKind::HalfRandom),
            "sample_holdout" => Ok(SplitKind::SampleHoldout),
            "predefined" => Ok(SplitKind::Predefined),
            other => Err(Error::Config(format!("unknown protocol '{other}'"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_keys() {
        let cfg = PipelineConfig::parse(
            "# run\n\
             dataset.root = /data/kth\n\
             dataset.width = 128   # small\n\
             dataset.color = gray\n\
             dataset.group_pattern = sample_([a-d])\n\
             protocol.kind = sample_holdout\n\
             protocol.rounds = 4\n\
             ae.levels = 2\n\
             ae.in_channels_ignored_comment = 1 # nope\n",
        );
        assert!(matches!(cfg, Err(Error::Config(m)) if m.contains("line 9")));

        let cfg = PipelineConfig::parse(
            "dataset.root = /data/kth\n\
             dataset.color = gray\n\
             gmm.k = 4\n\
             svm.c = 0.5\n\
             variant = fcfvae\n\
             features.taps = 0, 2\n\
             seed = 42\n",
        )
        .unwrap();
        assert_eq!(cfg.dataset.root, PathBuf::from("/data/kth"));
        assert_eq!(cfg.dataset.color, ColorMode::Gray);
        assert_eq!(cfg.autoencoder.in_channels, 1);
        assert_eq!(cfg.em.components, 4);
        assert_eq!(cfg.svm.c, 0.5);
        assert_eq!(cfg.variant, Variant::FcFvAe);
        assert_eq!(cfg.taps.taps, vec![0, 2]);
        assert_eq!((cfg.autoencoder.seed, cfg.em.seed, cfg.svm.seed, cfg.protocol.seed), (42, 42, 42, 42));
    }

    #[test]
    fn bad_values_are_config_errors() {
        for text in ["gmm.k = many", "variant = best", "nonsense", "protocol.kind = kfold", "ae.denoising = maybe"] {
            assert!(matches!(PipelineConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn validation_catches_inconsistent_settings() {
        let mut cfg = PipelineConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.dataset.color = ColorMode::Gray;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.autoencoder.in_channels = 1;
        cfg.protocol.kind = SplitKind::SampleHoldout;
        assert!(cfg.validate().is_err());
        cfg.dataset.group_pattern = Some("(\\d+)".into());
        assert!(cfg.validate().is_ok());
        cfg.em.components = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
