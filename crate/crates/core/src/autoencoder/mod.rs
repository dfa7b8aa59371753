//! U-Net style convolutional autoencoder used for self-supervised pretraining.
//!
//! Encoder level `i` applies two 3×3 convolutions with ReLU (`E_i`) and a 2×2
//! max pool (`D_i`). The bottleneck applies two more convolutions to `D_J`.
//! Each decoder block upsamples the previous stage (nearest neighbour followed
//! by a bias-free convolution), concatenates the matching encoder output and
//! applies two convolutions. A linear 1×1 head maps back to image channels.

mod backward;
mod train;

pub use train::{add_noise, TrainReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, ConvSpec, PoolIndices, Tensor};

/// Architecture and training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderConfig {
    pub in_channels: usize,
    /// Number of encoder levels `J`.
    pub levels: usize,
    /// Channels of the first encoder level; doubled at every level.
    pub base_channels: usize,
    pub kernel_size: usize,
    pub denoising: bool,
    pub noise_sigma: f32,
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            in_channels: 3,
            levels: 3,
            base_channels: 16,
            kernel_size: 3,
            denoising: false,
            noise_sigma: 0.1,
            learning_rate: 1e-2,
            epochs: 10,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::invalid("autoencoder needs at least one level"));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::invalid("kernel size must be odd and positive"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise sigma must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        if self.levels > 16 || self.base_channels.checked_shl(self.levels as u32).is_none() {
            return Err(Error::invalid("too many levels"));
        }
        Ok(())
    }

    /// Output channels of encoder level `i` (1-based).
    pub fn encoder_channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << self.levels
    }

    /// Spatial extents must be multiples of this.
    pub fn extent_multiple(&self) -> usize {
        1 << self.levels
    }
}

/// A convolution layer with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub spec: ConvSpec,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Conv {
    fn init(spec: ConvSpec, with_bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let m = spec.kernel_size;
        let fan_in = spec.in_channels * m * m;
        let fan_out = spec.out_channels * m * m;
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
        let n = spec.out_channels * spec.in_channels * m * m;
        let data = (0..n).map(|_| rng.random_range(-limit..=limit)).collect();
        Conv {
            spec,
            weight: Tensor::new(vec![spec.out_channels, spec.in_channels, m, m], data)
                .expect("kernel shape"),
            bias: with_bias.then(|| Tensor::zeros(&[spec.out_channels])),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        tensor::conv2d(x, &self.weight, self.bias.as_ref(), &self.spec)
    }

    fn zeros_like(&self) -> Self {
        Conv {
            spec: self.spec,
            weight: Tensor::zeros(self.weight.shape()),
            bias: self.bias.as_ref().map(|b| Tensor::zeros(b.shape())),
        }
    }

    fn params(&self) -> impl Iterator<Item = &Tensor> {
        std::iter::once(&self.weight).chain(self.bias.as_ref())
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut())
    }
}

/// Two convolutions, each followed by ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubleConv {
    pub first: Conv,
    pub second: Conv,
}

impl DoubleConv {
    fn init(in_ch: usize, out_ch: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        DoubleConv {
            first: Conv::init(ConvSpec::same(in_ch, out_ch, k), true, rng),
            second: Conv::init(ConvSpec::same(out_ch, out_ch, k), true, rng),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<DoubleConvTrace> {
        let pre1 = self.first.apply(x)?;
        let act1 = tensor::relu(&pre1);
        let pre2 = self.second.apply(&act1)?;
        let out = tensor::relu(&pre2);
        Ok(DoubleConvTrace { input: x.clone(), pre1, act1, pre2, out })
    }

    fn out_only(&self, x: &Tensor) -> Result<Tensor> {
        let h = tensor::relu(&self.first.apply(x)?);
        Ok(tensor::relu(&self.second.apply(&h)?))
    }

    fn zeros_like(&self) -> Self {
        DoubleConv { first: self.first.zeros_like(), second: self.second.zeros_like() }
    }

    fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.first.params().chain(self.second.params())
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.first.params_mut().chain(self.second.params_mut())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock {
    /// Bias-free convolution applied after nearest-neighbour upsampling.
    pub up: Conv,
    pub convs: DoubleConv,
}

#[derive(Debug, Clone)]
pub(crate) struct DoubleConvTrace {
    pub input: Tensor,
    pub pre1: Tensor,
    pub act1: Tensor,
    pub pre2: Tensor,
    pub out: Tensor,
}

#[derive(Debug, Clone)]
pub(crate) struct DecoderTrace {
    pub upsampled: Tensor,
    pub skip_channels: usize,
    pub convs: DoubleConvTrace,
}

/// Every intermediate needed for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct ForwardTrace {
    pub encoders: Vec<DoubleConvTrace>,
    pub pools: Vec<PoolIndices>,
    pub bottleneck: DoubleConvTrace,
    pub decoders: Vec<DecoderTrace>,
    pub output: Tensor,
}

/// Result of a full forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub reconstruction: Tensor,
    /// `E_1 .. E_J`, shallowest first.
    pub encoder_outputs: Vec<Tensor>,
    pub bottleneck: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderModel {
    pub config: AutoencoderConfig,
    pub encoder: Vec<DoubleConv>,
    pub bottleneck: DoubleConv,
    /// Decoder block `i` (1-based) merges with encoder level `J - i + 1`.
    pub decoder: Vec<DecoderBlock>,
    pub head: Conv,
}

impl AutoencoderModel {
    /// Builds a model with seeded Glorot-uniform weights and zero biases.
    pub fn new(config: AutoencoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let k = config.kernel_size;
        let j = config.levels;
        let mut encoder = Vec::with_capacity(j);
        for level in 1..=j {
            let in_ch = if level == 1 { config.in_channels } else { config.encoder_channels(level - 1) };
            encoder.push(DoubleConv::init(in_ch, config.encoder_channels(level), k, &mut rng));
        }
        let bottleneck = DoubleConv::init(config.encoder_channels(j), config.bottleneck_channels(), k, &mut rng);
        let mut decoder = Vec::with_capacity(j);
        let mut prev = config.bottleneck_channels();
        for i in 1..=j {
            let skip = config.encoder_channels(j - i + 1);
            let up = Conv::init(ConvSpec::same(prev, skip, k), false, &mut rng);
            let merged = skip + up.spec.out_channels;
            let convs = DoubleConv::init(merged, skip, k, &mut rng);
            decoder.push(DecoderBlock { up, convs });
            prev = skip;
        }
        let head = Conv::init(ConvSpec::same(prev, config.in_channels, 1), true, &mut rng);
        let model = AutoencoderModel { config, encoder, bottleneck, decoder, head };
        model.check_architecture()?;
        Ok(model)
    }

    /// Verifies the channel arithmetic of every skip connection and layer.
    pub fn check_architecture(&self) -> Result<()> {
        let cfg = &self.config;
        let j = cfg.levels;
        if self.encoder.len() != j || self.decoder.len() != j {
            return Err(Error::invalid("block count does not match the configured levels"));
        }
        let mut prev = cfg.in_channels;
        for (i, block) in self.encoder.iter().enumerate() {
            if block.first.spec.in_channels != prev || block.second.spec.out_channels != cfg.encoder_channels(i + 1) {
                return Err(Error::dim(format!("encoder block {}", i + 1), "channel mismatch"));
            }
            prev = block.second.spec.out_channels;
        }
        if self.bottleneck.first.spec.in_channels != prev
            || self.bottleneck.second.spec.out_channels != cfg.bottleneck_channels()
        {
            return Err(Error::dim("bottleneck", "channel mismatch"));
        }
        prev = cfg.bottleneck_channels();
        for (idx, block) in self.decoder.iter().enumerate() {
            let i = idx + 1;
            let skip = self.encoder[j - i].second.spec.out_channels;
            if block.up.spec.in_channels != prev {
                return Err(Error::dim(format!("decoder block {i} upsampling"), "channel mismatch"));
            }
            if block.convs.first.spec.in_channels != skip + block.up.spec.out_channels {
                return Err(Error::dim(
                    format!("decoder block {i} input"),
                    format!(
                        "expects {} channels, encoder level {} gives {skip} and upsampling gives {}",
                        block.convs.first.spec.in_channels,
                        j - i + 1,
                        block.up.spec.out_channels
                    ),
                ));
            }
            prev = block.convs.second.spec.out_channels;
        }
        if self.head.spec.in_channels != prev || self.head.spec.out_channels != cfg.in_channels {
            return Err(Error::dim("head", "channel mismatch"));
        }
        Ok(())
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        let (c, h, w) = image.chw()?;
        if c != self.config.in_channels {
            return Err(Error::dim(
                "channels",
                format!("model expects {} channels, image has {c}", self.config.in_channels),
            ));
        }
        let mult = self.config.extent_multiple();
        if h == 0 || h % mult != 0 {
            return Err(Error::dim("height", format!("{h} is not a positive multiple of {mult}")));
        }
        if w == 0 || w % mult != 0 {
            return Err(Error::dim("width", format!("{w} is not a positive multiple of {mult}")));
        }
        Ok(())
    }

    pub(crate) fn forward_trace(&self, image: &Tensor) -> Result<ForwardTrace> {
        self.check_input(image)?;
        let mut encoders = Vec::with_capacity(self.config.levels);
        let mut pools = Vec::with_capacity(self.config.levels);
        let mut x = image.clone();
        for block in &self.encoder {
            let t = block.forward(&x)?;
            let (pooled, idx) = tensor::maxpool2(&t.out)?;
            encoders.push(t);
            pools.push(idx);
            x = pooled;
        }
        let bottleneck = self.bottleneck.forward(&x)?;
        let mut prev = bottleneck.out.clone();
        let j = self.config.levels;
        let mut decoders = Vec::with_capacity(j);
        for (idx, block) in self.decoder.iter().enumerate() {
            let skip = &encoders[j - 1 - idx].out;
            let upsampled = tensor::upsample2(&prev)?;
            let up = block.up.apply(&upsampled)?;
            let merged = tensor::concat_channels(skip, &up)?;
            let convs = block.convs.forward(&merged)?;
            prev = convs.out.clone();
            decoders.push(DecoderTrace { upsampled, skip_channels: skip.shape()[0], convs });
        }
        let output = self.head.apply(&prev)?;
        Ok(ForwardTrace { encoders, pools, bottleneck, decoders, output })
    }

    /// Full encoder-decoder pass.
    pub fn forward(&self, image: &Tensor) -> Result<ForwardOutput> {
        let t = self.forward_trace(image)?;
        Ok(ForwardOutput {
            reconstruction: t.output,
            encoder_outputs: t.encoders.into_iter().map(|e| e.out).collect(),
            bottleneck: t.bottleneck.out,
        })
    }

    /// Encoder outputs `E_1 .. E_J` and the bottleneck `B`, without running
    /// the decoder.
    pub fn encode(&self, image: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        self.check_input(image)?;
        let mut outs = Vec::with_capacity(self.config.levels);
        let mut x = image.clone();
        for block in &self.encoder {
            let e = block.out_only(&x)?;
            x = tensor::maxpool2(&e)?.0;
            outs.push(e);
        }
        let b = self.bottleneck.out_only(&x)?;
        Ok((outs, b))
    }

    /// The bottleneck map `B(I)` with the decoder removed.
    pub fn bottleneck_features(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.encode(image)?.1)
    }

    /// Global average of the bottleneck map, one value per channel.
    pub fn ssl_vector(&self, image: &Tensor) -> Result<Vec<f32>> {
        let b = self.bottleneck_features(image)?;
        Ok(channel_means(&b))
    }

    pub fn zeros_like(&self) -> Self {
        AutoencoderModel {
            config: self.config.clone(),
            encoder: self.encoder.iter().map(DoubleConv::zeros_like).collect(),
            bottleneck: self.bottleneck.zeros_like(),
            decoder: self
                .decoder
                .iter()
                .map(|d| DecoderBlock { up: d.up.zeros_like(), convs: d.convs.zeros_like() })
                .collect(),
            head: self.head.zeros_like(),
        }
    }

    /// All parameter arrays in a fixed order: encoder blocks, bottleneck,
    /// decoder blocks (upsampling weight first), head.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for b in &self.encoder {
            out.extend(b.params());
        }
        out.extend(self.bottleneck.params());
        for d in &self.decoder {
            out.extend(d.up.params());
            out.extend(d.convs.params());
        }
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for b in &mut self.encoder {
            out.extend(b.params_mut());
        }
        out.extend(self.bottleneck.params_mut());
        for d in &mut self.decoder {
            out.extend(d.up.params_mut());
            out.extend(d.convs.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    /// Human-readable names matching [`AutoencoderModel::params`].
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 1..=self.encoder.len() {
            for n in ["w1", "b1", "w2", "b2"] {
                out.push(format!("encoder{i}.{n}"));
            }
        }
        for n in ["w1", "b1", "w2", "b2"] {
            out.push(format!("bottleneck.{n}"));
        }
        for i in 1..=self.decoder.len() {
            for n in ["wu", "w1", "b1", "w2", "b2"] {
                out.push(format!("decoder{i}.{n}"));
            }
        }
        out.push("head.w".into());
        out.push("head.b".into());
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }
}

/// Per-channel spatial mean of a `[C, H, W]` map.
pub fn channel_means(map: &Tensor) -> Vec<f32> {
    let (c, h, w) = map.chw().expect("[C, H, W] map");
    let n = (h * w).max(1) as f64;
    map.data()
        .chunks(h * w)
        .take(c)
        .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / n) as f32)
        .collect()
}
