//! Texture recognition with Fisher Vectors over autoencoder features.
//!
//! The crate covers the whole chain: a small U-Net style autoencoder trained
//! by reconstruction, local descriptor harvesting, a diagonal Gaussian
//! mixture, Fisher Vector encoding, and a one-vs-rest linear SVM in the
//! explicit Bhattacharyya feature map.

pub mod autoencoder;
pub mod classifier;
pub mod error;
pub mod features;
pub mod fisher;
pub mod gmm;
pub mod io;
pub mod pipeline;
pub mod tensor;

pub use autoencoder::{AutoencoderConfig, AutoencoderModel};
pub use classifier::{LinearSvmModel, PhiVector, SvmConfig};
pub use error::{Error, Result};
pub use features::{LocalDescriptorSet, PcaModel, TapConfig};
pub use fisher::{FisherVector, FusedDescriptor, Variant};
pub use gmm::{EmConfig, GaussianMixture};
pub use tensor::Tensor;
pub use pipeline::{run_pipeline, EvalReport, PipelineConfig};
