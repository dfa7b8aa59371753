//! Binary containers for feature arrays and fitted models.

pub mod bundle;
pub mod tfv;

pub use bundle::{load_bundle, save_bundle, Bundle};
