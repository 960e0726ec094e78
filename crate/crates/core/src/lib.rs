//! Anomaly detection with a cross-patch attention discriminator trained on
//! self-supervised feature distortions.
//!
//! Frozen vision-transformer patch features are stored as GADF records
//! ([`feature_store`]). Training ([`trainer`]) pairs each clean record with a
//! distorted copy ([`sag`]) and teaches the [`discriminator`] to flag the
//! distorted patches. At inference, [`scoring`] turns per-patch
//! probabilities into image scores and pixel maps, and [`evaluation`]
//! reports AUROC. [`synth`] generates a synthetic benchmark with a
//! ground-truth oracle.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`).

pub mod discriminator;
pub mod evaluation;
pub mod feature_store;
pub mod optim;
pub mod rng;
pub mod sag;
pub mod scalar;
pub mod scoring;
pub mod synth;
pub mod trainer;

pub use discriminator::{DiscriminatorHyper, DiscriminatorModel, PatchScores};
pub use feature_store::{FeatureRecord, Label};
pub use rng::PortableRng;
pub use scalar::Scalar;

pub type Discriminator32 = DiscriminatorModel<f32>;
pub type Discriminator64 = DiscriminatorModel<f64>;
