//! Single-step fingerprint registration: semi-dense matching with
//! global-local attention, expectation-based fine refinement, regularised
//! thin-plate-spline warping, training losses, and biometric metrics.

pub mod autograd;
pub mod backbone;
pub mod coarse_gla;
pub mod error;
pub mod fine_refine;
mod layers;
pub mod losses;
pub mod match_layer;
pub mod numkit;
pub mod pipeline;
pub mod scorer;
pub mod synth;
pub mod warpfield;
pub mod weights;

pub use backbone::{extract_features, pad_to_multiple, FeatureMap, Image};
pub use error::{Error, Result};
pub use fine_refine::{Correspondence, CorrespondenceSet};
pub use warpfield::{DeformationField, Mask, TpsModel};
pub use weights::{Manifest, WeightArchive};
