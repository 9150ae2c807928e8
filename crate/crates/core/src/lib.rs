//! Class activation maps from the principal components of convolutional
//! activations, with the tooling to localize objects from them and score the
//! result.
//!
//! Pipeline: [`refnet`] (or an FMAP dump) produces a [`tensor::FeatureMap`];
//! [`cam::eigen_cam`] projects it onto a singular direction found by
//! [`linalg::top_component`]; [`localize`] turns the quantized map into a box
//! and scores it; [`harness`] runs that over a manifest.

pub mod cam;
pub mod fixtures;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod localize;
pub mod refnet;
pub mod tensor;

pub use cam::{eigen_cam, ActivationMap, CamConfig, CamError};
pub use localize::{BoundingBox, LocalizeError};
pub use tensor::{FeatureMap, Map2, RasterImage, Tensor};
