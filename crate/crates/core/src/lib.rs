//! Parts-based image registration.
//!
//! Parts are unit feature vectors read from a reference image at learned
//! locations. A test image is registered by searching for the similarity
//! warp whose extracted patch shows every part near its reference location,
//! with heatmaps cleaned up by the parts' spatial configuration.
//!
//! Pipeline: [`geometry`] warps and samples, [`backbone`] produces dense
//! features, [`parts`] learns part locations, [`heatmap`] denoises part
//! detections, [`energy`] scores a warp and [`solver`] searches over warps
//! and scales.

pub mod backbone;
pub mod energy;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod heatmap;
pub mod io;
pub mod optim;
pub mod parts;
pub mod solver;
pub mod synth;

pub use backbone::{Backbone, BackboneSpec, Descriptor, FeatureMap};
pub use energy::{EnergyConfig, LatentParams, Problem};
pub use error::{Error, FormatError, Result};
pub use geometry::{Image, Point2, WarpParams};
pub use heatmap::{ConfigParams, Heatmap};
pub use parts::{PartModel, SelectConfig};
pub use solver::{register, RegistrationResult, SolveConfig};
