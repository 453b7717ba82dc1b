//! Constrained local model fitting with convolutional experts networks.
//!
//! A 3D point distribution model ([`pdm`]) is fitted to local detector
//! responses ([`cen`]) with non-uniform regularised landmark mean shift
//! ([`nurlms`]). [`synth`] renders synthetic faces with known ground truth,
//! [`trainer`] fits detectors to patch data and [`metrics`] scores results.

pub mod cen;
pub mod error;
pub mod image;
pub mod metrics;
pub mod model_io;
pub mod nurlms;
pub mod pdm;
pub mod rotation;
pub mod synth;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
