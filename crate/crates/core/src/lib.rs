//! Discovering the spurious visual features an image classifier relies on, and
//! measuring how much it depends on them.
//!
//! The pipeline runs in stages:
//!
//! * [`model`] extracts penultimate-layer feature vectors and maps from any
//!   convolutional classifier exposed through [`model::FeatureNetwork`];
//! * [`selection`] ranks features per class by mean activation times head weight;
//! * [`saliency`] renders neural activation maps, heatmaps and feature attacks;
//! * [`annotation`] turns candidate features into annotation tasks and aggregates
//!   worker votes into causal / spurious verdicts;
//! * [`dataset`] generalizes verdicts to the top-k images of each class and
//!   stores the resulting soft masks;
//! * [`evaluation`] corrupts masked regions with Gaussian noise and reports
//!   causal and spurious accuracy;
//! * [`synthetic`] generates planted-spurious data and a tiny reference model so
//!   all of the above can be checked against known ground truth.

pub mod annotation;
pub mod cache;
pub mod dataset;
mod error;
pub mod evaluation;
pub mod imageio;
pub mod model;
pub mod saliency;
pub mod selection;
pub mod synthetic;

pub use error::{Error, Result};
pub use imageio::{Image, ImageSource};
