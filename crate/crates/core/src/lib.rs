//! Evidential two-modality road segmentation.
//!
//! An appearance subnetwork and a range subnetwork each emit per-pixel
//! two-class evidence. The evidence is read as a subjective-logic opinion and
//! the two opinions are combined with Dempster's rule, so a modality that is
//! unsure at a pixel yields to the other one there.

pub mod cli;
pub mod config;
pub mod error;
pub mod graph;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod selftest;
pub mod sl;
pub mod special;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{Conv2dSpec, Tensor};
