//! Joint 3-D tumor segmentation and survival prediction.
//!
//! A multimodal transformer ingests paired CT/PET volumes next to a tabular
//! health record as one token sequence, decodes a voxel-wise tumor mask
//! through a convolutional decoder fed by intermediate encoder taps, and
//! predicts a censored-survival distribution through a discrete-time
//! logistic head. Training minimizes
//! `beta * (dice + focal) + (1 - beta) * nll` end to end on a hand-rolled
//! reverse-mode tape, in f32 or f64.

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod mtlr;
pub mod params;
pub mod train;
