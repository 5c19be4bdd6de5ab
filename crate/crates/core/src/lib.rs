//! Volumetric Parkinson's disease classifier guided by two clinical priors:
//! per-region relevance weights and accelerated aging of PD-associated regions.
//!
//! The pipeline runs NIfTI input through a small 3-D encoder, fuses a
//! relevance-weighted regional aggregate into the dense feature, and reads out
//! a diagnosis whose logits are corrected by a brain-age gap.

pub mod aggregator;
pub mod cli;
pub mod cohort;
pub mod diagnoser;
pub mod nn;
pub mod preprocess;
pub mod priors;
pub mod seed;
pub mod synth;
pub mod training;
pub mod volume_io;
