//! Color-variant identification for catalog imagery.
//!
//! The pipeline crops the primary object of each image, learns an embedding
//! with either supervised triplet training or one of several contrastive
//! self-supervised methods (SimSiam, BYOL, MoCo v2 and the patch-sliced
//! PBCNet), clusters the embeddings and scores the clusters against
//! ground-truth variant groups.

pub mod augment;
pub mod clustering;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod export;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod trainers;

pub use error::{Error, Result};
pub use matrix::Matrix;
