//! Cross-modal embedding of spatial transcriptomics and histology features.
//!
//! Spots on a tissue slice are joined into a radius graph. Each modality is
//! encoded by a graph convolution trained with a Deep Graph Infomax objective,
//! the gene branch is regularized by a normalized-HSIC bottleneck, and the two
//! branches are aligned with a soft-target contrastive loss. Expression at
//! image-only query spots is then imputed by top-k retrieval against a
//! database of gene-branch embeddings.

pub mod error;
pub mod graph;
pub mod hsic;
pub mod linalg;
pub mod encoders;
pub mod objectives;
pub mod optim;
pub mod train;
pub mod data;
pub mod retrieval;
pub mod eval;
pub mod pipeline;

pub use error::{Error, Result};
pub use linalg::Matrix;
