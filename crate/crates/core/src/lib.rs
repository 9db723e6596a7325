//! Post-processing fairness for black-box embedding models.
//!
//! The pipeline: estimate identity centroids from precomputed embeddings,
//! measure group-wise pseudo-metric curves on image-centroid scores, map
//! every group's pseudo-scores onto a reference group by quantile matching,
//! and train a small residual MLP (the Fairness Module) to regress its
//! pseudo-scores onto those targets with the Centroid Fairness loss.

pub mod binio;
pub mod centroids;
pub mod cftrain;
pub mod cli;
pub mod curves;
pub mod dataset;
pub mod error;
pub mod fairmodule;
pub mod synth;
pub mod transform;

pub use centroids::{estimate_centroids, pseudo_score, CentroidSet};
pub use cftrain::{batch_loss_grad, compute_weights, sample_epoch, train, TrainConfig, WeightTable};
pub use curves::{cosine_score, far_inverse, frr_inverse, roc_point, Orientation, PairKind, StepCurve};
pub use dataset::{build_group_index, load_dataset, save_dataset, EmbeddingDataset, GroupIndex};
pub use error::{Error, Result};
pub use fairmodule::{forward, init_from_pretrained, AdamState, ModuleParams};
pub use synth::{generate, GroupSpec, SynthConfig};
pub use transform::{build_target_table, check_alignment, t_far, t_frr, TargetTable};
