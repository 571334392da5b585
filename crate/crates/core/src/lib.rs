//! Generalized random forests.
//!
//! Honest, subsampled gradient trees produce adaptive neighborhood weights
//! `α_i(x)`; a local estimating equation is then solved under those weights
//! at each query point. Four estimating equations are provided: least-squares
//! regression, (multi-)quantile regression, conditional average partial
//! effects, and instrumental-variables regression. Variance estimates come
//! from a bootstrap of little bags, and [`simulation`] reproduces the
//! standard benchmark designs.

pub mod centering;
pub mod data;
pub mod error;
pub mod forest;
pub mod inference;
pub mod linalg;
pub mod moments;
mod par;
pub mod rng;
pub mod simulation;
pub mod tree;
pub mod weights;

pub use centering::{center, CenteredDataset, CenteringRoles};
pub use data::{csv_header, load_csv, validate_for_model, ColumnRoles, Dataset, ModelKind, Role};
pub use error::{GrfError, Result};
pub use forest::{train_forest, Forest, ForestOptions, SubsampleSize, TreeRecord};
pub use inference::{
    bayes_debias, blb_variance, confidence_interval, estimate_at, estimate_with,
    estimate_with_curvature_forests, group_scores, normal_quantile, variance_at,
    ConfidenceInterval, CurvatureForests, EstimateReport, VarianceCorrection, VarianceEstimate,
};
pub use moments::{MomentModel, ParameterEstimate, PseudoOutcomes};
pub use par::current_num_threads;
pub use tree::{SplitOptions, Tree, TreeNode};
pub use weights::WeightVector;
