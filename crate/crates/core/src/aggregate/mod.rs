//! Ways of turning per-patch class scores into one prediction per image.
//!
//! - [`average_predict`]: mean of a fixed patch subset.
//! - [`brute_force_best_subset`] / [`beam_search_subsets`]: choose that subset.
//! - [`gate_predict`]: input-dependent sparse weighting of patches.
//! - [`mlp_forward`] / [`mlp_train`]: a learned classifier over all scores.

pub mod gate;
pub mod mlp;
pub mod model_io;
pub mod subset;

pub use crate::scores::{ScoreTensor, Split};
pub use gate::{
    gate_predict, gate_predict_all, gate_train, FeatureMatrix, GateModel, GateNormalization,
    GateTrainParams,
};
pub use mlp::{
    mlp_forward, mlp_predict, mlp_train, BatchNormMode, MlpGradients, MlpHyperParams, MlpModel,
    MlpTraining,
};
pub use model_io::{load_model, read_model, save_model, write_model, Model, ModelMeta};
pub use subset::{
    average_predict, beam_search_subsets, brute_force_best_subset, rank_patches, subset_accuracy,
    BeamStep, Predictions, Subset, DEFAULT_SUBSET_CAP,
};
