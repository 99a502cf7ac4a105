//! Training, inference and analysis.

mod checkpoint;
mod export;
mod history;
mod infer;
mod model;
mod train;

pub use checkpoint::{Checkpoint, MAGIC};
pub use export::export_features;
pub use history::{contrast_analysis, EpochRecord, LayerContrast, RunHistory, StoredMap};
pub use infer::{
    default_head, evaluate_model, infer, predict_fused, select_thresholds, Inference,
    InferenceConfig, OutputHead,
};
pub use model::{Bound, CosimNet, PairFeatures};
pub use train::{
    epoch_order, heldout_f, item_objective, train, train_with, ItemObjective, StepInfo,
    TrainConfig, TrainMode,
};
