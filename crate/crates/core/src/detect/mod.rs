//! Binary hotspot classification on top of pre-trained encoders.

mod classifier;
mod ensemble;

pub use classifier::{
    accuracy, finetune, finetune_with_progress, label_of, softmax2, stratified_split, BatchSource, Classifier,
    FeatureSet, FinetuneConfig, FinetuneEpoch, FinetuneOutcome, ImageSet, Prediction, Probs,
};
pub use ensemble::{
    combine, ensemble_probs, grid_search_weight, grid_search_weight_from_probs, EnsembleModel, WEIGHT_STEPS,
};
