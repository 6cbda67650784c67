//! Siamese self-supervised pre-training with a stop-gradient target branch.

mod loss;
mod model;
mod toy;
mod train;

pub use loss::{
    compound_loss, cross_entropy_grad, cross_entropy_term, negative_cosine_similarity,
    negative_cosine_similarity_grad, pair_loss, symmetric_similarity_loss, LossConfig, LossVariant, PairLoss,
};
pub use model::{Encoder, EncoderSpec, Predictor, PredictorSpec};
pub(crate) use model::check_image_batch;
pub use toy::{LinearSiamese, SiameseGradients};
pub use train::{collapse_monitor, ssl_train, ssl_train_with_progress, EpochRecord, SslCheckpoint, TrainConfig};
