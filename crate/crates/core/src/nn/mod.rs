//! Minimal feedforward network engine.

mod layer;
mod loss;
mod network;
mod persist;
mod train;

pub use layer::{LayerSpec, Params};
pub use loss::{
    log_sum_exp, runner_up, softmax, BaseLoss, LossSpec, MeanActivation, TermGradient, TraceLoss, WeightedTerm,
};
pub use network::{
    channel_mean_backward, channel_mean_features, channel_means, ForwardTrace, LossEvaluation, Mode, Network,
};
pub use persist::{load_network, network_from_json, network_to_json, save_network, MODEL_FORMAT_VERSION};
pub use train::{accuracy, train_classifier, train_samples, TrainConfig, TrainHistory};
