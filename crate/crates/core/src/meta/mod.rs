//! Metric-based meta-learning on top of the base network.

pub mod episode;
pub mod metric;
pub mod model;
pub mod train;

pub use episode::{sample_episode, Episode};
pub use metric::{
    argmax, cosine_distance, cross_entropy, loss_hessian, metric_distances, metric_distances_graph, metric_logits,
    metric_logits_graph, min_eigenvalue, residual_combine, softmax_vec, LossHessian,
};
pub use model::{
    embed_episode, embedding_episode_loss, full_episode_loss, inner_train_step, meta_step_on_embeddings,
    meta_train_step, predict_queries, rfnet_logits, Embedding, RfNet, ETA_NAME,
};
pub use train::{
    adapted_eta, episode_tensors, run_schedule, train, EpisodeBatch, LossRecord, MetaUpdate, TestAdapt, TrainConfig,
};
