//! Episodic few-shot learning with Prototypical Networks.

mod episode;
mod eval;
mod model;
mod proto;
mod train;

pub use episode::{
    episode_rng, sample_episode, ClassId, Episode, EpisodeShape, ExampleSet, FakeWays,
};
pub use eval::{
    evaluate, evaluate_features, evaluate_features_with_fakes, evaluate_with, evaluate_with_fake_ways,
    evaluate_with_fakes, EvalReport,
};
pub use model::{Conv4, Embedder};
pub use proto::{
    argmax, class_probabilities, classify_query, compute_prototypes, episode_loss,
    episode_loss_masked, l2_penalty, Prototypes,
};
pub use train::{train_episodic, FslTrainOptions, TrainLog, ValPoint};
