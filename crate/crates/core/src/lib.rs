//! Entropy-aware episodic meta-learning for open-set recognition: a small
//! reverse-mode autodiff engine, a convolutional embedding network with a
//! prototype classifier and an open-set discriminator, the episodic
//! training loop, and the evaluation protocol.

pub mod autodiff;
pub mod data;
pub mod episodes;
pub mod loss;
pub mod meta;
pub mod network;
pub mod rng;
pub mod scalar;

pub use autodiff::{
    grad_check, AutodiffError, GradCheckOptions, GradCheckReport, Gradients, Graph, NodeId, Tensor,
};
pub use data::{gen_synthetic, load_dir, save_dir, DataError, Dataset, Split, SynthConfig};
pub use episodes::{
    draw_partition, sample_episode, Episode, EpisodeError, OpenSampling, Partition,
};
pub use loss::{Lambdas, LossBreakdown, LossError, ProbMode};
pub use meta::{
    decide, episode_grad_check, episode_loss, evaluate, lr, meta_train, meta_train_with,
    threshold_sweep, train_episode, AggregateReport, Decision, DecisionRule, EpisodeLayout,
    EpisodeLog, EvalConfig, MetaError, MetaTest, MetricsReport, TrainConfig, TrainOutcome,
};
pub use network::{init_params, Arch, DiscInput, NetworkError, Params};
pub use rng::{stream, Stream, PRNG_ALGORITHM};
pub use scalar::{Scalar, ScalarWidth};
