//! Few-shot open-world recognition: a conjugate Gaussian class model with a
//! two-parameter Chinese restaurant process prior over classes, episodic
//! meta-training, baselines and open-world metrics.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod crp;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod gaussian;
pub mod gradcheck;
pub mod meta;
pub mod metrics;
pub mod model;

pub use baselines::{ncm_predict, protonet_predict, prototype_update, BaselineAgent, BaselineKind, PrototypeState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::ExperimentConfig;
pub use crp::{predictive_class_probs, sequence_log_prob, ClassCounts, CrpParams, NewClassCount};
pub use data::{generate_synthetic_world, read_dataset, write_dataset, EmbeddingDataset, Sample};
pub use encoder::{pretrain, AffineLayer, ClassEmbeddings, Encoder, PretrainConfig};
pub use error::{FlowrError, Result};
pub use experiment::{evaluate, EvalConfig, EvalOutput, Method};
pub use gaussian::{batch_posterior, condition, IsotropicGaussian, NaturalStats, NoiseModel, SharedPrior};
pub use gradcheck::{grad_check, verification_suite, GradCheckOptions, GradCheckReport};
pub use meta::{meta_loss, meta_train, Episode, EpisodeConfig, MetaLossConfig, MetaParams, Setting};
pub use metrics::{accuracy_suite, auroc, h_measure, roc_curve, threshold_at_tpr, ScoreSet};
pub use model::{fine_tune_output_layer, init_large_context, init_small_context, ModelState, PredictionRecord};
