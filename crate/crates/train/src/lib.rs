//! Learning procedures for the neural superoptimizer: supervised
//! pre-training, SILO (sample, verify, keep strictly cheaper rewrites, train
//! on the current best targets), REINFORCE with a per-program baseline, and
//! checkpoint selection on a dev subsample.

pub mod data;
pub mod evaluate;
pub mod finetune;
pub mod pretrain;
pub mod reinforce;
pub mod run;
pub mod runtime;
pub mod silo;

pub use data::{step_rng, Dataset, Stream};
pub use evaluate::{dev_subsample, evaluate_model, select_model, EntryResult, EvalSummary, Selection};
pub use pretrain::{pretrain, PretrainConfig, PretrainReport};
pub use reinforce::{reinforce_step, BaselineTracker, ReinforceConfig};
pub use run::{RunDir, TrainError};
pub use runtime::eval::{EvalRequest, EvalResponse, Evaluator, LocalEvaluator};
pub use silo::{silo_step, Replacement, SiloConfig, Target, TrainState};
pub use runtime::learner::{run_learner, Algo, RuntimeConfig, RuntimeStats, StepReport};
pub use finetune::{finetune, quarter_means, DevProtocol, FinetuneConfig, FinetuneReport};
