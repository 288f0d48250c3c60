//! Integer-label video quality scoring: synthetic data, curation, token
//! codec, a small transformer scorer, training, evaluation and experiment
//! harness.

pub mod codec;
pub mod curation;
pub mod error;
pub mod eval;
pub mod harness;
pub mod rng;
pub mod scorer;
pub mod synth;
pub mod train;
pub mod vlm;

pub use codec::{LabelMode, TokenId, Vocabulary};
pub use curation::{DatasetRecord, PromptTemplate};
pub use error::{Error, Result};
pub use eval::{EvalReport, EvalRow, ScoreVector};
pub use scorer::{ModelConfig, ScorerModel};
pub use synth::{GeneratorConfig, RawRecord};
pub use train::TrainConfig;
