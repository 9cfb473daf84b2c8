//! Hierarchical, language-conditioned CTC/attention sequence transduction
//! on synthetic multilingual data.

pub mod corpus;
pub mod ctc;
pub mod decoder;
pub mod encoder;
pub mod eval;
pub mod harness;
pub mod labels;
pub mod model;
pub mod nn;
pub mod numcore;

pub use corpus::{LanguageSpec, Split, Utterance};
pub use decoder::{LossBreakdown, LossConfig};
pub use encoder::{ConditioningMode, EncoderConfig, TapTarget};
pub use eval::{BeamConfig, EvalReport, Hypothesis};
pub use harness::TrainConfig;
pub use labels::{make_labels, LabelBundle, TokenId, Unit, Vocab, BLANK};
pub use model::{Model, ModelConfig};
pub use numcore::{Graph, Tensor, Var};
