//! Locale-group multilingual language modelling: corpus balancing, lexical
//! locale clustering, shared subword vocabularies, a small transformer LM
//! with masked fine-tuning, and n-best rescoring.

pub mod bpe;
pub mod corpus;
pub mod langsim;
pub mod lm;
pub mod rescore;
pub mod tensor;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use bpe::{learn_bpe, BpeError, BpeVocab};
pub use corpus::{balance_plan, draw_sample, BalancePlan, CorpusError, CorpusManifest, LocaleCorpus, LocaleId, SamplerConfig};
pub use langsim::{cluster_locales, grouping_report, similarity_matrix, ClusterParams, LocaleGrouping, SimilarityMatrix};
pub use lm::{build_model, LmError, ModelConfig, TrainHyper, TrainState, TransformerLm};
pub use rescore::{NBestList, RescoreError, RescoreWeights};
pub use tensor::{Scalar, Tape, Tensor, TensorError};
