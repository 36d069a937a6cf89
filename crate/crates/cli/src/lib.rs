//! Pipeline orchestration for locale-group language models.
//!
//! Every subcommand of the `locale-forge` binary is a method on
//! [`pipeline::Pipeline`]; the binary only parses flags and maps errors to
//! exit codes.

use std::path::Path;

use locale_forge::bpe::BpeError;
use locale_forge::corpus::CorpusError;
use locale_forge::langsim::LangsimError;
use locale_forge::lm::LmError;
use locale_forge::rescore::RescoreError;
use serde::Serialize;

pub mod config;
pub mod fixture;
pub mod pipeline;
pub mod seeds;

pub use config::PipelineConfig;
pub use fixture::{gen_fixture, FixtureSpec, SyntheticLanguageSpec};
pub use pipeline::Pipeline;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Data(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<CliError>,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Langsim(#[from] LangsimError),
    #[error(transparent)]
    Bpe(#[from] BpeError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Rescore(#[from] RescoreError),
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Machine-readable error report printed on stderr by the binary.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub class: &'static str,
    pub stage: Option<String>,
    pub message: String,
    pub exit_code: i32,
}

impl CliError {
    pub fn config(errs: Vec<String>) -> Self {
        Self::Config(errs)
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            Self::Stage { .. } => self,
            other => Self::Stage {
                stage: stage.to_string(),
                source: Box::new(other),
            },
        }
    }

    fn root(&self) -> &CliError {
        match self {
            Self::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn class(&self) -> &'static str {
        match self.root() {
            Self::Config(_) => "config",
            Self::Io { .. } => "io",
            Self::Corpus(CorpusError::Io { .. }) | Self::Lm(LmError::Io { .. }) => "io",
            Self::Corpus(CorpusError::Manifest(_)) | Self::Lm(LmError::Config(_)) => "config",
            Self::Rescore(RescoreError::Io { .. }) => "io",
            Self::Lm(LmError::Diverged { .. }) => "diverged",
            _ => "data",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.class() {
            "config" => 2,
            "io" => 3,
            "data" => 4,
            _ => 5,
        }
    }

    pub fn report(&self) -> ErrorReport {
        ErrorReport {
            class: self.class(),
            stage: match self {
                Self::Stage { stage, .. } => Some(stage.clone()),
                _ => None,
            },
            message: self.to_string(),
            exit_code: self.exit_code(),
        }
    }
}
