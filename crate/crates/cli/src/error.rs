use emstack_pipeline::PipelineError;

/// Command-level failures, classified for distinct process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(msg) => CliError::Config(msg),
            PipelineError::Io { .. } | PipelineError::Format(_) | PipelineError::Gap { .. } => {
                CliError::Data(e.to_string())
            }
            PipelineError::Model(_) | PipelineError::Tensor(_) => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<emstack_model::ModelError> for CliError {
    fn from(e: emstack_model::ModelError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
