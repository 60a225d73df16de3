use emstack_model::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("io {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error("format: {0}")]
    Format(String),

    #[error("missing slice indices {missing:?} in {path}")]
    Gap { path: String, missing: Vec<usize> },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Tensor(#[from] emstack_tensor::TensorError),
}

impl PipelineError {
    pub fn io(path: impl std::fmt::Display, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;
