use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] xfmnet::Error),

    #[error("{path}: line {line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("{0}: {1}")]
    Csv(String, String),

    #[error("{0} already exists; pass --force to overwrite")]
    Exists(String),

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// Stable identifier printed before the message.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => match e {
                xfmnet::Error::Shape { .. } => "shape",
                xfmnet::Error::InvalidArgument(_) => "invalid_argument",
                xfmnet::Error::NonFinite(_) => "non_finite",
                xfmnet::Error::Graph(_) => "graph",
                xfmnet::Error::Checkpoint(_) => "checkpoint",
                xfmnet::Error::Parse { .. } => "parse",
                xfmnet::Error::Diverged { .. } => "diverged",
                xfmnet::Error::Io { .. } => "io",
                xfmnet::Error::Json(_) => "config",
            },
            CliError::Parse { .. } | CliError::Csv(..) => "parse",
            CliError::Exists(_) => "exists",
            CliError::Usage(_) => "usage",
        }
    }

    /// `error[kind]: message` on one line.
    pub fn line(&self) -> String {
        let msg: String = self.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
        format!("error[{}]: {msg}", self.kind())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
