use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("i/o failure: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingInput(_) => 3,
            CliError::Malformed(_) => 4,
            CliError::Insufficient(_) => 5,
            CliError::Io(_) => 6,
        }
    }
}

impl From<repgeo::Error> for CliError {
    fn from(e: repgeo::Error) -> Self {
        use repgeo::Error as E;
        let msg = e.to_string();
        match e {
            E::MissingFile(p) => CliError::MissingInput(p.display().to_string()),
            E::InvalidInput(m) => CliError::Config(vec![m]),
            E::InsufficientData(_) | E::Degenerate(_) => CliError::Insufficient(msg),
            E::Io { .. } => CliError::Io(msg),
            E::DimensionMismatch { .. }
            | E::NonFinite { .. }
            | E::DuplicateRecordId(_)
            | E::DuplicateLabel(_)
            | E::Json(_)
            | E::Csv(_) => CliError::Malformed(msg),
        }
    }
}
