use pheno_core::arena::ArenaError;
use pheno_core::eval::EvalError;
use pheno_core::prep::PrepError;
use pheno_core::scaling::ScalingError;
use pheno_core::train::TrainError;
use pheno_core::zoo::StoreError;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Training(String),
    #[error("{0}")]
    Store(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Training(_) => 4,
            CliError::Store(_) => 5,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Training(_) => "training",
            CliError::Store(_) => "store",
        }
    }

    /// One-line JSON document for stderr.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Body<'a> {
            kind: &'a str,
            code: i32,
            message: String,
        }
        #[derive(Serialize)]
        struct Doc<'a> {
            error: Body<'a>,
        }
        let doc = Doc {
            error: Body {
                kind: self.kind(),
                code: self.exit_code(),
                message: self.to_string(),
            },
        };
        serde_json::to_string(&doc).expect("error serializes")
    }
}

impl From<ArenaError> for CliError {
    fn from(e: ArenaError) -> Self {
        match e {
            ArenaError::Config(_) | ArenaError::Range(_) => CliError::Config(e.to_string()),
            ArenaError::Invalid(_) | ArenaError::Data { .. } => CliError::Data(e.to_string()),
        }
    }
}

impl From<PrepError> for CliError {
    fn from(e: PrepError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Data(_) => CliError::Data(e.to_string()),
            _ => CliError::Training(e.to_string()),
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        CliError::Store(e.to_string())
    }
}

impl From<ScalingError> for CliError {
    fn from(e: ScalingError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

pub fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}
