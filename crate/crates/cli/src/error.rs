use ipa_transfer::bpe::BpeError;
use ipa_transfer::checkpoint::CheckpointError;
use ipa_transfer::eval::EvalError;
use ipa_transfer::frontend::FrontendError;
use ipa_transfer::g2p::G2pError;
use ipa_transfer::phoneset::PhonesetError;
use ipa_transfer::training::TrainingError;
use ipa_transfer::transfer::TransferError;
use ipa_transfer::viz::VizError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    StageOrder(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "ConfigError",
            CliError::StageOrder(_) => "StageOrderError",
            CliError::Data(_) => "DataError",
            CliError::Numeric(_) => "NumericError",
            CliError::Io(_) => "IoError",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::StageOrder(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Io(_) => 5,
        }
    }

    /// Single-line JSON for stderr.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string(), "exit_code": self.exit_code() }).to_string()
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<FrontendError> for CliError {
    fn from(e: FrontendError) -> Self {
        match e {
            FrontendError::Io(e) => CliError::Io(e.to_string()),
            FrontendError::BadConfig(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<G2pError> for CliError {
    fn from(e: G2pError) -> Self {
        match e {
            G2pError::Io(e) => CliError::Io(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<PhonesetError> for CliError {
    fn from(e: PhonesetError) -> Self {
        match e {
            PhonesetError::Io(e) => CliError::Io(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<BpeError> for CliError {
    fn from(e: BpeError) -> Self {
        match e {
            BpeError::Io(e) => CliError::Io(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(e) => CliError::Io(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainingError> for CliError {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::Diverged { .. } => CliError::Numeric(e.to_string()),
            TrainingError::BadConfig(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TransferError> for CliError {
    fn from(e: TransferError) -> Self {
        match e {
            TransferError::WrongParentStage { .. } => CliError::StageOrder(e.to_string()),
            TransferError::BadConfig(m) => CliError::Config(m),
            TransferError::Training(t) => t.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io(e) => CliError::Io(e.to_string()),
            EvalError::BadBeam => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<VizError> for CliError {
    fn from(e: VizError) -> Self {
        match e {
            VizError::Io(e) => CliError::Io(e.to_string()),
            VizError::BadPerplexity(_) => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}
