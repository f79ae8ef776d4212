use std::path::PathBuf;

/// Errors raised anywhere in the lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("episode finished")]
    EpisodeFinished,
    #[error("non-finite action component {0}")]
    NonFinite(f64),
    #[error("token {token} out of range for {bins} bins")]
    TokenOutOfRange { token: u32, bins: u32 },
    #[error("numeric overflow")]
    NumericOverflow,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("relabel applies to interaction data only")]
    RelabelExpert,
    #[error("batch not divisible by 4")]
    BatchNotDivisible,
    #[error("empty sample class: {0}")]
    EmptyClass(&'static str),
    #[error("batch too small: need at least {needed}, got {got}")]
    BatchTooSmall { needed: usize, got: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("config: {0}")]
    Config(String),
    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },
    #[error("expert failure rate {rate:.3} exceeds {limit:.3}")]
    ExpertFailureRate { rate: f64, limit: f64 },
    #[error("no expert trajectories")]
    NoExpertData,
    #[error("intervention class is empty; fall back to behavior cloning")]
    NoInterventions,
    #[error("intervenor unavailable")]
    IntervenorUnavailable,
    #[error("no interaction steps")]
    NoInteractionData,
    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("bridge: {0}")]
    Bridge(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
