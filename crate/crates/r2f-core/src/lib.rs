//! Desk-scale unlearning laboratory for a small decoder-only transformer.
//!
//! The pipeline: pretrain a proxy and a target model on a synthetic fact
//! corpus, collect (LoRA gradient, full gradient) supervision pairs on the
//! proxy, train a per-projection gradient decoder, then forget target facts
//! with a single reconstructed-gradient step and evaluate forgetting,
//! utility, relearning resistance, and behavioral drift.

pub mod config;
pub mod container;
pub mod corpus;
pub mod decoder;
pub mod eval;
pub mod gradients;
pub mod model;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod tape;
pub mod tensor;
pub mod unlearn;

pub use tensor::Tensor;

/// Crate-wide error type. Variants map onto distinct CLI exit codes
/// (config, convergence, incompatibility, numerical).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {detail}")]
    ShapeMismatch { context: String, detail: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("unknown input binding '{0}'")]
    UnknownInput(String),
    #[error("loss node is not scalar")]
    LossNotScalar,
    #[error("node {0} is not part of this graph")]
    DisconnectedNode(usize),
    #[error("token {token} out of range for vocab {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("target distribution not normalized (sum {0})")]
    UnnormalizedTarget(f64),
    #[error("LoRA rank {rank} exceeds d_model/4 = {max}")]
    RankTooLarge { rank: usize, max: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("incompatible artifacts: {0}")]
    Incompatible(String),
    #[error("convergence failure: {0}")]
    Convergence(String),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("container error: {0}")]
    Container(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable process exit code per error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Corpus(_) => 2,
            Error::Convergence(_) => 3,
            Error::Incompatible(_) | Error::Container(_) => 4,
            Error::NonFinite(_) | Error::Divergence(_) | Error::UnnormalizedTarget(_) => 5,
            _ => 1,
        }
    }
}
