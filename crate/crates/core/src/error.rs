use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("non-finite value produced at node `{node}`")]
    NonFinite { node: String },

    #[error("gradient norm vanished; cannot scale the ascent direction")]
    GradientVanished,

    #[error("zero vector passed where a direction is required")]
    ZeroVector,

    #[error("step start slope {slope} is not a descent direction")]
    NotDescent { slope: f64 },

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("relabeled construction too weak: kept fraction {kept:.4} < 0.5")]
    ConstructionWeak { kept: f64 },

    #[error("only {available} examples classified correctly by all targets, need {requested}")]
    InsufficientCorrect { available: usize, requested: usize },

    #[error("both samples have zero variance")]
    DegenerateVariance,

    #[error("group `{0}` needs at least 2 records")]
    GroupTooSmall(String),

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("file format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("run failed: {0}")]
    Run(String),
}

impl Error {
    /// Process exit code for the CLI: 2 for configuration problems, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidSpec(_) => 2,
            _ => 3,
        }
    }
}
