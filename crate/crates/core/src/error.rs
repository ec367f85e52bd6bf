use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error at {line}:{column}: {message}")]
    Syntax { line: usize, column: usize, message: String },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("reference to undefined `{name}` in {context}")]
    UndefinedReference { name: String, context: String },

    #[error("cycle detected in computation `{0}`")]
    Cycle(String),

    #[error("verification failed:\n{}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("\n"))]
    Verify(Vec<crate::ir::Diagnostic>),

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("transform error: {0}")]
    Transform(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
