use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("model: dimension mismatch in `{field}`: {detail}")]
    DimensionMismatch { field: String, detail: String },

    #[error("model: `{matrix}` is not {requirement} at node {node} (smallest eigenvalue {min_eigenvalue:e})")]
    IndefiniteWeight { matrix: String, node: usize, requirement: &'static str, min_eigenvalue: f64 },

    #[error("model: nonfinite entry in `{field}` at node {node}")]
    NonfiniteEntry { field: String, node: usize },

    #[error("model: invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("riccati: factor `{factor}` is singular at node {node} (condition {cond:e})")]
    SingularFactor { factor: String, node: usize, cond: f64 },

    #[error("{module}: nonfinite value in `{equation}` near node {node} (blowup)")]
    NonfiniteBlowup { module: &'static str, equation: String, node: usize },

    #[error("fit: degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("bsde: terminal class `{0}` is not supported by the affine backend")]
    UnsupportedTerminal(String),

    #[error("bsde: observable `{0}` is referenced but not declared")]
    UndeclaredObservable(String),

    #[error("bsde: regression Gram matrix rank deficient at node {node} (condition {cond:e})")]
    RankDeficientRegression { node: usize, cond: f64 },

    #[error("population: reconstruction factor `{factor}` ill-conditioned at node {node} (condition {cond:e})")]
    SingularReconstruction { factor: String, node: usize, cond: f64 },

    #[error("io: {0}")]
    Io(String),
}

impl Error {
    /// Module the error originates from, used by the CLI to map exit codes.
    pub fn module(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. }
            | Error::IndefiniteWeight { .. }
            | Error::NonfiniteEntry { .. }
            | Error::InvalidConfig(_) => "model",
            Error::SingularFactor { .. } => "riccati",
            Error::NonfiniteBlowup { module, .. } => module,
            Error::DegenerateFit(_) => "fit",
            Error::UnsupportedTerminal(_)
            | Error::UndeclaredObservable(_)
            | Error::RankDeficientRegression { .. } => "bsde",
            Error::SingularReconstruction { .. } => "population",
            Error::Io(_) => "io",
        }
    }

    pub fn is_validation(&self) -> bool {
        self.module() == "model"
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
