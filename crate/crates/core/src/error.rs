use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures raised by the estimation pipeline.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("rank-deficient controls: columns {0:?} are linearly dependent on earlier columns")]
    RankDeficient(Vec<usize>),

    #[error("zero variance instrument, index {0}")]
    ZeroVariance(usize),

    #[error("penalty level nonpositive")]
    NonPositivePenalty,

    #[error("zero penalty loadings for instruments {0:?}")]
    ZeroLoadings(Vec<usize>),

    #[error("perfect first-stage fit; refined loadings degenerate")]
    PerfectFit,

    #[error("lasso did not converge after {sweeps} sweeps (kkt gap {kkt_gap:e})")]
    NotConverged {
        sweeps: usize,
        kkt_gap: f64,
        /// Best iterate reached, in f64.
        best: Vec<f64>,
    },

    #[error("too many included regressors: {included} columns for {n} observations")]
    TooManyRegressors { included: usize, n: usize },

    #[error("weak or collinear constructed instruments (condition number {0:e})")]
    WeakInstruments(f64),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("degenerate contrast variance")]
    DegenerateContrast,

    #[error("degenerate residual at tested point")]
    DegenerateResidual,

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("enumeration budget exceeded ({needed} > {budget}); use sampled mode")]
    BudgetExceeded { needed: u128, budget: u128 },

    #[error("infeasible design: {0}")]
    InfeasibleDesign(String),

    #[error("empty grid")]
    EmptyGrid,

    #[error("{half} half: {source}")]
    Half {
        half: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn in_half(self, half: &'static str) -> Error {
        Error::Half {
            half,
            source: Box::new(self),
        }
    }
}
