use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid case {case_id}: {reason}")]
    InvalidCase { case_id: u64, reason: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("need at least 3 outlier conditions, found {found}")]
    InsufficientOutliers { found: usize },

    #[error("no split satisfied the desiderata after {attempts} attempts")]
    SplitInfeasible { attempts: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("label {0} is not part of the head's class layout")]
    UnknownLabel(u32),

    #[error("scorer not applicable: {0}")]
    WrongScorer(String),

    #[error("class {class} has {count} training samples, need at least 2")]
    DegenerateClass { class: u32, count: usize },

    #[error("metric undefined: {0}")]
    Undefined(String),

    #[error("score sets are not aligned: {0}")]
    Alignment(String),

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("experiment is incomplete: missing {0}")]
    IncompleteExperiment(String),

    #[error("runs are not comparable: {0}")]
    IncomparableRuns(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage: stage.to_string(),
                source: Box::new(e),
            },
        }
    }
}
