use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("duplicate individual id {0}")]
    DuplicateId(i64),
    #[error("table has no usable rows")]
    EmptyTable,
    #[error("invalid individual {id}: {reason}")]
    InvalidIndividual { id: i64, reason: String },
    #[error("edge references unknown id {0}")]
    UnknownId(i64),
    #[error("self-loop on id {0}")]
    SelfLoop(i64),
    #[error("duplicate edge {0} -> {1}")]
    DuplicateEdge(i64, i64),
    #[error("column `{0}` is collinear with the other regressors")]
    RankDeficient(String),
    #[error("need at least two clusters, found {0}")]
    TooFewClusters(usize),
    #[error("order condition fails: {instruments} excluded instruments for {endogenous} endogenous regressors")]
    Underidentified { instruments: usize, endogenous: usize },
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("coefficient subset is empty")]
    EmptySubset,
    #[error("unknown coefficient `{0}`")]
    UnknownCoefficient(String),
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("perfect separation: {0}")]
    Separation(String),
    #[error("labels carry no variation (all {0})")]
    DegenerateLabels(u8),
    #[error("{what} did not converge after {iterations} iterations (residual {residual:e}){hint}")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
        hint: &'static str,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
