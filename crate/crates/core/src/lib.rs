//! Lightweight vertical federated learning simulator.
//!
//! `K` clients hold disjoint feature columns of the same samples. Each trains a
//! small dense feature model whose embeddings feed a server-side head model.
//! Every round, clients upload magnitude-pruned embeddings (ratio `beta`) and
//! structurally prune their feature models (ratio `alpha`), then run `E` local
//! SGD iterations against the stale embeddings of the other parties.
//!
//! Module map:
//! - [`nn`]: dense networks with masks, reverse mode, SGD.
//! - [`pruning`]: l1 neuron pruning and per-row embedding sparsification.
//! - [`protocol`]: the round/iteration state machine with byte accounting.
//! - [`metrics`]: lightweighting errors, FLOPs, bound-term sums, CSV.
//! - [`data`]: synthetic, CSV and quadrant-split vertical datasets.
//! - [`oracle`]: monolithic joint-model SGD used as an equivalence check.
//! - [`cli`]: config files, `run`/`compare`/`oracle` commands and plots.

pub mod cli;
pub mod data;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod par;
pub mod plot;
pub mod protocol;
pub mod pruning;

pub use data::VerticalDataset;
pub use metrics::MetricsRecord;
pub use nn::{DenseLayer, DenseNetwork, FeatureModel, GradientSet, Matrix};
pub use protocol::{ProtocolConfig, RoundPlan, Simulator};
pub use pruning::{PruneDecision, SparseEmbedding};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{field}: {message}")]
    Field { field: String, message: String },
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
    #[error("training aborted at round {round}, iteration {iteration}: {reason}")]
    Aborted {
        round: usize,
        iteration: usize,
        reason: String,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Field {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
