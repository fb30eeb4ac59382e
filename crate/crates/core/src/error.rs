use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("nodes without outgoing edges: {0:?}")]
    NoOutgoingEdges(Vec<u64>),

    #[error("unknown node {0}")]
    UnknownNode(u64),

    #[error("node {from} cannot reach node {to}")]
    Unreachable { from: u64, to: u64 },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("node {0} is not mapped to any region")]
    UnmappedNode(u64),

    #[error("node {0} is mapped to more than one region")]
    DuplicateMapping(u64),

    #[error("unknown region {0}")]
    UnknownRegion(u64),

    #[error("invalid request {id}: {msg}")]
    InvalidRequest { id: u64, msg: String },

    #[error("unknown vehicle {0}")]
    UnknownVehicle(usize),

    #[error("vehicle {vehicle} would carry {load} passengers with capacity {capacity}")]
    CapacityExceeded {
        vehicle: usize,
        load: usize,
        capacity: usize,
    },

    #[error("malformed matching instance: {0}")]
    MalformedInstance(String),

    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("not a probability vector (sum {0})")]
    NotNormalized(f64),

    #[error("empty sample set")]
    EmptySamples,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}
