use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // graph construction
    #[error("cycle detected through container `{0}`")]
    CycleDetected(String),
    #[error("container `{container}` references unknown tool `{tool}`")]
    UnknownTool { container: String, tool: String },
    #[error("container `{0}` is not reachable from the entry")]
    UnreachableContainer(String),
    #[error("unknown container `{0}`")]
    UnknownContainer(String),
    #[error("duplicate container id `{0}`")]
    DuplicateContainer(String),
    #[error("duplicate edge `{0}` -> `{1}`")]
    DuplicateEdge(String, String),
    #[error("container `{0}` has an empty tool list")]
    EmptyToolList(String),
    #[error("tool `{tool}` has signature {tool_type} but container `{container}` is {container_type}")]
    SignatureMismatch {
        container: String,
        tool: String,
        container_type: String,
        tool_type: String,
    },
    #[error("unknown container type `{0}`")]
    UnknownContainerType(String),
    #[error("unknown position `{0}`")]
    UnknownPosition(String),
    #[error("invalid routing policy: {0}")]
    InvalidRouting(String),
    #[error("invalid tool definition `{tool}`: {reason}")]
    InvalidTool { tool: String, reason: String },

    // execution
    #[error("routing names container `{0}` which has no memory entry")]
    RoutingFieldMissing(String),
    #[error("tool `{tool}` failed: {reason}")]
    ToolFailure { tool: String, reason: String },
    #[error("action is not a tool invocation")]
    NotAnInvocation,

    // memory
    #[error("memory step {step} is not after last step {last}")]
    NonMonotonicStep { step: u32, last: u32 },

    // numerics
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("chosen action at step {step} has zero probability")]
    ZeroProbabilityAction { step: usize },
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(f64),

    // environment / training
    #[error("expert action is not legal at position `{0}`")]
    IllegalExpertAction(String),
    #[error("plan requires a {0} container reachable at this position")]
    PlanNotRealizable(String),
    #[error("suite is empty")]
    EmptySuite,

    // harness
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint was trained on graph {found}, current graph is {expected}")]
    GraphFingerprintMismatch { expected: String, found: String },
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
    #[error("trace sink unavailable: {0}")]
    SinkUnavailable(String),
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
