use thiserror::Error;

/// Usage errors: a caller broke an operation's precondition.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("capacity must be at least 1")]
    ZeroCapacity,
    #[error("grow requires top <= bottom < top + capacity (top {top}, bottom {bottom}, capacity {capacity})")]
    GrowRange { top: u64, bottom: u64, capacity: usize },
    #[error("index pair requires 1 <= top <= bottom (top {top}, bottom {bottom})")]
    IndexOrder { top: u64, bottom: u64 },
}
