use thiserror::Error;

use crate::domain::{Address, WrapId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("wrap {0} is already open")]
    DuplicateOpen(WrapId),

    #[error("wrap {0} is not open")]
    NotOpen(WrapId),

    #[error("protocol violation: {0}")]
    ProtocolViolation(String),

    #[error("crash tick {tick} outside trace bounds (last tick {last})")]
    OutOfRange { tick: u64, last: u64 },

    #[error("corrupt log record for wrap {wrap} slot {slot}: {reason}")]
    CorruptLog {
        wrap: WrapId,
        slot: u32,
        reason: String,
    },

    #[error("write set of {entries} entries exceeds log slot capacity {capacity}")]
    LogOverflow { entries: usize, capacity: usize },

    #[error("oracle bound exceeded: {count} committed wraps, limit {limit}")]
    ScaleLimit { count: usize, limit: usize },

    #[error("address {0} is outside the configured address space")]
    BadAddress(Address),

    #[error("simulation deadlock at tick {0}: no runnable thread")]
    Deadlock(u64),

    #[error("malformed image file: {0}")]
    BadImage(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
