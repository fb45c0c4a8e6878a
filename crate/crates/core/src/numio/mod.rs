//! File formats shared by every stage: a little-endian tensor container,
//! caption-pair records in CSV or JSONL, and the run configuration.

mod config;
mod records;
mod tensor;

pub use config::{load_config, save_config, RunConfig};
pub use records::{
    read_records, read_records_csv, read_records_jsonl, write_records_csv, write_records_jsonl,
    CaptionPairRecord, RecordFormat, RECORD_FIELDS,
};
pub use tensor::{load_tensor, read_tensor, save_tensor, write_tensor, Dtype, TensorData, TensorFile};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumioError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not a tensor file")]
    BadMagic,
    #[error("unknown dtype tag {0}")]
    BadDtype(u8),
    #[error("shape {shape:?} implies {expected} values but payload has {actual}")]
    ShapePayloadMismatch { shape: Vec<usize>, expected: usize, actual: usize },
    #[error("tensor body truncated: expected {expected} more bytes")]
    Truncated { expected: usize },
    #[error("trailing bytes after tensor payload")]
    TrailingBytes,
    #[error("tensor too large: shape {shape:?} overflows addressable size")]
    TooLarge { shape: Vec<u64> },
    #[error("line {line}: {msg}")]
    Record { line: u64, msg: String },
    #[error("header mismatch: expected `{expected}`, found `{found}`")]
    Header { expected: String, found: String },
    #[error("config: {0}")]
    Config(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}
