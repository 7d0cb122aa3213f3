use thiserror::Error;

use crate::frontend::ParseError;
use crate::sections::{Section, SectionError};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Section(#[from] SectionError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("invalid runtime configuration: {0}")]
    Config(String),
    #[error("array `{0}` already exists")]
    DuplicateArray(String),
    #[error("unknown array `{0}`")]
    UnknownArray(String),
    #[error("invalid shape {0:?}: extents must be >= 1 and at most 3 dimensions")]
    BadShape(Vec<usize>),
    #[error("unknown partition {0}")]
    UnknownPartition(u32),
    #[error("invalid partition: {0}")]
    BadPartition(String),
    #[error("manual partition regions of devices {0} and {1} overlap")]
    PartitionOverlap(usize, usize),
    #[error("region {region} lies outside domain {domain:?}")]
    OutOfBounds { region: Section, domain: Vec<usize> },
    #[error("user data has {got} cells, array `{array}` has {expected}")]
    DataShape { array: String, expected: usize, got: usize },
    #[error("no declaration for kernel `{0}`")]
    UnknownKernel(String),
    #[error("kernel `{0}` is already registered")]
    DuplicateKernel(String),
    #[error("kernel `{0}` is declared but has no registered function")]
    UnregisteredKernel(String),
    #[error("kernel `{kernel}` needs array `{formal}` bound to an HDArray")]
    UnboundArray { kernel: String, formal: String },
    #[error("offset tuple arity {got} does not match array dimensionality {expected}")]
    Arity { expected: usize, got: usize },
    #[error("array `{array}` is not declared {kind}@ in kernel `{kernel}`")]
    NotAbsolute { kernel: String, array: String, kind: &'static str },
    #[error("kernel `{kernel}` declares {kind}@ for `{array}` but no absolute sections were set for device {device}")]
    MissingAbsolute { kernel: String, array: String, kind: &'static str, device: usize },
    #[error("invalid trapezoid: {0}")]
    BadTrapezoid(String),
    #[error("unknown device {device} (nprocs = {nprocs})")]
    UnknownDevice { device: usize, nprocs: usize },
    #[error("race in kernel `{kernel}` on `{array}`: process {p} {what} cells defined by process {q}")]
    Race { kernel: String, array: String, p: usize, q: usize, what: &'static str },
    #[error("kernel `{kernel}` on process {process}: {op} of `{array}` at {index:?} is outside the declared {set}")]
    Access { kernel: String, process: usize, array: String, index: Vec<i64>, op: &'static str, set: &'static str },
    #[error("reduction over an empty region has no identity for {0:?}")]
    EmptyReduction(crate::runtime::ReduceOp),
    #[error("coherence invariant violated: {0}")]
    Incoherent(String),
    #[error("scenario line {line}: {msg}")]
    Scenario { line: usize, msg: String },
    #[error("stats comparison: {0}")]
    StatsMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
