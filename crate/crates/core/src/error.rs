use std::fmt;

/// Errors raised anywhere in the hotfix pipeline.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    Shape(String),
    /// A non-finite value reached an operation that requires finite input.
    Numeric(String),
    /// A weighted loss was requested with every weight equal to zero.
    ZeroMass,
    /// Rows that should be probability distributions are not normalized.
    Distribution(String),
    /// Optimizer or graph state is inconsistent (e.g. missing gradient).
    State(String),
    /// Invalid caller input (token ids, empty prompts, bad counts).
    Input(String),
    /// Sequence longer than the model context.
    Length { len: usize, max: usize },
    /// Adapter specification is invalid for the model.
    Spec(String),
    /// Buggy and fixed versions do not form a usable substitution pair.
    DegeneratePair(String),
    /// Malformed input data; `line` is 1-based when known.
    Parse { line: Option<usize>, message: String },
    /// Statistical test cannot run on the given data.
    InsufficientData(String),
    /// Percent change requested against a zero baseline.
    UndefinedBaseline,
    /// Invalid run configuration, naming the offending field.
    Config(String),
    /// Adapter and base model do not belong together.
    Compatibility(String),
    /// Checkpoint file does not follow the expected layout.
    Format(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::ZeroMass => write!(f, "zero-mass error: all loss weights are zero"),
            Error::Distribution(m) => write!(f, "distribution error: {m}"),
            Error::State(m) => write!(f, "state error: {m}"),
            Error::Input(m) => write!(f, "input error: {m}"),
            Error::Length { len, max } => {
                write!(f, "length error: sequence of {len} tokens exceeds context of {max}")
            }
            Error::Spec(m) => write!(f, "adapter spec error: {m}"),
            Error::DegeneratePair(m) => write!(f, "degenerate pair: {m}"),
            Error::Parse { line: Some(l), message } => write!(f, "parse error on line {l}: {message}"),
            Error::Parse { line: None, message } => write!(f, "parse error: {message}"),
            Error::InsufficientData(m) => write!(f, "insufficient data: {m}"),
            Error::UndefinedBaseline => write!(f, "percent change undefined for a zero baseline"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Compatibility(m) => write!(f, "compatibility error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

/// Reads a whole file; the error names the path.
pub fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn read_text(path: &std::path::Path) -> Result<String> {
    String::from_utf8(read_file(path)?).map_err(|_| Error::Format(format!("{}: not valid UTF-8", path.display())))
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse { line: None, message: e.to_string() }
    }
}
