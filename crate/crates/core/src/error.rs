use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("pixel ({x}, {y}) out of bounds for {width}x{height} field")]
    OutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("image {height}x{width} too small for stride {stride}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        stride: usize,
    },

    #[error("pyramid strides must be non-decreasing powers of two, got {0:?}")]
    StrideOrder(Vec<usize>),

    #[error("degenerate warp: {0}")]
    DegenerateWarp(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: &'static str,
        expected: u32,
        found: u32,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
