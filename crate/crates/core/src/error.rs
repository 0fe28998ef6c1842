use thiserror::Error;

/// Errors surfaced by every module of the kit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {layer}: expected {expected:?}, got {actual:?}")]
    Shape {
        layer: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("backward called on {0} without a retained forward state")]
    NoForwardState(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("threshold {0} outside [0.5, 1]")]
    ThresholdRange(f64),

    #[error("validation set contains a single class; accuracy is degenerate")]
    SingleClass,

    #[error("no valid crop after {0} attempts")]
    CropFailed(usize),

    #[error("object placement infeasible: {0}")]
    Placement(String),

    #[error(
        "image {height}x{width} not divisible into {tile_h}x{tile_w} tiles; pad to {pad_h}x{pad_w}"
    )]
    TileSize {
        height: usize,
        width: usize,
        tile_h: usize,
        tile_w: usize,
        pad_h: usize,
        pad_w: usize,
    },

    #[error("accumulator overflow risk in {layer}: worst case {bound} exceeds i32 range")]
    Overflow { layer: String, bound: i128 },

    #[error("invalid container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("png: {0}")]
    Png(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
