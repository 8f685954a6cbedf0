use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("tiff error: {0}")]
    Tiff(#[from] tiff::TiffError),

    #[error("png error: {0}")]
    Png(#[from] png::EncodingError),

    #[error("inconsistent page dimensions: page {page} is {found:?}, expected {expected:?}")]
    InconsistentPages {
        page: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("fewer than 2 frames (found {0})")]
    TooFewFrames(usize),

    #[error("non-grayscale data: {0}")]
    NonGrayscale(String),

    #[error("negative intensity {value} at frame {frame}")]
    NegativeIntensity { frame: usize, value: f64 },

    #[error("invalid calibration: {0}")]
    InvalidCalibration(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate steering vector at ({x}, {y}, {z}) nm")]
    DegenerateSteeringVector { x: f64, y: f64, z: f64 },

    #[error("window exceeds image: center {center:?}, side {side}, image {height}x{width}")]
    WindowOutOfBounds {
        center: (usize, usize),
        side: usize,
        height: usize,
        width: usize,
    },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("decomposition has fewer than 2 singular values")]
    TooFewSingularValues,

    #[error("empty singular value list")]
    EmptyList,

    #[error("degenerate soft bounds: sigma_min = {sigma_min}, sigma_max = {sigma_max}")]
    DegenerateSoftBounds { sigma_min: f64, sigma_max: f64 },

    #[error("cardinality undefined for soft thresholding")]
    CardinalityUndefined,

    #[error("image {height}x{width} is smaller than window side {side}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        side: usize,
    },

    #[error("no windows left after filtering by mean intensity >= {0}")]
    NoWindows(f64),

    #[error("peaks not found: {0}")]
    PeaksNotFound(String),

    #[error("all-zero image")]
    AllZeroImage,

    #[error("invalid scene: {0}")]
    InvalidScene(String),
}
