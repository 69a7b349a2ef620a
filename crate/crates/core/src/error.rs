use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate correspondence: {0}")]
    DegenerateCorrespondence(&'static str),
    #[error("corner {corner} projects to w = {w:e}, below the projective floor")]
    ProjectiveDegenerate { corner: usize, w: f64 },
    #[error("singular matrix (|det| = {0:e})")]
    SingularMatrix(f64),
    #[error("homography cannot be normalized: bottom-right entry vanishes")]
    NotNormalizable,
    #[error("invalid corner frame: three corners are collinear")]
    DegenerateFrame,
    #[error("image too small: {width}x{height}, need at least {min}x{min}")]
    ImageTooSmall { width: usize, height: usize, min: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("unknown feature transform `{0}`")]
    UnknownTransform(String),
    #[error("empty shift set")]
    EmptyShiftSet,
    #[error("invalid search radius {0}: 2r+1 must be a perfect square")]
    InvalidRadius(usize),
    #[error("input too large for the global correlation oracle: {0} positions")]
    InputTooLarge(usize),
    #[error("insufficient correspondences: {got} usable, need 4")]
    InsufficientCorrespondences { got: usize },
    #[error("degenerate configuration: inlier set is collinear")]
    DegenerateConfiguration,
    #[error("validity mask selects no pixels")]
    EmptyMask,
    #[error("crop {x},{y} size {size} with margin {margin} exceeds {width}x{height} source")]
    CropOutOfBounds { x: usize, y: usize, size: usize, margin: f64, width: usize, height: usize },
    #[error("quadrilateral is self-intersecting")]
    DegenerateQuad,
    #[error("no co-registered source pairs found in {0}")]
    NoSourcePairs(PathBuf),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid coupling parameters: {0}")]
    InvalidParams(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Codec { path: PathBuf, source: image::ImageError },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
