use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {what}: {message}")]
    Parse { what: String, message: String },
    #[error("duplicate condition index {0}")]
    DuplicateConditionIndex(u32),
    #[error("condition index {0} out of range 1..=20")]
    ConditionIndexOutOfRange(u32),
    #[error("unsupported excitation wavelength {0} nm")]
    UnsupportedWavelength(u32),
    #[error("mask condition {0} is not present in the manifest")]
    MissingMaskCondition(u32),
    #[error("pixel scale must be positive, got {0}")]
    NonPositivePixelScale(f64),
    #[error("manifest has no conditions")]
    EmptyManifest,
    #[error("failed to decode image {path}: {message}")]
    ImageDecode { path: PathBuf, message: String },
    #[error("dimension mismatch: expected {expected_w}x{expected_h}, got {got_w}x{got_h}{context}")]
    DimensionMismatch {
        expected_w: u32,
        expected_h: u32,
        got_w: u32,
        got_h: u32,
        context: String,
    },
    #[error(
        "registration unreliable for condition {condition}: correlation peak at ({dx}, {dy}) \
         lies outside the ±{max_shift} px search window"
    )]
    RegistrationBoundary {
        condition: u32,
        dx: i64,
        dy: i64,
        max_shift: u32,
    },
    #[error("registration leaves no common overlap")]
    EmptyOverlap,
    #[error("need at least {k} feature vectors for k-means, got {n}")]
    TooFewPixels { n: usize, k: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("region {0} is empty")]
    EmptyRegion(u32),
    #[error("region {region} pixel ({x}, {y}) lies outside the {width}x{height} stack")]
    RegionOutOfBounds {
        region: u32,
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    },
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    FeatureDimension { expected: usize, got: usize },
    #[error("class {0} has no samples")]
    EmptyClass(String),
    #[error("duplicate class name {0}")]
    DuplicateClass(String),
    #[error("library is empty")]
    EmptyLibrary,
    #[error("class {0} has no pixel-level covariance; extract with pixel covariance enabled")]
    MissingPixelCovariance(String),
    #[error("covariance for {0} is not positive definite after regularization")]
    NotPositiveDefinite(String),
    #[error("unsupported library schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("distance is not finite")]
    NonFinite,
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("reference list is empty")]
    EmptyList,
    #[error("size thresholds must be positive and strictly ascending")]
    BadThresholds,
    #[error("at least two classes are needed for a distance matrix")]
    TooFewClasses,
    #[error("unknown class {0} in scene")]
    UnknownClass(String),
    #[error("could not place particle {index} after {attempts} attempts")]
    PlacementFailed { index: usize, attempts: usize },
    #[error("label map holds {0} regions, more than a 16-bit raster can encode")]
    TooManyRegions(usize),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(what: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            what: what.into(),
            message: message.to_string(),
        }
    }
}
