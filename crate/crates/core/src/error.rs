use std::path::PathBuf;

use crate::attention::Stream;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("timestep {t} out of range 0..={max} ({context})")]
    TimestepOutOfRange {
        t: usize,
        max: usize,
        context: &'static str,
    },

    #[error("attention feature cache miss: round {round}, timestep {timestep}, layer {layer}, stream {stream:?}")]
    CacheMiss {
        round: usize,
        timestep: usize,
        layer: usize,
        stream: Stream,
    },

    #[error("attention feature cache entry already written: round {round}, timestep {timestep}, layer {layer}, stream {stream:?}")]
    CacheOverwrite {
        round: usize,
        timestep: usize,
        layer: usize,
        stream: Stream,
    },

    #[error("attention feature cache is frozen")]
    CacheFrozen,

    #[error("unknown attention site: layer {0}")]
    UnknownSite(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown ablation variant `{0}`")]
    UnknownVariant(String),

    #[error("backend `{backend}` failed during {phase} (round {round}, step {step}): {source}")]
    Backend {
        backend: String,
        phase: &'static str,
        round: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("backend error: {0}")]
    Model(String),

    #[error("external scorer `{name}` failed: {message}")]
    ExternalScorer { name: String, message: String },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidDimensions(_) => "invalid_dimensions",
            Error::InvalidSchedule(_) => "invalid_schedule",
            Error::TimestepOutOfRange { .. } => "timestep_out_of_range",
            Error::CacheMiss { .. } => "cache_miss",
            Error::CacheOverwrite { .. } => "cache_overwrite",
            Error::CacheFrozen => "cache_frozen",
            Error::UnknownSite(_) => "unknown_site",
            Error::InvalidConfig(_) => "invalid_config",
            Error::UnknownVariant(_) => "unknown_variant",
            Error::Backend { source, .. } => match source.as_ref() {
                Error::CacheMiss { .. } => "cache_miss",
                _ => "backend",
            },
            Error::Model(_) => "backend",
            Error::ExternalScorer { .. } => "external_scorer",
            Error::Image { .. } | Error::Io { .. } => "io",
            Error::Json { .. } => "json",
        }
    }

    pub fn shape(context: &'static str, expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
