//! Crate-wide error type with stable machine-readable codes.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point is behind the camera (depth {depth:.6e})")]
    BehindCamera { depth: f64 },

    #[error("pixel ({u:.2}, {v:.2}) falls outside the {width}x{height} image")]
    OutOfImage {
        u: f64,
        v: f64,
        width: usize,
        height: usize,
    },

    #[error("degenerate depth range: near {near:.6} to far {far:.6}")]
    DegenerateRange { near: f64, far: f64 },

    #[error("joint '{joint}' angle {value:.4} outside [{lo:.4}, {hi:.4}] rad")]
    JointLimit {
        joint: String,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("no feasible grasp: {reason}")]
    GraspInfeasible { reason: String },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("feature volume has no entries")]
    EmptyVolume,

    #[error("dimension mismatch: {what}")]
    DimMismatch { what: String },

    #[error("field inputs inconsistent with the ablation mask: {what}")]
    MaskMismatch { what: String },

    #[error("supervision mask has no object pixels")]
    NoObjectPixels,

    #[error("training diverged at iteration {iteration}: loss is not finite")]
    DivergedTraining { iteration: usize },

    #[error("mesh has no faces")]
    EmptyMesh,

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("{0}")]
    Io(#[from] std::io::Error),

    #[error("could not parse {what}: {detail}")]
    Parse { what: String, detail: String },
}

impl Error {
    /// One-token code for the CLI's machine-parsable error line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::BehindCamera { .. } => "BehindCamera",
            Error::OutOfImage { .. } => "OutOfImage",
            Error::DegenerateRange { .. } => "DegenerateRange",
            Error::JointLimit { .. } => "JointLimit",
            Error::GraspInfeasible { .. } => "GraspInfeasible",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::EmptyVolume => "EmptyVolume",
            Error::DimMismatch { .. } => "DimMismatch",
            Error::MaskMismatch { .. } => "MaskMismatch",
            Error::NoObjectPixels => "NoObjectPixels",
            Error::DivergedTraining { .. } => "DivergedTraining",
            Error::EmptyMesh => "EmptyMesh",
            Error::EmptyCloud => "EmptyCloud",
            Error::Io(_) => "Io",
            Error::Parse { .. } => "Parse",
        }
    }
}

pub(crate) fn parse_err(what: &str, detail: impl std::fmt::Display) -> Error {
    Error::Parse {
        what: what.to_string(),
        detail: detail.to_string(),
    }
}
