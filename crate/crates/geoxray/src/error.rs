//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GxError {
    /// Point or coordinate outside the closed unit disk / admissible range.
    #[error("domain error: {0}")]
    Domain(String),

    /// A geodesic failed to leave the disk within the trapping guard time.
    #[error("geodesic from (x={x:.6}, y={y:.6}, theta={theta:.6}) did not exit within t_max={t_max}")]
    Trapped { x: f64, y: f64, theta: f64, t_max: f64 },

    /// NaN or non-finite value produced by an integrator or operator.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Two objects built over incompatible grids were combined.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// Neumann iteration diverged; carries the per-iteration step norms.
    #[error("iteration diverged after {} steps (last step norm {:.3e})", history.len(), history.last().copied().unwrap_or(f64::NAN))]
    Diverged { history: Vec<f64> },

    /// Attenuation too small on too much of the requested support mask.
    #[error("attenuation below threshold {threshold:.3e} on {fraction:.1}% of the mask")]
    WeakAttenuation { threshold: f64, fraction: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("file format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GxError>;
