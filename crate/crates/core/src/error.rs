use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("invalid model parameters: {0}")]
    Params(String),

    #[error("sensor {sensor} coincides with dipole location (distance {distance:.3e} cm)")]
    DipoleSingularity { sensor: usize, distance: f64 },

    #[error("ROI does not cover prior mass: all initial densities underflow")]
    PriorUnderflow,

    #[error("transition row for voxel {voxel} fully underflows")]
    TransitionUnderflow { voxel: usize },

    #[error("forward recursion underflow at step {step}: total probability is zero")]
    ForwardUnderflow { step: usize },

    #[error("singular system in A-update (condition number estimate {cond:.3e})")]
    SingularAUpdate { cond: f64 },

    #[error("covariance not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("simulation rejected {attempts} consecutive draws at step {step}: source cannot stay inside the head model")]
    RejectionExhausted { step: usize, attempts: usize },

    #[error("joint state space too large: {size} states exceeds cap {cap}; use the switch procedure")]
    JointStateCap { size: usize, cap: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
