use thiserror::Error;

#[derive(Debug, Error)]
pub enum FidvrError {
    #[error("degenerate voltage: |V| = {v_mag} pu is at or below the floor of {floor} pu")]
    DegenerateVoltage { v_mag: f64, floor: f64 },

    #[error("singular network: {0}")]
    SingularNetwork(String),

    #[error("voltage collapse: no fixed point after {iterations} iterations (last |V| = {last_v_mag:.6} pu)")]
    VoltageCollapse { iterations: usize, last_v_mag: f64 },

    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },

    #[error("not a delayed-recovery event: {0}")]
    NotFidvr(String),

    #[error("recovery not complete: {0}")]
    NotRecovered(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("no motor-D stock in the composition (f_md = 0)")]
    NoMotor,

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("infeasible target: {0}")]
    InfeasibleTarget(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl FidvrError {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        FidvrError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad input (configuration, schema, arguments)
    /// rather than by the computation itself.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            FidvrError::Invalid { .. } | FidvrError::Toml(_) | FidvrError::Csv(_) | FidvrError::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, FidvrError>;
