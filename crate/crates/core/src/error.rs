use thiserror::Error;

/// A single configuration problem, located by a JSON path such as `plants[1].Vmax`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("invalid plant parameters for plant {plant}: {message}")]
    Params { plant: usize, message: String },

    #[error("invalid time grid: {0}")]
    Grid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("infeasible input: {0}")]
    Infeasible(String),

    #[error("step size underflow at t = {time} (plant {plant})")]
    StepUnderflow { time: f64, plant: usize },

    #[error("non-finite state at t = {time} (plant {plant})")]
    NonFinite { time: f64, plant: usize },

    #[error("event location failed: {0}")]
    EventLocation(String),

    #[error("value outside the analysed regime: {0}")]
    Regime(String),

    #[error("configuration errors:\n{}", format_issues(.0))]
    Config(Vec<ConfigIssue>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_issues(issues: &[ConfigIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("  {i}"))
        .collect::<Vec<_>>()
        .join("\n")
}

impl Error {
    /// True for problems with user input rather than numerical failures.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Topology(_)
                | Error::Params { .. }
                | Error::Grid(_)
                | Error::Json(_)
                | Error::Regime(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
