use std::fmt;

/// Crate-wide result alias.
pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Everything that can go wrong while building, simulating or optimizing a network.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// The network or scenario document could not be parsed.
    #[error("syntax error{}: {message}", location(*line, field.as_deref()))]
    Syntax {
        line: Option<usize>,
        field: Option<String>,
        message: String,
    },

    /// A structural or physical invariant of the network is violated.
    #[error("validation error: {0}")]
    Validation(String),

    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Matrix assembly failed (for example a singular volume matrix).
    #[error("assembly error: {0}")]
    Assembly(String),

    /// The friction term was evaluated at a non-positive outlet density.
    #[error("singular friction term on edge {edge}: outlet density {density}")]
    SingularFriction { edge: usize, density: f64 },

    /// A Newton-type iteration did not converge.
    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e}){}", hint.as_ref().map(|h| format!("; {h}")).unwrap_or_default())]
    Convergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
        hint: Option<String>,
    },

    /// The requested steady state or optimization problem has no feasible point.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// The linear programming backend reported a failure.
    #[error("solver failure: {0}")]
    Solver(String),

    /// An internal consistency identity failed beyond tolerance.
    #[error("identity violated: {0}")]
    Identity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn location(line: Option<usize>, field: Option<&str>) -> String {
    match (line, field) {
        (Some(l), Some(f)) => format!(" at line {l}, field `{f}`"),
        (Some(l), None) => format!(" at line {l}"),
        (None, Some(f)) => format!(" in field `{f}`"),
        (None, None) => String::new(),
    }
}

impl Error {
    pub(crate) fn validation(msg: impl fmt::Display) -> Self {
        Error::Validation(msg.to_string())
    }

    pub(crate) fn domain(msg: impl fmt::Display) -> Self {
        Error::Domain(msg.to_string())
    }

    /// True for errors caused by malformed or invalid user input.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Syntax { .. }
                | Error::Validation(_)
                | Error::Domain(_)
                | Error::Io(_)
                | Error::Csv(_)
        )
    }
}
