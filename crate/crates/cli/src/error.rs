use step_core::planner::PlanError;
use step_core::trainer::TrainError;
use thiserror::Error;

/// Process exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    InvalidInput,
    Infeasible,
    Diverged,
}

impl ExitKind {
    pub fn code(self) -> i32 {
        match self {
            ExitKind::InvalidInput => 2,
            ExitKind::Infeasible => 3,
            ExitKind::Diverged => 4,
        }
    }
}

/// An error with the exit status it maps to.
#[derive(Debug, Error)]
#[error("{inner:#}")]
pub struct CliError {
    pub kind: ExitKind,
    pub inner: anyhow::Error,
}

impl CliError {
    pub fn new(kind: ExitKind, source: anyhow::Error) -> Self {
        Self { kind, inner: source }
    }

    pub fn invalid(e: impl Into<anyhow::Error>) -> Self {
        Self::new(ExitKind::InvalidInput, e.into())
    }

    pub fn infeasible(e: impl Into<anyhow::Error>) -> Self {
        Self::new(ExitKind::Infeasible, e.into())
    }

    pub fn diverged(e: impl Into<anyhow::Error>) -> Self {
        Self::new(ExitKind::Diverged, e.into())
    }

    pub fn code(&self) -> i32 {
        self.kind.code()
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let kind = match e {
            TrainError::Diverged { .. } => ExitKind::Diverged,
            _ => ExitKind::InvalidInput,
        };
        Self::new(kind, e.into())
    }
}

impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        let kind = match e {
            PlanError::Infeasible { .. } | PlanError::BudgetTooSmall { .. } => ExitKind::Infeasible,
            _ => ExitKind::InvalidInput,
        };
        Self::new(kind, e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::invalid(e)
    }
}
