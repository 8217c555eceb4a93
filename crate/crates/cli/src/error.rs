use std::fmt;
use std::io;
use std::path::Path;

use ism_core::asa::AsaError;
use ism_core::pathint::PathintError;
use ism_core::population::PopulationError;
use ism_core::risk::RiskError;
use ism_core::smni::SmniError;

/// Machine-readable failure class; each maps to a distinct exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Usage,
    MissingFile,
    Parse,
    Validation,
    Model,
    Io,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Usage => 2,
            Category::MissingFile => 3,
            Category::Parse => 4,
            Category::Validation => 5,
            Category::Model => 6,
            Category::Io => 7,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Usage => "usage",
            Category::MissingFile => "missing_file",
            Category::Parse => "parse",
            Category::Validation => "validation",
            Category::Model => "model",
            Category::Io => "io",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn new(category: Category, message: impl Into<String>) -> Self {
        Self { category, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(Category::Usage, message)
    }

    pub fn parse(message: impl Into<String>) -> Self {
        Self::new(Category::Parse, message)
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(Category::Validation, message)
    }

    pub fn model(message: impl Into<String>) -> Self {
        Self::new(Category::Model, message)
    }

    /// Missing files get their own category; other read failures are I/O.
    pub fn read(path: &Path, err: io::Error) -> Self {
        let category = if err.kind() == io::ErrorKind::NotFound { Category::MissingFile } else { Category::Io };
        Self::new(category, format!("{}: {err}", path.display()))
    }

    /// The single stderr line printed on failure.
    pub fn line(&self) -> String {
        let msg = self.message.replace(['\n', '\r'], " ");
        format!("ism-error category={} message={}", self.category.as_str(), msg.trim())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.category.as_str(), self.message)
    }
}

impl std::error::Error for CliError {}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        Self::new(Category::Io, e.to_string())
    }
}

impl From<SmniError> for CliError {
    fn from(e: SmniError) -> Self {
        match e {
            SmniError::InvalidParams(_) => Self::validation(e.to_string()),
            _ => Self::model(e.to_string()),
        }
    }
}

impl From<AsaError> for CliError {
    fn from(e: AsaError) -> Self {
        match e {
            AsaError::DegenerateBounds { .. } => Self::model(e.to_string()),
            _ => Self::validation(e.to_string()),
        }
    }
}

impl From<PathintError> for CliError {
    fn from(e: PathintError) -> Self {
        match e {
            PathintError::Dynamics(inner) => inner.into(),
            PathintError::Io(inner) => inner.into(),
            PathintError::Csv(_) => Self::parse(e.to_string()),
            PathintError::InvalidGrid(_) | PathintError::InvalidInput(_) | PathintError::BandTooNarrow { .. } => {
                Self::validation(e.to_string())
            }
            PathintError::GridMismatch => Self::model(e.to_string()),
        }
    }
}

impl From<PopulationError> for CliError {
    fn from(e: PopulationError) -> Self {
        match e {
            PopulationError::Config(_) | PopulationError::Input(_) => Self::validation(e.to_string()),
            PopulationError::Model(inner) => inner.into(),
            PopulationError::Asa(inner) => inner.into(),
            PopulationError::Grid(inner) => inner.into(),
        }
    }
}

impl From<RiskError> for CliError {
    fn from(e: RiskError) -> Self {
        match e {
            RiskError::InvalidModel(_) | RiskError::InvalidInput(_) => Self::validation(e.to_string()),
            RiskError::Degenerate(_) | RiskError::NotPositiveDefinite(_) => Self::model(e.to_string()),
            RiskError::Asa(inner) => inner.into(),
        }
    }
}
