//! Copula risk stack: exponential marginals, Gaussian copula, sampled events,
//! portfolio-return distributions and Q-constrained exposure search.

pub mod copula;
pub mod exposure;
pub mod marginal;
pub mod portfolio;
pub mod special;

use thiserror::Error;

use crate::asa::AsaError;

pub use copula::{
    copula_density, effective_action, estimate_correlation, sample_events, CopulaModel, CorrelationEstimate, Event,
};
pub use exposure::{optimize_exposures, ExposureOutcome, ExposureProblem, FreeExposure, Objective};
pub use marginal::{
    fit_marginal, fit_marginal_asymmetric, from_gaussian, marginal_cdf, marginal_pdf, to_gaussian, MarginalModel,
};
pub use portfolio::{
    build_portfolio_distribution, portfolio_return, portfolio_returns, q_closed_form, risk_report, Binning,
    PortfolioDistribution, PortfolioSpec, Position, RiskReport,
};

#[derive(Debug, Error)]
pub enum RiskError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate: {0}")]
    Degenerate(String),
    #[error("correlation matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error(transparent)]
    Asa(#[from] AsaError),
}
