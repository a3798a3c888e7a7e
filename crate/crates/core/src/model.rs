//! End-to-end model fitting: knots, basis, penalized fit (fixed or automatic
//! smoothing) and covariance.

use crate::basis::{
    anchor_at_origin, data_knots, equidistant_knots, gaussian_scales, BasisError, BasisSystem,
    KnotSequence,
};
use crate::inference::{fit_covariance, CovarianceReport, InferenceError};
use crate::likelihood::{LikelihoodError, Problem};
use crate::optimizer::{fit, FitError, FitOptions, FitResult};
use crate::smoothing::{auto_fit, AutoFit, SmoothingError, SmoothingOptions};
use crate::survdata::{time_support, DataError, Dataset};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Smoothing(#[from] SmoothingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum BasisChoice {
    MSpline { order: usize },
    Gaussian { zeta_interior: f64, zeta_boundary: f64 },
}

impl Default for BasisChoice {
    fn default() -> Self {
        BasisChoice::MSpline { order: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnotPlacement {
    /// Equal quantiles of the finite positive endpoints.
    #[default]
    Quantile,
    /// Equal spacing between the endpoint extremes.
    Equidistant,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaChoice {
    #[default]
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub basis: BasisChoice,
    /// `None` picks `round(n^(1/3))`.
    pub n_interior: Option<usize>,
    pub knots: KnotPlacement,
    /// Put the lower boundary knot at 0 regardless of the data.
    pub origin: bool,
    pub lambda: LambdaChoice,
    pub smoothing: SmoothingOptions,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            basis: BasisChoice::default(),
            n_interior: None,
            knots: KnotPlacement::Quantile,
            origin: false,
            lambda: LambdaChoice::Auto,
            smoothing: SmoothingOptions::default(),
        }
    }
}

impl ModelSpec {
    pub fn fit_options(&self) -> &FitOptions {
        &self.smoothing.fit
    }
}

/// Rule-of-thumb interior knot count, roughly the cube root of `n`.
pub fn auto_n_interior(n: usize) -> usize {
    ((n as f64).cbrt().round() as usize).max(1)
}

pub fn build_knots(data: &Dataset, spec: &ModelSpec) -> Result<KnotSequence, ModelError> {
    let n_interior = spec.n_interior.unwrap_or_else(|| auto_n_interior(data.n()));
    let knots = match spec.knots {
        KnotPlacement::Quantile if n_interior == 0 => {
            let (lo, hi) = time_support(data)?;
            anchor_at_origin(data, KnotSequence::new(vec![lo, hi])?)
        }
        KnotPlacement::Quantile => data_knots(data, n_interior)?,
        KnotPlacement::Equidistant => {
            let (lo, hi) = time_support(data)?;
            let k = if n_interior == 0 {
                KnotSequence::new(vec![lo, hi])?
            } else {
                equidistant_knots(lo, hi, n_interior)?
            };
            anchor_at_origin(data, k)
        }
    };
    if spec.origin && knots.boundary().0 > 0.0 {
        let mut k = knots.knots().to_vec();
        k[0] = 0.0;
        return Ok(KnotSequence::new(k)?);
    }
    Ok(knots)
}

pub fn build_system(data: &Dataset, spec: &ModelSpec) -> Result<BasisSystem, ModelError> {
    let knots = build_knots(data, spec)?;
    let system = match spec.basis {
        BasisChoice::MSpline { order } => BasisSystem::mspline(knots, order)?,
        BasisChoice::Gaussian {
            zeta_interior,
            zeta_boundary,
        } => {
            let scales =
                gaussian_scales(&data.endpoint_pool(), &knots, zeta_interior, zeta_boundary)?;
            BasisSystem::gaussian(knots, scales)?
        }
    };
    Ok(system)
}

#[derive(Debug, Clone)]
pub struct ModelFit {
    pub problem: Problem,
    pub fit: FitResult,
    /// Present when the smoothing value was selected automatically.
    pub smoothing: Option<AutoFit>,
    pub covariance: Result<CovarianceReport, InferenceError>,
}

impl ModelFit {
    pub fn lambda(&self) -> f64 {
        self.fit.state.lambda
    }
}

/// Builds the basis for `data` and fits the model described by `spec`.
pub fn fit_model(data: &Dataset, spec: &ModelSpec) -> Result<ModelFit, ModelError> {
    let system = build_system(data, spec)?;
    let problem = Problem::new(system, data)?;
    let (fit, smoothing) = match spec.lambda {
        LambdaChoice::Fixed(lambda) => (fit(&problem, lambda, spec.fit_options())?, None),
        LambdaChoice::Auto => {
            let auto = auto_fit(&problem, &spec.smoothing)?;
            (auto.fit.clone(), Some(auto))
        }
    };
    let covariance = fit_covariance(&problem, &fit.state);
    Ok(ModelFit {
        problem,
        fit,
        smoothing,
        covariance,
    })
}
