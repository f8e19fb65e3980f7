//! Conditional score estimation.

pub mod basis;
pub mod location_scale;
pub mod spline;

pub use basis::{basis_len, fit_basis_score, quadratic_basis, BasisScoreModel};
pub use location_scale::{
    fit_location_scale_score, fit_location_scale_score_with, known_family_score, ConditionalScoreModel, FnScore,
    LocationScaleFit, LocationScaleSpec, UnivariateScore,
};
pub use spline::{fit_spline_score, SplineScoreModel};
