//! Verification suites shared by the command line and the acceptance gate.

mod gradients;
mod properties;
mod routing;

pub use gradients::{cases as gradient_cases, gradient_suite, GradCase, GRADIENT_TOLERANCE, STEP};
pub use properties::{
    diffeomorphism_stats, diffeomorphism_suite, equivariance_stats, equivariance_suite, euler_gaussian_flow,
    metric_identity_suite, rigidity_stats, rigidity_suite, selection_suite, DiffeoStats, EquivarianceStats,
    PropertyCheck, EQUIVARIANCE_TOLERANCE, SELECTION_FIXTURES,
};
pub use routing::{
    allowed, expected, route_config, routing_pair, routing_suite, wake_heads, RouteCheck, ROUTING_CONFIGS,
};
