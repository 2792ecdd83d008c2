//! Monte Carlo laboratory: population generators, design samplers,
//! replicate execution and table metrics.

pub mod copula;
pub mod generators;
pub mod metrics;
pub mod presets;
pub mod runner;
pub mod sampling;

pub use generators::{GeneratorSpec, ObservationGaussianParams, Population, SubjectPoissonParams};
pub use metrics::{MetricsRow, MetricsTable};
pub use presets::{preset, PRESETS};
pub use runner::{run_replicate, run_scenario, Arm, Estimator, FitSpec, Misspecification, SimScenario};
pub use sampling::{apply_design, design_probabilities, DesignKind, SamplingTargets};
