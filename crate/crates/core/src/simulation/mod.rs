//! Simulation designs, evaluation metrics and the replication harness.

pub mod designs;
pub mod harness;
pub mod metrics;

pub use designs::{
    gen_causal, gen_iv, gen_iv_diagnostic, gen_quantile, generate, DesignKind, DesignSpec,
    SimulatedData, Truth,
};
pub use harness::{fit_method, run, FittedMethod, HarnessConfig, HarnessReport, Method, ResultRow};
pub use metrics::{coverage, mse};
