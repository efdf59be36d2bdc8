//! Synthetic exposure-bias worlds with known relevance and exposure, and
//! Monte Carlo oracles built on them.

mod oracle;
mod world;

pub use oracle::{
    causality_audit, clip_bias_variance, collect_samples, evenly_spaced, ideal_loss, ideal_loss_oracle, true_weight,
    unbiasedness_check, variance_check, ClipPoint, OracleReport, OracleSample, VarianceSummary, MAX_EXACT_ITEMS,
    MIN_REPLICATIONS,
};
pub use world::{
    generate_world, simulate_log, Access, ExposureParams, ExposureState, SimulatedLog, SyntheticWorld, WorldConfig,
};
