//! Estimation of the retail/wholesale split of bank deposits from per-bank
//! panel data, and forecasting of the split from macroeconomic drivers.
//!
//! The pipeline has two stages. First, a generative model assumes the account
//! balances at each bank arise from a mixture of two lognormal distributions
//! (retail and wholesale); small neural networks map observable bank features
//! to the five mixture parameters per bank-quarter, and the networks are
//! trained so that metrics simulated from the mixture match the reported ones.
//! Second, a four-lag zero-bias linear regression predicts quarter-over-quarter
//! changes of the estimated retail and wholesale deposit series from reserves,
//! loans, and retail loans.
//!
//! Module map:
//! - [`quarter`], [`panel`]: shared domain types (calendar quarters, bank
//!   records, the dense panel with presence mask, mixture parameters, priors)
//! - [`ingest`]: CSV parsing, filtering rules, feature computation, panel
//!   assembly with frozen normalization statistics
//! - [`lognormal`]: closed-form lognormal math used both in the loss and as
//!   independent test oracles
//! - [`mlp`]: one-hidden-layer network with manual backpropagation
//! - [`dgm`]: the generative model (loss, training, inference, aggregation)
//! - [`benchmark`]: the $500M branch-threshold baseline split
//! - [`timeseries`]: lagged zero-bias regression and impact tables
//! - [`synth`]: synthetic-data generators with planted ground truth
//! - [`checkpoint`]: text checkpoint format for trained models

pub mod benchmark;
pub mod checkpoint;
pub mod dgm;
mod error;
pub mod ingest;
pub mod lognormal;
pub mod mlp;
pub mod panel;
pub mod quarter;
pub(crate) mod rng;
pub mod synth;
pub mod timeseries;

pub use error::{Error, Result};
pub use panel::{BankPanel, BankRecord, FeatureVector, MixtureParams, PriorSchedule};
pub use quarter::{quarter_range, Quarter};
