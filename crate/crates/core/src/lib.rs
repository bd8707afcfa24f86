//! Differentially private decentralized SGD over time-varying directed
//! graphs.
//!
//! Nodes run push-sum stochastic gradient descent with per-sample clipping
//! and Gaussian noise. The noise schedule is calibrated by a Gaussian-DP
//! accountant so that the whole run meets a target `(ε, δ)`; the dynamic
//! schedules shrink the clipping bound and grow the per-step budget as
//! training proceeds.
//!
//! ```
//! use pushdp::accountant::PrivacySpec;
//! use pushdp::engine::{run, Initialization, RunConfig};
//! use pushdp::models::{synth_dataset, Model, SupervisedTask};
//! use pushdp::schedule::{build_schedule, Variant};
//! use pushdp::topology::GraphSchedule;
//!
//! let (n, local, iterations) = (4, 50, 100);
//! let privacy = PrivacySpec::new(3.0, 1e-4, local, iterations)?;
//! let schedule = build_schedule(Variant::Dyn, privacy, 1.0, 2.0, 2.0)?;
//! let task = SupervisedTask::new(
//!     Model::Logistic { d_in: 2, classes: 2 },
//!     synth_dataset(0, n, local, 2, 2),
//! );
//! let config = RunConfig {
//!     step_size: 0.05,
//!     iterations,
//!     seed: 1,
//!     steps: schedule.table(),
//!     graph: GraphSchedule::Exponential { n },
//!     noise_enabled: true,
//!     init: Initialization::Zeros,
//!     workers: 1,
//! };
//! let log = run(&task, &config)?;
//! assert_eq!(log.rows.len(), iterations);
//! # Ok::<(), pushdp::Error>(())
//! ```

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod engine;
pub mod metrics;
pub mod models;
pub mod schedule;
pub mod topology;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Accountant(#[from] accountant::AccountantError),
    #[error(transparent)]
    Topology(#[from] topology::TopologyError),
    #[error(transparent)]
    Engine(#[from] engine::EngineError),
    #[error(transparent)]
    Dataset(#[from] models::DatasetError),
}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/privacy.md")]
    mod privacy {}
    #[doc = include_str!("../../../book/src/schedules.md")]
    mod schedules {}
    #[doc = include_str!("../../../book/src/graphs.md")]
    mod graphs {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
