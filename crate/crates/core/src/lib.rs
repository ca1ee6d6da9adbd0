//! Probabilistic workflow sampling over a typed tool supernet.
//!
//! A masked categorical controller walks a DAG of tool containers, choosing
//! at each step which tool to invoke next or whether to stop. The controller
//! is trained in three phases (behavior cloning, contrastive path ranking,
//! cost-aware REINFORCE) and evaluated on synthetic task suites whose optimal
//! workflows are known by construction.
//!
//! Module map:
//!
//! - [`supernet`]: containers, tools, routing, legal actions, tool I/O.
//! - [`memory`]: bounded summarized-evidence buffer.
//! - [`encoder`]: frozen feature extractors, projections and layer norm.
//! - [`policy`]: masked softmax head, sampling, trajectory log-probability.
//! - [`optim`]: parameter store, gradients, clipping, AdamW, cosine schedule.
//! - [`environment`]: synthetic suites, simulated tools, rewards, expert.
//! - [`training`]: the three-phase curriculum.
//! - [`runtime`]: inference loop, answer marginals, audit traces.
//! - [`harness`]: evaluation, Pareto sweeps, ablations, checkpoints, config.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod encoder;
pub mod environment;
pub mod error;
pub mod harness;
pub mod memory;
pub mod optim;
pub mod policy;
pub mod runtime;
pub mod supernet;
pub mod tensor;
pub mod training;
mod util;

pub use error::{Error, Result};
