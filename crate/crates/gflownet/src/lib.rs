//! Training and exact verification of generative flow networks on
//! enumerable DAG environments.
//!
//! The library provides a tabular DAG substrate with dynamic-programming
//! oracles ([`dag`], [`flow`]), two benchmark environments ([`envs`]),
//! differentiable balance objectives over a minimal gradient tape
//! ([`objectives`], [`tape`], [`model`]), a seeded training loop
//! ([`training`]), and evaluation metrics plus experiment configuration
//! ([`metrics`], [`config`]).

pub mod checkpoint;
pub mod config;
pub mod dag;
pub mod envs;
pub mod flow;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod run;
pub mod tape;
pub mod training;
