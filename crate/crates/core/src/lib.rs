//! Confidence-aware preference construction for conversational robustness.
//!
//! The crate samples responses from a [`backend::Backend`], estimates
//! question-side uncertainty ([`estimators`], [`regressor`]), combines it with
//! an answer-side probability ratio ([`bce`]), turns the resulting confidence
//! into stance preference pairs ([`prefs`]), trains on them with a DPO
//! objective ([`dpo`]) and evaluates multi-turn robustness and calibration
//! ([`eval`]). [`pipeline`] chains the stages with on-disk artifacts.

pub mod backend;
pub mod bce;
pub mod corpus;
pub mod dpo;
pub mod error;
pub mod estimators;
pub mod eval;
pub mod io;
pub mod prefs;
pub mod pipeline;
pub mod prompts;
pub mod regressor;
pub mod seed;

pub use error::{Error, Result};
