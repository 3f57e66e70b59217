//! Photon-statistics simulator of decoy-state BB84 over graded-index
//! multimode fibre, with the vacuum + weak-decoy asymptotic key-rate analysis.
//!
//! Pipeline: [`domain`] patterns are emitted by the [`transmitter`], carried
//! by the [`channel`], detected by the [`receiver`] and reduced by
//! [`analysis`] into QBER and gain, from which [`keyrate`] bounds the secure
//! key rate. [`sim`] runs acquisitions, [`experiment`] runs sweeps and
//! stability series, and [`calibrate`] fits the free model parameters.

pub mod analysis;
pub mod calibrate;
pub mod channel;
pub mod domain;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod keyrate;
pub mod receiver;
pub mod rng;
pub mod sim;
pub mod transmitter;

pub use error::{Error, Result};
pub use exec::Execution;
pub use rng::SeededRng;
pub use sim::ModelParams;
