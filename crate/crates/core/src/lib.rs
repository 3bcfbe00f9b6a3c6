//! Adversarial false-data-injection game on droop-controlled grid frequency
//! dynamics.
//!
//! An adversary rewrites one inverter droop gain at a time; a defender
//! localizes the attacked bus from the residual of an LSTM one-step state
//! predictor. Both are trained concurrently with PPO, with a supervised
//! offline detector as baseline and optional warm start.
//!
//! Numeric code is generic over [`Scalar`] (`f32`/`f64`). The aliases at the
//! crate root fix double precision; the `*32` variants are single precision,
//! which roughly halves training time.

pub mod attack;
pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod grid;
pub mod io;
pub mod marl;
pub mod nn;
pub mod offline;
pub mod policy;
pub mod ppo;
pub mod predictor;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Grid = grid::GridParams<f64>;
pub type State = grid::SystemState<f64>;
pub type Predictor = predictor::LstmPredictor<f64>;
pub type Classifier = offline::OfflineClassifier<f64>;
pub type Policy = policy::PolicyNet<f64>;

pub type Grid32 = grid::GridParams<f32>;
pub type State32 = grid::SystemState<f32>;
pub type Predictor32 = predictor::LstmPredictor<f32>;
pub type Classifier32 = offline::OfflineClassifier<f32>;
pub type Policy32 = policy::PolicyNet<f32>;
