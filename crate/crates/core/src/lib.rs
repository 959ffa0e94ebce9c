pub mod error;
pub mod evolution;
pub mod experiment;
pub mod gridworld;
pub mod marl;
pub mod metrics;
pub mod nnet;
pub mod policy;
pub mod seeding;
pub mod signal_game;

pub use error::{Error, Result};
