//! Policy network, supervised and reinforcement learning, and league
//! training for the microrts environment.

pub mod config;
pub mod error;
pub mod league;
pub mod net;

pub use config::NetConfig;
pub use error::CoreError;
pub mod rl;
pub mod sl;
