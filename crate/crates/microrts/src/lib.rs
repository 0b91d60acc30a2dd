//! A small deterministic real-time-strategy skirmish on a square board.
//!
//! Two players each start with a base, a worker and two fighters. Actions are
//! structured ([`ArgsAction`]) and are expressed in the acting player's own
//! frame of reference, so both players see the board as if they started in
//! the top-left corner.

mod action;
mod config;
mod env;
mod error;
mod obs;
pub mod policy;
pub mod replay;
pub mod rules;

pub use action::{ActionType, ArgsAction, TargetKind, NUM_ACTION_TYPES};
pub use config::EnvConfig;
pub use env::{Env, StepResult, Unit, UnitKind};
pub use error::EnvError;
pub use obs::{
    coord_to_index, index_to_coord, ActionMasks, Observation, ENTITY_FEATURES, NUM_PLANES,
    SCALAR_LAYOUT, SCALAR_SIZE,
};
pub use policy::{GreedyPolicy, Policy, RandomPolicy};
