//! Fixed game constants.

pub const WORKER_HEALTH: u32 = 2;
pub const FIGHTER_HEALTH: u32 = 4;
pub const BASE_HEALTH: u32 = 8;
pub const MAX_HEALTH: u32 = BASE_HEALTH;

pub const ATTACK_DAMAGE: u32 = 1;
/// Chebyshev distance at which fighters can hit.
pub const ATTACK_RANGE: usize = 1;
pub const ATTACK_COOLDOWN: u32 = 2;

/// Minerals added per living worker per frame.
pub const WORKER_INCOME: u32 = 1;
pub const FIGHTER_COST: u32 = 12;
/// Maximum number of units (bases included) a player may own.
pub const SUPPLY_CAP: usize = 6;
/// Queue length at which the per-unit queue feature saturates.
pub const QUEUE_NORM: usize = 4;
/// Mineral count at which the mineral feature saturates.
pub const MINERAL_NORM: f32 = 48.0;
