use std::sync::Arc;

use microrts::replay::play_game;
use microrts::{EnvConfig, Policy};
use ndgrad::ParamStore;

use crate::error::CoreError;
use crate::net::{NetPolicy, PolicyNet};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalResult {
    pub wins: usize,
    pub draws: usize,
    pub losses: usize,
}

impl EvalResult {
    pub fn games(&self) -> usize {
        self.wins + self.draws + self.losses
    }

    pub fn win_rate(&self) -> f64 {
        self.wins as f64 / self.games().max(1) as f64
    }

    /// Wins plus half the draws, per game.
    pub fn score(&self) -> f64 {
        (self.wins as f64 + 0.5 * self.draws as f64) / self.games().max(1) as f64
    }
}

/// Plays `games` seeded games of the network against `opponent`,
/// alternating sides. The network samples its actions.
pub fn evaluate(
    net: &Arc<PolicyNet>,
    params: &ParamStore,
    opponent: &mut dyn Policy,
    env_config: &EnvConfig,
    games: usize,
    seed: u64,
) -> Result<EvalResult, CoreError> {
    let mut result = EvalResult::default();
    for g in 0..games {
        let game_seed = seed.wrapping_add(g as u64);
        let mut agent = NetPolicy::new(Arc::clone(net), params.clone(), game_seed ^ 0xa5a5, "agent");
        let side = g % 2;
        let replay = if side == 0 {
            play_game(env_config, game_seed, [&mut agent as &mut dyn Policy, opponent])?
        } else {
            play_game(env_config, game_seed, [opponent, &mut agent as &mut dyn Policy])?
        };
        let r = if side == 0 { replay.result } else { -replay.result };
        match r.signum() {
            1 => result.wins += 1,
            0 => result.draws += 1,
            _ => result.losses += 1,
        }
    }
    Ok(result)
}
