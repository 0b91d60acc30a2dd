//! Scripted players.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::action::{ActionType, ArgsAction, TargetKind};
use crate::env::{chebyshev, Env};
use crate::error::EnvError;
use crate::obs::{index_to_coord, Observation};
use crate::rules::ATTACK_RANGE;

pub trait Policy {
    fn name(&self) -> String;

    /// Chooses an action for `player` given its observation. Implementations
    /// may also inspect the full game through `env`.
    fn act(&mut self, env: &Env, player: usize, obs: &Observation) -> Result<ArgsAction, EnvError>;

    /// Called at the start of every game.
    fn reset(&mut self) {}
}

fn valid_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, v)| **v).map(|(i, _)| i).collect()
}

/// Uniformly random over everything the masks allow.
#[derive(Clone, Debug)]
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        RandomPolicy { rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Policy for RandomPolicy {
    fn name(&self) -> String {
        "random".into()
    }

    fn act(&mut self, env: &Env, player: usize, obs: &Observation) -> Result<ArgsAction, EnvError> {
        let cfg = env.config();
        let masks = &obs.masks;
        let types = valid_indices(&masks.action_type);
        if types.is_empty() {
            return Err(EnvError::NoValidAction(player));
        }
        let t = ActionType::from_index(types[self.rng.gen_range(0..types.len())]).expect("type index");
        let ti = t.index();
        let mut action = ArgsAction::noop();
        action.action_type = t;
        action.delay = self.rng.gen_range(1..=cfg.max_delay);
        action.queue = masks.queue[ti] && self.rng.gen_bool(0.5);
        if t.selects_units() {
            let slots = valid_indices(&masks.units[ti]);
            let k = self.rng.gen_range(1..=slots.len().min(cfg.max_selected));
            action.selected_units = sample(&mut self.rng, slots.len(), k)
                .into_iter()
                .map(|i| obs.entity_ids[slots[i]].expect("valid slot"))
                .collect();
        }
        match t.target() {
            TargetKind::Unit => {
                let slots = valid_indices(&masks.target_unit[ti]);
                let s = slots[self.rng.gen_range(0..slots.len())];
                action.target_unit = obs.entity_ids[s];
            }
            TargetKind::Location => {
                let pixels = valid_indices(&masks.location[ti]);
                let p = pixels[self.rng.gen_range(0..pixels.len())];
                action.target_location = Some(index_to_coord(p, cfg.minimap_size));
            }
            TargetKind::None => {}
        }
        Ok(action)
    }
}

/// Builds a fighter when it can; otherwise sends every fighter at the
/// nearest enemy, attacking when in range and moving toward it when not.
#[derive(Clone, Debug, Default)]
pub struct GreedyPolicy;

impl Policy for GreedyPolicy {
    fn name(&self) -> String {
        "greedy".into()
    }

    fn act(&mut self, env: &Env, _player: usize, obs: &Observation) -> Result<ArgsAction, EnvError> {
        let cfg = env.config();
        let masks = &obs.masks;
        let ids = |mask: &[bool]| -> Vec<u32> {
            valid_indices(mask).into_iter().map(|s| obs.entity_ids[s].expect("valid slot")).collect()
        };
        let build = ActionType::Build.index();
        if masks.action_type[build] {
            let worker = ids(&masks.units[build])[0];
            let pixel = valid_indices(&masks.location[build])[0];
            return Ok(ArgsAction {
                action_type: ActionType::Build,
                selected_units: vec![worker],
                target_location: Some(index_to_coord(pixel, cfg.minimap_size)),
                ..ArgsAction::noop()
            });
        }
        let attack = ActionType::Attack.index();
        if masks.action_type[attack] {
            let mut fighters = ids(&masks.units[attack]);
            fighters.truncate(cfg.max_selected);
            let pos = |id: u32| env.unit(id).expect("live unit").pos();
            let (dist, target) = ids(&masks.target_unit[attack])
                .into_iter()
                .map(|e| (fighters.iter().map(|f| chebyshev(pos(*f), pos(e))).min().unwrap_or(usize::MAX), e))
                .min()
                .expect("attack mask has a target");
            if dist <= ATTACK_RANGE {
                return Ok(ArgsAction {
                    action_type: ActionType::Attack,
                    selected_units: fighters,
                    target_unit: Some(target),
                    ..ArgsAction::noop()
                });
            }
            let goal = pos(target);
            let mv = ActionType::Move.index();
            let pixel = valid_indices(&masks.location[mv])
                .into_iter()
                .min_by_key(|p| {
                    let px = index_to_coord(*p, cfg.minimap_size);
                    let cell = env.to_ego(obs.player, env.pixel_to_cell(px));
                    (chebyshev(cell, goal), cell.0.abs_diff(goal.0) + cell.1.abs_diff(goal.1))
                })
                .expect("move mask has a cell");
            return Ok(ArgsAction {
                action_type: ActionType::Move,
                selected_units: fighters,
                target_location: Some(index_to_coord(pixel, cfg.minimap_size)),
                ..ArgsAction::noop()
            });
        }
        Ok(ArgsAction::noop())
    }
}
