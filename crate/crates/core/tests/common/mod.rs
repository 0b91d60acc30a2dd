#![allow(dead_code)]

use mas_core::net::NetAction;
use mas_core::NetConfig;
use microrts::{ActionType, Env, Observation, Policy, RandomPolicy, TargetKind};

/// Observations from a game between two random players, both views per frame.
pub fn random_game(cfg: &NetConfig, seed: u64, frames: usize) -> Vec<[Observation; 2]> {
    let mut env = Env::new(cfg.env_config(512), seed).unwrap();
    let mut obs = env.reset(seed);
    let mut players = [RandomPolicy::new(seed * 2 + 1), RandomPolicy::new(seed * 2 + 2)];
    let mut out = vec![obs.clone()];
    for _ in 0..frames {
        let a0 = players[0].act(&env, 0, &obs[0]).unwrap();
        let a1 = players[1].act(&env, 1, &obs[1]).unwrap();
        let r = env.step([&a0, &a1]).unwrap();
        obs = r.observations;
        out.push(obs.clone());
        if r.is_final {
            break;
        }
    }
    out
}

pub fn first(mask: &[bool]) -> Option<usize> {
    mask.iter().position(|v| *v)
}

/// The simplest valid action of type `t`, if any.
pub fn simple_action(obs: &Observation, t: ActionType) -> Option<NetAction> {
    let ti = t.index();
    if !obs.masks.action_type[ti] {
        return None;
    }
    let mut a = NetAction { action_type: ti, delay: 0, queue: false, units: vec![], target_unit: None, location: None };
    if t.selects_units() {
        a.units = vec![first(&obs.masks.units[ti])?];
    }
    match t.target() {
        TargetKind::Unit => a.target_unit = Some(first(&obs.masks.target_unit[ti])?),
        TargetKind::Location => a.location = Some(first(&obs.masks.location[ti])?),
        TargetKind::None => {}
    }
    Some(a)
}
