use std::sync::Arc;

use ndgrad::optim::AdamConfig;
use ndgrad::ParamStore;
use rayon::prelude::*;

use super::{League, MatchAssignment, PlayerId};
use crate::error::CoreError;
use crate::net::{NetPolicy, PolicyNet};
use crate::rl::{Actor, Learner, Opponent, RlLossConfig, Snapshot, UpdateMetrics};

#[derive(Clone, Debug)]
pub struct LeagueRunConfig {
    /// Total matches across all learners.
    pub matches: usize,
    pub max_game_frames: u32,
    pub loss: RlLossConfig,
    pub adam: AdamConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchRecord {
    pub round: usize,
    pub assignment: MatchAssignment,
    /// Game result from the learner's side.
    pub outcome: i32,
    pub frames: u32,
    pub updates: Vec<UpdateMetrics>,
    pub checkpoint: Option<PlayerId>,
}

impl MatchRecord {
    pub fn csv_header() -> &'static str {
        "round,timestamp,learner,opponent,weighting,outcome,frames,updates,checkpoint"
    }

    pub fn csv_row(&self) -> String {
        let a = &self.assignment;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.round,
            a.timestamp,
            a.learner,
            a.opponent,
            a.weighting.map_or("direct".to_string(), |w| w.to_string()),
            self.outcome,
            self.frames,
            self.updates.len(),
            self.checkpoint.map_or(String::new(), |c| c.to_string())
        )
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
}

/// Trains every active player of the league in rounds. Each round assigns
/// one opponent per active player, plays the matches in parallel, then
/// reports results and checks checkpoints in player order, so a run is
/// reproducible from its seed. `reference` is the frozen policy used by the
/// KL term. `on_match` returning false stops the run after the current
/// round.
pub fn run_league(
    league: &mut League,
    net: Arc<PolicyNet>,
    reference: ParamStore,
    cfg: &LeagueRunConfig,
    mut on_match: impl FnMut(&MatchRecord, &League) -> bool,
) -> Result<Vec<MatchRecord>, CoreError> {
    let env = net.config.env_config(cfg.max_game_frames);
    let mut learners: Vec<(PlayerId, Learner)> = league
        .active()
        .into_iter()
        .map(|id| {
            let params = league.players()[id].params.clone();
            let l = Learner::new(Arc::clone(&net), params, cfg.loss.clone(), cfg.adam.clone())
                .with_reference(Arc::clone(&net), reference.clone());
            (id, l)
        })
        .collect();
    let mut records = Vec::new();
    let mut round = 0;
    let mut go_on = true;
    while go_on && records.len() < cfg.matches {
        let take = learners.len().min(cfg.matches - records.len());
        let mut jobs = Vec::with_capacity(take);
        for (id, _) in &learners[..take] {
            let a = league.assign(*id)?;
            jobs.push((a.clone(), league.players()[a.opponent].params.clone()));
        }
        let played: Vec<Result<(i32, u32, Vec<UpdateMetrics>), CoreError>> = learners[..take]
            .par_iter_mut()
            .zip(jobs.par_iter())
            .map(|((id, learner), (a, opp_params))| {
                let seed = mix(cfg.seed, round as u64, *id as u64);
                let (opp_net, opp_params) = (Arc::clone(&net), opp_params.clone());
                let factory = Box::new(move |_: &mut rand_chacha::ChaCha8Rng| {
                    let p = NetPolicy::new(Arc::clone(&opp_net), opp_params.clone(), seed ^ 0x0bb0, "opponent");
                    Opponent::Policy(Box::new(p))
                });
                let mut actor = Actor::new(a.timestamp as usize, Arc::clone(&net), env.clone(), seed, factory);
                let snapshot = Snapshot { version: learner.version(), params: learner.params.clone() };
                let (trajs, result) = actor.play_match(&snapshot)?;
                let mut updates = Vec::new();
                for t in trajs {
                    if let Some(m) = learner.push(t)? {
                        updates.push(m);
                    }
                }
                Ok((result.reward.signum() as i32, result.frames, updates))
            })
            .collect();
        for (((id, learner), (a, _)), res) in learners[..take].iter().zip(jobs).zip(played) {
            let (outcome, frames, updates) = res?;
            league.report(a.learner, a.opponent, outcome)?;
            league.add_steps(*id, frames as u64)?;
            league.set_params(*id, learner.params.clone())?;
            let checkpoint = league.maybe_checkpoint(*id)?;
            let record = MatchRecord { round, assignment: a, outcome, frames, updates, checkpoint };
            go_on &= on_match(&record, league);
            records.push(record);
        }
        round += 1;
    }
    Ok(records)
}
