//! League of main players, exploiters and their frozen checkpoints.

mod payoff;
mod persist;
mod pfsp;
mod run;

use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use ndgrad::checkpoint::checkpoint_hash;
use ndgrad::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::CoreError;

pub use payoff::{PayoffMatrix, Record};
pub use pfsp::{pfsp_probabilities, pfsp_sample, pfsp_weight, Weighting};
pub use run::{run_league, LeagueRunConfig, MatchRecord};

pub type PlayerId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AgentType {
    MainPlayer,
    MainExploiter,
    LeagueExploiter,
}

impl AgentType {
    pub fn name(self) -> &'static str {
        match self {
            AgentType::MainPlayer => "main_player",
            AgentType::MainExploiter => "main_exploiter",
            AgentType::LeagueExploiter => "league_exploiter",
        }
    }
}

impl fmt::Display for AgentType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AgentType {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self, CoreError> {
        [AgentType::MainPlayer, AgentType::MainExploiter, AgentType::LeagueExploiter]
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| CoreError::League(format!("unknown agent type {s:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct LeaguePlayer {
    pub id: PlayerId,
    pub agent_type: AgentType,
    pub params: ParamStore,
    pub is_historical: bool,
    /// The active player a historical checkpoint was taken from.
    pub parent: Option<PlayerId>,
    pub steps_trained: u64,
    /// Value of `steps_trained` at the last checkpoint.
    pub last_checkpoint_steps: u64,
}

impl LeaguePlayer {
    pub fn snapshot_hash(&self) -> String {
        checkpoint_hash(&self.params)
    }
}

/// Which historical players the first main player branch samples from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HistoricalPool {
    All,
    MainPlayers,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeagueConfig {
    pub main_players: usize,
    pub main_exploiters: usize,
    pub league_exploiters: usize,
    /// A main player below this win rate is "too hard to beat".
    pub hard_threshold: f64,
    /// Opponents with fewer games than this count as rarely played.
    pub min_games: u64,
    pub checkpoint_win_rate: f64,
    pub checkpoint_steps: u64,
    pub main_historical_pool: HistoricalPool,
}

impl Default for LeagueConfig {
    fn default() -> Self {
        LeagueConfig {
            main_players: 1,
            main_exploiters: 1,
            league_exploiters: 1,
            hard_threshold: 0.3,
            min_games: 3,
            checkpoint_win_rate: 0.7,
            checkpoint_steps: 50_000,
            main_historical_pool: HistoricalPool::All,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchAssignment {
    pub learner: PlayerId,
    pub opponent: PlayerId,
    /// None when the opponent was picked directly rather than by PFSP.
    pub weighting: Option<Weighting>,
    pub timestamp: u64,
}

/// The two branches of main player matchmaking.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MainBranch {
    Historical,
    MainPlayer,
}

#[derive(Clone, Debug)]
pub struct League {
    pub config: LeagueConfig,
    players: Vec<LeaguePlayer>,
    payoff: PayoffMatrix,
    rng: ChaCha8Rng,
    assignments: u64,
}

impl League {
    /// Every active player starts from `initial`.
    pub fn new(config: LeagueConfig, initial: &ParamStore, seed: u64) -> Result<Self, CoreError> {
        if config.main_players == 0 {
            return Err(CoreError::League("a league needs at least one main player".into()));
        }
        if !(0.0..=1.0).contains(&config.hard_threshold) || !(0.0..=1.0).contains(&config.checkpoint_win_rate) {
            return Err(CoreError::League("thresholds must lie in [0, 1]".into()));
        }
        let types = std::iter::repeat(AgentType::MainPlayer)
            .take(config.main_players)
            .chain(std::iter::repeat(AgentType::MainExploiter).take(config.main_exploiters))
            .chain(std::iter::repeat(AgentType::LeagueExploiter).take(config.league_exploiters));
        let players = types
            .enumerate()
            .map(|(id, agent_type)| LeaguePlayer {
                id,
                agent_type,
                params: initial.clone(),
                is_historical: false,
                parent: None,
                steps_trained: 0,
                last_checkpoint_steps: 0,
            })
            .collect();
        Ok(League { config, players, payoff: PayoffMatrix::new(), rng: ChaCha8Rng::seed_from_u64(seed), assignments: 0 })
    }

    pub fn players(&self) -> &[LeaguePlayer] {
        &self.players
    }

    pub fn player(&self, id: PlayerId) -> Result<&LeaguePlayer, CoreError> {
        self.players.get(id).ok_or_else(|| CoreError::League(format!("no player {id}")))
    }

    pub fn payoff(&self) -> &PayoffMatrix {
        &self.payoff
    }

    pub fn assignments_made(&self) -> u64 {
        self.assignments
    }

    pub fn active(&self) -> Vec<PlayerId> {
        self.players.iter().filter(|p| !p.is_historical).map(|p| p.id).collect()
    }

    pub fn historicals(&self) -> Vec<PlayerId> {
        self.players.iter().filter(|p| p.is_historical).map(|p| p.id).collect()
    }

    pub fn historicals_of(&self, parent: PlayerId) -> Vec<PlayerId> {
        self.players.iter().filter(|p| p.is_historical && p.parent == Some(parent)).map(|p| p.id).collect()
    }

    pub fn main_players(&self) -> Vec<PlayerId> {
        self.players
            .iter()
            .filter(|p| !p.is_historical && p.agent_type == AgentType::MainPlayer)
            .map(|p| p.id)
            .collect()
    }

    fn active_player_mut(&mut self, id: PlayerId) -> Result<&mut LeaguePlayer, CoreError> {
        let p = self.players.get_mut(id).ok_or_else(|| CoreError::League(format!("no player {id}")))?;
        if p.is_historical {
            return Err(CoreError::League(format!("player {id} is a frozen checkpoint")));
        }
        Ok(p)
    }

    pub fn set_params(&mut self, id: PlayerId, params: ParamStore) -> Result<(), CoreError> {
        self.active_player_mut(id)?.params = params;
        Ok(())
    }

    pub fn add_steps(&mut self, id: PlayerId, steps: u64) -> Result<(), CoreError> {
        self.active_player_mut(id)?.steps_trained += steps;
        Ok(())
    }

    /// Records a finished match. `outcome` is from the learner's side.
    pub fn report(&mut self, learner: PlayerId, opponent: PlayerId, outcome: i32) -> Result<(), CoreError> {
        self.player(learner)?;
        self.player(opponent)?;
        self.payoff.report(learner, opponent, outcome);
        Ok(())
    }

    fn pfsp_among(
        &self,
        learner: PlayerId,
        pool: &[PlayerId],
        weighting: Weighting,
        rng: &mut impl Rng,
    ) -> Result<PlayerId, CoreError> {
        let rates: Vec<f64> = pool.iter().map(|o| self.payoff.win_rate(learner, *o)).collect();
        Ok(pool[pfsp_sample(&rates, weighting, rng)?])
    }

    fn uniform(pool: &[PlayerId], rng: &mut impl Rng) -> PlayerId {
        pool[rng.gen_range(0..pool.len())]
    }

    /// Main player matchmaking. `branch` forces one of the two branches;
    /// otherwise each is taken with probability 0.5.
    pub fn choose_main_player(
        &self,
        learner: PlayerId,
        branch: Option<MainBranch>,
        rng: &mut impl Rng,
    ) -> Result<(PlayerId, Option<Weighting>), CoreError> {
        let mains = self.main_players();
        let branch = branch.unwrap_or_else(|| if rng.gen_bool(0.5) { MainBranch::Historical } else { MainBranch::MainPlayer });
        if branch == MainBranch::Historical {
            let pool: Vec<PlayerId> = match self.config.main_historical_pool {
                HistoricalPool::All => self.historicals(),
                HistoricalPool::MainPlayers => self
                    .historicals()
                    .into_iter()
                    .filter(|h| self.players[*h].agent_type == AgentType::MainPlayer)
                    .collect(),
            };
            if pool.is_empty() {
                return Ok((Self::uniform(&mains, rng), None));
            }
            return Ok((self.pfsp_among(learner, &pool, Weighting::Squared, rng)?, Some(Weighting::Squared)));
        }
        let main = Self::uniform(&mains, rng);
        let rare = self.payoff.games(learner, main) < self.config.min_games;
        let hard = self.payoff.win_rate(learner, main) < self.config.hard_threshold;
        let checkpoints = self.historicals_of(main);
        if (rare || hard) && !checkpoints.is_empty() {
            return Ok((self.pfsp_among(learner, &checkpoints, Weighting::Variance, rng)?, Some(Weighting::Variance)));
        }
        Ok((main, None))
    }

    pub fn choose_main_exploiter(
        &self,
        learner: PlayerId,
        rng: &mut impl Rng,
    ) -> Result<(PlayerId, Option<Weighting>), CoreError> {
        let main = Self::uniform(&self.main_players(), rng);
        if self.payoff.win_rate(learner, main) > 0.1 {
            return Ok((main, None));
        }
        let checkpoints = self.historicals_of(main);
        if checkpoints.is_empty() {
            return Ok((main, None));
        }
        Ok((self.pfsp_among(learner, &checkpoints, Weighting::Variance, rng)?, Some(Weighting::Variance)))
    }

    pub fn choose_league_exploiter(
        &self,
        learner: PlayerId,
        rng: &mut impl Rng,
    ) -> Result<(PlayerId, Option<Weighting>), CoreError> {
        let pool = self.historicals();
        if pool.is_empty() {
            return Ok((Self::uniform(&self.active(), rng), None));
        }
        Ok((self.pfsp_among(learner, &pool, Weighting::LinearCapped, rng)?, Some(Weighting::LinearCapped)))
    }

    /// Picks the next opponent for an active player using the league's own
    /// random stream.
    pub fn assign(&mut self, learner: PlayerId) -> Result<MatchAssignment, CoreError> {
        let kind = {
            let p = self.player(learner)?;
            if p.is_historical {
                return Err(CoreError::League(format!("player {learner} is a frozen checkpoint")));
            }
            p.agent_type
        };
        let mut rng = self.rng.clone();
        let (opponent, weighting) = match kind {
            AgentType::MainPlayer => self.choose_main_player(learner, None, &mut rng)?,
            AgentType::MainExploiter => self.choose_main_exploiter(learner, &mut rng)?,
            AgentType::LeagueExploiter => self.choose_league_exploiter(learner, &mut rng)?,
        };
        self.rng = rng;
        let timestamp = self.assignments;
        self.assignments += 1;
        Ok(MatchAssignment { learner, opponent, weighting, timestamp })
    }

    /// Freezes a copy of an active player when it beats every other
    /// historical player more than the configured rate, or when enough
    /// steps have passed since its last checkpoint.
    pub fn maybe_checkpoint(&mut self, id: PlayerId) -> Result<Option<PlayerId>, CoreError> {
        let player = self.active_player_mut(id)?.clone();
        let opponents: Vec<PlayerId> =
            self.historicals().into_iter().filter(|h| self.players[*h].parent != Some(id)).collect();
        let beats_all = !opponents.is_empty()
            && opponents.iter().all(|o| {
                self.payoff.games(id, *o) >= self.config.min_games
                    && self.payoff.win_rate(id, *o) > self.config.checkpoint_win_rate
            });
        let enough_steps = player.steps_trained - player.last_checkpoint_steps >= self.config.checkpoint_steps;
        if !beats_all && !enough_steps {
            return Ok(None);
        }
        let new_id = self.players.len();
        self.players.push(LeaguePlayer {
            id: new_id,
            is_historical: true,
            parent: Some(id),
            last_checkpoint_steps: player.steps_trained,
            ..player
        });
        let p = &mut self.players[id];
        p.last_checkpoint_steps = p.steps_trained;
        Ok(Some(new_id))
    }
}

/// Serializes every report and assignment through one lock.
#[derive(Debug)]
pub struct Coordinator {
    league: Mutex<League>,
}

impl Coordinator {
    pub fn new(league: League) -> Self {
        Coordinator { league: Mutex::new(league) }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, League> {
        self.league.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn assign(&self, learner: PlayerId) -> Result<MatchAssignment, CoreError> {
        self.lock().assign(learner)
    }

    pub fn report(&self, assignment: &MatchAssignment, outcome: i32) -> Result<(), CoreError> {
        self.lock().report(assignment.learner, assignment.opponent, outcome)
    }

    /// Point-in-time copy of the payoff matrix.
    pub fn payoff(&self) -> PayoffMatrix {
        self.lock().payoff().clone()
    }

    pub fn with<R>(&self, f: impl FnOnce(&mut League) -> R) -> R {
        f(&mut self.lock())
    }

    pub fn into_inner(self) -> League {
        self.league.into_inner().unwrap_or_else(|e| e.into_inner())
    }
}
