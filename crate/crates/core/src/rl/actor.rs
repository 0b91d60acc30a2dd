use std::collections::VecDeque;
use std::sync::Arc;

use ndgrad::nn::Ctx;
use ndgrad::{ParamStore, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use microrts::{Env, EnvConfig, Observation, Policy};

use super::trajectory::{Bootstrap, Step, Trajectory};
use crate::error::CoreError;
use crate::net::{HiddenState, Mode, NetAction, PolicyNet};

/// An immutable parameter version that actors act with.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub version: u64,
    pub params: ParamStore,
}

/// Who plays the other side of an actor's match.
pub enum Opponent {
    Policy(Box<dyn Policy + Send>),
    /// The learner snapshot plays both sides and both are recorded.
    Mirror,
}

/// Chooses the opponent for each new match.
pub type OpponentFactory = Box<dyn FnMut(&mut ChaCha8Rng) -> Opponent + Send>;

/// Replaces the recorded reward of a step. Receives the observation the
/// action was taken from, the action and the environment reward.
pub type PseudoReward = Arc<dyn Fn(&Observation, &NetAction, f32) -> f32 + Send + Sync>;

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub seed: u64,
    pub learner_side: usize,
    pub opponent: String,
    /// Final reward of the learner side.
    pub reward: f32,
    pub frames: u32,
}

/// Splits one player's steps into trajectories of a fixed length, keeping
/// the step after each cut as its bootstrap.
struct Recorder {
    player: usize,
    unroll: usize,
    steps: Vec<Step>,
    hidden: Vec<HiddenState>,
    versions: Vec<u64>,
}

impl Recorder {
    fn new(player: usize, unroll: usize) -> Self {
        Recorder { player, unroll, steps: Vec::new(), hidden: Vec::new(), versions: Vec::new() }
    }

    fn drain(&mut self, out: &mut VecDeque<Trajectory>) {
        if self.steps.len() == self.unroll + 1 {
            let last = self.steps.pop().expect("bootstrap step");
            let last_hidden = self.hidden.pop().expect("bootstrap hidden");
            let last_version = self.versions.pop().expect("bootstrap version");
            let bootstrap = Bootstrap { obs: last.obs.clone(), opp_obs: last.opp_obs.clone(), action: last.action.clone() };
            out.push_back(Trajectory {
                player: self.player,
                version: self.versions[0],
                initial_hidden: self.hidden[0].clone(),
                steps: std::mem::take(&mut self.steps),
                bootstrap: Some(bootstrap),
            });
            self.steps = vec![last];
            self.hidden = vec![last_hidden];
            self.versions = vec![last_version];
        }
        if self.steps.last().map_or(false, |s| s.is_final) {
            out.push_back(Trajectory {
                player: self.player,
                version: self.versions[0],
                initial_hidden: self.hidden[0].clone(),
                steps: std::mem::take(&mut self.steps),
                bootstrap: None,
            });
            self.hidden.clear();
            self.versions.clear();
        }
    }
}

struct Game {
    env: Env,
    obs: [Observation; 2],
    hidden: [HiddenState; 2],
    recorders: Vec<Recorder>,
    opponent: Opponent,
    opponent_name: String,
    learner_side: usize,
    seed: u64,
}

/// Plays matches with the current snapshot and cuts them into trajectories.
pub struct Actor {
    pub id: usize,
    env_config: EnvConfig,
    net: Arc<PolicyNet>,
    rng: ChaCha8Rng,
    unroll: usize,
    game: Option<Game>,
    pending: VecDeque<Trajectory>,
    opponents: OpponentFactory,
    pseudo_reward: Option<PseudoReward>,
    matches: u64,
    seed: u64,
    /// Finished matches not yet taken by [`Actor::take_results`].
    results: Vec<MatchResult>,
}

impl Actor {
    pub fn new(id: usize, net: Arc<PolicyNet>, env_config: EnvConfig, seed: u64, opponents: OpponentFactory) -> Self {
        let unroll = net.config.sequence_length;
        let seed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(id as u64);
        Actor {
            id,
            env_config,
            net,
            rng: ChaCha8Rng::seed_from_u64(seed),
            unroll,
            game: None,
            pending: VecDeque::new(),
            opponents,
            pseudo_reward: None,
            matches: 0,
            seed,
            results: Vec::new(),
        }
    }

    /// Without a hook the recorded reward is the game outcome.
    pub fn with_pseudo_reward(mut self, f: PseudoReward) -> Self {
        self.pseudo_reward = Some(f);
        self
    }

    pub fn take_results(&mut self) -> Vec<MatchResult> {
        std::mem::take(&mut self.results)
    }

    fn start_game(&mut self) -> Result<Game, CoreError> {
        let seed = self.seed.wrapping_add(self.matches.wrapping_mul(7919));
        let learner_side = (self.matches % 2) as usize;
        self.matches += 1;
        let mut opponent = (self.opponents)(&mut self.rng);
        let opponent_name = match &mut opponent {
            Opponent::Policy(p) => {
                p.reset();
                p.name()
            }
            Opponent::Mirror => "self".to_string(),
        };
        let mut env = Env::new(self.env_config.clone(), seed)?;
        let obs = env.reset(seed);
        let recorders = match opponent {
            Opponent::Mirror => vec![Recorder::new(0, self.unroll), Recorder::new(1, self.unroll)],
            Opponent::Policy(_) => vec![Recorder::new(learner_side, self.unroll)],
        };
        let h = HiddenState::zeros(&self.net.config);
        Ok(Game { env, obs, hidden: [h.clone(), h], recorders, opponent, opponent_name, learner_side, seed })
    }

    /// Plays one frame of the current game.
    fn play_frame(&mut self, snapshot: &Snapshot) -> Result<(), CoreError> {
        if self.game.is_none() {
            self.game = Some(self.start_game()?);
        }
        let game = self.game.as_mut().expect("game started");
        let minimap = self.net.config.minimap_size;
        let mut actions = [microrts::ArgsAction::noop(), microrts::ArgsAction::noop()];
        let mut recorded: Vec<(usize, NetAction, crate::net::HeadLogitsData)> = Vec::new();
        for p in 0..2 {
            let learner_controls = matches!(game.opponent, Opponent::Mirror) || p == game.learner_side;
            if learner_controls {
                let tape = Tape::<f32>::new();
                let ctx = Ctx::new(&tape, &snapshot.params, false);
                let states = game.hidden[p].to_vars(&tape);
                let out = self.net.step(&ctx, &game.obs[p], &states, Mode::Sample(&mut self.rng))?;
                actions[p] = out.action.to_args(&game.obs[p], minimap)?;
                let behavior = out.logits.to_data(&tape, &self.net.config);
                let before = std::mem::replace(&mut game.hidden[p], HiddenState::from_vars(&tape, &out.hidden));
                if let Some(r) = game.recorders.iter_mut().find(|r| r.player == p) {
                    r.hidden.push(before);
                    r.versions.push(snapshot.version);
                }
                recorded.push((p, out.action, behavior));
            } else if let Opponent::Policy(policy) = &mut game.opponent {
                actions[p] = policy.act(&game.env, p, &game.obs[p])?;
            }
        }
        let result = game.env.step([&actions[0], &actions[1]])?;
        for (p, action, behavior) in recorded {
            let r = game.recorders.iter_mut().find(|r| r.player == p).expect("recorder");
            let reward = match &self.pseudo_reward {
                Some(f) => f(&game.obs[p], &action, result.rewards[p]),
                None => result.rewards[p],
            };
            r.steps.push(Step {
                obs: game.obs[p].clone(),
                opp_obs: game.obs[1 - p].clone(),
                action,
                behavior,
                reward,
                is_final: result.is_final,
            });
            r.drain(&mut self.pending);
        }
        game.obs = result.observations;
        if result.is_final {
            let side = game.learner_side;
            self.results.push(MatchResult {
                seed: game.seed,
                learner_side: side,
                opponent: game.opponent_name.clone(),
                reward: result.rewards[side],
                frames: game.env.frame(),
            });
            self.game = None;
        }
        Ok(())
    }

    /// Plays until `count` trajectories are available and returns them.
    /// Extra trajectories from the same frame are kept for the next call.
    /// A failing game is abandoned and a new one started.
    pub fn collect(&mut self, snapshot: &Snapshot, count: usize) -> Result<Vec<Trajectory>, CoreError> {
        let mut failures = 0;
        while self.pending.len() < count {
            if let Err(e) = self.play_frame(snapshot) {
                log::warn!("actor {}: abandoning game after error: {e}", self.id);
                self.game = None;
                failures += 1;
                if failures > 16 {
                    return Err(e);
                }
            }
        }
        Ok(self.pending.drain(..count).collect())
    }

    /// Plays until the next match finishes and returns every trajectory
    /// produced on the way along with the result.
    pub fn play_match(&mut self, snapshot: &Snapshot) -> Result<(Vec<Trajectory>, MatchResult), CoreError> {
        let mut failures = 0;
        while self.results.is_empty() {
            if let Err(e) = self.play_frame(snapshot) {
                log::warn!("actor {}: abandoning game after error: {e}", self.id);
                self.game = None;
                failures += 1;
                if failures > 16 {
                    return Err(e);
                }
            }
        }
        let result = self.results.remove(0);
        Ok((self.pending.drain(..).collect(), result))
    }
}
