use std::sync::Arc;

use ndgrad::nn::Ctx;
use ndgrad::{ParamStore, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use microrts::{ArgsAction, Env, EnvError, Observation, Policy};

use super::{HiddenState, Mode, PolicyNet};

/// Plays a game with a fixed parameter snapshot, keeping its own LSTM state.
pub struct NetPolicy {
    net: Arc<PolicyNet>,
    params: ParamStore,
    hidden: HiddenState,
    rng: ChaCha8Rng,
    seed: u64,
    greedy: bool,
    name: String,
}

impl NetPolicy {
    pub fn new(net: Arc<PolicyNet>, params: ParamStore, seed: u64, name: impl Into<String>) -> Self {
        let hidden = HiddenState::zeros(&net.config);
        NetPolicy { net, params, hidden, rng: ChaCha8Rng::seed_from_u64(seed), seed, greedy: false, name: name.into() }
    }

    /// Picks the most likely argument at every head instead of sampling.
    pub fn greedy(mut self) -> Self {
        self.greedy = true;
        self
    }

    pub fn hidden(&self) -> &HiddenState {
        &self.hidden
    }
}

impl Policy for NetPolicy {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn act(&mut self, _env: &Env, _player: usize, obs: &Observation) -> Result<ArgsAction, EnvError> {
        let tape = Tape::<f32>::new();
        let ctx = Ctx::new(&tape, &self.params, false);
        let states = self.hidden.to_vars(&tape);
        let mode = if self.greedy { Mode::Greedy } else { Mode::Sample(&mut self.rng) };
        let out = self.net.step(&ctx, obs, &states, mode).map_err(|e| EnvError::Parse(e.to_string()))?;
        self.hidden = HiddenState::from_vars(&tape, &out.hidden);
        out.action.to_args(obs, self.net.config.minimap_size).map_err(|e| EnvError::Parse(e.to_string()))
    }

    fn reset(&mut self) {
        self.hidden = HiddenState::zeros(&self.net.config);
        self.rng = ChaCha8Rng::seed_from_u64(self.seed);
    }
}
