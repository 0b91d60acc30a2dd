//! The policy network: encoders, LSTM core, autoregressive heads and the
//! value baseline.

mod action;
mod agent;
mod baseline;
mod encoders;
mod heads;

use ndgrad::nn::{Ctx, LstmCell, LstmState, ParamInit};
use ndgrad::{ParamStore, Real, Tape, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use microrts::Observation;

pub use action::{accepted_kinds, unit_choices, unit_step_mask, HeadLogitsData, HeadMasks, NetAction};
pub use agent::NetPolicy;
pub use baseline::{squash, summary_features, Baseline, BaselineOut};
pub use encoders::{EntityEncoder, EntityEncoding, ScalarEncoder, SpatialEncoder};
pub use heads::{argmax_masked, sample_masked, Chooser, HeadLogits, Heads, HeadsOut};

use crate::config::NetConfig;
use crate::error::CoreError;

/// LSTM state carried between steps, one `(h, c)` pair per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenState {
    pub h: Vec<Vec<f32>>,
    pub c: Vec<Vec<f32>>,
}

impl HiddenState {
    pub fn zeros(cfg: &NetConfig) -> Self {
        let z = vec![vec![0.0; cfg.lstm_hidden_dim]; cfg.lstm_layers];
        HiddenState { h: z.clone(), c: z }
    }

    pub fn to_vars<T: Real>(&self, tape: &Tape<T>) -> Vec<LstmState> {
        let v = |x: &Vec<f32>| tape.constant(Tensor::vector(x.iter().map(|v| T::from_f64(*v as f64)).collect()));
        self.h
            .iter()
            .zip(&self.c)
            .map(|(h, c)| {
                let n = h.len();
                LstmState {
                    h: tape.reshape(v(h), &[1, n]).expect("hidden shape"),
                    c: tape.reshape(v(c), &[1, n]).expect("hidden shape"),
                }
            })
            .collect()
    }

    pub fn from_vars<T: Real>(tape: &Tape<T>, states: &[LstmState]) -> Self {
        let f = |v: Var| tape.value(v).to_f64_vec().into_iter().map(|x| x as f32).collect();
        HiddenState { h: states.iter().map(|s| f(s.h)).collect(), c: states.iter().map(|s| f(s.c)).collect() }
    }
}

/// How the heads choose arguments on a forward step.
pub enum Mode<'a> {
    Sample(&'a mut ChaCha8Rng),
    Greedy,
    /// Teacher forcing. The optional generator drives transformer dropout.
    Forced { action: &'a NetAction, dropout: Option<&'a mut ChaCha8Rng> },
}

/// Everything one forward step produces, still attached to the tape.
pub struct StepOut {
    pub action: NetAction,
    pub logits: HeadLogits,
    pub masks: HeadMasks,
    pub hidden: Vec<LstmState>,
    pub lstm_output: Var,
    /// Autoregressive embedding after each of the first five heads.
    pub embeddings: Vec<Var>,
    pub entity_any_valid: bool,
    pub attention: Vec<Tensor<f64>>,
}

impl HeadLogits {
    /// Copies the logits off the tape. Unused heads become zero rows.
    pub fn to_data<T: Real>(&self, tape: &Tape<T>, cfg: &NetConfig) -> HeadLogitsData {
        let f = |v: Var| tape.value(v).to_f64_vec().into_iter().map(|x| x as f32).collect::<Vec<f32>>();
        HeadLogitsData {
            action_type: f(self.action_type),
            delay: f(self.delay),
            queue: f(self.queue),
            units: self.units.iter().map(|v| f(*v)).collect(),
            target_unit: self.target_unit.map(f).unwrap_or_else(|| vec![0.0; cfg.max_entities]),
            location: self.location.map(f).unwrap_or_else(|| vec![0.0; cfg.minimap_size * cfg.minimap_size]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PolicyNet {
    pub config: NetConfig,
    entity: EntityEncoder,
    spatial: SpatialEncoder,
    scalar: ScalarEncoder,
    core: Vec<LstmCell>,
    heads: Heads,
    baseline: Baseline,
}

impl PolicyNet {
    /// Builds the network and a freshly initialised parameter store.
    pub fn new(config: NetConfig, seed: u64) -> Result<(PolicyNet, ParamStore), CoreError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = ParamInit::new(&mut store, &mut rng);
        let net = PolicyNet {
            entity: EntityEncoder::new(&mut init, &config)?,
            spatial: SpatialEncoder::new(&mut init, &config)?,
            scalar: ScalarEncoder::new(&mut init, &config)?,
            core: init.scope("core", |p| {
                (0..config.lstm_layers)
                    .map(|i| {
                        let input = if i == 0 { config.embedding_size } else { config.lstm_hidden_dim };
                        LstmCell::new(p, &format!("lstm{i}"), input, config.lstm_hidden_dim)
                    })
                    .collect::<Result<Vec<_>, TensorError>>()
            })?,
            heads: Heads::new(&mut init, &config)?,
            baseline: Baseline::new(&mut init, &config)?,
            config,
        };
        Ok((net, store))
    }

    /// Concatenates the three encodings and runs the LSTM stack.
    fn core_forward<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        inputs: [Var; 3],
        hidden: &[LstmState],
    ) -> Result<(Var, Vec<LstmState>), CoreError> {
        let tape = ctx.tape;
        if hidden.len() != self.core.len() {
            return Err(CoreError::Invalid(format!("{} hidden states for {} layers", hidden.len(), self.core.len())));
        }
        let x = tape.concat(&inputs, 0)?;
        let width = tape.shape(x)[0];
        if width != self.config.embedding_size {
            return Err(TensorError::Shape {
                op: "core",
                detail: format!("encodings give {width} features, core expects {}", self.config.embedding_size),
            }
            .into());
        }
        let mut x = tape.reshape(x, &[1, width])?;
        let mut states = Vec::with_capacity(self.core.len());
        for (cell, state) in self.core.iter().zip(hidden) {
            let s = cell.forward(ctx, x, state.clone())?;
            x = s.h;
            states.push(s);
        }
        let out = tape.reshape(x, &[self.config.lstm_hidden_dim])?;
        Ok((out, states))
    }

    /// One forward step for one observation.
    pub fn step<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        obs: &Observation,
        hidden: &[LstmState],
        mode: Mode<'_>,
    ) -> Result<StepOut, CoreError> {
        if obs.entity_valid.len() != self.config.max_entities
            || obs.masks.location.first().map_or(0, |m| m.len()) != self.config.minimap_size * self.config.minimap_size
        {
            return Err(CoreError::Invalid("observation does not match the network configuration".into()));
        }
        let (mut chooser, dropout) = match mode {
            Mode::Sample(rng) => (Chooser::Sample(rng), None),
            Mode::Greedy => (Chooser::Greedy, None),
            Mode::Forced { action, dropout } => (Chooser::Forced(action), dropout),
        };
        let entities = self.entity.forward(ctx, obs, dropout)?;
        let (map_skip, embedded_spatial) = self.spatial.forward(ctx, obs)?;
        let (embedded_scalar, scalar_context) = self.scalar.forward(ctx, obs)?;
        let (lstm_output, hidden) =
            self.core_forward(ctx, [embedded_scalar, entities.embedded_entity, embedded_spatial], hidden)?;
        let out = self.heads.forward(ctx, obs, &entities, map_skip, scalar_context, lstm_output, &mut chooser)?;
        Ok(StepOut {
            action: out.action,
            logits: out.logits,
            masks: out.masks,
            hidden,
            lstm_output,
            embeddings: out.embeddings,
            entity_any_valid: entities.any_valid,
            attention: entities.attention,
        })
    }

    /// Runs the core over a whole sequence at once: the encodings are stacked
    /// into a `[len, embedding_size]` matrix whose rows feed the LSTM in order.
    pub fn unroll_core<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        observations: &[Observation],
        hidden: &[LstmState],
    ) -> Result<(Vec<Var>, Vec<LstmState>), CoreError> {
        let tape = ctx.tape;
        let mut rows = Vec::with_capacity(observations.len());
        for obs in observations {
            let [scalar, entity, spatial, _] = self.encode(ctx, obs)?;
            let row = tape.concat(&[scalar, entity, spatial], 0)?;
            rows.push(tape.reshape(row, &[1, self.config.embedding_size])?);
        }
        let seq = tape.concat(&rows, 0)?;
        let mut states = hidden.to_vec();
        let mut outputs = Vec::with_capacity(observations.len());
        for t in 0..observations.len() {
            let mut x = tape.narrow(seq, 0, t, 1)?;
            for (cell, state) in self.core.iter().zip(states.iter_mut()) {
                *state = cell.forward(ctx, x, state.clone())?;
                x = state.h;
            }
            outputs.push(tape.reshape(x, &[self.config.lstm_hidden_dim])?);
        }
        Ok((outputs, states))
    }

    /// Value estimate from the LSTM output, both views and the chosen type.
    pub fn baseline<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        own: &Observation,
        opponent: &Observation,
        action_type: usize,
        lstm_output: Var,
    ) -> Result<BaselineOut, CoreError> {
        Ok(self.baseline.forward(ctx, own, opponent, action_type, lstm_output)?)
    }

    /// Encodes an observation without running the heads. Returns
    /// `(embedded_scalar, embedded_entity, embedded_spatial, scalar_context)`.
    pub fn encode<T: Real>(&self, ctx: &Ctx<'_, T>, obs: &Observation) -> Result<[Var; 4], CoreError> {
        let entities = self.entity.forward(ctx, obs, None)?;
        let (_, spatial) = self.spatial.forward(ctx, obs)?;
        let (scalar, context) = self.scalar.forward(ctx, obs)?;
        Ok([scalar, entities.embedded_entity, spatial, context])
    }

    /// Entity encoder output on its own.
    pub fn entity_encoder(&self) -> &EntityEncoder {
        &self.entity
    }

    pub fn spatial_encoder(&self) -> &SpatialEncoder {
        &self.spatial
    }

    pub fn scalar_encoder(&self) -> &ScalarEncoder {
        &self.scalar
    }

    pub fn encode_entities<T: Real>(&self, ctx: &Ctx<'_, T>, obs: &Observation) -> Result<EntityEncoding, CoreError> {
        Ok(self.entity.forward(ctx, obs, None)?)
    }
}
