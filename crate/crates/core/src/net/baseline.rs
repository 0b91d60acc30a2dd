use std::f64::consts::FRAC_PI_2;

use ndgrad::nn::{Ctx, LayerNorm, Linear, ParamInit};
use ndgrad::{Real, TensorError, Var};
use rand::Rng;

use microrts::{Observation, ENTITY_FEATURES, NUM_ACTION_TYPES, SCALAR_SIZE};

use super::encoders::constant;
use crate::config::NetConfig;

/// `(2/pi) * atan((pi/2) * x)`: maps the raw baseline output into (-1, 1).
pub fn squash(x: f64) -> f64 {
    (FRAC_PI_2 * x).atan() / FRAC_PI_2
}

/// Scalar features followed by the mean feature row of valid entities.
pub fn summary_features(obs: &Observation) -> Vec<f32> {
    let mut out = obs.scalar.clone();
    let mut mean = vec![0.0f32; ENTITY_FEATURES];
    let k = obs.num_valid();
    if k > 0 {
        for (slot, ok) in obs.entity_valid.iter().enumerate() {
            if *ok {
                for (m, v) in mean.iter_mut().zip(obs.entity(slot)) {
                    *m += *v;
                }
            }
        }
        for m in &mut mean {
            *m /= k as f32;
        }
    }
    out.extend(mean);
    out
}

#[derive(Clone, Debug)]
struct ResLayer {
    fc1: Linear,
    norm1: LayerNorm,
    fc2: Linear,
    norm2: LayerNorm,
}

/// Value baseline that sees both players' observations.
#[derive(Clone, Debug)]
pub struct Baseline {
    own: Linear,
    opponent: Linear,
    fc: Linear,
    res: Vec<ResLayer>,
    out: Linear,
}

pub struct BaselineOut {
    /// Raw `[1]` output before squashing.
    pub raw: Var,
    /// Squashed `[1]` value.
    pub value: Var,
}

impl Baseline {
    pub fn new<R: Rng>(init: &mut ParamInit<'_, R>, cfg: &NetConfig) -> Result<Self, TensorError> {
        let f = cfg.baseline_feature_size();
        let w = cfg.original_256;
        let summary = SCALAR_SIZE + ENTITY_FEATURES;
        init.scope("baseline", |p| {
            Ok(Baseline {
                own: Linear::new(p, "own", summary + NUM_ACTION_TYPES, f)?,
                opponent: Linear::new(p, "opponent", summary, f)?,
                fc: Linear::new(p, "fc", cfg.baseline_input_size, w)?,
                res: (0..cfg.n_resblocks)
                    .map(|i| {
                        p.scope(&format!("res{i}"), |q| {
                            Ok(ResLayer {
                                fc1: Linear::new(q, "fc1", w, w)?,
                                norm1: LayerNorm::new(q, "norm1", w)?,
                                fc2: Linear::new(q, "fc2", w, w)?,
                                norm2: LayerNorm::new(q, "norm2", w)?,
                            })
                        })
                    })
                    .collect::<Result<_, TensorError>>()?,
                out: Linear::new(p, "out", w, 1)?,
            })
        })
    }

    pub fn forward<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        own: &Observation,
        opponent: &Observation,
        action_type: usize,
        lstm_output: Var,
    ) -> Result<BaselineOut, TensorError> {
        let tape = ctx.tape;
        let mut own_in = summary_features(own);
        let mut one_hot = vec![0.0; NUM_ACTION_TYPES];
        one_hot[action_type] = 1.0;
        own_in.extend(one_hot);
        let own_in = constant(ctx, &[own_in.len()], &own_in)?;
        let opp_in = summary_features(opponent);
        let opp_in = constant(ctx, &[opp_in.len()], &opp_in)?;
        let own_f = self.own.forward_relu(ctx, own_in)?;
        let opp_f = self.opponent.forward_relu(ctx, opp_in)?;
        let x = tape.concat(&[lstm_output, own_f, opp_f], 0)?;
        let mut x = self.fc.forward_relu(ctx, x)?;
        for layer in &self.res {
            let y = tape.relu(layer.norm1.forward(ctx, layer.fc1.forward(ctx, x)?)?)?;
            let y = layer.norm2.forward(ctx, layer.fc2.forward(ctx, y)?)?;
            x = tape.relu(tape.add(x, y)?)?;
        }
        let raw = self.out.forward(ctx, x)?;
        let value = tape.scale(tape.atan(tape.scale(raw, FRAC_PI_2)?)?, 1.0 / FRAC_PI_2)?;
        Ok(BaselineOut { raw, value })
    }
}
