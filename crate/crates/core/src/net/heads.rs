use ndgrad::nn::{Conv2d, ConvTranspose2d, Ctx, Film, Glu, Linear, LstmCell, LstmState, ParamInit};
use ndgrad::{ParamId, Real, Tape, Tensor, TensorError, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use microrts::{ActionType, Observation, TargetKind, NUM_ACTION_TYPES};

use super::action::{accepted_kinds, unit_choices, unit_step_mask, HeadMasks, NetAction};
use super::encoders::{constant, EntityEncoding};
use crate::config::NetConfig;
use crate::error::CoreError;

/// How each head picks its argument.
pub enum Chooser<'a> {
    Sample(&'a mut ChaCha8Rng),
    Greedy,
    Forced(&'a NetAction),
}

/// Index drawn from `softmax(values)` restricted to `mask`, using one
/// uniform number `u` in [0, 1).
pub fn sample_masked(values: &[f64], mask: &[bool], u: f64) -> Option<usize> {
    let max = values.iter().zip(mask).filter(|(_, m)| **m).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let weights: Vec<f64> = values.iter().zip(mask).map(|(v, m)| if *m { (v - max).exp() } else { 0.0 }).collect();
    let total: f64 = weights.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last = None;
    for (i, w) in weights.iter().enumerate() {
        if mask[i] {
            acc += w;
            last = Some(i);
            if acc > target {
                return Some(i);
            }
        }
    }
    last
}

/// Lowest index among the largest masked values.
pub fn argmax_masked(values: &[f64], mask: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if mask[i] && best.map_or(true, |b| *v > values[b]) {
            best = Some(i);
        }
    }
    best
}

impl Chooser<'_> {
    fn pick<T: Real>(
        &mut self,
        tape: &Tape<T>,
        logits: Var,
        mask: &[bool],
        head: &'static str,
        forced: Option<usize>,
    ) -> Result<usize, CoreError> {
        let none = || CoreError::Tensor(TensorError::NoValidAction { op: head });
        match self {
            Chooser::Forced(_) => {
                let i = forced.ok_or_else(|| CoreError::Invalid(format!("forced action has no {head} argument")))?;
                if !mask.get(i).copied().unwrap_or(false) {
                    return Err(CoreError::Invalid(format!("forced {head} index {i} is masked out")));
                }
                Ok(i)
            }
            Chooser::Greedy => {
                let v = tape.value(logits).to_f64_vec();
                argmax_masked(&v, mask).ok_or_else(none)
            }
            Chooser::Sample(rng) => {
                let v = tape.value(logits).to_f64_vec();
                let u: f64 = rng.gen();
                sample_masked(&v, mask, u).ok_or_else(none)
            }
        }
    }

    fn forced(&self) -> Option<&NetAction> {
        match self {
            Chooser::Forced(a) => Some(a),
            _ => None,
        }
    }
}

fn one_hot<T: Real>(ctx: &Ctx<'_, T>, index: usize, len: usize) -> Result<Var, TensorError> {
    Ok(ctx.tape.constant(Tensor::one_hot(index, len)?))
}

fn as_row<T: Real>(tape: &Tape<T>, v: Var) -> Result<Var, TensorError> {
    let n = tape.shape(v).iter().product::<usize>();
    tape.reshape(v, &[1, n])
}

#[derive(Clone, Debug)]
struct ActionTypeHead {
    fc: Linear,
    logits: Glu,
    one_hot_fc: Linear,
    glu_one_hot: Glu,
    glu_lstm: Glu,
}

#[derive(Clone, Debug)]
struct ArgumentHead {
    fc1: Linear,
    fc2: Linear,
    out: Linear,
    embed1: Linear,
    embed2: Linear,
    size: usize,
}

impl ArgumentHead {
    fn new<R: Rng>(init: &mut ParamInit<'_, R>, name: &str, cfg: &NetConfig, size: usize) -> Result<Self, TensorError> {
        let (ae, w) = (cfg.autoregressive_embedding_size, cfg.original_256);
        init.scope(name, |p| {
            Ok(ArgumentHead {
                fc1: Linear::new(p, "fc1", ae, w)?,
                fc2: Linear::new(p, "fc2", w, w)?,
                out: Linear::new(p, "out", w, size)?,
                embed1: Linear::new(p, "embed1", size, w)?,
                embed2: Linear::new(p, "embed2", w, ae)?,
                size,
            })
        })
    }

    fn logits<T: Real>(&self, ctx: &Ctx<'_, T>, ae: Var) -> Result<Var, TensorError> {
        let h = self.fc1.forward_relu(ctx, ae)?;
        let h = self.fc2.forward_relu(ctx, h)?;
        self.out.forward(ctx, h)
    }

    /// Projected one-hot path added to the autoregressive embedding.
    fn update<T: Real>(&self, ctx: &Ctx<'_, T>, index: usize) -> Result<Var, TensorError> {
        let h = self.embed1.forward_relu(ctx, one_hot(ctx, index, self.size)?)?;
        self.embed2.forward(ctx, h)
    }
}

#[derive(Clone, Debug)]
struct UnitsHead {
    func: Linear,
    ae_fc: Linear,
    query_fc: Linear,
    lstm: LstmCell,
    key: Linear,
    end_key: ParamId,
    embed: Linear,
    key_size: usize,
}

#[derive(Clone, Debug)]
struct TargetUnitHead {
    func: Linear,
    ae_fc: Linear,
    query: Linear,
    key: Linear,
    key_size: usize,
}

#[derive(Clone, Debug)]
struct LocationHead {
    ae_proj: Linear,
    conv: Conv2d,
    film: Film,
    up: Vec<ConvTranspose2d>,
    skip_size: usize,
    minimap: usize,
}

/// Head logits on the tape, already divided by the head temperature.
#[derive(Clone, Debug)]
pub struct HeadLogits {
    pub action_type: Var,
    pub delay: Var,
    pub queue: Var,
    pub units: Vec<Var>,
    pub target_unit: Option<Var>,
    pub location: Option<Var>,
}

pub struct HeadsOut {
    pub action: NetAction,
    pub logits: HeadLogits,
    pub masks: HeadMasks,
    /// Autoregressive embedding after the type, delay, queue, units and
    /// target-unit heads.
    pub embeddings: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Heads {
    action_type: ActionTypeHead,
    delay: ArgumentHead,
    queue: ArgumentHead,
    units: UnitsHead,
    target_unit: TargetUnitHead,
    location: LocationHead,
    temperature: [f64; 6],
    max_selected: usize,
    max_delay: usize,
}

impl Heads {
    pub fn new<R: Rng>(init: &mut ParamInit<'_, R>, cfg: &NetConfig) -> Result<Self, TensorError> {
        let ae = cfg.autoregressive_embedding_size;
        let (w, k) = (cfg.original_256, cfg.original_32);
        let h = cfg.lstm_hidden_dim;
        init.scope("heads", |p| {
            let action_type = p.scope("action_type", |q| {
                Ok::<_, TensorError>(ActionTypeHead {
                    fc: Linear::new(q, "fc", h, w)?,
                    logits: Glu::new(q, "logits", w, cfg.context_size, NUM_ACTION_TYPES)?,
                    one_hot_fc: Linear::new(q, "one_hot_fc", NUM_ACTION_TYPES, w)?,
                    glu_one_hot: Glu::new(q, "glu_one_hot", w, cfg.context_size, ae)?,
                    glu_lstm: Glu::new(q, "glu_lstm", h, cfg.context_size, ae)?,
                })
            })?;
            let delay = ArgumentHead::new(p, "delay", cfg, cfg.max_delay)?;
            let queue = ArgumentHead::new(p, "queue", cfg, 2)?;
            let units = p.scope("units", |q| {
                Ok::<_, TensorError>(UnitsHead {
                    func: Linear::new(q, "func", 3, w)?,
                    ae_fc: Linear::new(q, "ae_fc", ae, w)?,
                    query_fc: Linear::new(q, "query_fc", w, k)?,
                    lstm: LstmCell::new(q, "lstm", k, k)?,
                    key: Linear::new(q, "key", cfg.entity_embedding_size, k)?,
                    end_key: q.uniform("end_key", &[1, k], k)?,
                    embed: Linear::new(q, "embed", k, ae)?,
                    key_size: k,
                })
            })?;
            let target_unit = p.scope("target_unit", |q| {
                Ok::<_, TensorError>(TargetUnitHead {
                    func: Linear::new(q, "func", 3, w)?,
                    ae_fc: Linear::new(q, "ae_fc", ae, w)?,
                    query: Linear::new(q, "query", w, k)?,
                    key: Linear::new(q, "key", cfg.entity_embedding_size, k)?,
                    key_size: k,
                })
            })?;
            let c = cfg.original_128;
            let loc = cfg.location_head_max_map_channels;
            let location = p.scope("location", |q| {
                Ok::<_, TensorError>(LocationHead {
                    ae_proj: Linear::new(q, "ae_proj", ae, loc)?,
                    conv: Conv2d::new(q, "conv", loc + c, c, 3, 1, 1)?,
                    film: Film::new(q, "film", ae, c)?,
                    up: vec![
                        ConvTranspose2d::new(q, "up0", c, cfg.original_64, 4, 2, 1)?,
                        ConvTranspose2d::new(q, "up1", cfg.original_64, cfg.original_32, 4, 2, 1)?,
                        ConvTranspose2d::new(q, "up2", cfg.original_32, 1, 4, 2, 1)?,
                    ],
                    skip_size: cfg.map_skip_size(),
                    minimap: cfg.minimap_size,
                })
            })?;
            Ok(Heads {
                action_type,
                delay,
                queue,
                units,
                target_unit,
                location,
                temperature: cfg.temperature,
                max_selected: cfg.max_selected,
                max_delay: cfg.max_delay,
            })
        })
    }

    fn temper<T: Real>(&self, tape: &Tape<T>, logits: Var, head: usize) -> Result<Var, TensorError> {
        if self.temperature[head] == 1.0 {
            Ok(logits)
        } else {
            tape.scale(logits, 1.0 / self.temperature[head])
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        obs: &Observation,
        entities: &EntityEncoding,
        map_skip: Var,
        scalar_context: Var,
        lstm_output: Var,
        chooser: &mut Chooser<'_>,
    ) -> Result<HeadsOut, CoreError> {
        let tape = ctx.tape;
        let forced = chooser.forced().cloned();
        let n = obs.entity_valid.len();
        let mut embeddings = Vec::with_capacity(5);

        // action type
        let head = &self.action_type;
        let h = head.fc.forward_relu(ctx, lstm_output)?;
        let type_logits = self.temper(tape, head.logits.forward(ctx, h, scalar_context)?, 0)?;
        let ti = chooser.pick(tape, type_logits, &obs.masks.action_type, "action_type", forced.as_ref().map(|a| a.action_type))?;
        let t = ActionType::from_index(ti).expect("type index");
        let oh = head.one_hot_fc.forward_relu(ctx, one_hot(ctx, ti, NUM_ACTION_TYPES)?)?;
        let mut ae = tape.add(
            head.glu_one_hot.forward(ctx, oh, scalar_context)?,
            head.glu_lstm.forward(ctx, lstm_output, scalar_context)?,
        )?;
        embeddings.push(ae);

        // delay
        let delay_logits = self.temper(tape, self.delay.logits(ctx, ae)?, 1)?;
        let delay_mask = vec![true; self.max_delay];
        let delay = chooser.pick(tape, delay_logits, &delay_mask, "delay", forced.as_ref().map(|a| a.delay))?;
        ae = tape.add(ae, self.delay.update(ctx, delay)?)?;
        embeddings.push(ae);

        // queue
        let queue_logits = self.temper(tape, self.queue.logits(ctx, ae)?, 2)?;
        let queue_mask = vec![true, obs.masks.queue[ti]];
        let queue = chooser.pick(tape, queue_logits, &queue_mask, "queue", forced.as_ref().map(|a| a.queue as usize))?;
        if obs.masks.queue[ti] {
            ae = tape.add(ae, self.queue.update(ctx, queue)?)?;
        }
        embeddings.push(ae);

        // selected units
        let mut units = Vec::new();
        let mut unit_logits = Vec::new();
        let mut unit_masks = Vec::new();
        if t.selects_units() {
            let head = &self.units;
            let base = &obs.masks.units[ti];
            let forced_seq = forced.as_ref().map(|a| unit_choices(&a.units, base, self.max_selected));
            let keys = head.key.forward(ctx, entities.entity_embeddings)?;
            let keys = tape.concat(&[keys, ctx.p(head.end_key)], 0)?;
            let func = head.func.forward(ctx, constant(ctx, &[3], &accepted_kinds(t))?)?;
            let zeros = || tape.constant(Tensor::zeros(&[1, head.key_size]));
            let mut state = LstmState { h: zeros(), c: zeros() };
            loop {
                let mask = unit_step_mask(base, &units);
                let x = tape.relu(tape.add(head.ae_fc.forward(ctx, ae)?, func)?)?;
                let q = as_row(tape, head.query_fc.forward_relu(ctx, x)?)?;
                state = head.lstm.forward(ctx, q, state)?;
                let scores = tape.matmul(keys, tape.transpose(state.h)?)?;
                let logits = self.temper(tape, tape.reshape(scores, &[n + 1])?, 3)?;
                let forced_k = forced_seq.as_ref().and_then(|s| s.get(units.len()).copied());
                let choice = chooser.pick(tape, logits, &mask, "units", forced_k)?;
                unit_logits.push(logits);
                unit_masks.push(mask);
                if choice == n {
                    break;
                }
                units.push(choice);
                let mut centered = vec![-1.0 / (n + 1) as f32; n + 1];
                centered[choice] += 1.0;
                let selected = tape.matmul(constant(ctx, &[1, n + 1], &centered)?, keys)?;
                let selected = tape.reshape(selected, &[head.key_size])?;
                ae = tape.add(ae, head.embed.forward(ctx, selected)?)?;
                let remaining = base.iter().enumerate().any(|(i, ok)| *ok && !units.contains(&i));
                if units.len() == self.max_selected || !remaining {
                    break;
                }
            }
        }
        embeddings.push(ae);

        // target unit (terminal, no embedding update)
        let mut target_unit = None;
        let mut target_logits = None;
        let target_mask =
            if t.target() == TargetKind::Unit { obs.masks.target_unit[ti].clone() } else { vec![false; n] };
        if t.target() == TargetKind::Unit {
            let head = &self.target_unit;
            let func = head.func.forward(ctx, constant(ctx, &[3], &accepted_kinds(t))?)?;
            let x = tape.relu(tape.add(head.ae_fc.forward(ctx, ae)?, func)?)?;
            let q = tape.reshape(head.query.forward(ctx, x)?, &[head.key_size, 1])?;
            let keys = head.key.forward(ctx, entities.entity_embeddings)?;
            let logits = self.temper(tape, tape.reshape(tape.matmul(keys, q)?, &[n])?, 4)?;
            target_unit =
                Some(chooser.pick(tape, logits, &target_mask, "target_unit", forced.as_ref().and_then(|a| a.target_unit))?);
            target_logits = Some(logits);
        }
        embeddings.push(ae);

        // location (terminal)
        let mut location = None;
        let mut location_logits = None;
        let m2 = obs.masks.location[ti].len();
        let location_mask =
            if t.target() == TargetKind::Location { obs.masks.location[ti].clone() } else { vec![false; m2] };
        if t.target() == TargetKind::Location {
            let head = &self.location;
            let s = head.skip_size;
            let planes = tape.expand_channels(head.ae_proj.forward(ctx, ae)?, s, s)?;
            let x = tape.relu(tape.concat(&[planes, map_skip], 0)?)?;
            let x = tape.relu(head.conv.forward(ctx, x)?)?;
            let x = head.film.forward(ctx, x, ae)?;
            let mut x = tape.add(x, map_skip)?;
            for (i, up) in head.up.iter().enumerate() {
                x = up.forward(ctx, x)?;
                if i + 1 < head.up.len() {
                    x = tape.relu(x)?;
                }
            }
            let logits = self.temper(tape, tape.reshape(x, &[head.minimap * head.minimap])?, 5)?;
            location =
                Some(chooser.pick(tape, logits, &location_mask, "location", forced.as_ref().and_then(|a| a.location))?);
            location_logits = Some(logits);
        }

        let action = NetAction { action_type: ti, delay, queue: queue == 1, units, target_unit, location };
        let masks = HeadMasks {
            action_type: obs.masks.action_type.clone(),
            delay: delay_mask,
            queue: queue_mask,
            units: unit_masks,
            target_unit: target_mask,
            location: location_mask,
            used: [
                true,
                true,
                true,
                t.selects_units(),
                t.target() == TargetKind::Unit,
                t.target() == TargetKind::Location,
            ],
        };
        let logits = HeadLogits {
            action_type: type_logits,
            delay: delay_logits,
            queue: queue_logits,
            units: unit_logits,
            target_unit: target_logits,
            location: location_logits,
        };
        Ok(HeadsOut { action, logits, masks, embeddings })
    }
}
