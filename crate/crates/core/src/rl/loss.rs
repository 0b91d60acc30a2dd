//! The four loss parts: actor-critic (split V-trace plus TD(lambda)),
//! UPGO, KL to the supervised policy, and entropy.

use ndgrad::nn::Ctx;
use ndgrad::{Real, Tape, Tensor, Var};

use crate::config::NUM_HEADS;
use crate::error::CoreError;
use crate::net::{unit_choices, HeadLogits, HeadLogitsData, HeadMasks, NetAction, PolicyNet};

use super::returns::{lambda_return, upgo_returns, vtrace};
use super::trajectory::Trajectory;

/// How the UPGO importance factor is formed from the two log-probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImportanceMode {
    /// `exp(C(a, target) - C(a, behavior))`, i.e. `pi_b / pi_t`.
    Verbatim,
    /// `pi_t / pi_b`.
    Standard,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub actor_critic: f64,
    pub upgo: f64,
    pub kl: f64,
    pub entropy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { actor_critic: 1.0, upgo: 1.0, kl: 0.02, entropy: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RlLossConfig {
    pub weights: LossWeights,
    pub discount: f64,
    pub td_lambda: f64,
    pub upgo_mode: ImportanceMode,
    pub upgo_clip: bool,
    /// Heads that receive the UPGO term.
    pub upgo_heads: [bool; NUM_HEADS],
    pub rho_bar: f64,
    pub c_bar: f64,
}

impl Default for RlLossConfig {
    fn default() -> Self {
        RlLossConfig {
            weights: LossWeights::default(),
            discount: 1.0,
            td_lambda: 0.8,
            upgo_mode: ImportanceMode::Verbatim,
            upgo_clip: true,
            upgo_heads: [true; NUM_HEADS],
            rho_bar: 1.0,
            c_bar: 1.0,
        }
    }
}

/// Unweighted loss parts and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub actor_critic: f64,
    pub upgo: f64,
    pub kl: f64,
    pub entropy: f64,
    pub total: f64,
}

impl LossParts {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.actor_critic * self.actor_critic + w.upgo * self.upgo + w.kl * self.kl + w.entropy * self.entropy
    }
}

fn sum_vars<T: Real>(tape: &Tape<T>, vars: &[Var]) -> Result<Option<Var>, CoreError> {
    let mut acc: Option<Var> = None;
    for v in vars {
        acc = Some(match acc {
            None => *v,
            Some(a) => tape.add(a, *v)?,
        });
    }
    Ok(acc)
}

fn scalar_zero<T: Real>(tape: &Tape<T>) -> Var {
    tape.constant(Tensor::scalar(T::zero()))
}

fn log_prob<T: Real>(tape: &Tape<T>, logits: Var, mask: &[bool], index: usize) -> Result<Var, CoreError> {
    Ok(tape.pick(tape.log_softmax(logits, Some(mask))?, index)?)
}

fn log_softmax_f64(x: &[f32], mask: &[bool]) -> Vec<f64> {
    let max = x.iter().zip(mask).filter(|(_, m)| **m).map(|(v, _)| *v as f64).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().zip(mask).filter(|(_, m)| **m).map(|(v, _)| (*v as f64 - max).exp()).sum::<f64>().ln();
    x.iter().zip(mask).map(|(v, m)| if *m { *v as f64 - lse } else { 0.0 }).collect()
}

/// Per-head log-probability of `action` under tape logits. Unused heads are
/// `None`; the units head sums over its selection steps.
pub fn head_log_probs<T: Real>(
    tape: &Tape<T>,
    logits: &HeadLogits,
    masks: &HeadMasks,
    action: &NetAction,
    max_selected: usize,
) -> Result<[Option<Var>; NUM_HEADS], CoreError> {
    let mut out = [None; NUM_HEADS];
    out[0] = Some(log_prob(tape, logits.action_type, &masks.action_type, action.action_type)?);
    out[1] = Some(log_prob(tape, logits.delay, &masks.delay, action.delay)?);
    out[2] = Some(log_prob(tape, logits.queue, &masks.queue, action.queue as usize)?);
    if masks.used[3] {
        let n = masks.units[0].len() - 1;
        let seq = unit_choices(&action.units, &masks.units[0][..n], max_selected);
        let mut parts = Vec::with_capacity(seq.len());
        for ((row, mask), c) in logits.units.iter().zip(&masks.units).zip(seq) {
            parts.push(log_prob(tape, *row, mask, c)?);
        }
        out[3] = sum_vars(tape, &parts)?;
    }
    if let (Some(l), Some(t)) = (logits.target_unit, action.target_unit) {
        out[4] = Some(log_prob(tape, l, &masks.target_unit, t)?);
    }
    if let (Some(l), Some(t)) = (logits.location, action.location) {
        out[5] = Some(log_prob(tape, l, &masks.location, t)?);
    }
    Ok(out)
}

/// Same as [`head_log_probs`] for recorded logits.
pub fn head_log_probs_data(
    data: &HeadLogitsData,
    masks: &HeadMasks,
    action: &NetAction,
    max_selected: usize,
) -> [Option<f64>; NUM_HEADS] {
    let lp = |x: &[f32], mask: &[bool], i: usize| log_softmax_f64(x, mask)[i];
    let mut out = [None; NUM_HEADS];
    out[0] = Some(lp(&data.action_type, &masks.action_type, action.action_type));
    out[1] = Some(lp(&data.delay, &masks.delay, action.delay));
    out[2] = Some(lp(&data.queue, &masks.queue, action.queue as usize));
    if masks.used[3] {
        let n = masks.units[0].len() - 1;
        let seq = unit_choices(&action.units, &masks.units[0][..n], max_selected);
        out[3] = Some(data.units.iter().zip(&masks.units).zip(seq).map(|((row, mask), c)| lp(row, mask, c)).sum());
    }
    if let Some(t) = action.target_unit {
        out[4] = Some(lp(&data.target_unit, &masks.target_unit, t));
    }
    if let Some(l) = action.location {
        out[5] = Some(lp(&data.location, &masks.location, l));
    }
    out
}

/// `KL(softmax(logits) || softmax(reference))` over the masked support. The
/// reference is a constant.
pub fn kl_divergence<T: Real>(tape: &Tape<T>, logits: Var, reference: &[f32], mask: &[bool]) -> Result<Var, CoreError> {
    let p = tape.softmax(logits, Some(mask))?;
    let lp = tape.log_softmax(logits, Some(mask))?;
    let lq = log_softmax_f64(reference, mask);
    let lq = tape.constant(Tensor::from_f64(&[lq.len()], &lq)?);
    Ok(tape.sum(tape.mul(p, tape.sub(lp, lq)?)?)?)
}

/// Entropy over the masked support divided by `ln(valid count)`; zero when
/// fewer than two entries are valid.
pub fn normalized_entropy<T: Real>(tape: &Tape<T>, logits: Var, mask: &[bool]) -> Result<Var, CoreError> {
    let k = mask.iter().filter(|m| **m).count();
    if k < 2 {
        return Ok(scalar_zero(tape));
    }
    let p = tape.softmax(logits, Some(mask))?;
    let lp = tape.log_softmax(logits, Some(mask))?;
    Ok(tape.scale(tape.sum(tape.mul(p, lp)?)?, -1.0 / (k as f64).ln())?)
}

/// Negative mean normalized entropy over rows with at least two valid
/// entries.
pub fn entropy_loss<T: Real>(tape: &Tape<T>, rows: &[(Var, &[bool])]) -> Result<Var, CoreError> {
    let mut parts = Vec::new();
    for (logits, mask) in rows {
        if mask.iter().filter(|m| **m).count() >= 2 {
            parts.push(normalized_entropy(tape, *logits, mask)?);
        }
    }
    match sum_vars(tape, &parts)? {
        None => Ok(scalar_zero(tape)),
        Some(s) => Ok(tape.scale(s, -1.0 / parts.len() as f64)?),
    }
}

/// Mean squared error between baselines and constant targets.
pub fn td_lambda_loss<T: Real>(tape: &Tape<T>, baselines: &[Var], targets: &[f64]) -> Result<Var, CoreError> {
    if baselines.len() != targets.len() || baselines.is_empty() {
        return Err(CoreError::Invalid("td_lambda_loss: baselines and targets must be equal and non-empty".into()));
    }
    let mut parts = Vec::with_capacity(targets.len());
    for (b, g) in baselines.iter().zip(targets) {
        let b = tape.reshape(*b, &[])?;
        let d = tape.add_const(b, &Tensor::scalar(T::from_f64(-g)))?;
        parts.push(tape.mul(d, d)?);
    }
    let s = sum_vars(tape, &parts)?.expect("non-empty");
    Ok(tape.scale(s, 1.0 / targets.len() as f64)?)
}

/// `sum_t w_t * C(logits_t, a_t)` with constant weights, where `C = -log pi`.
pub fn weighted_cross_entropy<T: Real>(tape: &Tape<T>, log_probs: &[Var], weights: &[f64]) -> Result<Var, CoreError> {
    let mut parts = Vec::with_capacity(weights.len());
    for (lp, w) in log_probs.iter().zip(weights) {
        parts.push(tape.scale(*lp, -w)?);
    }
    Ok(sum_vars(tape, &parts)?.unwrap_or_else(|| scalar_zero(tape)))
}

/// The UPGO importance factor.
pub fn upgo_importance(mode: ImportanceMode, clip: bool, log_target: f64, log_behavior: f64) -> f64 {
    let w = match mode {
        ImportanceMode::Verbatim => (log_behavior - log_target).exp(),
        ImportanceMode::Standard => (log_target - log_behavior).exp(),
    };
    if clip {
        w.min(1.0)
    } else {
        w
    }
}

/// `sum_t (G_t - b_t) * importance_t * C(logits_t, a_t)`.
pub fn upgo_loss<T: Real>(
    tape: &Tape<T>,
    log_target: &[Var],
    log_behavior: &[f64],
    returns: &[f64],
    baselines: &[f64],
    mode: ImportanceMode,
    clip: bool,
) -> Result<Var, CoreError> {
    let weights: Vec<f64> = (0..returns.len())
        .map(|t| {
            let lt = tape.scalar(log_target[t]).as_f64();
            (returns[t] - baselines[t]) * upgo_importance(mode, clip, lt, log_behavior[t])
        })
        .collect();
    weighted_cross_entropy(tape, log_target, &weights)
}

/// V-trace policy-gradient loss for one set of logits.
pub fn vtrace_pg_loss<T: Real>(
    tape: &Tape<T>,
    log_target: &[Var],
    log_behavior: &[f64],
    rewards: &[f64],
    values: &[f64],
    discounts: &[f64],
    rho_bar: f64,
    c_bar: f64,
) -> Result<Var, CoreError> {
    let log_rhos: Vec<f64> =
        log_target.iter().zip(log_behavior).map(|(t, b)| tape.scalar(*t).as_f64() - b).collect();
    let v = vtrace(&log_rhos, values, rewards, discounts, rho_bar, c_bar)?;
    weighted_cross_entropy(tape, log_target, &v.pg_advantages)
}

/// Teacher-forced logits of a frozen reference network over a trajectory,
/// unrolled from a zero hidden state.
pub fn reference_logits(net: &PolicyNet, params: &ndgrad::ParamStore, traj: &Trajectory) -> Result<Vec<HeadLogitsData>, CoreError> {
    let tape = Tape::<f32>::new();
    let ctx = Ctx::new(&tape, params, false);
    let mut hidden = crate::net::HiddenState::zeros(&net.config).to_vars(&tape);
    let mut out = Vec::with_capacity(traj.len());
    for step in &traj.steps {
        let o = net.step(&ctx, &step.obs, &hidden, crate::net::Mode::Forced { action: &step.action, dropout: None })?;
        out.push(o.logits.to_data(&tape, &net.config));
        hidden = o.hidden;
    }
    Ok(out)
}

/// Full loss over one trajectory. Returns the weighted total on the tape and
/// the per-part values averaged over steps.
pub fn trajectory_loss<T: Real>(
    ctx: &Ctx<'_, T>,
    net: &PolicyNet,
    traj: &Trajectory,
    reference: Option<&[HeadLogitsData]>,
    cfg: &RlLossConfig,
) -> Result<(Var, LossParts), CoreError> {
    let tape = ctx.tape;
    let n = traj.len();
    if n == 0 {
        return Err(CoreError::Invalid("empty trajectory".into()));
    }
    if reference.map_or(false, |r| r.len() != n) {
        return Err(CoreError::Invalid("reference logits do not cover the trajectory".into()));
    }
    let max_sel = net.config.max_selected;
    let mut hidden = traj.initial_hidden.to_vars(tape);
    let mut baselines = Vec::with_capacity(n);
    let mut log_t: Vec<[Option<Var>; NUM_HEADS]> = Vec::with_capacity(n);
    let mut log_b: Vec<[Option<f64>; NUM_HEADS]> = Vec::with_capacity(n);
    let mut kl_parts = Vec::new();
    let mut entropy_parts = Vec::new();
    for (t, step) in traj.steps.iter().enumerate() {
        let out = net.step(ctx, &step.obs, &hidden, crate::net::Mode::Forced { action: &step.action, dropout: None })?;
        let b = net.baseline(ctx, &step.obs, &step.opp_obs, step.action.action_type, out.lstm_output)?;
        baselines.push(b.value);
        log_t.push(head_log_probs(tape, &out.logits, &out.masks, &step.action, max_sel)?);
        log_b.push(head_log_probs_data(&step.behavior, &out.masks, &step.action, max_sel));

        let m = &out.masks;
        let mut rows: Vec<(Var, &[bool], Option<&[f32]>)> = vec![
            (out.logits.action_type, &m.action_type, reference.map(|r| r[t].action_type.as_slice())),
            (out.logits.delay, &m.delay, reference.map(|r| r[t].delay.as_slice())),
            (out.logits.queue, &m.queue, reference.map(|r| r[t].queue.as_slice())),
        ];
        for (k, (row, mask)) in out.logits.units.iter().zip(&m.units).enumerate() {
            rows.push((*row, mask, reference.map(|r| r[t].units[k].as_slice())));
        }
        if let Some(l) = out.logits.target_unit {
            rows.push((l, &m.target_unit, reference.map(|r| r[t].target_unit.as_slice())));
        }
        if let Some(l) = out.logits.location {
            rows.push((l, &m.location, reference.map(|r| r[t].location.as_slice())));
        }
        if reference.is_some() {
            let mut kls = Vec::with_capacity(rows.len());
            for (l, mask, r) in &rows {
                kls.push(kl_divergence(tape, *l, r.expect("reference row"), mask)?);
            }
            kl_parts.push(sum_vars(tape, &kls)?.expect("rows"));
        }
        let ent_rows: Vec<(Var, &[bool])> = rows.iter().map(|(l, m, _)| (*l, *m)).collect();
        entropy_parts.push(entropy_loss(tape, &ent_rows)?);
        hidden = out.hidden;
    }

    let mut values: Vec<f64> = baselines.iter().map(|b| tape.value(*b).item().as_f64()).collect();
    let bootstrap = match &traj.bootstrap {
        Some(bs) if !traj.ends_game() => {
            let out = net.step(ctx, &bs.obs, &hidden, crate::net::Mode::Forced { action: &bs.action, dropout: None })?;
            let b = net.baseline(ctx, &bs.obs, &bs.opp_obs, bs.action.action_type, out.lstm_output)?;
            tape.value(b.value).item().as_f64()
        }
        _ => 0.0,
    };
    values.push(bootstrap);
    let rewards: Vec<f64> = traj.steps.iter().map(|s| s.reward as f64).collect();
    let discounts: Vec<f64> = traj.steps.iter().map(|s| if s.is_final { 0.0 } else { cfg.discount }).collect();
    let inv_n = 1.0 / n as f64;

    // actor-critic: split V-trace over type, delay and the remaining arguments
    let mut pg_parts = Vec::new();
    for set in [0..1, 1..2, 2..NUM_HEADS] {
        let mut lt = Vec::with_capacity(n);
        let mut lb = Vec::with_capacity(n);
        for t in 0..n {
            let vars: Vec<Var> = set.clone().filter_map(|h| log_t[t][h]).collect();
            lt.push(sum_vars(tape, &vars)?.unwrap_or_else(|| scalar_zero(tape)));
            lb.push(set.clone().filter_map(|h| log_b[t][h]).sum::<f64>());
        }
        pg_parts.push(vtrace_pg_loss(tape, &lt, &lb, &rewards, &values, &discounts, cfg.rho_bar, cfg.c_bar)?);
    }
    let pg = tape.scale(sum_vars(tape, &pg_parts)?.expect("three sets"), inv_n)?;
    let td_targets = lambda_return(&values[1..], &rewards, &discounts, &vec![cfg.td_lambda; n])?;
    let td = td_lambda_loss(tape, &baselines, &td_targets)?;
    let actor_critic = tape.add(pg, td)?;

    // UPGO, per enabled head
    let upgo_targets = upgo_returns(&values, &rewards, &discounts)?;
    let mut upgo_parts = Vec::new();
    for h in (0..NUM_HEADS).filter(|h| cfg.upgo_heads[*h]) {
        let steps: Vec<usize> = (0..n).filter(|t| log_t[*t][h].is_some()).collect();
        if steps.is_empty() {
            continue;
        }
        let lt: Vec<Var> = steps.iter().map(|t| log_t[*t][h].expect("used head")).collect();
        let lb: Vec<f64> = steps.iter().map(|t| log_b[*t][h].expect("used head")).collect();
        let g: Vec<f64> = steps.iter().map(|t| upgo_targets[*t]).collect();
        let v: Vec<f64> = steps.iter().map(|t| values[*t]).collect();
        upgo_parts.push(upgo_loss(tape, &lt, &lb, &g, &v, cfg.upgo_mode, cfg.upgo_clip)?);
    }
    let upgo = match sum_vars(tape, &upgo_parts)? {
        Some(s) => tape.scale(s, inv_n)?,
        None => scalar_zero(tape),
    };

    let kl = match sum_vars(tape, &kl_parts)? {
        Some(s) => tape.scale(s, inv_n)?,
        None => scalar_zero(tape),
    };
    let entropy = tape.scale(sum_vars(tape, &entropy_parts)?.expect("steps"), inv_n)?;

    let w = &cfg.weights;
    let mut total = scalar_zero(tape);
    for (v, weight) in [(actor_critic, w.actor_critic), (upgo, w.upgo), (kl, w.kl), (entropy, w.entropy)] {
        total = tape.add(total, tape.scale(tape.reshape(v, &[])?, weight)?)?;
    }
    let s = |v: Var| tape.value(v).item().as_f64();
    let mut parts =
        LossParts { actor_critic: s(actor_critic), upgo: s(upgo), kl: s(kl), entropy: s(entropy), total: 0.0 };
    parts.total = s(total);
    Ok((total, parts))
}
