//! Supervised learning from scripted replays.

use std::fs;
use std::path::Path;

use ndgrad::nn::Ctx;
use ndgrad::optim::{Adam, AdamConfig};
use ndgrad::{Grads, ParamStore, Real, Tape, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use microrts::replay::{play_game, Replay};
use microrts::{EnvConfig, GreedyPolicy, Observation, Policy, RandomPolicy};

use crate::config::NUM_HEADS;
use crate::error::CoreError;
use crate::net::{argmax_masked, HeadLogits, HeadMasks, HiddenState, Mode, NetAction, PolicyNet};

/// One supervised frame: the learner's view and the action it took.
#[derive(Clone, Debug)]
pub struct Frame {
    pub obs: Observation,
    pub action: NetAction,
    pub is_final: bool,
}

/// Recorded games plus, for each, the side whose actions are imitated.
#[derive(Clone, Debug)]
pub struct ReplayDataset {
    pub env_config: EnvConfig,
    pub games: Vec<(Replay, usize)>,
}

impl ReplayDataset {
    /// Plays `games` greedy-versus-random games. The greedy player alternates
    /// sides and is the one recorded.
    pub fn generate(env_config: &EnvConfig, games: usize, seed: u64) -> Result<Self, CoreError> {
        let mut out = Vec::with_capacity(games);
        for i in 0..games {
            let game_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let mut greedy = GreedyPolicy;
            let mut random = RandomPolicy::new(game_seed ^ 0x5eed);
            let side = i % 2;
            let replay = if side == 0 {
                play_game(env_config, game_seed, [&mut greedy as &mut dyn Policy, &mut random])?
            } else {
                play_game(env_config, game_seed, [&mut random as &mut dyn Policy, &mut greedy])?
            };
            out.push((replay, side));
        }
        Ok(ReplayDataset { env_config: env_config.clone(), games: out })
    }

    pub fn len(&self) -> usize {
        self.games.len()
    }

    pub fn is_empty(&self) -> bool {
        self.games.is_empty()
    }

    pub fn num_frames(&self) -> usize {
        self.games.iter().map(|(r, _)| r.actions.len()).sum()
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.env_config.hash().as_bytes());
        for (replay, side) in &self.games {
            h.update(side.to_le_bytes());
            h.update(replay.to_text().as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Splits off the last `ceil(test_fraction * len)` games as a test set.
    pub fn split(&self, test_fraction: f64) -> (ReplayDataset, ReplayDataset) {
        let n_test = ((self.len() as f64) * test_fraction).ceil() as usize;
        let n_test = n_test.min(self.len());
        let cut = self.len() - n_test;
        let part = |g: &[(Replay, usize)]| ReplayDataset { env_config: self.env_config.clone(), games: g.to_vec() };
        (part(&self.games[..cut]), part(&self.games[cut..]))
    }

    /// Re-simulates every game and converts the recorded side's actions to
    /// network targets, validating each against its masks again.
    pub fn trajectories(&self) -> Result<Vec<Vec<Frame>>, CoreError> {
        let m = self.env_config.minimap_size;
        self.games
            .iter()
            .map(|(replay, side)| {
                let run = replay.run(&self.env_config)?;
                let n = replay.actions.len();
                run.observations
                    .into_iter()
                    .zip(&replay.actions)
                    .enumerate()
                    .map(|(t, (obs, actions))| {
                        let obs = obs[*side].clone();
                        let action = NetAction::from_args(&actions[*side], &obs, m)?;
                        check_target(&obs, &action)?;
                        Ok(Frame { obs, action, is_final: t + 1 == n })
                    })
                    .collect()
            })
            .collect()
    }

    /// Writes one `game_NNNNN.replay` file per game and an `index.csv`.
    pub fn write(&self, dir: &Path) -> Result<(), CoreError> {
        fs::create_dir_all(dir)?;
        let mut index = String::from("game,file,learner,frames\n");
        for (i, (replay, side)) in self.games.iter().enumerate() {
            let file = format!("game_{i:05}.replay");
            fs::write(dir.join(&file), replay.to_text())?;
            index.push_str(&format!("{i},{file},{side},{}\n", replay.actions.len()));
        }
        fs::write(dir.join("index.csv"), index)?;
        Ok(())
    }

    pub fn read(dir: &Path, env_config: &EnvConfig) -> Result<Self, CoreError> {
        let index = fs::read_to_string(dir.join("index.csv"))?;
        let bad = |m: String| CoreError::Dataset(m);
        let mut games = Vec::new();
        for (n, line) in index.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(format!("index line {}: expected 4 fields", n + 1)));
            }
            let side: usize = f[2].parse().map_err(|_| bad(format!("index line {}: bad side {}", n + 1, f[2])))?;
            if side > 1 || f[1].contains('/') {
                return Err(bad(format!("index line {}: bad entry", n + 1)));
            }
            let replay = Replay::parse(&fs::read_to_string(dir.join(f[1]))?)?;
            games.push((replay, side));
        }
        Ok(ReplayDataset { env_config: env_config.clone(), games })
    }
}

fn check_target(obs: &Observation, a: &NetAction) -> Result<(), CoreError> {
    let ti = a.action_type;
    let ok = obs.masks.action_type[ti]
        && a.units.iter().all(|s| obs.masks.units[ti][*s])
        && a.target_unit.map_or(true, |s| obs.masks.target_unit[ti][s])
        && a.location.map_or(true, |l| obs.masks.location[ti][l]);
    if ok {
        Ok(())
    } else {
        Err(CoreError::Dataset(format!("recorded action {a:?} violates its masks")))
    }
}

/// Sum of per-head cross-entropies of teacher-forced logits against the
/// target. Heads the target does not use contribute nothing. Returns the
/// weighted loss and the unweighted per-head terms.
pub fn sl_loss<T: Real>(
    tape: &Tape<T>,
    logits: &HeadLogits,
    masks: &HeadMasks,
    target: &NetAction,
    weights: &[f64; NUM_HEADS],
    max_selected: usize,
) -> Result<(Var, [f64; NUM_HEADS]), CoreError> {
    let mut terms: Vec<(usize, Var)> = vec![
        (0, tape.cross_entropy(logits.action_type, target.action_type, Some(&masks.action_type))?),
        (1, tape.cross_entropy(logits.delay, target.delay, None)?),
        (2, tape.cross_entropy(logits.queue, target.queue as usize, None)?),
    ];
    if masks.used[3] {
        let n = masks.units[0].len() - 1;
        let seq = crate::net::unit_choices(&target.units, &masks.units[0][..n], max_selected);
        if seq.len() != logits.units.len() {
            return Err(CoreError::Invalid("unit logits do not follow the target selection".into()));
        }
        for ((row, mask), choice) in logits.units.iter().zip(&masks.units).zip(seq) {
            terms.push((3, tape.cross_entropy(*row, choice, Some(mask))?));
        }
    }
    if let (Some(l), Some(t)) = (logits.target_unit, target.target_unit) {
        terms.push((4, tape.cross_entropy(l, t, Some(&masks.target_unit))?));
    }
    if let (Some(l), Some(t)) = (logits.location, target.location) {
        terms.push((5, tape.cross_entropy(l, t, Some(&masks.location))?));
    }
    let mut per_head = [0.0; NUM_HEADS];
    let mut total: Option<Var> = None;
    for (head, v) in terms {
        per_head[head] += tape.scalar(v).as_f64();
        let w = if weights[head] == 1.0 { v } else { tape.scale(v, weights[head])? };
        total = Some(match total {
            None => w,
            Some(acc) => tape.add(acc, w)?,
        });
    }
    Ok((total.expect("at least three terms"), per_head))
}

/// Whether the masked argmax of each head reproduces the target.
pub fn head_hits<T: Real>(tape: &Tape<T>, logits: &HeadLogits, masks: &HeadMasks, target: &NetAction) -> [Option<bool>; NUM_HEADS] {
    let top = |v: Var, mask: Option<&[bool]>| {
        let x = tape.value(v).to_f64_vec();
        let all = vec![true; x.len()];
        argmax_masked(&x, mask.unwrap_or(&all))
    };
    let mut out = [None; NUM_HEADS];
    out[0] = Some(top(logits.action_type, Some(&masks.action_type)) == Some(target.action_type));
    out[1] = Some(top(logits.delay, None) == Some(target.delay));
    out[2] = Some(top(logits.queue, None) == Some(target.queue as usize));
    if masks.used[3] {
        let n = masks.units[0].len() - 1;
        let mut chosen = Vec::new();
        let mut hit = true;
        for (row, mask) in logits.units.iter().zip(&masks.units) {
            match top(*row, Some(mask)) {
                Some(c) if c < n => chosen.push(c),
                _ => {}
            }
        }
        let mut want = target.units.clone();
        want.sort_unstable();
        chosen.sort_unstable();
        hit &= want == chosen;
        out[3] = Some(hit);
    }
    if let (Some(l), Some(t)) = (logits.target_unit, target.target_unit) {
        out[4] = Some(top(l, Some(&masks.target_unit)) == Some(t));
    }
    if let (Some(l), Some(t)) = (logits.location, target.location) {
        out[5] = Some(top(l, Some(&masks.location)) == Some(t));
    }
    out
}

#[derive(Clone, Debug)]
pub struct SlConfig {
    pub adam: AdamConfig,
    pub clip: f64,
    pub head_weights: [f64; NUM_HEADS],
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for SlConfig {
    fn default() -> Self {
        SlConfig { adam: AdamConfig::default(), clip: 0.5, head_weights: [1.0; NUM_HEADS], seed: 0, shuffle: true }
    }
}

/// Loss and per-head argmax accuracy over a pass. Heads that no frame used
/// report an accuracy of `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub head_loss: [f64; NUM_HEADS],
    pub accuracy: [Option<f64>; NUM_HEADS],
    pub frames: usize,
}

impl EpochMetrics {
    pub fn csv_header() -> String {
        let mut cols = vec!["epoch".to_string(), "loss".to_string()];
        cols.extend(crate::config::HEAD_NAMES.iter().map(|h| format!("acc_{h}")));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.epoch.to_string(), format!("{:.6}", self.loss)];
        cols.extend(self.accuracy.iter().map(|a| a.map_or(String::new(), |v| format!("{v:.4}"))));
        cols.join(",")
    }
}

struct WindowResult {
    grads: Option<Grads>,
    loss: f64,
    head_loss: [f64; NUM_HEADS],
    hits: [(usize, usize); NUM_HEADS],
    frames: usize,
}

/// Teacher-forced pass over one window, starting from a zero hidden state.
fn run_window(
    net: &PolicyNet,
    params: &ParamStore,
    window: &[Frame],
    weights: &[f64; NUM_HEADS],
    dropout_seed: Option<u64>,
    want_grads: bool,
) -> Result<WindowResult, CoreError> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, params, want_grads);
    let mut hidden = HiddenState::zeros(&net.config).to_vars(&tape);
    let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let mut total: Option<Var> = None;
    let mut head_loss = [0.0; NUM_HEADS];
    let mut hits = [(0usize, 0usize); NUM_HEADS];
    for frame in window {
        let mode = Mode::Forced { action: &frame.action, dropout: rng.as_mut() };
        let out = net.step(&ctx, &frame.obs, &hidden, mode)?;
        let (loss, parts) = sl_loss(&tape, &out.logits, &out.masks, &frame.action, weights, net.config.max_selected)?;
        for (h, hit) in head_hits(&tape, &out.logits, &out.masks, &frame.action).iter().enumerate() {
            head_loss[h] += parts[h];
            if let Some(ok) = hit {
                hits[h].0 += *ok as usize;
                hits[h].1 += 1;
            }
        }
        total = Some(match total {
            None => loss,
            Some(acc) => tape.add(acc, loss)?,
        });
        hidden = out.hidden;
    }
    let total = total.ok_or_else(|| CoreError::Dataset("empty window".into()))?;
    let loss = tape.scalar(total).as_f64();
    let grads = if want_grads { Some(tape.backward(total, params)?) } else { None };
    Ok(WindowResult { grads, loss, head_loss, hits, frames: window.len() })
}

/// Cuts trajectories into windows of at most `len` frames.
pub fn windows(trajectories: &[Vec<Frame>], len: usize) -> Vec<&[Frame]> {
    trajectories.iter().flat_map(|t| t.chunks(len)).collect()
}

/// Owns the parameters and optimizer state of a supervised run.
pub struct SlTrainer {
    pub net: PolicyNet,
    pub params: ParamStore,
    pub config: SlConfig,
    adam: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl SlTrainer {
    pub fn new(net: PolicyNet, params: ParamStore, config: SlConfig) -> Self {
        let adam = Adam::new(config.adam.clone(), &params);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        SlTrainer { net, params, config, adam, rng, epoch: 0 }
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn collect(results: Vec<WindowResult>, epoch: usize) -> EpochMetrics {
        let mut m = EpochMetrics { epoch, loss: 0.0, head_loss: [0.0; NUM_HEADS], accuracy: [None; NUM_HEADS], frames: 0 };
        let mut hits = [(0usize, 0usize); NUM_HEADS];
        for r in &results {
            m.loss += r.loss;
            m.frames += r.frames;
            for h in 0..NUM_HEADS {
                m.head_loss[h] += r.head_loss[h];
                hits[h].0 += r.hits[h].0;
                hits[h].1 += r.hits[h].1;
            }
        }
        let n = m.frames.max(1) as f64;
        m.loss /= n;
        m.head_loss.iter_mut().for_each(|v| *v /= n);
        for h in 0..NUM_HEADS {
            if hits[h].1 > 0 {
                m.accuracy[h] = Some(hits[h].0 as f64 / hits[h].1 as f64);
            }
        }
        m
    }

    /// One pass over the data in batches of `batch_size` windows. Each batch
    /// averages its gradient over frames, clips it and takes an Adam step.
    /// The reported loss is measured before each batch's update.
    pub fn train_epoch(&mut self, trajectories: &[Vec<Frame>]) -> Result<EpochMetrics, CoreError> {
        let mut wins = windows(trajectories, self.net.config.sequence_length);
        if wins.is_empty() {
            return Err(CoreError::Dataset("no training frames".into()));
        }
        if self.config.shuffle {
            wins.shuffle(&mut self.rng);
        }
        let dropout = self.net.config.transformer_dropout > 0.0;
        let mut results = Vec::with_capacity(wins.len());
        for batch in wins.chunks(self.net.config.batch_size) {
            let seeds: Vec<Option<u64>> =
                batch.iter().map(|_| dropout.then(|| rand::Rng::gen(&mut self.rng))).collect();
            let (net, params, weights) = (&self.net, &self.params, &self.config.head_weights);
            let mut out: Vec<WindowResult> = batch
                .par_iter()
                .zip(seeds)
                .map(|(w, seed)| run_window(net, params, w, weights, seed, true))
                .collect::<Result<_, _>>()?;
            let frames: usize = out.iter().map(|r| r.frames).sum();
            let mut grads = Grads::zeros_like(&self.params);
            for r in &mut out {
                grads.accumulate(r.grads.as_ref().expect("gradients requested"));
                r.grads = None;
            }
            grads.scale(1.0 / frames as f64);
            if !grads.all_finite() {
                return Err(CoreError::Invalid("non-finite gradient".into()));
            }
            grads.clip_global_norm(self.config.clip);
            self.adam.step(&mut self.params, &grads);
            results.extend(out);
        }
        self.epoch += 1;
        Ok(Self::collect(results, self.epoch))
    }

    /// Loss and accuracy without touching parameters or optimizer state.
    pub fn evaluate(&self, trajectories: &[Vec<Frame>]) -> Result<EpochMetrics, CoreError> {
        let wins = windows(trajectories, self.net.config.sequence_length);
        if wins.is_empty() {
            return Err(CoreError::Dataset("no evaluation frames".into()));
        }
        let results: Vec<WindowResult> = wins
            .par_iter()
            .map(|w| run_window(&self.net, &self.params, w, &self.config.head_weights, None, false))
            .collect::<Result<_, _>>()?;
        Ok(Self::collect(results, self.epoch))
    }
}
