//! Run configuration: a flat `key = value` file with section prefixes.
//!
//! ```text
//! profile = tiny
//! seed = 7
//! net.lstm_hidden_dim = 48
//! sl.epochs = 20
//! rl.weight.kl = 0.05
//! league.checkpoint_steps = 2000
//! ```

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use mas_core::league::{HistoricalPool, LeagueConfig};
use mas_core::rl::{ImportanceMode, RlLossConfig, Schedule};
use mas_core::NetConfig;
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub games: usize,
    pub max_game_frames: u32,
    /// Replay directory read by sl-train; defaults to `<out>/replays`.
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlSettings {
    pub epochs: usize,
    pub lr: f64,
    pub clip: f64,
    pub test_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RlSettings {
    pub updates: usize,
    pub actors: usize,
    pub trajectories_per_send: usize,
    pub lr: f64,
    pub loss: RlLossConfig,
    pub schedule: String,
    /// `random`, `greedy` or a checkpoint path.
    pub opponent: String,
    /// Starting checkpoint; random initialization when absent.
    pub init: Option<PathBuf>,
    pub eval_games: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeagueSettings {
    pub config: LeagueConfig,
    pub matches: usize,
    pub init: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub games: usize,
    /// Checkpoint path, `random` or `greedy`.
    pub a: String,
    pub b: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: String,
    pub net: NetConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataSettings,
    pub sl: SlSettings,
    pub rl: RlSettings,
    pub league: LeagueSettings,
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn new(profile: &str) -> Result<Self> {
        let net = NetConfig::profile(profile)?;
        Ok(RunConfig {
            profile: profile.to_string(),
            seed: 0,
            out: PathBuf::from("runs"),
            data: DataSettings { games: 100, max_game_frames: 200, dir: None },
            sl: SlSettings { epochs: 50, lr: 1e-3, clip: 0.5, test_fraction: 0.1 },
            rl: RlSettings {
                updates: 300,
                actors: 2,
                trajectories_per_send: net.batch_size,
                lr: 1e-3,
                loss: RlLossConfig::default(),
                schedule: "lockstep".into(),
                opponent: "random".into(),
                init: None,
                eval_games: 200,
            },
            league: LeagueSettings { config: LeagueConfig::default(), matches: 30, init: None },
            eval: EvalSettings { games: 200, a: "greedy".into(), b: "random".into() },
            net,
        })
    }

    /// Builds a config from `key=value` pairs applied in order. The profile
    /// is resolved first so that `net.*` keys refine it.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let profile = pairs.iter().rev().find(|(k, _)| k == "profile").map_or("tiny", |(_, v)| v.as_str());
        let mut cfg = RunConfig::new(profile)?;
        for (k, v) in pairs.iter().filter(|(k, _)| k != "profile") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let bad = || anyhow!("invalid value `{value}` for {key}");
        macro_rules! parse {
            () => {
                value.parse().map_err(|_| bad())?
            };
        }
        let path = || (!value.is_empty()).then(|| PathBuf::from(value));
        let (section, rest) = key.split_once('.').unwrap_or(("", key));
        match (section, rest) {
            ("", "profile") => {
                if value != self.profile {
                    bail!("profile must be set before other keys");
                }
            }
            ("", "seed") => self.seed = parse!(),
            ("", "out") => self.out = PathBuf::from(value),
            ("net", field) => {
                self.net.set(field, value)?;
                if field == "batch_size" {
                    self.rl.trajectories_per_send = self.net.batch_size;
                }
            }
            ("data", "games") => self.data.games = parse!(),
            ("data", "max_game_frames") => self.data.max_game_frames = parse!(),
            ("data", "dir") => self.data.dir = path(),
            ("sl", "epochs") => self.sl.epochs = parse!(),
            ("sl", "lr") => self.sl.lr = parse!(),
            ("sl", "clip") => self.sl.clip = parse!(),
            ("sl", "test_fraction") => self.sl.test_fraction = parse!(),
            ("rl", "updates") => self.rl.updates = parse!(),
            ("rl", "actors") => self.rl.actors = parse!(),
            ("rl", "trajectories_per_send") => self.rl.trajectories_per_send = parse!(),
            ("rl", "lr") => self.rl.lr = parse!(),
            ("rl", "weight.actor_critic") => self.rl.loss.weights.actor_critic = parse!(),
            ("rl", "weight.upgo") => self.rl.loss.weights.upgo = parse!(),
            ("rl", "weight.kl") => self.rl.loss.weights.kl = parse!(),
            ("rl", "weight.entropy") => self.rl.loss.weights.entropy = parse!(),
            ("rl", "upgo_mode") => {
                self.rl.loss.upgo_mode = match value {
                    "verbatim" => ImportanceMode::Verbatim,
                    "standard" => ImportanceMode::Standard,
                    _ => return Err(bad()),
                }
            }
            ("rl", "upgo_clip") => self.rl.loss.upgo_clip = parse!(),
            ("rl", "upgo_heads") => {
                let flags: Vec<bool> =
                    value.split(',').map(|v| v.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?;
                self.rl.loss.upgo_heads = flags.try_into().map_err(|_| bad())?;
            }
            ("rl", "td_lambda") => self.rl.loss.td_lambda = parse!(),
            ("rl", "discount") => self.rl.loss.discount = parse!(),
            ("rl", "schedule") => self.rl.schedule = value.to_string(),
            ("rl", "opponent") => self.rl.opponent = value.to_string(),
            ("rl", "init") => self.rl.init = path(),
            ("rl", "eval_games") => self.rl.eval_games = parse!(),
            ("league", "matches") => self.league.matches = parse!(),
            ("league", "init") => self.league.init = path(),
            ("league", "main_players") => self.league.config.main_players = parse!(),
            ("league", "main_exploiters") => self.league.config.main_exploiters = parse!(),
            ("league", "league_exploiters") => self.league.config.league_exploiters = parse!(),
            ("league", "hard_threshold") => self.league.config.hard_threshold = parse!(),
            ("league", "min_games") => self.league.config.min_games = parse!(),
            ("league", "checkpoint_win_rate") => self.league.config.checkpoint_win_rate = parse!(),
            ("league", "checkpoint_steps") => self.league.config.checkpoint_steps = parse!(),
            ("league", "main_historical_pool") => {
                self.league.config.main_historical_pool = match value {
                    "all" => HistoricalPool::All,
                    "main_players" => HistoricalPool::MainPlayers,
                    _ => return Err(bad()),
                }
            }
            ("eval", "games") => self.eval.games = parse!(),
            ("eval", "a") => self.eval.a = value.to_string(),
            ("eval", "b") => self.eval.b = value.to_string(),
            _ => bail!("unknown config key {key}"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.rl.actors == 0 || self.rl.trajectories_per_send == 0 {
            bail!("rl.actors and rl.trajectories_per_send must be positive");
        }
        self.schedule()?;
        if self.league.config.main_players == 0 {
            bail!("league.main_players must be positive");
        }
        if !(0.0..1.0).contains(&self.sl.test_fraction) {
            bail!("sl.test_fraction must be in [0, 1)");
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        match self.rl.schedule.as_str() {
            "lockstep" => Ok(Schedule::Lockstep),
            "async" => Ok(Schedule::Async { per_send: self.rl.trajectories_per_send }),
            s => bail!("invalid value `{s}` for rl.schedule"),
        }
    }

    /// A seed derived from the run seed and a stream name, so that each
    /// component draws from its own stream.
    pub fn substream(&self, name: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(name.as_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("digest is long enough"))
    }

    pub fn replay_dir(&self) -> PathBuf {
        self.data.dir.clone().unwrap_or_else(|| self.out.join("replays"))
    }

    /// The effective configuration as `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut lines = vec![format!("profile = {}", self.profile), format!("seed = {}", self.seed)];
        for (k, v) in self.net.fields() {
            lines.push(format!("net.{k} = {v}"));
        }
        let opt = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        let l = &self.rl.loss;
        let lc = &self.league.config;
        lines.extend([
            format!("data.games = {}", self.data.games),
            format!("data.max_game_frames = {}", self.data.max_game_frames),
            format!("sl.epochs = {}", self.sl.epochs),
            format!("sl.lr = {}", self.sl.lr),
            format!("sl.clip = {}", self.sl.clip),
            format!("sl.test_fraction = {}", self.sl.test_fraction),
            format!("rl.updates = {}", self.rl.updates),
            format!("rl.actors = {}", self.rl.actors),
            format!("rl.trajectories_per_send = {}", self.rl.trajectories_per_send),
            format!("rl.lr = {}", self.rl.lr),
            format!("rl.weight.actor_critic = {}", l.weights.actor_critic),
            format!("rl.weight.upgo = {}", l.weights.upgo),
            format!("rl.weight.kl = {}", l.weights.kl),
            format!("rl.weight.entropy = {}", l.weights.entropy),
            format!("rl.upgo_mode = {}", if l.upgo_mode == ImportanceMode::Verbatim { "verbatim" } else { "standard" }),
            format!("rl.upgo_clip = {}", l.upgo_clip),
            format!("rl.td_lambda = {}", l.td_lambda),
            format!("rl.discount = {}", l.discount),
            format!("rl.schedule = {}", self.rl.schedule),
            format!("rl.opponent = {}", self.rl.opponent),
            format!("rl.init = {}", opt(&self.rl.init)),
            format!("league.matches = {}", self.league.matches),
            format!("league.init = {}", opt(&self.league.init)),
            format!("league.main_players = {}", lc.main_players),
            format!("league.main_exploiters = {}", lc.main_exploiters),
            format!("league.league_exploiters = {}", lc.league_exploiters),
            format!("league.hard_threshold = {}", lc.hard_threshold),
            format!("league.min_games = {}", lc.min_games),
            format!("league.checkpoint_win_rate = {}", lc.checkpoint_win_rate),
            format!("league.checkpoint_steps = {}", lc.checkpoint_steps),
            format!("eval.games = {}", self.eval.games),
            format!("eval.a = {}", self.eval.a),
            format!("eval.b = {}", self.eval.b),
        ]);
        lines.join("\n") + "\n"
    }
}

/// Reads `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').with_context(|| format!("line {}: expected key = value", n + 1))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_pairs(&text)
}
