//! Line-based text replays and a helper to play scripted games.
//!
//! ```text
//! microrts-replay 1
//! seed 7
//! config 3f0c...
//! players greedy random
//! result 1
//! frames 2
//! build 1 0 u=2 l=0,4 | noop 1 0
//! ...
//! ```

use std::fmt::Write;

use crate::action::ArgsAction;
use crate::config::EnvConfig;
use crate::env::Env;
use crate::error::EnvError;
use crate::obs::Observation;
use crate::policy::Policy;

const HEADER: &str = "microrts-replay 1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Replay {
    pub seed: u64,
    pub config_hash: String,
    pub players: [String; 2],
    /// Final reward of player 0.
    pub result: i32,
    pub actions: Vec<[ArgsAction; 2]>,
}

/// Observations and actions reconstructed by re-simulating a replay.
#[derive(Clone, Debug)]
pub struct ReplayRun {
    /// Observation pair seen before each frame's actions.
    pub observations: Vec<[Observation; 2]>,
    pub env: Env,
}

impl Replay {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{HEADER}").unwrap();
        writeln!(s, "seed {}", self.seed).unwrap();
        writeln!(s, "config {}", self.config_hash).unwrap();
        writeln!(s, "players {} {}", self.players[0], self.players[1]).unwrap();
        writeln!(s, "result {}", self.result).unwrap();
        writeln!(s, "frames {}", self.actions.len()).unwrap();
        for [a, b] in &self.actions {
            writeln!(s, "{a} | {b}").unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Replay, EnvError> {
        let err = |m: &str| EnvError::Replay(m.to_string());
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(err("missing header"));
        }
        let mut field = |key: &str| -> Result<String, EnvError> {
            let line = lines.next().ok_or_else(|| err(&format!("missing {key}")))?;
            line.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| err(&format!("expected {key}")))
        };
        let seed = field("seed")?.parse().map_err(|_| err("bad seed"))?;
        let config_hash = field("config")?;
        let players_line = field("players")?;
        let (p0, p1) = players_line.split_once(' ').ok_or_else(|| err("bad players"))?;
        let result = field("result")?.parse().map_err(|_| err("bad result"))?;
        let frames: usize = field("frames")?.parse().map_err(|_| err("bad frame count"))?;
        let mut actions = Vec::with_capacity(frames);
        for line in lines.by_ref().take(frames) {
            let (a, b) = line.split_once(" | ").ok_or_else(|| err("bad action line"))?;
            actions.push([a.parse()?, b.parse()?]);
        }
        if actions.len() != frames {
            return Err(err("truncated replay"));
        }
        Ok(Replay { seed, config_hash, players: [p0.to_string(), p1.to_string()], result, actions })
    }

    /// Re-simulates the game from its seed, checking every action again.
    pub fn run(&self, config: &EnvConfig) -> Result<ReplayRun, EnvError> {
        if config.hash() != self.config_hash {
            return Err(EnvError::Replay("config hash mismatch".into()));
        }
        let mut env = Env::new(config.clone(), self.seed)?;
        let mut observations = Vec::with_capacity(self.actions.len());
        let mut obs = [env.observe(0), env.observe(1)];
        for [a, b] in &self.actions {
            let step = env.step([a, b])?;
            observations.push(obs);
            obs = step.observations;
        }
        if env.outcome() != Some(self.result) {
            return Err(EnvError::Replay("result does not match re-simulation".into()));
        }
        Ok(ReplayRun { observations, env })
    }
}

/// Plays one game to the end and records it.
pub fn play_game(config: &EnvConfig, seed: u64, policies: [&mut dyn Policy; 2]) -> Result<Replay, EnvError> {
    let [p0, p1] = policies;
    p0.reset();
    p1.reset();
    let mut env = Env::new(config.clone(), seed)?;
    let mut obs = [env.observe(0), env.observe(1)];
    let mut actions = Vec::new();
    while !env.is_finished() {
        let a = p0.act(&env, 0, &obs[0])?;
        let b = p1.act(&env, 1, &obs[1])?;
        obs = env.step([&a, &b])?.observations;
        actions.push([a, b]);
    }
    Ok(Replay {
        seed,
        config_hash: config.hash(),
        players: [p0.name(), p1.name()],
        result: env.outcome().expect("finished"),
        actions,
    })
}
