//! League state on disk: `manifest.txt`, `payoff.csv` and one checkpoint per
//! player under `snapshots/`.
//!
//! ```text
//! league 1
//! assignments 12
//! rng <seed hex> <stream> <word position>
//! config main_players 1
//! ...
//! player 0 main_player active - 5120 0 player_0.ckpt <sha256>
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndgrad::checkpoint::{read_checkpoint, write_checkpoint};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::{HistoricalPool, League, LeagueConfig, LeaguePlayer, PayoffMatrix, Record};
use crate::error::CoreError;

const HEADER: &str = "league 1";

fn bad(m: impl Into<String>) -> CoreError {
    CoreError::League(m.into())
}

fn config_lines(c: &LeagueConfig) -> Vec<(&'static str, String)> {
    let pool = match c.main_historical_pool {
        HistoricalPool::All => "all",
        HistoricalPool::MainPlayers => "main_players",
    };
    vec![
        ("main_players", c.main_players.to_string()),
        ("main_exploiters", c.main_exploiters.to_string()),
        ("league_exploiters", c.league_exploiters.to_string()),
        ("hard_threshold", c.hard_threshold.to_string()),
        ("min_games", c.min_games.to_string()),
        ("checkpoint_win_rate", c.checkpoint_win_rate.to_string()),
        ("checkpoint_steps", c.checkpoint_steps.to_string()),
        ("main_historical_pool", pool.to_string()),
    ]
}

fn set_config(c: &mut LeagueConfig, key: &str, value: &str) -> Result<(), CoreError> {
    let num = |v: &str| v.parse::<u64>().map_err(|_| bad(format!("bad value for {key}: {v}")));
    let real = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("bad value for {key}: {v}")));
    match key {
        "main_players" => c.main_players = num(value)? as usize,
        "main_exploiters" => c.main_exploiters = num(value)? as usize,
        "league_exploiters" => c.league_exploiters = num(value)? as usize,
        "hard_threshold" => c.hard_threshold = real(value)?,
        "min_games" => c.min_games = num(value)?,
        "checkpoint_win_rate" => c.checkpoint_win_rate = real(value)?,
        "checkpoint_steps" => c.checkpoint_steps = num(value)?,
        "main_historical_pool" => {
            c.main_historical_pool = match value {
                "all" => HistoricalPool::All,
                "main_players" => HistoricalPool::MainPlayers,
                _ => return Err(bad(format!("bad value for {key}: {value}"))),
            }
        }
        _ => return Err(bad(format!("unknown league config key {key}"))),
    }
    Ok(())
}

impl League {
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{HEADER}").unwrap();
        writeln!(s, "assignments {}", self.assignments).unwrap();
        writeln!(
            s,
            "rng {} {} {}",
            hex::encode(self.rng.get_seed()),
            self.rng.get_stream(),
            self.rng.get_word_pos()
        )
        .unwrap();
        for (k, v) in config_lines(&self.config) {
            writeln!(s, "config {k} {v}").unwrap();
        }
        for p in &self.players {
            writeln!(
                s,
                "player {} {} {} {} {} {} player_{}.ckpt {}",
                p.id,
                p.agent_type,
                if p.is_historical { "historical" } else { "active" },
                p.parent.map_or("-".to_string(), |x| x.to_string()),
                p.steps_trained,
                p.last_checkpoint_steps,
                p.id,
                p.snapshot_hash()
            )
            .unwrap();
        }
        s
    }

    pub fn save(&self, dir: &Path) -> Result<(), CoreError> {
        let snapshots = dir.join("snapshots");
        fs::create_dir_all(&snapshots)?;
        for p in &self.players {
            let mut w = BufWriter::new(fs::File::create(snapshots.join(format!("player_{}.ckpt", p.id)))?);
            write_checkpoint(&p.params, &mut w)?;
        }
        fs::write(dir.join("payoff.csv"), self.payoff.to_csv())?;
        fs::write(dir.join("manifest.txt"), self.manifest())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<League, CoreError> {
        let text = fs::read_to_string(dir.join("manifest.txt"))?;
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(bad("missing manifest header"));
        }
        let mut config = LeagueConfig::default();
        let mut players = Vec::new();
        let mut assignments = None;
        let mut rng = None;
        for line in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                ["assignments", n] => assignments = Some(n.parse().map_err(|_| bad("bad assignment count"))?),
                ["rng", seed, stream, pos] => {
                    let seed: [u8; 32] = hex::decode(seed)
                        .ok()
                        .and_then(|b| b.try_into().ok())
                        .ok_or_else(|| bad("bad rng seed"))?;
                    let mut r = ChaCha8Rng::from_seed(seed);
                    r.set_stream(stream.parse().map_err(|_| bad("bad rng stream"))?);
                    r.set_word_pos(pos.parse().map_err(|_| bad("bad rng position"))?);
                    rng = Some(r);
                }
                ["config", key, value] => set_config(&mut config, key, value)?,
                ["player", id, kind, state, parent, steps, last, file, hash] => {
                    let id: usize = id.parse().map_err(|_| bad("bad player id"))?;
                    if id != players.len() {
                        return Err(bad("player ids must be consecutive"));
                    }
                    let mut r = BufReader::new(fs::File::open(dir.join("snapshots").join(file))?);
                    let params = read_checkpoint(&mut r)?;
                    let p = LeaguePlayer {
                        id,
                        agent_type: kind.parse()?,
                        params,
                        is_historical: match *state {
                            "historical" => true,
                            "active" => false,
                            _ => return Err(bad(format!("bad player state {state}"))),
                        },
                        parent: match *parent {
                            "-" => None,
                            x => Some(x.parse().map_err(|_| bad("bad parent"))?),
                        },
                        steps_trained: steps.parse().map_err(|_| bad("bad step count"))?,
                        last_checkpoint_steps: last.parse().map_err(|_| bad("bad step count"))?,
                    };
                    if p.snapshot_hash() != *hash {
                        return Err(bad(format!("snapshot of player {id} does not match its hash")));
                    }
                    players.push(p);
                }
                [] => {}
                _ => return Err(bad(format!("bad manifest line {line:?}"))),
            }
        }
        let payoff = read_payoff(&fs::read_to_string(dir.join("payoff.csv"))?, players.len())?;
        Ok(League {
            config,
            players,
            payoff,
            rng: rng.ok_or_else(|| bad("manifest has no rng state"))?,
            assignments: assignments.ok_or_else(|| bad("manifest has no assignment count"))?,
        })
    }
}

fn read_payoff(text: &str, players: usize) -> Result<PayoffMatrix, CoreError> {
    let mut m = PayoffMatrix::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let v: Vec<u64> = line
            .split(',')
            .map(|x| x.parse().map_err(|_| bad(format!("bad payoff row {line:?}"))))
            .collect::<Result<_, _>>()?;
        let [a, b, wins, draws, losses] = v[..] else {
            return Err(bad(format!("bad payoff row {line:?}")));
        };
        if a as usize >= players || b as usize >= players {
            return Err(bad(format!("payoff row names an unknown player: {line:?}")));
        }
        m.insert(a as usize, b as usize, Record { wins, draws, losses });
    }
    if !m.is_symmetric() {
        return Err(bad("payoff matrix is not symmetric"));
    }
    Ok(m)
}
