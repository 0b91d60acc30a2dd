use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use mas_core::league::{run_league, League, LeagueRunConfig, MatchRecord};
use mas_core::net::{NetPolicy, PolicyNet};
use mas_core::rl::{evaluate, train, Actor, EvalResult, Learner, Opponent, UpdateMetrics};
use mas_core::sl::{EpochMetrics, ReplayDataset, SlConfig, SlTrainer};
use microrts::replay::play_game;
use microrts::{EnvConfig, GreedyPolicy, Policy, RandomPolicy};
use ndgrad::checkpoint::{load_into, write_checkpoint};
use ndgrad::optim::AdamConfig;
use ndgrad::ParamStore;

use crate::config::RunConfig;

/// Set by the interrupt handler; long commands stop at the next update and
/// still write their outputs.
pub static STOP: AtomicBool = AtomicBool::new(false);

fn stopped() -> bool {
    STOP.load(Ordering::Relaxed)
}

fn env_config(cfg: &RunConfig) -> EnvConfig {
    cfg.net.env_config(cfg.data.max_game_frames)
}

fn out_dir(cfg: &RunConfig, sub: &str) -> Result<PathBuf> {
    let d = cfg.out.join(sub);
    fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
    Ok(d)
}

fn save_params(params: &ParamStore, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_checkpoint(params, &mut w)?;
    w.flush()?;
    Ok(())
}

/// A fresh network for the run, with parameters loaded from `init` when
/// given.
pub fn load_net(cfg: &RunConfig, init: Option<&Path>) -> Result<(Arc<PolicyNet>, ParamStore)> {
    let (net, mut params) = PolicyNet::new(cfg.net.clone(), cfg.substream("init"))?;
    if let Some(path) = init {
        let mut r = BufReader::new(fs::File::open(path).with_context(|| format!("opening {}", path.display()))?);
        load_into(&mut params, &mut r).with_context(|| format!("loading {}", path.display()))?;
    }
    Ok((Arc::new(net), params))
}

#[derive(Clone, Debug)]
pub struct ReplaySummary {
    pub dir: PathBuf,
    pub games: usize,
    pub frames: usize,
    /// Games won by the recorded (greedy) side.
    pub recorded_wins: usize,
    pub hash: String,
}

pub fn cmd_gen_replays(cfg: &RunConfig) -> Result<ReplaySummary> {
    let data = ReplayDataset::generate(&env_config(cfg), cfg.data.games, cfg.substream("env"))?;
    let dir = cfg.replay_dir();
    data.write(&dir)?;
    let recorded_wins = data
        .games
        .iter()
        .filter(|(r, side)| if *side == 0 { r.result > 0 } else { r.result < 0 })
        .count();
    let s = ReplaySummary { dir, games: data.len(), frames: data.num_frames(), recorded_wins, hash: data.hash() };
    println!(
        "wrote {} replays ({} frames) to {}; recorded side won {}",
        s.games,
        s.frames,
        s.dir.display(),
        s.recorded_wins
    );
    Ok(s)
}

#[derive(Clone, Debug)]
pub struct SlSummary {
    pub initial: EpochMetrics,
    pub epochs: Vec<EpochMetrics>,
    pub final_train: EpochMetrics,
    pub test: Option<EpochMetrics>,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

pub fn cmd_sl_train(cfg: &RunConfig) -> Result<SlSummary> {
    let dir = cfg.replay_dir();
    if !dir.join("index.csv").exists() {
        bail!("no replay dataset at {}", dir.display());
    }
    let data = ReplayDataset::read(&dir, &env_config(cfg))?;
    if data.is_empty() {
        bail!("replay dataset at {} is empty", dir.display());
    }
    let (train_set, test_set) = data.split(cfg.sl.test_fraction);
    let train_trajs = train_set.trajectories()?;
    let test_trajs = if test_set.is_empty() { None } else { Some(test_set.trajectories()?) };
    let (net, params) = load_net(cfg, None)?;
    let sl_cfg = SlConfig {
        adam: AdamConfig { lr: cfg.sl.lr, ..AdamConfig::default() },
        clip: cfg.sl.clip,
        seed: cfg.substream("sl"),
        ..SlConfig::default()
    };
    let mut trainer = SlTrainer::new((*net).clone(), params, sl_cfg);
    let ckpt = out_dir(cfg, "checkpoints")?;
    let metrics_dir = out_dir(cfg, "metrics")?;
    let mut csv = BufWriter::new(fs::File::create(metrics_dir.join("sl.csv"))?);
    writeln!(csv, "{},test_loss", EpochMetrics::csv_header())?;
    let initial = trainer.evaluate(&train_trajs)?;
    let best_path = ckpt.join("sl_best.ckpt");
    let mut best = f64::INFINITY;
    let mut epochs = Vec::new();
    for _ in 0..cfg.sl.epochs {
        let m = trainer.train_epoch(&train_trajs)?;
        let test = test_trajs.as_ref().map(|t| trainer.evaluate(t)).transpose()?;
        let score = test.as_ref().map_or(m.loss, |t| t.loss);
        writeln!(csv, "{},{}", m.csv_row(), test.map_or(String::new(), |t| format!("{:.6}", t.loss)))?;
        log::info!("sl epoch {} loss {:.4}", m.epoch, m.loss);
        if score < best {
            best = score;
            save_params(&trainer.params, &best_path)?;
        }
        epochs.push(m);
        if stopped() {
            break;
        }
    }
    csv.flush()?;
    let final_path = ckpt.join("sl_final.ckpt");
    save_params(&trainer.params, &final_path)?;
    if !best_path.exists() {
        save_params(&trainer.params, &best_path)?;
    }
    let final_train = trainer.evaluate(&train_trajs)?;
    let test = test_trajs.as_ref().map(|t| trainer.evaluate(t)).transpose()?;
    println!(
        "sl: {} epochs, train loss {:.4} -> {:.4}, action type accuracy {:.3}{}",
        epochs.len(),
        initial.loss,
        final_train.loss,
        final_train.accuracy[0].unwrap_or(0.0),
        test.as_ref().map_or(String::new(), |t| format!(", test loss {:.4}", t.loss))
    );
    Ok(SlSummary { initial, epochs, final_train, test, final_checkpoint: final_path, best_checkpoint: best_path })
}

/// One side of an evaluation or a fixed training opponent.
#[derive(Clone)]
pub enum PlayerSpec {
    Random,
    Greedy,
    Net(Arc<PolicyNet>, ParamStore, String),
}

impl PlayerSpec {
    pub fn parse(spec: &str, cfg: &RunConfig) -> Result<PlayerSpec> {
        Ok(match spec {
            "random" => PlayerSpec::Random,
            "greedy" => PlayerSpec::Greedy,
            path => {
                let (net, params) = load_net(cfg, Some(Path::new(path)))?;
                PlayerSpec::Net(net, params, path.to_string())
            }
        })
    }

    pub fn name(&self) -> String {
        match self {
            PlayerSpec::Random => "random".into(),
            PlayerSpec::Greedy => "greedy".into(),
            PlayerSpec::Net(_, _, n) => n.clone(),
        }
    }

    pub fn make(&self, seed: u64) -> Box<dyn Policy + Send> {
        match self {
            PlayerSpec::Random => Box::new(RandomPolicy::new(seed)),
            PlayerSpec::Greedy => Box::new(GreedyPolicy),
            PlayerSpec::Net(net, params, name) => {
                Box::new(NetPolicy::new(Arc::clone(net), params.clone(), seed, name.clone()))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct RlSummary {
    pub updates: Vec<UpdateMetrics>,
    pub version: u64,
    pub eval: Option<EvalResult>,
    pub final_checkpoint: PathBuf,
}

pub fn cmd_rl_train(cfg: &RunConfig) -> Result<RlSummary> {
    let (net, params) = load_net(cfg, cfg.rl.init.as_deref())?;
    let opponent = PlayerSpec::parse(&cfg.rl.opponent, cfg)?;
    let env = env_config(cfg);
    let actor_seed = cfg.substream("actors");
    let actors: Vec<Actor> = (0..cfg.rl.actors)
        .map(|i| {
            let opp = opponent.clone();
            let mut games = 0u64;
            let base = actor_seed ^ (i as u64).wrapping_mul(0x9e37_79b9);
            let factory = Box::new(move |_: &mut rand_chacha::ChaCha8Rng| {
                games += 1;
                Opponent::Policy(opp.make(base.wrapping_add(games)))
            });
            Actor::new(i, Arc::clone(&net), env.clone(), actor_seed, factory)
        })
        .collect();
    let mut learner = Learner::new(
        Arc::clone(&net),
        params.clone(),
        cfg.rl.loss.clone(),
        AdamConfig { lr: cfg.rl.lr, ..AdamConfig::default() },
    )
    .with_reference(Arc::clone(&net), params);
    let metrics_dir = out_dir(cfg, "metrics")?;
    let ckpt = out_dir(cfg, "checkpoints")?;
    let mut csv = BufWriter::new(fs::File::create(metrics_dir.join("rl.csv"))?);
    writeln!(csv, "{}", UpdateMetrics::csv_header())?;
    let mut failure = None;
    let (_, updates) = train(&mut learner, actors, cfg.rl.updates, cfg.schedule()?, |m, _| {
        if let Err(e) = writeln!(csv, "{}", m.csv_row()) {
            failure = Some(anyhow::Error::from(e));
            return false;
        }
        let p = &m.parts;
        if ![p.total, p.actor_critic, p.upgo, p.kl, p.entropy].iter().all(|v| v.is_finite()) {
            failure = Some(anyhow::anyhow!("non-finite loss at update {}", m.version));
            return false;
        }
        if m.version % 25 == 0 {
            log::info!("rl update {} loss {:.4}", m.version, p.total);
        }
        !stopped()
    })?;
    csv.flush()?;
    let final_path = ckpt.join("rl_final.ckpt");
    save_params(&learner.params, &final_path)?;
    if let Some(e) = failure {
        return Err(e);
    }
    let eval = if cfg.rl.eval_games > 0 && !stopped() {
        let mut opp = opponent.make(cfg.substream("rl-eval"));
        let r = evaluate(&net, &learner.params, opp.as_mut(), &env, cfg.rl.eval_games, cfg.substream("rl-eval"))?;
        fs::write(metrics_dir.join("rl_eval.txt"), eval_line("agent", &opponent.name(), &r))?;
        Some(r)
    } else {
        None
    };
    println!(
        "rl: {} updates, version {}{}",
        updates.len(),
        learner.version(),
        eval.map_or(String::new(), |r| format!(", win rate {:.3} vs {}", r.win_rate(), opponent.name()))
    );
    Ok(RlSummary { updates, version: learner.version(), eval, final_checkpoint: final_path })
}

#[derive(Clone, Debug)]
pub struct LeagueSummary {
    pub records: Vec<MatchRecord>,
    pub league: League,
    pub dir: PathBuf,
}

pub fn cmd_league(cfg: &RunConfig) -> Result<LeagueSummary> {
    let (net, params) = load_net(cfg, cfg.league.init.as_deref())?;
    let mut league = League::new(cfg.league.config.clone(), &params, cfg.substream("league"))?;
    let run = LeagueRunConfig {
        matches: cfg.league.matches,
        max_game_frames: cfg.data.max_game_frames,
        loss: cfg.rl.loss.clone(),
        adam: AdamConfig { lr: cfg.rl.lr, ..AdamConfig::default() },
        seed: cfg.substream("league-run"),
    };
    let metrics_dir = out_dir(cfg, "metrics")?;
    let mut csv = BufWriter::new(fs::File::create(metrics_dir.join("league.csv"))?);
    writeln!(csv, "{}", MatchRecord::csv_header())?;
    let mut failure = None;
    let records = run_league(&mut league, net, params, &run, |r, _| {
        if let Err(e) = writeln!(csv, "{}", r.csv_row()) {
            failure = Some(e);
            return false;
        }
        !stopped()
    })?;
    csv.flush()?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    let dir = out_dir(cfg, "league")?;
    league.save(&dir)?;
    let ckpt = out_dir(cfg, "checkpoints")?;
    for id in league.active() {
        save_params(&league.players()[id].params, &ckpt.join(format!("league_player_{id}.ckpt")))?;
    }
    println!(
        "league: {} matches, {} players ({} historical), state in {}",
        records.len(),
        league.players().len(),
        league.historicals().len(),
        dir.display()
    );
    Ok(LeagueSummary { records, league, dir })
}

fn eval_line(a: &str, b: &str, r: &EvalResult) -> String {
    format!(
        "{a} vs {b}: {} games, {} wins, {} draws, {} losses, win rate {:.4}, score {:.4}\n",
        r.games(),
        r.wins,
        r.draws,
        r.losses,
        r.win_rate(),
        r.score()
    )
}

/// Plays `games` games between two players. Consecutive pairs of games
/// share a map seed with the sides swapped.
pub fn round_robin(a: &PlayerSpec, b: &PlayerSpec, env: &EnvConfig, games: usize, seed: u64) -> Result<EvalResult> {
    let mut r = EvalResult::default();
    for g in 0..games {
        let game_seed = seed.wrapping_add((g / 2) as u64);
        let mut pa = a.make(game_seed ^ 0xa11ce);
        let mut pb = b.make(game_seed ^ 0xb0b);
        let a_side = g % 2;
        let replay = if a_side == 0 {
            play_game(env, game_seed, [pa.as_mut() as &mut dyn Policy, pb.as_mut()])?
        } else {
            play_game(env, game_seed, [pb.as_mut() as &mut dyn Policy, pa.as_mut()])?
        };
        let outcome = if a_side == 0 { replay.result } else { -replay.result };
        match outcome.signum() {
            1 => r.wins += 1,
            0 => r.draws += 1,
            _ => r.losses += 1,
        }
    }
    Ok(r)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalResult> {
    let a = PlayerSpec::parse(&cfg.eval.a, cfg)?;
    let b = PlayerSpec::parse(&cfg.eval.b, cfg)?;
    let r = round_robin(&a, &b, &env_config(cfg), cfg.eval.games, cfg.substream("eval"))?;
    let line = eval_line(&a.name(), &b.name(), &r);
    fs::write(out_dir(cfg, "metrics")?.join("eval.txt"), &line)?;
    print!("{line}");
    Ok(r)
}
