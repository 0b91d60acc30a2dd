use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::Ordering;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use mas_cli::{cmd_eval, cmd_gen_replays, cmd_league, cmd_rl_train, cmd_sl_train, read_pairs, RunConfig, STOP};

#[derive(Parser)]
#[command(name = "mas", about = "Train and evaluate microrts agents")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key = value config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// tiny or mini
    #[arg(long, global = true)]
    profile: Option<String>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra key=value settings, applied last
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scripted replays for supervised training
    GenReplays {
        #[arg(long)]
        games: Option<usize>,
    },
    /// Supervised training on the replay dataset
    SlTrain {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Reinforcement learning against a fixed opponent
    RlTrain {
        #[arg(long)]
        updates: Option<usize>,
    },
    /// League training with main players and exploiters
    League {
        #[arg(long)]
        matches: Option<usize>,
    },
    /// Play two agents against each other
    Eval {
        /// Checkpoint path, random or greedy
        #[arg(long)]
        a: Option<String>,
        /// Checkpoint path, random or greedy
        #[arg(long)]
        b: Option<String>,
        #[arg(long)]
        games: Option<usize>,
    },
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut pairs = match &cli.common.config {
        Some(p) => read_pairs(p)?,
        None => Vec::new(),
    };
    let c = &cli.common;
    let mut push = |k: &str, v: String| pairs.push((k.to_string(), v));
    if let Some(p) = &c.profile {
        push("profile", p.clone());
    }
    if let Some(s) = c.seed {
        push("seed", s.to_string());
    }
    if let Some(o) = &c.out {
        push("out", o.display().to_string());
    }
    match &cli.command {
        Command::GenReplays { games: Some(n) } => push("data.games", n.to_string()),
        Command::SlTrain { epochs: Some(n) } => push("sl.epochs", n.to_string()),
        Command::RlTrain { updates: Some(n) } => push("rl.updates", n.to_string()),
        Command::League { matches: Some(n) } => push("league.matches", n.to_string()),
        Command::Eval { a, b, games } => {
            if let Some(a) = a {
                push("eval.a", a.clone());
            }
            if let Some(b) = b {
                push("eval.b", b.clone());
            }
            if let Some(n) = games {
                push("eval.games", n.to_string());
            }
        }
        _ => {}
    }
    for kv in &c.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got {kv}"))?;
        push(k.trim(), v.trim().to_string());
    }
    RunConfig::from_pairs(&pairs)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = build_config(cli)?;
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("config.txt"), cfg.to_text())?;
    match cli.command {
        Command::GenReplays { .. } => cmd_gen_replays(&cfg).map(drop),
        Command::SlTrain { .. } => cmd_sl_train(&cfg).map(drop),
        Command::RlTrain { .. } => cmd_rl_train(&cfg).map(drop),
        Command::League { .. } => cmd_league(&cfg).map(drop),
        Command::Eval { .. } => cmd_eval(&cfg).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = ctrlc::set_handler(|| STOP.store(true, Ordering::Relaxed)) {
        log::warn!("no interrupt handler: {e}");
    }
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
