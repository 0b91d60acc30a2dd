mod common;

use mas_core::net::{HeadLogits, HeadMasks, HiddenState, Mode, NetAction, PolicyNet};
use mas_core::sl::{sl_loss, Frame, ReplayDataset, SlConfig, SlTrainer};
use mas_core::NetConfig;
use microrts::Observation;
use ndgrad::checkpoint::checkpoint_hash;
use ndgrad::nn::Ctx;
use ndgrad::optim::AdamConfig;
use ndgrad::{Tape, Tensor};
use proptest::prelude::*;

fn env_cfg() -> microrts::EnvConfig {
    NetConfig::tiny().env_config(200)
}

#[test]
fn generation_is_deterministic_and_exact() {
    let a = ReplayDataset::generate(&env_cfg(), 6, 3).unwrap();
    let b = ReplayDataset::generate(&env_cfg(), 6, 3).unwrap();
    let c = ReplayDataset::generate(&env_cfg(), 6, 4).unwrap();
    assert_eq!(a.len(), 6);
    assert_eq!(a.hash(), b.hash());
    assert_ne!(a.hash(), c.hash());
    let sides: Vec<usize> = a.games.iter().map(|g| g.1).collect();
    assert_eq!(sides, vec![0, 1, 0, 1, 0, 1]);
    for (replay, side) in &a.games {
        assert_eq!(replay.players[*side], "greedy");
    }
}

#[test]
fn recorded_actions_revalidate() {
    let data = ReplayDataset::generate(&env_cfg(), 4, 9).unwrap();
    let traj = data.trajectories().unwrap();
    assert_eq!(traj.len(), 4);
    let frames: usize = traj.iter().map(|t| t.len()).sum();
    assert_eq!(frames, data.num_frames());
    for t in &traj {
        assert!(t.last().unwrap().is_final);
        assert!(t[..t.len() - 1].iter().all(|f| !f.is_final));
    }
}

#[test]
fn dataset_files_roundtrip() {
    let data = ReplayDataset::generate(&env_cfg(), 3, 1).unwrap();
    let dir = std::env::temp_dir().join(format!("mas-sl-{}", std::process::id()));
    data.write(&dir).unwrap();
    let back = ReplayDataset::read(&dir, &env_cfg()).unwrap();
    assert_eq!(back.hash(), data.hash());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn split_is_disjoint() {
    let data = ReplayDataset::generate(&env_cfg(), 5, 2).unwrap();
    let (train, test) = data.split(0.2);
    assert_eq!((train.len(), test.len()), (4, 1));
    for (r, _) in &test.games {
        assert!(train.games.iter().all(|(t, _)| t.seed != r.seed));
    }
}

fn masks_for(obs: &Observation, a: &NetAction) -> HeadMasks {
    let cfg = NetConfig::tiny();
    HeadMasks::for_action(obs, a, cfg.max_delay, cfg.max_selected)
}

fn constant_logits(tape: &Tape<f64>, masks: &HeadMasks, fill: impl Fn(usize, usize) -> f64) -> HeadLogits {
    let row = |head: usize, n: usize| tape.constant(Tensor::vector((0..n).map(|i| fill(head, i)).collect()));
    HeadLogits {
        action_type: row(0, masks.action_type.len()),
        delay: row(1, masks.delay.len()),
        queue: row(2, 2),
        units: masks.units.iter().map(|m| row(3, m.len())).collect(),
        target_unit: masks.used[4].then(|| row(4, masks.target_unit.len())),
        location: masks.used[5].then(|| row(5, masks.location.len())),
    }
}

#[test]
fn uniform_logits_on_noop_target() {
    let cfg = NetConfig::tiny();
    let obs = common::random_game(&cfg, 1, 0)[0][0].clone();
    let target = common::simple_action(&obs, microrts::ActionType::NoOp).unwrap();
    let masks = masks_for(&obs, &target);
    let tape = Tape::<f64>::new();
    let logits = constant_logits(&tape, &masks, |_, _| 0.3);
    let (loss, parts) = sl_loss(&tape, &logits, &masks, &target, &[1.0; 6], cfg.max_selected).unwrap();
    let types = obs.masks.action_type.iter().filter(|v| **v).count() as f64;
    let expected = types.ln() + (cfg.max_delay as f64).ln() + 2f64.ln();
    assert!((tape.scalar(loss) - expected).abs() < 1e-9);
    assert_eq!(parts[3..], [0.0; 3]);
}

#[test]
fn confident_correct_logits_give_near_zero_loss() {
    let cfg = NetConfig::tiny();
    let obs = common::random_game(&cfg, 1, 0)[0][0].clone();
    let target = common::simple_action(&obs, microrts::ActionType::Move).unwrap();
    let masks = masks_for(&obs, &target);
    let seq = mas_core::net::unit_choices(&target.units, &obs.masks.units[target.action_type], cfg.max_selected);
    let tape = Tape::<f64>::new();
    let hot = |head: usize, i: usize, step: usize| {
        let want = match head {
            0 => target.action_type,
            1 => target.delay,
            2 => target.queue as usize,
            3 => seq[step],
            4 => target.target_unit.unwrap_or(0),
            _ => target.location.unwrap(),
        };
        if i == want { 60.0 } else { 0.0 }
    };
    let mut logits = constant_logits(&tape, &masks, |h, i| hot(h, i, 0));
    logits.units = (0..masks.units.len())
        .map(|s| tape.constant(Tensor::vector((0..masks.units[s].len()).map(|i| hot(3, i, s)).collect())))
        .collect();
    let (loss, _) = sl_loss(&tape, &logits, &masks, &target, &[1.0; 6], cfg.max_selected).unwrap();
    assert!(tape.scalar(loss) < 1e-20);
}

#[test]
fn teacher_forced_loss_is_head_separable() {
    let cfg = NetConfig::tiny();
    let (net, store) = PolicyNet::new(cfg.clone(), 4).unwrap();
    let game = common::random_game(&cfg, 21, 15);
    let obs = &game[15.min(game.len() - 1)][0];
    let target = common::simple_action(obs, microrts::ActionType::Move).unwrap();
    let run = |weights: [f64; 6]| {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false);
        let out = net
            .step(&ctx, obs, &HiddenState::zeros(&cfg).to_vars(&tape), Mode::Forced { action: &target, dropout: None })
            .unwrap();
        let (loss, _) = sl_loss(&tape, &out.logits, &out.masks, &target, &weights, cfg.max_selected).unwrap();
        tape.scalar(loss) as f64
    };
    let full = run([1.0; 6]);
    let mut sum = 0.0;
    for h in 0..6 {
        let mut w = [0.0; 6];
        w[h] = 1.0;
        sum += run(w);
    }
    assert!((full - sum).abs() < 1e-4 * full.max(1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn loss_is_nonnegative(values in proptest::collection::vec(-20.0f64..20.0, 600)) {
        let cfg = NetConfig::tiny();
        let obs = common::random_game(&cfg, 1, 0)[0][0].clone();
        for t in [microrts::ActionType::NoOp, microrts::ActionType::Move] {
            let target = common::simple_action(&obs, t).unwrap();
            let masks = masks_for(&obs, &target);
            let tape = Tape::<f64>::new();
            let logits = constant_logits(&tape, &masks, |h, i| values[(h * 97 + i) % values.len()]);
            let (loss, parts) = sl_loss(&tape, &logits, &masks, &target, &[1.0; 6], cfg.max_selected).unwrap();
            prop_assert!(tape.scalar(loss) >= 0.0);
            prop_assert!(parts.iter().all(|p| *p >= 0.0));
        }
    }
}

fn trainer(lr: f64) -> SlTrainer {
    let (net, params) = PolicyNet::new(NetConfig::tiny(), 5).unwrap();
    SlTrainer::new(net, params, SlConfig { adam: AdamConfig { lr, ..AdamConfig::default() }, ..SlConfig::default() })
}

#[test]
fn ten_sample_overfit() {
    let data = ReplayDataset::generate(&env_cfg(), 1, 17).unwrap();
    let mut traj = data.trajectories().unwrap();
    traj[0].truncate(10);
    let mut t = trainer(3e-3);
    let first = t.evaluate(&traj).unwrap();
    let mut losses = vec![first.loss];
    for _ in 0..50 {
        t.train_epoch(&traj).unwrap();
        losses.push(t.evaluate(&traj).unwrap().loss);
    }
    let upticks = losses.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(upticks <= 5, "losses {losses:?}");
    assert!(losses[50] < losses[0]);
    let last = t.evaluate(&traj).unwrap();
    assert!(last.accuracy[0].unwrap() > 0.95, "{last:?}");
}

#[test]
fn evaluation_does_not_mutate_parameters() {
    let data = ReplayDataset::generate(&env_cfg(), 1, 5).unwrap();
    let traj = data.trajectories().unwrap();
    let t = trainer(1e-3);
    let before = checkpoint_hash(&t.params);
    let a = t.evaluate(&traj).unwrap();
    let b = t.evaluate(&traj).unwrap();
    assert_eq!(before, checkpoint_hash(&t.params));
    assert_eq!(a, b);
}

#[test]
fn empty_dataset_is_an_error() {
    let mut t = trainer(1e-3);
    let empty: Vec<Vec<Frame>> = Vec::new();
    assert!(t.train_epoch(&empty).is_err());
    assert!(t.evaluate(&empty).is_err());
    assert_eq!(t.epoch(), 0);
}
