use std::sync::Arc;

use mas_core::league::*;
use mas_core::net::PolicyNet;
use mas_core::rl::RlLossConfig;
use mas_core::NetConfig;
use ndgrad::optim::AdamConfig;
use ndgrad::{ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn params(v: f32) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("w", Tensor::vector(vec![v, -v])).unwrap();
    s
}

fn league(config: LeagueConfig) -> League {
    League::new(config, &params(1.0), 7).unwrap()
}

/// Adds a frozen copy of `id` through the step rule.
fn freeze(l: &mut League, id: PlayerId) -> PlayerId {
    let saved = l.config.checkpoint_steps;
    l.config.checkpoint_steps = 1;
    l.add_steps(id, 1).unwrap();
    let h = l.maybe_checkpoint(id).unwrap().expect("step rule");
    l.config.checkpoint_steps = saved;
    h
}

fn set_rate(l: &mut League, a: PlayerId, b: PlayerId, wins: u32, losses: u32) {
    for _ in 0..wins {
        l.report(a, b, 1).unwrap();
    }
    for _ in 0..losses {
        l.report(a, b, -1).unwrap();
    }
}

fn frequencies(n: usize, draws: usize, mut f: impl FnMut() -> usize) -> Vec<f64> {
    let mut counts = vec![0usize; n];
    for _ in 0..draws {
        counts[f()] += 1;
    }
    counts.iter().map(|c| *c as f64 / draws as f64).collect()
}

#[test]
fn weight_examples() {
    for w in Weighting::ALL {
        assert_eq!(pfsp_weight(1.0, w).unwrap(), 0.0);
        assert_eq!(w.name().parse::<Weighting>().unwrap(), w);
    }
    assert_eq!(pfsp_weight(0.5, Weighting::Variance).unwrap(), 0.25);
    assert_eq!(pfsp_weight(0.5, Weighting::Squared).unwrap(), 0.25);
    assert_eq!(pfsp_weight(0.2, Weighting::LinearCapped).unwrap(), 0.5);
    assert_eq!(pfsp_weight(0.3, Weighting::Linear).unwrap(), 0.7);
    assert!(pfsp_weight(1.5, Weighting::Linear).is_err());
    assert!("cubic".parse::<Weighting>().is_err());
}

#[test]
fn probability_examples() {
    let p = pfsp_probabilities(&[0.5, 1.0, 0.0], Weighting::Squared).unwrap();
    for (a, b) in p.iter().zip([0.2, 0.0, 0.8]) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(pfsp_probabilities(&[0.3], Weighting::Linear).unwrap(), vec![1.0]);
    assert_eq!(pfsp_probabilities(&[1.0, 1.0], Weighting::Linear).unwrap(), vec![0.5, 0.5]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(pfsp_sample(&[], Weighting::Linear, &mut rng).is_err());
}

#[test]
fn sampling_frequencies_match_probabilities() {
    let rates = [0.0, 0.2, 0.45, 0.5, 0.7, 0.95];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for w in Weighting::ALL {
        let p = pfsp_probabilities(&rates, w).unwrap();
        let f = frequencies(rates.len(), 100_000, || pfsp_sample(&rates, w, &mut rng).unwrap());
        for (a, b) in f.iter().zip(&p) {
            assert!((a - b).abs() < 0.01, "{w}: {f:?} vs {p:?}");
        }
    }
}

proptest! {
    #[test]
    fn zero_weight_candidates_are_never_sampled(
        rates in proptest::collection::vec(prop_oneof![Just(1.0f64), 0.0f64..=1.0], 1..8),
        seed in any::<u64>(),
        w in 0usize..4,
    ) {
        let w = Weighting::ALL[w];
        let weights: Vec<f64> = rates.iter().map(|r| pfsp_weight(*r, w).unwrap()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let i = pfsp_sample(&rates, w, &mut rng).unwrap();
            if weights.iter().any(|x| *x > 0.0) {
                prop_assert!(weights[i] > 0.0);
            }
        }
    }

    #[test]
    fn weights_are_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        for w in [Weighting::Linear, Weighting::LinearCapped, Weighting::Squared] {
            prop_assert!(pfsp_weight(lo, w).unwrap() >= pfsp_weight(hi, w).unwrap());
        }
        let v = |p| pfsp_weight(p, Weighting::Variance).unwrap();
        if hi <= 0.5 {
            prop_assert!(v(lo) <= v(hi));
        }
        if lo >= 0.5 {
            prop_assert!(v(lo) >= v(hi));
        }
        prop_assert!(v(lo) <= 0.25 && v(hi) <= 0.25);
    }
}

#[test]
fn fresh_league_plays_main_against_main() {
    let mut l = league(LeagueConfig { main_players: 2, ..LeagueConfig::default() });
    let mains = l.main_players();
    assert_eq!(l.active().len(), 4);
    for _ in 0..200 {
        let a = l.assign(0).unwrap();
        assert!(mains.contains(&a.opponent));
        assert_eq!(a.weighting, None);
    }
}

#[test]
fn main_player_historical_branch() {
    let mut l = league(LeagueConfig::default());
    let h = freeze(&mut l, 1);
    set_rate(&mut l, 0, h, 0, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let (o, w) = l.choose_main_player(0, Some(MainBranch::Historical), &mut rng).unwrap();
        assert_eq!((o, w), (h, Some(Weighting::Squared)));
    }
    let h2 = freeze(&mut l, 0);
    let h3 = freeze(&mut l, 2);
    set_rate(&mut l, 0, h2, 1, 1);
    set_rate(&mut l, 0, h3, 3, 1);
    let pool = l.historicals();
    let rates: Vec<f64> = pool.iter().map(|o| l.payoff().win_rate(0, *o)).collect();
    let p = pfsp_probabilities(&rates, Weighting::Squared).unwrap();
    let f = frequencies(pool.len(), 10_000, || {
        let (o, _) = l.choose_main_player(0, Some(MainBranch::Historical), &mut rng).unwrap();
        pool.iter().position(|x| *x == o).unwrap()
    });
    for (a, b) in f.iter().zip(&p) {
        assert!((a - b).abs() < 0.02, "{f:?} vs {p:?}");
    }
}

#[test]
fn main_player_second_branch() {
    let mut l = league(LeagueConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // no checkpoints of the main player: play it directly even though it is rare
    assert_eq!(l.choose_main_player(0, Some(MainBranch::MainPlayer), &mut rng).unwrap(), (0, None));
    let h = freeze(&mut l, 0);
    // rare: fewer than min_games against it
    let (o, w) = l.choose_main_player(0, Some(MainBranch::MainPlayer), &mut rng).unwrap();
    assert_eq!((o, w), (h, Some(Weighting::Variance)));
    // three even games: neither rare nor hard
    set_rate(&mut l, 0, 0, 1, 1);
    l.report(0, 0, 0).unwrap();
    assert_eq!(l.choose_main_player(0, Some(MainBranch::MainPlayer), &mut rng).unwrap(), (0, None));
}

#[test]
fn main_player_hard_opponent_uses_checkpoints() {
    let cfg = LeagueConfig { main_players: 2, main_exploiters: 0, league_exploiters: 0, ..LeagueConfig::default() };
    let mut l = league(cfg);
    let h = freeze(&mut l, 1);
    set_rate(&mut l, 0, 1, 1, 9);
    set_rate(&mut l, 0, 0, 5, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let (o, w) = l.choose_main_player(0, Some(MainBranch::MainPlayer), &mut rng).unwrap();
        assert!((o, w) == (h, Some(Weighting::Variance)) || (o, w) == (0, None));
    }
}

#[test]
fn main_exploiter_rules() {
    let mut l = league(LeagueConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // fresh payoff: rate 0.5
    assert_eq!(l.choose_main_exploiter(1, &mut rng).unwrap(), (0, None));
    set_rate(&mut l, 1, 0, 1, 19);
    // no checkpoints: play the main player anyway
    assert_eq!(l.choose_main_exploiter(1, &mut rng).unwrap(), (0, None));
    let h = freeze(&mut l, 0);
    assert_eq!(l.choose_main_exploiter(1, &mut rng).unwrap(), (h, Some(Weighting::Variance)));
    let mut l = league(LeagueConfig::default());
    freeze(&mut l, 0);
    set_rate(&mut l, 1, 0, 1, 1);
    assert_eq!(l.choose_main_exploiter(1, &mut rng).unwrap(), (0, None));
}

#[test]
fn league_exploiter_rules() {
    let mut l = league(LeagueConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let active = l.active();
    for _ in 0..50 {
        let (o, w) = l.choose_league_exploiter(2, &mut rng).unwrap();
        assert!(active.contains(&o) && w.is_none());
    }
    let h1 = freeze(&mut l, 0);
    assert_eq!(l.choose_league_exploiter(2, &mut rng).unwrap(), (h1, Some(Weighting::LinearCapped)));
    let h2 = freeze(&mut l, 1);
    set_rate(&mut l, 2, h1, 0, 3);
    set_rate(&mut l, 2, h2, 3, 0);
    for _ in 0..200 {
        assert_eq!(l.choose_league_exploiter(2, &mut rng).unwrap().0, h1);
    }
    let h3 = freeze(&mut l, 2);
    set_rate(&mut l, 2, h2, 1, 2);
    set_rate(&mut l, 2, h3, 1, 1);
    let pool = l.historicals();
    let rates: Vec<f64> = pool.iter().map(|o| l.payoff().win_rate(2, *o)).collect();
    let p = pfsp_probabilities(&rates, Weighting::LinearCapped).unwrap();
    let f = frequencies(pool.len(), 100_000, || {
        let o = l.choose_league_exploiter(2, &mut rng).unwrap().0;
        pool.iter().position(|x| *x == o).unwrap()
    });
    for (a, b) in f.iter().zip(&p) {
        assert!((a - b).abs() < 0.01, "{f:?} vs {p:?}");
    }
}

#[test]
fn assignments_reference_registered_players() {
    let mut l = league(LeagueConfig { main_players: 2, league_exploiters: 2, ..LeagueConfig::default() });
    freeze(&mut l, 0);
    freeze(&mut l, 3);
    for t in 0..500u64 {
        let learner = l.active()[t as usize % 5];
        let a = l.assign(learner).unwrap();
        assert_eq!(a.timestamp, t);
        assert!(a.opponent < l.players().len());
        l.report(a.learner, a.opponent, (t % 3) as i32 - 1).unwrap();
    }
    assert!(l.payoff().is_symmetric());
    assert!(l.assign(5).is_err());
}

#[test]
fn report_examples() {
    let mut m = PayoffMatrix::new();
    assert_eq!(m.win_rate(0, 1), 0.5);
    m.report(0, 1, 1);
    assert_eq!(m.win_rate(0, 1), 1.0);
    assert_eq!(m.win_rate(1, 0), 0.0);
    let mut m = PayoffMatrix::new();
    for _ in 0..5 {
        m.report(0, 1, 1);
        m.report(0, 1, -1);
    }
    assert_eq!(m.win_rate(0, 1), 0.5);
    m.report(1, 0, 0);
    assert_eq!(m.record(0, 1), Record { wins: 5, draws: 1, losses: 5 });
    assert_eq!(m.total_games(), 11);
}

#[test]
fn concurrent_reports_are_not_lost() {
    let mut l = league(LeagueConfig::default());
    freeze(&mut l, 0);
    let n = l.players().len();
    let c = Coordinator::new(l);
    std::thread::scope(|s| {
        for t in 0..8usize {
            let c = &c;
            s.spawn(move || {
                for k in 0..1000usize {
                    let a = MatchAssignment { learner: t % n, opponent: (t + k) % n, weighting: None, timestamp: 0 };
                    c.report(&a, (k % 3) as i32 - 1).unwrap();
                }
            });
        }
    });
    let m = c.payoff();
    assert_eq!(m.total_games(), 8000);
    assert!(m.is_symmetric());
    for a in 0..n {
        for b in 0..n {
            if m.games(a, b) > 0 {
                assert!((m.win_rate(a, b) + m.win_rate(b, a) - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn checkpoint_by_win_rate() {
    let mut l = league(LeagueConfig::default());
    let h1 = freeze(&mut l, 1);
    let h2 = freeze(&mut l, 2);
    set_rate(&mut l, 0, h1, 8, 2);
    set_rate(&mut l, 0, h2, 9, 1);
    let h = l.maybe_checkpoint(0).unwrap().expect("beats every checkpoint");
    let p = &l.players()[h];
    assert!(p.is_historical && p.parent == Some(0) && p.agent_type == AgentType::MainPlayer);

    let mut l = league(LeagueConfig::default());
    let h1 = freeze(&mut l, 1);
    let h2 = freeze(&mut l, 2);
    set_rate(&mut l, 0, h1, 8, 2);
    set_rate(&mut l, 0, h2, 6, 4);
    assert_eq!(l.maybe_checkpoint(0).unwrap(), None);
    // exactly 0.7 is not higher than 0.7
    let mut l = league(LeagueConfig::default());
    let h1 = freeze(&mut l, 1);
    set_rate(&mut l, 0, h1, 7, 3);
    assert_eq!(l.maybe_checkpoint(0).unwrap(), None);
    set_rate(&mut l, 0, h1, 1, 0);
    assert!(l.maybe_checkpoint(0).unwrap().is_some());
    // too few games
    let mut l = league(LeagueConfig::default());
    let h1 = freeze(&mut l, 1);
    set_rate(&mut l, 0, h1, 2, 0);
    assert_eq!(l.maybe_checkpoint(0).unwrap(), None);
}

#[test]
fn checkpoint_by_steps() {
    let mut l = league(LeagueConfig { checkpoint_steps: 100, ..LeagueConfig::default() });
    let h1 = freeze(&mut l, 1);
    set_rate(&mut l, 0, h1, 0, 10);
    l.add_steps(0, 99).unwrap();
    assert_eq!(l.maybe_checkpoint(0).unwrap(), None);
    l.add_steps(0, 1).unwrap();
    assert!(l.maybe_checkpoint(0).unwrap().is_some());
    assert_eq!(l.maybe_checkpoint(0).unwrap(), None, "counter resets");
    l.add_steps(0, 100).unwrap();
    assert!(l.maybe_checkpoint(0).unwrap().is_some());
    assert!(l.maybe_checkpoint(h1).is_err());
}

#[test]
fn historical_players_are_immutable() {
    let mut l = league(LeagueConfig::default());
    let h = freeze(&mut l, 0);
    let hash = l.players()[h].snapshot_hash();
    l.set_params(0, params(2.0)).unwrap();
    assert!(l.set_params(h, params(3.0)).is_err());
    assert!(l.add_steps(h, 1).is_err());
    assert_eq!(l.players()[h].snapshot_hash(), hash);
    assert_ne!(l.players()[0].snapshot_hash(), hash);
}

#[test]
fn reload_reproduces_assignments() {
    let dir = tempfile::tempdir().unwrap();
    let mut l = league(LeagueConfig { main_players: 2, ..LeagueConfig::default() });
    freeze(&mut l, 0);
    freeze(&mut l, 2);
    for t in 0..30 {
        let a = l.assign(l.active()[t % 4]).unwrap();
        l.report(a.learner, a.opponent, (t % 3) as i32 - 1).unwrap();
    }
    l.save(dir.path()).unwrap();
    let mut back = League::load(dir.path()).unwrap();
    assert_eq!(back.manifest(), l.manifest());
    assert_eq!(back.payoff(), l.payoff());
    for t in 0..100 {
        let who = l.active()[t % 4];
        assert_eq!(l.assign(who).unwrap(), back.assign(who).unwrap());
    }
    let payoff = std::fs::read_to_string(dir.path().join("payoff.csv")).unwrap();
    std::fs::write(dir.path().join("payoff.csv"), payoff.replacen(",1,", ",2,", 1)).unwrap();
    assert!(League::load(dir.path()).is_err());
}

fn run(seed: u64) -> (League, Vec<MatchRecord>) {
    let (net, params) = PolicyNet::new(NetConfig::tiny(), 1).unwrap();
    let net = Arc::new(net);
    let mut l = League::new(LeagueConfig { checkpoint_steps: 150, ..LeagueConfig::default() }, &params, seed).unwrap();
    let cfg = LeagueRunConfig {
        matches: 9,
        max_game_frames: 60,
        loss: RlLossConfig::default(),
        adam: AdamConfig::default(),
        seed,
    };
    let mut seen = 0;
    let records = run_league(&mut l, net, params, &cfg, |_, _| {
        seen += 1;
        true
    }).unwrap();
    assert_eq!(seen, 9);
    (l, records)
}

#[test]
fn league_run_checkpoints_and_is_reproducible() {
    let (a, ra) = run(11);
    assert_eq!(ra.len(), 9);
    assert!(!a.historicals().is_empty());
    assert!(a.payoff().is_symmetric());
    assert_eq!(a.payoff().total_games(), 9);
    assert!(ra.iter().any(|r| !r.updates.is_empty()));
    for r in &ra {
        for u in &r.updates {
            assert!(u.parts.total.is_finite());
        }
    }
    let (b, rb) = run(11);
    assert_eq!(a.manifest(), b.manifest());
    assert_eq!(ra, rb);
}
