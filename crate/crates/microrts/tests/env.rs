use microrts::replay::{play_game, Replay};
use microrts::rules::*;
use microrts::{
    coord_to_index, index_to_coord, ActionType, ArgsAction, Env, EnvConfig, EnvError, GreedyPolicy,
    Observation, Policy, RandomPolicy, UnitKind, NUM_PLANES,
};

fn env(seed: u64) -> Env {
    Env::new(EnvConfig::default(), seed).unwrap()
}

fn noop() -> ArgsAction {
    ArgsAction::noop()
}

fn rot180(plane: &[f32], m: usize) -> Vec<f32> {
    (0..m * m).map(|i| plane[m * m - 1 - i]).collect()
}

fn own_fighters(env: &Env, player: usize) -> Vec<u32> {
    env.units().iter().filter(|u| u.owner == player && u.kind == UnitKind::Fighter).map(|u| u.id).collect()
}

#[test]
fn reset_is_deterministic() {
    let a = env(11);
    let b = env(11);
    assert_eq!(a.digest(), b.digest());
    assert_eq!(a.observe(0), b.observe(0));
    let c = env(12);
    let mut d = env(99);
    d.reset(12);
    assert_eq!(c.digest(), d.digest());
}

#[test]
fn reset_observations_are_mirror_symmetric() {
    for seed in 0..20 {
        let e = env(seed);
        let (o0, o1) = (e.observe(0), e.observe(1));
        assert_eq!(o0.entities, o1.entities);
        assert_eq!(o0.entity_valid, o1.entity_valid);
        assert_eq!(o0.scalar, o1.scalar);
        assert_eq!(o0.spatial, o1.spatial);
        assert_eq!(o0.masks, o1.masks);
    }
}

/// Player 1's own-unit planes are player 0's enemy planes seen from the
/// opposite corner. Holds at every frame, not just at reset.
#[test]
fn player_planes_swap_under_rotation() {
    let cfg = EnvConfig::default();
    let m = cfg.minimap_size;
    let mut e = env(3);
    let mut a = RandomPolicy::new(1);
    let mut b = RandomPolicy::new(2);
    for _ in 0..60 {
        let (o0, o1) = (e.observe(0), e.observe(1));
        for k in 0..3 {
            assert_eq!(o1.plane(2 + k), rot180(o0.plane(5 + k), m).as_slice());
            assert_eq!(o0.plane(2 + k), rot180(o1.plane(5 + k), m).as_slice());
        }
        assert_eq!(o1.plane(8), rot180(o0.plane(9), m).as_slice());
        assert_eq!(o1.plane(0), rot180(o0.plane(0), m).as_slice());
        if e.is_finished() {
            break;
        }
        let x = a.act(&e, 0, &o0).unwrap();
        let y = b.act(&e, 1, &o1).unwrap();
        e.step([&x, &y]).unwrap();
    }
}

#[test]
fn initial_entity_count() {
    let e = env(5);
    let o = e.observe(0);
    assert_eq!(o.num_valid(), 8);
    assert_eq!(o.entity_valid.len(), e.config().max_entities);
    assert_eq!(o.spatial.len(), NUM_PLANES * 16 * 16);
    assert!(o.spatial.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn noop_pair_only_advances_time() {
    let mut e = env(1);
    let before: Vec<_> = e.units().to_vec();
    let frame = e.frame();
    let minerals = e.minerals(0);
    let r = e.step([&noop(), &noop()]).unwrap();
    assert_eq!(e.units(), before.as_slice());
    assert_eq!(e.frame(), frame + 1);
    // only mineral income moves, one unit per worker
    assert_eq!(e.minerals(0), minerals + WORKER_INCOME);
    assert!(!r.is_final);
    assert_eq!(r.rewards, [0.0, 0.0]);
}

#[test]
fn delayed_move_fires_on_the_delay_step() {
    for d in 1..=4usize {
        let mut e = env(0);
        let f = own_fighters(&e, 0)[1];
        let start = e.unit(f).unwrap().pos();
        let dest = (start.0 + 3, start.1);
        let mv = ArgsAction {
            action_type: ActionType::Move,
            delay: d,
            selected_units: vec![f],
            target_location: Some(e.cell_to_pixel(dest)),
            ..noop()
        };
        e.step([&mv, &noop()]).unwrap();
        for _ in 1..d {
            assert_eq!(e.unit(f).unwrap().pos(), start, "delay {d}");
            e.step([&noop(), &noop()]).unwrap();
        }
        assert_eq!(e.unit(f).unwrap().pos(), (start.0 + 1, start.1), "delay {d}");
    }
}

#[test]
fn queued_moves_run_in_order() {
    let mut e = env(0);
    let f = own_fighters(&e, 0)[1];
    let start = e.unit(f).unwrap().pos();
    let first = (start.0 + 2, start.1);
    let second = (start.0 + 2, start.1 + 2);
    let mv = |cell, queue| ArgsAction {
        action_type: ActionType::Move,
        queue,
        selected_units: vec![f],
        target_location: Some(e.cell_to_pixel(cell)),
        ..noop()
    };
    let (a, b) = (mv(first, false), mv(second, true));
    e.step([&a, &noop()]).unwrap();
    e.step([&b, &noop()]).unwrap();
    assert_eq!(e.unit(f).unwrap().pos(), first);
    e.step([&noop(), &noop()]).unwrap();
    e.step([&noop(), &noop()]).unwrap();
    assert_eq!(e.unit(f).unwrap().pos(), second);
    assert_eq!(e.unit(f).unwrap().queued_orders(), 0);
}

#[test]
fn destroying_last_base_ends_the_game() {
    let mut e = env(0);
    let fighters = own_fighters(&e, 0);
    let base = e.units().iter().find(|u| u.owner == 1 && u.kind == UnitKind::Base).unwrap().id;
    let mut steps = 0;
    loop {
        let o = e.observe(0);
        let action = if o.masks.target_unit[ActionType::Attack.index()][o.slot_of(base).unwrap()] {
            ArgsAction {
                action_type: ActionType::Attack,
                selected_units: fighters.iter().copied().filter(|f| e.unit(*f).is_some()).collect(),
                target_unit: Some(base),
                ..noop()
            }
        } else {
            noop()
        };
        let r = e.step([&action, &noop()]).unwrap();
        steps += 1;
        if r.is_final {
            assert_eq!(r.rewards, [1.0, -1.0]);
            assert!(e.unit(base).is_none());
            break;
        }
        assert_eq!(r.rewards, [0.0, 0.0]);
        assert!(steps < 200);
    }
    assert!(matches!(e.step([&noop(), &noop()]), Err(EnvError::Finished)));
}

#[test]
fn truncation_gives_zero_reward() {
    let cfg = EnvConfig { max_game_frames: 10, ..EnvConfig::default() };
    let mut e = Env::new(cfg, 0).unwrap();
    for i in 0..10 {
        let r = e.step([&noop(), &noop()]).unwrap();
        assert_eq!(r.is_final, i == 9);
        assert_eq!(r.rewards, [0.0, 0.0]);
    }
    assert_eq!(e.outcome(), Some(0));
}

#[test]
fn attack_unavailable_without_fighters() {
    let mut e = env(0);
    let mut a = RandomPolicy::new(0);
    // let player 1 kill player 0's fighters with greedy play
    let mut g = GreedyPolicy;
    while !own_fighters(&e, 0).is_empty() && !e.is_finished() {
        let (o0, o1) = (e.observe(0), e.observe(1));
        let x = if o0.masks.action_type[ActionType::Stop.index()] {
            let mut x = a.act(&e, 0, &o0).unwrap();
            if x.action_type == ActionType::Attack || x.action_type == ActionType::Build {
                x = noop();
            }
            x
        } else {
            noop()
        };
        let y = g.act(&e, 1, &o1).unwrap();
        e.step([&x, &y]).unwrap();
    }
    if !e.is_finished() {
        assert!(!e.observe(0).masks.action_type[ActionType::Attack.index()]);
    }
}

#[test]
fn move_mask_excludes_occupied_cells() {
    let mut e = env(4);
    let mut a = RandomPolicy::new(8);
    let mut b = RandomPolicy::new(9);
    let m = e.config().minimap_size;
    for _ in 0..40 {
        for p in 0..2 {
            let o = e.observe(p);
            let empty = o.plane(14);
            for (i, allowed) in o.masks.location[ActionType::Move.index()].iter().enumerate() {
                if *allowed {
                    assert_eq!(empty[i], 1.0, "pixel {:?}", index_to_coord(i, m));
                }
            }
        }
        if e.is_finished() {
            break;
        }
        let (o0, o1) = (e.observe(0), e.observe(1));
        let x = a.act(&e, 0, &o0).unwrap();
        let y = b.act(&e, 1, &o1).unwrap();
        e.step([&x, &y]).unwrap();
    }
}

#[test]
fn rejected_actions_name_the_mask() {
    let e = env(0);
    let enemy_fighter = own_fighters(&e, 1)[0];
    let own = own_fighters(&e, 0)[0];
    let cases = [
        (ArgsAction { action_type: ActionType::Build, selected_units: vec![own], target_location: Some((0, 0)), ..noop() }, "type_mask"),
        (ArgsAction { action_type: ActionType::Move, selected_units: vec![enemy_fighter], target_location: Some((14, 14)), ..noop() }, "unit_selection_mask"),
        (ArgsAction { queue: true, ..noop() }, "queue_mask"),
        (ArgsAction { action_type: ActionType::Attack, selected_units: vec![own], target_unit: Some(own), ..noop() }, "target_unit_mask"),
        (ArgsAction { action_type: ActionType::Move, selected_units: vec![own], target_location: Some((1, 1)), ..noop() }, "location_mask"),
        (ArgsAction { delay: 9, ..noop() }, "delay_range"),
    ];
    for (action, mask) in cases {
        match e.validate(0, &action) {
            Err(EnvError::Rejected { mask: got, .. }) => assert_eq!(got, mask, "{action}"),
            other => panic!("{action}: expected rejection by {mask}, got {other:?}"),
        }
    }
}

fn fuzz(games: u64, frames_total: usize) -> usize {
    let cfg = EnvConfig::default();
    let mut actions = 0;
    let mut seed = 0;
    while actions < frames_total && seed < games {
        let mut e = Env::new(cfg.clone(), seed).unwrap();
        let mut a = RandomPolicy::new(seed * 2 + 1000);
        let mut b = RandomPolicy::new(seed * 2 + 1001);
        while !e.is_finished() && actions < frames_total {
            let (o0, o1) = (e.observe(0), e.observe(1));
            let x = a.act(&e, 0, &o0).unwrap();
            let y = b.act(&e, 1, &o1).unwrap();
            let h0 = [e.total_health(0), e.total_health(1)];
            let alive: Vec<(u32, u32)> = e.units().iter().map(|u| (u.id, u.health)).collect();
            e.step([&x, &y]).expect("mask-respecting actions are accepted");
            actions += 2;
            for &(id, hp) in &alive {
                if let Some(u) = e.unit(id) {
                    assert!(u.health <= hp);
                }
            }
            for p in 0..2 {
                // fighters built this frame are the only source of new health
                let spawned: u32 = e
                    .units()
                    .iter()
                    .filter(|u| u.owner == p && !alive.iter().any(|(id, _)| *id == u.id))
                    .map(|u| u.health)
                    .sum();
                assert!(e.total_health(p) <= h0[p] + spawned);
            }
        }
        seed += 1;
    }
    actions
}

#[test]
fn random_actions_are_always_accepted() {
    assert!(fuzz(10_000, 10_000) >= 10_000);
}

#[test]
fn greedy_beats_random() {
    let cfg = EnvConfig::default();
    let mut wins = 0.0;
    let mut total_frames = 0;
    for game in 0..200u64 {
        let mut g = GreedyPolicy;
        let mut r = RandomPolicy::new(10_000 + game);
        let greedy_first = game % 2 == 0;
        let replay = if greedy_first {
            play_game(&cfg, game, [&mut g, &mut r]).unwrap()
        } else {
            play_game(&cfg, game, [&mut r, &mut g]).unwrap()
        };
        total_frames += replay.actions.len();
        let greedy_result = if greedy_first { replay.result } else { -replay.result };
        wins += match greedy_result {
            1 => 1.0,
            0 => 0.5,
            _ => 0.0,
        };
    }
    let rate = wins / 200.0;
    println!("greedy win rate {rate:.3}, mean length {:.1}", total_frames as f64 / 200.0);
    assert!(rate > 0.8, "greedy win rate {rate}");
}

#[test]
fn policies_are_deterministic() {
    let cfg = EnvConfig::default();
    let run = |seed| {
        let mut a = RandomPolicy::new(seed);
        let mut g = GreedyPolicy;
        play_game(&cfg, 3, [&mut a, &mut g]).unwrap()
    };
    assert_eq!(run(1), run(1));
    let mut g1 = GreedyPolicy;
    let mut g2 = GreedyPolicy;
    assert_eq!(play_game(&cfg, 8, [&mut g1, &mut g2]).unwrap(), play_game(&cfg, 8, [&mut GreedyPolicy, &mut GreedyPolicy]).unwrap());
}

#[test]
fn replay_reproduces_terminal_state() {
    let cfg = EnvConfig::default();
    for seed in 0..10 {
        let mut g = GreedyPolicy;
        let mut r = RandomPolicy::new(seed);
        let replay = play_game(&cfg, seed, [&mut g, &mut r]).unwrap();
        let text = replay.to_text();
        let parsed = Replay::parse(&text).unwrap();
        assert_eq!(parsed, replay);
        let run1 = parsed.run(&cfg).unwrap();
        let run2 = parsed.run(&cfg).unwrap();
        assert_eq!(run1.env.digest(), run2.env.digest());
        assert_eq!(run1.observations.len(), replay.actions.len());
        for (obs, [a, b]) in run1.observations.iter().zip(&replay.actions) {
            check_action_in_obs(&obs[0], a);
            check_action_in_obs(&obs[1], b);
        }
    }
    let other = EnvConfig { max_delay: 2, ..cfg.clone() };
    let replay = play_game(&cfg, 0, [&mut GreedyPolicy, &mut GreedyPolicy]).unwrap();
    assert!(replay.run(&other).is_err());
}

fn check_action_in_obs(obs: &Observation, a: &ArgsAction) {
    assert!(obs.masks.action_type[a.action_type.index()]);
    for u in &a.selected_units {
        assert!(obs.slot_of(*u).is_some());
    }
}

#[test]
fn coordinate_index_roundtrip() {
    for i in 0..256 {
        let (r, c) = index_to_coord(i, 16);
        assert_eq!(coord_to_index(r, c, 16), i);
    }
}
