mod common;

use std::sync::Arc;

use mas_core::net::{HiddenState, Mode, PolicyNet};
use mas_core::rl::*;
use mas_core::NetConfig;
use microrts::RandomPolicy;
use ndgrad::checkpoint::checkpoint_hash;
use ndgrad::nn::Ctx;
use ndgrad::optim::AdamConfig;
use ndgrad::{ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---- independent oracles ----

fn lambda_oracle(b: &[f64], r: &[f64], d: &[f64], l: &[f64], t: usize) -> f64 {
    if t == r.len() {
        return b[r.len() - 1];
    }
    r[t] + d[t] * ((1.0 - l[t]) * b[t] + l[t] * lambda_oracle(b, r, d, l, t + 1))
}

fn upgo_oracle(v: &[f64], r: &[f64], d: &[f64], t: usize) -> f64 {
    let n = r.len();
    if t + 1 == n {
        return r[t] + d[t] * v[n];
    }
    let follow = r[t + 1] + d[t + 1] * v[t + 2] >= v[t + 1];
    let next = if follow { upgo_oracle(v, r, d, t + 1) } else { v[t + 1] };
    r[t] + d[t] * next
}

/// V-trace targets by their defining sum.
fn vtrace_oracle(log_rhos: &[f64], v: &[f64], r: &[f64], d: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = r.len();
    let rho: Vec<f64> = log_rhos.iter().map(|x| x.exp().min(1.0)).collect();
    let c = rho.clone();
    let vs_at = |s: usize| -> f64 {
        if s == n {
            return v[n];
        }
        let mut total = v[s];
        for k in s..n {
            let mut coef = 1.0;
            for i in s..k {
                coef *= d[i] * c[i];
            }
            total += coef * rho[k] * (r[k] + d[k] * v[k + 1] - v[k]);
        }
        total
    };
    let vs: Vec<f64> = (0..n).map(vs_at).collect();
    let adv = (0..n).map(|t| rho[t] * (r[t] + d[t] * vs_at(t + 1) - v[t])).collect();
    (vs, adv)
}

struct Instance {
    values: Vec<f64>,
    rewards: Vec<f64>,
    discounts: Vec<f64>,
    lambdas: Vec<f64>,
    log_rhos: Vec<f64>,
}

fn instance(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.gen_range(1..=6);
    Instance {
        values: (0..=n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        rewards: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        discounts: (0..n).map(|_| if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.5..=1.0) }).collect(),
        lambdas: (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect(),
        log_rhos: (0..n).map(|_| rng.gen_range(-2.0..1.0)).collect(),
    }
}

#[test]
fn returns_match_brute_force_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let x = instance(&mut rng);
        let n = x.rewards.len();
        let g = lambda_return(&x.values[1..], &x.rewards, &x.discounts, &x.lambdas).unwrap();
        for t in 0..n {
            assert!((g[t] - lambda_oracle(&x.values[1..], &x.rewards, &x.discounts, &x.lambdas, t)).abs() < 1e-5);
        }
        let u = upgo_returns(&x.values, &x.rewards, &x.discounts).unwrap();
        for t in 0..n {
            assert!((u[t] - upgo_oracle(&x.values, &x.rewards, &x.discounts, t)).abs() < 1e-5);
        }
        let v = vtrace(&x.log_rhos, &x.values, &x.rewards, &x.discounts, 1.0, 1.0).unwrap();
        let (vs, adv) = vtrace_oracle(&x.log_rhos, &x.values, &x.rewards, &x.discounts);
        for t in 0..n {
            assert!((v.vs[t] - vs[t]).abs() < 1e-5);
            assert!((v.pg_advantages[t] - adv[t]).abs() < 1e-5);
        }
    }
}

#[test]
fn upgo_limits() {
    let r = [0.1, 0.2, 0.3, 0.4];
    let d = [1.0; 4];
    // values well below what is achieved: every step improves
    let low = [-5.0, -5.0, -5.0, -5.0, 0.0];
    let u = upgo_returns(&low, &r, &d).unwrap();
    let mc = lambda_return(&low[1..], &r, &d, &[1.0; 4]).unwrap();
    assert_eq!(u, mc);
    // values far above: never improving, one-step targets
    let high = [5.0, 4.0, 3.0, 2.0, 0.0];
    let u = upgo_returns(&high, &r, &d).unwrap();
    let td: Vec<f64> = (0..4).map(|t| r[t] + d[t] * high[t + 1]).collect();
    assert_eq!(u, td);
}

#[test]
fn on_policy_vtrace_targets_are_lambda_one_returns() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let x = instance(&mut rng);
        let n = x.rewards.len();
        let v = vtrace(&vec![0.0; n], &x.values, &x.rewards, &x.discounts, 1.0, 1.0).unwrap();
        let g = lambda_return(&x.values[1..], &x.rewards, &x.discounts, &vec![1.0; n]).unwrap();
        for t in 0..n {
            assert!((v.vs[t] - g[t]).abs() < 1e-9);
        }
    }
}

fn scalar_log_probs(tape: &Tape<f64>, logits: &[[f64; 3]], actions: &[usize]) -> Vec<ndgrad::Var> {
    logits
        .iter()
        .zip(actions)
        .map(|(l, a)| {
            let x = tape.constant(Tensor::vector(l.to_vec()));
            tape.pick(tape.log_softmax(x, None).unwrap(), *a).unwrap()
        })
        .collect()
}

#[test]
fn on_policy_vtrace_pg_equals_advantage_actor_critic() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let x = instance(&mut rng);
        let n = x.rewards.len();
        let logits: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let actions: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let tape = Tape::<f64>::new();
        let lt = scalar_log_probs(&tape, &logits, &actions);
        let lb: Vec<f64> = lt.iter().map(|v| tape.scalar(*v)).collect();
        let loss = vtrace_pg_loss(&tape, &lt, &lb, &x.rewards, &x.values, &x.discounts, 1.0, 1.0).unwrap();
        let g = lambda_return(&x.values[1..], &x.rewards, &x.discounts, &vec![1.0; n]).unwrap();
        let a2c: f64 = (0..n).map(|t| (g[t] - x.values[t]) * -lb[t]).sum();
        assert!((tape.scalar(loss) - a2c).abs() < 1e-6);
    }
}

#[test]
fn upgo_loss_cases() {
    assert!((upgo_importance(ImportanceMode::Verbatim, true, -0.7, -0.7) - 1.0).abs() < 1e-7);
    assert!((upgo_importance(ImportanceMode::Standard, false, -1.3, -1.3) - 1.0).abs() < 1e-7);
    // verbatim factor is pi_b / pi_t; the standard one is its inverse
    assert!((upgo_importance(ImportanceMode::Verbatim, false, 0.5f64.ln(), 0.25f64.ln()) - 0.5).abs() < 1e-12);
    assert!((upgo_importance(ImportanceMode::Standard, false, 0.5f64.ln(), 0.25f64.ln()) - 2.0).abs() < 1e-12);
    assert_eq!(upgo_importance(ImportanceMode::Standard, true, 0.5f64.ln(), 0.25f64.ln()), 1.0);

    // three steps, two-way heads, hand computed
    let logits = [[0.0, 0.0, -50.0], [1.0, 0.0, -50.0], [0.0, 2.0, -50.0]];
    let actions = [0, 0, 1];
    let tape = Tape::<f64>::new();
    let lt = scalar_log_probs(&tape, &logits, &actions);
    let p_t = [0.5, 1.0 / (1.0 + (-1.0f64).exp()), 1.0 / (1.0 + (-2.0f64).exp())];
    let p_b = [0.25, 0.5, 0.9];
    let lb: Vec<f64> = p_b.iter().map(|p: &f64| p.ln()).collect();
    let returns = [1.0, 0.5, -1.0];
    let baselines = [0.2, 0.7, 0.0];
    let loss = upgo_loss(&tape, &lt, &lb, &returns, &baselines, ImportanceMode::Verbatim, false).unwrap();
    let mut manual = 0.0;
    for t in 0..3 {
        let weight = (returns[t] - baselines[t]) * (p_b[t] / p_t[t]);
        manual += weight * -(p_t[t] as f64).ln();
    }
    assert!((tape.scalar(loss) - manual).abs() < 1e-6, "{} vs {manual}", tape.scalar(loss));

    let zero = upgo_loss(&tape, &lt, &lb, &baselines, &baselines, ImportanceMode::Verbatim, true).unwrap();
    assert_eq!(tape.scalar(zero), 0.0);
}

#[test]
fn kl_examples() {
    let tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::vector(vec![0.9f64.ln(), 0.1f64.ln()]));
    let kl = kl_divergence(&tape, p, &[0.0, 0.0], &[true, true]).unwrap();
    let expected = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
    assert!((tape.scalar(kl) - expected).abs() < 1e-9);
    assert!((expected - 0.3681).abs() < 1e-4);
    let same = kl_divergence(&tape, p, &[0.9f32.ln(), 0.1f32.ln()], &[true, true]).unwrap();
    assert!(tape.scalar(same).abs() < 1e-7);
}

#[test]
fn kl_is_nonnegative_on_random_masked_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..10_000 {
        let n = rng.gen_range(1..10);
        let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
        mask[rng.gen_range(0..n)] = true;
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let b: Vec<f32> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let tape = Tape::<f64>::new();
        let kl = kl_divergence(&tape, tape.constant(Tensor::vector(a)), &b, &mask).unwrap();
        assert!(tape.scalar(kl) >= -1e-12);
    }
}

#[test]
fn entropy_examples() {
    let tape = Tape::<f64>::new();
    let uniform = tape.constant(Tensor::vector(vec![0.3; 5]));
    let mask = [true, false, true, true, false];
    let loss = entropy_loss(&tape, &[(uniform, &mask[..])]).unwrap();
    assert!((tape.scalar(loss) + 1.0).abs() < 1e-12);
    let two = tape.constant(Tensor::vector(vec![0.0, 0.0]));
    let h = normalized_entropy(&tape, two, &[true, true]).unwrap();
    assert!((tape.scalar(h) - 1.0).abs() < 1e-12);
    let sharp = tape.constant(Tensor::vector(vec![100.0, 0.0, 0.0]));
    let h = normalized_entropy(&tape, sharp, &[true, true, true]).unwrap();
    assert!(tape.scalar(h).abs() < 1e-12);
    let single = normalized_entropy(&tape, sharp, &[false, true, false]).unwrap();
    assert_eq!(tape.scalar(single), 0.0);
}

#[test]
fn td_lambda_loss_examples() {
    let tape = Tape::<f64>::new();
    let b: Vec<_> = [0.1, -0.4, 0.7].iter().map(|v| tape.constant(Tensor::vector(vec![*v]))).collect();
    let same = td_lambda_loss(&tape, &b, &[0.1, -0.4, 0.7]).unwrap();
    assert_eq!(tape.scalar(same), 0.0);
    let off = td_lambda_loss(&tape, &b, &[0.35, -0.15, 0.95]).unwrap();
    assert!((tape.scalar(off) - 0.0625).abs() < 1e-12);
    let random = td_lambda_loss(&tape, &b, &[1.0, 0.0, 0.0]).unwrap();
    let manual = (0.9f64.powi(2) + 0.4f64.powi(2) + 0.7f64.powi(2)) / 3.0;
    assert!((tape.scalar(random) - manual).abs() < 1e-12);
}

#[test]
fn weights_carry_no_gradient() {
    let mut store = ParamStore::<f64>::new();
    let id = store.insert("logits", Tensor::vector(vec![0.3, -0.2, 0.9])).unwrap();
    for reward in [0.5, 2.0] {
        let tape = Tape::<f64>::new();
        let ctx = Ctx::new(&tape, &store, true);
        let x = ctx.p(id);
        let lp = tape.pick(tape.log_softmax(x, None).unwrap(), 1).unwrap();
        let values = [0.1, 0.0];
        let loss = vtrace_pg_loss(&tape, &[lp], &[tape.scalar(lp)], &[reward], &values, &[1.0], 1.0, 1.0).unwrap();
        let grads = tape.backward(loss, &store).unwrap();
        let adv = reward - 0.1;
        let p: Vec<f64> = {
            let e: Vec<f64> = [0.3f64, -0.2, 0.9].iter().map(|v| v.exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        };
        for i in 0..3 {
            let expected = adv * (p[i] - if i == 1 { 1.0 } else { 0.0 });
            assert!((grads.get(id).data()[i] - expected).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn lambda_return_matches_oracle(
        data in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0, 0.0f64..=1.0, 0.0f64..=1.0), 1..=6)
    ) {
        let b: Vec<f64> = data.iter().map(|x| x.0).collect();
        let r: Vec<f64> = data.iter().map(|x| x.1).collect();
        let d: Vec<f64> = data.iter().map(|x| x.2).collect();
        let l: Vec<f64> = data.iter().map(|x| x.3).collect();
        let g = lambda_return(&b, &r, &d, &l).unwrap();
        for t in 0..r.len() {
            prop_assert!((g[t] - lambda_oracle(&b, &r, &d, &l, t)).abs() < 1e-9);
        }
    }
}

// ---- trajectories, actors and the learner ----

fn tiny_net() -> (Arc<PolicyNet>, ParamStore) {
    let (net, params) = PolicyNet::new(NetConfig::tiny(), 3).unwrap();
    (Arc::new(net), params)
}

fn random_opponents(seed: u64) -> OpponentFactory {
    let mut k = seed;
    Box::new(move |_| {
        k += 1;
        Opponent::Policy(Box::new(RandomPolicy::new(k)))
    })
}

fn actor(net: &Arc<PolicyNet>, id: usize, frames: u32) -> Actor {
    Actor::new(id, Arc::clone(net), net.config.env_config(frames), 11, random_opponents(id as u64 * 1000))
}

#[test]
fn trajectory_wire_roundtrip() {
    let (net, params) = tiny_net();
    let mut a = actor(&net, 0, 40);
    let snap = Snapshot { version: 3, params };
    let trajs = a.collect(&snap, 7).unwrap();
    let mut buf = Vec::new();
    for t in &trajs {
        write_trajectory(t, &mut buf).unwrap();
    }
    let mut r = buf.as_slice();
    let mut back = Vec::new();
    while let Some(t) = read_trajectory(&mut r).unwrap() {
        back.push(t);
    }
    assert_eq!(back, trajs);
    let mut bad = buf.clone();
    bad[0] ^= 1;
    assert!(read_trajectory(&mut bad.as_slice()).is_err());
    let cut = &buf[..buf.len() - 3];
    let mut r = cut;
    let mut err = false;
    loop {
        match read_trajectory(&mut r) {
            Ok(Some(_)) => continue,
            Ok(None) => break,
            Err(_) => {
                err = true;
                break;
            }
        }
    }
    assert!(err);
}

#[test]
fn actor_trajectories_are_well_formed() {
    let (net, params) = tiny_net();
    let cfg = net.config.clone();
    let mut a = actor(&net, 1, 60);
    let snap = Snapshot { version: 0, params: params.clone() };
    let mut finals = 0;
    for _ in 0..6 {
        let trajs = a.collect(&snap, 4).unwrap();
        assert_eq!(trajs.len(), 4);
        for t in &trajs {
            assert!(t.len() == cfg.sequence_length || t.ends_game());
            assert_eq!(t.bootstrap.is_none(), t.ends_game());
            finals += t.ends_game() as usize;
            // behaviour logits reproduce the snapshot's forward pass exactly
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &params, false);
            let mut h = t.initial_hidden.to_vars(&tape);
            for s in &t.steps {
                let out = net.step(&ctx, &s.obs, &h, Mode::Forced { action: &s.action, dropout: None }).unwrap();
                assert_eq!(out.logits.to_data(&tape, &cfg), s.behavior);
                h = out.hidden;
            }
        }
    }
    let results = a.take_results();
    assert_eq!(results.len(), finals);
    for r in results {
        assert!(r.reward == 1.0 || r.reward == -1.0 || r.reward == 0.0);
    }
}

#[test]
fn outcome_matches_terminal_reward() {
    let (net, params) = tiny_net();
    let mut a = actor(&net, 2, 30);
    let snap = Snapshot { version: 0, params };
    let mut last_rewards = Vec::new();
    for _ in 0..12 {
        for t in a.collect(&snap, 1).unwrap() {
            if t.ends_game() {
                last_rewards.push(t.steps.last().unwrap().reward);
            }
        }
    }
    let results = a.take_results();
    assert!(!results.is_empty());
    let outcomes: Vec<f32> = results.iter().map(|r| r.reward).collect();
    assert_eq!(outcomes, last_rewards[..outcomes.len()]);
}

#[test]
fn mirror_matches_record_both_sides() {
    let (net, params) = tiny_net();
    let mut a = Actor::new(0, Arc::clone(&net), net.config.env_config(20), 1, Box::new(|_| Opponent::Mirror));
    let trajs = a.collect(&Snapshot { version: 0, params }, 6).unwrap();
    assert!(trajs.iter().any(|t| t.player == 0) && trajs.iter().any(|t| t.player == 1));
}

fn learner(weights: LossWeights) -> Learner {
    let (net, params) = tiny_net();
    let (ref_net, ref_params) = (Arc::clone(&net), params.clone());
    let loss = RlLossConfig { weights, ..RlLossConfig::default() };
    Learner::new(net, params, loss, AdamConfig::default()).with_reference(ref_net, ref_params)
}

#[test]
fn learner_updates() {
    let mut l = learner(LossWeights::default());
    let mut a = actor(&l.net, 0, 60);
    let trajs = a.collect(&l.snapshot(), 2 * l.batch_size - 1).unwrap();
    let mut updates = Vec::new();
    for (i, t) in trajs.into_iter().enumerate() {
        let before = checkpoint_hash(&l.params);
        match l.push(t).unwrap() {
            Some(m) => {
                assert_eq!(i + 1, l.batch_size);
                assert_ne!(before, checkpoint_hash(&l.params));
                let w = LossWeights::default();
                assert!((m.parts.weighted_total(&w) - m.parts.total).abs() < 1e-4 * (1.0 + m.parts.total.abs()));
                updates.push(m);
            }
            None => assert_eq!(before, checkpoint_hash(&l.params)),
        }
    }
    assert_eq!(updates.len(), 1);
    assert_eq!(l.buffered(), l.batch_size - 1);
    assert_eq!(l.version(), 1);
    assert_eq!(l.consumed(), l.batch_size as u64);
}

#[test]
fn zero_weights_leave_parameters_unchanged() {
    let mut l = learner(LossWeights { actor_critic: 0.0, upgo: 0.0, kl: 0.0, entropy: 0.0 });
    let mut a = actor(&l.net, 0, 60);
    let batch = a.collect(&l.snapshot(), l.batch_size).unwrap();
    let before = checkpoint_hash(&l.params);
    let m = l.update(&batch).unwrap();
    assert_eq!(m.version, 1);
    assert_eq!(m.grad_norm, 0.0);
    assert_eq!(before, checkpoint_hash(&l.params));
}

#[test]
fn lockstep_training_is_reproducible() {
    let run = || {
        let mut l = learner(LossWeights::default());
        let actors = vec![actor(&l.net, 0, 50), actor(&l.net, 1, 50)];
        let mut versions = Vec::new();
        let (_, metrics) = train(&mut l, actors, 3, Schedule::Lockstep, |m, _| {
            versions.push(m.version);
            true
        }).unwrap();
        assert_eq!(versions, vec![1, 2, 3]);
        (checkpoint_hash(&l.params), metrics)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a, b);
    assert_eq!(ma, mb);
}

#[test]
fn async_training_runs() {
    let mut l = learner(LossWeights::default());
    let actors = vec![actor(&l.net, 0, 50), actor(&l.net, 1, 50), actor(&l.net, 2, 50)];
    let (actors, metrics) = train(&mut l, actors, 3, Schedule::Async { per_send: 2 }, |_, _| true).unwrap();
    assert_eq!(actors.len(), 3);
    let versions: Vec<u64> = metrics.iter().map(|m| m.version).collect();
    assert_eq!(versions, vec![1, 2, 3]);
    assert_eq!(l.consumed(), 3 * l.batch_size as u64);
}

#[test]
fn trajectory_loss_is_finite_with_and_without_reference() {
    let (net, params) = tiny_net();
    let mut a = actor(&net, 4, 40);
    let trajs = a.collect(&Snapshot { version: 0, params: params.clone() }, 3).unwrap();
    for t in &trajs {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &params, true);
        let (_, parts) = trajectory_loss(&ctx, &net, t, None, &RlLossConfig::default()).unwrap();
        assert_eq!(parts.kl, 0.0);
        assert!(parts.total.is_finite());
        assert!(parts.entropy <= 0.0 && parts.entropy >= -1.0);
        let reference = reference_logits(&net, &params, t).unwrap();
        assert_eq!(reference.len(), t.len());
        if t.initial_hidden == HiddenState::zeros(&net.config) {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &params, true);
            let (_, parts) = trajectory_loss(&ctx, &net, t, Some(&reference), &RlLossConfig::default()).unwrap();
            assert!(parts.kl.abs() < 1e-6, "{}", parts.kl);
        }
    }
}
