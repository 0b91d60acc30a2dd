mod common;

use mas_core::net::{HiddenState, Mode, PolicyNet};
use mas_core::sl::{sl_loss, Frame, ReplayDataset};
use mas_core::NetConfig;
use ndgrad::check::relative_error;
use ndgrad::nn::Ctx;
use ndgrad::{ParamId, ParamStore, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn window_loss(net: &PolicyNet, params: &ParamStore<f64>, window: &[Frame]) -> (f64, Option<ndgrad::Grads<f64>>) {
    let tape = Tape::<f64>::new();
    let ctx = Ctx::new(&tape, params, true);
    let mut hidden = HiddenState::zeros(&net.config).to_vars(&tape);
    let mut total = None;
    for f in window {
        let out = net.step(&ctx, &f.obs, &hidden, Mode::Forced { action: &f.action, dropout: None }).unwrap();
        let (l, _) = sl_loss(&tape, &out.logits, &out.masks, &f.action, &[1.0; 6], net.config.max_selected).unwrap();
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l).unwrap(),
        });
        hidden = out.hidden;
    }
    let total = total.unwrap();
    let grads = tape.backward(total, params).unwrap();
    (tape.scalar(total), Some(grads))
}

#[test]
fn end_to_end_loss_matches_finite_differences() {
    let cfg = NetConfig::tiny();
    let data = ReplayDataset::generate(&cfg.env_config(200), 4, 31).unwrap();
    let traj = data.trajectories().unwrap();
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let (net, store) = PolicyNet::new(cfg.clone(), seed).unwrap();
        let params = store.cast::<f64>();
        let game = &traj[seed as usize % traj.len()];
        let start = (seed as usize * 7) % game.len().saturating_sub(3).max(1);
        let window = &game[start..(start + 3).min(game.len())];
        let (_, grads) = window_loss(&net, &params, window);
        let grads = grads.unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut candidates: Vec<(ParamId, usize)> = Vec::new();
        for id in params.ids() {
            for (i, g) in grads.get(id).data().iter().enumerate() {
                if g.abs() > 1e-7 {
                    candidates.push((id, i));
                }
            }
        }
        let chosen: Vec<(ParamId, usize)> = candidates.choose_multiple(&mut rng, 20).copied().collect();
        assert_eq!(chosen.len(), 20);
        let analytic: Vec<f64> = chosen.iter().map(|(id, i)| grads.get(*id).data()[*i]).collect();
        let eps = 1e-6;
        let numeric: Vec<f64> = chosen
            .iter()
            .map(|(id, i)| {
                let mut p = params.clone();
                let orig = p.get(*id).data()[*i];
                p.get_mut(*id).data_mut()[*i] = orig + eps;
                let plus = window_loss(&net, &p, window).0;
                p.get_mut(*id).data_mut()[*i] = orig - eps;
                let minus = window_loss(&net, &p, window).0;
                (plus - minus) / (2.0 * eps)
            })
            .collect();
        let err = relative_error(&analytic, &numeric);
        worst = worst.max(err);
        assert!(err < 1e-3, "seed {seed}: rel err {err}\n{analytic:?}\n{numeric:?}");
    }
    println!("worst relative error {worst:.2e}");
}
