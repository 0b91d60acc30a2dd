//! Actor-learner reinforcement learning.

mod actor;
mod eval;
mod learner;
mod loss;
mod returns;
mod trajectory;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::sync_channel;
use std::sync::{Arc, RwLock};
use std::thread;

pub use actor::{Actor, MatchResult, Opponent, OpponentFactory, PseudoReward, Snapshot};
pub use eval::{evaluate, EvalResult};
pub use learner::{Learner, UpdateMetrics};
pub use loss::{
    entropy_loss, head_log_probs, head_log_probs_data, kl_divergence, normalized_entropy, reference_logits,
    td_lambda_loss, trajectory_loss, upgo_importance, upgo_loss, vtrace_pg_loss, weighted_cross_entropy,
    ImportanceMode, LossParts, LossWeights, RlLossConfig,
};
pub use returns::{lambda_return, upgo_returns, vtrace, VTrace};
pub use trajectory::{read_trajectory, write_trajectory, Bootstrap, Step, Trajectory};

use crate::error::CoreError;

/// How actors and the learner interleave.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// Each update, every actor fills its share of the batch with the
    /// current snapshot, in actor order. Reproducible.
    Lockstep,
    /// Actors run freely on their own threads, sending `per_send`
    /// trajectories at a time over a bounded channel of `4 * batch_size`;
    /// they block when it is full.
    Async { per_send: usize },
}

/// Runs `updates` learner updates fed by `actors`. `on_update` sees every
/// update's metrics and returns false to stop early. Returns the actors
/// (for their match results) and the metrics.
pub fn train(
    learner: &mut Learner,
    mut actors: Vec<Actor>,
    updates: usize,
    schedule: Schedule,
    mut on_update: impl FnMut(&UpdateMetrics, &Learner) -> bool,
) -> Result<(Vec<Actor>, Vec<UpdateMetrics>), CoreError> {
    if actors.is_empty() {
        return Err(CoreError::Invalid("at least one actor is required".into()));
    }
    let batch = learner.batch_size;
    let mut metrics = Vec::with_capacity(updates);
    match schedule {
        Schedule::Lockstep => {
            let k = actors.len();
            let shares: Vec<usize> = (0..k).map(|i| batch / k + usize::from(i < batch % k)).collect();
            for _ in 0..updates {
                let snapshot = learner.snapshot();
                let collected: Vec<Result<Vec<Trajectory>, CoreError>> = thread::scope(|s| {
                    let handles: Vec<_> = actors
                        .iter_mut()
                        .zip(&shares)
                        .map(|(a, n)| {
                            let snap = &snapshot;
                            s.spawn(move || a.collect(snap, *n))
                        })
                        .collect();
                    handles.into_iter().map(|h| h.join().expect("actor thread panicked")).collect()
                });
                let mut update = None;
                for trajs in collected {
                    for t in trajs? {
                        if let Some(m) = learner.push(t)? {
                            update = Some(m);
                        }
                    }
                }
                let m = update.expect("a full batch was collected");
                let go_on = on_update(&m, learner);
                metrics.push(m);
                if !go_on {
                    break;
                }
            }
            Ok((actors, metrics))
        }
        Schedule::Async { per_send } => {
            let per_send = per_send.max(1);
            let shared = Arc::new(RwLock::new(Arc::new(learner.snapshot())));
            let stop = Arc::new(AtomicBool::new(false));
            let (tx, rx) = sync_channel::<Trajectory>(4 * batch);
            let handles: Vec<_> = actors
                .drain(..)
                .map(|mut actor| {
                    let (tx, shared, stop) = (tx.clone(), Arc::clone(&shared), Arc::clone(&stop));
                    thread::spawn(move || {
                        while !stop.load(Ordering::Relaxed) {
                            let snap = Arc::clone(&shared.read().expect("snapshot lock"));
                            match actor.collect(&snap, per_send) {
                                Ok(trajs) => {
                                    for t in trajs {
                                        if tx.send(t).is_err() {
                                            return actor;
                                        }
                                    }
                                }
                                Err(e) => {
                                    log::error!("actor {} stopped: {e}", actor.id);
                                    return actor;
                                }
                            }
                        }
                        actor
                    })
                })
                .collect();
            drop(tx);
            let mut failure = None;
            while metrics.len() < updates {
                let t = match rx.recv() {
                    Ok(t) => t,
                    Err(_) => {
                        failure = Some(CoreError::Invalid("all actors stopped".into()));
                        break;
                    }
                };
                match learner.push(t) {
                    Ok(Some(m)) => {
                        *shared.write().expect("snapshot lock") = Arc::new(learner.snapshot());
                        let go_on = on_update(&m, learner);
                        metrics.push(m);
                        if !go_on {
                            break;
                        }
                    }
                    Ok(None) => {}
                    Err(e) => {
                        failure = Some(e);
                        break;
                    }
                }
            }
            stop.store(true, Ordering::Relaxed);
            drop(rx);
            let actors = handles.into_iter().map(|h| h.join().expect("actor thread panicked")).collect();
            match failure {
                Some(e) => Err(e),
                None => Ok((actors, metrics)),
            }
        }
    }
}
