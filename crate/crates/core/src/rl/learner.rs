use std::sync::Arc;

use ndgrad::nn::Ctx;
use ndgrad::optim::{Adam, AdamConfig};
use ndgrad::{Grads, ParamStore, Tape};
use rayon::prelude::*;

use super::actor::Snapshot;
use super::loss::{reference_logits, trajectory_loss, LossParts, RlLossConfig};
use super::trajectory::Trajectory;
use crate::error::CoreError;
use crate::net::PolicyNet;

/// One learner update as written to the metrics file.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateMetrics {
    pub version: u64,
    /// Loss parts averaged over the batch.
    pub parts: LossParts,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Trajectories consumed since the learner was created.
    pub consumed: u64,
}

impl UpdateMetrics {
    pub fn csv_header() -> &'static str {
        "version,total,actor_critic,upgo,kl,entropy,grad_norm,trajectories"
    }

    pub fn csv_row(&self) -> String {
        let p = &self.parts;
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.version, p.total, p.actor_critic, p.upgo, p.kl, p.entropy, self.grad_norm, self.consumed
        )
    }
}

/// Owns the trainable parameters. Trajectories are buffered until a full
/// batch is available; partial batches are never used.
pub struct Learner {
    pub net: Arc<PolicyNet>,
    pub params: ParamStore,
    pub loss: RlLossConfig,
    pub clip: f64,
    pub batch_size: usize,
    adam: Adam,
    version: u64,
    consumed: u64,
    buffer: Vec<Trajectory>,
    reference: Option<(Arc<PolicyNet>, ParamStore)>,
}

impl Learner {
    pub fn new(net: Arc<PolicyNet>, params: ParamStore, loss: RlLossConfig, adam: AdamConfig) -> Self {
        let batch_size = net.config.batch_size;
        let adam = Adam::new(adam, &params);
        Learner { net, params, loss, clip: 0.5, batch_size, adam, version: 0, consumed: 0, buffer: Vec::new(), reference: None }
    }

    /// Frozen supervised network for the KL term.
    pub fn with_reference(mut self, net: Arc<PolicyNet>, params: ParamStore) -> Self {
        self.reference = Some((net, params));
        self
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn consumed(&self) -> u64 {
        self.consumed
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot { version: self.version, params: self.params.clone() }
    }

    /// Adds a trajectory; runs an update once `batch_size` are buffered.
    pub fn push(&mut self, traj: Trajectory) -> Result<Option<UpdateMetrics>, CoreError> {
        self.buffer.push(traj);
        if self.buffer.len() < self.batch_size {
            return Ok(None);
        }
        let batch = std::mem::take(&mut self.buffer);
        self.update(&batch).map(Some)
    }

    /// Loss and summed gradient for one trajectory, without updating.
    pub fn trajectory_grads(&self, traj: &Trajectory) -> Result<(LossParts, Grads), CoreError> {
        let reference = match &self.reference {
            Some((net, params)) => Some(reference_logits(net, params, traj)?),
            None => None,
        };
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.params, true);
        let (total, parts) = trajectory_loss(&ctx, &self.net, traj, reference.as_deref(), &self.loss)?;
        Ok((parts, tape.backward(total, &self.params)?))
    }

    /// One optimizer step on a batch: mean gradient over trajectories,
    /// global-norm clipping, Adam, and a new version number.
    pub fn update(&mut self, batch: &[Trajectory]) -> Result<UpdateMetrics, CoreError> {
        if batch.is_empty() {
            return Err(CoreError::Invalid("empty batch".into()));
        }
        let results: Vec<(LossParts, Grads)> =
            batch.par_iter().map(|t| self.trajectory_grads(t)).collect::<Result<_, _>>()?;
        let mut grads = Grads::zeros_like(&self.params);
        let mut parts = LossParts::default();
        for (p, g) in &results {
            grads.accumulate(g);
            parts.actor_critic += p.actor_critic;
            parts.upgo += p.upgo;
            parts.kl += p.kl;
            parts.entropy += p.entropy;
            parts.total += p.total;
        }
        let k = batch.len() as f64;
        grads.scale(1.0 / k);
        for v in [&mut parts.actor_critic, &mut parts.upgo, &mut parts.kl, &mut parts.entropy, &mut parts.total] {
            *v /= k;
        }
        if !grads.all_finite() {
            return Err(CoreError::Invalid("non-finite gradient".into()));
        }
        let grad_norm = grads.clip_global_norm(self.clip);
        self.adam.step(&mut self.params, &grads);
        self.version += 1;
        self.consumed += batch.len() as u64;
        Ok(UpdateMetrics { version: self.version, parts, grad_norm, consumed: self.consumed })
    }
}
