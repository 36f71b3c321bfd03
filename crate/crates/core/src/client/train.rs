//! Local minibatch training.
//!
//! Each optimizer step sees one batch of one task. Within an epoch the tasks
//! take turns (batch 0 of every task, then batch 1, ...). Each step minimizes
//! that task's mean cross-entropy, plus for FedProx the proximal term over the
//! parameters the task reads. A parameter used only by task `t` therefore sees
//! exactly the gradient sequence it would see if `t` were trained alone.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{fedprox_penalty_over, local_loss, ClientModel};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::modality::{Sample, TaskBatch, TaskSpec};
use crate::optim::Optimizer;
use crate::rng::rng_for;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    FedAvg,
    FedProx,
}

impl Algorithm {
    pub fn label(self) -> &'static str {
        match self {
            Algorithm::FedAvg => "FedAvg",
            Algorithm::FedProx => "FedProx",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub algorithm: Algorithm,
    pub lambda: f64,
}

/// Private samples of one client, grouped by task.
#[derive(Clone, Debug, Default)]
pub struct LocalShard<'a> {
    pub tasks: Vec<(&'a TaskSpec, Vec<&'a Sample>)>,
}

impl LocalShard<'_> {
    pub fn num_samples(&self) -> usize {
        self.tasks.iter().map(|(_, s)| s.len()).sum()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ClientModel,
    /// Mean step objective per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Train `model` on `shard` with Adam. `global` anchors the FedProx term and
/// defaults to the model as passed in. `seed` keys the batch shuffles.
pub fn train_local(
    mut model: ClientModel,
    shard: &LocalShard<'_>,
    config: &LocalConfig,
    global: Option<&ClientModel>,
    seed: u64,
) -> Result<TrainOutcome> {
    if shard.tasks.iter().all(|(_, s)| s.is_empty()) {
        return Err(Error::Input("local shard has no samples".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Input("batch_size must be positive".into()));
    }
    let anchor = match (config.algorithm, global) {
        (Algorithm::FedProx, Some(g)) => Some(g.clone()),
        (Algorithm::FedProx, None) => Some(model.clone()),
        (Algorithm::FedAvg, _) => None,
    };
    let mut opt = Optimizer::adam(config.learning_rate);
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut per_task: Vec<(&TaskSpec, Vec<TaskBatch>)> = Vec::new();
        for (task, samples) in &shard.tasks {
            if samples.is_empty() {
                continue;
            }
            let mut order: Vec<&Sample> = samples.clone();
            let mut rng = rng_for(seed, &[task.task_id as u64, epoch as u64]);
            order.shuffle(&mut rng);
            let batches = order
                .chunks(config.batch_size)
                .map(|c| TaskBatch::from_samples(task, c))
                .collect::<Result<Vec<_>>>()?;
            per_task.push((task, batches));
        }

        let rounds = per_task.iter().map(|(_, b)| b.len()).max().unwrap_or(0);
        let mut total = 0.0;
        let mut steps = 0usize;
        for i in 0..rounds {
            for (task, batches) in &per_task {
                let Some(batch) = batches.get(i) else { continue };
                let mut g = Graph::new();
                let mut loss = local_loss(&mut g, &model, &[(task, batch)])?;
                if let Some(anchor) = &anchor {
                    let ids = model.task_params(task);
                    let prox = fedprox_penalty_over(&mut g, &model, anchor, config.lambda, &ids)?;
                    loss = g.add(loss, prox)?;
                }
                total += g.value(loss).item()?;
                steps += 1;
                g.backward(loss)?.apply_to(model.store_mut())?;
                opt.step(model.store_mut());
            }
        }
        epoch_losses.push(if steps == 0 { 0.0 } else { total / steps as f64 });
    }
    Ok(TrainOutcome { model, epoch_losses })
}
