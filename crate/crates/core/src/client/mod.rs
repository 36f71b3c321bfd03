//! Per-client multi-modal multi-task models and their local objectives.

mod encoder;
mod train;

use std::collections::{BTreeMap, BTreeSet};

pub use encoder::{Decoder, Encoder, ModelConfig};
pub use train::{train_local, Algorithm, LocalConfig, LocalShard, TrainOutcome};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::gradcheck::ParamSet;
use crate::modality::{ModalityKind, TaskBatch, TaskId, TaskSpec};
use crate::param::{ParamId, ParamStore};
use crate::rng::{rng_for, stream};
use crate::tensor::Tensor;

/// One modality-specific encoder per modality used by any of its tasks, one
/// decoder per task. Encoders are shared by every task that uses the modality.
#[derive(Clone, Debug)]
pub struct ClientModel {
    pub client_id: u32,
    config: ModelConfig,
    store: ParamStore,
    encoders: BTreeMap<ModalityKind, Encoder>,
    decoders: BTreeMap<TaskId, Decoder>,
}

impl ClientModel {
    /// Initialize from `seed`. Each encoder draws from a stream keyed by its
    /// modality and each decoder from one keyed by its task id, so a module's
    /// initial weights do not depend on which other tasks are present.
    pub fn new(config: &ModelConfig, tasks: &[TaskSpec], seed: u64) -> Result<Self> {
        crate::modality::validate_roster(tasks)?;
        let modalities: BTreeSet<ModalityKind> = tasks.iter().flat_map(|t| t.modalities.iter().copied()).collect();
        let mut store = ParamStore::new();
        let mut encoders = BTreeMap::new();
        for m in modalities {
            let mut rng = rng_for(seed, &[stream::ENCODER, m.index() as u64]);
            encoders.insert(m, Encoder::new(&mut store, m, config, &mut rng)?);
        }
        let mut sorted: Vec<&TaskSpec> = tasks.iter().collect();
        sorted.sort_by_key(|t| t.task_id);
        let mut decoders = BTreeMap::new();
        for t in sorted {
            let mut rng = rng_for(seed, &[stream::DECODER, t.task_id as u64]);
            decoders.insert(t.task_id, Decoder::new(&mut store, t, config, &mut rng)?);
        }
        Ok(Self {
            client_id: 0,
            config: config.clone(),
            store,
            encoders,
            decoders,
        })
    }

    pub fn with_client_id(mut self, client_id: u32) -> Self {
        self.client_id = client_id;
        self
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self, m: ModalityKind) -> Option<&Encoder> {
        self.encoders.get(&m)
    }

    pub fn decoder(&self, task_id: TaskId) -> Option<&Decoder> {
        self.decoders.get(&task_id)
    }

    pub fn modalities(&self) -> impl Iterator<Item = ModalityKind> + '_ {
        self.encoders.keys().copied()
    }

    pub fn task_ids(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.decoders.keys().copied()
    }

    /// Concatenate per-modality embeddings in `task.modalities` order.
    pub fn encode_concat(&self, g: &mut Graph, task: &TaskSpec, batch: &TaskBatch) -> Result<Var> {
        let mut parts = Vec::with_capacity(task.modalities.len());
        for &m in &task.modalities {
            let x = batch.inputs.get(&m).ok_or(Error::MissingModality(m))?;
            let enc = self
                .encoders
                .get(&m)
                .ok_or_else(|| Error::Input(format!("model has no {m} encoder")))?;
            let x = g.constant(x.clone());
            parts.push(enc.forward(g, &self.store, x)?);
        }
        g.concat_cols(&parts)
    }

    /// Decoder of `task` applied to the concatenated embeddings: `[batch × num_classes]`.
    pub fn forward(&self, g: &mut Graph, task: &TaskSpec, batch: &TaskBatch) -> Result<Var> {
        let dec = self
            .decoders
            .get(&task.task_id)
            .ok_or_else(|| Error::Input(format!("unknown task id {} (`{}`)", task.task_id, task.name)))?;
        let features = self.encode_concat(g, task, batch)?;
        dec.forward(g, &self.store, features)
    }

    /// Logits without recording gradients for later use.
    pub fn predict(&self, task: &TaskSpec, batch: &TaskBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let logits = self.forward(&mut g, task, batch)?;
        Ok(g.value(logits).clone())
    }

    /// Parameters that a forward pass of `task` reads: its encoders and its decoder.
    pub fn task_params(&self, task: &TaskSpec) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = task
            .modalities
            .iter()
            .filter_map(|m| self.encoders.get(m))
            .flat_map(Encoder::params)
            .collect();
        if let Some(d) = self.decoders.get(&task.task_id) {
            ids.extend(d.params());
        }
        ids.sort();
        ids
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.encoders.values().flat_map(Encoder::params).collect()
    }

    pub fn decoder_params(&self) -> Vec<ParamId> {
        self.decoders.values().flat_map(Decoder::params).collect()
    }

    /// All parameters as `(name, value)` in canonical store order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect()
    }

    /// Overwrite parameters by name. Every name must exist with a matching shape.
    pub fn load_named<'a>(&mut self, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        for (name, value) in tensors {
            let id = self
                .store
                .lookup(name)
                .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
            self.store.set_value(id, value.clone())?;
        }
        Ok(())
    }

    pub fn same_structure(&self, other: &ClientModel) -> bool {
        self.store.len() == other.store.len()
            && self
                .store
                .iter()
                .zip(other.store.iter())
                .all(|((_, a), (_, b))| a.name == b.name && a.value.shape() == b.value.shape())
    }

    /// Bit equality of every parameter value.
    pub fn params_bit_eq(&self, other: &ClientModel) -> bool {
        self.same_structure(other)
            && self
                .store
                .iter()
                .zip(other.store.iter())
                .all(|((_, a), (_, b))| a.value.bit_eq(&b.value))
    }
}

impl ParamSet for ClientModel {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.store]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.store]
    }
}

/// Unweighted mean over tasks of each task's mean cross-entropy.
pub fn local_loss(g: &mut Graph, model: &ClientModel, batches: &[(&TaskSpec, &TaskBatch)]) -> Result<Var> {
    if batches.is_empty() {
        return Err(Error::Input("local loss needs at least one task batch".into()));
    }
    let mut total = None;
    for (task, batch) in batches {
        if batch.is_empty() {
            return Err(Error::Input(format!("empty batch for task `{}`", task.name)));
        }
        let logits = model.forward(g, task, batch)?;
        let ce = g.cross_entropy(logits, &batch.labels)?;
        total = Some(match total {
            None => ce,
            Some(acc) => g.add(acc, ce)?,
        });
    }
    let total = total.expect("nonempty");
    Ok(g.scale(total, 1.0 / batches.len() as f64))
}

/// `(λ/2)·Σ‖w − w_global‖²` over every parameter of `model`.
pub fn fedprox_penalty(g: &mut Graph, model: &ClientModel, global: &ClientModel, lambda: f64) -> Result<Var> {
    let ids: Vec<ParamId> = model.store.ids().collect();
    fedprox_penalty_over(g, model, global, lambda, &ids)
}

/// Proximal term restricted to `ids`.
pub fn fedprox_penalty_over(g: &mut Graph, model: &ClientModel, global: &ClientModel, lambda: f64, ids: &[ParamId]) -> Result<Var> {
    if !model.same_structure(global) {
        return Err(Error::Contract("fedprox: model and global differ in structure".into()));
    }
    let mut total = g.constant(Tensor::scalar(0.0));
    for &id in ids {
        let w = g.param(&model.store, id);
        let anchor = g.constant(global.store.value(id).clone());
        let d = g.sub(w, anchor)?;
        let sq = g.mul(d, d)?;
        let s = g.sum(sq);
        total = g.add(total, s)?;
    }
    Ok(g.scale(total, lambda / 2.0))
}
