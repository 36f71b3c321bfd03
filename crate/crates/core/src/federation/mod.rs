//! Synchronous communication rounds: local training, upload through the wire
//! codec, aggregation, optional server-side refinement and broadcast.

mod update;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use update::{aggregate, compensated_sum, deserialize_update, serialize_update, ModelUpdate, Summation, SAMPLE_COUNT};

use crate::client::{train_local, Algorithm, ClientModel, LocalConfig, LocalShard, ModelConfig};
use crate::datagen::{Dataset, SplitPart, TaskData};
use crate::error::{Error, Result};
use crate::foundation::{injection_step, FoundationConfig, FoundationStub, InjectedModel, InjectionOptimizer};
use crate::modality::{Sample, TaskBatch, TaskId, TaskRole, TaskSpec};
use crate::rng::{derive_seed, rng_for, stream};
use crate::wire::{Container, GLOBAL_CLIENT};

/// What the server does with the aggregate before broadcasting it.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    /// Fine-tune the aggregated client model on public data.
    GlobalFinetune,
    /// Inject the aggregated encoders into the foundation stub on public data.
    LlmFinetune,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Scope {
    SingleTask(TaskId),
    MultiTask,
}

impl Scope {
    pub fn suffix(self) -> &'static str {
        match self {
            Scope::SingleTask(_) => "s",
            Scope::MultiTask => "m",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::SingleTask(id) => write!(f, "single:{id}"),
            Scope::MultiTask => f.write_str("multi"),
        }
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "multi" => Ok(Scope::MultiTask),
            Some(("single", task)) => task
                .parse()
                .ok()
                .or_else(|| crate::datagen::tasks::id_by_name(task))
                .map(Scope::SingleTask)
                .ok_or_else(|| Error::Input(format!("unknown task `{task}` in scope `{s}`"))),
            _ => Err(Error::Input(format!("scope must be `multi` or `single:<task>`, got `{s}`"))),
        }
    }
}

impl TryFrom<String> for Scope {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Scope> for String {
    fn from(s: Scope) -> String {
        s.to_string()
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fedavg" => Ok(Algorithm::FedAvg),
            "fedprox" => Ok(Algorithm::FedProx),
            _ => Err(Error::Input(format!("unknown algorithm `{s}`"))),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Variant::Base),
            "global_finetune" => Ok(Variant::GlobalFinetune),
            "llm_finetune" => Ok(Variant::LlmFinetune),
            _ => Err(Error::Input(format!("unknown variant `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub num_rounds: usize,
    pub algorithm: Algorithm,
    /// Proximal weight; only read by FedProx.
    pub lambda: f64,
    pub variant: Variant,
    pub scope: Scope,
    pub seed: u64,
    pub local_lr: f64,
    pub finetune_lr: f64,
    pub foundation_lr: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    /// Passes over the public split per server-side refinement (`K`).
    pub public_epochs: usize,
    /// Fine-tune the aggregate every round rather than only after the last one.
    pub finetune_every_round: bool,
    pub summation: Summation,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            num_clients: 5,
            num_rounds: 10,
            algorithm: Algorithm::FedAvg,
            lambda: 0.0,
            variant: Variant::Base,
            scope: Scope::MultiTask,
            seed: 0,
            local_lr: 1e-4,
            finetune_lr: 1e-4,
            foundation_lr: 5e-4,
            batch_size: 32,
            local_epochs: 1,
            public_epochs: 1,
            finetune_every_round: true,
            summation: Summation::Compensated,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::Input("federation.num_clients must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Input(format!(
                "federation.lambda must be finite and ≥ 0, got {}",
                self.lambda
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Input("federation.batch_size must be positive".into()));
        }
        for (key, lr) in [
            ("local_lr", self.local_lr),
            ("finetune_lr", self.finetune_lr),
            ("foundation_lr", self.foundation_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Input(format!("federation.{key} must be positive, got {lr}")));
            }
        }
        Ok(())
    }

    pub fn local(&self) -> LocalConfig {
        LocalConfig {
            epochs: self.local_epochs,
            batch_size: self.batch_size,
            learning_rate: self.local_lr,
            algorithm: self.algorithm,
            lambda: self.lambda,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub federation: FederationConfig,
    pub model: ModelConfig,
    pub foundation: FoundationConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.federation.validate()
    }
}

/// Server state between rounds.
#[derive(Clone, Debug)]
pub struct GlobalState {
    pub round_index: u32,
    /// Broadcast parameters θ_e, θ_d.
    pub model: ClientModel,
    /// Plain aggregate of the latest round, before any server-side refinement.
    pub aggregated: ClientModel,
    /// Foundation stub W_s; its periphery evolves under [`Variant::LlmFinetune`].
    pub stub: FoundationStub,
}

impl GlobalState {
    pub fn new(config: &ExperimentConfig, tasks: &[TaskSpec]) -> Result<Self> {
        let seed = config.federation.seed;
        let model = ClientModel::new(&config.model, tasks, derive_seed(seed, &[stream::ENCODER]))?;
        let stub = FoundationStub::new(
            &config.foundation,
            config.model.encoder_dim,
            derive_seed(seed, &[stream::FOUNDATION]),
        )?;
        Ok(Self {
            round_index: 0,
            aggregated: model.clone(),
            model,
            stub,
        })
    }

    /// Copies of the global model handed to each client.
    pub fn broadcast(&self, num_clients: usize) -> Vec<ClientModel> {
        (0..num_clients).map(|n| self.model.clone().with_client_id(n as u32)).collect()
    }

    /// The injected foundation model: stub plus current encoders.
    pub fn injected(&self) -> InjectedModel {
        InjectedModel {
            stub: self.stub.clone(),
            encoders: self.model.clone(),
        }
    }

    /// Global parameters and the stub's trainable periphery.
    pub fn checkpoint(&self) -> Container {
        let mut tensors = self.model.named_tensors();
        tensors.extend(self.stub.periphery_tensors());
        Container {
            round_index: self.round_index,
            client_id: GLOBAL_CLIENT,
            tensors,
        }
    }

    pub fn load_checkpoint(&mut self, c: &Container) -> Result<()> {
        if c.client_id != GLOBAL_CLIENT {
            return Err(Error::Input(format!(
                "container from client {} is not a global checkpoint",
                c.client_id
            )));
        }
        for (name, t) in &c.tensors {
            if name.starts_with("fm.") {
                let store = self.stub.store_mut();
                let id = store
                    .lookup(name)
                    .filter(|&id| store.get(id).trainable)
                    .ok_or_else(|| Error::Input(format!("checkpoint tensor `{name}` is not a trainable stub parameter")))?;
                store.set_value(id, t.clone())?;
            } else {
                self.model.load_named([(name.as_str(), t)])?;
            }
        }
        self.aggregated = self.model.clone();
        self.round_index = c.round_index;
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoundTrace {
    pub round_index: u32,
    /// Per client, mean step objective per local epoch.
    pub client_losses: Vec<Vec<f64>>,
    pub finetune_losses: Vec<f64>,
    pub injection_losses: Vec<f64>,
    pub upload_bytes: usize,
}

impl RoundTrace {
    pub fn all_finite(&self) -> bool {
        self.client_losses
            .iter()
            .flatten()
            .chain(&self.finetune_losses)
            .chain(&self.injection_losses)
            .all(|v| v.is_finite())
    }
}

fn with_context<T>(r: Result<T>, ctx: impl FnOnce() -> String) -> Result<T> {
    r.map_err(|e| e.context(ctx()))
}

/// Training tasks covered by `scope`.
pub fn scope_tasks(dataset: &Dataset, scope: Scope) -> Result<Vec<&TaskData>> {
    match scope {
        Scope::MultiTask => Ok(dataset.training.iter().collect()),
        Scope::SingleTask(id) => {
            let t = dataset.task(id).ok_or_else(|| Error::Input(format!("unknown task id {id}")))?;
            if t.spec.role != TaskRole::Training {
                return Err(Error::Input(format!("task `{}` is a validation task", t.spec.name)));
            }
            Ok(vec![t])
        }
    }
}

fn shard<'a>(tasks: &[&'a TaskData], part: SplitPart) -> LocalShard<'a> {
    LocalShard {
        tasks: tasks.iter().map(|t| (&t.spec, t.part(part))).collect(),
    }
}

/// One communication round over `tasks`.
pub fn run_round(state: &mut GlobalState, tasks: &[&TaskData], config: &ExperimentConfig) -> Result<RoundTrace> {
    let fed = &config.federation;
    let round = state.round_index;
    let seed = fed.seed;
    let local = fed.local();

    // (1) local training, (2) upload through the codec
    let global = &state.model;
    let uploads: Vec<(Vec<u8>, Vec<f64>)> = state
        .broadcast(fed.num_clients)
        .into_par_iter()
        .enumerate()
        .map(|(n, model)| {
            let ctx = || format!("round {round}, client {n}");
            let shard = shard(tasks, SplitPart::Client(n));
            let outcome = with_context(
                train_local(
                    model,
                    &shard,
                    &local,
                    Some(global),
                    derive_seed(seed, &[stream::LOCAL, round as u64, n as u64]),
                ),
                ctx,
            )?;
            let update = ModelUpdate {
                client_id: n as u32,
                round_index: round,
                tensors: outcome.model.named_tensors(),
                sample_count: shard.num_samples() as u64,
            };
            Ok((with_context(serialize_update(&update), ctx)?, outcome.epoch_losses))
        })
        .collect::<Result<_>>()?;

    let mut trace = RoundTrace {
        round_index: round,
        upload_bytes: uploads.iter().map(|(b, _)| b.len()).sum(),
        ..Default::default()
    };
    let mut updates = Vec::with_capacity(uploads.len());
    for (n, (bytes, losses)) in uploads.into_iter().enumerate() {
        let u = deserialize_update(&bytes).map_err(|e| Error::from(e).context(format!("round {round}, client {n}")))?;
        updates.push(u);
        trace.client_losses.push(losses);
    }

    // (3) aggregate
    let averaged = with_context(aggregate(&updates, fed.summation), || format!("round {round}, aggregation"))?;
    let mut model = state.model.clone();
    model.load_named(averaged.iter().map(|(n, t)| (n.as_str(), t)))?;
    state.aggregated = model.clone();

    // (4) server-side refinement on public data
    let last = round as usize + 1 >= fed.num_rounds;
    match fed.variant {
        Variant::Base => {}
        Variant::GlobalFinetune if fed.finetune_every_round || last => {
            let public = shard(tasks, SplitPart::Public);
            let cfg = LocalConfig {
                epochs: fed.public_epochs,
                learning_rate: fed.finetune_lr,
                algorithm: Algorithm::FedAvg,
                lambda: 0.0,
                ..local
            };
            let outcome = with_context(
                train_local(model, &public, &cfg, None, derive_seed(seed, &[stream::FINETUNE, round as u64])),
                || format!("round {round}, global fine-tuning"),
            )?;
            trace.finetune_losses = outcome.epoch_losses;
            model = outcome.model;
        }
        Variant::GlobalFinetune => {}
        Variant::LlmFinetune => {
            let mut injected = InjectedModel {
                stub: state.stub.clone(),
                encoders: model,
            };
            trace.injection_losses = with_context(
                inject_public(&mut injected, tasks, fed, derive_seed(seed, &[stream::INJECT, round as u64])),
                || format!("round {round}, injection"),
            )?;
            state.stub = injected.stub;
            model = injected.encoders;
        }
    }

    // (5) broadcast
    state.model = model;
    state.round_index += 1;
    if !trace.all_finite() {
        return Err(Error::Domain(format!("non-finite loss in round {round}")));
    }
    Ok(trace)
}

/// `K` passes over the public split; each step takes one batch of every task
/// that still has one.
fn inject_public(model: &mut InjectedModel, tasks: &[&TaskData], fed: &FederationConfig, seed: u64) -> Result<Vec<f64>> {
    let mut opt = InjectionOptimizer::new(fed.foundation_lr);
    let mut losses = Vec::new();
    for epoch in 0..fed.public_epochs {
        let mut per_task: Vec<(&TaskSpec, Vec<TaskBatch>)> = Vec::new();
        for t in tasks {
            let mut samples: Vec<&Sample> = t.part(SplitPart::Public);
            samples.shuffle(&mut rng_for(seed, &[t.spec.task_id as u64, epoch as u64]));
            let batches = samples
                .chunks(fed.batch_size)
                .map(|c| TaskBatch::from_samples(&t.spec, c))
                .collect::<Result<Vec<_>>>()?;
            per_task.push((&t.spec, batches));
        }
        let steps = per_task.iter().map(|(_, b)| b.len()).max().unwrap_or(0);
        for i in 0..steps {
            let joint: Vec<(&TaskSpec, &TaskBatch)> = per_task.iter().filter_map(|(t, b)| b.get(i).map(|b| (*t, b))).collect();
            losses.push(injection_step(model, &joint, &mut opt)?);
        }
    }
    Ok(losses)
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub tasks: Vec<TaskSpec>,
    pub state: GlobalState,
    pub traces: Vec<RoundTrace>,
}

/// Run `num_rounds` rounds from a fresh (or checkpointed) global model.
pub fn run_experiment(dataset: &Dataset, config: &ExperimentConfig, init: Option<&Container>) -> Result<ExperimentResult> {
    config.validate()?;
    if dataset.num_clients != config.federation.num_clients {
        return Err(Error::Input(format!(
            "dataset is sharded for {} clients but federation.num_clients = {}",
            dataset.num_clients, config.federation.num_clients
        )));
    }
    let tasks = scope_tasks(dataset, config.federation.scope)?;
    let specs: Vec<TaskSpec> = tasks.iter().map(|t| t.spec.clone()).collect();
    let mut state = GlobalState::new(config, &specs)?;
    if let Some(c) = init {
        state.load_checkpoint(c)?;
        state.round_index = 0;
    }
    let mut traces = Vec::with_capacity(config.federation.num_rounds);
    for _ in 0..config.federation.num_rounds {
        traces.push(run_round(&mut state, &tasks, config)?);
    }
    Ok(ExperimentResult {
        config: config.clone(),
        tasks: specs,
        state,
        traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_parsing() {
        assert_eq!("multi".parse::<Scope>().unwrap(), Scope::MultiTask);
        assert_eq!("single:4".parse::<Scope>().unwrap(), Scope::SingleTask(4));
        assert_eq!("single:mortality".parse::<Scope>().unwrap(), Scope::SingleTask(4));
        assert!("single:x".parse::<Scope>().is_err());
        assert!("both".parse::<Scope>().is_err());
        assert_eq!(Scope::SingleTask(3).to_string(), "single:3");
    }

    #[test]
    fn config_validation() {
        assert!(FederationConfig::default().validate().is_ok());
        let bad = FederationConfig {
            num_clients: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = FederationConfig {
            lambda: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
