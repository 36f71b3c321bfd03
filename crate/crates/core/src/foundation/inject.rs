//! Public-data injection steps and zero-shot inference.

use super::FoundationStub;
use crate::autodiff::{Graph, Var};
use crate::client::ClientModel;
use crate::error::{Error, Result};
use crate::gradcheck::ParamSet;
use crate::modality::{TaskBatch, TaskSpec};
use crate::optim::Optimizer;
use crate::param::ParamStore;

/// The stub together with the aggregated encoders it has absorbed.
#[derive(Clone, Debug)]
pub struct InjectedModel {
    pub stub: FoundationStub,
    pub encoders: ClientModel,
}

impl ParamSet for InjectedModel {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![self.stub.store(), self.encoders.store()]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![self.stub.store_mut(), self.encoders.store_mut()]
    }
}

impl ParamSet for FoundationStub {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![self.store()]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![self.store_mut()]
    }
}

/// Adam state for both stores of an [`InjectedModel`].
#[derive(Clone, Debug)]
pub struct InjectionOptimizer {
    stub: Optimizer,
    encoders: Optimizer,
}

impl InjectionOptimizer {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            stub: Optimizer::adam(learning_rate),
            encoders: Optimizer::adam(learning_rate),
        }
    }
}

/// Logits of the foundation path: encoders → alignment → expert-mixed backbone.
pub fn foundation_forward(g: &mut Graph, stub: &FoundationStub, encoders: &ClientModel, task: &TaskSpec, batch: &TaskBatch) -> Result<Var> {
    let h = stub.align_features(g, encoders, task, batch)?;
    let alpha = stub.route_var(g, task)?;
    stub.lora_moe_forward(g, h, alpha)
}

/// Mean over tasks of the foundation-path cross-entropy.
pub fn injection_loss(g: &mut Graph, model: &InjectedModel, batches: &[(&TaskSpec, &TaskBatch)]) -> Result<Var> {
    if batches.is_empty() {
        return Err(Error::Input("injection step needs at least one task batch".into()));
    }
    let mut total = None;
    for (task, batch) in batches {
        if batch.is_empty() {
            return Err(Error::Input(format!("empty public batch for task `{}`", task.name)));
        }
        let logits = foundation_forward(g, &model.stub, &model.encoders, task, batch)?;
        let ce = g.cross_entropy(logits, &batch.labels)?;
        total = Some(match total {
            None => ce,
            Some(acc) => g.add(acc, ce)?,
        });
    }
    Ok(g.scale(total.expect("nonempty"), 1.0 / batches.len() as f64))
}

/// One joint gradient step on the encoders, the alignment map, the experts and
/// the router. Frozen backbone parameters never receive an update. Returns the
/// loss before the step.
pub fn injection_step(model: &mut InjectedModel, batches: &[(&TaskSpec, &TaskBatch)], opt: &mut InjectionOptimizer) -> Result<f64> {
    let mut g = Graph::new();
    let loss = injection_loss(&mut g, model, batches)?;
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::Domain(format!("injection loss is {value}")));
    }
    let grads = g.backward(loss)?;
    grads.apply_to(model.stub.store_mut())?;
    grads.apply_to(model.encoders.store_mut())?;
    opt.stub.step(model.stub.store_mut());
    opt.encoders.step(model.encoders.store_mut());
    Ok(value)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZeroShotOutput {
    pub predictions: Vec<usize>,
    /// Probability of class 1 per sample.
    pub scores: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// Predict `task` without any task-specific training. Fails with a capability
/// error when a modality of `task` has no trained encoder.
pub fn zero_shot_infer(stub: &FoundationStub, encoders: &ClientModel, task: &TaskSpec, batch: &TaskBatch) -> Result<ZeroShotOutput> {
    stub.check_capability(encoders, task)?;
    let mut g = Graph::new();
    let h = stub.align_features(&mut g, encoders, task, batch)?;
    let alpha = stub.route_var(&mut g, task)?;
    let logits = stub.lora_moe_forward(&mut g, h, alpha)?;
    let logits = g.value(logits);
    let probs = logits.softmax(1)?;
    let (_, c) = probs.dims2()?;
    Ok(ZeroShotOutput {
        predictions: logits.argmax_rows()?,
        scores: (0..batch.len()).map(|i| probs.data()[i * c + 1.min(c - 1)]).collect(),
        alpha: g.value(alpha).data().to_vec(),
    })
}
