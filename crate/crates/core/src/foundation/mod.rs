//! Frozen foundation-model stub and the trainable periphery used to inject
//! client encoders into it.
//!
//! The backbone works on vectors of width `2·d_k`: the aligned data feature
//! followed by the mean-pooled prompt embedding. Every backbone block carries
//! `P` low-rank experts whose outputs are mixed by the router weights `α`.

mod inject;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use inject::{foundation_forward, injection_loss, injection_step, zero_shot_infer, InjectedModel, InjectionOptimizer, ZeroShotOutput};

use crate::autodiff::{Graph, Var};
use crate::client::ClientModel;
use crate::error::{Error, Result};
use crate::modality::{ModalityKind, TaskBatch, TaskSpec};
use crate::nn::{Init, Linear, Mlp};
use crate::param::{ParamId, ParamStore};
use crate::rng::{fnv1a, rng_for, stream};
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterVariant {
    /// attention → mean over query tokens → MLP → softmax
    Full,
    /// attention with the value projection mapping straight to expert logits,
    /// mean over query tokens, softmax; no MLP
    AttentionOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoundationConfig {
    pub vocab_size: usize,
    /// `d_k`; the backbone width is twice this.
    pub embed_dim: usize,
    pub blocks: usize,
    pub block_hidden: usize,
    pub rank: usize,
    pub experts: usize,
    pub router_hidden: usize,
    pub router: RouterVariant,
    pub num_classes: usize,
}

impl Default for FoundationConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            embed_dim: 32,
            blocks: 2,
            block_hidden: 64,
            rank: 4,
            experts: 4,
            router_hidden: 16,
            router: RouterVariant::Full,
            num_classes: 2,
        }
    }
}

impl FoundationConfig {
    pub fn width(&self) -> usize {
        2 * self.embed_dim
    }
}

#[derive(Clone, Debug)]
struct FrozenBlock {
    up: Linear,
    down: Linear,
}

/// Low-rank pair: `x ↦ (x·A)·B` with `A: [D × r]`, `B: [r × D]`.
#[derive(Clone, Debug)]
pub struct Expert {
    pub a: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct RouterParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub mlp: Option<Mlp>,
}

impl RouterParams {
    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.query, self.key, self.value];
        if let Some(mlp) = &self.mlp {
            p.extend(mlp.params());
        }
        p
    }
}

/// Router weights over the experts; nonnegative and summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterOutput {
    pub alpha: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct FoundationStub {
    config: FoundationConfig,
    encoder_dim: usize,
    store: ParamStore,
    embedding: ParamId,
    blocks: Vec<FrozenBlock>,
    head: Linear,
    align: BTreeMap<ModalityKind, ParamId>,
    align_bias: ParamId,
    experts: Vec<Vec<Expert>>,
    router: RouterParams,
}

impl FoundationStub {
    /// Build the stub. `encoder_dim` is the width of each client encoder output.
    pub fn new(config: &FoundationConfig, encoder_dim: usize, seed: u64) -> Result<Self> {
        if config.experts == 0 || config.rank == 0 || config.embed_dim == 0 || config.vocab_size == 0 {
            return Err(Error::Input("foundation sizes must be positive".into()));
        }
        let d = config.embed_dim;
        let width = config.width();
        let rng = |k: u64| rng_for(seed, &[stream::FOUNDATION, k]);
        let mut store = ParamStore::new();

        // frozen backbone
        let mut r = rng(0);
        let embedding = store.add("fm.embedding", Init::Normal(1.0).sample([config.vocab_size, d], 1, &mut r), false)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let mut r = rng(1 + b as u64);
            let up = Linear::new(
                &mut store,
                &format!("fm.block{b}.up"),
                width,
                config.block_hidden,
                true,
                Init::He,
                false,
                &mut r,
            )?;
            let down = Linear::new(
                &mut store,
                &format!("fm.block{b}.down"),
                config.block_hidden,
                width,
                true,
                Init::Normal(0.5 / (config.block_hidden as f64).sqrt()),
                false,
                &mut r,
            )?;
            blocks.push(FrozenBlock { up, down });
        }
        let mut r = rng(100);
        let head = Linear::new(&mut store, "fm.head", width, config.num_classes, true, Init::Lecun, false, &mut r)?;

        // trainable periphery
        let mut r = rng(200);
        let mut align = BTreeMap::new();
        for m in ModalityKind::ALL {
            let w = Init::Lecun.sample([encoder_dim, d], encoder_dim, &mut r);
            align.insert(m, store.add(format!("fm.align.{m}"), w, true)?);
        }
        let align_bias = store.add("fm.align.bias", Tensor::zeros([1, d]), true)?;

        let mut experts = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let mut r = rng(300 + b as u64);
            let mut per_block = Vec::with_capacity(config.experts);
            for p in 0..config.experts {
                let a = store.add(
                    format!("fm.expert{b}.{p}.a"),
                    Init::Lecun.sample([width, config.rank], width, &mut r),
                    true,
                )?;
                let bb = store.add(format!("fm.expert{b}.{p}.b"), Tensor::zeros([config.rank, width]), true)?;
                per_block.push(Expert { a, b: bb });
            }
            experts.push(per_block);
        }

        let mut r = rng(400);
        let value_out = match config.router {
            RouterVariant::Full => d,
            RouterVariant::AttentionOnly => config.experts,
        };
        let query = store.add("fm.router.query", Init::Lecun.sample([d, d], d, &mut r), true)?;
        let key = store.add("fm.router.key", Init::Lecun.sample([d, d], d, &mut r), true)?;
        let value_init = match config.router {
            RouterVariant::Full => Init::Lecun,
            RouterVariant::AttentionOnly => Init::Zeros,
        };
        let value = store.add("fm.router.value", value_init.sample([d, value_out], d, &mut r), true)?;
        let mlp = match config.router {
            RouterVariant::Full => {
                let mlp = Mlp::new(&mut store, "fm.router.mlp", &[d, config.router_hidden, config.experts], &mut r)?;
                // last layer starts at zero so the initial mixture is uniform
                for id in mlp.layers.last().expect("two layers").params() {
                    let shape = store.value(id).shape().to_vec();
                    store.set_value(id, Tensor::zeros(shape))?;
                }
                Some(mlp)
            }
            RouterVariant::AttentionOnly => None,
        };

        Ok(Self {
            config: config.clone(),
            encoder_dim,
            store,
            embedding,
            blocks,
            head,
            align,
            align_bias,
            experts,
            router: RouterParams { query, key, value, mlp },
        })
    }

    pub fn config(&self) -> &FoundationConfig {
        &self.config
    }

    pub fn encoder_dim(&self) -> usize {
        self.encoder_dim
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn experts(&self) -> &[Vec<Expert>] {
        &self.experts
    }

    pub fn router(&self) -> &RouterParams {
        &self.router
    }

    pub fn align_param(&self, m: ModalityKind) -> ParamId {
        self.align[&m]
    }

    pub fn align_bias(&self) -> ParamId {
        self.align_bias
    }

    /// Frozen parameters (embedding table, backbone blocks, output head) in store order.
    pub fn frozen_tensors(&self) -> Vec<(String, Tensor)> {
        self.store
            .iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Trainable periphery parameters in store order.
    pub fn periphery_tensors(&self) -> Vec<(String, Tensor)> {
        self.store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Set every router parameter to zero.
    pub fn zero_router(&mut self) -> Result<()> {
        for id in self.router.params() {
            let shape = self.store.value(id).shape().to_vec();
            self.store.set_value(id, Tensor::zeros(shape))?;
        }
        Ok(())
    }

    pub fn token_ids(&self, text: &str) -> Result<Vec<usize>> {
        let ids: Vec<usize> = text
            .split_whitespace()
            .map(|tok| (fnv1a(tok.to_lowercase().as_bytes()) % self.config.vocab_size as u64) as usize)
            .collect();
        if ids.is_empty() {
            return Err(Error::Input("cannot embed empty text".into()));
        }
        Ok(ids)
    }

    /// Rows of the frozen embedding table for each whitespace token: `[L × d_k]`.
    pub fn embed_text(&self, text: &str) -> Result<Tensor> {
        let mut g = Graph::new();
        let e = self.embed_var(&mut g, text)?;
        Ok(g.value(e).clone())
    }

    pub fn embed_var(&self, g: &mut Graph, text: &str) -> Result<Var> {
        let ids = self.token_ids(text)?;
        let d = self.config.embed_dim;
        let index = ids.iter().flat_map(|&t| (0..d).map(move |j| Some(t * d + j))).collect();
        let table = g.param(&self.store, self.embedding);
        g.gather(table, index, [ids.len(), d])
    }

    /// Aligned data feature followed by the pooled prompt embedding: `[batch × 2·d_k]`.
    pub fn align_features(&self, g: &mut Graph, encoders: &ClientModel, task: &TaskSpec, batch: &TaskBatch) -> Result<Var> {
        self.check_capability(encoders, task)?;
        let features = encoders.encode_concat(g, task, batch)?;
        let blocks: Vec<Var> = task.modalities.iter().map(|m| g.param(&self.store, self.align[m])).collect();
        let w = g.concat_rows(&blocks)?;
        let aligned = g.matmul(features, w)?;
        let bias = g.param(&self.store, self.align_bias);
        let aligned = g.add_row(aligned, bias)?;

        let prompt = self.embed_var(g, &task.prompt_text)?;
        let pooled = g.mean_rows(prompt)?;
        let ones = g.constant(Tensor::full([batch.len(), 1], 1.0));
        let prompt_rows = g.matmul(ones, pooled)?;
        g.concat_cols(&[aligned, prompt_rows])
    }

    /// Every modality of `task` needs an encoder.
    pub fn check_capability(&self, encoders: &ClientModel, task: &TaskSpec) -> Result<()> {
        for &m in &task.modalities {
            if encoders.encoder(m).is_none() {
                return Err(Error::Capability {
                    task: task.name.clone(),
                    modality: m,
                });
            }
        }
        Ok(())
    }

    /// Router logits before the final softmax: `[1 × P]`.
    pub fn router_logits(&self, g: &mut Graph, task: &TaskSpec) -> Result<Var> {
        let modality = self.embed_var(g, &task.modality_description)?;
        let description = self.embed_var(g, &task.prompt_text)?;
        let wq = g.param(&self.store, self.router.query);
        let wk = g.param(&self.store, self.router.key);
        let wv = g.param(&self.store, self.router.value);
        let q = g.matmul(modality, wq)?;
        let k = g.matmul(description, wk)?;
        let v = g.matmul(description, wv)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (self.config.embed_dim as f64).sqrt());
        let attn = g.softmax_rows(scores)?;
        let context = g.matmul(attn, v)?;
        let pooled = g.mean_rows(context)?;
        match &self.router.mlp {
            Some(mlp) => mlp.forward(g, &self.store, pooled),
            None => Ok(pooled),
        }
    }

    /// Expert weights `α` as a `[1 × P]` node.
    pub fn route_var(&self, g: &mut Graph, task: &TaskSpec) -> Result<Var> {
        let logits = self.router_logits(g, task)?;
        g.softmax_rows(logits)
    }

    pub fn route(&self, task: &TaskSpec) -> Result<RouterOutput> {
        let mut g = Graph::new();
        let alpha = self.route_var(&mut g, task)?;
        Ok(RouterOutput {
            alpha: g.value(alpha).data().to_vec(),
        })
    }

    /// Backbone with expert mixing. `alpha: [1 × P]`, `h: [batch × 2·d_k]`.
    /// Each block adds `Σ_p α_p·(x·A_p)·B_p` of its own input to the frozen output.
    pub fn lora_moe_forward(&self, g: &mut Graph, h: Var, alpha: Var) -> Result<Var> {
        let width = self.config.width();
        let hs = g.value(h).shape().to_vec();
        if hs.len() != 2 || hs[1] != width {
            return Err(Error::dim("lora_moe_forward", &hs, &[hs.first().copied().unwrap_or(0), width]));
        }
        let alpha_shape = g.value(alpha).shape().to_vec();
        if alpha_shape != [1, self.config.experts] {
            return Err(Error::dim("lora_moe_forward", &alpha_shape, &[1, self.config.experts]));
        }
        let mut x = h;
        for (block, experts) in self.blocks.iter().zip(&self.experts) {
            let mut out = self.block_forward(g, block, x)?;
            for (p, e) in experts.iter().enumerate() {
                let a = g.param(&self.store, e.a);
                let b = g.param(&self.store, e.b);
                let low = g.matmul(x, a)?;
                let delta = g.matmul(low, b)?;
                let mixed = g.scale_by(delta, alpha, p)?;
                out = g.add(out, mixed)?;
            }
            x = out;
        }
        self.head.forward(g, &self.store, x)
    }

    /// Backbone without any adapters.
    pub fn frozen_forward(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let mut x = h;
        for block in &self.blocks {
            x = self.block_forward(g, block, x)?;
        }
        self.head.forward(g, &self.store, x)
    }

    fn block_forward(&self, g: &mut Graph, block: &FrozenBlock, x: Var) -> Result<Var> {
        let u = block.up.forward(g, &self.store, x)?;
        let u = g.relu(u);
        let d = block.down.forward(g, &self.store, u)?;
        g.add(x, d)
    }
}
