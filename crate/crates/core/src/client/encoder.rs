//! Modality-specific encoders and task-specific decoders.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::modality::{FeatureLayout, ModalityKind, TaskSpec};
use crate::nn::{Conv, Init, Linear, MapShape, Mlp};
use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_dim: usize,
    pub decoder_hidden: usize,
    pub conv_channels: [usize; 2],
    pub tabular_hidden: usize,
    pub layout: FeatureLayout,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_dim: 16,
            decoder_hidden: 32,
            conv_channels: [4, 8],
            tabular_hidden: 32,
            layout: FeatureLayout::default(),
        }
    }
}

#[derive(Clone, Debug)]
enum EncoderArch {
    /// conv → relu → conv → relu → mean over positions → linear
    Conv {
        first: Conv,
        second: Conv,
        head: Linear,
    },
    Mlp(Mlp),
}

/// Maps one raw modality to a fixed-width embedding, whatever the raw length.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub modality: ModalityKind,
    pub output_dim: usize,
    input: MapShape,
    arch: EncoderArch,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, modality: ModalityKind, config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let name = format!("enc.{modality}");
        let input = config.layout.map_shape(modality);
        let [c1, c2] = config.conv_channels;
        let arch = match modality {
            ModalityKind::Image => {
                let first = Conv::new(store, &format!("{name}.conv1"), input, c1, (3, 3), 1, rng)?;
                let second = Conv::new(store, &format!("{name}.conv2"), first.output, c2, (3, 3), 1, rng)?;
                let head = Linear::new(store, &format!("{name}.head"), c2, config.encoder_dim, true, Init::He, true, rng)?;
                EncoderArch::Conv { first, second, head }
            }
            ModalityKind::Signal => {
                let first = Conv::new(store, &format!("{name}.conv1"), input, c1, (1, 5), 1, rng)?;
                let second = Conv::new(store, &format!("{name}.conv2"), first.output, c2, (1, 5), 2, rng)?;
                let head = Linear::new(store, &format!("{name}.head"), c2, config.encoder_dim, true, Init::He, true, rng)?;
                EncoderArch::Conv { first, second, head }
            }
            _ => EncoderArch::Mlp(Mlp::new(
                store,
                &format!("{name}.mlp"),
                &[input.len(), config.tabular_hidden, config.encoder_dim],
                rng,
            )?),
        };
        Ok(Self {
            modality,
            output_dim: config.encoder_dim,
            input,
            arch,
        })
    }

    /// `x: [batch × raw_len] → [batch × output_dim]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.input.len() {
            return Err(Error::dim(
                "encoder",
                &shape,
                &[shape.first().copied().unwrap_or(0), self.input.len()],
            ));
        }
        let batch = shape[0];
        match &self.arch {
            EncoderArch::Conv { first, second, head } => {
                let map = g.reshape(x, [batch * self.input.height * self.input.width, self.input.channels])?;
                let h = first.forward(g, store, map, batch)?;
                let h = g.relu(h);
                let h = second.forward(g, store, h, batch)?;
                let h = g.relu(h);
                let positions = second.output.height * second.output.width;
                let pooled = g.segment_mean(h, positions)?;
                head.forward(g, store, pooled)
            }
            EncoderArch::Mlp(mlp) => mlp.forward(g, store, x),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match &self.arch {
            EncoderArch::Conv { first, second, head } => {
                let mut p = first.params();
                p.extend(second.params());
                p.extend(head.params());
                p
            }
            EncoderArch::Mlp(mlp) => mlp.params(),
        }
    }
}

/// Per-task MLP head over the concatenated modality embeddings.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub task_id: u32,
    pub input_dim: usize,
    mlp: Mlp,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, task: &TaskSpec, config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let input_dim = task.modalities.len() * config.encoder_dim;
        let mlp = Mlp::new(
            store,
            &format!("dec.{}", task.task_id),
            &[input_dim, config.decoder_hidden, task.num_classes],
            rng,
        )?;
        Ok(Self {
            task_id: task.task_id,
            input_dim,
            mlp,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<Var> {
        self.mlp.forward(g, store, features)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.params()
    }
}
