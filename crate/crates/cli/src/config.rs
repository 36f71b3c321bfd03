//! Config file schema: flat `federation`, `model`, `data` and `eval` sections.

use std::path::Path;

use medinject::client::{Algorithm, ModelConfig};
use medinject::datagen::{standard_recipes, DataConfig};
use medinject::eval::EvalConfig;
use medinject::federation::{ExperimentConfig, FederationConfig, Scope, Variant};
use medinject::foundation::{FoundationConfig, RouterVariant};
use medinject::modality::FeatureLayout;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Every tunable of the client models, the feature geometry and the stub.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub encoder_dim: usize,
    pub decoder_hidden: usize,
    pub conv_channels: [usize; 2],
    pub tabular_hidden: usize,
    pub image_side: usize,
    pub signal_len: usize,
    pub signal_leads: usize,
    pub window_steps: usize,
    pub window_features: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub blocks: usize,
    pub block_hidden: usize,
    pub rank: usize,
    pub experts: usize,
    pub router_hidden: usize,
    pub router: RouterVariant,
}

impl ModelSection {
    fn from_parts(model: &ModelConfig, fm: &FoundationConfig) -> Self {
        let l = &model.layout;
        Self {
            encoder_dim: model.encoder_dim,
            decoder_hidden: model.decoder_hidden,
            conv_channels: model.conv_channels,
            tabular_hidden: model.tabular_hidden,
            image_side: l.image_side,
            signal_len: l.signal_len,
            signal_leads: l.signal_leads,
            window_steps: l.window_steps,
            window_features: l.window_features,
            vocab_size: fm.vocab_size,
            embed_dim: fm.embed_dim,
            blocks: fm.blocks,
            block_hidden: fm.block_hidden,
            rank: fm.rank,
            experts: fm.experts,
            router_hidden: fm.router_hidden,
            router: fm.router,
        }
    }

    fn split(&self) -> (ModelConfig, FoundationConfig) {
        let model = ModelConfig {
            encoder_dim: self.encoder_dim,
            decoder_hidden: self.decoder_hidden,
            conv_channels: self.conv_channels,
            tabular_hidden: self.tabular_hidden,
            layout: FeatureLayout {
                image_side: self.image_side,
                signal_len: self.signal_len,
                signal_leads: self.signal_leads,
                window_steps: self.window_steps,
                window_features: self.window_features,
            },
        };
        let fm = FoundationConfig {
            vocab_size: self.vocab_size,
            embed_dim: self.embed_dim,
            blocks: self.blocks,
            block_hidden: self.block_hidden,
            rank: self.rank,
            experts: self.experts,
            router_hidden: self.router_hidden,
            router: self.router,
            ..FoundationConfig::default()
        };
        (model, fm)
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        Self::from_parts(&ModelConfig::default(), &FoundationConfig::default())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub federation: FederationConfig,
    pub model: ModelSection,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

/// Validated configuration with every default materialized.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub experiment: ExperimentConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub warnings: Vec<String>,
}

impl Resolved {
    pub fn to_file(&self) -> FileConfig {
        FileConfig {
            federation: self.experiment.federation.clone(),
            model: ModelSection::from_parts(&self.experiment.model, &self.experiment.foundation),
            data: self.data.clone(),
            eval: self.eval.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_file()).expect("config always serializes")
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub rounds: Option<usize>,
    pub clients: Option<usize>,
    pub algorithm: Option<Algorithm>,
    pub scope: Option<Scope>,
    pub variant: Option<Variant>,
    pub lambda: Option<f64>,
}

impl Overrides {
    fn apply(&self, f: &mut FederationConfig) {
        if let Some(v) = self.seed {
            f.seed = v;
        }
        if let Some(v) = self.rounds {
            f.num_rounds = v;
        }
        if let Some(v) = self.clients {
            f.num_clients = v;
        }
        if let Some(v) = self.algorithm {
            f.algorithm = v;
        }
        if let Some(v) = self.scope {
            f.scope = v;
        }
        if let Some(v) = self.variant {
            f.variant = v;
        }
        if let Some(v) = self.lambda {
            f.lambda = v;
        }
    }
}

fn config_error(key: impl Into<String>, message: impl std::fmt::Display) -> CliError {
    CliError::Config {
        key: key.into(),
        message: message.to_string(),
    }
}

/// Parse TOML text; unknown keys and type errors report their key path.
pub fn parse_text(text: &str) -> Result<FileConfig, CliError> {
    let de = toml::Deserializer::parse(text).map_err(|e| config_error("", e.message()))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        let inner = e.into_inner();
        config_error(if key == "." { String::new() } else { key }, inner.message())
    })
}

/// Read `path` (or all defaults when absent), apply flags and validate.
pub fn parse_config(path: Option<&Path>, overrides: &Overrides) -> Result<Resolved, CliError> {
    let file = match path {
        None => FileConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Input(format!("cannot read config {}: {e}", p.display())))?;
            parse_text(&text)?
        }
    };
    resolve(file, overrides)
}

pub fn resolve(file: FileConfig, overrides: &Overrides) -> Result<Resolved, CliError> {
    let FileConfig {
        mut federation,
        model,
        data,
        eval,
    } = file;
    overrides.apply(&mut federation);
    let mut warnings = Vec::new();
    if federation.algorithm == Algorithm::FedAvg && federation.lambda != 0.0 {
        warnings.push(format!("federation.lambda = {} is ignored by FedAvg", federation.lambda));
        federation.lambda = 0.0;
    }
    let (model, foundation) = model.split();
    let experiment = ExperimentConfig {
        federation,
        model,
        foundation,
    };

    let fed = &experiment.federation;
    fed.validate().map_err(|e| config_error(key_of(&e.to_string()), e))?;
    if data.samples_per_task == 0 {
        return Err(config_error("data.samples_per_task", "must be positive"));
    }
    let parts = data.split_ratios.len();
    if parts != 4 || data.split_ratios.iter().sum::<u64>() == 0 {
        return Err(config_error(
            "data.split_ratios",
            "needs client, public, dev and test weights with a positive sum",
        ));
    }
    let (training, _) = standard_recipes(&data).map_err(|e| config_error("data", e))?;
    if let Scope::SingleTask(id) = fed.scope {
        if !training.iter().any(|r| r.task.task_id == id) {
            return Err(config_error("federation.scope", format!("task {id} is not a training task")));
        }
    }
    if !training.iter().any(|r| r.task.name == eval.zero_shot_source) {
        return Err(config_error(
            "eval.zero_shot_source",
            format!("`{}` is not a training task", eval.zero_shot_source),
        ));
    }
    for (key, v) in [
        ("model.encoder_dim", experiment.model.encoder_dim),
        ("model.embed_dim", experiment.foundation.embed_dim),
        ("model.experts", experiment.foundation.experts),
        ("model.rank", experiment.foundation.rank),
        ("model.vocab_size", experiment.foundation.vocab_size),
    ] {
        if v == 0 {
            return Err(config_error(key, "must be positive"));
        }
    }
    Ok(Resolved {
        experiment,
        data,
        eval,
        warnings,
    })
}

/// Validation messages start with the offending `section.key`.
fn key_of(message: &str) -> String {
    message
        .split_whitespace()
        .find(|w| w.starts_with("federation."))
        .unwrap_or("federation")
        .to_owned()
}
