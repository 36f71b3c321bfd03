//! Modalities, task descriptions and labeled batches.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::MapShape;
use crate::tensor::Tensor;

/// Client-side data modalities. Text is reserved to the foundation stub.
/// Declaration order is the canonical order.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityKind {
    Image,
    Signal,
    VitalSign,
    LabResult,
    InputVar,
    OutputVar,
}

impl ModalityKind {
    pub const ALL: [ModalityKind; 6] = [
        ModalityKind::Image,
        ModalityKind::Signal,
        ModalityKind::VitalSign,
        ModalityKind::LabResult,
        ModalityKind::InputVar,
        ModalityKind::OutputVar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModalityKind::Image => "image",
            ModalityKind::Signal => "signal",
            ModalityKind::VitalSign => "vital_sign",
            ModalityKind::LabResult => "lab_result",
            ModalityKind::InputVar => "input_var",
            ModalityKind::OutputVar => "output_var",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Short natural-language description fed to the router.
    pub fn description(self) -> &'static str {
        match self {
            ModalityKind::Image => "chest x-ray image",
            ModalityKind::Signal => "multi-lead electrocardiogram signal",
            ModalityKind::VitalSign => "bedside vital sign time series",
            ModalityKind::LabResult => "laboratory test results",
            ModalityKind::InputVar => "fluid and medication input variables",
            ModalityKind::OutputVar => "urine and drain output variables",
        }
    }

    pub fn is_tabular(self) -> bool {
        !matches!(self, ModalityKind::Image | ModalityKind::Signal)
    }
}

impl fmt::Display for ModalityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Raw feature geometry of each modality.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureLayout {
    pub image_side: usize,
    pub signal_len: usize,
    pub signal_leads: usize,
    pub window_steps: usize,
    pub window_features: usize,
}

impl Default for FeatureLayout {
    fn default() -> Self {
        Self {
            image_side: 8,
            signal_len: 32,
            signal_leads: 2,
            window_steps: 8,
            window_features: 4,
        }
    }
}

impl FeatureLayout {
    /// Channel-last map shape of a single raw sample.
    pub fn map_shape(&self, modality: ModalityKind) -> MapShape {
        match modality {
            ModalityKind::Image => MapShape {
                height: self.image_side,
                width: self.image_side,
                channels: 1,
            },
            ModalityKind::Signal => MapShape {
                height: 1,
                width: self.signal_len,
                channels: self.signal_leads,
            },
            _ => MapShape {
                height: 1,
                width: self.window_steps,
                channels: self.window_features,
            },
        }
    }

    pub fn feature_len(&self, modality: ModalityKind) -> usize {
        self.map_shape(modality).len()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskRole {
    Training,
    Validation,
}

pub type TaskId = u32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub name: String,
    /// Ordered, duplicate-free. Order fixes the feature concatenation layout.
    pub modalities: Vec<ModalityKind>,
    pub num_classes: usize,
    pub prompt_text: String,
    pub modality_description: String,
    pub role: TaskRole,
}

impl TaskSpec {
    pub fn new(
        task_id: TaskId,
        name: impl Into<String>,
        modalities: Vec<ModalityKind>,
        prompt_text: impl Into<String>,
        role: TaskRole,
    ) -> Result<Self> {
        let modality_description = modalities.iter().map(|m| m.description()).collect::<Vec<_>>().join(" ");
        let spec = Self {
            task_id,
            name: name.into(),
            modalities,
            num_classes: 2,
            prompt_text: prompt_text.into(),
            modality_description,
            role,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Input(format!("task `{}` has no modalities", self.name)));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if self.modalities[..i].contains(m) {
                return Err(Error::Input(format!("task `{}` lists {m} twice", self.name)));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Input(format!("task `{}` needs at least two classes", self.name)));
        }
        Ok(())
    }

    /// Same task under a different role.
    pub fn with_role(&self, role: TaskRole) -> Self {
        Self { role, ..self.clone() }
    }
}

/// Check that task ids are unique.
pub fn validate_roster(tasks: &[TaskSpec]) -> Result<()> {
    for (i, t) in tasks.iter().enumerate() {
        t.validate()?;
        if tasks[..i].iter().any(|o| o.task_id == t.task_id) {
            return Err(Error::Input(format!("duplicate task id {}", t.task_id)));
        }
    }
    Ok(())
}

/// One labeled example with raw per-modality features.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub label: usize,
    pub features: BTreeMap<ModalityKind, Vec<f64>>,
}

/// Stacked inputs for one task: one `[batch × feature_len]` matrix per modality.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch {
    pub task_id: TaskId,
    pub inputs: BTreeMap<ModalityKind, Tensor>,
    pub labels: Vec<usize>,
}

impl TaskBatch {
    pub fn from_samples(task: &TaskSpec, samples: &[&Sample]) -> Result<Self> {
        let mut inputs = BTreeMap::new();
        for &m in &task.modalities {
            let mut data = Vec::new();
            let mut width = None;
            for s in samples {
                let f = s.features.get(&m).ok_or(Error::MissingModality(m))?;
                if *width.get_or_insert(f.len()) != f.len() {
                    return Err(Error::Input(format!("ragged {m} features in task `{}`", task.name)));
                }
                data.extend_from_slice(f);
            }
            inputs.insert(m, Tensor::new([samples.len(), width.unwrap_or(0)], data)?);
        }
        Ok(Self {
            task_id: task.task_id,
            inputs,
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}
