//! Synthetic multi-modal tasks, the 7:1:1:1 split and client sharding.
//!
//! Each modality of a task is a class-conditional Gaussian around a structured
//! pattern: `x = μ + (±margin/2)·d + noise·ε` with `d` a unit direction (a
//! bright blob for images, positive bumps for signals, per-feature trends for
//! tabular windows). A nearest-mean probe on one modality therefore reaches
//! `Φ(margin / (2·noise))` in the limit.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::{FeatureLayout, ModalityKind, Sample, TaskId, TaskRole, TaskSpec};
use crate::rng::{derive_seed, rng_for, stream, Rng};
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityGenerator {
    pub margin: f64,
    pub noise: f64,
}

/// Covariate shift applied after generation: `x ↦ scale·x + offset·u`.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionShift {
    pub offset: f64,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskRecipe {
    pub task: TaskSpec,
    /// Task whose class patterns are reused; a shifted twin points at its source.
    pub pattern_task: TaskId,
    pub generators: BTreeMap<ModalityKind, ModalityGenerator>,
    pub label_balance: f64,
    pub shift: Option<DistributionShift>,
}

impl SyntheticTaskRecipe {
    pub fn new(task: TaskSpec, margin: f64, noise: f64) -> Self {
        let generators = task.modalities.iter().map(|&m| (m, ModalityGenerator { margin, noise })).collect();
        Self {
            pattern_task: task.task_id,
            task,
            generators,
            label_balance: 0.5,
            shift: None,
        }
    }

    fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if !(0.0..=1.0).contains(&self.label_balance) {
            return Err(Error::Input(format!("label_balance {} outside [0, 1]", self.label_balance)));
        }
        for m in &self.task.modalities {
            let g = self
                .generators
                .get(m)
                .ok_or_else(|| Error::Input(format!("recipe `{}` has no generator for {m}", self.task.name)))?;
            if !(g.noise >= 0.0 && g.margin.is_finite() && g.noise.is_finite()) {
                return Err(Error::Input(format!("bad {m} generator in `{}`", self.task.name)));
            }
        }
        Ok(())
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn gaussian(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Unit class direction of `modality`, laid out channel-last.
fn class_direction(layout: &FeatureLayout, modality: ModalityKind, rng: &mut Rng) -> Vec<f64> {
    let shape = layout.map_shape(modality);
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    let mut v = vec![0.0; shape.len()];
    match modality {
        ModalityKind::Image => {
            let lo = 1.0;
            let hi = (w.max(3) - 2) as f64;
            let (cy, cx) = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    v[(y * w + x) * c] = (-d2 / (2.0 * 1.5f64.powi(2))).exp();
                }
            }
        }
        ModalityKind::Signal => {
            for lead in 0..c {
                for _ in 0..2 {
                    let centre = rng.random_range(0.0..w as f64);
                    let amp = rng.random_range(0.5..1.0);
                    for t in 0..w {
                        v[t * c + lead] += amp * (-(t as f64 - centre).powi(2) / (2.0 * 1.5f64.powi(2))).exp();
                    }
                }
            }
        }
        _ => {
            for f in 0..c {
                let (a, b) = (gaussian(rng), gaussian(rng));
                for t in 0..w {
                    v[t * c + f] = a + b * t as f64 / w as f64;
                }
            }
        }
    }
    normalize(v)
}

/// Class-independent background shared by every sample of `modality`.
fn background(layout: &FeatureLayout, modality: ModalityKind) -> Vec<f64> {
    let shape = layout.map_shape(modality);
    let (w, c) = (shape.width, shape.channels);
    (0..shape.len())
        .map(|i| {
            let (pos, ch) = (i / c, i % c);
            match modality {
                ModalityKind::Image => 0.2 * (pos % w) as f64 / w as f64,
                ModalityKind::Signal => 0.3 * (std::f64::consts::TAU * pos as f64 / 8.0 + ch as f64).sin(),
                _ => 0.0,
            }
        })
        .collect()
}

/// Background, class direction and optional shift direction of one modality.
type Pattern = (Vec<f64>, Vec<f64>, Option<Vec<f64>>);

/// `n` samples of `recipe`. Sample `i` depends only on `(recipe, seed, i)`.
pub fn generate_task(recipe: &SyntheticTaskRecipe, layout: &FeatureLayout, n: usize, seed: u64) -> Result<Vec<Sample>> {
    recipe.validate()?;
    let task = &recipe.task;
    let patterns: BTreeMap<ModalityKind, Pattern> = task
        .modalities
        .iter()
        .map(|&m| {
            let mut r = rng_for(seed, &[stream::RECIPE, recipe.pattern_task as u64, m.index() as u64]);
            let dir = class_direction(layout, m, &mut r);
            let shift_dir = recipe.shift.map(|_| {
                let mut r = rng_for(seed, &[stream::RECIPE, task.task_id as u64, m.index() as u64, 1]);
                normalize((0..dir.len()).map(|_| gaussian(&mut r)).collect())
            });
            (m, (background(layout, m), dir, shift_dir))
        })
        .collect();

    Ok((0..n)
        .map(|i| {
            let mut r = rng_for(seed, &[stream::SAMPLE, task.task_id as u64, i as u64]);
            let label = usize::from(r.random::<f64>() < recipe.label_balance);
            let sign = if label == 1 { 1.0 } else { -1.0 };
            let features = task
                .modalities
                .iter()
                .map(|m| {
                    let gen = recipe.generators[m];
                    let (base, dir, shift_dir) = &patterns[m];
                    let mut x: Vec<f64> = base
                        .iter()
                        .zip(dir)
                        .map(|(b, d)| b + sign * 0.5 * gen.margin * d + gen.noise * gaussian(&mut r))
                        .collect();
                    if let (Some(s), Some(u)) = (recipe.shift, shift_dir) {
                        x.iter_mut().zip(u).for_each(|(v, u)| *v = s.scale * *v + s.offset * u);
                    }
                    (*m, x)
                })
                .collect();
            Sample {
                id: i as u64,
                label,
                features,
            }
        })
        .collect())
}

/// Largest-remainder apportionment of `n_total` items by `ratios`; ties go to
/// the earlier part.
pub fn partition(n_total: usize, ratios: &[u64]) -> Result<Vec<usize>> {
    let total: u64 = ratios.iter().sum();
    if ratios.is_empty() || total == 0 {
        return Err(Error::Input("partition ratios must have a positive sum".into()));
    }
    if n_total < ratios.len() {
        return Err(Error::Input(format!("cannot split {n_total} items into {} parts", ratios.len())));
    }
    let n = n_total as u128;
    let total = total as u128;
    let mut sizes: Vec<usize> = ratios.iter().map(|&r| (n * r as u128 / total) as usize).collect();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    // stable sort keeps earlier parts first among equal remainders
    order.sort_by_key(|&i| std::cmp::Reverse(n * ratios[i] as u128 % total));
    let left = n_total - sizes.iter().sum::<usize>();
    for &i in order.iter().take(left) {
        sizes[i] += 1;
    }
    Ok(sizes)
}

/// Shuffle `ids` with `seed` and deal them round-robin to `n` shards.
pub fn shard_clients(ids: &[u64], n: usize, seed: u64) -> Result<Vec<Vec<u64>>> {
    if n == 0 {
        return Err(Error::Input("need at least one client".into()));
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut rng_for(seed, &[]));
    let mut shards = vec![Vec::with_capacity(ids.len() / n + 1); n];
    for (i, id) in order.into_iter().enumerate() {
        shards[i % n].push(id);
    }
    Ok(shards)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum SplitPart {
    Client(usize),
    Public,
    Dev,
    Test,
}

impl SplitPart {
    pub fn label(self) -> String {
        match self {
            SplitPart::Client(n) => format!("client{n}"),
            SplitPart::Public => "public".into(),
            SplitPart::Dev => "dev".into(),
            SplitPart::Test => "test".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub client_shards: Vec<Vec<u64>>,
    pub public: Vec<u64>,
    pub dev: Vec<u64>,
    pub test: Vec<u64>,
}

impl DatasetSplit {
    /// Shuffle `0..n`, cut it by `ratios` into train/public/dev/test and shard
    /// the training part over `num_clients`.
    pub fn build(n: usize, ratios: &[u64], num_clients: usize, seed: u64) -> Result<Self> {
        if ratios.len() != 4 {
            return Err(Error::Input(format!("expected four split ratios, got {}", ratios.len())));
        }
        let sizes = partition(n, ratios)?;
        let mut ids: Vec<u64> = (0..n as u64).collect();
        ids.shuffle(&mut rng_for(seed, &[stream::SPLIT]));
        let mut rest = ids.as_slice();
        let mut parts = Vec::with_capacity(4);
        for s in sizes {
            let (head, tail) = rest.split_at(s);
            parts.push(head.to_vec());
            rest = tail;
        }
        let test = parts.pop().expect("four parts");
        let dev = parts.pop().expect("four parts");
        let public = parts.pop().expect("four parts");
        let train = parts.pop().expect("four parts");
        Ok(Self {
            client_shards: shard_clients(&train, num_clients, derive_seed(seed, &[stream::SHARD]))?,
            public,
            dev,
            test,
        })
    }

    pub fn part(&self, part: SplitPart) -> &[u64] {
        match part {
            SplitPart::Client(n) => &self.client_shards[n],
            SplitPart::Public => &self.public,
            SplitPart::Dev => &self.dev,
            SplitPart::Test => &self.test,
        }
    }

    pub fn parts(&self) -> Vec<SplitPart> {
        (0..self.client_shards.len())
            .map(SplitPart::Client)
            .chain([SplitPart::Public, SplitPart::Dev, SplitPart::Test])
            .collect()
    }

    pub fn len(&self) -> usize {
        self.parts().into_iter().map(|p| self.part(p).len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct TaskData {
    pub spec: TaskSpec,
    /// Indexed by sample id.
    pub samples: Vec<Sample>,
    pub split: DatasetSplit,
}

impl TaskData {
    pub fn samples_of(&self, ids: &[u64]) -> Vec<&Sample> {
        ids.iter().map(|&i| &self.samples[i as usize]).collect()
    }

    pub fn part(&self, part: SplitPart) -> Vec<&Sample> {
        self.samples_of(self.split.part(part))
    }

    /// Records of one split part as named tensors: `{task}/{id}/label` and
    /// `{task}/{id}/{modality}`.
    pub fn part_tensors(&self, part: SplitPart) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for s in self.part(part) {
            let prefix = format!("{}/{}", self.spec.name, s.id);
            out.push((format!("{prefix}/label"), Tensor::scalar(s.label as f64)));
            for (m, x) in &s.features {
                out.push((format!("{prefix}/{m}"), Tensor::new([x.len()], x.clone()).expect("length matches")));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub samples_per_task: usize,
    pub split_ratios: Vec<u64>,
    /// Multiplies every recipe margin.
    pub separation: f64,
    pub noise: f64,
    pub shift_offset: f64,
    pub shift_scale: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            samples_per_task: 600,
            split_ratios: vec![7, 1, 1, 1],
            separation: 1.0,
            noise: 1.0,
            shift_offset: 0.5,
            shift_scale: 1.1,
        }
    }
}

pub mod tasks {
    use crate::modality::TaskId;

    pub const LUNG_OPACITY: TaskId = 1;
    pub const COVID19: TaskId = 2;
    pub const ECG_ABNORMAL: TaskId = 3;
    pub const MORTALITY: TaskId = 4;
    pub const SEPSIS: TaskId = 101;
    pub const ENLARGED_CARDIOMEDIASTINUM: TaskId = 102;

    pub const NAMES: [(&str, TaskId); 6] = [
        ("lung_opacity", LUNG_OPACITY),
        ("covid19", COVID19),
        ("ecg_abnormal", ECG_ABNORMAL),
        ("mortality", MORTALITY),
        ("sepsis", SEPSIS),
        ("enlarged_cardiomediastinum", ENLARGED_CARDIOMEDIASTINUM),
    ];

    pub fn id_by_name(name: &str) -> Option<TaskId> {
        NAMES.iter().find(|(n, _)| *n == name).map(|&(_, id)| id)
    }
}

/// The stand-in task suite: four training tasks covering all six modalities,
/// a distribution-shifted twin of the tabular task and an extra image task for
/// validation.
pub fn standard_recipes(config: &DataConfig) -> Result<(Vec<SyntheticTaskRecipe>, Vec<SyntheticTaskRecipe>)> {
    use ModalityKind::*;
    let k = config.separation;
    let tabular = vec![VitalSign, LabResult, InputVar, OutputVar];
    let task = |id, name: &str, mods: Vec<ModalityKind>, prompt: &str, role| TaskSpec::new(id, name, mods, prompt, role);

    let training = vec![
        SyntheticTaskRecipe::new(
            task(
                tasks::LUNG_OPACITY,
                "lung_opacity",
                vec![Image],
                "Is there lung opacity in the given chest X-ray?",
                TaskRole::Training,
            )?,
            4.0 * k,
            config.noise,
        ),
        SyntheticTaskRecipe::new(
            task(
                tasks::COVID19,
                "covid19",
                vec![Image],
                "Does the patient in the given chest X-ray have COVID-19?",
                TaskRole::Training,
            )?,
            3.5 * k,
            config.noise,
        ),
        SyntheticTaskRecipe::new(
            task(
                tasks::ECG_ABNORMAL,
                "ecg_abnormal",
                vec![Signal],
                "Is the given ECG abnormal?",
                TaskRole::Training,
            )?,
            4.0 * k,
            config.noise,
        ),
        SyntheticTaskRecipe::new(
            task(
                tasks::MORTALITY,
                "mortality",
                tabular.clone(),
                "Based on these clinical features, will this patient die in the hospital?",
                TaskRole::Training,
            )?,
            2.5 * k,
            config.noise,
        ),
    ];

    let mut sepsis = SyntheticTaskRecipe::new(
        task(
            tasks::SEPSIS,
            "sepsis",
            tabular,
            "Based on these clinical features, will sepsis occur in this patient?",
            TaskRole::Validation,
        )?,
        2.5 * k,
        config.noise,
    );
    sepsis.pattern_task = tasks::MORTALITY;
    sepsis.label_balance = 0.4;
    sepsis.shift = Some(DistributionShift {
        offset: config.shift_offset,
        scale: config.shift_scale,
    });
    let cardio = SyntheticTaskRecipe::new(
        task(
            tasks::ENLARGED_CARDIOMEDIASTINUM,
            "enlarged_cardiomediastinum",
            vec![Image],
            "Is there enlarged cardiomediastinum in the given chest X-ray?",
            TaskRole::Validation,
        )?,
        4.0 * k,
        config.noise,
    );
    Ok((training, vec![sepsis, cardio]))
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub training: Vec<TaskData>,
    pub validation: Vec<TaskData>,
    pub num_clients: usize,
}

impl Dataset {
    pub fn from_recipes(
        training: &[SyntheticTaskRecipe],
        validation: &[SyntheticTaskRecipe],
        config: &DataConfig,
        layout: &FeatureLayout,
        num_clients: usize,
        seed: u64,
    ) -> Result<Self> {
        let build = |r: &SyntheticTaskRecipe| -> Result<TaskData> {
            let samples = generate_task(r, layout, config.samples_per_task, seed)?;
            let split = DatasetSplit::build(
                samples.len(),
                &config.split_ratios,
                num_clients,
                derive_seed(seed, &[r.task.task_id as u64]),
            )?;
            Ok(TaskData {
                spec: r.task.clone(),
                samples,
                split,
            })
        };
        let dataset = Self {
            training: training.iter().map(build).collect::<Result<_>>()?,
            validation: validation.iter().map(build).collect::<Result<_>>()?,
            num_clients,
        };
        let all: Vec<TaskSpec> = dataset.tasks().map(|t| t.spec.clone()).collect();
        crate::modality::validate_roster(&all)?;
        Ok(dataset)
    }

    pub fn generate(config: &DataConfig, layout: &FeatureLayout, num_clients: usize, seed: u64) -> Result<Self> {
        let (training, validation) = standard_recipes(config)?;
        Self::from_recipes(&training, &validation, config, layout, num_clients, seed)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskData> {
        self.training.iter().chain(&self.validation)
    }

    pub fn task(&self, id: TaskId) -> Option<&TaskData> {
        self.tasks().find(|t| t.spec.task_id == id)
    }

    pub fn task_by_name(&self, name: &str) -> Option<&TaskData> {
        self.tasks().find(|t| t.spec.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_examples() {
        assert_eq!(partition(20, &[7, 1, 1, 1]).unwrap(), vec![14, 2, 2, 2]);
        assert_eq!(partition(10, &[7, 1, 1, 1]).unwrap(), vec![7, 1, 1, 1]);
        assert!(matches!(partition(3, &[7, 1, 1, 1]), Err(Error::Input(_))));
    }

    #[test]
    fn shard_examples() {
        let ids: Vec<u64> = (0..10).collect();
        let shards = shard_clients(&ids, 5, 1).unwrap();
        assert!(shards.iter().all(|s| s.len() == 2));
        let ids: Vec<u64> = (0..11).collect();
        let mut sizes: Vec<usize> = shard_clients(&ids, 5, 1).unwrap().iter().map(Vec::len).collect();
        sizes.sort();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
    }

    #[test]
    fn twin_shares_feature_space() {
        let ds = Dataset::generate(
            &DataConfig {
                samples_per_task: 40,
                ..Default::default()
            },
            &FeatureLayout::default(),
            2,
            3,
        )
        .unwrap();
        let mortality = ds.task(tasks::MORTALITY).unwrap();
        let sepsis = ds.task(tasks::SEPSIS).unwrap();
        assert_eq!(mortality.spec.modalities, sepsis.spec.modalities);
        for m in &sepsis.spec.modalities {
            assert_eq!(mortality.samples[0].features[m].len(), sepsis.samples[0].features[m].len());
        }
    }
}
