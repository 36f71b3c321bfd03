//! Classification metrics, the 16-surface benchmark matrix and zero-shot
//! validation.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{Algorithm, ClientModel};
use crate::datagen::{Dataset, SplitPart, TaskData};
use crate::error::{Error, Result};
use crate::federation::{run_experiment, ExperimentConfig, ExperimentResult, Scope, Variant};
use crate::foundation::{zero_shot_infer, FoundationStub, InjectedModel};
use crate::modality::{Sample, TaskBatch, TaskRole};

pub const CSV_HEADER: &str = "config,task,accuracy,precision,recall,f1,support";
/// Metric cell of a task the model cannot handle.
pub const NOT_CAPABLE: &str = "✗";

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Binary metrics for `positive`. A ratio with a zero denominator is 0.
pub fn classification_metrics(preds: &[usize], labels: &[usize], positive: usize) -> Result<Metrics> {
    if preds.len() != labels.len() {
        return Err(Error::Input(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if preds.is_empty() {
        return Err(Error::Input("no predictions to score".into()));
    }
    let (mut tp, mut fp, mut fn_, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &l) in preds.iter().zip(labels) {
        correct += usize::from(p == l);
        match (p == positive, l == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(Metrics {
        accuracy: ratio(correct, preds.len()),
        precision,
        recall,
        f1,
        support: preds.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub config: String,
    pub task: String,
    /// `None` when the model cannot handle the task's modalities.
    pub metrics: Option<Metrics>,
    pub support: usize,
}

impl MetricsRow {
    pub fn capable(&self) -> bool {
        self.metrics.is_some()
    }
}

pub fn write_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        match &r.metrics {
            Some(m) => writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6},{}",
                r.config, r.task, m.accuracy, m.precision, m.recall, m.f1, r.support
            ),
            None => writeln!(out, "{},{},{x},{x},{x},{x},{}", r.config, r.task, r.support, x = NOT_CAPABLE),
        }
        .expect("writing to a String");
    }
    out
}

/// The four evaluation surfaces of one (algorithm, scope) pair.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Surface {
    /// Global model of a Base run.
    Base,
    /// Global model of a GlobalFinetune run.
    Finetuned,
    /// Last aggregate of an LlmFinetune run, before injection.
    Aggregated,
    /// Foundation path of an LlmFinetune run.
    Foundation,
}

impl Surface {
    pub const ALL: [Surface; 4] = [Surface::Base, Surface::Finetuned, Surface::Aggregated, Surface::Foundation];

    pub fn suffix(self) -> &'static str {
        match self {
            Surface::Base => "",
            Surface::Finetuned => "^+",
            Surface::Aggregated => "^*",
            Surface::Foundation => "^F",
        }
    }

    pub fn variant(self) -> Variant {
        match self {
            Surface::Base => Variant::Base,
            Surface::Finetuned => Variant::GlobalFinetune,
            Surface::Aggregated | Surface::Foundation => Variant::LlmFinetune,
        }
    }
}

/// `FedAvg_s`, `FedProx_m^F`, ...
pub fn config_label(algorithm: Algorithm, scope: Scope, surface: Surface) -> String {
    format!("{}_{}{}", algorithm.label(), scope.suffix(), surface.suffix())
}

fn batch_of(task: &TaskData, samples: &[&Sample]) -> Result<TaskBatch> {
    if samples.is_empty() {
        return Err(Error::Input(format!("no samples to evaluate for `{}`", task.spec.name)));
    }
    TaskBatch::from_samples(&task.spec, samples)
}

/// Decoder-path metrics of a client-style model.
pub fn evaluate_model(model: &ClientModel, task: &TaskData, samples: &[&Sample]) -> Result<Metrics> {
    let batch = batch_of(task, samples)?;
    let preds = model.predict(&task.spec, &batch)?.argmax_rows()?;
    classification_metrics(&preds, &batch.labels, 1)
}

/// Foundation-path metrics; `None` if a modality was never trained.
pub fn evaluate_foundation(stub: &FoundationStub, encoders: &ClientModel, task: &TaskData, samples: &[&Sample]) -> Result<Option<Metrics>> {
    let batch = batch_of(task, samples)?;
    match zero_shot_infer(stub, encoders, &task.spec, &batch) {
        Ok(out) => Ok(Some(classification_metrics(&out.predictions, &batch.labels, 1)?)),
        Err(Error::Capability { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Metrics of one experiment on one task for the surfaces its variant yields.
pub fn surface_rows(result: &ExperimentResult, task: &TaskData) -> Result<Vec<(Surface, MetricsRow)>> {
    let fed = &result.config.federation;
    let test = task.part(SplitPart::Test);
    let row = |surface, metrics: Option<Metrics>| MetricsRow {
        config: config_label(fed.algorithm, fed.scope, surface),
        task: task.spec.name.clone(),
        metrics,
        support: test.len(),
    };
    let state = &result.state;
    Ok(match fed.variant {
        Variant::Base => vec![(Surface::Base, row(Surface::Base, Some(evaluate_model(&state.model, task, &test)?)))],
        Variant::GlobalFinetune => vec![(
            Surface::Finetuned,
            row(Surface::Finetuned, Some(evaluate_model(&state.model, task, &test)?)),
        )],
        Variant::LlmFinetune => vec![
            (
                Surface::Aggregated,
                row(Surface::Aggregated, Some(evaluate_model(&state.aggregated, task, &test)?)),
            ),
            (
                Surface::Foundation,
                row(Surface::Foundation, evaluate_foundation(&state.stub, &state.model, task, &test)?),
            ),
        ],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Training task whose single-task foundation models feed the zero-shot table.
    pub zero_shot_source: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            zero_shot_source: "mortality".into(),
        }
    }
}

/// One execution of the matrix.
#[derive(Clone, Debug)]
pub struct MatrixRun {
    pub algorithm: Algorithm,
    pub scope: Scope,
    pub variant: Variant,
    pub result: ExperimentResult,
}

#[derive(Clone, Debug)]
pub struct BenchmarkMatrix {
    /// Per training task, 16 rows: scope (s, m) × algorithm × surface.
    pub rows: Vec<MetricsRow>,
    pub runs: Vec<MatrixRun>,
}

impl BenchmarkMatrix {
    pub fn run(&self, algorithm: Algorithm, scope: Scope, variant: Variant) -> Option<&ExperimentResult> {
        self.runs
            .iter()
            .find(|r| r.algorithm == algorithm && r.scope == scope && r.variant == variant)
            .map(|r| &r.result)
    }
}

const ALGORITHMS: [Algorithm; 2] = [Algorithm::FedAvg, Algorithm::FedProx];
const VARIANTS: [Variant; 3] = [Variant::Base, Variant::GlobalFinetune, Variant::LlmFinetune];

/// Every (algorithm, scope, variant) execution, then the 16 surfaces per task.
/// Single-task scope trains one federation per training task.
pub fn run_benchmark_matrix(dataset: &Dataset, base: &ExperimentConfig) -> Result<BenchmarkMatrix> {
    let mut cells = Vec::new();
    for scope in dataset
        .training
        .iter()
        .map(|t| Scope::SingleTask(t.spec.task_id))
        .chain([Scope::MultiTask])
    {
        for algorithm in ALGORITHMS {
            for variant in VARIANTS {
                cells.push((algorithm, scope, variant));
            }
        }
    }
    let runs: Vec<MatrixRun> = cells
        .into_par_iter()
        .map(|(algorithm, scope, variant)| {
            let mut config = base.clone();
            config.federation.algorithm = algorithm;
            config.federation.scope = scope;
            config.federation.variant = variant;
            let result =
                run_experiment(dataset, &config, None).map_err(|e| e.context(format!("{} {scope} {variant:?}", algorithm.label())))?;
            Ok(MatrixRun {
                algorithm,
                scope,
                variant,
                result,
            })
        })
        .collect::<Result<_>>()?;
    let matrix = BenchmarkMatrix { rows: Vec::new(), runs };

    let mut rows = Vec::new();
    for task in &dataset.training {
        let single = Scope::SingleTask(task.spec.task_id);
        for scope in [single, Scope::MultiTask] {
            for algorithm in ALGORITHMS {
                let mut by_surface = Vec::new();
                for variant in VARIANTS {
                    let result = matrix.run(algorithm, scope, variant).expect("every cell ran");
                    by_surface.extend(surface_rows(result, task)?);
                }
                for surface in Surface::ALL {
                    let (_, row) = by_surface.iter().find(|(s, _)| *s == surface).expect("every surface produced");
                    rows.push(row.clone());
                }
            }
        }
    }
    Ok(BenchmarkMatrix { rows, ..matrix })
}

/// Label of the non-injected stub in the zero-shot table.
pub const STUB_LABEL: &str = "Foundation";

/// Foundation-path metrics on every validation task, using all of its samples
/// (none was seen in training). `sources` pairs a row label with an injected
/// model; the bare stub is always listed first.
pub fn run_zero_shot(dataset: &Dataset, stub: &FoundationStub, sources: &[(String, InjectedModel)]) -> Result<Vec<MetricsRow>> {
    let bare = ClientModel::new(&Default::default(), &[], 0)?;
    let mut rows = Vec::new();
    for task in dataset.validation.iter().filter(|t| t.spec.role == TaskRole::Validation) {
        let samples: Vec<&Sample> = task.samples.iter().collect();
        let mut push = |config: &str, metrics| {
            rows.push(MetricsRow {
                config: config.to_owned(),
                task: task.spec.name.clone(),
                metrics,
                support: samples.len(),
            })
        };
        push(STUB_LABEL, evaluate_foundation(stub, &bare, task, &samples)?);
        for (label, model) in sources {
            push(label, evaluate_foundation(&model.stub, &model.encoders, task, &samples)?);
        }
    }
    Ok(rows)
}

/// Zero-shot sources from a finished matrix: the multi-task foundation models
/// and the single-task ones trained on `config.zero_shot_source`.
pub fn zero_shot_sources(dataset: &Dataset, matrix: &BenchmarkMatrix, config: &EvalConfig) -> Result<Vec<(String, InjectedModel)>> {
    let source = dataset
        .training
        .iter()
        .find(|t| t.spec.name == config.zero_shot_source)
        .ok_or_else(|| {
            Error::Input(format!(
                "eval.zero_shot_source `{}` is not a training task",
                config.zero_shot_source
            ))
        })?;
    let mut out = Vec::new();
    for scope in [Scope::SingleTask(source.spec.task_id), Scope::MultiTask] {
        for algorithm in ALGORITHMS {
            let result = matrix
                .run(algorithm, scope, Variant::LlmFinetune)
                .ok_or_else(|| Error::Contract("matrix lacks a foundation run".into()))?;
            out.push((config_label(algorithm, scope, Surface::Foundation), result.state.injected()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        let m = classification_metrics(&[1, 1, 0, 0], &[1, 0, 1, 0], 1).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (0.5, 0.5, 0.5, 0.5));
        let m = classification_metrics(&[0, 1], &[0, 1], 1).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
        let m = classification_metrics(&[0, 0], &[1, 0], 1).unwrap();
        assert_eq!((m.precision, m.f1), (0.0, 0.0));
        assert!(classification_metrics(&[0], &[0, 1], 1).is_err());
    }

    #[test]
    fn labels_and_csv() {
        assert_eq!(config_label(Algorithm::FedAvg, Scope::SingleTask(1), Surface::Base), "FedAvg_s");
        assert_eq!(
            config_label(Algorithm::FedProx, Scope::MultiTask, Surface::Foundation),
            "FedProx_m^F"
        );
        let rows = vec![
            MetricsRow {
                config: "FedAvg_s".into(),
                task: "t".into(),
                metrics: Some(classification_metrics(&[1, 0, 1], &[1, 0, 0], 1).unwrap()),
                support: 3,
            },
            MetricsRow {
                config: STUB_LABEL.into(),
                task: "t".into(),
                metrics: None,
                support: 3,
            },
        ];
        assert_eq!(
            write_csv(&rows),
            "config,task,accuracy,precision,recall,f1,support\n\
             FedAvg_s,t,0.666667,0.500000,1.000000,0.666667,3\n\
             Foundation,t,✗,✗,✗,✗,3\n"
        );
    }
}
