//! `medinject` experiment runner.

pub mod config;
pub mod output;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use medinject::client::Algorithm;
use medinject::datagen::{Dataset, SplitPart};
use medinject::eval::{run_benchmark_matrix, run_zero_shot, surface_rows, write_csv, zero_shot_sources, BenchmarkMatrix, MatrixRun};
use medinject::federation::{run_experiment, GlobalState, Scope, Variant};
use medinject::foundation::FoundationStub;
use medinject::verify::{run_suite, VerifyOptions};
use medinject::wire::{self, Container, GLOBAL_CLIENT};
use medinject::Error;
use rayon::prelude::*;
use serde_json::json;

pub use config::{parse_config, FileConfig, ModelSection, Overrides, Resolved};
use output::{OutDir, RunManifest};

#[derive(Debug, Parser)]
#[command(
    name = "medinject",
    version,
    about = "Federated multi-modal training with foundation-model injection"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML config with `federation`, `model`, `data` and `eval` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub rounds: Option<usize>,
    #[arg(long, global = true)]
    pub clients: Option<usize>,
    /// fedavg | fedprox
    #[arg(long, global = true)]
    pub algo: Option<Algorithm>,
    /// multi | single:<task name or id>
    #[arg(long, global = true)]
    pub scope: Option<Scope>,
    /// base | global_finetune | llm_finetune
    #[arg(long, global = true)]
    pub variant: Option<Variant>,
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Worker threads; affects wall time only.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

impl Common {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            rounds: self.rounds,
            clients: self.clients,
            algorithm: self.algo,
            scope: self.scope,
            variant: self.variant,
            lambda: self.lambda,
        }
    }
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate the synthetic tasks and write every split part.
    GenData,
    /// Run one federated experiment and evaluate it on the test split.
    Run {
        /// Global checkpoint to start from.
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
    },
    /// Every algorithm × scope × variant, then the zero-shot table.
    Matrix,
    /// Foundation-path evaluation on the validation tasks.
    ZeroShot,
    /// Gradient checks and invariants; exits 1 on any failure.
    Verify,
}

/// Failure of a command, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad file, flag or path.
    Input(String),
    Config {
        key: String,
        message: String,
    },
    Core(Error),
    /// A verification check failed.
    Invariant(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) | CliError::Invariant(m) => f.write_str(m),
            CliError::Config { key, message } if key.is_empty() => write!(f, "config: {message}"),
            CliError::Config { key, message } => write!(f, "config key `{key}`: {message}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    /// 1 for broken invariants, 2 for bad input.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) | CliError::Config { .. } => 2,
            CliError::Invariant(_) => 1,
            CliError::Core(e) => match e.root() {
                Error::Input(_) | Error::Parse(_) | Error::Io(_) | Error::MissingModality(_) => 2,
                _ => 1,
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Input(_) => "input",
            CliError::Config { .. } => "config",
            CliError::Invariant(_) => "invariant",
            CliError::Core(e) => match e.root() {
                Error::Parse(_) => "parse",
                Error::Io(_) => "io",
                Error::Input(_) | Error::MissingModality(_) => "input",
                Error::Contract(_) => "contract",
                Error::Domain(_) => "domain",
                Error::Dimension { .. } => "dimension",
                Error::Capability { .. } => "capability",
                Error::Context { .. } => unreachable!("root strips context"),
            },
        }
    }

    /// Single-line JSON for stderr.
    pub fn to_json(&self) -> String {
        match self {
            CliError::Config { key, message } => json!({ "error": self.kind(), "key": key, "message": message }),
            _ => json!({ "error": self.kind(), "message": self.to_string() }),
        }
        .to_string()
    }
}

/// Parse arguments, run, report; returns the process exit code.
pub fn main_with(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(CliError::Input("--threads must be at least 1".into()));
        }
        // A second initialization in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    if let Command::Verify = cli.command {
        return verify();
    }
    let resolved = parse_config(cli.common.config.as_deref(), &cli.common.overrides())?;
    for w in &resolved.warnings {
        eprintln!("{}", json!({ "warning": w }));
    }
    let name = match &cli.command {
        Command::GenData => "gen-data",
        Command::Run { .. } => "run",
        Command::Matrix => "matrix",
        Command::ZeroShot => "zero-shot",
        Command::Verify => unreachable!(),
    };
    let manifest = RunManifest::new(name, resolved.experiment.federation.seed, resolved.to_toml());
    let mut out = OutDir::create(&cli.common.out_dir, manifest)?;
    let dataset = out.time("generate", || generate(&resolved))?;
    match &cli.command {
        Command::GenData => gen_data(&dataset, &mut out)?,
        Command::Run { init_checkpoint } => run(&dataset, &resolved, init_checkpoint.as_deref(), &mut out)?,
        Command::Matrix => matrix(&dataset, &resolved, &mut out)?,
        Command::ZeroShot => zero_shot(&dataset, &resolved, &mut out)?,
        Command::Verify => unreachable!(),
    }
    let manifest = out.finish()?;
    for a in &manifest.artifacts {
        println!("{}", cli.common.out_dir.join(a).display());
    }
    Ok(())
}

pub fn generate(r: &Resolved) -> Result<Dataset, CliError> {
    let fed = &r.experiment.federation;
    Ok(Dataset::generate(&r.data, &r.experiment.model.layout, fed.num_clients, fed.seed)?)
}

fn gen_data(dataset: &Dataset, out: &mut OutDir) -> Result<(), CliError> {
    for task in dataset.tasks() {
        for part in task.split.parts() {
            let client_id = match part {
                SplitPart::Client(n) => n as u32,
                _ => GLOBAL_CLIENT,
            };
            let c = Container {
                round_index: 0,
                client_id,
                tensors: task.part_tensors(part),
            };
            let bytes = wire::encode(&c)?;
            out.write(&format!("data/{}.{}.fmki", task.spec.name, part.label()), &bytes)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Container, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Input(format!("cannot read checkpoint {}: {e}", path.display())))?;
    wire::decode(&bytes).map_err(|e| CliError::Core(Error::from(e).context(format!("checkpoint {}", path.display()))))
}

fn run(dataset: &Dataset, r: &Resolved, init: Option<&Path>, out: &mut OutDir) -> Result<(), CliError> {
    let init = init.map(read_checkpoint).transpose()?;
    let result = out.time("train", || run_experiment(dataset, &r.experiment, init.as_ref()))?;
    let mut rows = Vec::new();
    out.time("evaluate", || -> Result<(), CliError> {
        for spec in &result.tasks {
            let task = dataset.task(spec.task_id).expect("scope task exists");
            rows.extend(surface_rows(&result, task)?.into_iter().map(|(_, row)| row));
        }
        Ok(())
    })?;
    out.write("results.csv", write_csv(&rows).as_bytes())?;
    out.write("checkpoint.fmki", &wire::encode(&result.state.checkpoint())?)?;
    let traces: Vec<_> = result
        .traces
        .iter()
        .map(|t| {
            json!({
                "round": t.round_index,
                "client_losses": t.client_losses,
                "finetune_losses": t.finetune_losses,
                "injection_losses": t.injection_losses,
                "upload_bytes": t.upload_bytes,
            })
        })
        .collect();
    out.write("traces.json", serde_json::to_string_pretty(&traces).expect("json").as_bytes())?;
    Ok(())
}

/// The never-injected stub of this seed.
fn bare_stub(r: &Resolved) -> Result<FoundationStub, CliError> {
    Ok(GlobalState::new(&r.experiment, &[])?.stub)
}

fn matrix(dataset: &Dataset, r: &Resolved, out: &mut OutDir) -> Result<(), CliError> {
    let matrix = out.time("matrix", || run_benchmark_matrix(dataset, &r.experiment))?;
    out.write("matrix.csv", write_csv(&matrix.rows).as_bytes())?;
    let rows = out.time("zero_shot", || -> Result<_, CliError> {
        let sources = zero_shot_sources(dataset, &matrix, &r.eval)?;
        Ok(run_zero_shot(dataset, &bare_stub(r)?, &sources)?)
    })?;
    out.write("zero_shot.csv", write_csv(&rows).as_bytes())?;
    Ok(())
}

fn zero_shot(dataset: &Dataset, r: &Resolved, out: &mut OutDir) -> Result<(), CliError> {
    let source = dataset
        .task_by_name(&r.eval.zero_shot_source)
        .ok_or_else(|| CliError::Input(format!("unknown zero-shot source `{}`", r.eval.zero_shot_source)))?;
    let cells: Vec<(Algorithm, Scope)> = [Scope::SingleTask(source.spec.task_id), Scope::MultiTask]
        .into_iter()
        .flat_map(|s| [(Algorithm::FedAvg, s), (Algorithm::FedProx, s)])
        .collect();
    let runs = out.time("train", || {
        cells
            .into_par_iter()
            .map(|(algorithm, scope)| {
                let mut config = r.experiment.clone();
                config.federation.algorithm = algorithm;
                config.federation.scope = scope;
                config.federation.variant = Variant::LlmFinetune;
                Ok(MatrixRun {
                    algorithm,
                    scope,
                    variant: Variant::LlmFinetune,
                    result: run_experiment(dataset, &config, None)?,
                })
            })
            .collect::<Result<Vec<_>, Error>>()
    })?;
    let matrix = BenchmarkMatrix { rows: Vec::new(), runs };
    let rows = out.time("zero_shot", || -> Result<_, CliError> {
        let sources = zero_shot_sources(dataset, &matrix, &r.eval)?;
        Ok(run_zero_shot(dataset, &bare_stub(r)?, &sources)?)
    })?;
    out.write("zero_shot.csv", write_csv(&rows).as_bytes())?;
    Ok(())
}

fn verify() -> Result<(), CliError> {
    let report = run_suite(&VerifyOptions::default());
    for c in &report.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    println!("{} checks in {:.1}s", report.checks.len(), report.seconds);
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(CliError::Invariant(format!("verification failed: {}", failed.join(", "))))
    }
}
