//! End-to-end acceptance criteria; prints one PASS/FAIL line per criterion.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::{dataset, desk_config, with};
use medinject::client::Algorithm;
use medinject::datagen::{tasks, Dataset, SplitPart};
use medinject::eval::{
    evaluate_model, run_benchmark_matrix, run_zero_shot, surface_rows, write_csv, zero_shot_sources, BenchmarkMatrix, EvalConfig,
    MatrixRun, STUB_LABEL,
};
use medinject::federation::{aggregate, run_experiment, ExperimentConfig, GlobalState, ModelUpdate, Scope, Summation, Variant};
use medinject::foundation::{FoundationConfig, FoundationStub};
use medinject::verify::{run_suite, VerifyOptions};
use medinject::wire::{decode, encode, Container};
use medinject::{Graph, ModalityKind, TaskRole, TaskSpec, Tensor};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], sigma: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sigma * z
        })
        .collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn gradient_suite() -> Outcome {
    let report = run_suite(&VerifyOptions {
        seeds: 20,
        fuzz_iterations: 2000,
    });
    let failed: Vec<String> = report
        .checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{}: {}", c.name, c.detail))
        .collect();
    ensure(failed.is_empty(), failed.join("; "))?;
    ensure(report.seconds < 60.0, format!("suite took {:.1}s", report.seconds))?;
    Ok(format!("{} checks over 20 seeds in {:.1}s", report.checks.len(), report.seconds))
}

fn upd(client_id: u32, values: Vec<f64>) -> ModelUpdate {
    ModelUpdate {
        client_id,
        round_index: 0,
        tensors: vec![("w".into(), Tensor::new([values.len()], values).unwrap())],
        sample_count: 1,
    }
}

fn aggregation_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in 1..=10 {
        let v = normal(&mut rng, &[32], 10.0).into_data();
        let ups: Vec<_> = (0..n).map(|i| upd(i, v.clone())).collect();
        let agg = aggregate(&ups, Summation::Compensated).map_err(|e| e.to_string())?;
        ensure(agg[0].1.data() == v.as_slice(), format!("mean of {n} identical models moved"))?;
    }
    let mid = aggregate(&[upd(0, vec![1.0]), upd(1, vec![3.0])], Summation::Compensated).map_err(|e| e.to_string())?;
    ensure(mid[0].1.data() == [2.0], format!("{{1, 3}} averaged to {:?}", mid[0].1.data()))?;

    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..12);
        let mut values: Vec<Vec<f64>> = (0..n).map(|_| normal(&mut rng, &[16], 1.0).into_data()).collect();
        let base = aggregate(
            &values
                .iter()
                .cloned()
                .enumerate()
                .map(|(i, v)| upd(i as u32, v))
                .collect::<Vec<_>>(),
            Summation::Compensated,
        )
        .map_err(|e| e.to_string())?;
        rand::seq::SliceRandom::shuffle(values.as_mut_slice(), &mut rng);
        let perm = aggregate(
            &values.into_iter().enumerate().map(|(i, v)| upd(i as u32, v)).collect::<Vec<_>>(),
            Summation::Compensated,
        )
        .map_err(|e| e.to_string())?;
        worst = worst.max(base[0].1.max_abs_diff(&perm[0].1).unwrap());
    }
    ensure(worst < 1e-12, format!("permutation changed the mean by {worst:e}"))?;
    Ok(format!("identities exact, permutation sensitivity {worst:e}"))
}

fn frozen_bytes(stub: &FoundationStub) -> Vec<u8> {
    encode(&Container {
        round_index: 0,
        client_id: 0,
        tensors: stub.frozen_tensors(),
    })
    .unwrap()
}

fn freeze_contract(data: &Dataset) -> Outcome {
    let cfg = with(desk_config(3), Scope::MultiTask, Variant::LlmFinetune, 10);
    let before = frozen_bytes(&GlobalState::new(&cfg, &[]).map_err(|e| e.to_string())?.stub);
    let r = run_experiment(data, &cfg, None).map_err(|e| e.to_string())?;
    let after = frozen_bytes(&r.state.stub);
    ensure(before == after, "frozen backbone bytes changed")?;
    let steps: usize = r.traces.iter().map(|t| t.injection_losses.len()).sum();
    ensure(steps > 0, "no injection steps ran")?;
    Ok(format!(
        "{} frozen bytes identical after 10 rounds / {steps} injection steps",
        after.len()
    ))
}

fn random_task(rng: &mut ChaCha8Rng, id: u32) -> TaskSpec {
    let words = [
        "is", "the", "patient", "ecg", "abnormal", "will", "sepsis", "occur", "lung", "opacity", "x-ray", "?",
    ];
    let mut modalities: Vec<ModalityKind> = ModalityKind::ALL.iter().copied().filter(|_| rng.random_bool(0.4)).collect();
    if modalities.is_empty() {
        modalities.push(*ModalityKind::ALL.choose(rng).unwrap());
    }
    let prompt: Vec<&str> = (0..rng.random_range(1..12)).map(|_| *words.choose(rng).unwrap()).collect();
    TaskSpec::new(id, format!("t{id}"), modalities, prompt.join(" "), TaskRole::Training).unwrap()
}

fn lora_zero_init() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut stub = FoundationStub::new(&FoundationConfig::default(), 16, 40).map_err(|e| e.to_string())?;
    // Random A, router and alignment; every B stays zero.
    let bs: Vec<_> = stub.experts().iter().flatten().map(|e| e.b).collect();
    let ids: Vec<_> = stub
        .store()
        .iter()
        .filter(|(id, p)| p.trainable && !bs.contains(id))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let shape = stub.store().value(id).shape().to_vec();
        stub.store_mut().set_value(id, normal(&mut rng, &shape, 0.7)).unwrap();
    }
    ensure(
        bs.iter().all(|&b| stub.store().value(b).data().iter().all(|&x| x == 0.0)),
        "B not zero",
    )?;
    let width = stub.config().width();
    for i in 0..100 {
        let task = random_task(&mut rng, i);
        let rows = rng.random_range(1..6);
        let h = normal(&mut rng, &[rows, width], 2.0);
        let mut g = Graph::new();
        let hv = g.constant(h);
        let alpha = stub.route_var(&mut g, &task).map_err(|e| e.to_string())?;
        let with_adapters = stub.lora_moe_forward(&mut g, hv, alpha).map_err(|e| e.to_string())?;
        let bare = stub.frozen_forward(&mut g, hv).map_err(|e| e.to_string())?;
        ensure(g.value(with_adapters).bit_eq(g.value(bare)), format!("input {i} differs"))?;
    }
    Ok("100 random inputs bit-identical".into())
}

fn router_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut stub = FoundationStub::new(&FoundationConfig::default(), 16, 50).map_err(|e| e.to_string())?;
    let router = stub.router().params();
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let sigma = [0.1, 1.0, 5.0][i % 3];
        for &id in &router {
            let shape = stub.store().value(id).shape().to_vec();
            stub.store_mut().set_value(id, normal(&mut rng, &shape, sigma)).unwrap();
        }
        let task = random_task(&mut rng, i as u32);
        let alpha = stub.route(&task).map_err(|e| e.to_string())?.alpha;
        ensure(alpha.iter().all(|&a| a >= 0.0), format!("negative weight in draw {i}"))?;
        worst = worst.max((alpha.iter().sum::<f64>() - 1.0).abs());
    }
    ensure(worst < 1e-9, format!("|Σα − 1| reached {worst:e}"))?;
    stub.zero_router().map_err(|e| e.to_string())?;
    let p = stub.config().experts;
    for i in 0..20 {
        let alpha = stub.route(&random_task(&mut rng, i)).map_err(|e| e.to_string())?.alpha;
        ensure(alpha.iter().all(|&a| a == 1.0 / p as f64), format!("zero router gave {alpha:?}"))?;
    }
    Ok(format!(
        "1000 draws on the simplex (max |Σα − 1| = {worst:e}); zero router exactly 1/{p}"
    ))
}

fn csv_of(result: &medinject::federation::ExperimentResult, data: &Dataset) -> Result<String, String> {
    let mut rows = Vec::new();
    for spec in &result.tasks {
        let task = data.task(spec.task_id).unwrap();
        rows.extend(surface_rows(result, task).map_err(|e| e.to_string())?.into_iter().map(|(_, r)| r));
    }
    // Labels name the algorithm; compare everything else.
    Ok(write_csv(&rows).replace("FedProx", "FedAvg"))
}

fn fedprox_reduction(data: &Dataset) -> Outcome {
    for variant in [Variant::Base, Variant::GlobalFinetune, Variant::LlmFinetune] {
        let cfg = with(desk_config(6), Scope::MultiTask, variant, 3);
        let avg = run_experiment(data, &cfg, None).map_err(|e| e.to_string())?;
        let mut prox_cfg = cfg.clone();
        prox_cfg.federation.algorithm = Algorithm::FedProx;
        prox_cfg.federation.lambda = 0.0;
        let prox = run_experiment(data, &prox_cfg, None).map_err(|e| e.to_string())?;
        ensure(
            encode(&avg.state.checkpoint()).unwrap() == encode(&prox.state.checkpoint()).unwrap(),
            format!("{variant:?} checkpoints differ"),
        )?;
        ensure(
            avg.state.aggregated.params_bit_eq(&prox.state.aggregated),
            format!("{variant:?} aggregates differ"),
        )?;
        ensure(avg.traces == prox.traces, format!("{variant:?} loss traces differ"))?;
        ensure(csv_of(&avg, data)? == csv_of(&prox, data)?, format!("{variant:?} metrics differ"))?;
    }
    Ok("checkpoints, traces and metrics bit-identical for all three variants".into())
}

fn learning_run(data: &Dataset) -> Outcome {
    let start = Instant::now();
    let task = data.task(tasks::MORTALITY).unwrap();
    let scope = Scope::SingleTask(tasks::MORTALITY);
    let base = run_experiment(data, &with(desk_config(7), scope, Variant::Base, 10), None).map_err(|e| e.to_string())?;
    let test = task.part(SplitPart::Test);
    let base_acc = evaluate_model(&base.state.model, task, &test).map_err(|e| e.to_string())?.accuracy;
    let llm = run_experiment(data, &with(desk_config(7), scope, Variant::LlmFinetune, 10), None).map_err(|e| e.to_string())?;
    let f_row = surface_rows(&llm, task).map_err(|e| e.to_string())?.pop().unwrap().1;
    let f_acc = f_row.metrics.ok_or("foundation path not capable")?.accuracy;
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("Base {base_acc:.3}, foundation path {f_acc:.3}, {secs:.1}s");
    ensure(base_acc >= 0.90 && f_acc >= 0.80 && secs < 300.0, detail.clone())?;
    Ok(detail)
}

fn multi_task_mirror(data: &Dataset) -> Outcome {
    let mut compared = 0;
    for variant in [Variant::Base, Variant::GlobalFinetune] {
        let multi = run_experiment(data, &with(desk_config(8), Scope::MultiTask, variant, 10), None).map_err(|e| e.to_string())?;
        for id in [tasks::ECG_ABNORMAL, tasks::MORTALITY] {
            let task = data.task(id).unwrap();
            let single =
                run_experiment(data, &with(desk_config(8), Scope::SingleTask(id), variant, 10), None).map_err(|e| e.to_string())?;
            let s = surface_rows(&single, task).map_err(|e| e.to_string())?;
            let m = surface_rows(&multi, task).map_err(|e| e.to_string())?;
            ensure(
                s[0].1.metrics == m[0].1.metrics,
                format!("{} {variant:?} rows differ", task.spec.name),
            )?;
            let mt = multi.state.model.named_tensors();
            for (name, t) in single.state.model.named_tensors() {
                let other = &mt.iter().find(|(n, _)| *n == name).ok_or(format!("{name} missing in multi"))?.1;
                ensure(t.bit_eq(other), format!("{name} differs under {variant:?}"))?;
            }
            compared += 1;
        }
    }
    Ok(format!("{compared} single/multi row pairs and their parameters bit-identical"))
}

fn zero_shot_rows(data: &Dataset) -> Result<Vec<medinject::eval::MetricsRow>, String> {
    let mut runs = Vec::new();
    for scope in [Scope::SingleTask(tasks::MORTALITY), Scope::MultiTask] {
        for algorithm in [Algorithm::FedAvg, Algorithm::FedProx] {
            let mut cfg = with(desk_config(9), scope, Variant::LlmFinetune, 10);
            cfg.federation.algorithm = algorithm;
            let result = run_experiment(data, &cfg, None).map_err(|e| e.to_string())?;
            runs.push(MatrixRun {
                algorithm,
                scope,
                variant: Variant::LlmFinetune,
                result,
            });
        }
    }
    let matrix = BenchmarkMatrix { rows: Vec::new(), runs };
    let sources = zero_shot_sources(data, &matrix, &EvalConfig::default()).map_err(|e| e.to_string())?;
    let stub = GlobalState::new(&desk_config(9), &[]).map_err(|e| e.to_string())?.stub;
    run_zero_shot(data, &stub, &sources).map_err(|e| e.to_string())
}

fn zero_shot(data: &Dataset) -> Outcome {
    let rows = zero_shot_rows(data)?;
    let sepsis: Vec<_> = rows.iter().filter(|r| r.task == "sepsis" && r.config != STUB_LABEL).collect();
    ensure(sepsis.len() == 4, format!("{} sepsis rows", sepsis.len()))?;
    let worst = sepsis
        .iter()
        .map(|r| r.metrics.map_or(0.0, |m| m.accuracy))
        .fold(f64::INFINITY, f64::min);
    ensure(worst > 0.55, format!("twin accuracy {worst:.3}"))?;
    let crosses: Vec<_> = rows
        .iter()
        .filter(|r| !r.capable())
        .map(|r| format!("{}/{}", r.config, r.task))
        .collect();
    ensure(
        crosses.iter().any(|c| c.starts_with("FedAvg_s^F/enlarged_cardiomediastinum")),
        "no capability cross for the untrained image task",
    )?;
    Ok(format!("twin accuracy ≥ {worst:.3}; ✗ rows: {}", crosses.join(", ")))
}

fn wire_fuzz() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut clean, mut rejected) = (0, 0);
    for i in 0..10_000 {
        let count = rng.random_range(0..5);
        let tensors = (0..count)
            .map(|k| {
                let rank = rng.random_range(0..3);
                let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..5)).collect();
                let n = shape.iter().product();
                let data = (0..n).map(|_| f64::from_bits(rng.random())).collect();
                (format!("p{k}.{}", rng.random_range(0..1000)), Tensor::new(shape, data).unwrap())
            })
            .collect();
        let c = Container {
            round_index: rng.random(),
            client_id: rng.random(),
            tensors,
        };
        let bytes = encode(&c).map_err(|e| e.to_string())?;
        let back = decode(&bytes).map_err(|e| format!("clean decode {i}: {e}"))?;
        ensure(back.bit_eq(&c), format!("roundtrip {i} not bit-exact"))?;
        clean += 1;

        let mut bad = bytes.clone();
        match rng.random_range(0..3) {
            0 => bad.truncate(rng.random_range(0..bytes.len())),
            1 => {
                let pos = rng.random_range(0..bad.len());
                bad[pos] ^= 1 << rng.random_range(0..8);
            }
            _ => {
                let pos = rng.random_range(0..bad.len());
                bad[pos] ^= 1 << rng.random_range(0..8);
                bad.truncate(rng.random_range(0..bytes.len()));
            }
        }
        let verdict = catch_unwind(|| decode(&bad)).map_err(|_| format!("decoder panicked on case {i}"))?;
        ensure(verdict.is_err(), format!("corruption {i} accepted"))?;
        rejected += 1;
    }
    Ok(format!("{clean} clean roundtrips exact, {rejected} corruptions rejected"))
}

fn matrix_schema(data: &Dataset) -> Outcome {
    let cfg: ExperimentConfig = desk_config(11);
    let first = run_benchmark_matrix(data, &cfg).map_err(|e| e.to_string())?;
    let second = run_benchmark_matrix(data, &cfg).map_err(|e| e.to_string())?;
    for task in &data.training {
        let n = first.rows.iter().filter(|r| r.task == task.spec.name).count();
        ensure(n == 16, format!("{} has {n} rows", task.spec.name))?;
    }
    ensure(write_csv(&first.rows) == write_csv(&second.rows), "CSV bytes differ between reruns")?;
    Ok(format!("{} rows, 16 per task, identical bytes on rerun", first.rows.len()))
}

fn main() {
    let data = dataset(600, 5, 0);
    let criteria: Vec<Criterion> = vec![
        ("gradient suite", Box::new(gradient_suite)),
        ("aggregation identities", Box::new(aggregation_identities)),
        ("freeze contract", Box::new(|| freeze_contract(&data))),
        ("LoRA zero-init equivalence", Box::new(lora_zero_init)),
        ("router contract", Box::new(router_contract)),
        ("FedProx reduction", Box::new(|| fedprox_reduction(&data))),
        ("learning run", Box::new(|| learning_run(&data))),
        ("multi-task mirror", Box::new(|| multi_task_mirror(&data))),
        ("zero-shot", Box::new(|| zero_shot(&data))),
        ("wire fuzz", Box::new(wire_fuzz)),
        ("matrix schema", Box::new(|| matrix_schema(&data))),
    ];
    let mut failures = 0;
    for (name, check) in &criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failures += 1;
                println!("FAIL {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    println!("{} of {} acceptance criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
