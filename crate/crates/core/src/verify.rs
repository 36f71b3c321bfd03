//! Self-check suite behind the `verify` command: finite-difference gradient
//! checks of every layer and of the full client and injection passes, plus
//! the numerical contracts of aggregation, routing, adapters and the codec.

use std::time::Instant;

use rand::Rng as _;

use crate::autodiff::{Graph, Var};
use crate::client::{fedprox_penalty, local_loss, ClientModel, Encoder, ModelConfig};
use crate::datagen::partition;
use crate::error::Result;
use crate::federation::{aggregate, deserialize_update, serialize_update, ModelUpdate, Summation};
use crate::foundation::{injection_loss, FoundationConfig, FoundationStub, InjectedModel, RouterVariant};
use crate::gradcheck::{grad_check, GradCheckOptions};
use crate::modality::{FeatureLayout, ModalityKind, Sample, TaskBatch, TaskRole, TaskSpec};
use crate::nn::{Conv, Init, Linear, MapShape, Mlp};
use crate::param::ParamStore;
use crate::rng::{rng_for, Rng};
use crate::tensor::Tensor;

pub const SMOOTH_TOLERANCE: f64 = 1e-4;
pub const NONSMOOTH_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct VerifyReport {
    pub checks: Vec<CheckOutcome>,
    pub seconds: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seeds: u64,
    pub fuzz_iterations: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seeds: 20,
            fuzz_iterations: 2000,
        }
    }
}

/// Compact geometry so the whole suite stays fast.
pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        encoder_dim: 4,
        decoder_hidden: 6,
        conv_channels: [2, 3],
        tabular_hidden: 5,
        layout: FeatureLayout {
            image_side: 5,
            signal_len: 12,
            signal_leads: 2,
            window_steps: 3,
            window_features: 2,
        },
    }
}

pub fn small_foundation_config() -> FoundationConfig {
    FoundationConfig {
        vocab_size: 64,
        embed_dim: 4,
        blocks: 2,
        block_hidden: 6,
        rank: 2,
        experts: 3,
        router_hidden: 5,
        ..Default::default()
    }
}

pub fn small_tasks() -> Vec<TaskSpec> {
    use ModalityKind::*;
    vec![
        TaskSpec::new(1, "img", vec![Image], "is there an opacity?", TaskRole::Training).expect("valid"),
        TaskSpec::new(2, "ecg", vec![Signal], "is the given ecg abnormal?", TaskRole::Training).expect("valid"),
        TaskSpec::new(3, "tab", vec![VitalSign, LabResult], "will this patient die?", TaskRole::Training).expect("valid"),
    ]
}

fn normal(rng: &mut Rng, shape: [usize; 2]) -> Tensor {
    Init::Normal(1.0).sample(shape, 1, rng)
}

pub fn random_batch(task: &TaskSpec, layout: &FeatureLayout, n: usize, rng: &mut Rng) -> TaskBatch {
    let samples: Vec<Sample> = (0..n)
        .map(|i| Sample {
            id: i as u64,
            label: rng.random_range(0..task.num_classes),
            features: task
                .modalities
                .iter()
                .map(|&m| (m, normal(rng, [1, layout.feature_len(m)]).into_data()))
                .collect(),
        })
        .collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    TaskBatch::from_samples(task, &refs).expect("consistent features")
}

/// `Σ y ⊙ R` for a fixed random `R`, so every output element matters.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let (r, c) = match shape.as_slice() {
        [] => (1, 1),
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => unreachable!("rank ≤ 2"),
    };
    let w = Init::Normal(1.0).sample::<f64>([r, c], 1, &mut rng_for(seed, &[77]));
    let w = g.constant(w.reshape(shape)?);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type LayerCase = (&'static str, bool, fn(u64) -> Result<f64>);

fn check<M: crate::gradcheck::ParamSet>(model: &mut M, seed: u64, f: impl Fn(&mut Graph, &M) -> Result<Var>) -> Result<f64> {
    let opts = GradCheckOptions {
        seed,
        ..Default::default()
    };
    Ok(grad_check(model, f, &opts)?.max_rel_error)
}

fn param_store(seed: u64, shapes: &[[usize; 2]]) -> Result<(ParamStore, Vec<crate::param::ParamId>)> {
    let mut rng = rng_for(seed, &[1]);
    let mut store = ParamStore::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, &s)| store.add(format!("p{i}"), normal(&mut rng, s), true))
        .collect::<Result<_>>()?;
    Ok((store, ids))
}

fn layer_cases() -> Vec<LayerCase> {
    vec![
        ("matmul", true, |seed| {
            let (mut s, ids) = param_store(seed, &[[3, 4], [4, 2]])?;
            check(&mut s, seed, |g, s| {
                let (a, b) = (g.param(s, ids[0]), g.param(s, ids[1]));
                let y = g.matmul(a, b)?;
                weighted_sum(g, y, seed)
            })
        }),
        ("linear", true, |seed| {
            let mut rng = rng_for(seed, &[2]);
            let mut s = ParamStore::new();
            let lin = Linear::new(&mut s, "lin", 4, 3, true, Init::Lecun, true, &mut rng)?;
            let x = normal(&mut rng, [5, 4]);
            check(&mut s, seed, |g, s| {
                let x = g.constant(x.clone());
                let y = lin.forward(g, s, x)?;
                weighted_sum(g, y, seed)
            })
        }),
        ("elementwise", true, |seed| {
            let (mut s, ids) = param_store(seed, &[[3, 4], [3, 4], [1, 4]])?;
            check(&mut s, seed, |g, s| {
                let (a, b, r) = (g.param(s, ids[0]), g.param(s, ids[1]), g.param(s, ids[2]));
                let m = g.mul(a, b)?;
                let d = g.sub(m, a)?;
                let e = g.add_row(d, r)?;
                let e = g.scale(e, 0.7);
                weighted_sum(g, e, seed)
            })
        }),
        ("softmax_rows", true, |seed| {
            let (mut s, ids) = param_store(seed, &[[3, 5]])?;
            check(&mut s, seed, |g, s| {
                let x = g.param(s, ids[0]);
                let y = g.softmax_rows(x)?;
                weighted_sum(g, y, seed)
            })
        }),
        ("cross_entropy", true, |seed| {
            let (mut s, ids) = param_store(seed, &[[6, 3]])?;
            let labels: Vec<usize> = (0..6).map(|i| (i + seed as usize) % 3).collect();
            check(&mut s, seed, |g, s| {
                let x = g.param(s, ids[0]);
                g.cross_entropy(x, &labels)
            })
        }),
        ("pooling", true, |seed| {
            let (mut s, ids) = param_store(seed, &[[6, 2]])?;
            check(&mut s, seed, |g, s| {
                let x = g.param(s, ids[0]);
                let a = g.segment_mean(x, 3)?;
                let b = g.mean_rows(x)?;
                let c = g.concat_rows(&[a, b])?;
                weighted_sum(g, c, seed)
            })
        }),
        ("reshape_transpose_concat", true, |seed| {
            let (mut s, ids) = param_store(seed, &[[2, 6], [3, 2]])?;
            check(&mut s, seed, |g, s| {
                let a = g.param(s, ids[0]);
                let b = g.param(s, ids[1]);
                let a = g.reshape(a, [4, 3])?;
                let a = g.transpose(a)?;
                let y = g.concat_cols(&[a, b])?;
                weighted_sum(g, y, seed)
            })
        }),
        ("gather_scale_by", true, |seed| {
            let (mut s, ids) = param_store(seed, &[[3, 3], [1, 3]])?;
            check(&mut s, seed, |g, s| {
                let x = g.param(s, ids[0]);
                let w = g.param(s, ids[1]);
                let y = g.gather(x, vec![Some(0), None, Some(4), Some(8), Some(4), Some(2)], [2, 3])?;
                let y = g.scale_by(y, w, 1)?;
                weighted_sum(g, y, seed)
            })
        }),
        ("conv", true, |seed| {
            let mut rng = rng_for(seed, &[3]);
            let mut s = ParamStore::new();
            let input = MapShape {
                height: 4,
                width: 5,
                channels: 2,
            };
            let conv = Conv::new(&mut s, "conv", input, 3, (2, 3), 1 + seed as usize % 2, &mut rng)?;
            let x = normal(&mut rng, [2 * input.len() / 2, 2]);
            check(&mut s, seed, |g, s| {
                let x = g.constant(x.clone());
                let y = conv.forward(g, s, x, 2)?;
                weighted_sum(g, y, seed)
            })
        }),
        ("relu", false, |seed| {
            let (mut s, ids) = param_store(seed, &[[4, 4]])?;
            check(&mut s, seed, |g, s| {
                let x = g.param(s, ids[0]);
                let y = g.relu(x);
                weighted_sum(g, y, seed)
            })
        }),
        ("mlp", false, |seed| {
            let mut rng = rng_for(seed, &[4]);
            let mut s = ParamStore::new();
            let mlp = Mlp::new(&mut s, "mlp", &[3, 5, 2], &mut rng)?;
            jitter(&mut s, seed)?;
            let x = normal(&mut rng, [4, 3]);
            check(&mut s, seed, |g, s| {
                let x = g.constant(x.clone());
                let y = mlp.forward(g, s, x)?;
                weighted_sum(g, y, seed)
            })
        }),
        ("encoders", false, |seed| {
            let config = small_model_config();
            let mut rng = rng_for(seed, &[5]);
            let mut s = ParamStore::new();
            let encs = ModalityKind::ALL
                .iter()
                .take(3)
                .map(|&m| Encoder::new(&mut s, m, &config, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            jitter(&mut s, seed)?;
            let inputs: Vec<Tensor> = encs
                .iter()
                .map(|e| normal(&mut rng, [3, config.layout.feature_len(e.modality)]))
                .collect();
            check(&mut s, seed, |g, s| {
                let outs = encs
                    .iter()
                    .zip(&inputs)
                    .map(|(e, x)| {
                        let x = g.constant(x.clone());
                        e.forward(g, s, x)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let y = g.concat_cols(&outs)?;
                weighted_sum(g, y, seed)
            })
        }),
        ("client_forward", false, |seed| {
            let config = small_model_config();
            let tasks = small_tasks();
            let mut model = ClientModel::new(&config, &tasks, seed)?;
            jitter(model.store_mut(), seed)?;
            let anchor = ClientModel::new(&config, &tasks, seed + 1000)?;
            let mut rng = rng_for(seed, &[6]);
            let batches: Vec<TaskBatch> = tasks.iter().map(|t| random_batch(t, &config.layout, 4, &mut rng)).collect();
            check(&mut model, seed, |g, m| {
                let pairs: Vec<(&TaskSpec, &TaskBatch)> = tasks.iter().zip(&batches).collect();
                let loss = local_loss(g, m, &pairs)?;
                let prox = fedprox_penalty(g, m, &anchor, 0.3)?;
                g.add(loss, prox)
            })
        }),
        ("router_attention_only", true, |seed| {
            let fc = FoundationConfig {
                router: RouterVariant::AttentionOnly,
                ..small_foundation_config()
            };
            let mut stub = FoundationStub::new(&fc, 4, seed)?;
            randomize_router(&mut stub, seed)?;
            let task = small_tasks().remove(2);
            check(&mut stub, seed, |g, probe| {
                let a = probe.route_var(g, &task)?;
                weighted_sum(g, a, seed)
            })
        }),
        ("router", false, |seed| {
            let mut stub = FoundationStub::new(&small_foundation_config(), 4, seed)?;
            randomize_router(&mut stub, seed)?;
            let task = small_tasks().remove(1);
            check(&mut stub, seed, |g, probe| {
                let a = probe.route_var(g, &task)?;
                weighted_sum(g, a, seed)
            })
        }),
        ("lora_moe", false, |seed| {
            let mut stub = FoundationStub::new(&small_foundation_config(), 4, seed)?;
            randomize_router(&mut stub, seed)?;
            let mut rng = rng_for(seed, &[7]);
            let h = normal(&mut rng, [3, 8]);
            let task = small_tasks().remove(0);
            check(&mut stub, seed, |g, probe| {
                let h = g.constant(h.clone());
                let alpha = probe.route_var(g, &task)?;
                let y = probe.lora_moe_forward(g, h, alpha)?;
                weighted_sum(g, y, seed)
            })
        }),
        ("injection_forward", false, |seed| {
            let config = small_model_config();
            let tasks = small_tasks();
            let mut stub = FoundationStub::new(&small_foundation_config(), config.encoder_dim, seed)?;
            randomize_router(&mut stub, seed)?;
            let mut encoders = ClientModel::new(&config, &tasks, seed)?;
            jitter(encoders.store_mut(), seed)?;
            let mut model = InjectedModel { stub, encoders };
            let mut rng = rng_for(seed, &[8]);
            let batches: Vec<TaskBatch> = tasks.iter().map(|t| random_batch(t, &config.layout, 3, &mut rng)).collect();
            check(&mut model, seed, |g, m| {
                let pairs: Vec<(&TaskSpec, &TaskBatch)> = tasks.iter().zip(&batches).collect();
                injection_loss(g, m, &pairs)
            })
        }),
    ]
}

/// Add small noise to every trainable parameter so that no ReLU input sits
/// exactly on its kink (zero biases plus a dead sample would put it there).
fn jitter(store: &mut ParamStore, seed: u64) -> Result<()> {
    let mut rng = rng_for(seed, &[10]);
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let v = store.value(id);
        let noise = Init::Normal(0.1)
            .sample::<f64>([v.numel(), 1], 1, &mut rng)
            .reshape(v.shape().to_vec())?;
        let t = v.add(&noise)?;
        store.set_value(id, t)?;
    }
    Ok(())
}

/// Give the zero-initialized pieces (expert `B`, last router layer) random
/// values so their gradients are exercised in general position.
fn randomize_router(stub: &mut FoundationStub, seed: u64) -> Result<()> {
    let mut rng = rng_for(seed, &[9]);
    let ids: Vec<_> = stub.store().iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let shape = stub.store().value(id).shape().to_vec();
        let t = Init::Normal(0.5)
            .sample::<f64>([shape.iter().product(), 1], 1, &mut rng)
            .reshape(shape)?;
        stub.store_mut().set_value(id, t)?;
    }
    Ok(())
}

fn gradient_checks(opts: &VerifyOptions) -> Vec<CheckOutcome> {
    layer_cases()
        .into_iter()
        .map(|(name, smooth, case)| {
            let tol = if smooth { SMOOTH_TOLERANCE } else { NONSMOOTH_TOLERANCE };
            let mut worst = 0.0f64;
            let mut failure = None;
            for seed in 0..opts.seeds {
                match case(seed) {
                    Ok(e) => worst = worst.max(e),
                    Err(e) => {
                        failure = Some(format!("seed {seed}: {e}"));
                        break;
                    }
                }
            }
            let passed = failure.is_none() && worst < tol;
            CheckOutcome {
                name: format!("grad/{name}"),
                passed,
                detail: failure.unwrap_or_else(|| format!("max rel error {worst:.2e} < {tol:.0e} over {} seeds", opts.seeds)),
            }
        })
        .collect()
}

fn outcome(name: &str, r: Result<(bool, String)>) -> CheckOutcome {
    let (passed, detail) = r.unwrap_or_else(|e| (false, e.to_string()));
    CheckOutcome {
        name: name.into(),
        passed,
        detail,
    }
}

fn aggregation_check() -> Result<(bool, String)> {
    let config = small_model_config();
    let model = ClientModel::new(&config, &small_tasks(), 3)?;
    let updates: Vec<ModelUpdate> = (0..5)
        .map(|n| ModelUpdate {
            client_id: n,
            round_index: 0,
            tensors: model.named_tensors(),
            sample_count: 1,
        })
        .collect();
    let same = aggregate(&updates, Summation::Compensated)?
        .iter()
        .zip(model.named_tensors())
        .all(|((_, a), (_, b))| a.bit_eq(&b));
    let pair = |v: f64, id| ModelUpdate {
        client_id: id,
        round_index: 0,
        tensors: vec![("w".into(), Tensor::scalar(v))],
        sample_count: 1,
    };
    let two = aggregate(&[pair(1.0, 0), pair(3.0, 1)], Summation::Compensated)?[0].1.item()? == 2.0;

    let mut rng = rng_for(11, &[]);
    let values: Vec<f64> = (0..7).map(|_| rng.random_range(-1e3..1e3)).collect();
    let reference = aggregate(
        &values.iter().enumerate().map(|(i, &v)| pair(v, i as u32)).collect::<Vec<_>>(),
        Summation::Compensated,
    )?[0]
        .1
        .item()?;
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let mut ids: Vec<u32> = (0..7).collect();
        rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), &mut rng);
        let ups: Vec<ModelUpdate> = values.iter().zip(&ids).map(|(&v, &id)| pair(v, id)).collect();
        worst = worst.max((aggregate(&ups, Summation::Compensated)?[0].1.item()? - reference).abs());
    }
    Ok((
        same && two && worst < 1e-12,
        format!("identical bit-exact: {same}, {{1,3}}→2: {two}, permutation spread {worst:.1e}"),
    ))
}

fn lora_check() -> Result<(bool, String)> {
    let stub = FoundationStub::new(&small_foundation_config(), 4, 5)?;
    let tasks = small_tasks();
    let mut rng = rng_for(12, &[]);
    let mut equal = 0;
    for i in 0..100 {
        let mut g = Graph::new();
        let h = g.constant(normal(&mut rng, [2, 8]));
        let alpha = stub.route_var(&mut g, &tasks[i % tasks.len()])?;
        let a = stub.lora_moe_forward(&mut g, h, alpha)?;
        let b = stub.frozen_forward(&mut g, h)?;
        equal += usize::from(g.value(a).bit_eq(g.value(b)));
    }
    Ok((equal == 100, format!("{equal}/100 inputs bit-identical")))
}

fn router_check() -> Result<(bool, String)> {
    let tasks = small_tasks();
    let mut worst = 0.0f64;
    let mut negative = false;
    for i in 0..200u64 {
        let mut stub = FoundationStub::new(&small_foundation_config(), 4, i)?;
        randomize_router(&mut stub, i)?;
        for t in &tasks {
            let a = stub.route(t)?.alpha;
            negative |= a.iter().any(|&x| x < 0.0);
            worst = worst.max((a.iter().sum::<f64>() - 1.0).abs());
        }
    }
    let mut stub = FoundationStub::new(&small_foundation_config(), 4, 0)?;
    stub.zero_router()?;
    let p = stub.config().experts as f64;
    let uniform = tasks
        .iter()
        .all(|t| stub.route(t).map(|r| r.alpha.iter().all(|&a| a == 1.0 / p)).unwrap_or(false));
    Ok((
        !negative && worst < 1e-9 && uniform,
        format!("|Σα−1| ≤ {worst:.1e}, any negative: {negative}, zero router uniform: {uniform}"),
    ))
}

fn wire_check(iterations: usize) -> Result<(bool, String)> {
    let mut rng = rng_for(13, &[]);
    let mut accepted_corrupt = 0;
    let mut roundtrip_fail = 0;
    for _ in 0..iterations {
        let u = random_update(&mut rng);
        let bytes = serialize_update(&u)?;
        match deserialize_update(&bytes) {
            Ok(back) if back.bit_eq(&u) => {}
            _ => roundtrip_fail += 1,
        }
        let mut bad = bytes.clone();
        if rng.random_bool(0.5) {
            bad.truncate(rng.random_range(0..bytes.len()));
        } else {
            let i = rng.random_range(0..bad.len());
            bad[i] ^= 1 << rng.random_range(0..8);
        }
        accepted_corrupt += usize::from(deserialize_update(&bad).is_ok());
    }
    Ok((
        accepted_corrupt == 0 && roundtrip_fail == 0,
        format!("{iterations} iterations: {roundtrip_fail} roundtrip failures, {accepted_corrupt} corruptions accepted"),
    ))
}

/// An update with 0–4 random tensors of rank 0–3.
pub fn random_update(rng: &mut Rng) -> ModelUpdate {
    let count = rng.random_range(0..5);
    let tensors = (0..count)
        .map(|i| {
            let rank = rng.random_range(0..4);
            let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(0..4)).collect();
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| f64::from_bits(rng.random::<u64>() & !(0x7ff << 52) | (rng.random_range(0x3f0..0x410u64) << 52)))
                .collect();
            (
                format!("t{i}.{}", rng.random_range(0..1000)),
                Tensor::new(shape, data).expect("length matches"),
            )
        })
        .collect();
    ModelUpdate {
        client_id: rng.random(),
        round_index: rng.random(),
        tensors,
        sample_count: rng.random_range(0..1 << 20),
    }
}

fn partition_check() -> Result<(bool, String)> {
    let mut rng = rng_for(14, &[]);
    for _ in 0..2000 {
        let n = rng.random_range(4..1_000_000);
        let sizes = partition(n, &[7, 1, 1, 1])?;
        if sizes.iter().sum::<usize>() != n {
            return Ok((false, format!("sizes for {n} sum to {}", sizes.iter().sum::<usize>())));
        }
    }
    Ok((true, "2000 random totals partitioned exactly".into()))
}

/// Run everything; never panics on a failed check.
pub fn run_suite(opts: &VerifyOptions) -> VerifyReport {
    let start = Instant::now();
    let mut checks = gradient_checks(opts);
    checks.push(outcome("aggregation", aggregation_check()));
    checks.push(outcome("lora_zero_init", lora_check()));
    checks.push(outcome("router_simplex", router_check()));
    checks.push(outcome("wire_fuzz", wire_check(opts.fuzz_iterations)));
    checks.push(outcome("partition", partition_check()));
    VerifyReport {
        checks,
        seconds: start.elapsed().as_secs_f64(),
    }
}
