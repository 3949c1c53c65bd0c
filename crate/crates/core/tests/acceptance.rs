//! End-to-end acceptance checks. Each test writes one `criterion N: PASS|FAIL`
//! line straight to stderr so the verdicts survive output capture.
//!
//! Criteria 6 to 9 share one benchmark grid (5 seeds × 4 orderings) that is
//! computed once per process, on first use.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use memloom::adaptation::{self, AdaptConfig};
use memloom::autodiff::{ParameterVector, Tape, Tensor, Var};
use memloom::eval;
use memloom::experiment::{self, PolicyKind, RunConfig};
use memloom::learners::{self, EvalMode, Item, Learner, LearnerConfig, Variant};
use memloom::memory::{EpisodicMemory, MemoryEntry, MemoryWriter, WritePolicy, WriteSignals};
use memloom::models::{Architecture, Batch, KeyNetwork, PredictorParams};
use memloom::seeds;
use memloom::taskgen::{Example, ORDERINGS};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const FIRST_ORDER_TOL: f64 = 1e-4;
const SECOND_ORDER_TOL: f64 = 1e-3;
const TRIALS: usize = 100;
const FD_STEP: f64 = 1e-5;

fn verdict(n: u32, pass: bool, detail: String) {
    let line = format!("criterion {n}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} failed: {detail}");
}

fn progress(msg: String) {
    let _ = std::io::stderr().write_all(format!("  .. {msg}\n").as_bytes());
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-8)`.
fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-8)
}

/// Central differences of `f` around the flat point `x`.
fn central_diff(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + FD_STEP;
            let up = f(&probe);
            probe[i] = x[i] - FD_STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

type OpFn = for<'t> fn(&'t Tape, &[Var<'t>]) -> Var<'t>;

/// Scalarizes `op` with a fixed random weighting and compares its tape
/// gradient with central differences of the forward value.
fn op_error(inputs: &[Tensor], op: OpFn, rng: &mut ChaCha8Rng) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = op(&tape, &vars);
    let weights = if out.value().len() == 1 {
        None
    } else {
        Some(random_tensor(rng, out.value().shape(), 1.0))
    };
    let scalarize = |v: Var| -> f64 {
        match &weights {
            Some(w) => v.value().data().iter().zip(w.data()).map(|(a, b)| a * b).sum(),
            None => v.value().item(),
        }
    };
    let loss = match &weights {
        Some(w) => out.mul(tape.constant(w.clone())).unwrap().sum().unwrap(),
        None => out,
    };
    let grads = tape.grad(loss, &vars, false).unwrap();

    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.value().data().to_vec()).collect();
    let numeric = central_diff(&flat, |p| {
        let tape = Tape::new();
        let mut offset = 0;
        let vars: Vec<Var> = shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let t = Tensor::new(s.clone(), p[offset..offset + n].to_vec()).unwrap();
                offset += n;
                tape.leaf(t)
            })
            .collect();
        scalarize(op(&tape, &vars))
    });
    rel_error(&analytic, &numeric)
}

/// Values bounded away from zero so relu has no kink inside the stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Each op with the operands it reads: `a` 3×4, `b` 4×2, `c` 3×4, `r` 1×4, `s` scalar.
fn elementary_ops() -> Vec<(&'static str, &'static str, OpFn)> {
    vec![
        ("matmul", "ab", |_, v| v[0].matmul(v[1]).unwrap()),
        ("transpose", "a", |_, v| v[0].transpose().unwrap()),
        ("add", "ac", |_, v| v[0].add(v[1]).unwrap()),
        ("sub", "ac", |_, v| v[0].sub(v[1]).unwrap()),
        ("mul", "ac", |_, v| v[0].mul(v[1]).unwrap()),
        ("add_row", "ar", |_, v| v[0].add_row(v[1]).unwrap()),
        ("scale", "a", |_, v| v[0].scale(-1.7).unwrap()),
        ("mul_scalar", "as", |_, v| v[0].mul_scalar(v[1]).unwrap()),
        ("tanh", "a", |_, v| v[0].tanh().unwrap()),
        ("relu", "a", |_, v| v[0].relu().unwrap()),
        ("exp", "a", |_, v| v[0].exp().unwrap()),
        ("log_softmax", "a", |_, v| v[0].log_softmax().unwrap()),
        ("nll", "a", |_, v| v[0].log_softmax().unwrap().nll(&[2, 0, 3]).unwrap()),
        ("sum", "a", |_, v| v[0].sum().unwrap()),
        ("sq_norm", "a", |_, v| v[0].sq_norm().unwrap()),
    ]
}

fn adapt_arch() -> Architecture {
    Architecture {
        input_dim: 4,
        hidden_dim: 5,
        num_classes: 3,
    }
}

fn random_batch(rng: &mut ChaCha8Rng, rows: usize, arch: Architecture) -> Batch {
    let xs: Vec<Vec<f64>> = (0..rows)
        .map(|_| (0..arch.input_dim).map(|_| rng.gen_range(-1.5..1.5)).collect())
        .collect();
    let ys: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..arch.num_classes)).collect();
    Batch::new(&xs, &ys, arch.input_dim).unwrap()
}

fn perturbed(rng: &mut ChaCha8Rng, p: &ParameterVector, scale: f64) -> ParameterVector {
    let flat: Vec<f64> = p.flatten().iter().map(|v| v + rng.gen_range(-scale..scale)).collect();
    p.unflatten_like(&flat).unwrap()
}

/// Adaptation objective: tape gradient and hand gradient against
/// differences of the hand-computed value.
fn adaptation_objective_error(rng: &mut ChaCha8Rng) -> f64 {
    let arch = adapt_arch();
    let anchor = PredictorParams::xavier(arch, rng.gen()).params;
    let adapted = perturbed(rng, &anchor, 0.3);
    let batch = random_batch(rng, 6, arch);
    let lambda = rng.gen_range(0.001..0.5);

    let tape = Tape::new();
    let a_vars: Vec<Var> = adapted.tensors().iter().map(|t| tape.leaf(t.clone())).collect();
    let anchor_vars: Vec<Var> = anchor.tensors().iter().map(|t| tape.constant(t.clone())).collect();
    let loss = adaptation::adaptation_loss_on_tape(&tape, &a_vars, &anchor_vars, &batch, lambda).unwrap();
    let taped: Vec<f64> = tape
        .grad(loss, &a_vars, false)
        .unwrap()
        .iter()
        .flat_map(|g| g.value().data().to_vec())
        .collect();
    let (_, hand) = adaptation::adaptation_gradient(&adapted, &anchor, &batch, lambda).unwrap();

    let numeric = central_diff(&adapted.flatten(), |p| {
        let p = adapted.unflatten_like(p).unwrap();
        let nll: f64 = (0..batch.len())
            .map(|i| {
                let params = PredictorParams { arch, params: p.clone() };
                params.task_loss(batch.x.row(i), batch.y[i]).unwrap()
            })
            .sum::<f64>()
            / batch.len() as f64;
        let prox: f64 = p.flatten().iter().zip(anchor.flatten()).map(|(a, b)| (a - b) * (a - b)).sum();
        nll + lambda * prox
    });
    rel_error(&taped, &numeric).max(rel_error(&hand.flatten(), &numeric))
}

/// Second-order outer gradient of the meta loss against differences of an
/// independently evaluated one-step-adapted loss.
fn meta_gradient_error(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let arch = adapt_arch();
    assert!(arch.num_params() <= 200);
    let theta = PredictorParams::xavier(arch, rng.gen());
    let theta = PredictorParams {
        arch,
        params: perturbed(rng, &theta.params, 0.2),
    };
    let cfg = LearnerConfig {
        inner_lr: rng.gen_range(0.2..0.8),
        inner_steps: 1,
        adapt: AdaptConfig {
            lambda: 0.001,
            ..AdaptConfig::default()
        },
        ..LearnerConfig::default()
    };
    let inputs: Vec<(Vec<f64>, usize, Option<Batch>)> = (0..3)
        .map(|i| {
            let x: Vec<f64> = (0..arch.input_dim).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let nb = if i == 2 { None } else { Some(random_batch(rng, 4, arch)) };
            (x, rng.gen_range(0..arch.num_classes), nb)
        })
        .collect();
    let items: Vec<Item> = inputs
        .iter()
        .map(|(x, y, nb)| Item {
            x,
            y: *y,
            neighbors: nb.clone(),
        })
        .collect();
    let (_, analytic) = learners::outer_gradient(&theta, &items, &cfg).unwrap();
    let first_order = LearnerConfig {
        first_order: true,
        ..cfg.clone()
    };
    let (_, fo) = learners::outer_gradient(&theta, &items, &first_order).unwrap();

    let numeric = central_diff(&theta.params.flatten(), |p| {
        let p = theta.params.unflatten_like(p).unwrap();
        inputs
            .iter()
            .map(|(x, y, nb)| {
                let scored = match nb {
                    Some(nb) => {
                        let (_, g) = adaptation::adaptation_gradient(&p, &p, nb, cfg.adapt.lambda).unwrap();
                        let stepped: Vec<f64> = p.flatten().iter().zip(g.flatten()).map(|(a, b)| a - cfg.inner_lr * b).collect();
                        p.unflatten_like(&stepped).unwrap()
                    }
                    None => p.clone(),
                };
                PredictorParams { arch, params: scored }.task_loss(x, *y).unwrap()
            })
            .sum::<f64>()
            / inputs.len() as f64
    });
    (rel_error(&analytic.flatten(), &numeric), rel_error(&fo.flatten(), &numeric))
}

#[test]
fn criterion_01_autodiff_matches_finite_differences() {
    let started = Instant::now();
    let mut rng = seeds::rng(1, "acceptance/autodiff");
    let ops = elementary_ops();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for _ in 0..TRIALS {
        let a = away_from_zero(&mut rng, &[3, 4]);
        let b = random_tensor(&mut rng, &[4, 2], 1.0);
        let c = random_tensor(&mut rng, &[3, 4], 1.0);
        let r = random_tensor(&mut rng, &[1, 4], 1.0);
        let s = Tensor::scalar(rng.gen_range(-2.0..2.0));
        for (name, operands, op) in &ops {
            let inputs: Vec<Tensor> = operands
                .chars()
                .map(|o| match o {
                    'a' => a.clone(),
                    'b' => b.clone(),
                    'c' => c.clone(),
                    'r' => r.clone(),
                    _ => s.clone(),
                })
                .collect();
            let e = op_error(&inputs, *op, &mut rng);
            let w = worst.entry(name).or_insert(0.0);
            *w = w.max(e);
        }
        let e = adaptation_objective_error(&mut rng);
        let w = worst.entry("adaptation objective").or_insert(0.0);
        *w = w.max(e);
    }
    let first_order_worst = worst.values().cloned().fold(0.0, f64::max);
    let mut meta_worst = 0.0f64;
    let mut fo_gap = 0.0f64;
    for _ in 0..TRIALS {
        let (second, first) = meta_gradient_error(&mut rng);
        meta_worst = meta_worst.max(second);
        fo_gap = fo_gap.max(first);
    }
    let seconds = started.elapsed().as_secs_f64();
    for (name, e) in &worst {
        progress(format!("{name}: max relative error {e:.2e}"));
    }
    progress(format!("first-order approximation differs by up to {fo_gap:.2e}"));
    verdict(
        1,
        first_order_worst <= FIRST_ORDER_TOL && meta_worst <= SECOND_ORDER_TOL && seconds < 60.0,
        format!(
            "first-order max rel err {first_order_worst:.2e} (<= {FIRST_ORDER_TOL:e}), second-order meta gradient {meta_worst:.2e} (<= {SECOND_ORDER_TOL:e}), {seconds:.1}s"
        ),
    );
}

#[test]
fn criterion_02_knn_matches_full_scan() {
    let started = Instant::now();
    let mut rng = seeds::rng(2, "acceptance/knn");
    let dim = 32;
    let mut mem = EpisodicMemory::new();
    for step in 0..5000u64 {
        let key: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        mem.push(MemoryEntry::new(key, vec![step as f64], (step % 4) as usize, step));
    }
    let mut mismatches = 0;
    for _ in 0..1000 {
        let query: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k = rng.gen_range(1..=64);
        let mut scan: Vec<(f64, usize)> = mem
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| (e.key.iter().zip(&query).map(|(a, b)| (a - b) * (a - b)).sum(), i))
            .collect();
        scan.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let expected: Vec<usize> = scan.iter().take(k).map(|p| p.1).collect();
        let got = mem.knn_indices(&query, k);
        let entries: Vec<u64> = mem.knn(&query, k).iter().map(|e| e.step).collect();
        let expected_steps: Vec<u64> = expected.iter().map(|&i| i as u64).collect();
        if got != expected || entries != expected_steps {
            mismatches += 1;
        }
    }
    let seconds = started.elapsed().as_secs_f64();
    verdict(
        2,
        mismatches == 0 && seconds < 30.0,
        format!("{mismatches} of 1000 queries differ from the full scan over 5000 entries, {seconds:.1}s"),
    );
}

#[test]
fn criterion_03_write_rates_are_calibrated() {
    let started = Instant::now();
    let total = 100_000u64;
    let warmup = total / 10;
    let rate = 0.01;
    let mut rng = seeds::rng(3, "acceptance/rates");
    let key = [0.0];

    let run = |policy: WritePolicy, rng: &mut ChaCha8Rng, signal: &mut dyn FnMut(&mut ChaCha8Rng) -> WriteSignals| {
        let mut writer = MemoryWriter::new(policy);
        let mut mem = EpisodicMemory::new();
        let mut at_warmup = 0;
        for step in 0..total {
            if step == warmup {
                at_warmup = mem.len();
            }
            writer.observe_stream_example();
            let s = signal(rng);
            writer.maybe_write(&mut mem, MemoryEntry::new(key.to_vec(), key.to_vec(), 0, step), s, rng);
        }
        (mem.len(), (mem.len() - at_warmup) as f64 / (total - warmup) as f64)
    };

    let (random_writes, _) = run(WritePolicy::Random { rate }, &mut rng, &mut |_| WriteSignals::default());
    let mean = rate * total as f64;
    let sigma = (total as f64 * rate * (1.0 - rate)).sqrt();
    let random_ok = (random_writes as f64 - mean).abs() <= 3.0 * sigma;

    let (_, uncertainty_rate) = run(WritePolicy::Uncertainty { target_rate: rate }, &mut rng, &mut |r| WriteSignals {
        confidence: r.gen::<f64>().powi(2),
        forget_events: 0,
    });
    let (_, forgettable_rate) = run(
        WritePolicy::Forgettable {
            target_rate: rate,
            recheck_period: 1000,
        },
        &mut rng,
        &mut |r| WriteSignals {
            confidence: 0.5,
            forget_events: u32::from(r.gen_bool(0.05)),
        },
    );
    let within = |r: f64| (r - rate).abs() <= 0.25 * rate;
    let seconds = started.elapsed().as_secs_f64();
    verdict(
        3,
        random_ok && within(uncertainty_rate) && within(forgettable_rate) && seconds < 60.0,
        format!(
            "random wrote {random_writes} (bounds {:.0}..{:.0}); after warm-up uncertainty {:.4}, forgettable {:.4} vs target {rate} ±25%, {seconds:.1}s",
            mean - 3.0 * sigma,
            mean + 3.0 * sigma,
            uncertainty_rate,
            forgettable_rate
        ),
    );
}

fn synthetic_examples(n: usize, dim: usize, seed: u64) -> Vec<Example> {
    let mut rng = seeds::rng(seed, "acceptance/examples");
    (0..n)
        .map(|_| {
            let y = rng.gen_range(0..4);
            let x = (0..dim).map(|j| rng.gen_range(-1.0..1.0) + if j % 4 == y { 1.0 } else { 0.0 }).collect();
            Example::new(x, y, "synthetic")
        })
        .collect()
}

fn small_learner(variant: Variant, policy: WritePolicy, tweak: impl FnOnce(&mut LearnerConfig)) -> Learner {
    let arch = Architecture {
        input_dim: 8,
        hidden_dim: 8,
        num_classes: 4,
    };
    let mut cfg = LearnerConfig {
        variant,
        policy,
        ..LearnerConfig::default()
    };
    tweak(&mut cfg);
    Learner::new(cfg, KeyNetwork::new(8, 8, 11, false), PredictorParams::xavier(arch, 5), 1000).unwrap()
}

#[test]
fn criterion_04_replay_schedule_is_exact() {
    let stream = synthetic_examples(25_000, 8, 4);
    let mut events = Vec::new();
    for variant in [Variant::Replay, Variant::MetaMbpa] {
        let mut learner = small_learner(variant, WritePolicy::Random { rate: 0.01 }, |c| {
            c.replay_every = 10_000;
            c.replay_batch = 100;
            c.adapt.neighbors = 4;
        });
        learner.train_examples(&stream).unwrap();
        learner.flush().unwrap();
        events.push((variant, learner.log().replay_events.clone()));
    }
    let pass = events.iter().all(|(_, e)| e == &[10_000, 20_000]);
    let detail = events
        .iter()
        .map(|(v, e)| format!("{v} replays at {e:?}"))
        .collect::<Vec<_>>()
        .join("; ");
    verdict(4, pass, format!("T=25000, n_tr=10000: {detail}"));
}

fn bits(p: &PredictorParams) -> Vec<u64> {
    p.params.flatten().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn criterion_05_identity_reductions() {
    // zero inner rate: the meta update is the plain update
    let warm = synthetic_examples(400, 8, 5);
    let make = || {
        let mut l = small_learner(Variant::MetaMbpa, WritePolicy::Random { rate: 0.2 }, |c| {
            c.inner_lr = 0.0;
            c.adapt.neighbors = 4;
            c.replay_every = 150;
        });
        l.train_examples(&warm).unwrap();
        l
    };
    let (mut meta, mut plain) = (make(), make());
    assert!(!meta.state().memory.is_empty());
    let batch = synthetic_examples(16, 8, 55);
    let xs: Vec<&[f64]> = batch.iter().map(|e| e.x.as_slice()).collect();
    let ys: Vec<usize> = batch.iter().map(|e| e.y).collect();
    meta.meta_task_update(&xs, &ys).unwrap();
    plain.task_update(&xs, &ys).unwrap();
    let alpha_ok = bits(&meta.state().theta) == bits(&plain.state().theta);

    // zero adaptation steps: both modes return theta untouched
    let theta = meta.state().theta.clone();
    let cfg = AdaptConfig {
        steps: 0,
        ..AdaptConfig::default()
    };
    let nb = adaptation::batch_from_memory(&meta.state().memory, &[0, 1], 8).unwrap();
    let local = adaptation::local_adapt(&theta, &nb, &cfg).unwrap();
    let coarse = adaptation::coarse_adapt(&theta, &meta.state().memory, &cfg, &mut seeds::rng(0, "c5")).unwrap();
    let steps_ok = bits(&local) == bits(&theta) && bits(&coarse) == bits(&theta);

    // empty memory: Meta-MbPA trains and predicts exactly like Enc-Dec
    let mut base = RunConfig::default();
    base.suite.n_train = 300;
    base.suite.n_test = 60;
    base.seed = 17;
    base.policy.memory_rate = 0.0;
    base.policy.kind = Some(PolicyKind::Random);
    base.training.n_tr = 100;
    let data = experiment::generate(&base).unwrap();
    let run = |variant: Variant| {
        let mut cfg = base.clone();
        cfg.training.variant = variant;
        let trained = experiment::train(&cfg, &data.stream).unwrap();
        let report = experiment::evaluate_trained(&trained, &data.tests, cfg.eval_mode()).unwrap();
        (bits(&trained.state.theta), trained.state.memory.len(), report.per_task)
    };
    let meta_run = run(Variant::MetaMbpa);
    let enc_run = run(Variant::EncDec);
    let empty_ok = meta_run.1 == 0 && meta_run.0 == enc_run.0 && meta_run.2 == enc_run.2;

    verdict(
        5,
        alpha_ok && steps_ok && empty_ok,
        format!("inner rate 0 bitwise: {alpha_ok}; L=0 identity: {steps_ok}; empty memory equals Enc-Dec: {empty_ok}"),
    );
}

#[derive(Clone, Copy, Debug, Default)]
struct Cell {
    macro_average: f64,
    first_task: f64,
    last_task: f64,
    diagonal: f64,
    seconds: f64,
}

/// Mean scores per `(system, policy)` over every seed and ordering.
struct Grid {
    cells: BTreeMap<(&'static str, PolicyKind), Cell>,
    runs: usize,
}

impl Grid {
    fn get(&self, system: &'static str, policy: PolicyKind) -> Cell {
        self.cells[&(system, policy)]
    }
}

const POLICIES: [PolicyKind; 4] = [
    PolicyKind::Random,
    PolicyKind::Diversity,
    PolicyKind::Uncertainty,
    PolicyKind::Forgettable,
];

fn grid() -> &'static Grid {
    static GRID: OnceLock<Grid> = OnceLock::new();
    GRID.get_or_init(|| {
        let combos: Vec<(u64, &str)> = (0..5u64).flat_map(|s| ORDERINGS.iter().map(move |o| (s, *o))).collect();
        let started = Instant::now();
        let results = experiment::parallel_map(&combos, experiment::thread_budget(), |&(seed, ordering)| {
            let mut base = RunConfig::default();
            base.seed = seed;
            base.ordering = ordering.to_string();
            base.analysis.neighbor_matrix = true;
            let data = experiment::generate(&base).unwrap();
            let mut out: Vec<((&'static str, PolicyKind), Cell)> = Vec::new();
            let mut cell = |policy, variant: Variant, modes: &[(&'static str, EvalMode)]| {
                let mut cfg = base.clone();
                cfg.training.variant = variant;
                cfg.policy.kind = Some(policy);
                let t = Instant::now();
                let trained = experiment::train(&cfg, &data.stream).unwrap();
                let train_seconds = t.elapsed().as_secs_f64();
                for &(name, mode) in modes {
                    let t = Instant::now();
                    let r = experiment::evaluate_trained(&trained, &data.tests, mode).unwrap();
                    out.push((
                        (name, policy),
                        Cell {
                            macro_average: r.macro_average,
                            first_task: r.first_task_final,
                            last_task: r.last_task_score,
                            diagonal: r.neighbor_matrix.and_then(|m| m.mean_diagonal()).unwrap_or(f64::NAN),
                            seconds: train_seconds + t.elapsed().as_secs_f64(),
                        },
                    ));
                }
            };
            cell(PolicyKind::Random, Variant::EncDec, &[("enc-dec", EvalMode::Direct)]);
            cell(PolicyKind::Random, Variant::Mtl, &[("mtl", EvalMode::Direct)]);
            for policy in POLICIES {
                // Replay and MbPA++ share training; they differ only at test time
                cell(
                    policy,
                    Variant::Replay,
                    &[("replay", EvalMode::Direct), ("mbpa++", EvalMode::PerExample)],
                );
                cell(policy, Variant::MetaMbpa, &[("meta-mbpa", EvalMode::Coarse)]);
            }
            progress(format!("grid seed {seed} ordering {ordering} done at {:.0}s", started.elapsed().as_secs_f64()));
            out
        });
        let runs = results.len();
        let mut cells: BTreeMap<(&'static str, PolicyKind), Cell> = BTreeMap::new();
        for run in results {
            for (key, c) in run {
                let acc = cells.entry(key).or_default();
                acc.macro_average += c.macro_average / runs as f64;
                acc.first_task += c.first_task / runs as f64;
                acc.last_task += c.last_task / runs as f64;
                acc.diagonal += c.diagonal / runs as f64;
                acc.seconds += c.seconds;
            }
        }
        for ((system, policy), c) in &cells {
            progress(format!(
                "{system:9} {:11} macro {:.4} first {:.4} last {:.4} diagonal {:.3} ({:.0}s)",
                policy.name(),
                c.macro_average,
                c.first_task,
                c.last_task,
                c.diagonal,
                c.seconds
            ));
        }
        Grid { cells, runs }
    })
}

fn pts(x: f64) -> f64 {
    100.0 * x
}

#[test]
fn criterion_06_forgetting() {
    let g = grid();
    let enc = g.get("enc-dec", PolicyKind::Random);
    let meta = g.get("meta-mbpa", PolicyKind::Diversity);
    let replay = g.get("replay", PolicyKind::Random);
    // wall-clock of exactly the runs this criterion needs; Replay's cell
    // time includes training, which MbPA++ shares, plus its direct pass
    let seconds = enc.seconds + meta.seconds + replay.seconds;
    let meta_gain = pts(meta.first_task - enc.first_task);
    let replay_gain = pts(replay.first_task - enc.first_task);
    verdict(
        6,
        meta_gain >= 15.0 && replay_gain >= 5.0 && seconds < 1800.0,
        format!(
            "first-task final accuracy over {} runs: Meta-MbPA {:.1}, Replay {:.1}, Enc-Dec {:.1}; gains {meta_gain:+.1} (>= 15) and {replay_gain:+.1} (>= 5) points, {seconds:.0}s",
            g.runs,
            pts(meta.first_task),
            pts(replay.first_task),
            pts(enc.first_task)
        ),
    );
}

#[test]
fn criterion_07_negative_transfer() {
    let g = grid();
    let enc = g.get("enc-dec", PolicyKind::Random).last_task;
    let meta = g.get("meta-mbpa", PolicyKind::Diversity).last_task;
    let mbpa = g.get("mbpa++", PolicyKind::Random).last_task;
    let pass = meta >= mbpa && pts((meta - enc).abs()) <= 3.0 && enc - mbpa > 0.0;
    verdict(
        7,
        pass,
        format!(
            "last-task accuracy: Meta-MbPA {:.2}, MbPA++ {:.2}, Enc-Dec {:.2}",
            pts(meta),
            pts(mbpa),
            pts(enc)
        ),
    );
}

#[test]
fn criterion_08_macro_ordering() {
    let g = grid();
    let enc = g.get("enc-dec", PolicyKind::Random).macro_average;
    let replay = g.get("replay", PolicyKind::Random).macro_average;
    let mbpa = g.get("mbpa++", PolicyKind::Random).macro_average;
    let meta = g.get("meta-mbpa", PolicyKind::Diversity).macro_average;
    let mtl = g.get("mtl", PolicyKind::Random).macro_average;
    let pass = meta > mbpa && mbpa > replay && replay > enc && mtl >= meta.max(mbpa).max(replay).max(enc);
    verdict(
        8,
        pass,
        format!(
            "macro-average: Meta-MbPA {:.2}, MbPA++ {:.2}, Replay {:.2}, Enc-Dec {:.2}, MTL {:.2}",
            pts(meta),
            pts(mbpa),
            pts(replay),
            pts(enc),
            pts(mtl)
        ),
    );
}

#[test]
fn criterion_09_selection_rules() {
    let g = grid();
    let mut pass = true;
    let mut parts = Vec::new();
    for system in ["mbpa++", "meta-mbpa"] {
        let m = |p| g.get(system, p).macro_average;
        let (div, rnd, unc, fgt) = (
            m(PolicyKind::Diversity),
            m(PolicyKind::Random),
            m(PolicyKind::Uncertainty),
            m(PolicyKind::Forgettable),
        );
        pass &= div >= rnd && rnd > unc && rnd > fgt;
        parts.push(format!(
            "{system} diversity {:.2} random {:.2} uncertainty {:.2} forgettable {:.2}",
            pts(div),
            pts(rnd),
            pts(unc),
            pts(fgt)
        ));
    }
    let diag_unc = g.get("mbpa++", PolicyKind::Uncertainty).diagonal;
    let diag_div = g.get("mbpa++", PolicyKind::Diversity).diagonal;
    pass &= diag_unc < diag_div;
    parts.push(format!("neighbour diagonal uncertainty {diag_unc:.3} vs diversity {diag_div:.3}"));
    verdict(9, pass, parts.join("; "));
}

#[test]
fn criterion_10_coarse_evaluation_speedup() {
    let mut cfg = RunConfig::default();
    cfg.training.variant = Variant::Replay;
    let data = experiment::generate(&cfg).unwrap();
    let trained = experiment::train(&cfg, &data.stream).unwrap();
    let xs: Vec<&[f64]> = data
        .tests
        .iter()
        .flat_map(|t| t.examples.iter().map(|e| e.x.as_slice()))
        .take(1000)
        .collect();
    let t = eval::timing_compare(
        &trained.state.theta,
        &trained.state.memory,
        &trained.keynet,
        &xs,
        &cfg.adapt,
        &cfg.adapt,
        cfg.seed,
    )
    .unwrap();
    verdict(
        10,
        t.test_examples == 1000 && t.speedup >= 5.0,
        format!(
            "{} examples, L={} K={}: per-example {:.2}s, coarse {:.4}s, speedup {:.0}x (>= 5x)",
            t.test_examples, cfg.adapt.steps, cfg.adapt.neighbors, t.per_example_seconds, t.coarse_seconds, t.speedup
        ),
    );
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn full_run(cfg: &RunConfig, dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    if dir.exists() {
        fs::remove_dir_all(dir).unwrap();
    }
    let data = experiment::generate(cfg).unwrap();
    experiment::save_data(cfg, &data, dir).unwrap();
    let trained = experiment::train(cfg, &data.stream).unwrap();
    let report = experiment::evaluate_trained(&trained, &data.tests, cfg.eval_mode()).unwrap();
    experiment::save_trained(&trained, dir, Some(&report)).unwrap();
    eval::write_reports(dir, &report).unwrap();
    snapshot(dir)
}

#[test]
fn criterion_11_runs_are_bit_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let mut checked = Vec::new();
    let mut pass = true;
    for (variant, policy) in [
        (Variant::MetaMbpa, PolicyKind::Diversity),
        (Variant::Replay, PolicyKind::Forgettable),
        (Variant::Replay, PolicyKind::Uncertainty),
        (Variant::Mtl, PolicyKind::Random),
    ] {
        let mut cfg = RunConfig::default();
        cfg.seed = 23;
        cfg.ordering = "iii".into();
        cfg.suite.n_train = 400;
        cfg.suite.n_test = 80;
        cfg.training.variant = variant;
        cfg.training.eval_mode = (variant == Variant::Replay).then_some(EvalMode::PerExample);
        cfg.adapt.steps = 5;
        cfg.policy.kind = Some(policy);
        cfg.policy.memory_rate = 0.05;
        cfg.analysis.forgetting_curve = true;
        let dir = tmp.path().join(format!("{variant}-{}", policy.name()));
        cfg.out = Some(dir.clone());
        let first = full_run(&cfg, &dir);
        let second = full_run(&cfg, &dir);
        let same = first == second;
        pass &= same && first.len() >= 8;
        checked.push(format!("{variant}/{}: {} files {}", policy.name(), first.len(), if same { "identical" } else { "DIFFER" }));
    }
    verdict(11, pass, checked.join("; "));
}
