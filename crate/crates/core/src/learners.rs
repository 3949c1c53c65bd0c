//! Single-pass stream learners: Enc-Dec, Replay, MbPA++ and Meta-MbPA, plus
//! the jointly shuffled multitask trainer used as an upper bound.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{self, AdaptConfig, AdaptMode};
use crate::autodiff::{self, ParameterVector, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::memory::{EpisodicMemory, ForgettingTracker, MemoryEntry, MemoryWriter, WritePolicy, WriteSignals};
use crate::models::{self, Batch, KeyNetwork, PredictorParams};
use crate::optim::Adam;
use crate::seeds;
use crate::taskgen::{Example, TaskId, TaskStream, TestSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "enc-dec")]
    EncDec,
    #[serde(rename = "replay")]
    Replay,
    #[serde(rename = "mbpa++")]
    MbpaPlusPlus,
    #[serde(rename = "meta-mbpa")]
    MetaMbpa,
    #[serde(rename = "mtl")]
    Mtl,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::EncDec,
        Variant::Replay,
        Variant::MbpaPlusPlus,
        Variant::MetaMbpa,
        Variant::Mtl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::EncDec => "enc-dec",
            Variant::Replay => "replay",
            Variant::MbpaPlusPlus => "mbpa++",
            Variant::MetaMbpa => "meta-mbpa",
            Variant::Mtl => "mtl",
        }
    }

    pub fn replays(self) -> bool {
        matches!(self, Variant::Replay | Variant::MbpaPlusPlus | Variant::MetaMbpa)
    }

    pub fn meta_trains(self) -> bool {
        self == Variant::MetaMbpa
    }

    pub fn default_eval(self) -> EvalMode {
        match self {
            Variant::MbpaPlusPlus => EvalMode::PerExample,
            Variant::MetaMbpa => EvalMode::Coarse,
            _ => EvalMode::Direct,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    Direct,
    PerExample,
    Coarse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerConfig {
    pub variant: Variant,
    /// Stream steps between replay events (`n_tr`).
    pub replay_every: u64,
    /// Examples per replay update (`n_re`).
    pub replay_batch: usize,
    pub train_batch: usize,
    /// Adam rate for every outer update.
    pub lr: f64,
    /// Rate of the simulated adaptation step inside the meta losses.
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub first_order: bool,
    pub adapt: AdaptConfig,
    pub policy: WritePolicy,
    /// Overrides the variant's evaluation mode.
    pub eval_mode: Option<EvalMode>,
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            variant: Variant::MetaMbpa,
            replay_every: 10_000,
            replay_batch: 100,
            train_batch: 32,
            lr: 3e-5 * 100.0,
            inner_lr: 1e-2,
            inner_steps: 1,
            first_order: false,
            adapt: AdaptConfig::default(),
            policy: WritePolicy::Random { rate: 0.01 },
            eval_mode: None,
            seed: 0,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replay_every == 0 {
            return Err(Error::Config("replay_every must be positive".into()));
        }
        if self.replay_batch == 0 || self.train_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(self.inner_lr >= 0.0 && self.inner_lr.is_finite()) {
            return Err(Error::Config("inner_lr must be non-negative".into()));
        }
        self.adapt.validate()?;
        self.policy.validate()
    }

    pub fn eval_mode(&self) -> EvalMode {
        self.eval_mode.unwrap_or_else(|| self.variant.default_eval())
    }
}

#[derive(Clone, Debug)]
pub struct LearnerState {
    pub theta: PredictorParams,
    pub memory: EpisodicMemory,
    pub step: u64,
    pub adam: Adam,
}

/// What happened during training, for logs and manifests.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub updates: u64,
    pub replay_events: Vec<u64>,
    pub skipped_replays: Vec<u64>,
    /// Meta updates whose retrieved neighbours contained the example itself.
    pub self_neighbor_hits: u64,
    pub meta_fallbacks: u64,
    pub last_loss: f64,
}

struct Pending {
    x: Vec<f64>,
    y: usize,
    step: u64,
}

/// One inner item of an outer update: the example plus, for meta updates,
/// the neighbours it adapts on.
pub struct Item<'a> {
    pub x: &'a [f64],
    pub y: usize,
    pub neighbors: Option<Batch>,
}

pub struct Learner {
    cfg: LearnerConfig,
    keynet: KeyNetwork,
    state: LearnerState,
    writer: MemoryWriter,
    tracker: Option<ForgettingTracker>,
    policy_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
    pending: Vec<Pending>,
    log: TrainLog,
}

impl Learner {
    /// `expected_len` sizes the forgetting tracker's candidate buffer.
    pub fn new(cfg: LearnerConfig, keynet: KeyNetwork, init: PredictorParams, expected_len: usize) -> Result<Self> {
        cfg.validate()?;
        if keynet.input_dim() != init.arch.input_dim {
            return Err(Error::Dimension {
                expected: init.arch.input_dim,
                got: keynet.input_dim(),
            });
        }
        let tracker = match cfg.policy {
            WritePolicy::Forgettable { target_rate, .. } => {
                let target = (target_rate * expected_len as f64).ceil() as usize;
                Some(ForgettingTracker::new(10 * target.max(1)))
            }
            _ => None,
        };
        Ok(Learner {
            writer: MemoryWriter::new(cfg.policy.clone()),
            tracker,
            policy_rng: seeds::rng(cfg.seed, "policy"),
            replay_rng: seeds::rng(cfg.seed, "replay"),
            state: LearnerState {
                theta: init,
                memory: EpisodicMemory::new(),
                step: 0,
                adam: Adam::new(cfg.lr),
            },
            keynet,
            cfg,
            pending: Vec::new(),
            log: TrainLog::default(),
        })
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.cfg
    }

    pub fn state(&self) -> &LearnerState {
        &self.state
    }

    pub fn into_state(self) -> LearnerState {
        self.state
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn writer(&self) -> &MemoryWriter {
        &self.writer
    }

    pub fn keynet(&self) -> &KeyNetwork {
        &self.keynet
    }

    /// Processes the next stream example.
    pub fn observe(&mut self, example: &Example) -> Result<()> {
        let d = self.state.theta.arch.input_dim;
        if example.x.len() != d {
            return Err(Error::Dimension {
                expected: d,
                got: example.x.len(),
            });
        }
        self.state.step += 1;
        let step = self.state.step;
        self.pending.push(Pending {
            x: example.x.clone(),
            y: example.y,
            step,
        });
        if self.pending.len() == self.cfg.train_batch {
            self.flush()?;
        }
        if self.cfg.variant.replays() && step % self.cfg.replay_every == 0 {
            if self.state.memory.is_empty() {
                tracing::info!(step, "memory empty; replay skipped");
                self.log.skipped_replays.push(step);
            } else {
                if self.cfg.variant.meta_trains() {
                    self.meta_replay_update()?;
                } else {
                    self.replay_update()?;
                }
                self.log.replay_events.push(step);
                tracing::debug!(step, memory = self.state.memory.len(), "replay event");
            }
        }
        self.write(example, step)
    }

    pub fn train_examples(&mut self, examples: &[Example]) -> Result<()> {
        examples.iter().try_for_each(|e| self.observe(e))
    }

    /// Applies the update for a trailing partial batch.
    pub fn flush(&mut self) -> Result<()> {
        if self.pending.is_empty() {
            return Ok(());
        }
        let pending = std::mem::take(&mut self.pending);
        let xs: Vec<&[f64]> = pending.iter().map(|p| p.x.as_slice()).collect();
        let ys: Vec<usize> = pending.iter().map(|p| p.y).collect();
        let steps: Vec<u64> = pending.iter().map(|p| p.step).collect();
        if self.cfg.variant.meta_trains() {
            self.meta_task_update_at(&xs, &ys, Some(&steps))
        } else {
            self.task_update(&xs, &ys)
        }
    }

    fn write(&mut self, example: &Example, step: u64) -> Result<()> {
        self.writer.observe_stream_example();
        let key = self.keynet.encode_key(&example.x)?;
        match self.cfg.policy {
            WritePolicy::Forgettable { recheck_period, .. } => {
                let tracker = self.tracker.as_mut().expect("tracker exists for forgettable policy");
                tracker.track(example.clone(), key, step);
                if step % recheck_period == 0 {
                    self.recheck_forgetting()?;
                }
                Ok(())
            }
            _ => {
                let confidence = match self.cfg.policy {
                    WritePolicy::Uncertainty { .. } => self.state.theta.predict(&example.x)?[example.y].exp(),
                    _ => 0.0,
                };
                let entry = MemoryEntry::from_example(example, key, step);
                let signals = WriteSignals {
                    confidence,
                    forget_events: 0,
                };
                self.writer
                    .maybe_write(&mut self.state.memory, entry, signals, &mut self.policy_rng);
                Ok(())
            }
        }
    }

    fn recheck_forgetting(&mut self) -> Result<()> {
        let theta = &self.state.theta;
        let tracker = self.tracker.as_mut().expect("tracker exists for forgettable policy");
        tracker.recheck(|e| Ok(models::argmax(&theta.predict(&e.x)?) == e.y))?;
        for id in tracker.forgotten_ids() {
            let c = tracker.get(id).expect("listed id is tracked");
            let entry = MemoryEntry::from_example(&c.example, c.key.clone(), c.step);
            let signals = WriteSignals {
                confidence: 0.0,
                forget_events: c.forget_events,
            };
            if self
                .writer
                .maybe_write(&mut self.state.memory, entry, signals, &mut self.policy_rng)
            {
                tracker.remove(id);
            }
        }
        Ok(())
    }

    /// One Adam step on the mean loss of the batch.
    pub fn task_update(&mut self, xs: &[&[f64]], ys: &[usize]) -> Result<()> {
        let items: Vec<Item> = xs
            .iter()
            .zip(ys)
            .map(|(&x, &y)| Item { x, y, neighbors: None })
            .collect();
        self.outer_update(&items)
    }

    /// One Adam step on `n_re` uniform memory samples. Returns `false` when
    /// the memory is empty.
    pub fn replay_update(&mut self) -> Result<bool> {
        if self.state.memory.is_empty() {
            return Ok(false);
        }
        let sample: Vec<MemoryEntry> = self
            .state
            .memory
            .sample_uniform(self.cfg.replay_batch, &mut self.replay_rng)?
            .into_iter()
            .cloned()
            .collect();
        let xs: Vec<&[f64]> = sample.iter().map(|e| e.x.as_slice()).collect();
        let ys: Vec<usize> = sample.iter().map(|e| e.y).collect();
        self.task_update(&xs, &ys)?;
        Ok(true)
    }

    /// One Adam step on the meta-task loss: each example is scored after a
    /// simulated adaptation step on its memory neighbours.
    pub fn meta_task_update(&mut self, xs: &[&[f64]], ys: &[usize]) -> Result<()> {
        self.meta_task_update_at(xs, ys, None)
    }

    fn meta_task_update_at(&mut self, xs: &[&[f64]], ys: &[usize], steps: Option<&[u64]>) -> Result<()> {
        let d = self.state.theta.arch.input_dim;
        let mut items = Vec::with_capacity(xs.len());
        for (i, (&x, &y)) in xs.iter().zip(ys).enumerate() {
            let idx = self
                .state
                .memory
                .knn_indices(&self.keynet.encode_key(x)?, self.cfg.adapt.neighbors);
            if idx.is_empty() {
                self.log.meta_fallbacks += 1;
                items.push(Item { x, y, neighbors: None });
                continue;
            }
            if let Some(steps) = steps {
                let entries = self.state.memory.entries();
                if idx.iter().any(|&j| entries[j].step == steps[i] && entries[j].x == x) {
                    self.log.self_neighbor_hits += 1;
                }
            }
            let neighbors = adaptation::batch_from_memory(&self.state.memory, &idx, d)?;
            items.push(Item {
                x,
                y,
                neighbors: Some(neighbors),
            });
        }
        self.outer_update(&items)
    }

    /// Meta-task update on `n_re` uniform memory samples, each adapting on
    /// its own memory neighbours. Returns `false` when the memory is empty.
    pub fn meta_replay_update(&mut self) -> Result<bool> {
        if self.state.memory.is_empty() {
            return Ok(false);
        }
        let d = self.state.theta.arch.input_dim;
        let mem = &self.state.memory;
        let sample: Vec<MemoryEntry> = mem
            .sample_uniform(self.cfg.replay_batch, &mut self.replay_rng)?
            .into_iter()
            .cloned()
            .collect();
        let mut neighbor_sets = Vec::with_capacity(sample.len());
        for e in &sample {
            let idx = mem.knn_indices(&e.key, self.cfg.adapt.neighbors);
            neighbor_sets.push(adaptation::batch_from_memory(mem, &idx, d)?);
        }
        self.log.self_neighbor_hits += sample.len() as u64;
        let items: Vec<Item> = sample
            .iter()
            .zip(neighbor_sets)
            .map(|(e, nb)| Item {
                x: &e.x,
                y: e.y,
                neighbors: Some(nb),
            })
            .collect();
        self.outer_update(&items)?;
        Ok(true)
    }

    fn outer_update(&mut self, items: &[Item]) -> Result<()> {
        let (loss, grads) = outer_gradient(&self.state.theta, items, &self.cfg)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.state.step });
        }
        let next = self.state.adam.step(&self.state.theta.params, &grads)?;
        self.state.theta = self.state.theta.with_params(next)?;
        self.log.updates += 1;
        self.log.last_loss = loss;
        Ok(())
    }
}

/// Simulated adaptation inside the meta losses, recorded on `tape` so the
/// outer gradient can flow through it.
fn inner_adapt<'t>(tape: &'t Tape, theta: &[Var<'t>], neighbors: &Batch, cfg: &LearnerConfig) -> Result<Vec<Var<'t>>> {
    let mut current = theta.to_vec();
    for _ in 0..cfg.inner_steps {
        let loss = adaptation::adaptation_loss_on_tape(tape, &current, theta, neighbors, cfg.adapt.lambda)?;
        let g = tape.grad(loss, &current, !cfg.first_order)?;
        current = autodiff::apply_update_on_tape(&current, &g, cfg.inner_lr)?;
    }
    Ok(current)
}

/// Mean per-example loss and its gradient with respect to `theta`. Items
/// with neighbours are scored at their adapted parameters.
///
/// Plain and meta updates share this exact graph layout, which is what makes
/// a zero inner rate reproduce the plain update bit for bit.
pub fn outer_gradient(theta: &PredictorParams, items: &[Item], cfg: &LearnerConfig) -> Result<(f64, ParameterVector)> {
    if items.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let d = theta.arch.input_dim;
    let tape = Tape::new();
    let params = autodiff::leaves(&tape, &theta.params);
    let mut total: Option<Var> = None;
    for item in items {
        let adapted = match &item.neighbors {
            Some(nb) => inner_adapt(&tape, &params, nb, cfg)?,
            None => params.clone(),
        };
        let x = tape.constant(Tensor::matrix(1, d, item.x.to_vec())?);
        let l = models::log_probs_on_tape(&adapted, x)?.nll(&[item.y])?;
        total = Some(match total {
            Some(t) => t.add(l)?,
            None => l,
        });
    }
    let loss = total.expect("non-empty batch").scale(1.0 / items.len() as f64)?;
    let value = loss.value().item();
    let grads = tape.grad(loss, &params, false)?;
    Ok((value, autodiff::values_of(&grads)))
}

/// Runs a learner over a whole stream.
pub fn train_stream(
    cfg: &LearnerConfig,
    stream: &TaskStream,
    init: PredictorParams,
    keynet: &KeyNetwork,
) -> Result<(LearnerState, TrainLog)> {
    if stream.is_empty() {
        return Err(Error::Empty("stream"));
    }
    let mut learner = Learner::new(cfg.clone(), keynet.clone(), init, stream.len())?;
    learner.train_examples(&stream.examples)?;
    learner.flush()?;
    let log = learner.log().clone();
    Ok((learner.into_state(), log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: TaskId,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub scores: Vec<TaskScore>,
    /// `(query task, neighbour task)` for every retrieved neighbour.
    pub neighbor_log: Vec<(TaskId, TaskId)>,
    /// Predicted labels, per test set.
    pub predictions: Vec<Vec<usize>>,
    pub seconds: f64,
}

/// Scores `theta` on each test set. This is evaluator code: it reads the
/// hidden task ids to group results and to trace neighbour provenance.
pub fn evaluate(
    theta: &PredictorParams,
    memory: &EpisodicMemory,
    keynet: &KeyNetwork,
    tests: &[TestSet],
    mode: EvalMode,
    adapt: &AdaptConfig,
    seed: u64,
) -> Result<Evaluation> {
    let started = Instant::now();
    let xs: Vec<&[f64]> = tests.iter().flat_map(|t| t.examples.iter().map(|e| e.x.as_slice())).collect();
    let preds = match mode {
        EvalMode::Direct => adaptation::Predictions {
            labels: if xs.is_empty() {
                Vec::new()
            } else {
                theta.classify(&Tensor::from_rows(&xs, theta.arch.input_dim)?)?
            },
            neighbors: vec![Vec::new(); xs.len()],
        },
        EvalMode::PerExample | EvalMode::Coarse => {
            let mut cfg = adapt.clone();
            cfg.mode = if mode == EvalMode::Coarse {
                AdaptMode::Coarse
            } else {
                AdaptMode::PerExample
            };
            let mut rng = seeds::rng(seed, "adaptation");
            adaptation::predict_with_adaptation(theta, memory, keynet, &xs, &cfg, &mut rng)?
        }
    };
    let seconds = started.elapsed().as_secs_f64();

    let mut neighbor_log = Vec::new();
    let mut scores = Vec::with_capacity(tests.len());
    let mut predictions = Vec::with_capacity(tests.len());
    let mut offset = 0;
    for t in tests {
        let n = t.examples.len();
        let labels = &preds.labels[offset..offset + n];
        let correct = t.examples.iter().zip(labels).filter(|(e, &l)| e.y == l).count();
        scores.push(TaskScore {
            task: t.task.clone(),
            accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
            count: n,
        });
        for idx in &preds.neighbors[offset..offset + n] {
            for &j in idx {
                if let Some(src) = memory.entries()[j].hidden_task() {
                    neighbor_log.push((t.task.clone(), src.clone()));
                }
            }
        }
        predictions.push(labels.to_vec());
        offset += n;
    }
    Ok(Evaluation {
        scores,
        neighbor_log,
        predictions,
        seconds,
    })
}
