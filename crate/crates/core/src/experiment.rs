//! Run configuration and the generate → train → evaluate pipeline shared by
//! the command line and the benchmark harness.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::AdaptConfig;
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, NeighborMatrix};
use crate::learners::{self, EvalMode, Learner, LearnerConfig, LearnerState, TrainLog, Variant};
use crate::memory::{self, DiversityRule, EpisodicMemory, WritePolicy};
use crate::models::{Architecture, KeyNetwork, PredictorParams};
use crate::seeds;
use crate::taskgen::{self, GeneratedData, SuiteConfig, TaskId, TaskStream, TestSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub key_dim: usize,
    pub normalize_keys: bool,
    /// Optional pre-trained starting point.
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 32,
            key_dim: 32,
            normalize_keys: false,
            init_checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub variant: Variant,
    /// `n_tr`: stream steps between replay events.
    pub n_tr: u64,
    /// `n_re`: memory samples per replay event.
    pub n_re: usize,
    pub train_batch: usize,
    /// Reference Adam rate, scaled by `lr_multiplier`.
    pub base_lr: f64,
    pub lr_multiplier: f64,
    /// Inner step of the meta losses.
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub first_order: bool,
    pub eval_mode: Option<EvalMode>,
    /// Passes over the jointly shuffled data for the multitask oracle.
    pub mtl_epochs: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            variant: Variant::MetaMbpa,
            n_tr: 200,
            n_re: 2,
            train_batch: 32,
            base_lr: 3e-5,
            lr_multiplier: 100.0,
            inner_lr: 3e-3,
            inner_steps: 1,
            first_order: false,
            eval_mode: None,
            mtl_epochs: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Random,
    Diversity,
    Uncertainty,
    Forgettable,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Random => "random",
            PolicyKind::Diversity => "diversity",
            PolicyKind::Uncertainty => "uncertainty",
            PolicyKind::Forgettable => "forgettable",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            PolicyKind::Random,
            PolicyKind::Diversity,
            PolicyKind::Uncertainty,
            PolicyKind::Forgettable,
        ]
        .into_iter()
        .find(|p| p.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown policy `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    /// Unset means the variant's own rule: diversity for Meta-MbPA, random
    /// for everything else.
    pub kind: Option<PolicyKind>,
    /// Target write rate `r_M`.
    pub memory_rate: f64,
    /// Diversity temperature. When absent it is calibrated so the rule
    /// admits about `memory_rate` of a separately drawn stream.
    pub beta: Option<f64>,
    pub diversity_rule: DiversityRule,
    /// Forgettable recheck period; defaults to `n_tr`.
    pub recheck_period: Option<u64>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            kind: None,
            memory_rate: 0.01,
            beta: None,
            diversity_rule: DiversityRule::Intuitive,
            recheck_period: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub forgetting_curve: bool,
    pub neighbor_matrix: bool,
    pub timing: bool,
    /// When false every variant is evaluated without adaptation.
    pub adapt_eval: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            forgetting_curve: false,
            neighbor_matrix: true,
            timing: false,
            adapt_eval: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub suite: SuiteConfig,
    pub ordering: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub adapt: AdaptConfig,
    pub policy: PolicyConfig,
    pub analysis: AnalysisConfig,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            suite: SuiteConfig::default(),
            ordering: "i".into(),
            seed: 0,
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            adapt: AdaptConfig::default(),
            policy: PolicyConfig::default(),
            analysis: AnalysisConfig::default(),
            out: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        taskgen::make_suite(&self.suite)?;
        taskgen::canonical_ordering(&self.ordering, self.suite.n_tasks)?;
        if self.model.hidden_dim == 0 || self.model.key_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.policy.memory_rate) {
            return Err(Error::Config("policy.memory_rate must lie in [0, 1]".into()));
        }
        if self.training.mtl_epochs == 0 {
            return Err(Error::Config("training.mtl_epochs must be positive".into()));
        }
        if self.policy.recheck_period == Some(0) {
            return Err(Error::Config("policy.recheck_period must be positive".into()));
        }
        self.learner_config(WritePolicy::Random {
            rate: self.policy.memory_rate,
        })
        .validate()
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.suite.dim,
            hidden_dim: self.model.hidden_dim,
            num_classes: self.suite.num_classes(),
        }
    }

    pub fn learner_config(&self, policy: WritePolicy) -> LearnerConfig {
        let t = &self.training;
        LearnerConfig {
            variant: t.variant,
            replay_every: t.n_tr,
            replay_batch: t.n_re,
            train_batch: t.train_batch,
            lr: t.base_lr * t.lr_multiplier,
            inner_lr: t.inner_lr,
            inner_steps: t.inner_steps,
            first_order: t.first_order,
            adapt: self.adapt.clone(),
            policy,
            eval_mode: t.eval_mode,
            seed: self.seed,
        }
    }

    pub fn eval_mode(&self) -> EvalMode {
        if !self.analysis.adapt_eval {
            return EvalMode::Direct;
        }
        self.training.eval_mode.unwrap_or_else(|| self.training.variant.default_eval())
    }

    pub fn policy_kind(&self) -> PolicyKind {
        self.policy.kind.unwrap_or(match self.training.variant {
            Variant::MetaMbpa => PolicyKind::Diversity,
            _ => PolicyKind::Random,
        })
    }

    pub fn keynet(&self) -> KeyNetwork {
        KeyNetwork::new(
            self.suite.dim,
            self.model.key_dim,
            seeds::derive(self.seed, "keynet"),
            self.model.normalize_keys,
        )
    }

    pub fn ordering_names(&self) -> Result<Vec<String>> {
        taskgen::canonical_ordering(&self.ordering, self.suite.n_tasks)
    }
}

/// Samples the configured suite in the configured ordering.
pub fn generate(cfg: &RunConfig) -> Result<GeneratedData> {
    let suite = taskgen::make_suite(&cfg.suite)?;
    taskgen::generate_stream(&suite, &cfg.ordering_names()?, seeds::derive(cfg.seed, "stream"))
}

/// Turns the policy block into a concrete write policy. An unset diversity
/// `β` is fitted on a calibration stream drawn independently of the run data.
pub fn resolve_policy(cfg: &RunConfig, keynet: &KeyNetwork) -> Result<WritePolicy> {
    let p = &cfg.policy;
    let policy = match cfg.policy_kind() {
        PolicyKind::Random => WritePolicy::Random { rate: p.memory_rate },
        PolicyKind::Uncertainty => WritePolicy::Uncertainty {
            target_rate: p.memory_rate,
        },
        PolicyKind::Forgettable => WritePolicy::Forgettable {
            target_rate: p.memory_rate,
            recheck_period: p.recheck_period.unwrap_or(cfg.training.n_tr),
        },
        PolicyKind::Diversity => {
            let beta = match p.beta {
                Some(b) => b,
                None => {
                    let suite = taskgen::make_suite(&cfg.suite)?;
                    let calib = taskgen::generate_stream(&suite, &cfg.ordering_names()?, seeds::derive(cfg.seed, "calibration"))?;
                    let keys = calib
                        .stream
                        .examples
                        .iter()
                        .map(|e| keynet.encode_key(&e.x))
                        .collect::<Result<Vec<_>>>()?;
                    let beta = memory::calibrate_diversity_beta(&keys, p.diversity_rule, p.memory_rate, seeds::derive(cfg.seed, "calibration-policy"));
                    tracing::info!(beta, "calibrated diversity temperature");
                    beta
                }
            };
            WritePolicy::Diversity {
                beta,
                rule: p.diversity_rule,
            }
        }
    };
    policy.validate()?;
    Ok(policy)
}

/// Parameters and memory at one task boundary.
#[derive(Clone, Debug)]
pub struct Stage {
    pub theta: PredictorParams,
    pub memory: EpisodicMemory,
}

pub struct Trained {
    pub config: RunConfig,
    pub learner: LearnerConfig,
    pub keynet: KeyNetwork,
    pub state: LearnerState,
    pub log: TrainLog,
    /// Stage 0 is the initial model, then one entry per completed task.
    pub stages: Vec<Stage>,
    pub stream_hash: String,
    pub ordering: Vec<TaskId>,
}

pub fn initial_params(cfg: &RunConfig) -> Result<PredictorParams> {
    match &cfg.model.init_checkpoint {
        Some(path) => {
            let p = PredictorParams::load(path)?;
            if p.arch != cfg.architecture() {
                return Err(Error::Config(format!("checkpoint {} has a different architecture", path.display())));
            }
            Ok(p)
        }
        None => Ok(PredictorParams::xavier(cfg.architecture(), cfg.seed)),
    }
}

/// Trains on `stream`. Task boundaries are read from the stream layout by
/// this harness, never by the learner, and only to take stage snapshots.
pub fn train(cfg: &RunConfig, stream: &TaskStream) -> Result<Trained> {
    cfg.validate()?;
    if stream.is_empty() {
        return Err(Error::Empty("stream"));
    }
    if stream.input_dim() != Some(cfg.suite.dim) {
        return Err(Error::Dimension {
            expected: cfg.suite.dim,
            got: stream.input_dim().unwrap_or(0),
        });
    }
    let keynet = cfg.keynet();
    let policy = resolve_policy(cfg, &keynet)?;
    let learner_cfg = cfg.learner_config(policy);
    let init = initial_params(cfg)?;
    let mut stages = vec![Stage {
        theta: init.clone(),
        memory: EpisodicMemory::new(),
    }];
    let epochs = if cfg.training.variant == Variant::Mtl {
        cfg.training.mtl_epochs
    } else {
        1
    };
    let mut learner = Learner::new(learner_cfg.clone(), keynet.clone(), init, stream.len() * epochs)?;
    if cfg.training.variant == Variant::Mtl {
        for epoch in 0..epochs {
            let shuffled = stream.shuffled(seeds::derive(cfg.seed, &format!("epoch{epoch}")));
            learner.train_examples(&shuffled.examples)?;
        }
        learner.flush()?;
    } else {
        for (task, start, end) in stream.segments() {
            learner.train_examples(&stream.examples[start..end])?;
            tracing::info!(task = %task, step = learner.state().step, memory = learner.state().memory.len(), "task finished");
            stages.push(Stage {
                theta: learner.state().theta.clone(),
                memory: learner.state().memory.clone(),
            });
        }
        learner.flush()?;
    }
    let log = learner.log().clone();
    let state = learner.into_state();
    if stages.len() > 1 {
        // the trailing partial batch belongs to the last task
        let n = stages.len();
        stages[n - 1].theta = state.theta.clone();
    }
    Ok(Trained {
        config: cfg.clone(),
        learner: learner_cfg,
        keynet,
        state,
        log,
        stages,
        stream_hash: stream.hash(),
        ordering: stream.ordering.clone(),
    })
}

fn test_set<'a>(tests: &'a [TestSet], task: &TaskId) -> Result<&'a TestSet> {
    tests
        .iter()
        .find(|t| &t.task == task)
        .ok_or_else(|| Error::UnknownTask(task.to_string()))
}

/// Evaluates parameters and memory with `mode` and assembles the report.
pub fn evaluate_model(
    cfg: &RunConfig,
    theta: &PredictorParams,
    memory: &EpisodicMemory,
    keynet: &KeyNetwork,
    tests: &[TestSet],
    ordering: &[TaskId],
    mode: EvalMode,
    stages: Option<&[Stage]>,
) -> Result<EvalReport> {
    let evaluation = learners::evaluate(theta, memory, keynet, tests, mode, &cfg.adapt, cfg.seed)?;
    let accs: Vec<f64> = evaluation.scores.iter().map(|s| s.accuracy).collect();
    let first = ordering.first().ok_or(Error::Empty("ordering"))?;
    let first_task_final = evaluation
        .scores
        .iter()
        .find(|s| &s.task == first)
        .map(|s| s.accuracy)
        .ok_or_else(|| Error::UnknownTask(first.to_string()))?;

    let neighbor_matrix: Option<NeighborMatrix> = if cfg.analysis.neighbor_matrix && mode == EvalMode::PerExample {
        let tasks: Vec<TaskId> = tests.iter().map(|t| t.task.clone()).collect();
        Some(eval::neighbor_source_matrix(&evaluation.neighbor_log, &tasks))
    } else {
        None
    };

    let forgetting_curve = match (cfg.analysis.forgetting_curve, stages) {
        (true, Some(stages)) => {
            let first_test = [test_set(tests, first)?.clone()];
            Some(eval::forgetting_curve(stages, |s| {
                let e = learners::evaluate(&s.theta, &s.memory, keynet, &first_test, mode, &cfg.adapt, cfg.seed)?;
                Ok(e.scores[0].accuracy)
            })?)
        }
        (true, None) => {
            tracing::warn!("no stage checkpoints; forgetting curve skipped");
            None
        }
        _ => None,
    };

    let timing = if cfg.analysis.timing {
        let xs: Vec<&[f64]> = tests
            .iter()
            .flat_map(|t| t.examples.iter().map(|e| e.x.as_slice()))
            .take(1000)
            .collect();
        Some(eval::timing_compare(theta, memory, keynet, &xs, &cfg.adapt, &cfg.adapt, cfg.seed)?)
    } else {
        None
    };

    Ok(EvalReport {
        build: eval::BUILD_ID.to_string(),
        config: cfg.to_value(),
        variant: cfg.training.variant.name().to_string(),
        policy: cfg.policy_kind().name().to_string(),
        memory_rate: cfg.policy.memory_rate,
        eval_mode: mode,
        ordering: cfg.ordering.clone(),
        seed: cfg.seed,
        macro_average: eval::macro_average(&accs)?,
        last_task_score: eval::last_task_score(&evaluation.scores, ordering)?,
        first_task_final,
        memory_size: memory.len(),
        per_task: evaluation.scores,
        forgetting_curve,
        neighbor_matrix,
        timing,
    })
}

pub fn evaluate_trained(trained: &Trained, tests: &[TestSet], mode: EvalMode) -> Result<EvalReport> {
    let stages = if trained.config.training.variant == Variant::Mtl {
        None
    } else {
        Some(trained.stages.as_slice())
    };
    evaluate_model(
        &trained.config,
        &trained.state.theta,
        &trained.state.memory,
        &trained.keynet,
        tests,
        &trained.ordering,
        mode,
        stages,
    )
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(format!("{:x}", Sha256::digest(fs::read(path)?)))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub build: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub stream_hash: String,
    pub policy: WritePolicy,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub memory_snapshot: String,
    pub keynet: String,
    pub memory_size: usize,
    pub train_log: TrainLog,
    pub metrics: Option<serde_json::Value>,
}

/// Writes checkpoint, memory snapshot, key network and `manifest.json`.
pub fn save_trained(trained: &Trained, dir: &Path, metrics: Option<&EvalReport>) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let ckpt = dir.join("checkpoint.json");
    trained.state.theta.save(&ckpt)?;
    trained
        .state
        .memory
        .save_snapshot(&dir.join("memory.jsonl"), trained.keynet.key_dim(), &trained.learner.policy)?;
    trained.keynet.save(&dir.join("keynet.json"))?;
    let manifest = Manifest {
        build: eval::BUILD_ID.to_string(),
        config: trained.config.to_value(),
        seed: trained.config.seed,
        stream_hash: trained.stream_hash.clone(),
        policy: trained.learner.policy.clone(),
        checkpoint: "checkpoint.json".into(),
        checkpoint_sha256: sha256_file(&ckpt)?,
        memory_snapshot: "memory.jsonl".into(),
        keynet: "keynet.json".into(),
        memory_size: trained.state.memory.len(),
        train_log: trained.log.clone(),
        metrics: metrics.map(|m| serde_json::to_value(m).expect("report serializes")),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    if trained.config.analysis.forgetting_curve && trained.config.training.variant != Variant::Mtl {
        for (k, stage) in trained.stages.iter().enumerate() {
            let sdir = dir.join("stages").join(format!("stage_{k}"));
            fs::create_dir_all(&sdir)?;
            stage.theta.save(&sdir.join("checkpoint.json"))?;
            stage
                .memory
                .save_snapshot(&sdir.join("memory.jsonl"), trained.keynet.key_dim(), &trained.learner.policy)?;
        }
    }
    Ok(manifest)
}

/// Artifacts of a finished training run, read back from disk.
pub struct SavedRun {
    pub manifest: Manifest,
    pub theta: PredictorParams,
    /// `None` when the snapshot file is absent.
    pub memory: Option<EpisodicMemory>,
    pub keynet: KeyNetwork,
    pub stages: Option<Vec<Stage>>,
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path))
    }
}

pub fn load_trained(dir: &Path) -> Result<SavedRun> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(require(dir.join("manifest.json"))?)?)?;
    let theta = PredictorParams::load(&require(dir.join(&manifest.checkpoint))?)?;
    let keynet = KeyNetwork::load(&require(dir.join(&manifest.keynet))?)?;
    let snapshot = dir.join(&manifest.memory_snapshot);
    let memory = if snapshot.exists() {
        Some(EpisodicMemory::load_snapshot(&snapshot)?.0)
    } else {
        None
    };
    let stage_dir = dir.join("stages");
    let stages = if stage_dir.is_dir() {
        let mut stages = Vec::new();
        for k in 0.. {
            let sdir = stage_dir.join(format!("stage_{k}"));
            if !sdir.is_dir() {
                break;
            }
            stages.push(Stage {
                theta: PredictorParams::load(&require(sdir.join("checkpoint.json"))?)?,
                memory: EpisodicMemory::load_snapshot(&require(sdir.join("memory.jsonl"))?)?.0,
            });
        }
        Some(stages)
    } else {
        None
    };
    Ok(SavedRun {
        manifest,
        theta,
        memory,
        keynet,
        stages,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestFile {
    pub task: TaskId,
    pub file: String,
    pub sha256: String,
}

/// Index of a generated stream and its test sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub build: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub ordering: Vec<TaskId>,
    pub stream: String,
    pub stream_sha256: String,
    pub stream_hash: String,
    pub tests: Vec<TestFile>,
}

pub const DATA_MANIFEST: &str = "data.json";

/// Writes the stream, the test sets and `data.json` into `dir`.
pub fn save_data(cfg: &RunConfig, data: &GeneratedData, dir: &Path) -> Result<DataManifest> {
    taskgen::save_generated(data, dir)?;
    let stream = "train.jsonl".to_string();
    let tests = data
        .tests
        .iter()
        .map(|t| {
            let file = format!("test_{}.jsonl", t.task);
            Ok(TestFile {
                task: t.task.clone(),
                sha256: sha256_file(&dir.join(&file))?,
                file,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DataManifest {
        build: eval::BUILD_ID.to_string(),
        config: cfg.to_value(),
        seed: cfg.seed,
        ordering: data.stream.ordering.clone(),
        stream_sha256: sha256_file(&dir.join(&stream))?,
        stream,
        stream_hash: data.stream.hash(),
        tests,
    };
    fs::write(dir.join(DATA_MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn load_data(dir: &Path) -> Result<(GeneratedData, DataManifest)> {
    let manifest: DataManifest = serde_json::from_str(&fs::read_to_string(require(dir.join(DATA_MANIFEST))?)?)?;
    let stream = taskgen::load_stream(&require(dir.join(&manifest.stream))?)?;
    let tests = manifest
        .tests
        .iter()
        .map(|t| {
            Ok(TestSet {
                task: t.task.clone(),
                examples: taskgen::load_examples(&require(dir.join(&t.file))?)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((GeneratedData { stream, tests }, manifest))
}

/// Full pipeline for one config: generate, train, evaluate, and write every
/// artifact under `cfg.out` when set.
pub fn run(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let data = generate(cfg)?;
    let trained = train(cfg, &data.stream)?;
    let report = evaluate_trained(&trained, &data.tests, cfg.eval_mode())?;
    if let Some(dir) = &cfg.out {
        save_trained(&trained, dir, Some(&report))?;
        eval::write_reports(dir, &report)?;
    }
    Ok(report)
}

/// Worker count for fan-out: `MEMLOOM_THREADS` when set, else the number
/// of available cores.
pub fn thread_budget() -> usize {
    std::env::var("MEMLOOM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Applies `f` to every item on up to `threads` workers; results keep the
/// input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                out.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    out.into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub kind: String,
    pub variant: String,
    pub policy: String,
    pub memory_rate: f64,
    pub eval_mode: EvalMode,
    pub ordering: String,
    pub seed: String,
    pub runs: usize,
    pub macro_average: f64,
    pub macro_std: f64,
    pub last_task: f64,
    pub last_task_std: f64,
    pub first_task: f64,
    pub first_task_std: f64,
    /// Macro-average minus that of the first run listed.
    pub delta_macro: f64,
}

/// One row per run, then one aggregated mean ± std row per
/// `(variant, policy, memory rate, evaluation mode)`.
pub fn compare(reports: &[EvalReport]) -> Result<Vec<CompareRow>> {
    if reports.len() < 2 {
        return Err(Error::Config("compare needs at least two runs".into()));
    }
    let suite_of = |r: &EvalReport| r.config.get("suite").cloned();
    let suite = suite_of(&reports[0]);
    if reports.iter().any(|r| suite_of(r) != suite) {
        return Err(Error::Config("runs use incompatible suites".into()));
    }
    let baseline = reports[0].macro_average;
    let mut rows: Vec<CompareRow> = reports
        .iter()
        .map(|r| CompareRow {
            kind: "run".into(),
            variant: r.variant.clone(),
            policy: r.policy.clone(),
            memory_rate: r.memory_rate,
            eval_mode: r.eval_mode,
            ordering: r.ordering.clone(),
            seed: r.seed.to_string(),
            runs: 1,
            macro_average: r.macro_average,
            macro_std: 0.0,
            last_task: r.last_task_score,
            last_task_std: 0.0,
            first_task: r.first_task_final,
            first_task_std: 0.0,
            delta_macro: r.macro_average - baseline,
        })
        .collect();
    let mut groups: BTreeMap<(String, String, u64, String), Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        let key = (
            r.variant.clone(),
            r.policy.clone(),
            r.memory_rate.to_bits(),
            serde_json::to_string(&r.eval_mode)?,
        );
        groups.entry(key).or_default().push(r);
    }
    for group in groups.values() {
        let stat = |f: fn(&EvalReport) -> f64| eval::mean_std(&group.iter().map(|r| f(r)).collect::<Vec<_>>());
        let (m, ms) = stat(|r| r.macro_average);
        let (l, ls) = stat(|r| r.last_task_score);
        let (f, fs) = stat(|r| r.first_task_final);
        rows.push(CompareRow {
            kind: "mean".into(),
            variant: group[0].variant.clone(),
            policy: group[0].policy.clone(),
            memory_rate: group[0].memory_rate,
            eval_mode: group[0].eval_mode,
            ordering: "*".into(),
            seed: "*".into(),
            runs: group.len(),
            macro_average: m,
            macro_std: ms,
            last_task: l,
            last_task_std: ls,
            first_task: f,
            first_task_std: fs,
            delta_macro: m - baseline,
        });
    }
    Ok(rows)
}

/// Comparison table; the leading comment echoes the build and every
/// compared run's config.
pub fn compare_csv(rows: &[CompareRow], reports: &[EvalReport]) -> String {
    let configs: Vec<&serde_json::Value> = reports.iter().map(|r| &r.config).collect();
    let mut out = format!(
        "# build={} configs={}\n",
        eval::BUILD_ID,
        serde_json::to_string(&configs).expect("configs serialize")
    );
    out.push_str(
        "kind,variant,policy,memory_rate,eval_mode,ordering,seed,runs,macro_average,macro_std,last_task,last_task_std,first_task,first_task_std,delta_macro\n",
    );
    for r in rows {
        let mode = serde_json::to_value(r.eval_mode).expect("mode serializes");
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.kind,
            r.variant,
            r.policy,
            r.memory_rate,
            mode.as_str().unwrap_or_default(),
            r.ordering,
            r.seed,
            r.runs,
            r.macro_average,
            r.macro_std,
            r.last_task,
            r.last_task_std,
            r.first_task,
            r.first_task_std,
            r.delta_macro
        ));
    }
    out
}
