//! Synthetic sequential classification tasks.
//!
//! Every task is a Gaussian mixture over its own block of global labels.
//! A task's class means sit around a task-specific centre and are spread
//! along a task-specific random rotation, so all tasks share one input space
//! while training on later tasks disturbs the boundaries of earlier ones.

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seeds;

/// Opaque task identifier. Only the evaluator is meant to read it.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(Arc<str>);

impl TaskId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<&str> for TaskId {
    fn from(s: &str) -> Self {
        TaskId(Arc::from(s))
    }
}

impl From<String> for TaskId {
    fn from(s: String) -> Self {
        TaskId(Arc::from(s))
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: usize,
    task: TaskId,
}

impl Example {
    pub fn new(x: Vec<f64>, y: usize, task: impl Into<TaskId>) -> Self {
        Example { x, y, task: task.into() }
    }

    /// The task this example was drawn from. Learners must not call this;
    /// it exists for evaluation and reporting.
    pub fn hidden_task(&self) -> &TaskId {
        &self.task
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub n_tasks: usize,
    pub classes_per_task: usize,
    pub dim: usize,
    /// 0 is easiest, 1 hardest.
    pub difficulty: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            n_tasks: 5,
            classes_per_task: 4,
            dim: 32,
            difficulty: 0.5,
            n_train: 2000,
            n_test: 500,
            seed: 0,
        }
    }
}

impl SuiteConfig {
    pub fn num_classes(&self) -> usize {
        self.n_tasks * self.classes_per_task
    }

    /// Distance between class means inside a task.
    pub fn class_margin(&self) -> f64 {
        6.0 - 2.0 * self.difficulty
    }

    /// Distance of each task centre from the origin.
    pub fn task_spread(&self) -> f64 {
        9.0 - 6.0 * self.difficulty
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    /// Global label ids owned by this task.
    pub classes: Vec<usize>,
    /// One mean per class, in input space.
    pub means: Vec<Vec<f64>>,
    pub noise_std: f64,
    pub n_train: usize,
    pub n_test: usize,
}

impl TaskSpec {
    /// Draws one example of a uniformly chosen class.
    pub fn sample(&self, rng: &mut impl Rng) -> Example {
        let k = rng.gen_range(0..self.classes.len());
        let x = self.means[k]
            .iter()
            .map(|&m| m + self.noise_std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Example::new(x, self.classes[k], self.name.as_str())
    }
}

pub fn task_name(index: usize) -> String {
    format!("task{index}")
}

fn random_unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.into_iter().map(|a| a / n).collect()
}

/// `k` random orthonormal directions in `R^d`.
fn random_frame(rng: &mut impl Rng, d: usize, k: usize) -> Vec<Vec<f64>> {
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(k);
    while frame.len() < k {
        let mut v = random_unit(rng, d);
        for u in &frame {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            frame.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    frame
}

/// Builds a deterministic suite of tasks with disjoint label blocks.
pub fn make_suite(cfg: &SuiteConfig) -> Result<Vec<TaskSpec>> {
    if cfg.n_tasks < 2 || cfg.classes_per_task < 2 {
        return Err(Error::InfeasibleSuite("need at least 2 tasks of at least 2 classes".into()));
    }
    if !(0.0..=1.0).contains(&cfg.difficulty) {
        return Err(Error::InfeasibleSuite(format!("difficulty {} outside [0, 1]", cfg.difficulty)));
    }
    if cfg.classes_per_task > cfg.dim {
        return Err(Error::InfeasibleSuite(format!(
            "{} equidistant class means do not fit in {} dimensions",
            cfg.classes_per_task, cfg.dim
        )));
    }
    if cfg.n_train == 0 || cfg.n_test == 0 {
        return Err(Error::InfeasibleSuite("tasks need train and test examples".into()));
    }
    let mut rng = seeds::rng(cfg.seed, "suite");
    // scaled simplex: pairwise distance equals the margin
    let arm = cfg.class_margin() / std::f64::consts::SQRT_2;
    let tasks = (0..cfg.n_tasks)
        .map(|t| {
            let centre: Vec<f64> = random_unit(&mut rng, cfg.dim).into_iter().map(|v| v * cfg.task_spread()).collect();
            let frame = random_frame(&mut rng, cfg.dim, cfg.classes_per_task);
            let means = frame
                .iter()
                .map(|axis| centre.iter().zip(axis).map(|(c, a)| c + arm * a).collect())
                .collect();
            TaskSpec {
                name: task_name(t),
                classes: (t * cfg.classes_per_task..(t + 1) * cfg.classes_per_task).collect(),
                means,
                noise_std: 1.0,
                n_train: cfg.n_train,
                n_test: cfg.n_test,
            }
        })
        .collect();
    Ok(tasks)
}

/// The four canonical task orders. With five tasks these follow the
/// classic dataset orders; other sizes use the identity and seeded shuffles.
pub fn canonical_ordering(name: &str, n_tasks: usize) -> Result<Vec<String>> {
    const FIVE: [[usize; 5]; 4] = [[0, 1, 2, 3, 4], [2, 4, 1, 3, 0], [0, 4, 3, 2, 1], [1, 0, 3, 4, 2]];
    let which = match name {
        "i" => 0,
        "ii" => 1,
        "iii" => 2,
        "iv" => 3,
        other => return Err(Error::Config(format!("unknown ordering `{other}` (expected i, ii, iii or iv)"))),
    };
    let order: Vec<usize> = if n_tasks == 5 {
        FIVE[which].to_vec()
    } else {
        let mut order: Vec<usize> = (0..n_tasks).collect();
        if which > 0 {
            order.shuffle(&mut seeds::rng(which as u64, "ordering"));
        }
        order
    };
    Ok(order.into_iter().map(task_name).collect())
}

pub const ORDERINGS: [&str; 4] = ["i", "ii", "iii", "iv"];

/// A single-pass training stream, grouped by task in `ordering`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub examples: Vec<Example>,
    pub ordering: Vec<TaskId>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.examples.first().map(|e| e.x.len())
    }

    /// Contiguous `(task, start, end)` segments in stream order.
    pub fn segments(&self) -> Vec<(TaskId, usize, usize)> {
        let mut out: Vec<(TaskId, usize, usize)> = Vec::new();
        for (i, e) in self.examples.iter().enumerate() {
            match out.last_mut() {
                Some((t, _, end)) if t == e.hidden_task() => *end = i + 1,
                _ => out.push((e.hidden_task().clone(), i, i + 1)),
            }
        }
        out
    }

    /// SHA-256 over the exact bits of every record.
    pub fn hash(&self) -> String {
        hash_examples(&self.examples)
    }

    /// Same examples, jointly shuffled across tasks.
    pub fn shuffled(&self, seed: u64) -> TaskStream {
        let mut examples = self.examples.clone();
        examples.shuffle(&mut seeds::rng(seed, "mtl-shuffle"));
        TaskStream {
            examples,
            ordering: self.ordering.clone(),
        }
    }
}

pub fn hash_examples(examples: &[Example]) -> String {
    let mut h = Sha256::new();
    for e in examples {
        for v in &e.x {
            h.update(v.to_bits().to_le_bytes());
        }
        h.update((e.y as u64).to_le_bytes());
        h.update(e.task.as_str().as_bytes());
        h.update([0u8]);
    }
    format!("{:x}", h.finalize())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TestSet {
    pub task: TaskId,
    pub examples: Vec<Example>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedData {
    pub stream: TaskStream,
    /// Held-out examples per task, in suite order.
    pub tests: Vec<TestSet>,
}

/// Samples every task's train and test split and concatenates the train
/// splits in `ordering`. Each task's data depends only on the suite, the
/// task and `seed`, never on its position in the ordering.
pub fn generate_stream(suite: &[TaskSpec], ordering: &[String], seed: u64) -> Result<GeneratedData> {
    let by_name: HashMap<&str, &TaskSpec> = suite.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut seen = std::collections::HashSet::new();
    for name in ordering {
        if !by_name.contains_key(name.as_str()) {
            return Err(Error::UnknownTask(name.clone()));
        }
        if !seen.insert(name.as_str()) {
            return Err(Error::Config(format!("task `{name}` appears twice in the ordering")));
        }
    }
    if seen.len() != suite.len() {
        return Err(Error::Config("ordering must be a permutation of the suite's tasks".into()));
    }

    let mut train_by_task = HashMap::new();
    let mut tests = Vec::with_capacity(suite.len());
    for spec in suite {
        let mut rng = seeds::rng(seed, &format!("data/{}", spec.name));
        let mut train: Vec<Example> = (0..spec.n_train).map(|_| spec.sample(&mut rng)).collect();
        train.shuffle(&mut rng);
        let test = (0..spec.n_test).map(|_| spec.sample(&mut rng)).collect();
        train_by_task.insert(spec.name.as_str(), train);
        tests.push(TestSet {
            task: spec.name.as_str().into(),
            examples: test,
        });
    }
    let mut examples = Vec::new();
    for name in ordering {
        examples.extend(train_by_task.remove(name.as_str()).expect("validated above"));
    }
    Ok(GeneratedData {
        stream: TaskStream {
            examples,
            ordering: ordering.iter().map(|n| TaskId::from(n.as_str())).collect(),
        },
        tests,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    x: Vec<f64>,
    y: usize,
    task: String,
}

pub fn save_examples(examples: &[Example], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in examples {
        let rec = Record {
            x: e.x.clone(),
            y: e.y,
            task: e.task.to_string(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_examples(path: &Path) -> Result<Vec<Example>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let reader = BufReader::new(File::open(path)?);
    let mut out: Vec<Example> = Vec::new();
    let mut names: HashMap<String, TaskId> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if let Some(first) = out.first() {
            if first.x.len() != rec.x.len() {
                return Err(parse_err(format!(
                    "dimension {} differs from the first record's {}",
                    rec.x.len(),
                    first.x.len()
                )));
            }
        }
        let task = names.entry(rec.task.clone()).or_insert_with(|| TaskId::from(rec.task)).clone();
        out.push(Example { x: rec.x, y: rec.y, task });
    }
    Ok(out)
}

pub fn save_stream(stream: &TaskStream, path: &Path) -> Result<()> {
    save_examples(&stream.examples, path)
}

/// Reads a JSONL stream; the ordering is the order tasks first appear in.
pub fn load_stream(path: &Path) -> Result<TaskStream> {
    let examples = load_examples(path)?;
    let mut ordering: Vec<TaskId> = Vec::new();
    for e in &examples {
        if ordering.last() != Some(e.hidden_task()) {
            if ordering.contains(e.hidden_task()) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: 0,
                    msg: format!("task `{}` is not contiguous in the stream", e.hidden_task()),
                });
            }
            ordering.push(e.hidden_task().clone());
        }
    }
    Ok(TaskStream { examples, ordering })
}

/// Writes `train.jsonl` and one `test_<task>.jsonl` per task into `dir`.
pub fn save_generated(data: &GeneratedData, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_stream(&data.stream, &dir.join("train.jsonl"))?;
    for t in &data.tests {
        save_examples(&t.examples, &dir.join(format!("test_{}.jsonl", t.task)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SuiteConfig {
        SuiteConfig {
            n_train: 50,
            n_test: 20,
            ..SuiteConfig::default()
        }
    }

    #[test]
    fn default_suite_shape() {
        let cfg = SuiteConfig::default();
        let suite = make_suite(&cfg).unwrap();
        assert_eq!(suite.len(), 5);
        assert_eq!(cfg.num_classes(), 20);
        let mut all: Vec<usize> = suite.iter().flat_map(|t| t.classes.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert_eq!(make_suite(&cfg).unwrap(), suite);
    }

    #[test]
    fn class_means_keep_the_margin() {
        let cfg = SuiteConfig::default();
        for task in make_suite(&cfg).unwrap() {
            for a in 0..task.means.len() {
                for b in a + 1..task.means.len() {
                    let d = task.means[a].iter().zip(&task.means[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                    assert!((d - cfg.class_margin()).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn infeasible_suites_are_rejected() {
        let too_many = SuiteConfig {
            classes_per_task: 40,
            ..SuiteConfig::default()
        };
        assert!(matches!(make_suite(&too_many), Err(Error::InfeasibleSuite(_))));
        let one_task = SuiteConfig {
            n_tasks: 1,
            ..SuiteConfig::default()
        };
        assert!(matches!(make_suite(&one_task), Err(Error::InfeasibleSuite(_))));
    }

    /// With equal priors and shared isotropic noise the Bayes classifier
    /// picks the nearest class mean.
    #[test]
    fn per_task_bayes_accuracy_at_default_difficulty() {
        let cfg = SuiteConfig::default();
        let suite = make_suite(&cfg).unwrap();
        let mut rng = seeds::rng(3, "bayes");
        for task in &suite {
            let correct = (0..10_000)
                .filter(|_| {
                    let e = task.sample(&mut rng);
                    let best = (0..task.classes.len())
                        .min_by(|&a, &b| {
                            let da: f64 = e.x.iter().zip(&task.means[a]).map(|(x, m)| (x - m).powi(2)).sum();
                            let db: f64 = e.x.iter().zip(&task.means[b]).map(|(x, m)| (x - m).powi(2)).sum();
                            da.total_cmp(&db)
                        })
                        .unwrap();
                    task.classes[best] == e.y
                })
                .count();
            assert!(correct as f64 / 1e4 >= 0.95, "{}: {}", task.name, correct);
        }
    }

    #[test]
    fn stream_is_grouped_and_complete() {
        let cfg = small();
        let suite = make_suite(&cfg).unwrap();
        let order = canonical_ordering("ii", 5).unwrap();
        let data = generate_stream(&suite, &order, 1).unwrap();
        assert_eq!(data.stream.len(), 5 * 50);
        let segs = data.stream.segments();
        assert_eq!(segs.len(), 5);
        for ((task, s, e), name) in segs.iter().zip(&order) {
            assert_eq!(task.as_str(), name);
            assert_eq!(e - s, 50);
        }
        for e in &data.stream.examples {
            let spec = suite.iter().find(|t| t.name == e.hidden_task().as_str()).unwrap();
            assert!(spec.classes.contains(&e.y));
        }
    }

    #[test]
    fn reversed_ordering_keeps_the_multiset() {
        let suite = make_suite(&small()).unwrap();
        let order = canonical_ordering("i", 5).unwrap();
        let mut rev = order.clone();
        rev.reverse();
        let a = generate_stream(&suite, &order, 4).unwrap();
        let b = generate_stream(&suite, &rev, 4).unwrap();
        assert_ne!(a.stream.examples, b.stream.examples);
        let key = |e: &Example| (e.x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), e.y);
        let mut ka: Vec<_> = a.stream.examples.iter().map(key).collect();
        let mut kb: Vec<_> = b.stream.examples.iter().map(key).collect();
        ka.sort();
        kb.sort();
        assert_eq!(ka, kb);
        assert_eq!(a.tests, b.tests);
    }

    #[test]
    fn shuffled_stream_has_the_same_multiset() {
        let suite = make_suite(&small()).unwrap();
        let data = generate_stream(&suite, &canonical_ordering("iii", 5).unwrap(), 2).unwrap();
        let mtl = data.stream.shuffled(9);
        assert_ne!(mtl.examples, data.stream.examples);
        let key = |e: &Example| (e.x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), e.y);
        let mut a: Vec<_> = data.stream.examples.iter().map(key).collect();
        let mut b: Vec<_> = mtl.examples.iter().map(key).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_task_in_ordering() {
        let suite = make_suite(&small()).unwrap();
        let order = vec!["task0".into(), "task9".into()];
        assert!(matches!(generate_stream(&suite, &order, 0), Err(Error::UnknownTask(t)) if t == "task9"));
    }

    #[test]
    fn canonical_orderings_are_permutations() {
        for name in ORDERINGS {
            let mut o = canonical_ordering(name, 5).unwrap();
            o.sort();
            assert_eq!(o, (0..5).map(task_name).collect::<Vec<_>>());
        }
        assert!(canonical_ordering("v", 5).is_err());
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = std::env::temp_dir().join(format!("memloom-taskgen-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let suite = make_suite(&small()).unwrap();
        let data = generate_stream(&suite, &canonical_ordering("iv", 5).unwrap(), 5).unwrap();
        let path = dir.join("train.jsonl");
        save_stream(&data.stream, &path).unwrap();
        assert_eq!(load_stream(&path).unwrap(), data.stream);

        let bad = dir.join("bad.jsonl");
        fs::write(&bad, "{\"x\":[1.0],\"y\":0,\"task\":\"a\"}\n{\"x\":[1.0],\"task\":\"a\"}\n").unwrap();
        match load_stream(&bad) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("`y`"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let ragged = dir.join("ragged.jsonl");
        fs::write(&ragged, "{\"x\":[1.0],\"y\":0,\"task\":\"a\"}\n{\"x\":[1.0,2.0],\"y\":0,\"task\":\"a\"}\n").unwrap();
        assert!(matches!(load_stream(&ragged), Err(Error::Parse { line: 2, .. })));
        fs::remove_dir_all(&dir).ok();
    }
}
