//! Episodic memory: admission policies, exact nearest-neighbour lookup and
//! uniform replay sampling.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taskgen::{Example, TaskId};

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry {
    pub key: Vec<f64>,
    pub x: Vec<f64>,
    pub y: usize,
    /// Stream position at insertion.
    pub step: u64,
    origin: Option<TaskId>,
}

impl MemoryEntry {
    pub fn new(key: Vec<f64>, x: Vec<f64>, y: usize, step: u64) -> Self {
        MemoryEntry {
            key,
            x,
            y,
            step,
            origin: None,
        }
    }

    /// Entry for a stream example, carrying its hidden task along for reports.
    pub fn from_example(example: &Example, key: Vec<f64>, step: u64) -> Self {
        MemoryEntry {
            key,
            x: example.x.clone(),
            y: example.y,
            step,
            origin: Some(example.hidden_task().clone()),
        }
    }

    /// Evaluation-only provenance.
    pub fn hidden_task(&self) -> Option<&TaskId> {
        self.origin.as_ref()
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Append-only store of keyed examples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodicMemory {
    entries: Vec<MemoryEntry>,
}

impl EpisodicMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn push(&mut self, entry: MemoryEntry) {
        self.entries.push(entry);
    }

    /// Smallest squared key distance to any stored entry.
    pub fn min_sq_dist(&self, key: &[f64]) -> Option<f64> {
        self.entries.iter().map(|e| sq_dist(key, &e.key)).min_by(f64::total_cmp)
    }

    /// The `min(k, len)` entries closest to `query`, nearest first. Equal
    /// distances are ordered by write step, then by insertion order.
    pub fn knn(&self, query: &[f64], k: usize) -> Vec<&MemoryEntry> {
        self.knn_indices(query, k).into_iter().map(|i| &self.entries[i]).collect()
    }

    pub fn knn_indices(&self, query: &[f64], k: usize) -> Vec<usize> {
        let mut scored: Vec<(f64, u64, usize)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (sq_dist(query, &e.key), e.step, i))
            .collect();
        let cmp = |a: &(f64, u64, usize), b: &(f64, u64, usize)| {
            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
        };
        let k = k.min(scored.len());
        if k == 0 {
            return Vec::new();
        }
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        scored.into_iter().map(|s| s.2).collect()
    }

    /// `n` entries drawn uniformly with replacement.
    pub fn sample_uniform(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<&MemoryEntry>> {
        if self.entries.is_empty() {
            return Err(Error::Empty("episodic memory"));
        }
        Ok((0..n).map(|_| &self.entries[rng.gen_range(0..self.entries.len())]).collect())
    }

    pub fn save_snapshot(&self, path: &Path, key_dim: usize, policy: &WritePolicy) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header = SnapshotHeader {
            key_dim,
            policy: policy.clone(),
            count: self.entries.len(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for e in &self.entries {
            let line = SnapshotLine {
                key: e.key.clone(),
                x: e.x.clone(),
                y: e.y,
                step: e.step,
                task: e.origin.as_ref().map(|t| t.to_string()),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_snapshot(path: &Path) -> Result<(EpisodicMemory, SnapshotHeader)> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut lines = BufReader::new(File::open(path)?).lines();
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let header: SnapshotHeader = match lines.next() {
            Some(l) => serde_json::from_str(&l?).map_err(|e| err(1, e.to_string()))?,
            None => return Err(err(1, "missing header".into())),
        };
        let mut mem = EpisodicMemory::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            let rec: SnapshotLine = serde_json::from_str(&line).map_err(|e| err(i + 2, e.to_string()))?;
            if rec.key.len() != header.key_dim {
                return Err(err(i + 2, format!("key has {} dims, header says {}", rec.key.len(), header.key_dim)));
            }
            mem.push(MemoryEntry {
                key: rec.key,
                x: rec.x,
                y: rec.y,
                step: rec.step,
                origin: rec.task.map(TaskId::from),
            });
        }
        if mem.len() != header.count {
            return Err(err(0, format!("header count {} but {} entries", header.count, mem.len())));
        }
        Ok((mem, header))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotHeader {
    pub key_dim: usize,
    pub policy: WritePolicy,
    pub count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotLine {
    key: Vec<f64>,
    x: Vec<f64>,
    y: usize,
    step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    task: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiversityRule {
    /// `1 − exp(−d²/β)`: far-from-memory examples are favoured.
    Intuitive,
    /// `exp(−d²/β)`: near-memory examples are favoured.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum WritePolicy {
    Random { rate: f64 },
    Diversity { beta: f64, rule: DiversityRule },
    Uncertainty { target_rate: f64 },
    Forgettable { target_rate: f64, recheck_period: u64 },
}

impl WritePolicy {
    pub fn name(&self) -> &'static str {
        match self {
            WritePolicy::Random { .. } => "random",
            WritePolicy::Diversity { .. } => "diversity",
            WritePolicy::Uncertainty { .. } => "uncertainty",
            WritePolicy::Forgettable { .. } => "forgettable",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rate_ok = |r: f64| (0.0..=1.0).contains(&r);
        let ok = match *self {
            WritePolicy::Random { rate } => rate_ok(rate),
            WritePolicy::Diversity { beta, .. } => beta > 0.0 && beta.is_finite(),
            WritePolicy::Uncertainty { target_rate } => rate_ok(target_rate),
            WritePolicy::Forgettable {
                target_rate,
                recheck_period,
            } => rate_ok(target_rate) && recheck_period > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid write policy {self:?}")))
        }
    }
}

/// Per-example evidence the policies may consult.
#[derive(Clone, Copy, Debug, Default)]
pub struct WriteSignals {
    /// Predicted probability of the true label.
    pub confidence: f64,
    pub forget_events: u32,
}

/// Diversity admission probability for squared distance `d2` to memory.
pub fn diversity_probability(d2_min: Option<f64>, beta: f64, rule: DiversityRule) -> f64 {
    let Some(d2) = d2_min else { return 1.0 };
    let decay = (-d2 / beta).exp();
    match rule {
        DiversityRule::Intuitive => 1.0 - decay,
        DiversityRule::Literal => decay,
    }
}

/// Stateful admission controller wrapping a [`WritePolicy`].
///
/// The uncertainty rule keeps a running confidence threshold tuned by a
/// Robbins-Monro update in log space, so the admitted fraction tracks its
/// target however small the matching confidence quantile is. The
/// forgettable rule admits examples with at least one forgetting event while
/// the admitted count stays under `target_rate × examples seen`.
#[derive(Clone, Debug)]
pub struct MemoryWriter {
    policy: WritePolicy,
    threshold: f64,
    threshold_step: f64,
    seen: u64,
    admitted: u64,
}

impl MemoryWriter {
    pub fn new(policy: WritePolicy) -> Self {
        MemoryWriter {
            policy,
            threshold: 0.5,
            threshold_step: 0.002,
            seen: 0,
            admitted: 0,
        }
    }

    pub fn policy(&self) -> &WritePolicy {
        &self.policy
    }

    /// Current confidence threshold of the uncertainty rule.
    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn admitted(&self) -> u64 {
        self.admitted
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    fn quota_allows(&self, target_rate: f64) -> bool {
        (self.admitted as f64) < target_rate * self.seen as f64
    }

    /// Probability of admitting an example with `key` given the memory as it is now.
    pub fn write_probability(&self, mem: &EpisodicMemory, key: &[f64], signals: WriteSignals) -> f64 {
        match self.policy {
            WritePolicy::Random { rate } => rate,
            WritePolicy::Diversity { beta, rule } => diversity_probability(mem.min_sq_dist(key), beta, rule),
            WritePolicy::Uncertainty { target_rate } => {
                if target_rate > 0.0 && signals.confidence < self.threshold {
                    1.0
                } else {
                    0.0
                }
            }
            WritePolicy::Forgettable { target_rate, .. } => {
                if signals.forget_events >= 1 && self.quota_allows(target_rate) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Counts one new stream example toward the running rates.
    pub fn observe_stream_example(&mut self) {
        self.seen += 1;
    }

    /// Draws the admission decision for `entry` and appends it on success.
    pub fn maybe_write(&mut self, mem: &mut EpisodicMemory, entry: MemoryEntry, signals: WriteSignals, rng: &mut impl Rng) -> bool {
        let p = self.write_probability(mem, &entry.key, signals).clamp(0.0, 1.0);
        // always consume one draw so the rng trace does not depend on p
        let u: f64 = rng.gen();
        let wrote = u < p;
        if let WritePolicy::Uncertainty { target_rate } = self.policy {
            let hit = if signals.confidence < self.threshold { 1.0 } else { 0.0 };
            if target_rate > 0.0 {
                let log_step = self.threshold_step * (target_rate - hit) / target_rate;
                self.threshold = (self.threshold * log_step.exp()).min(1.0);
            }
        }
        if wrote {
            mem.push(entry);
            self.admitted += 1;
        }
        wrote
    }
}

/// Bounded buffer of recent stream examples re-scored periodically to count
/// forgetting events.
#[derive(Clone, Debug)]
pub struct ForgettingTracker {
    capacity: usize,
    candidates: VecDeque<Candidate>,
    next_id: u64,
}

#[derive(Clone, Debug)]
pub struct Candidate {
    pub id: u64,
    pub example: Example,
    pub key: Vec<f64>,
    pub step: u64,
    pub ever_correct: bool,
    pub forget_events: u32,
}

impl ForgettingTracker {
    pub fn new(capacity: usize) -> Self {
        ForgettingTracker {
            capacity: capacity.max(1),
            candidates: VecDeque::new(),
            next_id: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Adds a candidate, evicting the oldest when full. Returns its id.
    pub fn track(&mut self, example: Example, key: Vec<f64>, step: u64) -> u64 {
        if self.candidates.len() == self.capacity {
            self.candidates.pop_front();
        }
        let id = self.next_id;
        self.next_id += 1;
        self.candidates.push_back(Candidate {
            id,
            example,
            key,
            step,
            ever_correct: false,
            forget_events: 0,
        });
        id
    }

    pub fn get(&self, id: u64) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.id == id)
    }

    /// Increments the forgetting count of `id` when flagged. Returns the
    /// updated count, or `None` for an id no longer tracked.
    pub fn record_forget_event(&mut self, id: u64, was_correct_now_incorrect: bool) -> Option<u32> {
        let c = self.candidates.iter_mut().find(|c| c.id == id)?;
        if was_correct_now_incorrect {
            c.forget_events += 1;
        }
        Some(c.forget_events)
    }

    /// Re-scores every candidate. A candidate that has been classified
    /// correctly at some earlier recheck and is wrong now gains one event.
    pub fn recheck(&mut self, mut is_correct: impl FnMut(&Example) -> Result<bool>) -> Result<()> {
        let mut flags = Vec::with_capacity(self.candidates.len());
        for c in self.candidates.iter_mut() {
            let correct = is_correct(&c.example)?;
            flags.push((c.id, c.ever_correct && !correct));
            c.ever_correct |= correct;
        }
        for (id, flag) in flags {
            self.record_forget_event(id, flag);
        }
        Ok(())
    }

    /// Ids of candidates with at least one forgetting event, oldest first.
    pub fn forgotten_ids(&self) -> Vec<u64> {
        self.candidates.iter().filter(|c| c.forget_events >= 1).map(|c| c.id).collect()
    }

    pub fn remove(&mut self, id: u64) -> Option<Candidate> {
        let pos = self.candidates.iter().position(|c| c.id == id)?;
        self.candidates.remove(pos)
    }

    /// Removes and returns the candidates that have at least one forgetting event.
    pub fn drain_forgotten(&mut self) -> Vec<Candidate> {
        let (forgotten, kept): (Vec<_>, Vec<_>) = self.candidates.drain(..).partition(|c| c.forget_events >= 1);
        self.candidates = kept.into();
        forgotten
    }
}

/// Finds `β` so that the diversity rule admits roughly `target_rate` of
/// `keys` when replayed in order. Bisection on `log β`.
pub fn calibrate_diversity_beta(keys: &[Vec<f64>], rule: DiversityRule, target_rate: f64, rng_seed: u64) -> f64 {
    use rand::SeedableRng;
    let rate_for = |beta: f64| {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(rng_seed);
        let mut stored: Vec<&[f64]> = Vec::new();
        for k in keys {
            let d2 = stored.iter().map(|s| sq_dist(k, s)).min_by(f64::total_cmp);
            let p = diversity_probability(d2, beta, rule);
            if rng.gen::<f64>() < p {
                stored.push(k);
            }
        }
        stored.len() as f64 / keys.len().max(1) as f64
    };
    let (mut lo, mut hi) = (-10.0f64, 30.0f64);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let rate = rate_for(mid.exp());
        let too_many = rate > target_rate;
        // the intuitive rule writes less as β grows, the literal rule more
        match (rule, too_many) {
            (DiversityRule::Intuitive, true) | (DiversityRule::Literal, false) => lo = mid,
            _ => hi = mid,
        }
    }
    (0.5 * (lo + hi)).exp()
}
