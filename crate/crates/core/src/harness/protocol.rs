//! Evaluation protocols: fixed splits, neighboring-era pairs and stratified
//! learning-curve partitions, plus the names used for features, rows and tasks.

use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EraLabel, Manifest, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    IfvSift,
    Cn11,
    Dd25,
    Dd50,
    Rcc,
    Dunnet,
}

impl Feature {
    pub const ALL: [Feature; 6] = [
        Feature::IfvSift,
        Feature::Cn11,
        Feature::Dd25,
        Feature::Dd50,
        Feature::Rcc,
        Feature::Dunnet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Feature::IfvSift => "ifv_sift",
            Feature::Cn11 => "cn11",
            Feature::Dd25 => "dd25",
            Feature::Dd50 => "dd50",
            Feature::Rcc => "rcc",
            Feature::Dunnet => "dunnet",
        }
    }

    /// Number of DD categories for the DD variants.
    pub fn dd_categories(self) -> Option<usize> {
        match self {
            Feature::Dd25 => Some(25),
            Feature::Dd50 => Some(50),
            _ => None,
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Feature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Feature::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown feature `{s}`")))
    }
}

/// Parses a comma-separated feature list, keeping canonical order without repeats.
pub fn parse_features(s: &str) -> Result<Vec<Feature>> {
    let mut out: Vec<Feature> = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(Error::InvalidArgument("feature list is empty".into()));
    }
    Ok(out)
}

/// One table row: a single feature or a kernel-averaged combination.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Row(pub Vec<Feature>);

impl Row {
    pub fn name(&self) -> String {
        self.0.iter().map(|f| f.name()).collect::<Vec<_>>().join("+")
    }

    pub fn is_subset_of(&self, features: &[Feature]) -> bool {
        self.0.iter().all(|f| features.contains(f))
    }
}

impl FromStr for Row {
    type Err = Error;

    /// `ifv_sift+rcc`; components keep the written order.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = Vec::new();
        for p in s.split('+').map(str::trim) {
            let f: Feature = p.parse()?;
            if parts.contains(&f) {
                return Err(Error::InvalidArgument(format!("feature `{p}` repeated in row `{s}`")));
            }
            parts.push(f);
        }
        Ok(Row(parts))
    }
}

/// Single-feature rows, then configured combinations that fit the feature
/// set, then the combination of every feature when there are several.
pub fn table_rows(features: &[Feature], combinations: &[String]) -> Result<Vec<Row>> {
    let mut rows: Vec<Row> = features.iter().map(|&f| Row(vec![f])).collect();
    let mut extra: Vec<Row> = Vec::new();
    for c in combinations {
        let row: Row = c.parse()?;
        if row.0.len() > 1 && row.is_subset_of(features) {
            extra.push(row);
        }
    }
    if features.len() > 1 {
        extra.push(Row(features.to_vec()));
    }
    for row in extra {
        let mut key = row.0.clone();
        key.sort();
        if !rows.iter().any(|r| {
            let mut k = r.0.clone();
            k.sort();
            k == key
        }) {
            rows.push(row);
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    SixClass,
    Pair(EraLabel, EraLabel),
}

impl Task {
    /// The five neighboring pairs followed by the six-class task.
    pub fn table_columns() -> Vec<Task> {
        let mut out: Vec<Task> = EraLabel::neighboring_pairs().iter().map(|&(a, b)| Task::Pair(a, b)).collect();
        out.push(Task::SixClass);
        out
    }

    pub fn pair(a: EraLabel, b: EraLabel) -> Result<Task> {
        if a == b {
            return Err(Error::SameEra(a.name().into()));
        }
        Ok(Task::Pair(a.min(b), a.max(b)))
    }

    pub fn classes(&self) -> Vec<EraLabel> {
        match *self {
            Task::SixClass => EraLabel::ALL.to_vec(),
            Task::Pair(a, b) => vec![a, b],
        }
    }

    pub fn name(&self) -> String {
        match self {
            Task::SixClass => "six-class".into(),
            Task::Pair(a, b) => format!("{}-{}", a.name(), b.name()),
        }
    }

    /// Position of `era` among the task classes.
    pub fn class_index(&self, era: EraLabel) -> Option<usize> {
        self.classes().iter().position(|&e| e == era)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "six-class" || s == "multiclass" {
            return Ok(Task::SixClass);
        }
        let (a, b) = s
            .split_once(['-', ','])
            .ok_or_else(|| Error::InvalidArgument(format!("task `{s}` is neither six-class nor A-B")))?;
        Task::pair(a.trim().parse()?, b.trim().parse()?)
    }
}

/// What `run_experiment` should do.
#[derive(Debug, Clone, PartialEq)]
pub enum ExperimentTask {
    Multiclass,
    Pair(EraLabel, EraLabel),
    /// Six-class plus the five neighboring pairs.
    Table,
    LearningCurve,
    Date,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub manifest: PathBuf,
    pub features: Vec<Feature>,
    pub task: ExperimentTask,
    pub seed: u64,
    pub out: PathBuf,
    /// Restrict pair tasks to neighboring eras.
    pub adjacent_pairs_only: bool,
    /// Predict-row manifest for `Date`; defaults to the main manifest.
    pub paintings: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::InvalidArgument("an experiment needs at least one feature".into()));
        }
        if let ExperimentTask::Pair(a, b) = self.task {
            let task = Task::pair(a, b)?;
            if self.adjacent_pairs_only && !Task::table_columns().contains(&task) {
                return Err(Error::InvalidArgument(format!("{task} is not a pair of neighboring eras")));
            }
        }
        Ok(())
    }

    pub fn tasks(&self) -> Vec<Task> {
        match self.task {
            ExperimentTask::Pair(a, b) => vec![Task::Pair(a.min(b), a.max(b))],
            ExperimentTask::Table => Task::table_columns(),
            _ => vec![Task::SixClass],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedSplit {
    pub train: Manifest,
    pub test: Manifest,
    pub val: Manifest,
}

impl FixedSplit {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.entries.len(), self.test.entries.len(), self.val.entries.len())
    }
}

/// Per-class counts of a manifest, in era order.
pub fn class_counts(manifest: &Manifest) -> [usize; EraLabel::COUNT] {
    let mut counts = [0; EraLabel::COUNT];
    for e in &manifest.entries {
        if let Some(l) = e.label {
            counts[l.index()] += 1;
        }
    }
    counts
}

/// Partitions labelled rows by split tag. Predict rows are ignored.
pub fn split_fixed(manifest: &Manifest) -> Result<FixedSplit> {
    let mut seen = HashSet::new();
    for e in &manifest.entries {
        if !seen.insert(e.id()) {
            return Err(Error::DuplicateId(e.id()));
        }
    }
    let pick = |s: Split| manifest.filter(|e| e.split == s && e.label.is_some());
    let split = FixedSplit {
        train: pick(Split::Train),
        test: pick(Split::Test),
        val: pick(Split::Val),
    };
    if split.train.entries.is_empty() {
        return Err(Error::MissingSplit("train".into()));
    }
    let (n, t, v) = split.sizes();
    if t == 0 || v == 0 {
        log::warn!("split sizes train {n}, test {t}, val {v}");
    }
    for (name, m) in [("train", &split.train), ("test", &split.test), ("val", &split.val)] {
        let counts = class_counts(m);
        let total: usize = counts.iter().sum();
        if total > 0 {
            let pct: Vec<String> = counts.iter().map(|&c| format!("{:.1}%", 100.0 * c as f64 / total as f64)).collect();
            log::info!("{name}: {total} rows, per class {}", pct.join(" "));
        }
    }
    Ok(split)
}

/// Rows labelled `a` or `b`, split tags preserved.
pub fn pair_dataset(manifest: &Manifest, a: EraLabel, b: EraLabel) -> Result<Manifest> {
    if a == b {
        return Err(Error::SameEra(a.name().into()));
    }
    let out = manifest.filter(|e| e.label == Some(a) || e.label == Some(b));
    if out.entries.is_empty() {
        return Err(Error::EmptyPair {
            a: a.name().into(),
            b: b.name().into(),
        });
    }
    Ok(out)
}

/// Splits indices into (train, test) keeping `round(fraction * n_c)` of each
/// class for training. Both lists come back sorted.
pub fn stratified_partition(labels: &[usize], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(rng);
        let k = (fraction * members.len() as f64).round() as usize;
        train.extend_from_slice(&members[..k]);
        test.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// `repetitions` stratified partitions per fraction from one seeded stream.
pub fn learning_curve_partitions(
    labels: &[usize],
    fractions: &[f64],
    repetitions: usize,
    seed: u64,
) -> Vec<Vec<(Vec<usize>, Vec<usize>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fractions
        .iter()
        .map(|&f| (0..repetitions).map(|_| stratified_partition(labels, f, &mut rng)).collect())
        .collect()
}

/// Independent seed for a named stage, derived from the run seed.
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, then a splitmix64 finalizer
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in tag.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
