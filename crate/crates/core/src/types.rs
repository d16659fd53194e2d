//! Value types shared across the crate: examples, dataset splits, episodes,
//! classifier weights and prediction matrices.
//!
//! Class ids are dense and start at 1. Base classes occupy `1..=N_b`; inside
//! an episode the selected novel classes are relabeled to `N_b+1..=N_b+N`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};

pub type ClassId = u32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub input: Vec<f64>,
    pub label: ClassId,
}

impl LabeledExample {
    pub fn new(input: Vec<f64>, label: ClassId) -> Self {
        Self { input, label }
    }
}

/// Stacks example inputs into an `(n, dim)` matrix.
pub fn stack_inputs<'a, I>(inputs: I, dim: usize) -> Array2<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut flat = Vec::new();
    let mut rows = 0;
    for x in inputs {
        assert_eq!(x.len(), dim, "input dimension mismatch");
        flat.extend_from_slice(x);
        rows += 1;
    }
    Array2::from_shape_vec((rows, dim), flat).expect("row-major stack")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    BaseTrain,
    BaseVal,
    BaseTest,
    NovelTrain,
    NovelVal,
    NovelTest,
}

impl SplitName {
    pub const ALL: [SplitName; 6] = [
        SplitName::BaseTrain,
        SplitName::BaseVal,
        SplitName::BaseTest,
        SplitName::NovelTrain,
        SplitName::NovelVal,
        SplitName::NovelTest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::BaseTrain => "base_train",
            SplitName::BaseVal => "base_val",
            SplitName::BaseTest => "base_test",
            SplitName::NovelTrain => "novel_train",
            SplitName::NovelVal => "novel_val",
            SplitName::NovelTest => "novel_test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|n| n.as_str() == s)
    }

    pub fn is_base(self) -> bool {
        matches!(self, SplitName::BaseTrain | SplitName::BaseVal | SplitName::BaseTest)
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which pair of splits an episode is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Train,
    Val,
    Test,
}

impl Stage {
    pub fn base_split(self) -> SplitName {
        match self {
            Stage::Train => SplitName::BaseTrain,
            Stage::Val => SplitName::BaseVal,
            Stage::Test => SplitName::BaseTest,
        }
    }

    pub fn novel_split(self) -> SplitName {
        match self {
            Stage::Train => SplitName::NovelTrain,
            Stage::Val => SplitName::NovelVal,
            Stage::Test => SplitName::NovelTest,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub input_dim: usize,
    pub base_train: Vec<LabeledExample>,
    pub base_val: Vec<LabeledExample>,
    pub base_test: Vec<LabeledExample>,
    pub novel_train: Vec<LabeledExample>,
    pub novel_val: Vec<LabeledExample>,
    pub novel_test: Vec<LabeledExample>,
    pub base_classes: BTreeSet<ClassId>,
    pub novel_classes: BTreeSet<ClassId>,
}

impl DatasetBundle {
    pub fn split(&self, name: SplitName) -> &[LabeledExample] {
        match name {
            SplitName::BaseTrain => &self.base_train,
            SplitName::BaseVal => &self.base_val,
            SplitName::BaseTest => &self.base_test,
            SplitName::NovelTrain => &self.novel_train,
            SplitName::NovelVal => &self.novel_val,
            SplitName::NovelTest => &self.novel_test,
        }
    }

    pub fn split_mut(&mut self, name: SplitName) -> &mut Vec<LabeledExample> {
        match name {
            SplitName::BaseTrain => &mut self.base_train,
            SplitName::BaseVal => &mut self.base_val,
            SplitName::BaseTest => &mut self.base_test,
            SplitName::NovelTrain => &mut self.novel_train,
            SplitName::NovelVal => &mut self.novel_val,
            SplitName::NovelTest => &mut self.novel_test,
        }
    }

    pub fn n_base(&self) -> usize {
        self.base_classes.len()
    }

    /// Distinct labels present in a split.
    pub fn classes_in(&self, name: SplitName) -> BTreeSet<ClassId> {
        self.split(name).iter().map(|e| e.label).collect()
    }

    /// Example indices of a split grouped by label.
    pub fn indices_by_class(&self, name: SplitName) -> BTreeMap<ClassId, Vec<usize>> {
        let mut out: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.split(name).iter().enumerate() {
            out.entry(e.label).or_default().push(i);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    SharedClass(ClassId),
    NovelSplitOverlap { a: SplitName, b: SplitName, class: ClassId },
    ForeignLabel { split: SplitName, index: usize, label: ClassId },
    WrongDimension { split: SplitName, index: usize, len: usize },
    BaseIdsNotDense,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::SharedClass(c) => write!(f, "class {c} is both base and novel"),
            Violation::NovelSplitOverlap { a, b, class } => {
                write!(f, "class {class} appears in both {a} and {b}")
            }
            Violation::ForeignLabel { split, index, label } => {
                write!(f, "{split}[{index}] has label {label} outside the split's class set")
            }
            Violation::WrongDimension { split, index, len } => {
                write!(f, "{split}[{index}] has {len} features")
            }
            Violation::BaseIdsNotDense => write!(f, "base class ids are not exactly 1..=N_b"),
        }
    }
}

/// Checks the bundle invariants without modifying it. An empty list means valid.
pub fn validate_bundle(bundle: &DatasetBundle) -> Vec<Violation> {
    let mut out = Vec::new();
    for c in bundle.base_classes.intersection(&bundle.novel_classes) {
        out.push(Violation::SharedClass(*c));
    }
    let nb = bundle.base_classes.len() as ClassId;
    if !bundle.base_classes.iter().copied().eq(1..=nb) {
        out.push(Violation::BaseIdsNotDense);
    }
    let novel = [SplitName::NovelTrain, SplitName::NovelVal, SplitName::NovelTest];
    for (i, a) in novel.iter().enumerate() {
        for b in &novel[i + 1..] {
            let ca = bundle.classes_in(*a);
            let cb = bundle.classes_in(*b);
            for c in ca.intersection(&cb) {
                out.push(Violation::NovelSplitOverlap { a: *a, b: *b, class: *c });
            }
        }
    }
    for name in SplitName::ALL {
        let allowed = if name.is_base() { &bundle.base_classes } else { &bundle.novel_classes };
        for (index, e) in bundle.split(name).iter().enumerate() {
            if !allowed.contains(&e.label) {
                out.push(Violation::ForeignLabel { split: name, index, label: e.label });
            }
            if e.input.len() != bundle.input_dim {
                out.push(Violation::WrongDimension { split: name, index, len: e.input.len() });
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeMode {
    Inductive,
    Transductive,
    SemiSupervised,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query_novel: usize,
    pub n_query_base: usize,
    pub n_unlabeled_novel: usize,
    pub n_unlabeled_base: usize,
    pub mode: EpisodeMode,
    pub seed: u64,
}

impl EpisodeSpec {
    /// 5-way K-shot evaluation template: 15 queries per novel class, 75 base
    /// queries, and 30 (1-shot) or 50 (otherwise) unlabeled samples per novel
    /// class with an equal number of base samples.
    pub fn standard(k_shot: usize, mode: EpisodeMode, seed: u64) -> Self {
        let per_class = if k_shot == 1 { 30 } else { 50 };
        Self {
            n_way: 5,
            k_shot,
            n_query_novel: 75,
            n_query_base: 75,
            n_unlabeled_novel: 5 * per_class,
            n_unlabeled_base: 5 * per_class,
            mode,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 {
            return Err(Error::Validation("n_way and k_shot must be at least 1".into()));
        }
        Ok(())
    }

    pub fn n_unlabeled(&self) -> usize {
        self.n_unlabeled_novel + self.n_unlabeled_base
    }
}

/// Mapping from original novel class ids to episode labels.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    forward: BTreeMap<ClassId, ClassId>,
}

impl LabelMap {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (ClassId, ClassId)>) -> Result<Self> {
        let mut forward = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for (orig, ep) in pairs {
            if let Some(prev) = forward.insert(orig, ep) {
                if prev != ep {
                    return Err(Error::Validation(format!(
                        "class {orig} maps to both {prev} and {ep}"
                    )));
                }
            } else if !seen.insert(ep) {
                return Err(Error::Validation(format!("episode label {ep} assigned twice")));
            }
        }
        Ok(Self { forward })
    }

    pub fn get(&self, original: ClassId) -> Option<ClassId> {
        self.forward.get(&original).copied()
    }

    pub fn inverse(&self, episode_label: ClassId) -> Option<ClassId> {
        self.forward.iter().find(|(_, &e)| e == episode_label).map(|(&o, _)| o)
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, ClassId)> + '_ {
        self.forward.iter().map(|(&a, &b)| (a, b))
    }
}

/// Relabels novel-class examples to `n_base+1..=n_base+N`, assigning labels
/// in ascending order of original class id.
pub fn relabel_novel(
    support_raw: &[LabeledExample],
    n_base: usize,
) -> Result<(Vec<LabeledExample>, LabelMap)> {
    let originals: BTreeSet<ClassId> = support_raw.iter().map(|e| e.label).collect();
    let map = LabelMap::from_pairs(
        originals
            .iter()
            .enumerate()
            .map(|(j, &c)| (c, (n_base + 1 + j) as ClassId)),
    )?;
    let relabeled = support_raw
        .iter()
        .map(|e| LabeledExample::new(e.input.clone(), map.get(e.label).expect("mapped")))
        .collect();
    Ok((relabeled, map))
}

/// Position of an episode member inside the source bundle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SourceRef {
    pub split: SplitName,
    pub index: usize,
}

/// Unlabeled examples whose labels are only reachable through the oracle view.
#[derive(Debug, Default)]
pub struct UnlabeledSet {
    inputs: Vec<Vec<f64>>,
    hidden_labels: Vec<ClassId>,
    oracle_reads: AtomicUsize,
}

impl Clone for UnlabeledSet {
    fn clone(&self) -> Self {
        Self {
            inputs: self.inputs.clone(),
            hidden_labels: self.hidden_labels.clone(),
            oracle_reads: AtomicUsize::new(self.oracle_reads.load(Ordering::Relaxed)),
        }
    }
}

impl PartialEq for UnlabeledSet {
    fn eq(&self, other: &Self) -> bool {
        self.inputs == other.inputs && self.hidden_labels == other.hidden_labels
    }
}

impl UnlabeledSet {
    pub fn new(examples: Vec<LabeledExample>) -> Self {
        let (inputs, hidden_labels) = examples.into_iter().map(|e| (e.input, e.label)).unzip();
        Self { inputs, hidden_labels, oracle_reads: AtomicUsize::new(0) }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Learning view.
    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    /// Oracle view; every call is counted.
    pub fn oracle_labels(&self) -> &[ClassId] {
        self.oracle_reads.fetch_add(1, Ordering::Relaxed);
        &self.hidden_labels
    }

    pub fn oracle_reads(&self) -> usize {
        self.oracle_reads.load(Ordering::Relaxed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub spec: EpisodeSpec,
    pub index: u64,
    pub n_base: usize,
    pub support: Vec<LabeledExample>,
    pub query: Vec<LabeledExample>,
    pub unlabeled: UnlabeledSet,
    pub label_map: LabelMap,
    pub sources: EpisodeSources,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSources {
    pub support: Vec<SourceRef>,
    pub query: Vec<SourceRef>,
    pub unlabeled: Vec<SourceRef>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.label_map.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_base + self.n_way()
    }

    pub fn input_dim(&self) -> usize {
        self.support.first().map(|e| e.input.len()).unwrap_or(0)
    }

    pub fn support_inputs(&self) -> Array2<f64> {
        let d = self.input_dim();
        stack_inputs(self.support.iter().map(|e| e.input.as_slice()), d)
    }

    pub fn query_inputs(&self) -> Array2<f64> {
        let d = self.input_dim();
        stack_inputs(self.query.iter().map(|e| e.input.as_slice()), d)
    }

    pub fn unlabeled_inputs(&self) -> Array2<f64> {
        let d = self.input_dim();
        stack_inputs(self.unlabeled.inputs().iter().map(|v| v.as_slice()), d)
    }

    /// Zero-based class columns of the support labels.
    pub fn support_columns(&self) -> Vec<usize> {
        self.support.iter().map(|e| e.label as usize - 1).collect()
    }

    pub fn query_columns(&self) -> Vec<usize> {
        self.query.iter().map(|e| e.label as usize - 1).collect()
    }

    pub fn is_base_label(&self, label: ClassId) -> bool {
        (label as usize) <= self.n_base
    }
}

/// Column-per-class weights `W = [W_b, W_n]` in feature space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierWeights {
    /// `d x N_b`
    pub base: Array2<f64>,
    /// `d x N`, possibly with zero columns
    pub novel: Array2<f64>,
}

impl ClassifierWeights {
    pub fn new(base: Array2<f64>, novel: Array2<f64>) -> Result<Self> {
        if base.nrows() != novel.nrows() {
            return Err(shape(format!(
                "base weights have d={} but novel weights have d={}",
                base.nrows(),
                novel.nrows()
            )));
        }
        if base.iter().chain(novel.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Validation("classifier weights contain non-finite entries".into()));
        }
        Ok(Self { base, novel })
    }

    pub fn d(&self) -> usize {
        self.base.nrows()
    }

    pub fn n_base(&self) -> usize {
        self.base.ncols()
    }

    pub fn n_novel(&self) -> usize {
        self.novel.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_base() + self.n_novel()
    }

    /// `[W_b, W_n]`, base columns first.
    pub fn joint(&self) -> Array2<f64> {
        concatenate(Axis(1), &[self.base.view(), self.novel.view()]).expect("same d")
    }
}

/// Row-stochastic `n x C` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMatrix {
    probs: Array2<f64>,
}

impl PredictionMatrix {
    pub const ROW_TOLERANCE: f64 = 1e-6;

    pub fn new(probs: Array2<f64>) -> Result<Self> {
        for (i, row) in probs.rows().into_iter().enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Validation(format!("row {i} has an entry outside [0, 1]")));
            }
            let s = row.sum();
            if (s - 1.0).abs() > Self::ROW_TOLERANCE {
                return Err(Error::Validation(format!("row {i} sums to {s}")));
            }
        }
        Ok(Self { probs })
    }

    /// Row-wise softmax of `logits`.
    pub fn from_logits(logits: &Array2<f64>) -> Self {
        let probs = crate::tape::log_softmax_rows(logits).mapv(f64::exp);
        Self { probs }
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.probs
    }

    pub fn n_rows(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.probs.ncols()
    }

    /// Argmax per row; ties go to the lowest column.
    pub fn argmax(&self) -> Vec<usize> {
        self.probs.rows().into_iter().map(|r| argmax(r.iter().copied())).collect()
    }
}

pub(crate) fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}
