//! Episode construction for meta-training and evaluation.
//!
//! Every episode is a pure function of `(stream_seed, index)`. Novel classes
//! are picked from the stage's novel split; each selected class is shuffled
//! once and cut into support, query and unlabeled blocks, so the three sets
//! never share a source example. Base-class queries (and base unlabeled
//! samples) are drawn uniformly without replacement from the stage's base
//! split through one permutation whose prefix is the query block.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{keyed_rng, Purpose};
use crate::types::{
    relabel_novel, ClassId, DatasetBundle, Episode, EpisodeMode, EpisodeSources, EpisodeSpec,
    LabelMap, LabeledExample, SourceRef, Stage, UnlabeledSet,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub spec: EpisodeSpec,
    /// `(base, novel)` proportions of the unlabeled pool at test time.
    pub ratio_base_to_novel_unlabeled: (u32, u32),
    pub stream_seed: u64,
    pub stage: Stage,
}

impl SamplerConfig {
    pub fn new(spec: EpisodeSpec, stage: Stage) -> Self {
        let stream_seed = spec.seed;
        Self { spec, ratio_base_to_novel_unlabeled: (1, 1), stream_seed, stage }
    }

    pub fn with_ratio(mut self, base: u32, novel: u32) -> Self {
        self.ratio_base_to_novel_unlabeled = (base, novel);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.spec.mode == EpisodeMode::SemiSupervised
            && self.ratio_base_to_novel_unlabeled == (0, 0)
        {
            return Err(Error::Validation("unlabeled ratio must not be 0:0".into()));
        }
        Ok(())
    }

    /// `(base, novel)` unlabeled counts after applying the ratio to the
    /// template's total: novel = round(total * novel share), base = the rest.
    pub fn unlabeled_split(&self) -> (usize, usize) {
        let total = self.spec.n_unlabeled();
        let (rb, rn) = self.ratio_base_to_novel_unlabeled;
        if rb + rn == 0 {
            return (0, 0);
        }
        let novel = (total as f64 * rn as f64 / (rb + rn) as f64).round() as usize;
        (total - novel, novel)
    }
}

/// Per-block counts that drive one episode draw.
struct Counts {
    query_novel: usize,
    query_base: usize,
    unlabeled_novel: usize,
    unlabeled_base: usize,
}

/// Spreads `total` over `n` slots; the first `total % n` slots get one extra.
fn spread(total: usize, n: usize, slot: usize) -> usize {
    total / n + usize::from(slot < total % n)
}

fn draw(
    bundle: &DatasetBundle,
    cfg: &SamplerConfig,
    index: u64,
    counts: Counts,
) -> Result<(Episode, Vec<LabeledExample>)> {
    cfg.spec.validate()?;
    let spec = &cfg.spec;
    let novel_split = cfg.stage.novel_split();
    let base_split = cfg.stage.base_split();
    let n_base = bundle.n_base();

    let by_class = bundle.indices_by_class(novel_split);
    if by_class.len() < spec.n_way {
        return Err(Error::Sampling(format!(
            "{novel_split} has {} classes, need {}",
            by_class.len(),
            spec.n_way
        )));
    }
    let mut classes: Vec<ClassId> = by_class.keys().copied().collect();
    classes.shuffle(&mut keyed_rng(cfg.stream_seed, index, Purpose::NovelClasses));
    let mut chosen = classes[..spec.n_way].to_vec();
    chosen.sort_unstable();

    let novel_examples = bundle.split(novel_split);
    let mut support_raw = Vec::new();
    let mut sources = EpisodeSources::default();
    let mut query_novel = Vec::new();
    let mut unlabeled_novel = Vec::new();
    for (slot, &class) in chosen.iter().enumerate() {
        let q = spread(counts.query_novel, spec.n_way, slot);
        let u = spread(counts.unlabeled_novel, spec.n_way, slot);
        let need = spec.k_shot + q + u;
        let mut pool = by_class[&class].clone();
        if pool.len() < need {
            return Err(Error::Sampling(format!(
                "class {class} in {novel_split} has {} examples, need {need}",
                pool.len()
            )));
        }
        pool.shuffle(&mut keyed_rng(cfg.stream_seed, index, Purpose::NovelClass(class)));
        for &i in &pool[..spec.k_shot] {
            support_raw.push(novel_examples[i].clone());
            sources.support.push(SourceRef { split: novel_split, index: i });
        }
        query_novel.extend(pool[spec.k_shot..spec.k_shot + q].iter().copied());
        unlabeled_novel.extend(pool[spec.k_shot + q..need].iter().copied());
    }
    let (support, label_map) = relabel_novel(&support_raw, n_base)?;

    let base_examples = bundle.split(base_split);
    let n_base_draw = counts.query_base + counts.unlabeled_base;
    if base_examples.len() < n_base_draw {
        return Err(Error::Sampling(format!(
            "{base_split} has {} examples, need {n_base_draw}",
            base_examples.len()
        )));
    }
    // A full permutation keeps the query block independent of the unlabeled count.
    let mut base_pick: Vec<usize> = (0..base_examples.len()).collect();
    base_pick.shuffle(&mut keyed_rng(cfg.stream_seed, index, Purpose::BaseDraw));
    base_pick.truncate(n_base_draw);

    let mut query = Vec::new();
    for &i in &query_novel {
        let e = &novel_examples[i];
        query.push(LabeledExample::new(e.input.clone(), label_map.get(e.label).expect("chosen")));
        sources.query.push(SourceRef { split: novel_split, index: i });
    }
    for &i in &base_pick[..counts.query_base] {
        query.push(base_examples[i].clone());
        sources.query.push(SourceRef { split: base_split, index: i });
    }

    let mut unlabeled = Vec::new();
    for &i in &unlabeled_novel {
        let e = &novel_examples[i];
        unlabeled.push(LabeledExample::new(e.input.clone(), label_map.get(e.label).expect("chosen")));
        sources.unlabeled.push(SourceRef { split: novel_split, index: i });
    }
    for &i in &base_pick[counts.query_base..] {
        unlabeled.push(base_examples[i].clone());
        sources.unlabeled.push(SourceRef { split: base_split, index: i });
    }

    let episode = Episode {
        spec: spec.clone(),
        index,
        n_base,
        support,
        query,
        unlabeled: UnlabeledSet::default(),
        label_map,
        sources,
    };
    Ok((episode, unlabeled))
}

/// Support and novel queries from the novel split, base queries uniformly from
/// the base split, no unlabeled data.
pub fn sample_incremental_episode(
    bundle: &DatasetBundle,
    cfg: &SamplerConfig,
    index: u64,
) -> Result<Episode> {
    let counts = Counts {
        query_novel: cfg.spec.n_query_novel,
        query_base: cfg.spec.n_query_base,
        unlabeled_novel: 0,
        unlabeled_base: 0,
    };
    let (mut ep, _) = draw(bundle, cfg, index, counts)?;
    ep.sources.unlabeled.clear();
    Ok(ep)
}

/// As [`sample_incremental_episode`], plus an unlabeled pool of
/// `n_unlabeled_novel` novel and `n_unlabeled_base` base examples whose labels
/// are hidden.
pub fn sample_fake_unlabeled_episode(
    bundle: &DatasetBundle,
    cfg: &SamplerConfig,
    index: u64,
) -> Result<Episode> {
    if cfg.spec.mode == EpisodeMode::SemiSupervised && cfg.spec.n_unlabeled() == 0 {
        return Err(Error::Sampling("semi-supervised episode with no unlabeled samples".into()));
    }
    let counts = Counts {
        query_novel: cfg.spec.n_query_novel,
        query_base: cfg.spec.n_query_base,
        unlabeled_novel: cfg.spec.n_unlabeled_novel,
        unlabeled_base: cfg.spec.n_unlabeled_base,
    };
    let (mut ep, unlabeled) = draw(bundle, cfg, index, counts)?;
    ep.unlabeled = UnlabeledSet::new(unlabeled);
    Ok(ep)
}

/// Evaluation episode. Transductive mode aliases the unlabeled set to the
/// query set; semi-supervised mode draws a fresh pool split by the configured
/// base:novel ratio; inductive mode has no unlabeled data.
pub fn sample_test_episode(
    bundle: &DatasetBundle,
    cfg: &SamplerConfig,
    index: u64,
) -> Result<Episode> {
    cfg.validate()?;
    match cfg.spec.mode {
        EpisodeMode::Inductive => sample_incremental_episode(bundle, cfg, index),
        EpisodeMode::Transductive => {
            let mut ep = sample_incremental_episode(bundle, cfg, index)?;
            ep.unlabeled = UnlabeledSet::new(ep.query.clone());
            ep.sources.unlabeled = ep.sources.query.clone();
            Ok(ep)
        }
        EpisodeMode::SemiSupervised => {
            let (base, novel) = cfg.unlabeled_split();
            if base + novel == 0 {
                return Err(Error::Sampling(
                    "semi-supervised episode with no unlabeled samples".into(),
                ));
            }
            let counts = Counts {
                query_novel: cfg.spec.n_query_novel,
                query_base: cfg.spec.n_query_base,
                unlabeled_novel: novel,
                unlabeled_base: base,
            };
            let (mut ep, unlabeled) = draw(bundle, cfg, index, counts)?;
            ep.unlabeled = UnlabeledSet::new(unlabeled);
            Ok(ep)
        }
    }
}

/// Self-describing episode record: indices into the source bundle plus the
/// label map. Used for golden-file regression checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub format: String,
    pub version: u32,
    pub spec: EpisodeSpec,
    pub index: u64,
    pub n_base: usize,
    pub label_map: BTreeMap<ClassId, ClassId>,
    pub sources: EpisodeSources,
}

impl EpisodeRecord {
    pub const FORMAT: &'static str = "incfsl-episode";
    pub const VERSION: u32 = 1;

    pub fn from_episode(ep: &Episode) -> Self {
        Self {
            format: Self::FORMAT.into(),
            version: Self::VERSION,
            spec: ep.spec.clone(),
            index: ep.index,
            n_base: ep.n_base,
            label_map: ep.label_map.iter().collect(),
            sources: ep.sources.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("episode record serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let rec: Self = serde_json::from_str(s)?;
        if rec.format != Self::FORMAT || rec.version != Self::VERSION {
            return Err(Error::Format(format!(
                "unsupported episode record {} v{}",
                rec.format, rec.version
            )));
        }
        Ok(rec)
    }

    /// Rebuilds the episode from the bundle it was drawn from.
    pub fn materialize(&self, bundle: &DatasetBundle) -> Result<Episode> {
        let label_map = LabelMap::from_pairs(self.label_map.iter().map(|(&a, &b)| (a, b)))?;
        let fetch = |r: &SourceRef| -> Result<LabeledExample> {
            let e = bundle.split(r.split).get(r.index).ok_or_else(|| {
                Error::Format(format!("{}[{}] out of range", r.split, r.index))
            })?;
            let label = if r.split.is_base() {
                e.label
            } else {
                label_map.get(e.label).ok_or_else(|| {
                    Error::Format(format!("class {} missing from label map", e.label))
                })?
            };
            Ok(LabeledExample::new(e.input.clone(), label))
        };
        let support = self.sources.support.iter().map(fetch).collect::<Result<Vec<_>>>()?;
        let query = self.sources.query.iter().map(fetch).collect::<Result<Vec<_>>>()?;
        let unlabeled = self.sources.unlabeled.iter().map(fetch).collect::<Result<Vec<_>>>()?;
        Ok(Episode {
            spec: self.spec.clone(),
            index: self.index,
            n_base: self.n_base,
            support,
            query,
            unlabeled: UnlabeledSet::new(unlabeled),
            label_map,
            sources: self.sources.clone(),
        })
    }
}
