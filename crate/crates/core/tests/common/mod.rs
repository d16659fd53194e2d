//! Shared fixtures, finite-difference checks, brute-force oracles and
//! property checks. Used by the integration tests and the acceptance runner.
#![allow(dead_code)]

pub mod grad;
pub mod oracle;
pub mod props;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use incfsl::experiment::{DatasetSource, ExperimentConfig};
use incfsl::model::{ExtractorSpec, ModelState};
use incfsl::rng::{keyed_rng, Purpose};
use incfsl::synth::SyntheticSpec;
use incfsl::types::{
    ClassId, Episode, EpisodeMode, EpisodeSources, EpisodeSpec, LabelMap, LabeledExample, UnlabeledSet,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    keyed_rng(seed, 0xfeed, Purpose::Shuffle)
}

pub fn randn(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

pub fn randv(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Hand-built episode. Support labels must be episode labels
/// `n_base+1..=n_base+n_way`; query labels may be any class.
pub fn episode(
    n_base: usize,
    n_way: usize,
    support: Vec<(Vec<f64>, ClassId)>,
    query: Vec<(Vec<f64>, ClassId)>,
    unlabeled: Vec<(Vec<f64>, ClassId)>,
) -> Episode {
    let k_shot = support.len() / n_way.max(1);
    let n_query_novel = query.iter().filter(|(_, l)| *l as usize > n_base).count();
    let n_unlabeled_novel = unlabeled.iter().filter(|(_, l)| *l as usize > n_base).count();
    let spec = EpisodeSpec {
        n_way,
        k_shot,
        n_query_novel,
        n_query_base: query.len() - n_query_novel,
        n_unlabeled_novel,
        n_unlabeled_base: unlabeled.len() - n_unlabeled_novel,
        mode: EpisodeMode::SemiSupervised,
        seed: 0,
    };
    let label_map =
        LabelMap::from_pairs((0..n_way).map(|j| (1000 + j as ClassId, (n_base + 1 + j) as ClassId))).unwrap();
    let ex = |v: Vec<(Vec<f64>, ClassId)>| v.into_iter().map(|(x, l)| LabeledExample::new(x, l)).collect::<Vec<_>>();
    Episode {
        spec,
        index: 0,
        n_base,
        support: ex(support),
        query: ex(query),
        unlabeled: UnlabeledSet::new(ex(unlabeled)),
        label_map,
        sources: EpisodeSources::default(),
    }
}

/// Random episode with `n_base = 2`, `n_way = 2`, two shots, four queries
/// (one per class) and `n_u` unlabeled inputs, in `dim` input dimensions.
pub fn random_episode(rng: &mut impl Rng, dim: usize, n_u: usize) -> Episode {
    let support = (0..4).map(|i| (randv(rng, dim), 3 + (i % 2) as ClassId)).collect();
    let query = (0..4).map(|i| (randv(rng, dim), 1 + i as ClassId)).collect();
    let unlabeled = (0..n_u).map(|i| (randv(rng, dim), 1 + (i % 4) as ClassId)).collect();
    episode(2, 2, support, query, unlabeled)
}

/// Small random MLP with a random positive scale, and `d x n_base` base weights.
pub fn random_model(rng: &mut impl Rng, input_dim: usize, n_base: usize) -> (ModelState, Array2<f64>) {
    let seed: u64 = rng.random();
    let gamma = rng.random_range(2.0..8.0);
    let state = ModelState::init(ExtractorSpec::mlp(input_dim, vec![4], 3), gamma, seed).unwrap();
    let base = randn(rng, 3, n_base);
    (state, base)
}

/// Small configuration that trains and evaluates in a few seconds.
pub fn small_config(dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        output_dir: dir.to_path_buf(),
        dataset: DatasetSource::Synthetic {
            seed: 11,
            spec: SyntheticSpec {
                n_base_classes: 8,
                n_novel_classes: 6,
                input_dim: 8,
                base_per_class: [30, 10, 40],
                novel_per_class: [80, 80, 80],
                sigma_c: 0.25,
                kappa: 0.5,
                center_radius: 1.0,
            },
        },
        ..ExperimentConfig::default()
    };
    cfg.model.hidden = vec![12];
    cfg.model.output_dim = 8;
    cfg.pretrain.epochs = 3;
    cfg.meta.steps = 30;
    cfg.adaptation.steps = 3;
    cfg.fixmatch.steps = 3;
    cfg.evaluation.episodes = 12;
    cfg.evaluation.workers = 2;
    cfg
}
