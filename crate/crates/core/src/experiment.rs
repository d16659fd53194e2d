//! Experiment configuration and the test-time methods it can evaluate.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::{adapt_model, AdaptationConfig, AugmentationSpec};
use crate::baselines::{fixmatch_adapt, run_label_propagation, run_plain_pr, FixMatchConfig, GraphConfig};
use crate::error::{config, Error, Result};
use crate::evaluation::{score_model, EpisodeMetrics};
use crate::model::{imprint_weights, Activation, ExtractorSpec, ModelState, DEFAULT_GAMMA};
use crate::refinement::RefinementConfig;
use crate::sampler::SamplerConfig;
use crate::synth::SyntheticSpec;
use crate::training::TrainConfig;
use crate::types::{Episode, EpisodeMode, EpisodeSpec, Stage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic { seed: u64, spec: SyntheticSpec },
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub gamma: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub steps: usize,
    pub eta1: f64,
    pub eta2: f64,
    pub momentum: Option<f64>,
    pub k_shot: usize,
    /// Fake unlabeled pool of the second algorithm, per pool.
    pub n_unlabeled_novel: usize,
    pub n_unlabeled_base: usize,
    pub stop_gradient: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationConfig {
    pub episodes: usize,
    pub k_shot: usize,
    pub stream_seed: u64,
    /// Base:novel composition of the semi-supervised unlabeled pool.
    pub ratio: (u32, u32),
    pub sweep_ratios: Vec<(u32, u32)>,
    pub methods: Vec<MethodName>,
    pub sweep_methods: Vec<MethodName>,
    /// Worker threads for episode fan-out; 0 uses the available parallelism.
    pub workers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Excluded from the content hash.
    pub output_dir: PathBuf,
    pub dataset: DatasetSource,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub meta: MetaConfig,
    pub refinement: RefinementConfig,
    pub adaptation: AdaptationConfig,
    pub label_propagation: GraphConfig,
    pub fixmatch: FixMatchConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for ExperimentConfig {
    /// Desk-scale preset: 20 base classes, 8 novel classes per novel split,
    /// 16-dimensional inputs with half of the novel classes placed next to a
    /// base class.
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            dataset: DatasetSource::Synthetic {
                seed: 5,
                spec: SyntheticSpec { sigma_c: 0.25, kappa: 0.5, ..SyntheticSpec::default() },
            },
            model: ModelConfig {
                hidden: vec![32],
                output_dim: 16,
                activation: Activation::Tanh,
                gamma: DEFAULT_GAMMA,
                seed: 0,
            },
            pretrain: PretrainConfig { epochs: 20, lr: 0.05, batch_size: 64, momentum: Some(0.9), seed: 0 },
            meta: MetaConfig {
                steps: 2000,
                eta1: 0.05,
                eta2: 0.05,
                momentum: None,
                k_shot: 1,
                n_unlabeled_novel: 150,
                n_unlabeled_base: 150,
                stop_gradient: false,
                seed: 0,
            },
            refinement: RefinementConfig { n_steps: 2, alpha: 1.0 },
            adaptation: AdaptationConfig {
                lr: 0.05,
                augmentation: AugmentationSpec { sigma: 0.35, mask_rate: 0.1 },
                ..AdaptationConfig::default()
            },
            label_propagation: GraphConfig { sigma: 0.2, ..GraphConfig::default() },
            fixmatch: FixMatchConfig {
                lr: 0.05,
                weak: AugmentationSpec { sigma: 0.1, mask_rate: 0.0 },
                strong: AugmentationSpec { sigma: 0.35, mask_rate: 0.1 },
                ..FixMatchConfig::default()
            },
            evaluation: EvaluationConfig {
                episodes: 600,
                k_shot: 1,
                stream_seed: 7,
                ratio: (1, 1),
                sweep_ratios: vec![(3, 1), (1, 1), (1, 3)],
                methods: MethodName::ALL.to_vec(),
                sweep_methods: vec![MethodName::PlainPr, MethodName::FakeUnlabeledPr, MethodName::Adapted],
                workers: 0,
            },
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 prefix of the canonical serialization without `output_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let text = toml::to_string(&c).expect("config serializes");
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }

    pub fn validate(&self) -> Result<()> {
        if let DatasetSource::Synthetic { spec, .. } = &self.dataset {
            spec.validate()?;
        }
        if self.model.output_dim == 0 || self.model.gamma <= 0.0 {
            return Err(config("model needs a positive output dimension and scale"));
        }
        if self.evaluation.episodes == 0 {
            return Err(config("evaluation needs at least one episode"));
        }
        self.refinement.validate()?;
        self.adaptation.validate()?;
        self.label_propagation.validate()?;
        self.fixmatch.validate()?;
        self.train_config()?.validate()
    }

    pub fn extractor_spec(&self, input_dim: usize) -> ExtractorSpec {
        ExtractorSpec {
            input_dim,
            hidden: self.model.hidden.clone(),
            output_dim: if self.model.hidden.is_empty() { input_dim } else { self.model.output_dim },
            activation: self.model.activation,
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            eta1: self.pretrain.lr,
            eta2: self.pretrain.lr,
            epochs: self.pretrain.epochs,
            batch_size: self.pretrain.batch_size,
            momentum: self.pretrain.momentum,
            seed: self.pretrain.seed,
            ..TrainConfig::default()
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let m = &self.meta;
        let mut spec = EpisodeSpec::standard(m.k_shot, EpisodeMode::SemiSupervised, m.seed);
        spec.n_unlabeled_novel = m.n_unlabeled_novel;
        spec.n_unlabeled_base = m.n_unlabeled_base;
        spec.validate()?;
        Ok(TrainConfig {
            eta1: m.eta1,
            eta2: m.eta2,
            steps: m.steps,
            momentum: m.momentum,
            episode: SamplerConfig::new(spec, Stage::Train),
            refinement: self.refinement.clone(),
            stop_gradient: m.stop_gradient,
            seed: m.seed,
            ..self.pretrain_config()
        })
    }

    /// Test-stream sampler for `mode` at the configured ratio.
    pub fn sampler(&self, mode: EpisodeMode) -> SamplerConfig {
        let e = &self.evaluation;
        let spec = EpisodeSpec::standard(e.k_shot, mode, e.stream_seed);
        SamplerConfig::new(spec, Stage::Test).with_ratio(e.ratio.0, e.ratio.1)
    }

    pub fn workers(&self) -> usize {
        match self.evaluation.workers {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        }
    }
}

/// Test-time methods. Each runs on a meta-trained model and one episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    /// First-algorithm model, imprinted prototypes only.
    Baseline,
    /// First-algorithm model with test-time refinement.
    PlainPr,
    /// Second-algorithm model with test-time refinement.
    FakeUnlabeledPr,
    /// Second-algorithm model, adapted to the episode, then refined.
    Adapted,
    LabelPropagation,
    FixMatch,
}

impl MethodName {
    pub const ALL: [MethodName; 6] = [
        MethodName::Baseline,
        MethodName::PlainPr,
        MethodName::FakeUnlabeledPr,
        MethodName::Adapted,
        MethodName::LabelPropagation,
        MethodName::FixMatch,
    ];

    /// Row order of the ablation table.
    pub const ABLATION: [MethodName; 4] =
        [MethodName::Baseline, MethodName::PlainPr, MethodName::FakeUnlabeledPr, MethodName::Adapted];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodName::Baseline => "baseline",
            MethodName::PlainPr => "plain_pr",
            MethodName::FakeUnlabeledPr => "fake_unlabeled_pr",
            MethodName::Adapted => "adapted",
            MethodName::LabelPropagation => "label_propagation",
            MethodName::FixMatch => "fixmatch",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }

    /// Label of the ablation row.
    pub fn ablation_label(self) -> &'static str {
        match self {
            MethodName::Baseline => "baseline",
            MethodName::PlainPr => "+ prototype refinement",
            MethodName::FakeUnlabeledPr => "+ fake unlabeled meta-training",
            MethodName::Adapted => "+ test-time adaptation",
            MethodName::LabelPropagation => "label propagation",
            MethodName::FixMatch => "fixmatch",
        }
    }

    /// Whether the method uses the model trained with fake unlabeled data.
    pub fn uses_fake_unlabeled_model(self) -> bool {
        matches!(self, MethodName::FakeUnlabeledPr | MethodName::Adapted)
    }

    pub fn needs_unlabeled(self) -> bool {
        !matches!(self, MethodName::Baseline)
    }
}

/// A trained model: extractor state plus base weights.
pub type Trained = (ModelState, Array2<f64>);

/// Runs `method` on one episode. Methods that need unlabeled data degrade to
/// their unrefined form when the pool is empty.
pub fn run_method(
    method: MethodName,
    model: &Trained,
    cfg: &ExperimentConfig,
    episode: &Episode,
) -> Result<EpisodeMetrics> {
    let (state, base) = model;
    let empty = episode.unlabeled.is_empty();
    match method {
        MethodName::Baseline => score_model(state, &imprint_weights(state, base, episode)?, episode),
        MethodName::PlainPr | MethodName::FakeUnlabeledPr => run_plain_pr(state, base, episode, &cfg.refinement),
        MethodName::Adapted if empty => run_plain_pr(state, base, episode, &cfg.refinement),
        MethodName::Adapted => {
            let adapted = adapt_model(state, base, episode, &cfg.adaptation)?;
            run_plain_pr(&adapted.state, &adapted.base, episode, &cfg.refinement)
        }
        MethodName::LabelPropagation => run_label_propagation(state, base, episode, &cfg.label_propagation),
        MethodName::FixMatch if empty => score_model(state, &imprint_weights(state, base, episode)?, episode),
        MethodName::FixMatch => {
            let (s, b) = fixmatch_adapt(state, base, episode, &cfg.fixmatch)?;
            score_model(&s, &imprint_weights(&s, &b, episode)?, episode)
        }
    }
}
