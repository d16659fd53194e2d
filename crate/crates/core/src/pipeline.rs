//! Stage orchestration: dataset synthesis, pre-training, meta-training,
//! evaluation, ablation, ratio sweep and report emission.
//!
//! Every artifact written to the output directory carries the config hash and
//! the evaluation stream seed. Stages load the artifacts they depend on when
//! present (refusing ones stamped with another hash) and otherwise produce
//! them first, so an interrupted run resumes from the last completed stage.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Axis;

use crate::dataset_io::{header_value, load_bundle, parse_bundle, save_bundle};
use crate::error::{Error, Result};
use crate::evaluation::{
    aggregate, evaluate_stream, ratio_sweep, render_results, AggregateReport, MeanCi, ResultsHeader,
    ResultsTable, SweepRow,
};
use crate::experiment::{run_method, DatasetSource, ExperimentConfig, MethodName, Trained};
use crate::model::{extract_features, imprint_weights, Checkpoint, ModelState};
use crate::plot::{bar_chart, line_chart, principal_plane, scatter, Marker, ScatterPoint};
use crate::refinement::refine_loop;
use crate::sampler::sample_test_episode;
use crate::synth::synthesize_dataset;
use crate::training::{meta_train, pretrain, write_training_log, MetaAlgorithm};
use crate::types::{DatasetBundle, EpisodeMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageName {
    Synth,
    Pretrain,
    Metatrain(MetaAlgorithm),
    Evaluate(EpisodeMode),
    Ablate,
    Sweep,
    Report,
}

pub fn mode_name(mode: EpisodeMode) -> &'static str {
    match mode {
        EpisodeMode::Inductive => "inductive",
        EpisodeMode::Transductive => "transductive",
        EpisodeMode::SemiSupervised => "semi",
    }
}

/// Per-method results of one evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub table: ResultsTable,
    pub reports: Vec<(MethodName, AggregateReport)>,
}

impl Evaluation {
    pub fn report(&self, method: MethodName) -> Option<&AggregateReport> {
        self.reports.iter().find(|(m, _)| *m == method).map(|(_, r)| r)
    }
}

pub struct Pipeline {
    cfg: ExperimentConfig,
    hash: String,
    dir: PathBuf,
}

impl Pipeline {
    /// Validates `cfg`, creates the output directory and writes `config.toml`.
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash();
        let dir = cfg.output_dir.clone();
        std::fs::create_dir_all(&dir)?;
        let text = format!("# config_hash={hash}\n{}", cfg.to_toml()?);
        std::fs::write(dir.join("config.toml"), text)?;
        Ok(Self { cfg, hash, dir })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn seed(&self) -> u64 {
        self.cfg.evaluation.stream_seed
    }

    fn stamp(&self) -> Vec<String> {
        vec![format!("config_hash={}", self.hash), format!("stream_seed={}", self.seed())]
    }

    fn check_hash(&self, found: Option<String>, what: &Path) -> Result<()> {
        match found {
            Some(h) if h == self.hash => Ok(()),
            Some(h) => Err(Error::HashMismatch { expected: self.hash.clone(), found: h }),
            None => Err(Error::Format(format!("{} carries no config hash", what.display()))),
        }
    }

    /// Writes `dataset.txt` from the configured source.
    pub fn synth(&self) -> Result<DatasetBundle> {
        let bundle = match &self.cfg.dataset {
            DatasetSource::Synthetic { seed, spec } => synthesize_dataset(spec, *seed)?,
            DatasetSource::File { path } => load_bundle(path)?,
        };
        save_bundle(&self.path("dataset.txt"), &bundle, &self.stamp())?;
        log::info!("wrote {} ({} base classes)", self.path("dataset.txt").display(), bundle.n_base());
        Ok(bundle)
    }

    pub fn dataset(&self) -> Result<DatasetBundle> {
        let p = self.path("dataset.txt");
        if !p.exists() {
            return self.synth();
        }
        let text = std::fs::read_to_string(&p)?;
        self.check_hash(header_value(&text, "config_hash"), &p)?;
        parse_bundle(&text)
    }

    fn load_or<F>(&self, name: &str, produce: F) -> Result<Checkpoint>
    where
        F: FnOnce() -> Result<Checkpoint>,
    {
        let p = self.path(name);
        if p.exists() {
            Checkpoint::load_matching(&p, &self.hash)
        } else {
            produce()
        }
    }

    /// Pre-trains the extractor and base weights; writes `pretrained.json`
    /// and `pretrain_log.csv`.
    pub fn pretrain(&self) -> Result<Checkpoint> {
        let bundle = self.dataset()?;
        let spec = self.cfg.extractor_spec(bundle.input_dim);
        let state = ModelState::init(spec, self.cfg.model.gamma, self.cfg.model.seed)?;
        let out = pretrain(&bundle, state, &self.cfg.pretrain_config())?;
        write_training_log(&self.path("pretrain_log.csv"), &out.losses, &self.hash)?;
        let ck = Checkpoint::new(out.state, out.base_weights, &self.hash).with_seed(self.seed());
        ck.save(&self.path("pretrained.json"))?;
        Ok(ck)
    }

    fn checkpoint_name(alg: MetaAlgorithm) -> String {
        format!("{}.json", alg.name())
    }

    /// Meta-trains from the pre-trained checkpoint; writes `alg1.json` or
    /// `alg2.json` and the matching loss log.
    pub fn metatrain(&self, alg: MetaAlgorithm) -> Result<Checkpoint> {
        let bundle = self.dataset()?;
        let pre = self.load_or("pretrained.json", || self.pretrain())?;
        let (mut state, mut base) = (pre.state, pre.base_weights);
        let losses = meta_train(&mut state, &mut base, &bundle, &self.cfg.train_config()?, alg)?;
        write_training_log(&self.path(&format!("{}_log.csv", alg.name())), &losses, &self.hash)?;
        let ck = Checkpoint::new(state, base, &self.hash).with_seed(self.seed());
        ck.save(&self.path(&Self::checkpoint_name(alg)))?;
        Ok(ck)
    }

    pub fn model(&self, alg: MetaAlgorithm) -> Result<Trained> {
        let ck = self.load_or(&Self::checkpoint_name(alg), || self.metatrain(alg))?;
        Ok((ck.state, ck.base_weights))
    }

    fn model_for(&self, method: MethodName, alg1: &Option<Trained>, alg2: &Option<Trained>) -> Trained {
        let m = if method.uses_fake_unlabeled_model() { alg2 } else { alg1 };
        m.clone().expect("model loaded for method")
    }

    fn models(&self, methods: &[MethodName]) -> Result<(Option<Trained>, Option<Trained>)> {
        let alg1 = if methods.iter().any(|m| !m.uses_fake_unlabeled_model()) {
            Some(self.model(MetaAlgorithm::Baseline)?)
        } else {
            None
        };
        let alg2 = if methods.iter().any(|m| m.uses_fake_unlabeled_model()) {
            Some(self.model(MetaAlgorithm::FakeUnlabeled)?)
        } else {
            None
        };
        Ok((alg1, alg2))
    }

    /// Evaluates `methods` on the same episode stream.
    pub fn evaluate_methods(&self, mode: EpisodeMode, methods: &[MethodName]) -> Result<Evaluation> {
        let bundle = self.dataset()?;
        let (alg1, alg2) = self.models(methods)?;
        let sampler = self.cfg.sampler(mode);
        let mut table = ResultsTable::default();
        let mut reports = Vec::new();
        for &m in methods {
            let model = self.model_for(m, &alg1, &alg2);
            let metrics = evaluate_stream(&bundle, &sampler, self.cfg.evaluation.episodes, self.cfg.workers(), &|ep| {
                run_method(m, &model, &self.cfg, ep)
            })?;
            reports.push((m, aggregate(&metrics)?.with_provenance(self.seed(), &self.hash)));
            table.push(m.as_str(), metrics);
        }
        Ok(Evaluation { table, reports })
    }

    fn write_evaluation(&self, stem: &str, ev: &Evaluation) -> Result<()> {
        let header = ResultsHeader { config_hash: self.hash.clone(), stream_seed: self.seed() };
        std::fs::write(self.path(&format!("{stem}.csv")), render_results(&header, &ev.table)?)?;
        let reports: Vec<_> = ev.reports.iter().map(|(m, r)| (m.as_str(), r)).collect();
        std::fs::write(self.path(&format!("{stem}.json")), serde_json::to_string_pretty(&reports)?)?;
        Ok(())
    }

    /// Writes `results_<mode>.csv` and `results_<mode>.json`.
    pub fn evaluate(&self, mode: EpisodeMode) -> Result<Evaluation> {
        let ev = self.evaluate_methods(mode, &self.cfg.evaluation.methods)?;
        self.write_evaluation(&format!("results_{}", mode_name(mode)), &ev)?;
        Ok(ev)
    }

    /// Four-row ablation on semi-supervised episodes; writes `ablation.csv`,
    /// `ablation.json` and `ablation.md`.
    pub fn ablate(&self) -> Result<Evaluation> {
        let ev = self.evaluate_methods(EpisodeMode::SemiSupervised, &MethodName::ABLATION)?;
        self.write_evaluation("ablation", &ev)?;
        std::fs::write(self.path("ablation.md"), self.ablation_markdown(&ev))?;
        Ok(ev)
    }

    fn ablation_markdown(&self, ev: &Evaluation) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "<!-- config_hash={} stream_seed={} -->", self.hash, self.seed());
        out.push_str(&metrics_table(&ev.reports, true));
        out
    }

    /// Ratio sweep over `sweep_ratios` for `sweep_methods`; writes `sweep.csv`
    /// and `sweep.svg`.
    pub fn sweep(&self) -> Result<Vec<(MethodName, Vec<SweepRow>)>> {
        let bundle = self.dataset()?;
        let methods = &self.cfg.evaluation.sweep_methods;
        let (alg1, alg2) = self.models(methods)?;
        let sampler = self.cfg.sampler(EpisodeMode::SemiSupervised);
        let mut out = Vec::new();
        for &m in methods {
            let model = self.model_for(m, &alg1, &alg2);
            let rows = ratio_sweep(
                &bundle,
                &sampler,
                &self.cfg.evaluation.sweep_ratios,
                self.cfg.evaluation.episodes,
                self.cfg.workers(),
                &|ep| run_method(m, &model, &self.cfg, ep),
            )?;
            out.push((m, rows));
        }
        std::fs::write(self.path("sweep.csv"), self.render_sweep(&out))?;
        std::fs::write(self.path("sweep.svg"), self.sweep_svg(&out))?;
        Ok(out)
    }

    fn render_sweep(&self, rows: &[(MethodName, Vec<SweepRow>)]) -> String {
        let mut out = String::new();
        for line in self.stamp() {
            let _ = writeln!(out, "# {line}");
        }
        let _ = writeln!(out, "method,base,novel,joint_mean,joint_ci95,degradation");
        for (m, rs) in rows {
            for r in rs {
                let _ = writeln!(
                    out,
                    "{},{},{},{:.6},{},{:.6}",
                    m.as_str(),
                    r.ratio.0,
                    r.ratio.1,
                    r.joint.mean,
                    r.joint.ci95.map_or("nan".into(), |c| format!("{c:.6}")),
                    r.degradation
                );
            }
        }
        out
    }

    fn sweep_svg(&self, rows: &[(MethodName, Vec<SweepRow>)]) -> String {
        let cats: Vec<String> = self.cfg.evaluation.sweep_ratios.iter().map(|(b, n)| format!("{b}:{n}")).collect();
        let series: Vec<(&str, Vec<f64>)> =
            rows.iter().map(|(m, rs)| (m.as_str(), rs.iter().map(|r| r.degradation).collect())).collect();
        bar_chart(
            "Joint accuracy change vs 1:1 unlabeled ratio",
            &self.stamp().join(" "),
            "degradation",
            &cats,
            &series,
        )
    }

    fn read_log(&self, name: &str) -> Result<Option<Vec<f64>>> {
        let p = self.path(name);
        if !p.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&p)?;
        let mut losses = Vec::new();
        for line in text.lines().skip(1) {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::Format(format!("{}: malformed row", p.display())));
            }
            self.check_hash(Some(parts[2].to_string()), &p)?;
            losses.push(parts[1].parse().map_err(|e| Error::Format(format!("{}: {e}", p.display())))?);
        }
        Ok(Some(losses))
    }

    fn read_reports(&self, stem: &str) -> Result<Option<Vec<(MethodName, AggregateReport)>>> {
        let p = self.path(&format!("{stem}.json"));
        if !p.exists() {
            return Ok(None);
        }
        let raw: Vec<(String, AggregateReport)> = serde_json::from_str(&std::fs::read_to_string(&p)?)?;
        let mut out = Vec::new();
        for (name, r) in raw {
            self.check_hash(Some(r.config_hash.clone()), &p)?;
            let m = MethodName::parse(&name).ok_or_else(|| Error::Format(format!("unknown method {name}")))?;
            out.push((m, r));
        }
        Ok(Some(out))
    }

    /// Scatter of one semi-supervised episode in the principal plane of its
    /// query features: queries by class, imprinted prototypes as squares and
    /// refined prototypes as diamonds.
    pub fn projection_svg(&self, model: &Trained) -> Result<String> {
        let bundle = self.dataset()?;
        let ep = sample_test_episode(&bundle, &self.cfg.sampler(EpisodeMode::SemiSupervised), 0)?;
        let (state, base) = model;
        let q = extract_features(state, &ep.query_inputs())?;
        let w = imprint_weights(state, base, &ep)?;
        let refined = refine_loop(state, &w, &ep, &self.cfg.refinement)?.weights;
        let all = ndarray::concatenate(Axis(0), &[q.view(), w.novel.t(), refined.novel.t()])
            .map_err(|e| Error::Shape(e.to_string()))?;
        let (mean, basis) = principal_plane(&all);
        let proj = (&all - &mean).dot(&basis);
        let n_way = ep.n_way();
        let mut points = Vec::new();
        for (i, e) in ep.query.iter().enumerate() {
            let col = e.label as usize - 1;
            let group = if col < ep.n_base { n_way } else { col - ep.n_base };
            points.push(ScatterPoint { x: proj[[i, 0]], y: proj[[i, 1]], group, marker: Marker::Dot });
        }
        let nq = ep.query.len();
        for j in 0..n_way {
            let a = nq + j;
            let b = nq + n_way + j;
            points.push(ScatterPoint { x: proj[[a, 0]], y: proj[[a, 1]], group: j, marker: Marker::Square });
            points.push(ScatterPoint { x: proj[[b, 0]], y: proj[[b, 1]], group: j, marker: Marker::Diamond });
        }
        let names: Vec<String> = (0..n_way).map(|j| format!("novel {}", j + 1)).chain(["base".to_string()]).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        Ok(scatter("Episode 0: queries, imprinted (square) and refined (diamond) prototypes", &self.stamp().join(" "), &points, &names))
    }

    /// Collects existing artifacts into `report.md` plus `losses.svg` and
    /// `projection.svg`. Does not train or evaluate anything itself.
    pub fn report(&self) -> Result<PathBuf> {
        let mut md = String::new();
        let _ = writeln!(md, "# Experiment report\n");
        let _ = writeln!(md, "config hash `{}`, stream seed {}\n", self.hash, self.seed());

        let mut series: Vec<(&str, Vec<f64>)> = Vec::new();
        for (name, file) in [("pretrain", "pretrain_log.csv"), ("alg1", "alg1_log.csv"), ("alg2", "alg2_log.csv")] {
            if let Some(l) = self.read_log(file)? {
                series.push((name, l));
            }
        }
        if !series.is_empty() {
            let refs: Vec<(&str, &[f64])> = series.iter().map(|(n, l)| (*n, l.as_slice())).collect();
            std::fs::write(self.path("losses.svg"), line_chart("Training loss", &self.stamp().join(" "), "loss", &refs))?;
            let _ = writeln!(md, "![training loss](losses.svg)\n");
        }
        for mode in [EpisodeMode::Inductive, EpisodeMode::Transductive, EpisodeMode::SemiSupervised] {
            if let Some(r) = self.read_reports(&format!("results_{}", mode_name(mode)))? {
                let _ = writeln!(md, "## Evaluation ({})\n", mode_name(mode));
                md.push_str(&metrics_table(&r, false));
                md.push('\n');
            }
        }
        if let Some(r) = self.read_reports("ablation")? {
            let _ = writeln!(md, "## Ablation\n");
            md.push_str(&metrics_table(&r, true));
            md.push('\n');
        }
        let sweep = self.path("sweep.csv");
        if sweep.exists() {
            let text = std::fs::read_to_string(&sweep)?;
            self.check_hash(header_value(&text, "config_hash"), &sweep)?;
            let _ = writeln!(md, "## Unlabeled ratio sweep\n\n```text");
            for line in text.lines().filter(|l| !l.starts_with('#')) {
                let _ = writeln!(md, "{line}");
            }
            let _ = writeln!(md, "```\n\n![ratio sweep](sweep.svg)\n");
        }
        let model = [MetaAlgorithm::FakeUnlabeled, MetaAlgorithm::Baseline]
            .into_iter()
            .map(|a| self.path(&Self::checkpoint_name(a)))
            .find(|p| p.exists());
        if let Some(p) = model {
            let ck = Checkpoint::load_matching(&p, &self.hash)?;
            std::fs::write(self.path("projection.svg"), self.projection_svg(&(ck.state, ck.base_weights))?)?;
            let _ = writeln!(md, "![episode projection](projection.svg)\n");
        }
        let out = self.path("report.md");
        std::fs::write(&out, md)?;
        Ok(out)
    }

    pub fn run(&self, stage: StageName) -> Result<()> {
        match stage {
            StageName::Synth => self.synth().map(drop),
            StageName::Pretrain => self.pretrain().map(drop),
            StageName::Metatrain(a) => self.metatrain(a).map(drop),
            StageName::Evaluate(m) => self.evaluate(m).map(drop),
            StageName::Ablate => self.ablate().map(drop),
            StageName::Sweep => self.sweep().map(drop),
            StageName::Report => self.report().map(drop),
        }
    }
}

fn pct(m: &MeanCi) -> String {
    match m.ci95 {
        Some(c) => format!("{:.2} ± {:.2}", 100.0 * m.mean, 100.0 * c),
        None => format!("{:.2}", 100.0 * m.mean),
    }
}

/// Markdown table of percentages, one row per method.
pub fn metrics_table(reports: &[(MethodName, AggregateReport)], ablation_labels: bool) -> String {
    let mut out = String::from("| method | Acc all/all | Acc b/all | Acc n/all | Acc b/b | Acc n/n | Δb | Δn | Δ |\n");
    out.push_str("|---|---|---|---|---|---|---|---|---|\n");
    for (m, r) in reports {
        let name = if ablation_labels { m.ablation_label() } else { m.as_str() };
        let cells: Vec<String> = r.fields().iter().map(pct).collect();
        let _ = writeln!(out, "| {name} | {} |", cells.join(" | "));
    }
    out
}

/// Runs `stages` in order and returns the output directory.
pub fn run_pipeline(cfg: ExperimentConfig, stages: &[StageName]) -> Result<PathBuf> {
    let p = Pipeline::new(cfg)?;
    for &s in stages {
        p.run(s)?;
    }
    Ok(p.dir().to_path_buf())
}
