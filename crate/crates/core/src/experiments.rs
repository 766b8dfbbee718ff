//! Experiment drivers behind the command-line tool: the run configuration,
//! LOSO runs and their result directories, suites of runs, and analyses
//! that reload trained folds (noise, masking, gate export).
//!
//! Result directories never contain timestamps or host details, so a
//! re-run with the same configuration reproduces every file byte for byte.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    self, recordings_from_segments, synth_generate, CognitiveLoad, EegRecording, EegSegment, LosoSplit, SubjectId,
    CHANNEL_NAMES, N_CHANNELS,
};
use crate::dsp::NoiseSpec;
use crate::error::{Error, Result};
use crate::model::{Fusion, Model, ModelConfig};
use crate::pipeline::{
    build_sample, filtered_segments, segment_features, FeatureKind, FeatureNormalizer, Mask, PipelineOptions,
    SegmentFeatures, MAP_SHAPE,
};
use crate::spectral::{self, FrequencyBand};
use crate::topomap::{build_map_from_values, ElectrodeLayout};
use crate::trainer::{
    evaluate, run_loso, train_fold, EpochLog, Evaluation, Fold, LosoSummary, Metrics, Sample, SampleScore, TrainConfig,
    TrainedModel,
};

pub const ARTIFACT_VERSION: &str = concat!("cogload ", env!("CARGO_PKG_VERSION"));

pub const CONFIG_FILE: &str = "config.txt";
pub const RUN_FILE: &str = "run.json";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_TSV: &str = "summary.tsv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const MODEL_FILE: &str = "model.ckpt";
pub const NORMALIZER_FILE: &str = "normalizer.json";

/// Noise levels applied by the robustness analysis, as fractions of each
/// channel's standard deviation.
pub const NOISE_FRACTIONS: [f64; 4] = [0.1, 0.3, 0.5, 0.7];

/// L_OC weights scanned by the beta sweep.
pub const SWEEP_BETAS: [f64; 3] = [0.4, 0.7, 1.0];

/// Plain `key=value` run configuration. Defaults are the full-scale
/// training setup; `model=desk` selects the small network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub name: String,
    pub data: Option<PathBuf>,
    pub synthetic: bool,
    pub subjects: usize,
    pub segments: usize,
    pub model: String,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub beta: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub seed: u64,
    // placement only: kept out of run.json like they are kept out of the hash
    #[serde(skip, default = "default_jobs")]
    pub jobs: usize,
    pub features: FeatureKind,
    #[serde(skip, default = "default_out")]
    pub out: PathBuf,
    pub no_oc: bool,
    pub no_attention: bool,
    pub raw_only: bool,
    pub topo_only: bool,
    pub zero_phase: bool,
    pub linear_power: bool,
    pub pair_mean: bool,
    pub macro_f1: bool,
}

fn default_jobs() -> usize {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("results")
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            name: "run".into(),
            data: None,
            synthetic: false,
            subjects: 6,
            segments: 40,
            model: "paper".into(),
            batch_size: t.batch_size,
            lr: t.lr,
            epochs: t.epochs,
            beta: t.beta,
            plateau_factor: t.plateau_factor,
            plateau_patience: t.plateau_patience,
            seed: t.seed,
            jobs: default_jobs(),
            features: FeatureKind::Psd,
            out: default_out(),
            no_oc: false,
            no_attention: false,
            raw_only: false,
            topo_only: false,
            zero_phase: false,
            linear_power: false,
            pair_mean: false,
            macro_f1: false,
        }
    }
}

/// Every key accepted by [`RunConfig::set`], in canonical order.
pub const CONFIG_KEYS: [&str; 24] = [
    "name",
    "data",
    "synthetic",
    "subjects",
    "segments",
    "model",
    "batch_size",
    "lr",
    "epochs",
    "beta",
    "plateau_factor",
    "plateau_patience",
    "seed",
    "jobs",
    "features",
    "out",
    "no_oc",
    "no_attention",
    "raw_only",
    "topo_only",
    "zero_phase",
    "linear_power",
    "pair_mean",
    "macro_f1",
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::usage(format!("invalid value `{value}` for `{key}`")))
}

fn parse_flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "" | "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::usage(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

impl RunConfig {
    /// Sets one key. Flags accept an empty value as `true`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "name" => {
                if value.is_empty() || value.contains(|c: char| c == '/' || c == '\\' || c.is_whitespace()) {
                    return Err(Error::usage(format!("invalid run name `{value}`")));
                }
                self.name = value.to_string();
            }
            "data" => self.data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "synthetic" => self.synthetic = parse_flag(key, value)?,
            "subjects" => self.subjects = parse_value(key, value)?,
            "segments" => self.segments = parse_value(key, value)?,
            "model" => {
                if ModelConfig::preset(value).is_none() {
                    return Err(Error::usage(format!("unknown model preset `{value}` (paper|desk)")));
                }
                self.model = value.to_string();
            }
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "beta" => self.beta = parse_value(key, value)?,
            "plateau_factor" => self.plateau_factor = parse_value(key, value)?,
            "plateau_patience" => self.plateau_patience = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "jobs" => self.jobs = parse_value(key, value)?,
            "features" => {
                self.features = FeatureKind::parse(value)
                    .ok_or_else(|| Error::usage(format!("unknown feature kind `{value}` (psd|de)")))?
            }
            "out" => self.out = PathBuf::from(value),
            "no_oc" => self.no_oc = parse_flag(key, value)?,
            "no_attention" => self.no_attention = parse_flag(key, value)?,
            "raw_only" => self.raw_only = parse_flag(key, value)?,
            "topo_only" => self.topo_only = parse_flag(key, value)?,
            "zero_phase" => self.zero_phase = parse_flag(key, value)?,
            "linear_power" => self.linear_power = parse_flag(key, value)?,
            "pair_mean" => self.pair_mean = parse_flag(key, value)?,
            "macro_f1" => self.macro_f1 = parse_flag(key, value)?,
            _ => return Err(Error::usage(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`. Blank lines and `#`
    /// comments are ignored; a bare key sets a flag.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = match line.split_once('#') {
                Some((before, _)) => before,
                None => line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').unwrap_or((line, ""));
            self.set(k.trim(), v)
                .map_err(|e| Error::usage(format!("line {}: {}", i + 1, strip_usage(e))))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key on its own line; [`RunConfig::parse`] restores it exactly.
    pub fn to_text(&self) -> String {
        self.text(true)
    }

    /// The settings that affect results, without `jobs` and `out`. This is
    /// what a run directory stores and what the run id hashes.
    pub fn canonical_text(&self) -> String {
        self.text(false)
    }

    fn text(&self, placement: bool) -> String {
        let b = |v: bool| if v { "true" } else { "false" };
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        put("name", self.name.clone());
        put("data", self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        put("synthetic", b(self.synthetic).into());
        put("subjects", self.subjects.to_string());
        put("segments", self.segments.to_string());
        put("model", self.model.clone());
        put("batch_size", self.batch_size.to_string());
        put("lr", self.lr.to_string());
        put("epochs", self.epochs.to_string());
        put("beta", self.beta.to_string());
        put("plateau_factor", self.plateau_factor.to_string());
        put("plateau_patience", self.plateau_patience.to_string());
        put("seed", self.seed.to_string());
        if placement {
            put("jobs", self.jobs.to_string());
        }
        put("features", self.features.name().into());
        if placement {
            put("out", self.out.display().to_string());
        }
        put("no_oc", b(self.no_oc).into());
        put("no_attention", b(self.no_attention).into());
        put("raw_only", b(self.raw_only).into());
        put("topo_only", b(self.topo_only).into());
        put("zero_phase", b(self.zero_phase).into());
        put("linear_power", b(self.linear_power).into());
        put("pair_mean", b(self.pair_mean).into());
        put("macro_f1", b(self.macro_f1).into());
        s
    }

    /// Checks the flags and derives the model, training and pipeline
    /// settings.
    pub fn resolve(&self) -> Result<Resolved> {
        if self.raw_only && self.topo_only {
            return Err(Error::usage("raw_only and topo_only are mutually exclusive"));
        }
        match (&self.data, self.synthetic) {
            (Some(_), true) => return Err(Error::usage("give either data or synthetic, not both")),
            (None, false) => return Err(Error::usage("no dataset: set data=<dir> or synthetic")),
            _ => {}
        }
        if self.synthetic && (self.subjects < 2 || self.segments < 2) {
            return Err(Error::usage("synthetic data needs at least 2 subjects and 2 segments each"));
        }
        if self.jobs == 0 {
            return Err(Error::usage("jobs must be at least 1"));
        }
        let mut model = ModelConfig::preset(&self.model)
            .ok_or_else(|| Error::usage(format!("unknown model preset `{}`", self.model)))?;
        model.fusion = if self.raw_only {
            Fusion::RawOnly
        } else if self.topo_only {
            Fusion::TopoOnly
        } else if self.no_attention {
            Fusion::Concat
        } else {
            Fusion::Attention
        };
        let single_stream = self.raw_only || self.topo_only;
        let train = TrainConfig {
            batch_size: self.batch_size,
            lr: self.lr,
            epochs: self.epochs,
            beta: if self.no_oc || single_stream { 0.0 } else { self.beta },
            plateau_factor: self.plateau_factor,
            plateau_patience: self.plateau_patience,
            pair_mean: self.pair_mean,
            seed: self.seed,
        };
        train.validate().map_err(|e| Error::usage(strip_domain(e)))?;
        let pipeline = PipelineOptions {
            features: self.features,
            zero_phase: self.zero_phase,
            log_power: !self.linear_power,
        };
        Ok(Resolved {
            run_id: self.run_id(),
            version: ARTIFACT_VERSION.to_string(),
            config: self.clone(),
            model,
            train,
            pipeline,
        })
    }

    /// `<name>-<hash>`, where the hash covers every setting that can change
    /// results (the output directory and job count do not).
    pub fn run_id(&self) -> String {
        format!("{}-{}", self.name, short_hash(self.canonical_text().as_bytes()))
    }
}

fn strip_usage(e: Error) -> String {
    match e {
        Error::Usage(m) => m,
        other => other.to_string(),
    }
}

fn strip_domain(e: Error) -> String {
    match e {
        Error::Domain(m) => m,
        other => other.to_string(),
    }
}

fn short_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes)[..6].iter().map(|b| format!("{b:02x}")).collect()
}

/// A configuration with its derived settings, as stored in `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub run_id: String,
    pub version: String,
    pub config: RunConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pipeline: PipelineOptions,
}

/// Filtered segments of the configured data source and their unmasked,
/// noise-free features.
pub struct Dataset {
    pub segments: Vec<EegSegment>,
    pub features: Vec<SegmentFeatures>,
    pub subjects: BTreeSet<SubjectId>,
    /// Windows dropped because they had no label.
    pub missing_labels: usize,
}

/// Unfiltered recordings of the configured data source.
pub fn load_recordings(cfg: &RunConfig) -> Result<Vec<EegRecording>> {
    match (&cfg.data, cfg.synthetic) {
        (Some(dir), false) => data::read_dataset(dir),
        (None, true) => recordings_from_segments(&synth_generate(cfg.subjects, cfg.segments, cfg.seed)?),
        _ => Err(Error::usage("give exactly one of data=<dir> or synthetic")),
    }
}

pub fn load_dataset(r: &Resolved) -> Result<Dataset> {
    let recordings = load_recordings(&r.config)?;
    let (segments, missing_labels) = filtered_segments(&recordings, r.pipeline.zero_phase)?;
    if segments.is_empty() {
        return Err(Error::domain("the dataset has no labelled 10 s windows"));
    }
    let features = segments
        .iter()
        .map(|s| segment_features(s, &r.pipeline, &Mask::None, None))
        .collect::<Result<Vec<_>>>()?;
    let subjects = data::subjects_of(&segments);
    Ok(Dataset {
        segments,
        features,
        subjects,
        missing_labels,
    })
}

/// Everything one LOSO fold produced.
pub struct FoldRun {
    pub normalizer: FeatureNormalizer,
    pub trained: TrainedModel,
    pub evaluation: Evaluation,
}

fn samples_of<'a>(
    features: impl IntoIterator<Item = &'a SegmentFeatures>,
    norm: &FeatureNormalizer,
    mask: &Mask,
) -> Result<Vec<Sample>> {
    let layout = ElectrodeLayout::default();
    features.into_iter().map(|f| build_sample(f, norm, &layout, mask)).collect()
}

/// Fits the normalizer on the training subjects, trains, and evaluates on
/// the held-out subject.
pub fn run_fold(r: &Resolved, ds: &Dataset, split: &LosoSplit) -> Result<FoldRun> {
    let train_feats: Vec<&SegmentFeatures> = ds
        .features
        .iter()
        .filter(|f| split.train_subjects.contains(&f.subject))
        .collect();
    let normalizer = FeatureNormalizer::fit(train_feats.iter().copied())?;
    normalizer.check_excludes(&split.test_subject)?;
    let train = samples_of(train_feats, &normalizer, &Mask::None)?;
    let test = samples_of(
        ds.features.iter().filter(|f| f.subject == split.test_subject),
        &normalizer,
        &Mask::None,
    )?;
    let trained = train_fold(&r.model, &r.train, &train, MAP_SHAPE)?;
    let evaluation = evaluate(&trained.model, &test, MAP_SHAPE)?;
    Ok(FoldRun {
        normalizer,
        trained,
        evaluation,
    })
}

pub fn run_folds(r: &Resolved, ds: &Dataset) -> Result<Vec<Fold<FoldRun>>> {
    run_loso(&ds.subjects, r.config.jobs, |split| run_fold(r, ds, split))
}

/// Mean cosine similarity over all pairs of embeddings with different
/// labels. Zero vectors are skipped; `None` when no pair remains.
pub fn mean_cross_class_cosine(embeddings: &[Vec<f32>], labels: &[CognitiveLoad]) -> Option<f64> {
    let normed: Vec<Option<Vec<f64>>> = embeddings
        .iter()
        .map(|e| {
            let n = e.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            (n > 0.0).then(|| e.iter().map(|&v| f64::from(v) / n).collect())
        })
        .collect();
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..normed.len() {
        for j in i + 1..normed.len() {
            if labels[i] == labels[j] {
                continue;
            }
            if let (Some(a), Some(b)) = (&normed[i], &normed[j]) {
                sum += a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
                count += 1;
            }
        }
    }
    (count > 0).then(|| sum / count as f64)
}

/// `fold_<subject>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub subject: SubjectId,
    pub train_subjects: Vec<SubjectId>,
    pub seed: u64,
    pub error: Option<String>,
    pub log: Vec<EpochLog>,
    pub metrics: Option<Metrics>,
    pub cross_class_cosine: Option<f64>,
    pub scores: Vec<SampleScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRow {
    pub subject: SubjectId,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub macro_f1: Option<f64>,
}

/// `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub name: String,
    pub seed: u64,
    pub version: String,
    pub loso: LosoSummary,
    pub folds: Vec<FoldRow>,
    /// Mean over folds of the test-set cross-class cosine of fused
    /// embeddings.
    pub cross_class_cosine: Option<f64>,
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format("json", path, e.to_string()))
}

fn metric_headers(macro_f1: bool) -> Vec<String> {
    let mut h = vec!["accuracy".to_string(), "f1".to_string()];
    if macro_f1 {
        h.push("macro_f1".into());
    }
    h
}

fn summary_cells(s: &LosoSummary, macro_f1: bool) -> Vec<String> {
    let cell = |m: Option<crate::trainer::MeanStd>| m.map(|m| m.percent()).unwrap_or_else(|| "NA".into());
    let mut row = vec![cell(s.accuracy), cell(s.f1)];
    if macro_f1 {
        row.push(cell(s.macro_f1));
    }
    row
}

/// Writes a complete run directory and returns its summary.
pub fn write_run(dir: &Path, r: &Resolved, folds: &[Fold<FoldRun>]) -> Result<RunSummary> {
    write_bytes(&dir.join(CONFIG_FILE), r.config.canonical_text().as_bytes())?;
    write_json(&dir.join(RUN_FILE), r)?;
    let mut rows = Vec::with_capacity(folds.len());
    let mut cosines = Vec::new();
    for fold in folds {
        let subject = &fold.split.test_subject;
        let mut report = FoldReport {
            subject: subject.clone(),
            train_subjects: fold.split.train_subjects.iter().cloned().collect(),
            seed: r.train.seed,
            error: None,
            log: Vec::new(),
            metrics: None,
            cross_class_cosine: None,
            scores: Vec::new(),
        };
        match &fold.result {
            Ok(run) => {
                let ckpt = dir.join(CHECKPOINT_DIR).join(subject.as_str());
                fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
                run.trained.model.params().save(&ckpt.join(MODEL_FILE))?;
                write_json(&ckpt.join(NORMALIZER_FILE), &run.normalizer)?;
                let labels: Vec<CognitiveLoad> = run.evaluation.scores.iter().map(|s| s.label).collect();
                report.cross_class_cosine = mean_cross_class_cosine(&run.evaluation.fused, &labels);
                cosines.extend(report.cross_class_cosine);
                report.log = run.trained.log.clone();
                report.metrics = Some(run.evaluation.metrics);
                report.scores = run.evaluation.scores.clone();
            }
            Err(e) => report.error = Some(e.to_string()),
        }
        rows.push(FoldRow {
            subject: subject.clone(),
            accuracy: report.metrics.map(|m| m.accuracy),
            f1: report.metrics.map(|m| m.f1),
            macro_f1: report.metrics.map(|m| m.macro_f1),
        });
        write_json(&dir.join(format!("fold_{subject}.json")), &report)?;
    }
    let summary = RunSummary {
        run_id: r.run_id.clone(),
        name: r.config.name.clone(),
        seed: r.train.seed,
        version: r.version.clone(),
        loso: LosoSummary::from_folds(folds, |f| f.evaluation.metrics),
        folds: rows,
        cross_class_cosine: (!cosines.is_empty()).then(|| cosines.iter().sum::<f64>() / cosines.len() as f64),
    };
    write_json(&dir.join(SUMMARY_JSON), &summary)?;
    let mut header = vec!["method".to_string()];
    header.extend(metric_headers(r.config.macro_f1));
    let mut row = vec![r.config.name.clone()];
    row.extend(summary_cells(&summary.loso, r.config.macro_f1));
    data::write_tsv(&dir.join(SUMMARY_TSV), &header, &[row])?;
    Ok(summary)
}

/// Where a finished command left its outputs.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub summary: RunSummary,
}

/// One full LOSO run into `<out>/<run-id>/`.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunOutput> {
    let r = cfg.resolve()?;
    let ds = load_dataset(&r)?;
    let dir = cfg.out.join(&r.run_id);
    let folds = run_folds(&r, &ds)?;
    let summary = write_run(&dir, &r, &folds)?;
    Ok(RunOutput { dir, summary })
}

/// One row of a multi-configuration table.
#[derive(Clone, Debug)]
pub struct SuiteRow {
    pub name: String,
    pub resolved: Resolved,
    pub summary: RunSummary,
}

#[derive(Clone, Debug)]
pub struct SuiteOutput {
    pub dir: PathBuf,
    pub rows: Vec<SuiteRow>,
}

/// Runs each variant into `<dir>/<variant name>/`. All variants must share
/// the data settings of the first, so the dataset is loaded once.
fn run_suite(dir: &Path, variants: Vec<RunConfig>) -> Result<Vec<SuiteRow>> {
    let resolved = variants.iter().map(RunConfig::resolve).collect::<Result<Vec<_>>>()?;
    let first = resolved.first().ok_or_else(|| Error::usage("empty suite"))?;
    let ds = load_dataset(first)?;
    let mut rows = Vec::with_capacity(resolved.len());
    for r in resolved {
        let folds = run_folds(&r, &ds)?;
        let summary = write_run(&dir.join(&r.config.name), &r, &folds)?;
        rows.push(SuiteRow {
            name: r.config.name.clone(),
            resolved: r,
            summary,
        });
    }
    Ok(rows)
}

fn clear_ablation_flags(cfg: &RunConfig) -> RunConfig {
    RunConfig {
        no_oc: false,
        no_attention: false,
        raw_only: false,
        topo_only: false,
        ..cfg.clone()
    }
}

/// The six ablation rows: `(name, raw stream, topography maps, L_OC,
/// attention)`.
pub const ABLATION_ROWS: [(&str, bool, bool, bool, bool); 6] = [
    ("full", true, true, true, true),
    ("no_oc", true, true, false, true),
    ("no_attention", true, true, true, false),
    ("no_oc_no_attention", true, true, false, false),
    ("raw_only", true, false, false, false),
    ("topo_only", false, true, false, false),
];

/// Configurations of the ablation table, derived from `base` with its own
/// ablation flags ignored.
pub fn ablation_variants(base: &RunConfig) -> Vec<RunConfig> {
    let base = clear_ablation_flags(base);
    ABLATION_ROWS
        .iter()
        .map(|&(name, raw, topo, oc, attention)| RunConfig {
            name: name.into(),
            raw_only: !topo,
            topo_only: !raw,
            no_oc: !oc,
            no_attention: !attention,
            ..base.clone()
        })
        .collect()
}

fn yes_no(v: bool) -> String {
    if v { "yes" } else { "no" }.into()
}

/// Every ablation configuration plus `ablation.tsv`.
pub fn cmd_ablation_suite(cfg: &RunConfig) -> Result<SuiteOutput> {
    cfg.resolve()?;
    let dir = cfg.out.join(format!("{}-ablation", clear_ablation_flags(cfg).run_id()));
    let rows = run_suite(&dir, ablation_variants(cfg))?;
    let mut header: Vec<String> = ["config", "raw", "ms_maps", "l_oc", "attention"].map(String::from).into();
    header.extend(metric_headers(cfg.macro_f1));
    let table: Vec<Vec<String>> = rows
        .iter()
        .zip(ABLATION_ROWS)
        .map(|(row, (name, raw, topo, oc, attention))| {
            let mut cells = vec![name.to_string(), yes_no(raw), yes_no(topo), yes_no(oc), yes_no(attention)];
            cells.extend(summary_cells(&row.summary.loso, cfg.macro_f1));
            cells
        })
        .collect();
    data::write_tsv(&dir.join("ablation.tsv"), &header, &table)?;
    Ok(SuiteOutput { dir, rows })
}

/// The beta sweep configurations: each beta with and without attention,
/// all sharing `base.seed`.
pub fn beta_sweep_variants(base: &RunConfig) -> Vec<RunConfig> {
    let base = clear_ablation_flags(base);
    let mut out = Vec::new();
    for beta in SWEEP_BETAS {
        for attention in [true, false] {
            out.push(RunConfig {
                name: format!("beta{beta}_{}", if attention { "attention" } else { "concat" }),
                beta,
                no_attention: !attention,
                ..base.clone()
            });
        }
    }
    out
}

/// Six runs (three betas, attention on and off) plus `beta_sweep.tsv`.
pub fn cmd_beta_sweep(cfg: &RunConfig) -> Result<SuiteOutput> {
    cfg.resolve()?;
    let dir = cfg.out.join(format!("{}-beta-sweep", clear_ablation_flags(cfg).run_id()));
    let rows = run_suite(&dir, beta_sweep_variants(cfg))?;
    let mut header: Vec<String> = ["config", "beta", "attention", "seed"].map(String::from).into();
    header.extend(metric_headers(cfg.macro_f1));
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|row| {
            let r = &row.resolved;
            let mut cells = vec![
                row.name.clone(),
                r.train.beta.to_string(),
                yes_no(r.model.fusion == Fusion::Attention),
                r.train.seed.to_string(),
            ];
            cells.extend(summary_cells(&row.summary.loso, cfg.macro_f1));
            cells
        })
        .collect();
    data::write_tsv(&dir.join("beta_sweep.tsv"), &header, &table)?;
    Ok(SuiteOutput { dir, rows })
}

/// A trained fold reloaded from its checkpoint.
pub struct LoadedFold {
    pub subject: SubjectId,
    pub model: Model<f32>,
    pub normalizer: FeatureNormalizer,
}

/// A finished run directory with its dataset rebuilt from the stored
/// configuration.
pub struct LoadedRun {
    pub dir: PathBuf,
    pub resolved: Resolved,
    pub dataset: Dataset,
    pub folds: Vec<LoadedFold>,
}

/// Reads a run directory. Checkpoints are only read.
pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let cfg_path = dir.join(CONFIG_FILE);
    if !cfg_path.is_file() {
        return Err(Error::usage(format!("{} is not a run directory (no {CONFIG_FILE})", dir.display())));
    }
    let resolved = RunConfig::from_file(&cfg_path)?.resolve()?;
    let stored: Resolved = read_json(&dir.join(RUN_FILE))?;
    if stored.run_id != resolved.run_id {
        return Err(Error::format(
            "run",
            dir.join(RUN_FILE),
            format!("run id {} does not match {CONFIG_FILE} ({})", stored.run_id, resolved.run_id),
        ));
    }
    let dataset = load_dataset(&resolved)?;
    let mut folds = Vec::with_capacity(dataset.subjects.len());
    for subject in &dataset.subjects {
        let ckpt = dir.join(CHECKPOINT_DIR).join(subject.as_str());
        let model_path = ckpt.join(MODEL_FILE);
        if !model_path.is_file() {
            return Err(Error::usage(format!("missing checkpoint {}", model_path.display())));
        }
        let mut model = Model::<f32>::new(resolved.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        model.params_mut().load(&model_path)?;
        let normalizer: FeatureNormalizer = read_json(&ckpt.join(NORMALIZER_FILE))?;
        normalizer.check_excludes(subject)?;
        folds.push(LoadedFold {
            subject: subject.clone(),
            model,
            normalizer,
        });
    }
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        resolved,
        dataset,
        folds,
    })
}

/// Per-segment noise seed, independent of evaluation order.
pub fn noise_seed(seed: u64, fraction: f64, subject: &SubjectId, window_index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(fraction.to_bits().to_le_bytes());
    h.update(subject.as_str().as_bytes());
    h.update((window_index as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

impl LoadedRun {
    /// Test samples of one fold, rebuilt from the filtered segments with
    /// optional noise (added before feature extraction) and masking.
    pub fn test_samples(&self, fold: &LoadedFold, mask: &Mask, noise_fraction: f64) -> Result<Vec<Sample>> {
        let opts = &self.resolved.pipeline;
        let layout = ElectrodeLayout::default();
        self.dataset
            .segments
            .iter()
            .filter(|s| s.subject == fold.subject)
            .map(|s| {
                let noise = if noise_fraction > 0.0 {
                    let seed = noise_seed(self.resolved.train.seed, noise_fraction, &s.subject, s.window_index);
                    Some(NoiseSpec::new(noise_fraction, seed)?)
                } else {
                    None
                };
                let f = segment_features(s, opts, mask, noise)?;
                build_sample(&f, &fold.normalizer, &layout, mask)
            })
            .collect()
    }

    pub fn evaluate_fold(&self, fold: &LoadedFold, mask: &Mask, noise_fraction: f64) -> Result<Evaluation> {
        evaluate(&fold.model, &self.test_samples(fold, mask, noise_fraction)?, MAP_SHAPE)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub subject: SubjectId,
    pub metrics: Metrics,
}

/// One row of an analysis table: per-subject metrics and their summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRow {
    pub unit: String,
    pub subjects: Vec<SubjectMetrics>,
    pub accuracy: crate::trainer::MeanStd,
    pub f1: crate::trainer::MeanStd,
}

impl AnalysisRow {
    fn new(unit: String, subjects: Vec<SubjectMetrics>) -> Self {
        let col = |get: fn(&Metrics) -> f64| {
            crate::trainer::MeanStd::of(&subjects.iter().map(|s| get(&s.metrics)).collect::<Vec<_>>())
                .expect("at least one fold")
        };
        AnalysisRow {
            accuracy: col(|m| m.accuracy),
            f1: col(|m| m.f1),
            unit,
            subjects,
        }
    }
}

fn write_analysis(dir: &Path, stem: &str, unit_header: &str, rows: &[AnalysisRow]) -> Result<()> {
    write_json(&dir.join(format!("{stem}.json")), &rows)?;
    let header: Vec<String> = [unit_header, "subject", "accuracy", "f1"].map(String::from).into();
    let mut table = Vec::new();
    for row in rows {
        for s in &row.subjects {
            table.push(vec![
                row.unit.clone(),
                s.subject.to_string(),
                format!("{:.6}", s.metrics.accuracy),
                format!("{:.6}", s.metrics.f1),
            ]);
        }
        table.push(vec![row.unit.clone(), "mean(std)".into(), row.accuracy.percent(), row.f1.percent()]);
    }
    data::write_tsv(&dir.join(format!("{stem}.tsv")), &header, &table)
}

/// Metrics of each stored fold under increasing test-time noise. The first
/// row is always the noise-free evaluation.
pub fn cmd_robustness(run_dir: &Path, fractions: &[f64], out: &Path) -> Result<Vec<AnalysisRow>> {
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && f.is_finite())) {
        return Err(Error::usage(format!("noise fraction {f} must be positive")));
    }
    let run = load_run(run_dir)?;
    let mut rows = Vec::with_capacity(fractions.len() + 1);
    for &fraction in std::iter::once(&0.0).chain(fractions) {
        let subjects = run
            .folds
            .iter()
            .map(|fold| {
                Ok(SubjectMetrics {
                    subject: fold.subject.clone(),
                    metrics: run.evaluate_fold(fold, &Mask::None, fraction)?.metrics,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(AnalysisRow::new(fraction.to_string(), subjects));
    }
    write_analysis(out, "robustness", "noise_fraction", &rows)?;
    Ok(rows)
}

/// Axis of the masking analysis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Channel,
    Band,
}

impl Axis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "channel" => Ok(Axis::Channel),
            "band" => Ok(Axis::Band),
            _ => Err(Error::usage(format!("unknown axis `{s}` (channel|band)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::Channel => "channel",
            Axis::Band => "band",
        }
    }

    /// Unit names with the mask keeping only that unit.
    pub fn units(self) -> Vec<(String, Mask)> {
        match self {
            Axis::Channel => (0..N_CHANNELS)
                .map(|c| (CHANNEL_NAMES[c].to_string(), Mask::channels([c]).expect("valid channel")))
                .collect(),
            Axis::Band => FrequencyBand::ALL
                .into_iter()
                .map(|b| (b.name().to_string(), Mask::bands([b]).expect("one band")))
                .collect(),
        }
    }
}

/// Evaluates every stored fold with all but one channel (or band) masked.
pub fn cmd_importance(run_dir: &Path, axis: Axis, out: &Path) -> Result<Vec<AnalysisRow>> {
    let run = load_run(run_dir)?;
    let mut rows = Vec::new();
    for (unit, mask) in axis.units() {
        let subjects = run
            .folds
            .iter()
            .map(|fold| {
                Ok(SubjectMetrics {
                    subject: fold.subject.clone(),
                    metrics: run.evaluate_fold(fold, &mask, 0.0)?.metrics,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(AnalysisRow::new(unit, subjects));
    }
    write_analysis(out, &format!("importance_{}", axis.name()), axis.name(), &rows)?;
    Ok(rows)
}

/// Counts of what the gate export wrote.
#[derive(Clone, Debug, PartialEq)]
pub struct ExportSummary {
    pub rows: usize,
    pub gate_dim: usize,
    pub attention: PathBuf,
    pub embeddings: PathBuf,
}

fn fmt_f32(v: f32) -> String {
    format!("{v:.6}")
}

/// Per test sample: the attention gate with its mean (`attention.tsv`) and
/// the fused embedding (`embeddings.tsv`).
pub fn cmd_attention_export(run_dir: &Path, out: &Path) -> Result<ExportSummary> {
    let run = load_run(run_dir)?;
    if run.resolved.model.fusion != Fusion::Attention {
        return Err(Error::usage("this run has no attention module"));
    }
    let m = run.resolved.model.embed_dim();
    let key = ["subject", "window_index", "label", "predicted"].map(String::from);
    let mut gate_header: Vec<String> = key.to_vec();
    gate_header.push("mean_gate".into());
    gate_header.extend((0..m).map(|i| format!("a{i}")));
    let mut emb_header: Vec<String> = key.to_vec();
    emb_header.extend((0..m).map(|i| format!("e{i}")));
    let (mut gate_rows, mut emb_rows) = (Vec::new(), Vec::new());
    for fold in &run.folds {
        let ev = run.evaluate_fold(fold, &Mask::None, 0.0)?;
        let gates = ev.gates.as_ref().ok_or_else(|| Error::usage("model produced no gate"))?;
        for ((score, gate), fused) in ev.scores.iter().zip(gates).zip(&ev.fused) {
            let key = vec![
                score.subject.to_string(),
                score.window_index.to_string(),
                score.label.to_string(),
                score.predicted.to_string(),
            ];
            let mean = gate.iter().map(|&v| f64::from(v)).sum::<f64>() / gate.len() as f64;
            let mut g = key.clone();
            g.push(format!("{mean:.6}"));
            g.extend(gate.iter().copied().map(fmt_f32));
            gate_rows.push(g);
            let mut e = key;
            e.extend(fused.iter().copied().map(fmt_f32));
            emb_rows.push(e);
        }
    }
    let attention = out.join("attention.tsv");
    let embeddings = out.join("embeddings.tsv");
    data::write_tsv(&attention, &gate_header, &gate_rows)?;
    data::write_tsv(&embeddings, &emb_header, &emb_rows)?;
    Ok(ExportSummary {
        rows: gate_rows.len(),
        gate_dim: m,
        attention,
        embeddings,
    })
}

/// Band values of every filtered segment: absolute Welch band power, or
/// differential entropy with `features=de`. Writes `features.tsv`.
pub fn cmd_featurize(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let recordings = load_recordings(cfg)?;
    let (segments, _) = filtered_segments(&recordings, cfg.zero_phase)?;
    let mut header: Vec<String> = ["subject", "window_index", "label"].map(String::from).into();
    for ch in CHANNEL_NAMES {
        for b in FrequencyBand::ALL {
            header.push(format!("{ch}_{}", b.name()));
        }
    }
    let rows = segments
        .iter()
        .map(|s| {
            let values = match cfg.features {
                FeatureKind::Psd => spectral::band_powers(s)?,
                FeatureKind::De => spectral::de_features(s)?,
            };
            let mut row = vec![s.subject.to_string(), s.window_index.to_string(), s.label.to_string()];
            row.extend(values.flatten().iter().map(|v| format!("{v:e}")));
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    let path = out.join("features.tsv");
    data::write_tsv(&path, &header, &rows)?;
    Ok(path)
}

/// Writes `maps/<subject>/<window>.f32le` and one PPM per band for each
/// filtered segment (at most `limit` per subject). Returns the number of
/// tensors written.
pub fn cmd_topomap(cfg: &RunConfig, out: &Path, limit: Option<usize>) -> Result<usize> {
    let opts = PipelineOptions {
        features: cfg.features,
        zero_phase: cfg.zero_phase,
        log_power: !cfg.linear_power,
    };
    let recordings = load_recordings(cfg)?;
    let (segments, _) = filtered_segments(&recordings, cfg.zero_phase)?;
    let layout = ElectrodeLayout::default();
    let mut written = 0;
    let mut per_subject = std::collections::BTreeMap::<SubjectId, usize>::new();
    for s in &segments {
        let n = per_subject.entry(s.subject.clone()).or_default();
        if limit.is_some_and(|l| *n >= l) {
            continue;
        }
        *n += 1;
        let f = segment_features(s, &opts, &Mask::None, None)?;
        let map = build_map_from_values(&f.values, &layout)?;
        let dir = out.join("maps").join(s.subject.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        map.write_f32le(&dir.join(format!("{}.f32le", s.window_index)))?;
        for b in FrequencyBand::ALL {
            map.write_ppm(b, &dir.join(format!("{}_{}.ppm", s.window_index, b.name())))?;
        }
        written += 1;
    }
    Ok(written)
}

/// Writes a synthetic dataset in the on-disk recording format.
pub fn cmd_synth(subjects: usize, segments: usize, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    if subjects == 0 || segments == 0 {
        return Err(Error::usage("synth needs at least one subject and one segment"));
    }
    data::write_segments_as_dataset(out, &synth_generate(subjects, segments, seed)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_round_trip() {
        let cfg = RunConfig::parse("# comment\nsynthetic\nsubjects=3 # trailing\nlr=0.001\nno_oc=true\nfeatures=de\n").unwrap();
        assert!(cfg.synthetic && cfg.no_oc);
        assert_eq!((cfg.subjects, cfg.lr, cfg.features), (3, 1e-3, FeatureKind::De));
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_usage_errors() {
        for text in ["learning_rate=1", "lr=fast", "features=fft", "model=huge", "no_oc=maybe"] {
            let e = RunConfig::parse(text).unwrap_err();
            assert!(matches!(e, Error::Usage(_)), "{text}: {e}");
            assert_eq!(e.exit_code(), 2);
        }
    }

    #[test]
    fn flag_resolution() {
        let base = RunConfig {
            synthetic: true,
            ..Default::default()
        };
        let r = base.resolve().unwrap();
        assert_eq!((r.model.fusion, r.train.beta), (Fusion::Attention, 0.4));
        let r = RunConfig { no_oc: true, ..base.clone() }.resolve().unwrap();
        assert_eq!(r.train.beta, 0.0);
        let r = RunConfig { no_attention: true, ..base.clone() }.resolve().unwrap();
        assert_eq!((r.model.fusion, r.train.beta), (Fusion::Concat, 0.4));
        let r = RunConfig { raw_only: true, ..base.clone() }.resolve().unwrap();
        assert_eq!((r.model.fusion, r.train.beta), (Fusion::RawOnly, 0.0));
        let r = RunConfig { topo_only: true, ..base.clone() }.resolve().unwrap();
        assert_eq!((r.model.fusion, r.train.beta), (Fusion::TopoOnly, 0.0));
        let both = RunConfig {
            raw_only: true,
            topo_only: true,
            ..base.clone()
        };
        assert!(matches!(both.resolve(), Err(Error::Usage(_))));
        assert!(matches!(RunConfig::default().resolve(), Err(Error::Usage(_))));
    }

    #[test]
    fn run_id_ignores_output_location_only() {
        let a = RunConfig {
            synthetic: true,
            ..Default::default()
        };
        let b = RunConfig {
            out: "elsewhere".into(),
            jobs: 4,
            ..a.clone()
        };
        let c = RunConfig { seed: 1, ..a.clone() };
        assert_eq!(a.run_id(), b.run_id());
        assert_ne!(a.run_id(), c.run_id());
        assert!(a.run_id().starts_with("run-"));
    }

    #[test]
    fn ablation_and_sweep_tables() {
        let base = RunConfig {
            synthetic: true,
            no_oc: true,
            ..Default::default()
        };
        let rows: Vec<_> = ablation_variants(&base).iter().map(|c| c.resolve().unwrap()).collect();
        assert_eq!(rows.len(), 6);
        let got: Vec<(Fusion, bool)> = rows.iter().map(|r| (r.model.fusion, r.train.beta > 0.0)).collect();
        assert_eq!(
            got,
            [
                (Fusion::Attention, true),
                (Fusion::Attention, false),
                (Fusion::Concat, true),
                (Fusion::Concat, false),
                (Fusion::RawOnly, false),
                (Fusion::TopoOnly, false),
            ]
        );
        let sweep = beta_sweep_variants(&base);
        assert_eq!(sweep.len(), 6);
        assert!(sweep.iter().all(|c| c.seed == base.seed && !c.no_oc));
    }

    #[test]
    fn noise_seeds_differ_per_segment() {
        let s = SubjectId::new("S01");
        let a = noise_seed(0, 0.1, &s, 0);
        assert_eq!(a, noise_seed(0, 0.1, &s, 0));
        assert_ne!(a, noise_seed(0, 0.1, &s, 1));
        assert_ne!(a, noise_seed(0, 0.3, &s, 0));
        assert_ne!(a, noise_seed(1, 0.1, &s, 0));
    }

    #[test]
    fn cross_class_cosine() {
        use CognitiveLoad::{High, Low};
        let e = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 0.0], vec![0.0, 0.0]];
        let labels = [Low, High, Low, High];
        assert_eq!(mean_cross_class_cosine(&e, &labels), Some(0.0));
        let e = vec![vec![1.0, 1.0], vec![2.0, 2.0]];
        assert!((mean_cross_class_cosine(&e, &[Low, High]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(mean_cross_class_cosine(&e, &[Low, Low]), None);
    }

    #[test]
    fn axis_units() {
        assert_eq!(Axis::parse("channel").unwrap().units().len(), 4);
        assert_eq!(Axis::parse("band").unwrap().units().len(), 5);
        assert!(matches!(Axis::parse("time"), Err(Error::Usage(_))));
    }
}
