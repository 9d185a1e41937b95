//! Experiment configs and the run pipeline: data, training, diagnostics, artifacts.

use crate::data::{
    annotate, generating_matrices, load_dir, make_segmentation_dataset, make_synthetic_blobs, save_dir, stylize,
    AnnotatorProfile, AnnotatorSource, LabeledDataset, SegmentationOptions, Style, StyleFractions, Task,
};
use crate::diagnostics::{confidence_profile, confusion_heatmap_export, diagonally_dominant, recovery_distance, Reference, RecoveryReport};
use crate::error::{Error, Result};
use crate::model::{checkpoint, ConfusionMode, Model, ModelSpec, NetSpec, DEFAULT_INIT_DIAGONAL};
use crate::noise::{NoiseKind, NoiseSpec, TransitionMatrix};
use crate::objective::RegularizerKind;
use crate::rng;
use crate::trainer::{evaluate, train, EpochRecord, TrainConfig, TrainReport};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Everything needed to reproduce one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub annotators: Vec<AnnotatorConfig>,
    #[serde(default)]
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Training samples.
    pub train: usize,
    /// Test samples.
    pub test: usize,
    pub source: DataSource,
    /// Present for style-partitioned datasets.
    #[serde(default)]
    pub styles: Option<StyleFractions>,
    /// Present for segmentation datasets; annotators then come from here.
    #[serde(default)]
    pub segmentation: Option<SegmentationOptions>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Blobs {
        classes: usize,
        size: usize,
    },
    /// IDX image and label files. With `fallback_blobs`, missing files are
    /// replaced by a 10-class 28×28 blobs set.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        fallback_blobs: bool,
    },
}

/// One annotator: either `noise` for every style or one spec per style.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatorConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub styles: BTreeMap<Style, NoiseSpec>,
}

impl AnnotatorConfig {
    pub fn uniform(name: impl Into<String>, noise: NoiseSpec) -> Self {
        AnnotatorConfig { name: name.into(), noise: Some(noise), styles: BTreeMap::new() }
    }

    pub fn from_profile(p: &AnnotatorProfile) -> Self {
        AnnotatorConfig { name: p.name.clone(), noise: None, styles: p.styles.clone() }
    }

    fn profile(&self, key: &str) -> Result<AnnotatorProfile> {
        match (&self.noise, self.styles.is_empty()) {
            (Some(spec), true) => Ok(AnnotatorProfile::uniform(self.name.clone(), spec.clone())),
            (None, false) => Ok(AnnotatorProfile { name: self.name.clone(), styles: self.styles.clone() }),
            _ => Err(Error::config(key, "give exactly one of `noise` or `styles`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "NetSpec::lenet")]
    pub classifier: NetSpec,
    #[serde(default = "default_confusion")]
    pub confusion: ConfusionMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditioned: Option<NetSpec>,
    #[serde(default = "default_init_diagonal")]
    pub init_diagonal: f64,
}

fn default_confusion() -> ConfusionMode {
    ConfusionMode::Static
}

fn default_init_diagonal() -> f64 {
    DEFAULT_INIT_DIAGONAL
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            classifier: NetSpec::lenet(),
            confusion: ConfusionMode::Static,
            conditioned: None,
            init_diagonal: DEFAULT_INIT_DIAGONAL,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
    /// Save a checkpoint every this many epochs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
    /// Also evaluate on the clean labels of the training set each epoch.
    #[serde(default)]
    pub eval_train: bool,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: default_out(), checkpoint_every: None, eval_train: false }
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parses TOML, or JSON when `json` is set; errors name the offending key.
    pub fn parse(text: &str, json: bool) -> Result<Self> {
        let config: ExperimentConfig = if json {
            let mut de = serde_json::Deserializer::from_str(text);
            serde_path_to_error::deserialize(&mut de).map_err(|e| Error::config(e.path().to_string(), e.inner().to_string()))?
        } else {
            let de = toml::de::Deserializer::parse(text).map_err(|e| Error::config("<document>", e.to_string()))?;
            serde_path_to_error::deserialize(de).map_err(|e| Error::config(e.path().to_string(), e.inner().message().to_string()))?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let json = path.extension().is_some_and(|e| e == "json");
        Self::parse(&text, json)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(epochs) = o.epochs {
            self.train.epochs = epochs;
        }
        if let Some(out) = &o.out {
            self.output.dir = out.clone();
        }
    }

    pub fn classes(&self) -> usize {
        match (&self.dataset.segmentation, &self.dataset.source) {
            (Some(_), _) => 2,
            (None, DataSource::Blobs { classes, .. }) => *classes,
            (None, DataSource::Idx { .. }) => 10,
        }
    }

    pub fn task(&self) -> Task {
        if self.dataset.segmentation.is_some() {
            Task::Segmentation
        } else {
            Task::Classification
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("name", "must be a non-empty file-name-safe string"));
        }
        if self.dataset.train == 0 {
            return Err(Error::config("dataset.train", "must be positive"));
        }
        if self.dataset.test == 0 {
            return Err(Error::config("dataset.test", "must be positive"));
        }
        if let DataSource::Blobs { classes, size } = self.dataset.source {
            if !(2..=256).contains(&classes) {
                return Err(Error::config("dataset.source.classes", "must lie in 2..=256"));
            }
            if size < 4 {
                return Err(Error::config("dataset.source.size", "must be at least 4"));
            }
        }
        let classes = self.classes();
        match self.task() {
            Task::Classification => {
                if self.annotators.is_empty() {
                    return Err(Error::config("annotators", "at least one annotator is required"));
                }
                for (r, a) in self.annotators.iter().enumerate() {
                    let key = format!("annotators[{r}]");
                    a.profile(&key)?;
                    let specs: Vec<(String, &NoiseSpec)> = match &a.noise {
                        Some(s) => vec![(format!("{key}.noise"), s)],
                        None => a.styles.iter().map(|(st, s)| (format!("{key}.styles.{st}"), s)).collect(),
                    };
                    for (k, s) in specs {
                        validate_noise(&k, s, classes)?;
                    }
                }
            }
            Task::Segmentation => {
                if !self.annotators.is_empty() {
                    return Err(Error::config("annotators", "segmentation annotators belong in dataset.segmentation"));
                }
            }
        }
        if self.output.checkpoint_every == Some(0) {
            return Err(Error::config("output.checkpoint_every", "must be positive"));
        }
        self.train.validate()?;
        self.model_spec(1).validate()
    }

    /// Model spec for the resolved data.
    pub fn model_spec(&self, annotators: usize) -> ModelSpec {
        let (h, w) = self.image_extents();
        ModelSpec {
            classes: self.classes(),
            height: h,
            width: w,
            annotators,
            classifier: self.model.classifier.clone(),
            confusion: self.model.confusion,
            conditioned: self.model.conditioned.clone(),
            init_diagonal: self.model.init_diagonal,
        }
    }

    fn image_extents(&self) -> (usize, usize) {
        match self.dataset.source {
            DataSource::Blobs { size, .. } => (size, size),
            DataSource::Idx { .. } => (28, 28),
        }
    }

    /// Hex digest of the config without its output section.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output = OutputConfig::default();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(&Sha256::digest(&bytes)[..6])
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output.dir.join(format!("{}-{}", self.name, self.digest()))
    }
}

fn validate_noise(key: &str, s: &NoiseSpec, classes: usize) -> Result<()> {
    if !(0.0..1.0).contains(&s.rate) {
        return Err(Error::config(format!("{key}.rate"), format!("{} outside [0, 1)", s.rate)));
    }
    if s.kind == NoiseKind::Asymmetric && s.neighborhood == Some(0) {
        return Err(Error::config(format!("{key}.neighborhood"), "must be positive"));
    }
    s.validate(classes).map_err(|e| Error::config(format!("{key}.permutation"), e.to_string()))
}

/// Train and test splits built from a config.
#[derive(Clone, Debug, PartialEq)]
pub struct Datasets {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

fn load_source(config: &ExperimentConfig, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    let (n_train, n_test) = (config.dataset.train, config.dataset.test);
    let blobs = |classes, size| {
        let all = make_synthetic_blobs(n_train + n_test, classes, size, seed);
        let train: Vec<usize> = (0..n_train).collect();
        let test: Vec<usize> = (n_train..n_train + n_test).collect();
        (all.subset(&train), all.subset(&test))
    };
    match &config.dataset.source {
        DataSource::Blobs { classes, size } => Ok(blobs(*classes, *size)),
        DataSource::Idx { train_images, train_labels, test_images, test_labels, fallback_blobs } => {
            let present = [train_images, train_labels, test_images, test_labels].iter().all(|p| p.exists());
            if !present && *fallback_blobs {
                log::warn!("IDX files not found; using the 10-class blobs set instead");
                return Ok(blobs(10, 28));
            }
            let train = LabeledDataset::load_idx(train_images, train_labels)?;
            let test = LabeledDataset::load_idx(test_images, test_labels)?;
            if (train.height(), train.width()) != (28, 28) || (test.height(), test.width()) != (28, 28) {
                return Err(Error::config("dataset.source", "IDX images must be 28×28"));
            }
            if train.len() < n_train || test.len() < n_test {
                return Err(Error::config("dataset.train", "more samples requested than the files hold"));
            }
            Ok((train.head(n_train), test.head(n_test)))
        }
    }
}

/// Builds the annotated training split and the clean test split.
pub fn build_datasets(config: &ExperimentConfig) -> Result<Datasets> {
    let seed = config.seed;
    let (mut train, mut test) = load_source(config, rng::derive(seed, "experiment/data"))?;
    if let Some(f) = config.dataset.styles {
        train = stylize(&train, f, rng::derive(seed, "experiment/styles/train"))?;
        test = stylize(&test, f, rng::derive(seed, "experiment/styles/test"))?;
    }
    match &config.dataset.segmentation {
        Some(options) => {
            train = make_segmentation_dataset(&train, options, rng::derive(seed, "experiment/segmentation/train"))?;
            test = make_segmentation_dataset(&test, options, rng::derive(seed, "experiment/segmentation/test"))?;
            test.clear_annotators();
        }
        None => {
            let profiles = config
                .annotators
                .iter()
                .enumerate()
                .map(|(r, a)| a.profile(&format!("annotators[{r}]")))
                .collect::<Result<Vec<_>>>()?;
            train = annotate(&train, &profiles, rng::derive(seed, "experiment/annotate"))?;
        }
    }
    Ok(Datasets { train, test })
}

/// Generating matrices the model's heads should recover: one per
/// (annotator, style) for conditioned heads, otherwise the style mixture.
pub fn reference_matrices(train: &LabeledDataset, mode: ConfusionMode) -> Result<Option<Vec<Reference>>> {
    if mode == ConfusionMode::Identity || train.annotators().iter().any(|a| matches!(a.source, AnnotatorSource::Mask(_))) {
        return Ok(None);
    }
    let gens = generating_matrices(train)?;
    let c = train.classes();
    let counts: BTreeMap<Style, usize> = match train.styles() {
        Some(s) => s.iter().fold(BTreeMap::new(), |mut m, st| {
            *m.entry(*st).or_insert(0) += 1;
            m
        }),
        None => BTreeMap::from([(Style::Original, train.len())]),
    };
    let mut refs = Vec::new();
    for (r, per_style) in gens.iter().enumerate() {
        if mode == ConfusionMode::Conditioned && train.styles().is_some() {
            for style in counts.keys() {
                refs.push(Reference { annotator: r, style: Some(*style), matrix: per_style[style].clone() });
            }
        } else {
            let mut u = vec![0.0; c * c];
            for (style, n) in &counts {
                for (a, v) in u.iter_mut().zip(per_style[style].as_slice()) {
                    *a += v * *n as f64 / train.len() as f64;
                }
            }
            refs.push(Reference { annotator: r, style: None, matrix: TransitionMatrix::from_columns_unchecked(c, u) });
        }
    }
    Ok(Some(refs))
}

/// Final metrics of a run, written as `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub seed: u64,
    pub regularizer: RegularizerKind,
    pub epochs: usize,
    /// `accuracy` or `dice`.
    pub metric: String,
    pub final_test_metric: f64,
    pub final_entropy: f64,
    pub initial_entropy: f64,
    pub best_epoch: usize,
    pub best_test_metric: f64,
    pub recovery_mean_tv: Vec<f64>,
    pub diagonally_dominant: Option<bool>,
}

pub struct RunOutcome {
    pub dir: PathBuf,
    pub report: TrainReport,
    pub recovery: Option<RecoveryReport>,
    pub summary: Summary,
    pub model: Model,
}

const EVAL_BATCH: usize = 250;

/// Builds data, trains, and writes every artifact into the run directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome> {
    config.validate()?;
    let dir = config.run_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write(&dir.join("manifest.json"), &serde_json::to_string_pretty(config).expect("config serializes"))?;
    let data = build_datasets(config)?;
    run_on(config, &data, &dir)
}

/// Trains on prepared data and writes artifacts into `dir`.
pub fn run_on(config: &ExperimentConfig, data: &Datasets, dir: &Path) -> Result<RunOutcome> {
    let view = data.train.train_view();
    let spec = config.model_spec(view.annotator_count());
    let model = Model::new(spec, rng::derive(config.seed, "experiment/model"))?;
    let references = reference_matrices(&data.train, config.model.confusion)?;
    let mut train_cfg = config.train.clone();
    train_cfg.seed = rng::derive(config.seed, "experiment/batches");
    let ckpt_dir = dir.join("checkpoints");
    let mut hook = |m: &Model, rec: &mut EpochRecord| -> Result<()> {
        let e = evaluate(m, &data.test, EVAL_BATCH)?;
        rec.test_metric = Some(e.metric);
        rec.entropy = Some(e.entropy);
        if config.output.eval_train {
            rec.train_metric = Some(evaluate(m, &data.train, EVAL_BATCH)?.metric);
        }
        if let Some(refs) = &references {
            rec.recovery_tv = recovery_distance(m, refs, &data.test)?.per_annotator_mean_tv();
        }
        if let Some(every) = config.output.checkpoint_every {
            if rec.epoch > 0 && rec.epoch % every == 0 {
                std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
                checkpoint::save(m.params(), &ckpt_dir.join(format!("epoch-{}.ckpt", rec.epoch)))?;
            }
        }
        Ok(())
    };
    let (model, report) = train(&train_cfg, model, &view, &mut hook)?;

    write(&dir.join("report.csv"), &report.to_csv())?;
    write(&dir.join("report.json"), &report.to_json())?;
    checkpoint::save(model.params(), &dir.join("model.ckpt"))?;
    write(&dir.join("confidence.csv"), &confidence_profile(&model, &data.test, 20)?.to_csv())?;

    let recovery = match &references {
        Some(refs) => {
            let rep = recovery_distance(&model, refs, &data.test)?;
            write(&dir.join("recovery.json"), &rep.to_json())?;
            let cdir = dir.join("confusion");
            std::fs::create_dir_all(&cdir).map_err(|e| Error::io(&cdir, e))?;
            for e in &rep.entries {
                let stem = match e.style {
                    Some(s) => format!("annotator{}-{s}", e.annotator),
                    None => format!("annotator{}", e.annotator),
                };
                confusion_heatmap_export(&e.learned, &cdir.join(format!("{stem}-learned")))?;
                confusion_heatmap_export(&e.reference, &cdir.join(format!("{stem}-reference")))?;
            }
            Some(rep)
        }
        None => None,
    };

    let final_eval = evaluate(&model, &data.test, EVAL_BATCH)?;
    let dominant = match data.test.task() {
        Task::Classification => Some(diagonally_dominant(&final_eval.predictions, data.test.clean_labels(), data.test.classes())?),
        Task::Segmentation => None,
    };
    let last = report.last().ok_or_else(|| Error::Usage("no epochs were run".into()))?;
    let best = report.best().unwrap_or(last);
    let summary = Summary {
        name: config.name.clone(),
        seed: config.seed,
        regularizer: config.train.regularizer,
        epochs: report.records.len(),
        metric: match data.test.task() {
            Task::Classification => "accuracy".into(),
            Task::Segmentation => "dice".into(),
        },
        final_test_metric: final_eval.metric,
        final_entropy: final_eval.entropy,
        initial_entropy: report.initial.as_ref().and_then(|r| r.entropy).unwrap_or(f64::NAN),
        best_epoch: best.epoch,
        best_test_metric: best.test_metric.unwrap_or(f64::NAN),
        recovery_mean_tv: recovery.as_ref().map(|r| r.per_annotator_mean_tv()).unwrap_or_default(),
        diagonally_dominant: dominant,
    };
    write(&dir.join("summary.json"), &serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    Ok(RunOutcome { dir: dir.to_path_buf(), report, recovery, summary, model })
}

/// Serializes both splits and the resolved config; returns the directory.
pub fn make_dataset(config: &ExperimentConfig) -> Result<PathBuf> {
    config.validate()?;
    let dir = config.output.dir.join(format!("{}-{}-data", config.name, config.digest()));
    let data = build_datasets(config)?;
    save_dir(&data.train, &dir.join("train"))?;
    save_dir(&data.test, &dir.join("test"))?;
    write(&dir.join("config.json"), &serde_json::to_string_pretty(config).expect("config serializes"))?;
    Ok(dir)
}

/// Loads a directory written by [`make_dataset`].
pub fn load_datasets(dir: &Path) -> Result<Datasets> {
    Ok(Datasets { train: load_dir(&dir.join("train"))?, test: load_dir(&dir.join("test"))? })
}

/// Side-by-side final metrics of completed runs.
pub fn compare(run_dirs: &[PathBuf]) -> Result<String> {
    let mut rows = Vec::with_capacity(run_dirs.len());
    for d in run_dirs {
        let path = d.join("summary.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let s: Summary = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        rows.push((d.clone(), s));
    }
    let baseline = rows.iter().find(|(_, s)| s.regularizer == RegularizerKind::None).map(|(_, s)| s.final_test_metric);
    let epochs_match = rows.windows(2).all(|w| w[0].1.epochs == w[1].1.epochs);
    let mut out = String::from(
        "run,name,regularizer,epochs,metric,final_test,final_entropy,best_epoch,best_test,mean_recovery_tv,delta_vs_unregularized\n",
    );
    for (d, s) in &rows {
        let tv = if s.recovery_mean_tv.is_empty() {
            String::new()
        } else {
            (s.recovery_mean_tv.iter().sum::<f64>() / s.recovery_mean_tv.len() as f64).to_string()
        };
        let delta = baseline.map(|b| (s.final_test_metric - b).to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{tv},{delta}",
            d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            s.name,
            s.regularizer,
            s.epochs,
            s.metric,
            s.final_test_metric,
            s.final_entropy,
            s.best_epoch,
            s.best_test_metric
        );
    }
    if !epochs_match {
        out.push_str("# warning: runs differ in epoch count\n");
    }
    Ok(out)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
