//! Pipeline steps over a [`Workspace`].
//!
//! The command line and the HTTP API both call these functions with the same
//! parameter structs, so an operation produces the same artifacts whichever
//! way it is invoked. Every step reads the latest version of its inputs and
//! commits a new version of its output.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use image::RgbImage;
use serde::{Deserialize, Serialize};
use shiftkit::backends::toy::ToyClassifier;
use shiftkit::backends::ClassifierBackend;
use shiftkit::evaluation::{
    build_shift_report, evaluate_model, impact_vs_slope_svg, read_report_rows, scatter_svg, EvaluationInput,
    ModelEvaluation, Prediction, PredictionSet, ReportRow, RunManifest, SampleIndex, ShiftSummary, DEFAULT_MIN_COUNT,
};
use shiftkit::filtering::{
    calibrate_class_threshold, filter_samples, score_batch, CalibrationState, FilterDecision, InspectionRequest,
    InspectionVerdict, ShiftCalibrationSession, DEFAULT_CLASS_PERCENTILE, DEFAULT_INSPECTION_COUNT,
    DEFAULT_PERCENTILE_GRID,
};
use shiftkit::generation::{decode_png, encode_png, generate_batch, GenerationRequest};
use shiftkit::inversion::{learn_all_tokens, ClassFailure, ClassImages, FailurePolicy, InversionConfig, TokenInit};
use shiftkit::library::{load_token_library, read_manifest, save_token_library};
use shiftkit::registry::ShiftRegistry;
use shiftkit::{ClassThreshold, ClassToken, CounterfactualSample, Error as CoreError, YieldStats, BASE_SHIFT};

use crate::backend::{toy_world, BackendChoice};
use crate::error::{Result, ServiceError};
use crate::workspace::{Committed, Workspace};

pub const REGISTRY_FILE: &str = "registry.json";
pub const SCORES_FILE: &str = "scores.json";
pub const THRESHOLDS_FILE: &str = "class_thresholds.json";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const FILTERED_FILE: &str = "samples.json";
pub const DECISIONS_FILE: &str = "decisions.json";
pub const YIELD_FILE: &str = "yield.json";
pub const EVALUATIONS_FILE: &str = "evaluations.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const IMPACT_PLOT_FILE: &str = "impact_vs_slope.svg";

/// Progress sink in `[0, 1]`.
pub type Progress<'a> = &'a dyn Fn(f64);

pub fn no_progress(_: f64) {}

/// Workspace plus the backend and optional input overrides.
#[derive(Debug, Clone)]
pub struct Context {
    pub ws: Workspace,
    pub backend: BackendChoice,
    /// Registry file read instead of the workspace's latest version.
    pub registry_override: Option<PathBuf>,
    /// Token library directory read instead of the workspace's latest version.
    pub tokens_override: Option<PathBuf>,
}

fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(CoreError::from)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| ServiceError::io(path, e))?;
    Ok(serde_json::from_slice(&bytes).map_err(CoreError::from)?)
}

fn single(name: &str, bytes: Vec<u8>) -> Vec<(String, Vec<u8>)> {
    vec![(name.to_string(), bytes)]
}

impl Context {
    /// Opens the workspace and seeds the default registry if it has none.
    pub fn new(ws: Workspace, backend: BackendChoice) -> Result<Self> {
        if Workspace::latest(&ws.registry_dir())?.is_none() {
            let bytes = ShiftRegistry::default_registry().to_json()?;
            Workspace::commit_files(&ws.registry_dir(), &single(REGISTRY_FILE, bytes))?;
        }
        Ok(Context {
            ws,
            backend,
            registry_override: None,
            tokens_override: None,
        })
    }

    pub fn registry(&self) -> Result<(ShiftRegistry, Option<u32>)> {
        if let Some(path) = &self.registry_override {
            return Ok((ShiftRegistry::load(path)?, None));
        }
        let (version, dir) = Workspace::latest(&self.ws.registry_dir())?
            .ok_or_else(|| ServiceError::not_found("registry", "workspace"))?;
        Ok((ShiftRegistry::load(&dir.join(REGISTRY_FILE))?, Some(version)))
    }

    pub fn library(&self) -> Result<(Vec<ClassToken>, Option<u32>)> {
        if let Some(dir) = &self.tokens_override {
            return Ok((load_token_library(dir)?, None));
        }
        match Workspace::latest(&self.ws.tokens_dir())? {
            Some((version, dir)) => Ok((load_token_library(&dir)?, Some(version))),
            None => Ok((vec![], None)),
        }
    }

    fn class_label(library: &[ClassToken], class_id: u32) -> Result<String> {
        library
            .iter()
            .find(|t| t.class_id == class_id)
            .map(|t| t.class_label.clone())
            .ok_or_else(|| ServiceError::invalid("class", format!("no token for class {class_id}")))
    }
}

// ------------------------------------------------------------------ datasets

/// One class directory of an image dataset: `<id>` or `<id>_<label>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DatasetClass {
    pub class_id: u32,
    pub label: String,
    pub dir: PathBuf,
}

/// Class directories under `root`, sorted by id. Label separators `-`/`_` read as spaces.
pub fn dataset_classes(root: &Path) -> Result<Vec<DatasetClass>> {
    if !root.is_dir() {
        return Err(ServiceError::invalid(
            "dataset_root",
            format!("{} is not a directory", root.display()),
        ));
    }
    let mut out = vec![];
    for name in Workspace::child_dirs(root)? {
        let (id, label) = match name.split_once('_') {
            Some((id, label)) => (id, label.replace(['-', '_'], " ")),
            None => (name.as_str(), String::new()),
        };
        let Ok(class_id) = id.parse::<u32>() else {
            continue;
        };
        let label = if label.trim().is_empty() {
            format!("class {class_id}")
        } else {
            label
        };
        out.push(DatasetClass {
            class_id,
            label,
            dir: root.join(&name),
        });
    }
    out.sort_by_key(|c| c.class_id);
    if let Some(w) = out.windows(2).find(|w| w[0].class_id == w[1].class_id) {
        return Err(ServiceError::invalid(
            "dataset_root",
            format!("class id {} appears twice", w[0].class_id),
        ));
    }
    Ok(out)
}

/// Selects classes by id, label or directory name; an empty selection keeps all.
pub fn select_classes(all: Vec<DatasetClass>, wanted: &[String]) -> Result<Vec<DatasetClass>> {
    if wanted.is_empty() {
        return Ok(all);
    }
    let mut out = vec![];
    for w in wanted {
        let w = w.trim();
        let hit = all.iter().find(|c| {
            c.class_id.to_string() == w
                || c.label == w.replace(['-', '_'], " ")
                || c.dir.file_name().is_some_and(|n| n == w)
        });
        match hit {
            Some(c) if !out.contains(c) => out.push(c.clone()),
            Some(_) => {}
            None => return Err(ServiceError::invalid("classes", format!("no dataset class {w:?}"))),
        }
    }
    out.sort_by_key(|c| c.class_id);
    Ok(out)
}

/// PNG files of one class directory in name order.
pub fn read_class_images(dir: &Path) -> Result<Vec<RgbImage>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| ServiceError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    files
        .iter()
        .map(|p| {
            let bytes = fs::read(p).map_err(|e| ServiceError::io(p, e))?;
            Ok(decode_png(&bytes)?)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyDatasetParams {
    pub out: PathBuf,
    pub classes: usize,
    pub train_per_class: u64,
    pub val_per_class: u64,
}

/// Seeds of validation images start here so they never coincide with training seeds.
pub const VAL_SEED_OFFSET: u64 = 1_000_000;

/// Writes `train/` and `val/` splits of the toy world as `<id>_<label>/NNNN.png`;
/// validation photos are field photos with varied scenes.
pub fn make_toy_dataset(params: &ToyDatasetParams) -> Result<()> {
    let world = shiftkit::backends::toy::ToyWorld::with_classes(params.classes);
    for (split, n, offset) in [
        ("train", params.train_per_class, 0),
        ("val", params.val_per_class, VAL_SEED_OFFSET),
    ] {
        for (&id, class) in &world.classes {
            let dir = params
                .out
                .join(split)
                .join(format!("{id}_{}", class.label.replace(' ', "-")));
            fs::create_dir_all(&dir).map_err(|e| ServiceError::io(&dir, e))?;
            for i in 0..n {
                let img = if split == "train" {
                    world.dataset_image(id, offset + i)?
                } else {
                    world.field_image(id, offset + i)?
                };
                let path = dir.join(format!("{i:04}.png"));
                fs::write(&path, encode_png(&img)?).map_err(|e| ServiceError::io(&path, e))?;
            }
        }
    }
    Ok(())
}

// ------------------------------------------------------------------ tokens

fn default_steps() -> u64 {
    3000
}
fn default_lr() -> f64 {
    5e-4
}
fn default_parallelism() -> usize {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnParams {
    pub dataset_root: PathBuf,
    /// Class ids, labels or directory names; empty means every class.
    #[serde(default)]
    pub classes: Vec<String>,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Initializer word; defaults to the first word of each class label.
    #[serde(default)]
    pub init_word: Option<String>,
    #[serde(default)]
    pub token_slug: Option<String>,
    /// Pins provenance timestamps for reproducible libraries.
    #[serde(default)]
    pub created_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub fail_fast: bool,
}

impl LearnParams {
    fn config(&self) -> InversionConfig {
        let mut c = InversionConfig {
            steps: self.steps,
            learning_rate: self.learning_rate,
            seed: self.seed,
            created_at: self.created_at,
            ..Default::default()
        };
        if let Some(w) = &self.init_word {
            c.init = TokenInit::Word(w.clone());
        }
        if let Some(s) = &self.token_slug {
            c.token_slug = s.clone();
        }
        c
    }

    pub fn validate(&self) -> Result<Vec<DatasetClass>> {
        self.config().validate()?;
        if self.parallelism == 0 {
            return Err(ServiceError::invalid("parallelism", "must be at least 1"));
        }
        let classes = select_classes(dataset_classes(&self.dataset_root)?, &self.classes)?;
        if classes.is_empty() {
            return Err(ServiceError::invalid("classes", "dataset has no class directories"));
        }
        Ok(classes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSummary {
    pub class_id: u32,
    pub class_label: String,
    pub token_string: String,
    pub embedding_dim: usize,
    pub steps: u64,
    pub backend_id: String,
}

impl From<&ClassToken> for TokenSummary {
    fn from(t: &ClassToken) -> Self {
        TokenSummary {
            class_id: t.class_id,
            class_label: t.class_label.clone(),
            token_string: t.token_string.clone(),
            embedding_dim: t.embedding.len(),
            steps: t.provenance.steps,
            backend_id: t.provenance.backend_id.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnOutcome {
    pub version: u32,
    pub created: bool,
    pub digest: String,
    pub learned: Vec<u32>,
    pub failures: Vec<ClassFailure>,
}

/// Learns tokens for the selected classes and commits them merged into the latest library.
///
/// With `out` set the library is written there instead of a workspace version.
pub fn learn_tokens(
    ctx: &Context,
    params: &LearnParams,
    out: Option<&Path>,
    progress: Progress,
) -> Result<LearnOutcome> {
    let classes = params.validate()?;
    let generator = ctx.backend.generator()?;
    let config = params.config();
    let policy = if params.fail_fast {
        FailurePolicy::FailFast
    } else {
        FailurePolicy::ContinueAndReport
    };
    let mut learned = vec![];
    let mut failures = vec![];
    // chunks of `parallelism` classes, so progress advances while classes run in parallel
    for (i, chunk) in classes.chunks(params.parallelism).enumerate() {
        let images = chunk
            .iter()
            .map(|c| {
                Ok(ClassImages {
                    class_id: c.class_id,
                    class_label: c.label.clone(),
                    images: read_class_images(&c.dir)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let report = learn_all_tokens(&images, generator.as_ref(), &config, params.parallelism, policy)?;
        learned.extend(report.tokens);
        failures.extend(report.failures);
        progress(((i + 1) * params.parallelism).min(classes.len()) as f64 / classes.len() as f64);
    }
    if learned.is_empty() {
        return Err(ServiceError::Conflict(format!(
            "every class failed: {}",
            failures
                .iter()
                .map(|f| format!("{}: {}", f.class_id, f.error))
                .collect::<Vec<_>>()
                .join("; ")
        )));
    }
    let learned_ids: Vec<u32> = learned.iter().map(|t| t.class_id).collect();
    if let Some(dir) = out {
        let digest = save_token_library(&learned, dir)?;
        return Ok(LearnOutcome {
            version: 0,
            created: true,
            digest,
            learned: learned_ids,
            failures,
        });
    }
    let (previous, _) = ctx.library()?;
    let mut merged: BTreeMap<u32, ClassToken> = previous.into_iter().map(|t| (t.class_id, t)).collect();
    for t in learned {
        merged.insert(t.class_id, t);
    }
    let merged: Vec<ClassToken> = merged.into_values().collect();
    let mut digest = String::new();
    let committed = Workspace::commit_with(&ctx.ws.tokens_dir(), |staging| {
        digest = save_token_library(&merged, staging)?;
        Ok(())
    })?;
    Ok(LearnOutcome {
        version: committed.version,
        created: committed.created,
        digest,
        learned: learned_ids,
        failures,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokensView {
    pub version: Option<u32>,
    pub digest: Option<String>,
    pub tokens: Vec<TokenSummary>,
}

pub fn tokens_view(ctx: &Context) -> Result<TokensView> {
    let (library, version) = ctx.library()?;
    let dir = match (&ctx.tokens_override, version) {
        (Some(d), _) => Some(d.clone()),
        (None, Some(v)) => Some(Workspace::version_path(&ctx.ws.tokens_dir(), v)?),
        (None, None) => None,
    };
    let digest = dir.map(|d| read_manifest(&d)).transpose()?.map(|(_, d)| d);
    Ok(TokensView {
        version,
        digest,
        tokens: library.iter().map(TokenSummary::from).collect(),
    })
}

// ------------------------------------------------------------------ generation

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateParams {
    pub class_id: u32,
    pub shift: String,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

impl GenerateParams {
    fn request(&self) -> GenerationRequest {
        GenerationRequest {
            class_id: self.class_id,
            shift_name: self.shift.clone(),
            n: self.n,
            base_seed: self.seed,
        }
    }

    pub fn validate(&self, ctx: &Context) -> Result<()> {
        let (registry, _) = ctx.registry()?;
        let (library, _) = ctx.library()?;
        self.request().validate(&registry, &library)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateOutcome {
    pub sample_ids: Vec<String>,
    pub failed: Vec<String>,
}

pub fn generate(ctx: &Context, params: &GenerateParams, progress: Progress) -> Result<GenerateOutcome> {
    let (registry, _) = ctx.registry()?;
    let (library, _) = ctx.library()?;
    let request = params.request();
    request.validate(&registry, &library)?;
    let token = shiftkit::generation::find_token(&library, params.class_id)?;
    let generator = ctx.backend.generator_with(std::slice::from_ref(token))?;
    let batch = generate_batch(&request, &registry, &library, generator.as_ref())?;
    progress(0.9);
    ctx.ws.samples().write(&batch)?;
    Ok(GenerateOutcome {
        sample_ids: batch.iter().map(|s| s.sample.sample_id.clone()).collect(),
        failed: batch
            .iter()
            .filter(|s| s.sample.is_failed())
            .map(|s| s.sample.sample_id.clone())
            .collect(),
    })
}

// ------------------------------------------------------------------ scoring

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreParams {
    pub shift: String,
    /// Restricts scoring to one class; all classes with samples otherwise.
    #[serde(default)]
    pub class_id: Option<u32>,
}

/// Scores of one (shift, class) batch as stored in the workspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBatch {
    pub embedder_id: String,
    pub shift: String,
    pub class_id: u32,
    pub class_label: String,
    pub samples: Vec<CounterfactualSample>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredClass {
    pub class_id: u32,
    pub version: u32,
    pub created: bool,
    pub scored: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreOutcome {
    pub shift: String,
    pub classes: Vec<ScoredClass>,
}

fn samples_by_class(ctx: &Context, shift: &str) -> Result<BTreeMap<u32, Vec<CounterfactualSample>>> {
    let mut out: BTreeMap<u32, Vec<CounterfactualSample>> = BTreeMap::new();
    for s in ctx.ws.samples().list()? {
        if s.shift_name == shift {
            out.entry(s.class_id).or_default().push(s);
        }
    }
    Ok(out)
}

impl ScoreParams {
    pub fn validate(&self, ctx: &Context) -> Result<()> {
        ctx.registry()?.0.get(&self.shift)?;
        let by_class = samples_by_class(ctx, &self.shift)?;
        match self.class_id {
            Some(c) if !by_class.contains_key(&c) => Err(ServiceError::invalid(
                "class",
                format!("no generated samples for class {c} under {}", self.shift),
            )),
            None if by_class.is_empty() => Err(ServiceError::invalid(
                "shift",
                format!("no generated samples under {}", self.shift),
            )),
            _ => Ok(()),
        }
    }
}

pub fn score(ctx: &Context, params: &ScoreParams, progress: Progress) -> Result<ScoreOutcome> {
    params.validate(ctx)?;
    let (registry, _) = ctx.registry()?;
    let spec = registry.get(&params.shift)?;
    let (library, _) = ctx.library()?;
    let embedder = ctx.backend.embedder()?;
    let store = ctx.ws.samples();
    let by_class: Vec<(u32, Vec<CounterfactualSample>)> = samples_by_class(ctx, &params.shift)?
        .into_iter()
        .filter(|(c, _)| params.class_id.is_none_or(|want| want == *c))
        .collect();
    let mut classes = vec![];
    for (i, (class_id, samples)) in by_class.iter().enumerate() {
        let label = Context::class_label(&library, *class_id)?;
        let scored = score_batch(samples, &label, spec, embedder.as_ref(), |s| store.read_image(s))?;
        let batch = ScoredBatch {
            embedder_id: embedder.backend_id().to_string(),
            shift: params.shift.clone(),
            class_id: *class_id,
            class_label: label,
            samples: scored,
        };
        let committed = Workspace::commit_files(
            &ctx.ws.scores_dir(&params.shift, *class_id),
            &single(SCORES_FILE, to_json(&batch)?),
        )?;
        classes.push(ScoredClass {
            class_id: *class_id,
            version: committed.version,
            created: committed.created,
            scored: batch.samples.iter().filter(|s| s.is_scored(spec.is_base())).count(),
            failed: batch.samples.iter().filter(|s| s.is_failed()).count(),
        });
        progress((i + 1) as f64 / by_class.len() as f64);
    }
    Ok(ScoreOutcome {
        shift: params.shift.clone(),
        classes,
    })
}

/// Latest scored batch of every class under `shift`.
pub fn latest_scores(ws: &Workspace, shift: &str) -> Result<Vec<ScoredBatch>> {
    let root = ws.root().join("scores").join(shift);
    let mut out = vec![];
    for name in Workspace::child_dirs(&root)? {
        if let Some((_, dir)) = Workspace::latest(&root.join(&name))? {
            out.push(read_json::<ScoredBatch>(&dir.join(SCORES_FILE))?);
        }
    }
    out.sort_by_key(|b| b.class_id);
    Ok(out)
}

// ------------------------------------------------------------------ class thresholds

fn default_percentile() -> f64 {
    DEFAULT_CLASS_PERCENTILE
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrateClassParams {
    /// Held-out real images, one `<id>_<label>` directory per class.
    pub dataset_root: PathBuf,
    #[serde(default)]
    pub classes: Vec<String>,
    #[serde(default = "default_percentile")]
    pub percentile: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassThresholds {
    pub embedder_id: String,
    pub thresholds: Vec<ClassThreshold>,
}

impl ClassThresholds {
    pub fn by_class(&self) -> BTreeMap<u32, ClassThreshold> {
        self.thresholds.iter().map(|t| (t.class_id, t.clone())).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrateClassOutcome {
    pub version: u32,
    pub created: bool,
    pub thresholds: Vec<ClassThreshold>,
}

pub fn latest_class_thresholds(ws: &Workspace) -> Result<Option<ClassThresholds>> {
    Workspace::latest(&ws.thresholds_dir())?
        .map(|(_, dir)| read_json(&dir.join(THRESHOLDS_FILE)))
        .transpose()
}

pub fn calibrate_classes(
    ctx: &Context,
    params: &CalibrateClassParams,
    progress: Progress,
) -> Result<CalibrateClassOutcome> {
    if !(params.percentile > 0.0 && params.percentile <= 100.0) {
        return Err(ServiceError::invalid("percentile", "must lie in (0, 100]"));
    }
    let classes = select_classes(dataset_classes(&params.dataset_root)?, &params.classes)?;
    let (library, _) = ctx.library()?;
    let embedder = ctx.backend.embedder()?;
    let mut merged = latest_class_thresholds(&ctx.ws)?
        .filter(|t| t.embedder_id == embedder.backend_id())
        .map(|t| t.by_class())
        .unwrap_or_default();
    let mut fresh = vec![];
    for (i, c) in classes.iter().enumerate() {
        // the token's label is what generated samples are scored against
        let label = Context::class_label(&library, c.class_id).unwrap_or_else(|_| c.label.clone());
        let images = read_class_images(&c.dir)?;
        let t = calibrate_class_threshold(c.class_id, &images, &label, embedder.as_ref(), params.percentile)?;
        merged.insert(c.class_id, t.clone());
        fresh.push(t);
        progress((i + 1) as f64 / classes.len() as f64);
    }
    let file = ClassThresholds {
        embedder_id: embedder.backend_id().to_string(),
        thresholds: merged.into_values().collect(),
    };
    let committed = Workspace::commit_files(&ctx.ws.thresholds_dir(), &single(THRESHOLDS_FILE, to_json(&file)?))?;
    Ok(CalibrateClassOutcome {
        version: committed.version,
        created: committed.created,
        thresholds: fresh,
    })
}

// ------------------------------------------------------------------ shift calibration

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrateShiftParams {
    pub shift: String,
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
    #[serde(default)]
    pub inspection_count: Option<usize>,
}

/// Audit record of one submitted verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub shift: String,
    pub verdict: InspectionVerdict,
}

/// Final outcome of a calibration walk as stored under `calibration/<shift>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub shift: String,
    pub grid: Vec<f64>,
    pub inspection_count: usize,
    /// Registry version the walk started from, when it came from the workspace.
    pub base_registry_version: Option<u32>,
    pub state: CalibrationState,
    pub verdicts: Vec<InspectionVerdict>,
    /// Registry version holding the new threshold.
    pub registry_version: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationView {
    pub shift: String,
    pub state: CalibrationState,
    pub request: Option<InspectionRequest>,
    pub verdicts: usize,
    pub registry_version: Option<u32>,
}

/// One shift-threshold calibration walk, advanced one verdict at a time.
#[derive(Debug, Clone)]
pub struct CalibrationRun {
    session: ShiftCalibrationSession,
    grid: Vec<f64>,
    inspection_count: usize,
    base_registry_version: Option<u32>,
    registry_version: Option<u32>,
}

impl CalibrationRun {
    pub fn open(ctx: &Context, params: &CalibrateShiftParams) -> Result<Self> {
        let (registry, base_registry_version) = ctx.registry()?;
        let spec = registry.get(&params.shift)?;
        let samples: Vec<CounterfactualSample> = latest_scores(&ctx.ws, &params.shift)?
            .into_iter()
            .flat_map(|b| b.samples)
            .collect();
        if samples.is_empty() {
            return Err(ServiceError::invalid(
                "shift",
                format!("no scored samples under {}; run score first", params.shift),
            ));
        }
        let grid = params.grid.clone().unwrap_or_else(|| DEFAULT_PERCENTILE_GRID.to_vec());
        let inspection_count = params.inspection_count.unwrap_or(DEFAULT_INSPECTION_COUNT);
        let session = ShiftCalibrationSession::new(spec, &samples, &grid, inspection_count)?;
        Ok(CalibrationRun {
            session,
            grid,
            inspection_count,
            base_registry_version,
            registry_version: None,
        })
    }

    pub fn shift(&self) -> &str {
        self.session.shift_name()
    }

    pub fn view(&self) -> CalibrationView {
        CalibrationView {
            shift: self.shift().to_string(),
            state: self.session.state().clone(),
            request: self.session.current_request().cloned(),
            verdicts: self.session.verdicts().len(),
            registry_version: self.registry_version,
        }
    }

    pub fn is_open(&self) -> bool {
        self.session.current_request().is_some()
    }

    /// Applies a verdict. Re-sending an already recorded verdict is a no-op.
    pub fn submit(&mut self, ctx: &Context, verdict: InspectionVerdict) -> Result<CalibrationView> {
        if self.session.verdicts().contains(&verdict) {
            return Ok(self.view());
        }
        if !self.is_open() {
            return Err(ServiceError::Conflict(format!(
                "calibration of {} is closed",
                self.shift()
            )));
        }
        self.session.submit(verdict.clone())?;
        Workspace::append_jsonl(
            &ctx.ws.verdict_log(),
            &[VerdictRecord {
                shift: self.shift().to_string(),
                verdict,
            }],
        )?;
        if !self.is_open() {
            self.finish(ctx)?;
        }
        Ok(self.view())
    }

    fn finish(&mut self, ctx: &Context) -> Result<()> {
        if let CalibrationState::Calibrated { threshold, .. } = self.session.state() {
            let (registry, _) = ctx.registry()?;
            let updated = registry.with_threshold(self.shift(), *threshold)?;
            let committed =
                Workspace::commit_files(&ctx.ws.registry_dir(), &single(REGISTRY_FILE, updated.to_json()?))?;
            self.registry_version = Some(committed.version);
        }
        let record = CalibrationRecord {
            shift: self.shift().to_string(),
            grid: self.grid.clone(),
            inspection_count: self.inspection_count,
            base_registry_version: self.base_registry_version,
            state: self.session.state().clone(),
            verdicts: self.session.verdicts().to_vec(),
            registry_version: self.registry_version,
        };
        Workspace::commit_files(
            &ctx.ws.calibration_dir(self.shift()),
            &single(CALIBRATION_FILE, to_json(&record)?),
        )?;
        Ok(())
    }
}

// ------------------------------------------------------------------ filtering

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterParams {
    pub shift: String,
    /// Class-threshold file read instead of the workspace's latest version.
    #[serde(default)]
    pub class_thresholds: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YieldReport {
    pub shift: String,
    pub tau_shift: Option<f64>,
    pub overall: YieldStats,
    pub per_class: BTreeMap<u32, YieldStats>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub shift: String,
    pub version: u32,
    pub decision: FilterDecision,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterOutcomeView {
    pub version: u32,
    pub created: bool,
    pub yields: YieldReport,
}

fn class_thresholds_for(ctx: &Context, params: &FilterParams) -> Result<ClassThresholds> {
    match &params.class_thresholds {
        Some(path) => read_json(path),
        None => latest_class_thresholds(&ctx.ws)?
            .ok_or_else(|| ServiceError::invalid("class_thresholds", "no class thresholds; run calibrate-class first")),
    }
}

impl FilterParams {
    pub fn validate(&self, ctx: &Context) -> Result<()> {
        let (registry, _) = ctx.registry()?;
        let spec = registry.get(&self.shift)?;
        if !spec.is_base() && spec.shift_threshold.is_none() {
            return Err(ServiceError::invalid(
                "shift",
                format!("{} has no shift threshold; calibrate it first", self.shift),
            ));
        }
        let thresholds = class_thresholds_for(ctx, self)?.by_class();
        let batches = latest_scores(&ctx.ws, &self.shift)?;
        if batches.is_empty() {
            return Err(ServiceError::invalid(
                "shift",
                format!("no scored samples under {}; run score first", self.shift),
            ));
        }
        if let Some(b) = batches.iter().find(|b| !thresholds.contains_key(&b.class_id)) {
            return Err(ServiceError::invalid(
                "class_thresholds",
                format!("no class threshold for class {}", b.class_id),
            ));
        }
        Ok(())
    }
}

pub fn filter(ctx: &Context, params: &FilterParams, progress: Progress) -> Result<FilterOutcomeView> {
    params.validate(ctx)?;
    let (registry, _) = ctx.registry()?;
    let spec = registry.get(&params.shift)?;
    let thresholds = class_thresholds_for(ctx, params)?.by_class();
    let scored: Vec<CounterfactualSample> = latest_scores(&ctx.ws, &params.shift)?
        .into_iter()
        .flat_map(|b| b.samples)
        .collect();
    let outcome = filter_samples(&scored, &thresholds, spec)?;
    progress(0.8);
    let mut per_class: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for s in &outcome.annotated {
        let e = per_class.entry(s.class_id).or_default();
        e.0 += 1;
        e.1 += usize::from(s.kept == Some(true));
    }
    let yields = YieldReport {
        shift: params.shift.clone(),
        tau_shift: if spec.is_base() { None } else { spec.shift_threshold },
        overall: outcome.yield_stats,
        per_class: per_class
            .into_iter()
            .map(|(c, (total, kept))| (c, YieldStats::new(total, kept)))
            .collect(),
    };
    let committed: Committed = Workspace::commit_files(
        &ctx.ws.filtered_dir(&params.shift),
        &[
            (FILTERED_FILE.to_string(), to_json(&outcome.annotated)?),
            (DECISIONS_FILE.to_string(), to_json(&outcome.decisions)?),
            (YIELD_FILE.to_string(), to_json(&yields)?),
        ],
    )?;
    if committed.created {
        let records: Vec<DecisionRecord> = outcome
            .decisions
            .iter()
            .map(|d| DecisionRecord {
                shift: params.shift.clone(),
                version: committed.version,
                decision: d.clone(),
            })
            .collect();
        Workspace::append_jsonl(&ctx.ws.decision_log(), &records)?;
    }
    Ok(FilterOutcomeView {
        version: committed.version,
        created: committed.created,
        yields,
    })
}

/// Annotated samples of the latest filter run of `shift`.
pub fn latest_filtered(ws: &Workspace, shift: &str) -> Result<Option<(u32, Vec<CounterfactualSample>)>> {
    Workspace::latest(&ws.filtered_dir(shift))?
        .map(|(v, dir)| Ok((v, read_json(&dir.join(FILTERED_FILE))?)))
        .transpose()
}

pub fn latest_yields(ws: &Workspace, shift: &str) -> Result<Option<YieldReport>> {
    Workspace::latest(&ws.filtered_dir(shift))?
        .map(|(_, dir)| read_json(&dir.join(YIELD_FILE)))
        .transpose()
}

// ------------------------------------------------------------------ samples view

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SampleQuery {
    #[serde(default)]
    pub class: Option<u32>,
    #[serde(default)]
    pub shift: Option<String>,
    #[serde(default)]
    pub kept: Option<bool>,
}

/// Generated samples with their latest scores and keep status overlaid.
pub fn list_samples(ctx: &Context, query: &SampleQuery) -> Result<Vec<CounterfactualSample>> {
    let mut overlay: BTreeMap<String, CounterfactualSample> = BTreeMap::new();
    let raw = ctx.ws.samples().list()?;
    let shifts: BTreeSet<&str> = raw.iter().map(|s| s.shift_name.as_str()).collect();
    for shift in shifts {
        if query.shift.as_deref().is_some_and(|q| q != shift) {
            continue;
        }
        for batch in latest_scores(&ctx.ws, shift)? {
            for s in batch.samples {
                overlay.insert(s.sample_id.clone(), s);
            }
        }
        if let Some((_, annotated)) = latest_filtered(&ctx.ws, shift)? {
            for s in annotated {
                overlay.insert(s.sample_id.clone(), s);
            }
        }
    }
    Ok(raw
        .into_iter()
        .map(|s| overlay.remove(&s.sample_id).unwrap_or(s))
        .filter(|s| query.class.is_none_or(|c| c == s.class_id))
        .filter(|s| query.shift.as_deref().is_none_or(|q| q == s.shift_name))
        .filter(|s| query.kept.is_none_or(|k| (s.kept == Some(true)) == k))
        .collect())
}

pub fn sample_png(ctx: &Context, sample_id: &str) -> Result<Vec<u8>> {
    let store = ctx.ws.samples();
    let sample = store.read_sample(sample_id)?;
    if sample.is_failed() {
        return Err(ServiceError::not_found("image", sample_id));
    }
    let path = store.image_path(&sample);
    fs::read(&path).map_err(|e| ServiceError::io(path, e))
}

// ------------------------------------------------------------------ evaluation

fn default_min_count() -> usize {
    DEFAULT_MIN_COUNT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionFiles {
    /// CSV with header `sample_id,true_class,predicted_class`.
    pub csv: PathBuf,
    /// JSON `{model_id, shift}`; `shift` is either the evaluated shift or "base".
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSource {
    /// The built-in toy classifier sweep, run on the kept images.
    Toy { n_models: usize },
    /// Externally produced predictions for the shift and base sets.
    Predictions { files: Vec<PredictionFiles> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluateParams {
    pub shift: String,
    #[serde(default = "default_min_count")]
    pub min_count: usize,
    pub models: ModelSource,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluateOutcome {
    pub version: u32,
    pub created: bool,
    pub evaluations: Vec<ModelEvaluation>,
    pub report_version: u32,
}

impl EvaluateParams {
    pub fn validate(&self, ctx: &Context) -> Result<()> {
        let (registry, _) = ctx.registry()?;
        if registry.get(&self.shift)?.is_base() {
            return Err(ServiceError::invalid(
                "shift",
                "evaluate a shift against base, not base itself",
            ));
        }
        for shift in [self.shift.as_str(), BASE_SHIFT] {
            if latest_filtered(&ctx.ws, shift)?.is_none() {
                return Err(ServiceError::invalid(
                    "shift",
                    format!("{shift} has not been filtered yet"),
                ));
            }
        }
        match &self.models {
            ModelSource::Toy { n_models } if *n_models == 0 => {
                Err(ServiceError::invalid("models.n_models", "must be at least 1"))
            }
            ModelSource::Predictions { files } if files.is_empty() => {
                Err(ServiceError::invalid("models.files", "no prediction files"))
            }
            _ => Ok(()),
        }
    }
}

fn predict_kept(
    ctx: &Context,
    model: &dyn ClassifierBackend,
    samples: &[CounterfactualSample],
) -> Result<PredictionSet> {
    let store = ctx.ws.samples();
    let entries = samples
        .iter()
        .filter(|s| s.kept == Some(true))
        .map(|s| {
            Ok(Prediction {
                sample_id: s.sample_id.clone(),
                class_id: s.class_id,
                predicted_class_id: model.predict(&store.read_image(s)?)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PredictionSet {
        model_id: model.model_id().to_string(),
        entries,
    })
}

fn csv_bytes(set: &PredictionSet) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    set.write_csv(&mut buf)?;
    Ok(buf)
}

pub fn evaluate(ctx: &Context, params: &EvaluateParams, progress: Progress) -> Result<EvaluateOutcome> {
    params.validate(ctx)?;
    let (_, shift_samples) = latest_filtered(&ctx.ws, &params.shift)?.expect("validated");
    let (_, base_samples) = latest_filtered(&ctx.ws, BASE_SHIFT)?.expect("validated");
    let shift_index = SampleIndex::from_samples(&shift_samples);
    let base_index = SampleIndex::from_samples(&base_samples);

    // (model_id -> (shift set, base set)) in model order
    let mut runs: Vec<(PredictionSet, PredictionSet)> = vec![];
    match &params.models {
        ModelSource::Toy { n_models } => {
            let world = toy_world();
            let models = ToyClassifier::sweep(&world, *n_models);
            for (i, m) in models.iter().enumerate() {
                runs.push((
                    predict_kept(ctx, m, &shift_samples)?,
                    predict_kept(ctx, m, &base_samples)?,
                ));
                progress(0.8 * (i + 1) as f64 / models.len() as f64);
            }
        }
        ModelSource::Predictions { files } => {
            let mut by_model: BTreeMap<String, (Option<PredictionSet>, Option<PredictionSet>)> = BTreeMap::new();
            for f in files {
                let manifest: RunManifest = read_json(&f.manifest)?;
                let file = fs::File::open(&f.csv).map_err(|e| ServiceError::io(&f.csv, e))?;
                let set = PredictionSet::read_csv(&manifest.model_id, file)?;
                let slot = by_model.entry(manifest.model_id.clone()).or_default();
                let target = if manifest.shift == params.shift {
                    &mut slot.0
                } else if manifest.shift == BASE_SHIFT {
                    &mut slot.1
                } else {
                    return Err(ServiceError::invalid(
                        "models.files",
                        format!(
                            "{} is for shift {}, not {} or base",
                            f.manifest.display(),
                            manifest.shift,
                            params.shift
                        ),
                    ));
                };
                if target.replace(set).is_some() {
                    return Err(ServiceError::invalid(
                        "models.files",
                        format!("two {} prediction files for {}", manifest.shift, manifest.model_id),
                    ));
                }
            }
            for (model_id, pair) in by_model {
                match pair {
                    (Some(s), Some(b)) => runs.push((s, b)),
                    _ => {
                        return Err(ServiceError::invalid(
                            "models.files",
                            format!("{model_id} needs both {} and base predictions", params.shift),
                        ))
                    }
                }
            }
        }
    }

    let mut evaluations = vec![];
    let mut files = vec![];
    for (shift_set, base_set) in &runs {
        evaluations.push(evaluate_model(
            &params.shift,
            EvaluationInput {
                predictions: shift_set,
                index: &shift_index,
            },
            EvaluationInput {
                predictions: base_set,
                index: &base_index,
            },
            params.min_count,
        )?);
        let model = &shift_set.model_id;
        files.push((format!("{model}/{}.csv", params.shift), csv_bytes(shift_set)?));
        files.push((format!("{model}/{BASE_SHIFT}.csv"), csv_bytes(base_set)?));
    }
    Workspace::commit_files(&ctx.ws.predictions_dir(&params.shift), &files)?;
    let committed = Workspace::commit_files(
        &ctx.ws.evaluations_dir(&params.shift),
        &single(EVALUATIONS_FILE, to_json(&evaluations)?),
    )?;
    let report = report(ctx)?;
    progress(1.0);
    Ok(EvaluateOutcome {
        version: committed.version,
        created: committed.created,
        evaluations,
        report_version: report.version,
    })
}

pub fn latest_evaluations(ws: &Workspace, shift: &str) -> Result<Option<Vec<ModelEvaluation>>> {
    Workspace::latest(&ws.evaluations_dir(shift))?
        .map(|(_, dir)| read_json(&dir.join(EVALUATIONS_FILE)))
        .transpose()
}

// ------------------------------------------------------------------ reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReportView {
    pub summary: ShiftSummary,
    pub rows: Vec<ReportRow>,
    pub yields: Option<YieldReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportsView {
    pub version: u32,
    pub shifts: Vec<ShiftReportView>,
}

/// Rebuilds reports for every shift that has evaluations and commits them.
pub fn report(ctx: &Context) -> Result<Committed> {
    let shifts = Workspace::child_dirs(&ctx.ws.root().join("evaluations"))?;
    if shifts.is_empty() {
        return Err(ServiceError::invalid(
            "shift",
            "no evaluations to report; run evaluate first",
        ));
    }
    let mut files = vec![];
    let mut summaries = vec![];
    for shift in shifts {
        let Some(evals) = latest_evaluations(&ctx.ws, &shift)? else {
            continue;
        };
        let r = build_shift_report(&shift, &evals)?;
        let mut csv = Vec::new();
        r.write_csv(&mut csv)?;
        files.push((format!("{shift}.csv"), csv));
        let mut json = r.summary_json()?;
        json.push(b'\n');
        files.push((format!("{shift}.json"), json));
        files.push((format!("{shift}.svg"), scatter_svg(&r).into_bytes()));
        summaries.push(r.summary);
    }
    files.push((SUMMARY_FILE.to_string(), to_json(&summaries)?));
    files.push((
        IMPACT_PLOT_FILE.to_string(),
        impact_vs_slope_svg(&summaries).into_bytes(),
    ));
    Workspace::commit_files(&ctx.ws.reports_dir(), &files)
}

/// Reads the latest report version back from its CSV and JSON files.
pub fn reports_view(ctx: &Context) -> Result<Option<ReportsView>> {
    let Some((version, dir)) = Workspace::latest(&ctx.ws.reports_dir())? else {
        return Ok(None);
    };
    let summaries: Vec<ShiftSummary> = read_json(&dir.join(SUMMARY_FILE))?;
    let mut shifts = vec![];
    for summary in summaries {
        let path = dir.join(format!("{}.csv", summary.shift));
        let file = fs::File::open(&path).map_err(|e| ServiceError::io(&path, e))?;
        let rows = read_report_rows(file)?;
        let per_shift: ShiftSummary = read_json(&dir.join(format!("{}.json", summary.shift)))?;
        if per_shift != summary {
            return Err(ServiceError::Conflict(format!(
                "report {version}: {} summary disagrees with {SUMMARY_FILE}",
                summary.shift
            )));
        }
        let yields = latest_yields(&ctx.ws, &summary.shift)?;
        shifts.push(ShiftReportView { summary, rows, yields });
    }
    Ok(Some(ReportsView { version, shifts }))
}
