//! Declarative experiment manifests, run orchestration, and cross-run
//! deviation reports.
//!
//! A manifest pins everything a run consumes — catalog version, query, tiling
//! parameters, classifier source, and every seed — so the pipeline has no
//! ambient randomness. Two runs of one manifest on the same inputs produce
//! byte-identical evaluation reports and per-slide digests; `compare_runs`
//! quantifies whatever deviations remain across run records from less
//! deterministic producers.

pub mod table1;

use crate::canon::{self, ObjectWriter};
use crate::catalog::{self, Catalog, CatalogError, CatalogRecord, QueryExpr, SortSpec};
use crate::class::Class;
use crate::classifier::{
    self, runner::ExternalRunner, ClassProbabilities, ClassifierError, ReferenceModel,
    TileFeatures, TrainConfig, TrainTile, ValSlide,
};
use crate::dicom::{extract_wsi_info, parse_part10, CodecRegistry, DicomError};
use crate::digest::sha256_hex;
use crate::evaluation::{
    self, build_report, make_split, slide_results_canonical_json, EvalError, EvalReport,
    ReportMeta, SlideResult, Subset,
};
use crate::storage::{fetch_object, resolve_gcs_url, RetryPolicy, StorageError, TileCache};
use crate::tiling::{iterate_tiles, TilingError, TilingMode, TilingParams};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};
use thiserror::Error;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogRef {
    pub path: PathBuf,
    pub expected_version: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsampleSpec {
    pub per_class_n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub proportions: [f64; 3],
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub bootstrap_rounds: u32,
    pub level: f64,
    pub seed: u64,
}

/// Exactly one classifier source per manifest, enforced by the encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierSource {
    ReferenceModel { path: PathBuf },
    ExternalRunner { command: Vec<String> },
    Train { config: TrainConfig },
}

/// Full declarative description of one experiment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub manifest_version: u32,
    pub catalog: CatalogRef,
    pub query: QueryExpr,
    pub sort: SortSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample: Option<SubsampleSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSpec>,
    pub tiling: TilingParams,
    pub classifier: ClassifierSource,
    pub eval: EvalSpec,
    pub mode: TilingMode,
    pub run_seed: u64,
}

impl ExperimentManifest {
    pub fn from_json(text: &str) -> Result<Self, ReproError> {
        let manifest: ExperimentManifest =
            serde_json::from_str(text).map_err(|e| ReproError::ManifestInvalid(e.to_string()))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self, ReproError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ReproError::ManifestInvalid(format!("reading {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ReproError> {
        if self.manifest_version != MANIFEST_VERSION {
            return Err(ReproError::ManifestInvalid(format!(
                "manifest_version {} unsupported (expected {MANIFEST_VERSION})",
                self.manifest_version
            )));
        }
        if self.sort.keys.is_empty() {
            return Err(ReproError::ManifestInvalid(
                "sort keys must not be empty".into(),
            ));
        }
        match (&self.classifier, &self.split) {
            (ClassifierSource::Train { .. }, None) => Err(ReproError::ManifestInvalid(
                "training runs need a split spec".into(),
            )),
            (ClassifierSource::Train { .. }, Some(_)) => Ok(()),
            (_, Some(_)) => Err(ReproError::ManifestInvalid(
                "split spec requires a train classifier".into(),
            )),
            (_, None) => Ok(()),
        }
    }

    /// Digest of the canonical (sorted-key) JSON encoding; identifies the
    /// experiment across runs.
    pub fn digest(&self) -> String {
        let value = serde_json::to_value(self).expect("manifest serializes");
        sha256_hex(value.to_string().as_bytes())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Host/environment descriptor embedded in every run record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvironmentFingerprint {
    pub os: String,
    pub os_version: String,
    pub cpu_model: String,
    pub logical_cores: u32,
    pub artifact_version: String,
    pub thread_count: u32,
}

impl EnvironmentFingerprint {
    fn to_canonical_json(&self) -> String {
        let mut w = ObjectWriter::new();
        w.field_str("artifact_version", &self.artifact_version)
            .field_str("cpu_model", &self.cpu_model)
            .field_u64("logical_cores", u64::from(self.logical_cores))
            .field_str("os", &self.os)
            .field_str("os_version", &self.os_version)
            .field_u64("thread_count", u64::from(self.thread_count));
        w.finish()
    }
}

/// Collects the host descriptor. Stable within a session.
pub fn environment_fingerprint(thread_count: u32) -> EnvironmentFingerprint {
    use std::sync::OnceLock;
    static HOST: OnceLock<(String, String, String, u32)> = OnceLock::new();
    let (os, os_version, cpu_model, logical_cores) = HOST
        .get_or_init(|| {
            let os = std::env::consts::OS.to_string();
            let os_version = std::fs::read_to_string("/etc/os-release")
                .ok()
                .and_then(|text| {
                    text.lines().find_map(|l| {
                        l.strip_prefix("PRETTY_NAME=")
                            .map(|v| v.trim_matches('"').to_string())
                    })
                })
                .or_else(|| {
                    std::fs::read_to_string("/proc/version")
                        .ok()
                        .map(|v| v.trim().to_string())
                })
                .unwrap_or_else(|| "unknown".to_string());
            let cpu_model = std::fs::read_to_string("/proc/cpuinfo")
                .ok()
                .and_then(|text| {
                    text.lines().find_map(|l| {
                        l.strip_prefix("model name")
                            .and_then(|rest| rest.split_once(':'))
                            .map(|(_, v)| v.trim().to_string())
                    })
                })
                .unwrap_or_else(|| "unknown".to_string());
            let logical_cores = std::thread::available_parallelism()
                .map(|n| n.get() as u32)
                .unwrap_or(1);
            (os, os_version, cpu_model, logical_cores)
        })
        .clone();
    EnvironmentFingerprint {
        os,
        os_version,
        cpu_model,
        logical_cores,
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        thread_count,
    }
}

/// Immutable record of one completed run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub manifest_digest: String,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    pub environment: EnvironmentFingerprint,
    pub eval_report: EvalReport,
    /// SHA-256 over the canonical per-slide results.
    pub slide_results_digest: String,
    pub wall_time_ms: u64,
    /// Slides excluded from scoring (no kept tiles).
    pub skipped_slides: Vec<String>,
}

impl RunRecord {
    pub fn to_canonical_json(&self) -> String {
        let mut w = ObjectWriter::new();
        w.field_raw("environment", &self.environment.to_canonical_json())
            .field_raw("eval_report", &self.eval_report.to_canonical_json())
            .field_u64("finished_unix_ms", self.finished_unix_ms)
            .field_str("manifest_digest", &self.manifest_digest)
            .field_raw(
                "skipped_slides",
                &canon::array(self.skipped_slides.iter().map(|s| canon::escape_str(s))),
            )
            .field_str("slide_results_digest", &self.slide_results_digest)
            .field_u64("started_unix_ms", self.started_unix_ms)
            .field_u64("wall_time_ms", self.wall_time_ms);
        w.finish()
    }

    pub fn from_json(text: &str) -> Result<Self, ReproError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ReproError::RecordInvalid(e.to_string()))?;
        let missing = |what: &str| ReproError::RecordInvalid(format!("missing {what}"));
        let u64_field = |key: &str| -> Result<u64, ReproError> {
            value
                .get(key)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| missing(key))
        };
        let str_field = |key: &str| -> Result<String, ReproError> {
            Ok(value
                .get(key)
                .and_then(|v| v.as_str())
                .ok_or_else(|| missing(key))?
                .to_string())
        };
        let environment: EnvironmentFingerprint = serde_json::from_value(
            value
                .get("environment")
                .cloned()
                .ok_or_else(|| missing("environment"))?,
        )
        .map_err(|e| ReproError::RecordInvalid(e.to_string()))?;
        let eval_report = EvalReport::from_value(
            value
                .get("eval_report")
                .ok_or_else(|| missing("eval_report"))?,
        )
        .map_err(|e| ReproError::RecordInvalid(e.to_string()))?;
        let skipped_slides = value
            .get("skipped_slides")
            .and_then(|v| v.as_array())
            .map(|items| {
                items
                    .iter()
                    .filter_map(|v| v.as_str().map(str::to_string))
                    .collect()
            })
            .unwrap_or_default();
        Ok(RunRecord {
            manifest_digest: str_field("manifest_digest")?,
            started_unix_ms: u64_field("started_unix_ms")?,
            finished_unix_ms: u64_field("finished_unix_ms")?,
            environment,
            eval_report,
            slide_results_digest: str_field("slide_results_digest")?,
            wall_time_ms: u64_field("wall_time_ms")?,
            skipped_slides,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ReproError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ReproError::RecordInvalid(format!("reading {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// Where and how a run executes.
#[derive(Debug, Clone)]
pub struct RunContext {
    /// Run records land here, named `<digest16>-<started_ms>.json`.
    pub runs_dir: PathBuf,
    /// Root of the PNG tile cache (precache mode).
    pub cache_root: PathBuf,
    /// Endpoint substituted for `gs://` URLs.
    pub gs_endpoint: String,
    pub threads: usize,
    pub retry: RetryPolicy,
    pub codecs: CodecRegistry,
}

impl RunContext {
    pub fn new(runs_dir: impl Into<PathBuf>, cache_root: impl Into<PathBuf>) -> Self {
        Self {
            runs_dir: runs_dir.into(),
            cache_root: cache_root.into(),
            gs_endpoint: crate::storage::DEFAULT_GS_ENDPOINT.to_string(),
            threads: 1,
            retry: RetryPolicy::default(),
            codecs: CodecRegistry::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ReproError {
    #[error("invalid manifest: {0}")]
    ManifestInvalid(String),
    #[error("invalid run record: {0}")]
    RecordInvalid(String),
    #[error("need at least 2 run records, have {0}")]
    NeedTwoRuns(usize),
    #[error("run records come from different manifests")]
    ManifestMismatch,
    #[error("another run holds the lock at {0}")]
    RunLocked(PathBuf),
    #[error("{stage}: {source}")]
    AtStage {
        stage: String,
        #[source]
        source: Box<ReproError>,
    },
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Dicom(#[from] DicomError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Tiling(#[from] TilingError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

trait StageContext<T> {
    fn stage(self, stage: &str) -> Result<T, ReproError>;
}

impl<T, E: Into<ReproError>> StageContext<T> for Result<T, E> {
    fn stage(self, stage: &str) -> Result<T, ReproError> {
        self.map_err(|e| ReproError::AtStage {
            stage: stage.to_string(),
            source: Box::new(e.into()),
        })
    }
}

/// Exclusive per-directory run lock; removed on drop.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(runs_dir: &Path) -> Result<Self, ReproError> {
        std::fs::create_dir_all(runs_dir)?;
        let path = runs_dir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(ReproError::RunLocked(path))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn now_unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// One slide selected for processing: the catalog record of its chosen
/// pyramid level.
#[derive(Debug, Clone)]
struct SlideSelection {
    record: CatalogRecord,
    class: Class,
}

/// Groups records by series and picks the instance closest to the target
/// spacing (same rule as level selection over parsed instances, applied to
/// catalog metadata so only one instance per series is fetched).
fn select_slides(
    records: &[CatalogRecord],
    target_spacing_um: f64,
) -> Result<Vec<SlideSelection>, ReproError> {
    let mut by_series: BTreeMap<&str, Vec<&CatalogRecord>> = BTreeMap::new();
    for record in records {
        by_series
            .entry(record.series_instance_uid.as_str())
            .or_default()
            .push(record);
    }
    let mut slides = Vec::with_capacity(by_series.len());
    for (_, members) in by_series {
        let chosen = members
            .iter()
            .filter(|r| r.image_type_flavor == "VOLUME")
            .min_by(|a, b| {
                let key = |r: &CatalogRecord| {
                    let ratio = (r.pixel_spacing_mm * 1000.0) / target_spacing_um;
                    ratio.max(1.0 / ratio)
                };
                key(a)
                    .total_cmp(&key(b))
                    .then_with(|| a.pixel_spacing_mm.total_cmp(&b.pixel_spacing_mm))
                    .then_with(|| a.sop_instance_uid.cmp(&b.sop_instance_uid))
            })
            .ok_or(TilingError::NoVolumeInstance)?;
        let class = chosen
            .reference_class
            .ok_or_else(|| CatalogError::UnclassifiedRecord(chosen.sop_instance_uid.clone()))?;
        slides.push(SlideSelection {
            record: (*chosen).clone(),
            class,
        });
    }
    Ok(slides)
}

/// Kept-tile features for one slide.
struct TiledSlide {
    record: CatalogRecord,
    class: Class,
    features: Vec<TileFeatures>,
}

/// Trains the reference classifier on a classed record set: patient-disjoint
/// split, tiling and labeling of the train/val subsets, RMSProp training with
/// best-epoch selection. Returns the model, the per-epoch metrics, and the
/// split so callers can evaluate the held-out test patients.
pub fn train_reference_on_catalog(
    records: &[CatalogRecord],
    split_spec: &SplitSpec,
    tiling: &TilingParams,
    mode: TilingMode,
    config: &TrainConfig,
    ctx: &RunContext,
) -> Result<
    (
        ReferenceModel,
        Vec<classifier::EpochMetrics>,
        crate::evaluation::SplitAssignment,
    ),
    ReproError,
> {
    let slides = select_slides(records, tiling.target_spacing_um)?;
    let patients: Vec<&str> = slides
        .iter()
        .map(|s| s.record.patient_id.as_str())
        .collect();
    let split = make_split(patients, split_spec.proportions, split_spec.seed).stage("split")?;

    let cache_store;
    let cache = match mode {
        TilingMode::Precache => {
            cache_store = TileCache::new(&ctx.cache_root);
            Some(&cache_store)
        }
        TilingMode::Stream => None,
    };

    let mut train_tiles: Vec<TrainTile> = Vec::new();
    let mut val_slides: Vec<ValSlide> = Vec::new();
    for slide in &slides {
        let subset = split.subset_of(&slide.record.patient_id);
        if !matches!(subset, Some(Subset::Train) | Some(Subset::Val)) {
            continue;
        }
        let tiled = tile_slide_params(slide, tiling, mode, ctx, cache)
            .stage(&format!("tiling {}", slide.record.sop_instance_uid))?;
        match subset {
            Some(Subset::Train) => {
                for (i, features) in tiled.features.iter().enumerate() {
                    train_tiles.push(TrainTile {
                        slide_uid: tiled.record.sop_instance_uid.clone(),
                        tile_index: i as u32,
                        features: *features,
                        label: tiled.class,
                    });
                }
            }
            Some(Subset::Val) => val_slides.push(ValSlide {
                sop_instance_uid: tiled.record.sop_instance_uid.clone(),
                true_class: tiled.class,
                tile_features: tiled.features,
            }),
            _ => unreachable!(),
        }
    }
    let (model, metrics) =
        classifier::train_reference(&train_tiles, &val_slides, config).stage("training")?;
    Ok((model, metrics, split))
}

fn tile_slide_params(
    slide: &SlideSelection,
    tiling: &TilingParams,
    mode: TilingMode,
    ctx: &RunContext,
    cache: Option<&TileCache>,
) -> Result<TiledSlide, ReproError> {
    let url = resolve_gcs_url(&slide.record, &ctx.gs_endpoint)?;
    let bytes = fetch_object(&url, None, &ctx.retry)?;
    let ds = parse_part10(&bytes)?;
    let info = extract_wsi_info(&ds)?;
    let sequence = iterate_tiles(&ds, &info, tiling, mode, cache, &ctx.codecs, ctx.threads)?;
    let features = sequence
        .tiles
        .iter()
        .map(classifier::extract_features)
        .collect();
    Ok(TiledSlide {
        record: slide.record.clone(),
        class: slide.class,
        features,
    })
}

enum TileScorer {
    Reference(ReferenceModel),
    Runner(Box<ExternalRunner>),
}

impl TileScorer {
    fn score(
        &mut self,
        slide: &TiledSlide,
        tiles: &[crate::tiling::TileImage],
    ) -> Result<Vec<ClassProbabilities>, ClassifierError> {
        match self {
            TileScorer::Reference(model) => slide
                .features
                .iter()
                .map(|f| classifier::classify_features(model, f))
                .collect(),
            TileScorer::Runner(runner) => runner.classify_batch(tiles),
        }
    }
}

/// Executes a manifest end to end and persists the resulting run record.
///
/// Stage order: catalog load (version pinned, aborts before any compute) →
/// query → optional stratified subsample → optional split + training → tile →
/// classify → aggregate → evaluate. Every stochastic step consumes a manifest
/// seed. On failure nothing is persisted.
pub fn run_experiment(
    manifest: &ExperimentManifest,
    ctx: &RunContext,
) -> Result<RunRecord, ReproError> {
    manifest.validate()?;
    let _lock = RunLock::acquire(&ctx.runs_dir)?;
    let started = now_unix_ms();
    let manifest_digest = manifest.digest();

    let catalog = catalog::load_catalog(&manifest.catalog.path, &manifest.catalog.expected_version)
        .stage("catalog load")?;
    let record = execute_pipeline(manifest, ctx, &catalog, started, manifest_digest)?;

    let filename = format!(
        "{}-{}.json",
        &record.manifest_digest[..16],
        record.started_unix_ms
    );
    let final_path = ctx.runs_dir.join(filename);
    let temp_path = final_path.with_extension("json.tmp");
    std::fs::write(&temp_path, record.to_canonical_json())?;
    std::fs::rename(&temp_path, &final_path)?;
    Ok(record)
}

fn execute_pipeline(
    manifest: &ExperimentManifest,
    ctx: &RunContext,
    catalog: &Catalog,
    started: u64,
    manifest_digest: String,
) -> Result<RunRecord, ReproError> {
    let matched = catalog::query(catalog, &manifest.query, &manifest.sort).stage("query")?;
    let mut records = Vec::with_capacity(matched.len());
    for record in &matched {
        records.push(catalog::derive_reference_class(record).stage("reference class")?);
    }

    if let Some(subsample) = &manifest.subsample {
        records = catalog::subsample_stratified(&records, subsample.per_class_n, subsample.seed)
            .stage("subsample")?;
    }

    let slides = select_slides(&records, manifest.tiling.target_spacing_um)?;
    let cache_store;
    let cache = match manifest.mode {
        TilingMode::Precache => {
            cache_store = TileCache::new(&ctx.cache_root);
            Some(&cache_store)
        }
        TilingMode::Stream => None,
    };

    let mut seeds: BTreeMap<String, u64> = BTreeMap::new();
    seeds.insert("run".into(), manifest.run_seed);
    if let Some(s) = &manifest.subsample {
        seeds.insert("subsample".into(), s.seed);
    }

    // Resolve the model (training if the manifest says so) and the slides to
    // score.
    let mut scorer;
    let eval_slides: Vec<&SlideSelection>;
    match &manifest.classifier {
        ClassifierSource::Train { config } => {
            let split_spec = manifest.split.as_ref().expect("validated");
            seeds.insert("split".into(), split_spec.seed);
            seeds.insert("train".into(), config.seed);
            let (model, _metrics, split) = train_reference_on_catalog(
                &records,
                split_spec,
                &manifest.tiling,
                manifest.mode,
                config,
                ctx,
            )?;
            scorer = TileScorer::Reference(model);
            eval_slides = slides
                .iter()
                .filter(|s| split.subset_of(&s.record.patient_id) == Some(Subset::Test))
                .collect();
        }
        ClassifierSource::ReferenceModel { path } => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                ReproError::ManifestInvalid(format!("model {}: {e}", path.display()))
            })?;
            let model = ReferenceModel::from_json(&text).stage("model load")?;
            scorer = TileScorer::Reference(model);
            eval_slides = slides.iter().collect();
        }
        ClassifierSource::ExternalRunner { command } => {
            let (program, args) = command
                .split_first()
                .ok_or_else(|| ReproError::ManifestInvalid("empty runner command".into()))?;
            let mut runner = ExternalRunner::spawn(program, args).stage("runner spawn")?;
            runner.handshake().stage("runner handshake")?;
            scorer = TileScorer::Runner(Box::new(runner));
            eval_slides = slides.iter().collect();
        }
    }

    // Score the evaluation slides.
    let mut slide_results: Vec<SlideResult> = Vec::new();
    let mut skipped_slides: Vec<String> = Vec::new();
    for slide in eval_slides {
        let stage_name = format!("scoring {}", slide.record.sop_instance_uid);
        let url = resolve_gcs_url(&slide.record, &ctx.gs_endpoint).stage(&stage_name)?;
        let bytes = fetch_object(&url, None, &ctx.retry).stage(&stage_name)?;
        let ds = parse_part10(&bytes).stage(&stage_name)?;
        let info = extract_wsi_info(&ds).stage(&stage_name)?;
        let sequence = iterate_tiles(
            &ds,
            &info,
            &manifest.tiling,
            manifest.mode,
            cache,
            &ctx.codecs,
            ctx.threads,
        )
        .stage(&stage_name)?;
        if sequence.tiles.is_empty() {
            skipped_slides.push(slide.record.sop_instance_uid.clone());
            continue;
        }
        let tiled = TiledSlide {
            record: slide.record.clone(),
            class: slide.class,
            features: sequence
                .tiles
                .iter()
                .map(classifier::extract_features)
                .collect(),
        };
        let tile_probs = scorer.score(&tiled, &sequence.tiles).stage(&stage_name)?;
        let aggregated = evaluation::aggregate_slide(&tile_probs).stage(&stage_name)?;
        slide_results.push(SlideResult {
            sop_instance_uid: slide.record.sop_instance_uid.clone(),
            patient_id: slide.record.patient_id.clone(),
            true_class: slide.class,
            probs: aggregated,
            kept_tile_count: sequence.tiles.len() as u32,
        });
    }

    seeds.insert("eval".into(), manifest.eval.seed);
    let meta = ReportMeta {
        dataset_id: format!("{}:{}", catalog.version_id, &catalog.source_digest[..16]),
        catalog_version: catalog.version_id.clone(),
        bootstrap_rounds: manifest.eval.bootstrap_rounds,
        level: manifest.eval.level,
        bootstrap_seed: manifest.eval.seed,
        extra_seeds: seeds,
    };
    let eval_report = build_report(&slide_results, &meta).stage("evaluation")?;
    let slide_results_digest = sha256_hex(slide_results_canonical_json(&slide_results).as_bytes());

    let finished = now_unix_ms();
    Ok(RunRecord {
        manifest_digest,
        started_unix_ms: started,
        finished_unix_ms: finished,
        environment: environment_fingerprint(ctx.threads as u32),
        eval_report,
        slide_results_digest,
        wall_time_ms: finished.saturating_sub(started),
        skipped_slides,
    })
}

/// Per-class deviation summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassDeviation {
    pub min_auc: f64,
    pub max_auc: f64,
}

impl ClassDeviation {
    pub fn deviation(&self) -> f64 {
        self.max_auc - self.min_auc
    }
}

/// Cross-run reproducibility summary.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub run_count: usize,
    /// Indexed by [`Class::index`].
    pub per_class: [ClassDeviation; 3],
    pub bitwise_identical: bool,
}

impl ComparisonReport {
    pub fn overall_max_deviation(&self) -> f64 {
        self.per_class
            .iter()
            .map(|d| d.deviation())
            .fold(0.0, f64::max)
    }

    pub fn to_canonical_json(&self) -> String {
        let dev = |d: &ClassDeviation| {
            let mut w = ObjectWriter::new();
            w.field_f64("max_auc", d.max_auc)
                .field_f64("max_deviation", d.deviation())
                .field_f64("min_auc", d.min_auc);
            w.finish()
        };
        let mut classes = ObjectWriter::new();
        classes
            .field_raw("LSCC", &dev(&self.per_class[Class::Lscc.index()]))
            .field_raw("LUAD", &dev(&self.per_class[Class::Luad.index()]))
            .field_raw("normal", &dev(&self.per_class[Class::Normal.index()]));
        let mut w = ObjectWriter::new();
        w.field_bool("bitwise_identical", self.bitwise_identical)
            .field_f64("overall_max_deviation", self.overall_max_deviation())
            .field_raw("per_class", &classes.finish())
            .field_u64("run_count", self.run_count as u64);
        w.finish()
    }
}

/// Quantifies AUC deviations across runs of one manifest.
pub fn compare_runs(records: &[RunRecord]) -> Result<ComparisonReport, ReproError> {
    if records.len() < 2 {
        return Err(ReproError::NeedTwoRuns(records.len()));
    }
    let digest = &records[0].manifest_digest;
    if records.iter().any(|r| &r.manifest_digest != digest) {
        return Err(ReproError::ManifestMismatch);
    }
    let mut per_class = [ClassDeviation {
        min_auc: f64::INFINITY,
        max_auc: f64::NEG_INFINITY,
    }; 3];
    for record in records {
        for class in Class::ALL {
            let auc = record.eval_report.auc_for(class).auc;
            let slot = &mut per_class[class.index()];
            slot.min_auc = slot.min_auc.min(auc);
            slot.max_auc = slot.max_auc.max(auc);
        }
    }
    let first_digest = &records[0].slide_results_digest;
    let bitwise_identical = records
        .iter()
        .all(|r| &r.slide_results_digest == first_digest);
    Ok(ComparisonReport {
        run_count: records.len(),
        per_class,
        bitwise_identical,
    })
}

/// Fixed-format comparison table: one row per run with AUC and CI per class,
/// then the deviation summary.
pub fn render_comparison_table(records: &[RunRecord], report: &ComparisonReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<6} {:>24} {:>24} {:>24}\n",
        "run", "normal AUC [CI]", "LUAD AUC [CI]", "LSCC AUC [CI]"
    ));
    for (i, record) in records.iter().enumerate() {
        let cell = |class: Class| {
            let a = record.eval_report.auc_for(class);
            format!("{:.3} [{:.3}, {:.3}]", a.auc, a.ci_low, a.ci_high)
        };
        out.push_str(&format!(
            "{:<6} {:>24} {:>24} {:>24}\n",
            i + 1,
            cell(Class::Normal),
            cell(Class::Luad),
            cell(Class::Lscc)
        ));
    }
    let dev = |class: Class| report.per_class[class.index()].deviation();
    out.push_str(&format!(
        "{:<6} {:>24.3} {:>24.3} {:>24.3}\n",
        "dev",
        dev(Class::Normal),
        dev(Class::Luad),
        dev(Class::Lscc)
    ));
    out.push_str(&format!(
        "overall max deviation: {:.3}  (bitwise identical: {})\n",
        report.overall_max_deviation(),
        report.bitwise_identical
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_is_stable_within_a_session() {
        let a = environment_fingerprint(4);
        let b = environment_fingerprint(4);
        assert_eq!(a, b);
        assert_eq!(a.thread_count, 4);
        assert!(!a.artifact_version.is_empty());
        assert!(a.logical_cores >= 1);
    }

    #[test]
    fn manifest_digest_ignores_json_key_order() {
        let ordered = r#"{
            "manifest_version": 1,
            "catalog": {"path": "c.manifest", "expected_version": "v"},
            "query": {"op": "eq", "attr": "modality", "value": "SM"},
            "sort": {"keys": [["sop_instance_uid", "ascending"]]},
            "tiling": {},
            "classifier": {"reference_model": {"path": "m.json"}},
            "eval": {"bootstrap_rounds": 10, "level": 0.95, "seed": 1},
            "mode": "stream",
            "run_seed": 0
        }"#;
        let scrambled = r#"{
            "run_seed": 0,
            "mode": "stream",
            "eval": {"seed": 1, "level": 0.95, "bootstrap_rounds": 10},
            "classifier": {"reference_model": {"path": "m.json"}},
            "tiling": {},
            "sort": {"keys": [["sop_instance_uid", "ascending"]]},
            "query": {"value": "SM", "op": "eq", "attr": "modality"},
            "catalog": {"expected_version": "v", "path": "c.manifest"},
            "manifest_version": 1
        }"#;
        let a = ExperimentManifest::from_json(ordered).unwrap();
        let b = ExperimentManifest::from_json(scrambled).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn comparison_table_layout() {
        let records = table1::experiment1_records();
        let report = compare_runs(&records).unwrap();
        let table = render_comparison_table(&records, &report);
        let lines: Vec<&str> = table.lines().collect();
        // Header + 5 runs + deviation row + overall line.
        assert_eq!(lines.len(), 8);
        assert!(lines[1].contains("0.994 [0.987, 0.999]"));
        assert!(lines[6].starts_with("dev"));
        assert!(lines[7].contains("overall max deviation: 0.045"));
    }

    #[test]
    fn needs_two_records_from_one_manifest() {
        let records = table1::experiment1_records();
        assert!(matches!(
            compare_runs(&records[..1]),
            Err(ReproError::NeedTwoRuns(1))
        ));
        let mut mixed = vec![records[0].clone(), table1::experiment2_records()[0].clone()];
        assert!(matches!(
            compare_runs(&mixed),
            Err(ReproError::ManifestMismatch)
        ));
        mixed.pop();
    }
}
