//! Command-line front end: every pipeline stage as a thin subcommand over
//! the library, plus a self-contained demo. Results go to stdout,
//! diagnostics to stderr; exit code 0 on success, 1 on domain errors, 2 on
//! usage errors.

mod demo;
mod expr;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use wsirepro_core::catalog::{self, SortDirection, SortSpec};
use wsirepro_core::class::Class;
use wsirepro_core::classifier::{classify_features, extract_features, ReferenceModel, TrainConfig};
use wsirepro_core::dicom::{
    extract_wsi_info, parse_part10, write_synthetic_wsi, CodecRegistry, FixtureSpec,
};
use wsirepro_core::evaluation::{
    aggregate_slide, build_report, make_split, slide_results_from_json, ReportMeta, SlideResult,
};
use wsirepro_core::repro::{
    compare_runs, render_comparison_table, run_experiment, table1, train_reference_on_catalog,
    ExperimentManifest, RunContext, RunRecord, SplitSpec,
};
use wsirepro_core::storage::{fetch_object, parse_object_url, RetryPolicy, TileCache};
use wsirepro_core::tiling::{iterate_tiles, TilingMode, TilingParams};

/// Deterministic whole-slide-image analysis pipeline.
#[derive(Parser)]
#[command(name = "wsirepro", version, about)]
struct Cli {
    /// Configuration file (JSON). Environment variables with the WSIREPRO_
    /// prefix override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic slide-microscopy DICOM file from a key=value spec.
    Fixture(FixtureArgs),
    /// Catalog operations.
    #[command(subcommand)]
    Catalog(CatalogCommand),
    /// Fetch an object (gs://, s3http:// or local://) to a file or stdout.
    Fetch(FetchArgs),
    /// Extract tiles from one slide and write the tile manifest.
    Tile(TileArgs),
    /// Patient-disjoint train/val/test split of a catalog.
    Split(SplitArgs),
    /// Train the reference classifier on a catalog of slides.
    TrainRef(TrainRefArgs),
    /// Classify one slide with a reference model.
    Infer(InferArgs),
    /// Evaluate a slide-results file: per-class AUC with bootstrap CI.
    Eval(EvalArgs),
    /// Execute an experiment manifest end to end.
    Run(RunArgs),
    /// Reproducibility tooling.
    #[command(subcommand)]
    Repro(ReproCommand),
    /// Generate fixtures, run a miniature inference experiment twice, and
    /// print the report plus the cross-run comparison.
    Demo,
}

#[derive(Subcommand)]
enum CatalogCommand {
    /// Query a catalog manifest with a predicate expression.
    Query(CatalogQueryArgs),
}

#[derive(Subcommand)]
enum ReproCommand {
    /// Compare run records and print the deviation table.
    Compare(CompareArgs),
}

#[derive(Args)]
struct FixtureArgs {
    /// Spec file (key = value lines); '-' reads stdin.
    #[arg(long)]
    spec: PathBuf,
    /// Output path for the DICOM bytes.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct CatalogQueryArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Catalog version the manifest must declare.
    #[arg(long)]
    expected_version: String,
    /// Predicate, e.g. 'modality = "SM" and collection_id in ("TCGA-LUAD", "TCGA-LUSC")'.
    #[arg(long, name = "EXPR")]
    r#where: String,
    /// Comma-separated sort keys, each optionally ':desc'.
    #[arg(long)]
    order_by: String,
    /// Also print the equivalent SQL statement to stderr.
    #[arg(long)]
    emit_sql: bool,
}

#[derive(Args)]
struct FetchArgs {
    url: String,
    /// Byte range OFFSET,LENGTH.
    #[arg(long, value_parser = parse_range)]
    range: Option<(u64, u64)>,
    /// Output file; stdout when omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TileArgs {
    /// Slide URL (gs://, s3http:// or local://).
    #[arg(long)]
    input: String,
    #[arg(long, value_enum, default_value = "stream")]
    mode: ModeArg,
    /// Tiling parameter file (JSON); defaults when omitted.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Tile manifest output path.
    #[arg(long)]
    out_manifest: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Stream,
    Precache,
}

impl From<ModeArg> for TilingMode {
    fn from(mode: ModeArg) -> Self {
        match mode {
            ModeArg::Stream => TilingMode::Stream,
            ModeArg::Precache => TilingMode::Precache,
        }
    }
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    expected_version: String,
    /// Subset proportions TRAIN,VAL,TEST.
    #[arg(long, default_value = "0.70,0.15,0.15", value_parser = parse_proportions)]
    proportions: Proportions,
    /// Split seed (explicit; stochastic commands never default seeds).
    #[arg(long)]
    seed: u64,
}

#[derive(Clone, Copy)]
struct Proportions([f64; 3]);

#[derive(Args)]
struct TrainRefArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    expected_version: String,
    /// Cohort predicate; defaults to all SM instances.
    #[arg(long, name = "EXPR")]
    r#where: Option<String>,
    #[arg(long, default_value = "0.70,0.15,0.15", value_parser = parse_proportions)]
    proportions: Proportions,
    /// Patient split seed.
    #[arg(long)]
    split_seed: u64,
    /// Training seed (batch shuffling).
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    epochs: u32,
    #[arg(long, default_value_t = 32)]
    batch_size: u32,
    /// Tiling parameter file (JSON); defaults when omitted.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Output path for the trained model (canonical JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    /// Slide URL.
    #[arg(long)]
    input: String,
    /// Reference model file.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    params: Option<PathBuf>,
    /// Ground-truth class; with --patient-id, emits a full slide result.
    #[arg(long)]
    true_class: Option<Class>,
    #[arg(long)]
    patient_id: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Slide-results file (JSON array).
    #[arg(long)]
    slide_results: PathBuf,
    /// Bootstrap seed.
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    rounds: u32,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value = "adhoc")]
    dataset_id: String,
    #[arg(long, default_value = "unversioned")]
    catalog_version: String,
    /// Also write per-class ROC curves as roc_<class>.csv in this directory.
    #[arg(long)]
    roc_dir: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for run records (defaults to ./runs).
    #[arg(long)]
    runs_dir: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Run record files to compare.
    files: Vec<PathBuf>,
    /// Compare a bundled published fixture instead: exp1, exp2, exp2-t4 or
    /// exp2-p100.
    #[arg(long, conflicts_with = "files")]
    bundled: Option<String>,
}

fn parse_range(raw: &str) -> Result<(u64, u64), String> {
    let (a, b) = raw
        .split_once(',')
        .ok_or_else(|| "expected OFFSET,LENGTH".to_string())?;
    let offset = a.trim().parse().map_err(|e| format!("bad offset: {e}"))?;
    let length = b.trim().parse().map_err(|e| format!("bad length: {e}"))?;
    Ok((offset, length))
}

fn parse_proportions(raw: &str) -> Result<Proportions, String> {
    let parts: Vec<f64> = raw
        .split(',')
        .map(|p| p.trim().parse().map_err(|e| format!("bad proportion: {e}")))
        .collect::<Result<_, String>>()?;
    if parts.len() != 3 {
        return Err("expected three comma-separated proportions".into());
    }
    Ok(Proportions([parts[0], parts[1], parts[2]]))
}

/// Runtime configuration: defaults, then the config file, then WSIREPRO_*
/// environment variables.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CliConfig {
    cache_root: PathBuf,
    s3_endpoint: String,
    threads: usize,
    log_level: String,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            cache_root: PathBuf::from("cache"),
            s3_endpoint: wsirepro_core::storage::DEFAULT_GS_ENDPOINT.to_string(),
            threads: 1,
            log_level: "info".to_string(),
        }
    }
}

impl CliConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut config = match path {
            None => CliConfig::default(),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
        };
        if let Ok(v) = std::env::var("WSIREPRO_CACHE_ROOT") {
            config.cache_root = PathBuf::from(v);
        }
        if let Ok(v) = std::env::var("WSIREPRO_S3_ENDPOINT") {
            config.s3_endpoint = v;
        }
        if let Ok(v) = std::env::var("WSIREPRO_THREADS") {
            config.threads = v.parse().context("WSIREPRO_THREADS must be an integer")?;
        }
        if let Ok(v) = std::env::var("WSIREPRO_LOG_LEVEL") {
            config.log_level = v;
        }
        if config.threads == 0 {
            bail!("thread count must be at least 1");
        }
        Ok(config)
    }

    fn run_context(&self, runs_dir: PathBuf) -> RunContext {
        let mut ctx = RunContext::new(runs_dir, self.cache_root.clone());
        ctx.gs_endpoint = self.s3_endpoint.clone();
        ctx.threads = self.threads;
        ctx
    }
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let config = CliConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Fixture(args) => cmd_fixture(args),
        Command::Catalog(CatalogCommand::Query(args)) => cmd_catalog_query(args),
        Command::Fetch(args) => cmd_fetch(args, &config),
        Command::Tile(args) => cmd_tile(args, &config),
        Command::Split(args) => cmd_split(args),
        Command::TrainRef(args) => cmd_train_ref(args, &config),
        Command::Infer(args) => cmd_infer(args, &config),
        Command::Eval(args) => cmd_eval(args),
        Command::Run(args) => cmd_run(args, &config),
        Command::Repro(ReproCommand::Compare(args)) => cmd_compare(args),
        Command::Demo => demo::run(&config.run_context(
            std::env::temp_dir().join(format!("wsirepro-demo-{}-runs", std::process::id())),
        )),
    }
}

fn cmd_fixture(args: FixtureArgs) -> Result<()> {
    let text = if args.spec == Path::new("-") {
        std::io::read_to_string(std::io::stdin())?
    } else {
        std::fs::read_to_string(&args.spec)
            .with_context(|| format!("reading spec {}", args.spec.display()))?
    };
    let spec = FixtureSpec::from_kv_text(&text)?;
    let bytes = write_synthetic_wsi(&spec)?;
    std::fs::write(&args.out, &bytes).with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!(
        "wrote {} ({} bytes, {} frames)",
        args.out.display(),
        bytes.len(),
        spec.number_of_frames()
    );
    Ok(())
}

fn parse_order_by(raw: &str) -> Result<SortSpec> {
    let keys: Vec<(String, SortDirection)> = raw
        .split(',')
        .map(|part| {
            let part = part.trim();
            match part.strip_suffix(":desc") {
                Some(attr) => (attr.to_string(), SortDirection::Descending),
                None => (
                    part.strip_suffix(":asc").unwrap_or(part).to_string(),
                    SortDirection::Ascending,
                ),
            }
        })
        .filter(|(attr, _)| !attr.is_empty())
        .collect();
    SortSpec::new(keys).map_err(|e| anyhow!(e))
}

fn cmd_catalog_query(args: CatalogQueryArgs) -> Result<()> {
    let catalog = catalog::load_catalog(&args.manifest, &args.expected_version)?;
    let expr = expr::parse_where(&args.r#where)?;
    let sort = parse_order_by(&args.order_by)?;
    if args.emit_sql {
        eprintln!("{}", expr.to_sql(&catalog.version_id, &sort));
    }
    let records = catalog::query(&catalog, &expr, &sort)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for record in &records {
        writeln!(out, "{}", record.to_manifest_line())?;
    }
    eprintln!("{} records", records.len());
    Ok(())
}

fn cmd_fetch(args: FetchArgs, config: &CliConfig) -> Result<()> {
    let url = parse_object_url(&args.url, &config.s3_endpoint)?;
    let bytes = fetch_object(&url, args.range, &RetryPolicy::default())?;
    match &args.out {
        Some(path) => {
            std::fs::write(path, &bytes)?;
            eprintln!("wrote {} ({} bytes)", path.display(), bytes.len());
        }
        None => std::io::stdout().write_all(&bytes)?,
    }
    Ok(())
}

fn load_tiling_params(path: Option<&Path>) -> Result<TilingParams> {
    match path {
        None => Ok(TilingParams::default()),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading params {}", path.display()))?;
            let params: TilingParams = serde_json::from_str(&text)
                .with_context(|| format!("parsing params {}", path.display()))?;
            params.validate()?;
            Ok(params)
        }
    }
}

fn fetch_slide(
    url: &str,
    config: &CliConfig,
) -> Result<(
    wsirepro_core::dicom::DataSet,
    wsirepro_core::dicom::WsiInstanceInfo,
)> {
    let parsed = parse_object_url(url, &config.s3_endpoint)?;
    let bytes = fetch_object(&parsed, None, &RetryPolicy::default())?;
    let ds = parse_part10(&bytes)?;
    let info = extract_wsi_info(&ds)?;
    Ok((ds, info))
}

fn cmd_tile(args: TileArgs, config: &CliConfig) -> Result<()> {
    let params = load_tiling_params(args.params.as_deref())?;
    let (ds, info) = fetch_slide(&args.input, config)?;
    let mode: TilingMode = args.mode.into();
    let cache = TileCache::new(&config.cache_root);
    let cache_ref = match mode {
        TilingMode::Precache => Some(&cache),
        TilingMode::Stream => None,
    };
    let sequence = iterate_tiles(
        &ds,
        &info,
        &params,
        mode,
        cache_ref,
        &CodecRegistry::new(),
        config.threads,
    )?;
    std::fs::write(&args.out_manifest, sequence.manifest_lines())?;
    eprintln!(
        "{}: {} grid tiles, {} kept; manifest at {}",
        info.sop_instance_uid,
        sequence.records.len(),
        sequence.tiles.len(),
        args.out_manifest.display()
    );
    Ok(())
}

fn cmd_split(args: SplitArgs) -> Result<()> {
    let catalog = catalog::load_catalog(&args.manifest, &args.expected_version)?;
    let patients: Vec<&str> = catalog
        .records
        .iter()
        .map(|r| r.patient_id.as_str())
        .collect();
    let split = make_split(patients, args.proportions.0, args.seed)?;
    let counts = split.counts();
    let mut entries: Vec<String> = split
        .assignment
        .iter()
        .map(|(patient, subset)| {
            format!(
                "{}:{}",
                wsirepro_core::canon::escape_str(patient),
                wsirepro_core::canon::escape_str(subset.name())
            )
        })
        .collect();
    entries.sort();
    println!("{{{}}}", entries.join(","));
    eprintln!(
        "train/val/test patients: {}/{}/{}",
        counts[0], counts[1], counts[2]
    );
    Ok(())
}

fn classed_records(
    manifest: &Path,
    expected_version: &str,
    where_expr: Option<&str>,
) -> Result<Vec<catalog::CatalogRecord>> {
    let loaded = catalog::load_catalog(manifest, expected_version)?;
    let expr = match where_expr {
        Some(raw) => expr::parse_where(raw)?,
        None => wsirepro_core::catalog::QueryExpr::eq("modality", "SM"),
    };
    let records = catalog::query(&loaded, &expr, &SortSpec::by("sop_instance_uid"))?;
    records
        .iter()
        .map(|r| catalog::derive_reference_class(r).map_err(Into::into))
        .collect()
}

fn cmd_train_ref(args: TrainRefArgs, config: &CliConfig) -> Result<()> {
    let records = classed_records(
        &args.manifest,
        &args.expected_version,
        args.r#where.as_deref(),
    )?;
    let tiling = load_tiling_params(args.params.as_deref())?;
    let train_config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let ctx = config.run_context(PathBuf::from("runs"));
    let (model, metrics, split) = train_reference_on_catalog(
        &records,
        &SplitSpec {
            proportions: args.proportions.0,
            seed: args.split_seed,
        },
        &tiling,
        TilingMode::Stream,
        &train_config,
        &ctx,
    )?;
    for m in &metrics {
        eprintln!(
            "epoch {}: train loss {:.6}, val macro AUC {:.4}",
            m.epoch, m.train_loss, m.val_auc_macro
        );
    }
    let counts = split.counts();
    eprintln!(
        "split {}/{}/{} patients; model digest {}",
        counts[0],
        counts[1],
        counts[2],
        model.version_digest()
    );
    std::fs::write(&args.out, model.to_canonical_json())?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_infer(args: InferArgs, config: &CliConfig) -> Result<()> {
    let model = ReferenceModel::from_json(
        &std::fs::read_to_string(&args.model)
            .with_context(|| format!("reading model {}", args.model.display()))?,
    )?;
    let params = load_tiling_params(args.params.as_deref())?;
    let (ds, info) = fetch_slide(&args.input, config)?;
    let sequence = iterate_tiles(
        &ds,
        &info,
        &params,
        TilingMode::Stream,
        None,
        &CodecRegistry::new(),
        config.threads,
    )?;
    if sequence.tiles.is_empty() {
        bail!("slide {} has no kept tiles", info.sop_instance_uid);
    }
    let tile_probs: Vec<_> = sequence
        .tiles
        .iter()
        .map(|t| classify_features(&model, &extract_features(t)))
        .collect::<Result<_, _>>()?;
    let aggregated = aggregate_slide(&tile_probs)?;

    match (&args.true_class, &args.patient_id) {
        (Some(class), Some(patient)) => {
            let result = SlideResult {
                sop_instance_uid: info.sop_instance_uid.clone(),
                patient_id: patient.clone(),
                true_class: *class,
                probs: aggregated,
                kept_tile_count: sequence.tiles.len() as u32,
            };
            println!("{}", result.to_canonical_json());
        }
        _ => {
            println!(
                "{{\"kept_tile_count\":{},\"predicted_class\":{},\"probs\":[{},{},{}],\"sop_instance_uid\":{}}}",
                sequence.tiles.len(),
                wsirepro_core::canon::escape_str(aggregated.argmax().name()),
                wsirepro_core::canon::fmt_f64_sig12(aggregated.0[0]),
                wsirepro_core::canon::fmt_f64_sig12(aggregated.0[1]),
                wsirepro_core::canon::fmt_f64_sig12(aggregated.0[2]),
                wsirepro_core::canon::escape_str(&info.sop_instance_uid),
            );
        }
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.slide_results)
        .with_context(|| format!("reading {}", args.slide_results.display()))?;
    let results = slide_results_from_json(&text)?;
    let report = build_report(
        &results,
        &ReportMeta {
            dataset_id: args.dataset_id,
            catalog_version: args.catalog_version,
            bootstrap_rounds: args.rounds,
            level: args.level,
            bootstrap_seed: args.seed,
            extra_seeds: Default::default(),
        },
    )?;
    if let Some(roc_dir) = &args.roc_dir {
        std::fs::create_dir_all(roc_dir)?;
        for class in Class::ALL {
            let points = wsirepro_core::evaluation::roc_for_class(&results, class)?;
            let path = roc_dir.join(format!("roc_{}.csv", class.name()));
            std::fs::write(&path, wsirepro_core::evaluation::roc_csv(&points))?;
            eprintln!("wrote {}", path.display());
        }
    }
    println!("{}", report.to_canonical_json());
    Ok(())
}

fn cmd_run(args: RunArgs, config: &CliConfig) -> Result<()> {
    let manifest = ExperimentManifest::load(&args.manifest)?;
    let runs_dir = args.runs_dir.unwrap_or_else(|| PathBuf::from("runs"));
    let ctx = config.run_context(runs_dir);
    let record = run_experiment(&manifest, &ctx)?;
    // Stdout carries only the reproducible portion of the record, so
    // identical runs print identical bytes; the persisted file in runs_dir
    // has the timestamps and environment fingerprint.
    let mut out = wsirepro_core::canon::ObjectWriter::new();
    out.field_raw("eval_report", &record.eval_report.to_canonical_json())
        .field_str("manifest_digest", &record.manifest_digest)
        .field_raw(
            "skipped_slides",
            &wsirepro_core::canon::array(
                record
                    .skipped_slides
                    .iter()
                    .map(|s| wsirepro_core::canon::escape_str(s)),
            ),
        )
        .field_str("slide_results_digest", &record.slide_results_digest);
    println!("{}", out.finish());
    eprintln!(
        "run {} finished in {} ms; record persisted in {}",
        &record.manifest_digest[..16],
        record.wall_time_ms,
        ctx.runs_dir.display()
    );
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let records: Vec<RunRecord> = match &args.bundled {
        Some(name) => match name.as_str() {
            "exp1" => table1::experiment1_records(),
            "exp2" => table1::experiment2_records(),
            "exp2-t4" => table1::experiment2_t4_records(),
            "exp2-p100" => table1::experiment2_p100_records(),
            other => bail!("unknown bundled fixture {other:?} (exp1, exp2, exp2-t4, exp2-p100)"),
        },
        None => {
            if args.files.is_empty() {
                bail!("provide run record files or --bundled NAME");
            }
            args.files
                .iter()
                .map(|p| RunRecord::load(p).map_err(Into::into))
                .collect::<Result<_>>()?
        }
    };
    let report = compare_runs(&records)?;
    print!("{}", render_comparison_table(&records, &report));
    println!("{}", report.to_canonical_json());
    Ok(())
}
