//! Self-contained demo: synthesizes a small slide corpus, trains the
//! reference classifier on one cohort, applies it to a fresh cohort twice,
//! and prints the evaluation report plus the cross-run comparison. Completes
//! in seconds and touches no network.

use anyhow::{Context, Result};
use std::path::{Path, PathBuf};
use wsirepro_core::catalog::{self, CatalogRecord, QueryExpr, SortSpec};
use wsirepro_core::class::Class;
use wsirepro_core::classifier::TrainConfig;
use wsirepro_core::dicom::{write_synthetic_wsi, FillPattern, FixtureSpec, FrameFill};
use wsirepro_core::repro::{
    compare_runs, render_comparison_table, run_experiment, train_reference_on_catalog, CatalogRef,
    ClassifierSource, EvalSpec, ExperimentManifest, RunContext, SplitSpec,
};
use wsirepro_core::tiling::{TilingMode, TilingParams};

const DEMO_SPLIT_SEED: u64 = 2024;
const DEMO_TRAIN_SEED: u64 = 99;
const DEMO_EVAL_SEED: u64 = 1717;

fn class_color(class: Class) -> [u8; 3] {
    match class {
        Class::Normal => [190, 60, 60],
        Class::Luad => [60, 190, 60],
        Class::Lscc => [60, 60, 190],
    }
}

fn write_slide(
    dir: &Path,
    name: &str,
    patient: &str,
    class: Class,
    tissue_frames: &[u32],
) -> Result<CatalogRecord> {
    let mut spec = FixtureSpec::new(1024, 768, 256, 256);
    let mut fills = vec![FrameFill::White; 12];
    for &frame in tissue_frames {
        fills[frame as usize] = FrameFill::Rgb(class_color(class));
    }
    spec.fill = FillPattern::Frames(fills);
    spec.patient_id = Some(patient.to_string());
    spec.sop_instance_uid = Some(format!("1.2.826.0.1.3680043.10.1337.7.{name}"));
    spec.series_instance_uid = Some(format!("1.2.826.0.1.3680043.10.1337.6.{name}"));

    let bytes = write_synthetic_wsi(&spec)?;
    let file = dir.join(format!("{name}.dcm"));
    std::fs::write(&file, bytes).with_context(|| format!("writing {}", file.display()))?;

    Ok(CatalogRecord {
        collection_id: if class == Class::Lscc {
            "DEMO-LUSC"
        } else {
            "DEMO-LUAD"
        }
        .into(),
        patient_id: patient.to_string(),
        study_instance_uid: format!("1.2.826.0.1.3680043.10.1337.5.{name}"),
        series_instance_uid: spec.series_instance_uid.clone().unwrap(),
        sop_instance_uid: spec.sop_instance_uid.clone().unwrap(),
        modality: "SM".into(),
        image_type_flavor: "VOLUME".into(),
        sample_type_code: if class == Class::Normal { "11" } else { "01" }.into(),
        reference_class: Some(class),
        pixel_spacing_mm: 0.001,
        gcs_url: format!("local://{}", file.display()),
        extra: Default::default(),
    })
}

fn write_manifest(dir: &Path, name: &str, records: &[CatalogRecord]) -> Result<PathBuf> {
    let mut text = String::from("#catalog-version:demo_v1\n");
    for record in records {
        text.push_str(&record.to_manifest_line());
        text.push('\n');
    }
    let path = dir.join(name);
    std::fs::write(&path, text)?;
    Ok(path)
}

/// Training cohort: 12 slides over 4 patients, each patient holding one
/// slide of every class so any patient split covers all classes.
fn training_cohort(dir: &Path) -> Result<PathBuf> {
    let mut records = Vec::new();
    for (p, patient) in ["DEMO-A", "DEMO-B", "DEMO-C", "DEMO-D"].iter().enumerate() {
        for class in Class::ALL {
            let count = 4 + (p + class.index()) % 4;
            let mut frames: Vec<u32> = (0..count as u32).map(|k| (k * 3 + p as u32) % 12).collect();
            frames.sort_unstable();
            frames.dedup();
            records.push(write_slide(
                dir,
                &format!("t{p}{}", class.index()),
                patient,
                class,
                &frames,
            )?);
        }
    }
    write_manifest(dir, "training.catalog", &records)
}

/// Inference cohort: 9 fresh slides, one patient each.
fn inference_cohort(dir: &Path) -> Result<PathBuf> {
    let mut records = Vec::new();
    let mut patient = 0;
    for class in Class::ALL {
        for i in 0..3u32 {
            patient += 1;
            let mut frames: Vec<u32> = (0..5).map(|k| (k * 2 + i) % 12).collect();
            frames.sort_unstable();
            frames.dedup();
            records.push(write_slide(
                dir,
                &format!("i{}{i}", class.index()),
                &format!("DEMO-X{patient}"),
                class,
                &frames,
            )?);
        }
    }
    write_manifest(dir, "inference.catalog", &records)
}

pub fn run(base_ctx: &RunContext) -> Result<()> {
    let dir = std::env::temp_dir().join(format!("wsirepro-demo-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let outcome = run_in(&dir, base_ctx);
    let _ = std::fs::remove_dir_all(&dir);
    outcome
}

fn run_in(dir: &Path, base_ctx: &RunContext) -> Result<()> {
    eprintln!(
        "demo: building synthetic slide corpus under {}",
        dir.display()
    );
    eprintln!(
        "demo: seeds — split {DEMO_SPLIT_SEED}, train {DEMO_TRAIN_SEED}, eval {DEMO_EVAL_SEED}"
    );

    // Stage 1: train the reference classifier on the training cohort.
    let training_manifest = training_cohort(dir)?;
    let loaded = catalog::load_catalog(&training_manifest, "demo_v1")?;
    let queried = catalog::query(
        &loaded,
        &QueryExpr::eq("modality", "SM"),
        &SortSpec::by("sop_instance_uid"),
    )?;
    let records: Vec<CatalogRecord> = queried
        .iter()
        .map(catalog::derive_reference_class)
        .collect::<Result<_, _>>()?;

    let mut ctx = base_ctx.clone();
    ctx.cache_root = dir.join("cache");
    let (model, metrics, split) = train_reference_on_catalog(
        &records,
        &SplitSpec {
            proportions: [0.5, 0.25, 0.25],
            seed: DEMO_SPLIT_SEED,
        },
        &TilingParams::default(),
        TilingMode::Stream,
        &TrainConfig {
            epochs: 5,
            batch_size: 8,
            seed: DEMO_TRAIN_SEED,
            ..TrainConfig::default()
        },
        &ctx,
    )?;
    let counts = split.counts();
    eprintln!(
        "demo: trained on {} slides across {}/{}/{} patients",
        records.len(),
        counts[0],
        counts[1],
        counts[2]
    );
    for m in &metrics {
        eprintln!(
            "demo:   epoch {} — train loss {:.4}, val macro AUC {:.3}",
            m.epoch, m.train_loss, m.val_auc_macro
        );
    }
    let model_path = dir.join("model.json");
    std::fs::write(&model_path, model.to_canonical_json())?;

    // Stage 2: apply the trained model to the independent cohort, twice.
    let inference_manifest = inference_cohort(dir)?;
    let manifest = ExperimentManifest {
        manifest_version: 1,
        catalog: CatalogRef {
            path: inference_manifest,
            expected_version: "demo_v1".into(),
        },
        query: QueryExpr::eq("modality", "SM"),
        sort: SortSpec::by("sop_instance_uid"),
        subsample: None,
        split: None,
        tiling: TilingParams::default(),
        classifier: ClassifierSource::ReferenceModel { path: model_path },
        eval: EvalSpec {
            bootstrap_rounds: 1000,
            level: 0.95,
            seed: DEMO_EVAL_SEED,
        },
        mode: TilingMode::Stream,
        run_seed: 1,
    };

    let mut first_ctx = ctx.clone();
    first_ctx.runs_dir = dir.join("runs-1");
    let mut second_ctx = ctx;
    second_ctx.runs_dir = dir.join("runs-2");
    eprintln!("demo: running the inference experiment twice");
    let records = vec![
        run_experiment(&manifest, &first_ctx)?,
        run_experiment(&manifest, &second_ctx)?,
    ];

    println!("{}", records[0].eval_report.to_canonical_json());
    let comparison = compare_runs(&records)?;
    print!("{}", render_comparison_table(&records, &comparison));
    eprintln!(
        "demo: two runs bitwise identical: {} (max deviation {:.3})",
        comparison.bitwise_identical,
        comparison.overall_max_deviation()
    );
    Ok(())
}
