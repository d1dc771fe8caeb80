//! Black-box tests of the binary: exit codes, stream separation, and the
//! stage-by-stage pipeline driven exactly as a user would.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wsirepro"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin()
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let output = bin().arg("frobnicate").output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr_of(&output).contains("Usage"));
    assert!(output.stdout.is_empty());
}

#[test]
fn missing_seed_on_stochastic_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.manifest"), "#catalog-version:v\n").unwrap();
    let output = run_in(
        dir.path(),
        &[
            "split",
            "--manifest",
            "c.manifest",
            "--expected-version",
            "v",
        ],
    );
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr_of(&output).contains("--seed"));
}

#[test]
fn compare_bundled_fixture_prints_the_published_deviation() {
    let output = bin()
        .args(["repro", "compare", "--bundled", "exp1"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", stderr_of(&output));
    let stdout = stdout_of(&output);
    assert!(
        stdout.contains("overall max deviation: 0.045"),
        "stdout: {stdout}"
    );

    let exp2 = bin()
        .args(["repro", "compare", "--bundled", "exp2"])
        .output()
        .unwrap();
    assert!(stdout_of(&exp2).contains("overall max deviation: 0.001"));

    let bad = bin()
        .args(["repro", "compare", "--bundled", "nope"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn domain_errors_exit_one_with_module_error_text() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("header.manifest"),
        "#catalog-version:idc_v10\n",
    )
    .unwrap();
    let output = run_in(
        dir.path(),
        &[
            "catalog",
            "query",
            "--manifest",
            "header.manifest",
            "--expected-version",
            "idc_v11",
            "--where",
            "modality = SM",
            "--order-by",
            "sop_instance_uid",
        ],
    );
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr_of(&output).contains("version mismatch"));
}

fn fixture_spec(patient: &str, name: &str, tissue: &str) -> String {
    format!(
        "total_cols = 1024\ntotal_rows = 768\nframe_cols = 256\nframe_rows = 256\n\
         spacing_mm = 0.001\nfill = tissue_frames:{tissue}\npatient_id = {patient}\n\
         sop_instance_uid = 1.2.826.0.1.3680043.10.1337.77.{name}\n\
         series_instance_uid = 1.2.826.0.1.3680043.10.1337.78.{name}\n"
    )
}

/// Writes slides via the `fixture` subcommand and a catalog manifest
/// referencing them. Every patient holds one slide of each class, so any
/// patient-level split covers all classes. Returns the manifest path.
fn build_corpus(dir: &Path, patients: usize) -> PathBuf {
    let mut manifest = String::from("#catalog-version:cli_v1\n");
    let classes = [("normal", "11"), ("LUAD", "01"), ("LSCC", "01")];
    for p in 0..patients {
        let patient = format!("CLI-P{p:02}");
        for (class, code) in classes {
            let name = format!("{class}{p}");
            let spec_path = dir.join(format!("{name}.spec"));
            std::fs::write(&spec_path, fixture_spec(&patient, &name, "0,2,5,7,9")).unwrap();
            let out = dir.join(format!("{name}.dcm"));
            let result = run_in(
                dir,
                &[
                    "fixture",
                    "--spec",
                    spec_path.to_str().unwrap(),
                    "-o",
                    out.to_str().unwrap(),
                ],
            );
            assert_eq!(result.status.code(), Some(0), "{}", stderr_of(&result));
            let collection = if class == "LSCC" {
                "CLI-LUSC"
            } else {
                "CLI-LUAD"
            };
            manifest.push_str(&format!(
                "collection_id={collection}\tpatient_id={patient}\t\
                 study_instance_uid=st.{name}\tseries_instance_uid=1.2.826.0.1.3680043.10.1337.78.{name}\t\
                 sop_instance_uid=1.2.826.0.1.3680043.10.1337.77.{name}\tmodality=SM\t\
                 image_type_flavor=VOLUME\tsample_type_code={code}\treference_class={class}\t\
                 pixel_spacing_mm=0.001\tgcs_url=local://{}\n",
                dir.join(format!("{name}.dcm")).display()
            ));
        }
    }
    let path = dir.join("corpus.manifest");
    std::fs::write(&path, manifest).unwrap();
    path
}

#[test]
fn full_stage_pipeline_from_fixture_to_eval() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = build_corpus(dir.path(), 4);
    let manifest_str = manifest.to_str().unwrap();

    // catalog query: restrict to the LUAD collection.
    let query = run_in(
        dir.path(),
        &[
            "catalog",
            "query",
            "--manifest",
            manifest_str,
            "--expected-version",
            "cli_v1",
            "--where",
            "modality = SM and collection_id in (\"CLI-LUAD\", \"CLI-LUSC\")",
            "--order-by",
            "sop_instance_uid",
            "--emit-sql",
        ],
    );
    assert_eq!(query.status.code(), Some(0), "{}", stderr_of(&query));
    assert_eq!(stdout_of(&query).lines().count(), 12);
    assert!(stderr_of(&query).contains("SELECT gcs_url"));

    // Two independent processes produce byte-identical result lists.
    let again = run_in(
        dir.path(),
        &[
            "catalog",
            "query",
            "--manifest",
            manifest_str,
            "--expected-version",
            "cli_v1",
            "--where",
            "modality = SM and collection_id in (\"CLI-LUAD\", \"CLI-LUSC\")",
            "--order-by",
            "sop_instance_uid",
        ],
    );
    assert_eq!(query.stdout, again.stdout);

    // split: deterministic patient partition.
    let split = run_in(
        dir.path(),
        &[
            "split",
            "--manifest",
            manifest_str,
            "--expected-version",
            "cli_v1",
            "--proportions",
            "0.5,0.25,0.25",
            "--seed",
            "7",
        ],
    );
    assert_eq!(split.status.code(), Some(0), "{}", stderr_of(&split));
    assert!(stderr_of(&split).contains("2/1/1"), "{}", stderr_of(&split));

    // train-ref: small training run over the corpus.
    let model_path = dir.path().join("model.json");
    let train = run_in(
        dir.path(),
        &[
            "train-ref",
            "--manifest",
            manifest_str,
            "--expected-version",
            "cli_v1",
            "--proportions",
            "0.5,0.25,0.25",
            "--split-seed",
            "11",
            "--seed",
            "5",
            "--epochs",
            "4",
            "--batch-size",
            "8",
            "--out",
            model_path.to_str().unwrap(),
        ],
    );
    assert_eq!(train.status.code(), Some(0), "{}", stderr_of(&train));
    assert!(model_path.exists());
    assert!(stderr_of(&train).contains("epoch 3"));

    // infer six slides and assemble a results file.
    let mut results = Vec::new();
    for (class, i) in [
        ("normal", 0),
        ("normal", 1),
        ("LUAD", 0),
        ("LUAD", 1),
        ("LSCC", 0),
        ("LSCC", 1),
    ] {
        let slide = dir.path().join(format!("{class}{i}.dcm"));
        let infer = run_in(
            dir.path(),
            &[
                "infer",
                "--input",
                &format!("local://{}", slide.display()),
                "--model",
                model_path.to_str().unwrap(),
                "--true-class",
                class,
                "--patient-id",
                &format!("P-{class}-{i}"),
            ],
        );
        assert_eq!(infer.status.code(), Some(0), "{}", stderr_of(&infer));
        results.push(stdout_of(&infer).trim().to_string());
    }
    let results_path = dir.path().join("results.json");
    std::fs::write(&results_path, format!("[{}]", results.join(","))).unwrap();

    // eval: bootstrap report over the assembled results, with ROC CSVs.
    let eval = run_in(
        dir.path(),
        &[
            "eval",
            "--slide-results",
            results_path.to_str().unwrap(),
            "--seed",
            "3",
            "--rounds",
            "300",
            "--roc-dir",
            "roc",
        ],
    );
    assert_eq!(eval.status.code(), Some(0), "{}", stderr_of(&eval));
    let report: serde_json::Value = serde_json::from_str(stdout_of(&eval).trim()).unwrap();
    assert_eq!(report["slide_count"], 6);
    assert!(report["class_auc"]["LUAD"]["auc"].as_f64().is_some());
    for class in ["normal", "LUAD", "LSCC"] {
        let csv = std::fs::read_to_string(dir.path().join("roc").join(format!("roc_{class}.csv")))
            .unwrap();
        assert!(csv.starts_with("fpr,tpr\n"));
        assert!(csv.trim_end().ends_with("1,1"), "{csv}");
    }
}

#[test]
fn run_subcommand_executes_a_manifest_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let manifest_path = build_corpus(dir.path(), 3);

    // Train a quick model to reference from the experiment manifest.
    let model_path = dir.path().join("model.json");
    let train = run_in(
        dir.path(),
        &[
            "train-ref",
            "--manifest",
            manifest_path.to_str().unwrap(),
            "--expected-version",
            "cli_v1",
            "--proportions",
            "0.4,0.3,0.3",
            "--split-seed",
            "1",
            "--seed",
            "2",
            "--epochs",
            "2",
            "--out",
            model_path.to_str().unwrap(),
        ],
    );
    assert_eq!(train.status.code(), Some(0), "{}", stderr_of(&train));

    let experiment = serde_json::json!({
        "manifest_version": 1,
        "catalog": {"path": manifest_path, "expected_version": "cli_v1"},
        "query": {"op": "eq", "attr": "modality", "value": "SM"},
        "sort": {"keys": [["sop_instance_uid", "ascending"]]},
        "tiling": {},
        "classifier": {"reference_model": {"path": model_path}},
        "eval": {"bootstrap_rounds": 200, "level": 0.95, "seed": 9},
        "mode": "stream",
        "run_seed": 4
    });
    let experiment_path = dir.path().join("experiment.json");
    std::fs::write(&experiment_path, experiment.to_string()).unwrap();

    let mut outputs = Vec::new();
    for runs in ["runs-a", "runs-b"] {
        let run = run_in(
            dir.path(),
            &[
                "run",
                "--manifest",
                experiment_path.to_str().unwrap(),
                "--runs-dir",
                runs,
            ],
        );
        assert_eq!(run.status.code(), Some(0), "{}", stderr_of(&run));
        outputs.push(stdout_of(&run));
    }
    // Identical argv + identical inputs: identical output-stream bytes.
    assert_eq!(outputs[0], outputs[1]);
    let a: serde_json::Value = serde_json::from_str(outputs[0].trim()).unwrap();
    assert!(a["eval_report"]["class_auc"]["normal"]["auc"]
        .as_f64()
        .is_some());
    assert!(a["slide_results_digest"].as_str().unwrap().len() == 64);

    // Compare the two persisted records through the CLI.
    let record_a = std::fs::read_dir(dir.path().join("runs-a"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let record_b = std::fs::read_dir(dir.path().join("runs-b"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let compare = run_in(
        dir.path(),
        &[
            "repro",
            "compare",
            record_a.to_str().unwrap(),
            record_b.to_str().unwrap(),
        ],
    );
    assert_eq!(compare.status.code(), Some(0), "{}", stderr_of(&compare));
    let stdout = stdout_of(&compare);
    assert!(stdout.contains("overall max deviation: 0.000"), "{stdout}");
    assert!(stdout.contains("bitwise identical: true"), "{stdout}");
}

#[test]
fn demo_prints_a_three_class_report() {
    let output = bin().arg("demo").output().unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", stderr_of(&output));
    let stdout = stdout_of(&output);
    let report_line = stdout.lines().next().unwrap();
    let report: serde_json::Value = serde_json::from_str(report_line).unwrap();
    for class in ["normal", "LUAD", "LSCC"] {
        assert!(
            report["class_auc"][class]["auc"].as_f64().is_some(),
            "{class}"
        );
    }
    assert!(stdout.contains("bitwise identical: true"));
    // Diagnostics stay on stderr.
    assert!(stderr_of(&output).contains("seeds"));
}

#[test]
fn fetch_respects_ranges_and_streams_to_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let data: Vec<u8> = (0..=99).collect();
    std::fs::write(dir.path().join("obj.bin"), &data).unwrap();
    let url = format!("local://{}", dir.path().join("obj.bin").display());
    let output = run_in(dir.path(), &["fetch", &url, "--range", "10,20"]);
    assert_eq!(output.status.code(), Some(0));
    assert_eq!(output.stdout, &data[10..30]);
}

#[test]
fn config_file_and_env_overrides() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("config.json"),
        r#"{"cache_root": "cfg-cache", "threads": 2}"#,
    )
    .unwrap();
    // Bad env value surfaces as a domain error.
    let output = bin()
        .args([
            "--config",
            "config.json",
            "repro",
            "compare",
            "--bundled",
            "exp1",
        ])
        .current_dir(dir.path())
        .env("WSIREPRO_THREADS", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr_of(&output).contains("WSIREPRO_THREADS"));

    // Valid env override wins over the file.
    let ok = bin()
        .args([
            "--config",
            "config.json",
            "repro",
            "compare",
            "--bundled",
            "exp1",
        ])
        .current_dir(dir.path())
        .env("WSIREPRO_THREADS", "3")
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0), "{}", stderr_of(&ok));
}
