//! End-to-end tests of the `discover` binary: every subcommand, exit codes,
//! and artifact round trips.

use std::path::Path;
use std::process::{Command, Output};

fn discover(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_discover"));
    cmd.args(args);
    cmd.env_remove("DISCOVER_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary should run")
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("config.txt");
    let base = "\
data.n_songs = 12
data.versions_min = 2
data.versions_max = 2
data.melody_len = 8
data.frames_per_note = 2
data.seed = 21
encoder.hidden = 12
encoder.dim = 8
kdm.estimator_hidden = 8
kdm.clusters = 4
gadm.disc_hidden = 8
train.batch_size = 4
train.epochs = 1
";
    std::fs::write(&path, format!("{base}{extra}")).unwrap();
    path
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

#[test]
fn gen_data_writes_corpus_and_refuses_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let data = dir.path().join("corpus");

    let out = discover(
        &["gen-data", "--config", config.to_str().unwrap(), "--out", data.to_str().unwrap()],
        &[],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    for name in ["manifest.toml", "features.f32", "f0.f32", "timbre.f32", "run_manifest.json"] {
        assert!(data.join(name).exists(), "missing {name}");
    }

    // refuses to overwrite without --force
    let again = discover(
        &["gen-data", "--config", config.to_str().unwrap(), "--out", data.to_str().unwrap()],
        &[],
    );
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("--force"));

    let forced = discover(
        &[
            "gen-data",
            "--config",
            config.to_str().unwrap(),
            "--out",
            data.to_str().unwrap(),
            "--force",
        ],
        &[],
    );
    assert!(forced.status.success());
}

#[test]
fn gen_data_same_seed_gives_identical_checksums() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out_dir in [&a, &b] {
        let out = discover(
            &["gen-data", "--config", config.to_str().unwrap(), "--out", out_dir.to_str().unwrap()],
            &[],
        );
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let manifest_a: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("run_manifest.json")).unwrap())
            .unwrap();
    let manifest_b: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(b.join("run_manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest_a["corpus_checksum"], manifest_b["corpus_checksum"]);
}

#[test]
fn bad_dims_fail_with_exit_two_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "data.feature_dim = 0\n");
    let out = discover(
        &[
            "gen-data",
            "--config",
            config.to_str().unwrap(),
            "--out",
            dir.path().join("x").to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("data.feature_dim"));

    let unknown = write_config(dir.path(), "data.bogus_key = 3\n");
    let out = discover(
        &[
            "gen-data",
            "--config",
            unknown.to_str().unwrap(),
            "--out",
            dir.path().join("y").to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("data.bogus_key"));
}

fn gen_and_train(dir: &Path, train_extra: &[&str]) -> (std::path::PathBuf, std::path::PathBuf) {
    let config = write_config(dir, "");
    let data = dir.join("corpus");
    let out = discover(
        &["gen-data", "--config", config.to_str().unwrap(), "--out", data.to_str().unwrap()],
        &[],
    );
    assert!(out.status.success(), "{}", stderr(&out));

    let run = dir.join("run");
    let mut args = vec![
        "train",
        "--config",
        config.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ];
    args.extend_from_slice(train_extra);
    let out = discover(&args, &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    (data, run)
}

#[test]
fn train_writes_checkpoint_history_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (_, run) = gen_and_train(dir.path(), &[]);
    assert!(run.join("checkpoint.bin").exists());
    assert!(run.join("run_manifest.json").exists());
    let history = std::fs::read_to_string(run.join("history.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(history.lines().next().unwrap()).unwrap();
    assert!(first["val_map"].is_number());
    assert!(first["l_1"].is_number());
}

#[test]
fn train_with_zero_epochs_writes_initialized_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (_, run) = gen_and_train(dir.path(), &["--epochs", "0"]);
    assert!(run.join("checkpoint.bin").exists());
    let history = std::fs::read_to_string(run.join("history.jsonl")).unwrap();
    assert!(history.trim().is_empty());
}

#[test]
fn train_ablation_flags_disable_modules() {
    let dir = tempfile::tempdir().unwrap();
    let (_, run) = gen_and_train(dir.path(), &["--ablate", "kdm", "--ablate", "gadm"]);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("run_manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["config"]["kdm.enabled"], "false");
    assert_eq!(manifest["config"]["gadm.enabled"], "false");
    let history = std::fs::read_to_string(run.join("history.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(history.lines().next().unwrap()).unwrap();
    assert_eq!(first["l_mi"], 0.0);
    assert_eq!(first["l_trans"], 0.0);
    assert_eq!(first["l_adv"], 0.0);
}

#[test]
fn eval_writes_parseable_report_with_finite_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = gen_and_train(dir.path(), &[]);
    let report_path = dir.path().join("report.toml");
    let per_query = dir.path().join("per_query.csv");
    let out = discover(
        &[
            "eval",
            "--checkpoint",
            run.join("checkpoint.bin").to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--split",
            "test",
            "--out",
            report_path.to_str().unwrap(),
            "--per-query",
            per_query.to_str().unwrap(),
        ],
        &[],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let report: toml::Value =
        toml::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    for key in ["map", "p_at_10", "mr1"] {
        let v = report[key].as_float().unwrap();
        assert!(v.is_finite());
    }
    assert_eq!(report["scenario"].as_integer(), Some(1));
    assert!(per_query.exists());
}

#[test]
fn eval_scenario_override_tags_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = gen_and_train(dir.path(), &[]);
    let report_path = dir.path().join("report2.toml");
    let out = discover(
        &[
            "eval",
            "--checkpoint",
            run.join("checkpoint.bin").to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--split",
            "test",
            "--scenario",
            "2",
            "--out",
            report_path.to_str().unwrap(),
        ],
        &[],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let report: toml::Value =
        toml::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["scenario"].as_integer(), Some(2));
}

#[test]
fn eval_missing_checkpoint_is_a_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let data = dir.path().join("corpus");
    discover(
        &["gen-data", "--config", config.to_str().unwrap(), "--out", data.to_str().unwrap()],
        &[],
    );
    let out = discover(
        &[
            "eval",
            "--checkpoint",
            dir.path().join("nope.bin").to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn identical_config_and_seed_reproduce_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = gen_and_train(dir.path(), &[]);
    let run2 = dir.path().join("run2");
    let config = dir.path().join("config.txt");
    let out = discover(
        &[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            run2.to_str().unwrap(),
        ],
        &[],
    );
    assert!(out.status.success(), "{}", stderr(&out));

    let mut reports = Vec::new();
    for (i, run_dir) in [&run, &run2].iter().enumerate() {
        let report_path = dir.path().join(format!("rep{i}.toml"));
        let out = discover(
            &[
                "eval",
                "--checkpoint",
                run_dir.join("checkpoint.bin").to_str().unwrap(),
                "--data",
                data.to_str().unwrap(),
                "--split",
                "test",
                "--out",
                report_path.to_str().unwrap(),
            ],
            &[],
        );
        assert!(out.status.success(), "{}", stderr(&out));
        reports.push(std::fs::read_to_string(&report_path).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn discover_seed_env_overrides_config_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out = discover(
        &["gen-data", "--config", config.to_str().unwrap(), "--out", a.to_str().unwrap()],
        &[("DISCOVER_SEED", "99")],
    );
    assert!(out.status.success());
    let out = discover(
        &["gen-data", "--config", config.to_str().unwrap(), "--out", b.to_str().unwrap()],
        &[],
    );
    assert!(out.status.success());
    let read = |p: &Path| -> serde_json::Value {
        serde_json::from_str(&std::fs::read_to_string(p.join("run_manifest.json")).unwrap())
            .unwrap()
    };
    let (ma, mb) = (read(&a), read(&b));
    assert_eq!(ma["data_seed"], 99);
    assert_eq!(mb["data_seed"], 21);
    assert_ne!(ma["corpus_checksum"], mb["corpus_checksum"]);
}

#[test]
fn embed_exports_csv_that_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = gen_and_train(dir.path(), &[]);
    let csv_path = dir.path().join("embeddings.csv");
    let out = discover(
        &[
            "embed",
            "--checkpoint",
            run.join("checkpoint.bin").to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--split",
            "all",
            "--out",
            csv_path.to_str().unwrap(),
        ],
        &[],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&csv_path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("recording_id,e0,"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 24); // 12 songs x 2 versions

    // round trip: parse floats back and compare against a fresh export
    let state = discover::checkpoint::load(&run.join("checkpoint.bin")).unwrap();
    let corpus = discover::synthcover::io::load_corpus(&data).unwrap();
    for row in rows {
        let mut parts = row.split(',');
        let id: u32 = parts.next().unwrap().parse().unwrap();
        let parsed: Vec<f64> = parts.map(|v| v.parse().unwrap()).collect();
        let rep = state.encode_plain(&corpus, &[id]).unwrap();
        for (a, b) in parsed.iter().zip(rep[0].iter()) {
            assert!((a - b).abs() < 1e-7);
        }
    }
}

#[test]
fn embed_identical_recordings_get_identical_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = gen_and_train(dir.path(), &[]);
    let mut exports = Vec::new();
    for i in 0..2 {
        let csv_path = dir.path().join(format!("embeddings{i}.csv"));
        let out = discover(
            &[
                "embed",
                "--checkpoint",
                run.join("checkpoint.bin").to_str().unwrap(),
                "--data",
                data.to_str().unwrap(),
                "--out",
                csv_path.to_str().unwrap(),
            ],
            &[],
        );
        assert!(out.status.success());
        exports.push(std::fs::read_to_string(&csv_path).unwrap());
    }
    assert_eq!(exports[0], exports[1]);
}

#[test]
fn sweep_emits_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let data = dir.path().join("corpus");
    let out = discover(
        &["gen-data", "--config", config.to_str().unwrap(), "--out", data.to_str().unwrap()],
        &[],
    );
    assert!(out.status.success());

    // metric axis: three rows by default
    let sweep_dir = dir.path().join("sweep_metric");
    let out = discover(
        &[
            "sweep",
            "--config",
            config.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            sweep_dir.to_str().unwrap(),
            "--axis",
            "metric",
        ],
        &[],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let table = std::fs::read_to_string(sweep_dir.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 3);
    assert!(stdout(&out).contains("euclidean"));

    // cluster axis with explicit small values: four rows
    let sweep_dir = dir.path().join("sweep_clusters");
    let out = discover(
        &[
            "sweep",
            "--config",
            config.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            sweep_dir.to_str().unwrap(),
            "--axis",
            "clusters",
            "--values",
            "2,3,4,5",
        ],
        &[],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let table = std::fs::read_to_string(sweep_dir.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 4);

    // degenerate sweep: one configuration equals a single train + eval
    let sweep_dir = dir.path().join("sweep_one");
    let out = discover(
        &[
            "sweep",
            "--config",
            config.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            sweep_dir.to_str().unwrap(),
            "--axis",
            "knowledge",
            "--values",
            "both+tradeoff",
        ],
        &[],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let table = std::fs::read_to_string(sweep_dir.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 1);
    assert!(sweep_dir.join("knowledge_both_tradeoff/checkpoint.bin").exists());
}

#[test]
fn help_documents_all_subcommands() {
    let out = discover(&["--help"], &[]);
    assert!(out.status.success());
    let text = stdout(&out);
    for sub in ["gen-data", "train", "eval", "embed", "sweep"] {
        assert!(text.contains(sub), "help missing {sub}");
    }
}
