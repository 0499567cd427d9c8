use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rrqr_lora::diagnostics::diagnostics_report;
use rrqr_lora::Matrix;
use rrqr_lora_cli::checkpoint::{load_layers, CheckpointManifest, Role};
use rrqr_lora_cli::files::write_matrix;
use rrqr_lora_cli::rlmx;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rrqr-lora"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// One-layer checkpoint of a random `d × k` original.
fn checkpoint(dir: &Path, d: usize, k: usize) -> PathBuf {
    let src = dir.join("w.rlmx");
    write_matrix(&src, &random(d, k, 1), false).unwrap();
    let ck = dir.join("ck");
    ok(&["import", "--out", s(&ck), &format!("attn_q={}", s(&src))]);
    ck
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn small_config(dir: &Path, iterations: usize) -> PathBuf {
    let p = dir.join("cfg.json");
    let cfg = serde_json::json!({ "iterations": iterations, "r_main": 8, "r_sub": 4, "snapshot_every": 10 });
    fs::write(&p, cfg.to_string()).unwrap();
    p
}

#[test]
fn factorize_identity_gives_identity_permutation() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("eye.rlmx");
    write_matrix(&input, &Matrix::identity(5), false).unwrap();
    let out = tmp.path().join("fac");
    let stdout = ok(&["--verify", "factorize", s(&input), s(&out)]);
    assert!(stdout.contains("reconstruction residual"));
    let perm: Vec<usize> = serde_json::from_slice(&fs::read(out.join("perm.json")).unwrap()).unwrap();
    assert_eq!(perm, vec![0, 1, 2, 3, 4]);
}

#[test]
fn factorize_outputs_recombine_to_input() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("w.rlmx");
    let w = random(9, 6, 4);
    write_matrix(&input, &w, false).unwrap();
    let out = tmp.path().join("fac");
    ok(&["factorize", s(&input), s(&out)]);
    let q = rlmx::read_file(&out.join("q.rlmx")).unwrap().0;
    let r = rlmx::read_file(&out.join("r.rlmx")).unwrap().0;
    let perm: Vec<usize> = serde_json::from_slice(&fs::read(out.join("perm.json")).unwrap()).unwrap();
    let qr = q.matmul(&r).unwrap();
    let permuted = w.permute_columns(&perm);
    assert!(qr.max_abs_diff(&permuted).unwrap() <= 1e-10);
}

#[test]
fn factorize_reads_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("w.csv");
    fs::write(&input, "0,2\n1,0\n").unwrap();
    let out = tmp.path().join("fac");
    ok(&["--csv", "factorize", s(&input), s(&out)]);
    assert_eq!(
        fs::read_to_string(out.join("perm.json"))
            .unwrap()
            .split_whitespace()
            .collect::<String>(),
        "[1,0]"
    );
    assert!(out.join("q.csv").exists());
}

#[test]
fn init_defaults_add_five_entries_and_main_only_three() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = checkpoint(tmp.path(), 64, 64);
    let stdout = ok(&["--verify", "init", s(&ck)]);
    assert!(stdout.contains("output preservation"), "{stdout}");
    let m = CheckpointManifest::load(&ck).unwrap();
    assert_eq!(m.layers.len(), 6);
    let a_main = m.entry("attn_q", Role::AdapterAMain).unwrap();
    assert_eq!(a_main.selected_cols.len(), 32);
    assert_eq!(m.entry("attn_q", Role::AdapterASub).unwrap().selected_cols.len(), 4);

    ok(&["init", s(&ck), "--r-sub", "0"]);
    let m = CheckpointManifest::load(&ck).unwrap();
    assert_eq!(m.layers.len(), 4);
    assert!(m.entry("attn_q", Role::AdapterASub).is_none());
}

#[test]
fn init_rejects_rank_sum_per_layer() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = checkpoint(tmp.path(), 10, 12);
    let out = run(&["init", s(&ck), "--r-main", "8", "--r-sub", "4"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("attn_q"), "{err}");
    // nothing was written
    assert_eq!(CheckpointManifest::load(&ck).unwrap().layers.len(), 1);
}

#[test]
fn analyze_fresh_rrqr_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = checkpoint(tmp.path(), 16, 12);
    ok(&["init", s(&ck), "--r-main", "4", "--r-sub", "2"]);
    let report = tmp.path().join("diag.json");
    let heat = tmp.path().join("heat");
    ok(&["analyze", s(&ck), "--report", s(&report), "--heatmaps", s(&heat)]);
    let v: Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    let layer = &v["layers"][0];
    assert_eq!(layer["mean_offdiag_cos_a"].as_f64(), Some(0.0));
    assert!(layer["phi"].as_f64().unwrap().abs() <= 1e-12);
    assert!(heat.join("attn_q.cos_a.csv").exists());
}

#[test]
fn analyze_without_adapters_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = checkpoint(tmp.path(), 6, 6);
    let out = run(&["analyze", s(&ck), "--report", s(&tmp.path().join("r.json"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing role"));
}

#[test]
fn merge_at_init_reproduces_original() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = checkpoint(tmp.path(), 12, 9);
    ok(&[
        "init",
        s(&ck),
        "--r-main",
        "3",
        "--r-sub",
        "2",
        "--strategy",
        "svd-minor",
    ]);
    let out = tmp.path().join("merged");
    ok(&["--verify", "merge", s(&ck), "--out", s(&out)]);
    let merged = rlmx::read_file(&out.join("attn_q.original.rlmx")).unwrap().0;
    let original = rlmx::read_file(&ck.join("attn_q.original.rlmx")).unwrap().0;
    assert!(merged.max_abs_diff(&original).unwrap() <= 1e-12);

    let again = tmp.path().join("merged2");
    ok(&["merge", s(&ck), "--out", s(&again)]);
    for f in ["attn_q.original.rlmx", "manifest.json"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap());
    }
}

#[test]
fn merge_with_missing_role_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = checkpoint(tmp.path(), 8, 8);
    ok(&["init", s(&ck), "--r-main", "2", "--r-sub", "2"]);
    let mut m = CheckpointManifest::load(&ck).unwrap();
    m.layers.retain(|e| e.role != Role::AdapterBSub);
    m.save(&ck).unwrap();
    let out = run(&["merge", s(&ck), "--out", s(&tmp.path().join("m"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("adapter_b_sub"));
}

#[test]
fn train_toy_zero_iterations_and_library_equivalence() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 0);
    let out = tmp.path().join("run");
    ok(&["train-toy", "--config", s(&cfg), "--out", s(&out)]);
    let v: Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(v["final_target_loss"], v["initial_target_loss"]);
    assert!(v.get("wall_clock_secs").is_none());
    let meta: Value = serde_json::from_slice(&fs::read(out.join("run_meta.json")).unwrap()).unwrap();
    assert!(meta["wall_clock_secs"].is_number());
}

#[test]
fn analyze_matches_library_on_trained_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 30);
    let out = tmp.path().join("run");
    ok(&["train-toy", "--config", s(&cfg), "--out", s(&out)]);
    let ck = out.join("checkpoint");
    let report_path = tmp.path().join("diag.json");
    ok(&["analyze", s(&ck), "--report", s(&report_path)]);

    let manifest = CheckpointManifest::load(&ck).unwrap();
    let layers = load_layers(&ck, &manifest).unwrap();
    let direct = diagnostics_report(layers.iter().map(|(n, l)| (n.as_str(), l)));
    let expected = serde_json::to_value(&direct).unwrap();
    let got: Value = serde_json::from_slice(&fs::read(&report_path).unwrap()).unwrap();
    assert_eq!(got, expected);

    // the final training snapshot already holds the same diagnostics
    let train: Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    let last = train["snapshots"].as_array().unwrap().last().unwrap();
    assert_eq!(last["diagnostics"], expected);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["init"]).status.code(), Some(2));
    assert_eq!(run(&["init", "x", "--strategy", "nope"]).status.code(), Some(2));
    assert_eq!(
        run(&["--threads", "0", "merge", "x", "--out", "y"]).status.code(),
        Some(2)
    );
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn bundled_config_parses() {
    let cfg = rrqr_lora_cli::commands::load_config(&repo_root().join("configs/repro_table1_analogue.json")).unwrap();
    assert_eq!(cfg.r_main, 8);
    assert!(cfg.iterations >= 2000);
}

fn validator(name: &str) -> jsonschema::Validator {
    let text = fs::read_to_string(repo_root().join("schemas").join(name)).unwrap();
    jsonschema::validator_for(&serde_json::from_str(&text).unwrap()).unwrap()
}

fn assert_valid(v: &jsonschema::Validator, doc: &Value, what: &str) {
    let errors: Vec<String> = v.iter_errors(doc).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{what}: {errors:?}");
}

#[test]
fn outputs_validate_against_shipped_schemas() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 20);
    let out = tmp.path().join("run");
    ok(&["train-toy", "--config", s(&cfg), "--out", s(&out)]);
    let report_path = tmp.path().join("diag.json");
    ok(&["analyze", s(&out.join("checkpoint")), "--report", s(&report_path)]);

    let read = |p: PathBuf| -> Value { serde_json::from_slice(&fs::read(p).unwrap()).unwrap() };
    let cases = [
        ("train_report.v1.schema.json", read(out.join("report.json"))),
        ("run_meta.v1.schema.json", read(out.join("run_meta.json"))),
        (
            "checkpoint_manifest.v1.schema.json",
            read(out.join("checkpoint/manifest.json")),
        ),
        ("diagnostics_report.v1.schema.json", read(report_path)),
        (
            "train_config.v1.schema.json",
            read(repo_root().join("configs/repro_table1_analogue.json")),
        ),
        ("train_config.v1.schema.json", read(cfg)),
    ];
    for (schema, doc) in &cases {
        assert_valid(&validator(schema), doc, schema);
    }

    let bad = serde_json::json!({ "iterations": 3, "lr": 1.0 });
    assert!(!validator("train_config.v1.schema.json").is_valid(&bad));
}
