use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn simfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simfuse"))
        .args(args)
        .env_remove("SIMFUSE_CACHE_DIR")
        .output()
        .expect("spawn simfuse")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_json(path: &Path, v: &Value) {
    std::fs::write(path, serde_json::to_vec_pretty(v).unwrap()).unwrap();
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

/// Runs `synth` on `spec` and returns the written manifest.
fn synth(dir: &Path, name: &str, spec: Value) -> PathBuf {
    let spec_path = dir.join(format!("{name}.spec.json"));
    write_json(&spec_path, &spec);
    let out = dir.join(name);
    let o = simfuse(&["synth", p(&spec_path), "-o", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = ["gallery.json", "items.json"].iter().map(|f| out.join(f)).find(|f| f.exists());
    manifest.expect("synth output")
}

fn disjoint_spec(n: usize) -> Value {
    json!({
        "n_pairs": n,
        "n_reprs": 2,
        "dim": 256,
        "signal": [{"range": [0, n / 2]}, {"range": [n / 2, n]}],
        "seed": 3,
        "suppress_chance_hits": true
    })
}

fn mixed_spec() -> Value {
    json!({
        "n_pairs": 60,
        "n_reprs": 4,
        "dim": 10,
        "signal": ["all", {"range": [0, 30]}, {"indices": [1, 2, 3, 40]}, "none"],
        "noise_sigma": 0.6,
        "seed": 21,
        "repr_names": ["alpha", "beta", "gamma", "delta"]
    })
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn ingest_accepts_unit_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let gallery = synth(tmp.path(), "g", mixed_spec());
    let o = simfuse(&["ingest", p(&gallery)]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn ingest_rejects_zero_row_and_renormalize_fixes_others() {
    let tmp = tempfile::tempdir().unwrap();
    let zero = tmp.path().join("zero.csv");
    std::fs::write(&zero, "a,0.6,0.8\nb,0,0\nc,1,0\n").unwrap();
    let o = simfuse(&["ingest", p(&zero), "--repr", "z"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("row 1"), "{}", stderr(&o));

    let off = tmp.path().join("off.csv");
    std::fs::write(&off, "a,3,4\nb,0,2\n").unwrap();
    let o = simfuse(&["ingest", p(&off), "--repr", "off"]);
    assert_eq!(o.status.code(), Some(1));
    let fixed = tmp.path().join("fixed");
    let o = simfuse(&["ingest", p(&off), "--repr", "off", "--renormalize", "-o", p(&fixed)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let written: Vec<_> = std::fs::read_dir(&fixed)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|f| f.extension().is_some_and(|x| x == "json"))
        .collect();
    assert_eq!(written.len(), 1);
    let o = simfuse(&["ingest", p(&written[0])]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn synth_is_reproducible_and_reports_bad_json() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(tmp.path(), "a", mixed_spec());
    let b = synth(tmp.path(), "b", mixed_spec());
    assert_eq!(dir_bytes(a.parent().unwrap()), dir_bytes(b.parent().unwrap()));

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "{\n  \"n_pairs\": 10,\n  \"dim\": oops\n}\n").unwrap();
    let o = simfuse(&["synth", p(&bad), "-o", p(&tmp.path().join("x"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("line 3") && err.contains("column"), "{err}");
}

#[test]
fn search_both_modes_is_worker_independent() {
    let tmp = tempfile::tempdir().unwrap();
    let gallery = synth(tmp.path(), "g", mixed_spec());
    let runs: Vec<PathBuf> = ["1", "8"]
        .iter()
        .map(|w| {
            let out = tmp.path().join(format!("search{w}"));
            let o = simfuse(&["search", "-g", p(&gallery), "--mode", "both", "--workers", w, "-o", p(&out)]);
            assert!(o.status.success(), "{}", stderr(&o));
            out
        })
        .collect();
    assert_eq!(dir_bytes(&runs[0]), dir_bytes(&runs[1]));
    let summary = read_json(&runs[0].join("summary.json"));
    assert_eq!(summary["modes"].as_array().unwrap().len(), 2);
    assert_eq!(summary["representations"], json!(["alpha", "beta", "delta", "gamma"]));
    for mode in ["raw", "normalized"] {
        let csv = std::fs::read_to_string(runs[0].join(format!("search_{mode}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 16);
    }
}

#[test]
fn search_cache_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let gallery = synth(tmp.path(), "g", mixed_spec());
    let cache = tmp.path().join("cache");
    let mut outputs = Vec::new();
    for run in ["first", "second"] {
        let out = tmp.path().join(run);
        let o = simfuse(&["search", "-g", p(&gallery), "--cache", "--cache-dir", p(&cache), "-o", p(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push(dir_bytes(&out));
    }
    assert!(std::fs::read_dir(&cache).unwrap().count() >= 4);
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn analyze_needs_search_output() {
    let tmp = tempfile::tempdir().unwrap();
    let o = simfuse(&["analyze", "--search", p(&tmp.path().join("nothing")), "-o", p(&tmp.path().join("a"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("search"), "{}", stderr(&o));
}

#[test]
fn analyze_disjoint_halves() {
    let tmp = tempfile::tempdir().unwrap();
    let gallery = synth(tmp.path(), "g", disjoint_spec(100));
    let search = tmp.path().join("search");
    assert!(simfuse(&["search", "-g", p(&gallery), "-o", p(&search)]).status.success());
    let out = tmp.path().join("analysis");
    let o = simfuse(&["analyze", "--search", p(&search), "--gallery", p(&gallery), "-o", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = read_json(&out.join("analysis.json"));
    assert_eq!(a["oracle"]["oracle_recall"], 100);
    assert_eq!(a["oracle"]["best_single_recall"], 50);
    assert_eq!(a["oracle"]["best_combination_recall"], 100);
    assert_eq!(a["exclusive"]["total_exclusive"], 100);
    // The default base is the best subset, here both representations.
    let rows = a["ablation"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for row in rows {
        assert_eq!(row["best_recall"], 50);
        assert_eq!(row["delta"], 50);
    }
    assert_eq!(a["failures"]["cases"].as_array().unwrap().len(), 0);
}

#[test]
fn analyze_explicit_base_and_unknown_name() {
    let tmp = tempfile::tempdir().unwrap();
    let gallery = synth(tmp.path(), "g", mixed_spec());
    let search = tmp.path().join("search");
    assert!(simfuse(&["search", "-g", p(&gallery), "-o", p(&search)]).status.success());
    let out = tmp.path().join("analysis");
    let o = simfuse(&["analyze", "--search", p(&search), "--ablation-base", "alpha,beta", "--same-size", "-o", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = read_json(&out.join("analysis.json"));
    let names: Vec<&str> = a["ablation"]["rows"].as_array().unwrap().iter().map(|r| r["removed_name"].as_str().unwrap()).collect();
    assert_eq!(names, ["alpha", "beta"]);
    let o = simfuse(&["analyze", "--search", p(&search), "--ablation-base", "alpha,nope", "-o", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope"), "{}", stderr(&o));
}

fn items_spec(planted: usize) -> Value {
    json!({
        "n_items": 60,
        "layers": [
            {"h": 4, "w": 4, "c": 3},
            {"h": 3, "w": 3, "c": 6},
            {"h": 2, "w": 2, "c": 8}
        ],
        "planted_layer": planted,
        "seed": 5
    })
}

#[test]
fn bapps_reports_planted_layer_and_baseline_delta() {
    let tmp = tempfile::tempdir().unwrap();
    let items = synth(tmp.path(), "items", items_spec(2));
    let baseline = tmp.path().join("baseline.json");
    let out = tmp.path().join("bapps");
    let first = simfuse(&["bapps", "--items", p(&items), "-o", p(&out)]);
    assert!(first.status.success(), "{}", stderr(&first));
    let report = read_json(&out.join("bapps_report.json"));
    let distortion = report["single_layer"][0]["distortion"].as_str().unwrap().to_string();
    assert_eq!(report["single_layer"][0]["layer"], 2);
    let score = report["single_layer"][0]["score"].as_f64().unwrap();
    assert!(score >= 0.9 - 1e-12);

    write_json(&baseline, &json!({ distortion: 0.95 }));
    let o = simfuse(&["bapps", "--items", p(&items), "--baseline", p(&baseline), "-o", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = read_json(&out.join("bapps_report.json"));
    let delta = report["single_layer"][0]["delta"].as_f64().unwrap();
    assert!((delta - (0.95 - score)).abs() < 1e-12);
    assert!(std::fs::read_to_string(out.join("single_layer.csv")).unwrap().starts_with("distortion,L_s"));
}

#[test]
fn bapps_rejects_empty_item_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("empty.f32"), b"").unwrap();
    let manifest = tmp.path().join("empty.json");
    write_json(
        &manifest,
        &json!({
            "layers": [{"h": 1, "w": 1, "c": 2}],
            "items": [],
            "checksum": "xxh3-64:2d06800538d394c2",
            "payload_file": "empty.f32"
        }),
    );
    let o = simfuse(&["bapps", "--items", p(&manifest), "-o", p(&tmp.path().join("out"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no items"), "{}", stderr(&o));
}

#[test]
fn bapps_scores_distance_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let table = tmp.path().join("blur.csv");
    std::fs::write(
        &table,
        "item_id,metric,d0,d1,human_pref\n\
         a,l2,1.0,2.0,0.0\nb,l2,2.0,1.0,1.0\nc,l2,1.0,1.5,1.0\n\
         a,ssim,3.0,1.0,0.0\nb,ssim,1.0,3.0,1.0\nc,ssim,2.0,1.0,1.0\n",
    )
    .unwrap();
    let out = tmp.path().join("out");
    let o = simfuse(&["bapps", "--table", p(&table), "-o", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = read_json(&out.join("bapps_report.json"));
    assert_eq!(report["tables"][0]["distortion"], "blur");
    let scores: Vec<f64> = report["tables"][0]["metrics"].as_array().unwrap().iter().map(|m| m["score"].as_f64().unwrap()).collect();
    assert!((scores[0] - 2.0 / 3.0).abs() < 1e-12 && (scores[1] - 1.0 / 3.0).abs() < 1e-12, "{scores:?}");
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(simfuse(&[]).status.code(), Some(2));
    assert_eq!(simfuse(&["search", "--k", "0", "-g", "x", "-o", "y"]).status.code(), Some(2));
    assert_eq!(simfuse(&["search", "--mode", "fancy", "-g", "x", "-o", "y"]).status.code(), Some(2));
}
