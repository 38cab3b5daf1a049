use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn ugss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ugss"))
        .args(args)
        .env_remove("UGSS_CACHE_DIR")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_json(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_vec_pretty(value).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn phantom(count: usize) -> Value {
    let all = json!({ "bowel_bag": 1.0, "bladder": 1.0, "hips": 1.0, "rectum": 1.0 });
    json!({ "count": count, "phantom": { "shape": [24, 16, 16], "noise_sigma": 5.0, "availability_probs": all } })
}

fn tiny_train() -> Value {
    json!({
        "epochs": 1,
        "patch_depth": 8,
        "window_overlap": 4,
        "model": { "k": 2, "levels": 1, "base_channels": 2 }
    })
}

/// Every file under `dir` except provenance records, keyed by relative path.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if p.file_name().unwrap() != "run.json" {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

#[test]
fn generate_writes_manifest_and_provenance() {
    let tmp = TempDir::new().unwrap();
    let config = write_json(tmp.path(), "gen.json", &phantom(3));
    let out = tmp.path().join("data");
    let res = ugss(&["generate", "--config", s(&config), "--out", s(&out)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert!(out.join("manifest.json").is_file());
    let run: Value = serde_json::from_slice(&fs::read(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "generate");
    assert_eq!(run["status"], "ok");
    assert_eq!(run["config_sha256"].as_str().unwrap().len(), 64);
    assert!(run["wall_time_s"].as_f64().unwrap() >= 0.0);
    assert!(run["versions"]["ugss"].is_string());
}

#[test]
fn invalid_probability_exits_2_naming_the_field() {
    let tmp = TempDir::new().unwrap();
    let config = write_json(
        tmp.path(),
        "gen.json",
        &json!({ "count": 2, "phantom": { "shape": [24, 16, 16], "chest_prob": 1.5 } }),
    );
    let res = ugss(&["generate", "--config", s(&config), "--out", s(&tmp.path().join("d"))]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("chest_prob"), "{}", stderr(&res));
}

#[test]
fn unknown_and_missing_configs_exit_2() {
    let tmp = TempDir::new().unwrap();
    let config = write_json(tmp.path(), "gen.json", &json!({ "count": 2, "colour": "red" }));
    let res = ugss(&["generate", "--config", s(&config), "--out", s(&tmp.path().join("d"))]);
    assert_eq!(code(&res), 2);
    let res = ugss(&["generate", "--config", "/nonexistent/gen.json", "--out", s(&tmp.path().join("d"))]);
    assert_eq!(code(&res), 2);
    let res = ugss(&["generate"]);
    assert_eq!(code(&res), 2);
}

#[test]
fn same_seed_gives_identical_datasets() {
    let tmp = TempDir::new().unwrap();
    let config = write_json(tmp.path(), "gen.json", &phantom(3));
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    for (dir, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        let res = ugss(&["generate", "--config", s(&config), "--seed", seed, "--out", s(dir)]);
        assert_eq!(code(&res), 0, "{}", stderr(&res));
    }
    assert_eq!(snapshot(&a), snapshot(&b));
    assert_ne!(snapshot(&a), snapshot(&c));
}

#[test]
fn clean_with_infinite_thresholds_modifies_nothing() {
    let tmp = TempDir::new().unwrap();
    let gen = write_json(tmp.path(), "gen.json", &phantom(4));
    let data = tmp.path().join("data");
    assert_eq!(code(&ugss(&["generate", "--config", s(&gen), "--out", s(&data)])), 0);
    let thresholds = write_json(
        tmp.path(),
        "t.json",
        &json!({ "crop_above_mm": null, "delete_bowel_above_mm": null, "discard_below_mm": null }),
    );
    let out = tmp.path().join("clean");
    let res = ugss(&[
        "clean",
        "--manifest",
        s(&data.join("manifest.json")),
        "--config",
        s(&thresholds),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let report: Value = serde_json::from_slice(&fs::read(out.join("cleaning_report.json")).unwrap()).unwrap();
    assert_eq!(report["modified"], 0);
    assert_eq!(report["kept"], 4);
    assert_eq!(report["discarded"], 0);

    let records = ugss::data::DatasetManifest::load(&data.join("manifest.json"))
        .unwrap()
        .load_all()
        .unwrap();
    let (scan, bowel) = ugss::autoclean::compute_extent_histograms(&records, 2.5).unwrap();
    for (name, hist) in [("hist_scan_extent_before.csv", &scan), ("hist_bowel_extent_before.csv", &bowel)] {
        let text = fs::read_to_string(out.join(name)).unwrap();
        assert_eq!(text.lines().count() - 1, hist.counts.len(), "{name}");
    }
}

#[test]
fn clean_without_thresholds_exits_2() {
    let tmp = TempDir::new().unwrap();
    let res = ugss(&["clean", "--manifest", "m.json", "--out", s(tmp.path())]);
    assert_eq!(code(&res), 2);
}

#[test]
fn pipeline_commands_chain() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path();
    let gen_full = write_json(p, "full.json", &phantom(3));
    let gen_partial = write_json(
        p,
        "partial.json",
        &json!({ "count": 3, "start_index": 100, "phantom": { "shape": [24, 16, 16], "seed": 1 } }),
    );
    let train = write_json(p, "train.json", &tiny_train());
    let run = |args: &[&str]| {
        let res = ugss(args);
        assert_eq!(code(&res), 0, "{args:?}: {}", stderr(&res));
    };
    run(&["generate", "--config", s(&gen_full), "--out", s(&p.join("raw_full"))]);
    run(&["generate", "--config", s(&gen_partial), "--out", s(&p.join("raw_partial"))]);
    run(&["preprocess", "--manifest", s(&p.join("raw_full/manifest.json")), "--out", s(&p.join("full"))]);
    run(&["preprocess", "--manifest", s(&p.join("raw_partial/manifest.json")), "--out", s(&p.join("partial"))]);
    run(&[
        "train-teacher",
        "--manifest",
        s(&p.join("full/manifest.json")),
        "--validation",
        s(&p.join("full/manifest.json")),
        "--config",
        s(&train),
        "--out",
        s(&p.join("teacher")),
    ]);
    assert!(p.join("teacher/best.ckpt").is_file());
    assert!(p.join("teacher/curve.csv").is_file());
    run(&[
        "impute",
        "--manifest",
        s(&p.join("full/manifest.json")),
        "--manifest",
        s(&p.join("partial/manifest.json")),
        "--checkpoint",
        s(&p.join("teacher/best.ckpt")),
        "--config",
        s(&train),
        "--out",
        s(&p.join("imputed")),
    ]);
    let report: Value = serde_json::from_slice(&fs::read(p.join("imputed/impute_report.json")).unwrap()).unwrap();
    assert_eq!(report["records"], 6);
    let merged = ugss::data::DatasetManifest::load(&p.join("imputed/manifest.json")).unwrap();
    assert!(merged.records.iter().any(|e| e.id.ends_with("0100")), "{:?}", merged.records);
    for record in merged.load_all().unwrap() {
        assert!(record.labels.is_fully_annotated());
    }

    // the same pool twice collides on ids
    let res = ugss(&[
        "impute",
        "--manifest",
        s(&p.join("full/manifest.json")),
        "--manifest",
        s(&p.join("full/manifest.json")),
        "--checkpoint",
        s(&p.join("teacher/best.ckpt")),
        "--out",
        s(&p.join("dup")),
    ]);
    assert_eq!(code(&res), 2, "{}", stderr(&res));
    run(&[
        "train-student",
        "--manifest",
        s(&p.join("imputed/manifest.json")),
        "--config",
        s(&train),
        "--out",
        s(&p.join("student")),
    ]);
    run(&[
        "evaluate",
        "--manifest",
        s(&p.join("full/manifest.json")),
        "--checkpoint",
        s(&p.join("student/best.ckpt")),
        "--config",
        s(&train),
        "--out",
        s(&p.join("eval")),
    ]);
    let metrics = fs::read_to_string(p.join("eval/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 3 * 4);
    assert!(metrics.starts_with("scan_id,organ,dice,surface_dice,hd95"));

    // partially annotated records are rejected by the teacher
    let res = ugss(&[
        "train-teacher",
        "--manifest",
        s(&p.join("partial/manifest.json")),
        "--config",
        s(&train),
        "--out",
        s(&p.join("bad")),
    ]);
    assert_eq!(code(&res), 1);
    assert!(stderr(&res).contains("not fully annotated"), "{}", stderr(&res));
}

fn tiny_experiment(arms: &[&str]) -> Value {
    json!({
        "seed": 3,
        "phantom": { "shape": [24, 16, 16] },
        "n_full": 4,
        "n_partial": 2,
        "n_test": 2,
        "folds": 2,
        "run_folds": 1,
        "teacher": tiny_train(),
        "student": tiny_train(),
        "arms": arms,
    })
}

#[test]
fn ablation_single_arm_is_reproducible_and_plots() {
    let tmp = TempDir::new().unwrap();
    let config = write_json(tmp.path(), "exp.json", &tiny_experiment(&["baseline_clean"]));
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let res = ugss(&["ablation", "--config", s(&config), "--out", s(dir)]);
        assert_eq!(code(&res), 0, "{}", stderr(&res));
    }
    let table = fs::read_to_string(a.join("table1.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);
    assert!(table.lines().nth(1).unwrap().starts_with("baseline_clean,ok,"));
    for name in ["appendix_dice.csv", "appendix_sd.csv", "appendix_hd.csv", "wilcoxon.csv", "summary.json"] {
        assert!(a.join(name).is_file(), "{name}");
    }
    assert!(a.join("cache/baseline_clean_fold0.ckpt").is_file());
    assert_eq!(snapshot(&a), snapshot(&b));

    let res = ugss(&["plot", "--results", s(&a)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    for metric in ["dice", "surface_dice", "hd95"] {
        let svg = fs::read_to_string(a.join("plots").join(format!("{metric}.svg"))).unwrap();
        roxmltree::Document::parse(&svg).expect("valid xml");
    }
    let hist = fs::read_to_string(a.join("plots/hist_bowel_extent_before.svg")).unwrap();
    roxmltree::Document::parse(&hist).expect("valid xml");
}

#[test]
fn ablation_respects_cache_dir_and_parallel_folds() {
    let tmp = TempDir::new().unwrap();
    let mut exp = tiny_experiment(&["baseline_full"]);
    exp["run_folds"] = Value::Null;
    let config = write_json(tmp.path(), "exp.json", &exp);
    let cache = tmp.path().join("cache");
    let serial = tmp.path().join("serial");
    let parallel = tmp.path().join("parallel");
    let res = ugss(&["ablation", "--config", s(&config), "--out", s(&serial)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let res = Command::new(env!("CARGO_BIN_EXE_ugss"))
        .args(["ablation", "--config", s(&config), "--parallel-folds", "2", "--out", s(&parallel)])
        .env("UGSS_CACHE_DIR", &cache)
        .output()
        .unwrap();
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert!(cache.join("baseline_full_fold1.ckpt").is_file());
    assert!(!parallel.join("cache").exists());
    let tables = |d: &Path| {
        snapshot(d)
            .into_iter()
            .filter(|(p, _)| p.extension().is_some_and(|e| e == "csv"))
            .collect::<Vec<_>>()
    };
    assert_eq!(tables(&serial), tables(&parallel));
}

#[test]
fn ablation_rejects_unknown_arm() {
    let tmp = TempDir::new().unwrap();
    let config = write_json(tmp.path(), "exp.json", &tiny_experiment(&["oracle"]));
    let res = ugss(&["ablation", "--config", s(&config), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("oracle"));
}

#[test]
fn plot_of_empty_results_exits_2() {
    let tmp = TempDir::new().unwrap();
    let res = ugss(&["plot", "--results", s(tmp.path())]);
    assert_eq!(code(&res), 2);
    let res = ugss(&["plot", "--results", s(&tmp.path().join("missing"))]);
    assert_eq!(code(&res), 2);
}
