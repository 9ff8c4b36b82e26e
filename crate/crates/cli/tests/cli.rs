use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn prunekit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prunekit"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn prunekit")
}

fn stdout_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("{e}: {text}"))
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_corpus(dir: &Path, counts: &[u64]) -> PathBuf {
    let path = dir.join("corpus.jsonl");
    let body: String = counts
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{{\"path\":\"src/f{i}.py\",\"token_count\":{c}}}\n"))
        .collect();
    std::fs::write(&path, body).unwrap();
    path
}

fn ingest_fixture(dir: &Path, counts: &[u64]) {
    write_corpus(dir, counts);
    let out = prunekit(dir, &["ingest", "--input", "corpus.jsonl", "--out", "m.jsonl"]);
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn prune_length_top_on_fixture() {
    let dir = tempfile::tempdir().unwrap();
    ingest_fixture(dir.path(), &[10, 10, 20, 60]);
    let out = prunekit(
        dir.path(),
        &[
            "--json",
            "prune",
            "--manifest",
            "m.jsonl",
            "--strategy",
            "length_top_tokens",
            "--tokens-frac",
            "0.5",
            "--out",
            "r.json",
            "--emit-kept-manifest",
            "kept.jsonl",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout_json(&out)["fraction_tokens"], 0.6);

    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(report["fraction_tokens"], 0.6);
    assert_eq!(report["pruned_ids"], serde_json::json!([3]));
    assert_eq!(
        std::fs::read_to_string(dir.path().join("r.pruned_ids.txt")).unwrap(),
        "3\n"
    );
    let kept = std::fs::read_to_string(dir.path().join("kept.jsonl")).unwrap();
    assert_eq!(kept.lines().count(), 4);
}

#[test]
fn stats_on_empty_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("corpus.jsonl"), "").unwrap();
    let out = prunekit(
        dir.path(),
        &["ingest", "--input", "corpus.jsonl", "--out", "m.jsonl"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let out = prunekit(dir.path(), &["stats", "--manifest", "m.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("empty manifest"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn stats_writes_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    ingest_fixture(dir.path(), &[10, 10, 20, 60]);
    let out = prunekit(
        dir.path(),
        &["--json", "stats", "--manifest", "m.jsonl", "--out-dir", "plots"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let cdf = std::fs::read_to_string(dir.path().join("plots/cdf.csv")).unwrap();
    assert_eq!(
        cdf.lines().next(),
        Some("doc_rank_fraction,cumulative_token_fraction")
    );
    let hist: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("plots/histogram.json")).unwrap())
            .unwrap();
    assert_eq!(hist[0]["docs"], 4);
}

#[test]
fn flag_misuse_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    ingest_fixture(dir.path(), &[10, 10, 20, 60]);
    let cases: &[&[&str]] = &[
        &[
            "prune",
            "--manifest",
            "m.jsonl",
            "--strategy",
            "random_docs",
            "--tokens-frac",
            "0.2",
            "--out",
            "r.json",
        ],
        &[
            "prune",
            "--manifest",
            "m.jsonl",
            "--strategy",
            "length_top_tokens",
            "--docs-frac",
            "0.2",
            "--out",
            "r.json",
        ],
        &[
            "prune",
            "--manifest",
            "m.jsonl",
            "--strategy",
            "length_top_tokens",
            "--tokens-frac",
            "0.2",
            "--docs-frac",
            "0.2",
            "--out",
            "r.json",
        ],
        &[
            "prune",
            "--manifest",
            "m.jsonl",
            "--strategy",
            "scip_combined",
            "--out",
            "r.json",
        ],
        &[
            "prune",
            "--manifest",
            "m.jsonl",
            "--strategy",
            "bogus",
            "--out",
            "r.json",
        ],
        &[
            "prune",
            "--manifest",
            "m.jsonl",
            "--strategy",
            "length_top_tokens",
            "--tokens-frac",
            "1.5",
            "--out",
            "r.json",
        ],
        &["stats", "--manifest", "m.jsonl", "--no-such-flag"],
    ];
    for args in cases {
        let out = prunekit(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", stderr(&out));
        assert_eq!(stderr(&out).trim_end().lines().count(), 1, "{args:?}");
    }
    assert!(!dir.path().join("r.json").exists());
}

#[test]
fn json_errors_are_parsable() {
    let dir = tempfile::tempdir().unwrap();
    let out = prunekit(dir.path(), &["--json", "stats", "--manifest", "missing.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    let v: Value = serde_json::from_str(stderr(&out).trim()).unwrap();
    assert_eq!(v["error"]["kind"], "io");
}

#[test]
fn version_lists_formats() {
    let dir = tempfile::tempdir().unwrap();
    let out = prunekit(dir.path(), &["--version"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(
        text.contains("manifest v1") && text.contains("packing v1"),
        "{text}"
    );
}

#[test]
fn pack_and_bin_losses() {
    let dir = tempfile::tempdir().unwrap();
    ingest_fixture(dir.path(), &[10_000, 100]);
    let out = prunekit(
        dir.path(),
        &["--json", "pack", "--manifest", "m.jsonl", "--out", "layout.jsonl"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout_json(&out)["chunks"], 3);

    let mut bytes = Vec::new();
    for i in 0..10_100 {
        let loss: f32 = if i < 10_000 { 0.0 } else { 2f32.ln() };
        bytes.extend_from_slice(&loss.to_le_bytes());
    }
    std::fs::write(dir.path().join("losses.f32"), bytes).unwrap();
    let out = prunekit(
        dir.path(),
        &[
            "--json",
            "bin-losses",
            "--manifest",
            "m.jsonl",
            "--layout",
            "layout.jsonl",
            "--losses",
            "losses.f32",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let bins = stdout_json(&out)["bins"].as_array().unwrap().clone();
    assert_eq!(bins.len(), 2);
    assert_eq!(bins[0]["lower"], 64);
    assert!((bins[0]["perplexity"].as_f64().unwrap() - 2.0).abs() < 1e-6);
    assert_eq!(bins[1]["lower"], 4096);
    assert_eq!(bins[1]["tokens"], 10_000);
    assert_eq!(bins[1]["perplexity"], 1.0);
}

#[test]
fn bootstrap_and_report() {
    let dir = tempfile::tempdir().unwrap();
    ingest_fixture(dir.path(), &(1..=21).collect::<Vec<u64>>());
    let out = prunekit(
        dir.path(),
        &[
            "--json",
            "bootstrap",
            "--manifest",
            "m.jsonl",
            "--out-dir",
            "subsets",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let subsets = stdout_json(&out)["subsets"].as_array().unwrap().clone();
    assert_eq!(subsets.len(), 3);
    assert!(subsets.iter().all(|s| s["train_docs"] == 10));

    for (name, strategy, flag) in [
        ("a", "length_top_tokens", "--tokens-frac"),
        ("b", "random_docs", "--docs-frac"),
    ] {
        let out = prunekit(
            dir.path(),
            &[
                "prune",
                "--manifest",
                "m.jsonl",
                "--strategy",
                strategy,
                flag,
                "0.2",
                "--out",
                &format!("{name}.json"),
            ],
        );
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let out = prunekit(
        dir.path(),
        &["report", "--reports", "a.json", "b.json", "--out-dir", "table"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let md = std::fs::read_to_string(dir.path().join("table/accounting.md")).unwrap();
    assert!(md.contains("Documents pruned") && md.contains("Tokens pruned"));

    let out = prunekit(
        dir.path(),
        &[
            "prune",
            "--manifest",
            "subsets/subset_0.jsonl",
            "--strategy",
            "random_docs",
            "--docs-frac",
            "0.2",
            "--out",
            "c.json",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let out = prunekit(
        dir.path(),
        &["report", "--reports", "a.json", "c.json", "--out-dir", "mixed"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("mixed_manifests"));
}

fn pipeline_fixture(dir: &Path, specs: &str, with_embeddings: bool) -> PathBuf {
    let out = prunekit(
        dir,
        &[
            "synth",
            "--n-docs",
            "600",
            "--out",
            "corpus.jsonl",
            "--embeddings",
            "emb.embd",
            "--dim",
            "8",
            "--bins",
            "0,64",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let emb = if with_embeddings {
        r#""embeddings": "emb.embd","#
    } else {
        ""
    };
    let cfg = format!(
        r#"{{"corpus": "corpus.jsonl", {emb} "clustering": {{"k": 8}}, "prune_specs": {specs}, "output_dir": "out"}}"#
    );
    let path = dir.join("cfg.json");
    std::fs::write(&path, cfg).unwrap();
    path
}

const GRID_SPECS: &str =
    r#"[{"strategy": "none"}, {"strategy": "length_top_tokens", "P": 0.5}, {"strategy": "scip_combined"}]"#;

#[test]
fn run_produces_grid_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    pipeline_fixture(dir.path(), GRID_SPECS, true);
    let out = prunekit(dir.path(), &["--json", "run", "--config", "cfg.json"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout_json(&out)["reports_written"], 9);
    let reports: Vec<_> = std::fs::read_dir(dir.path().join("out/reports/subset_1"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
        .collect();
    assert_eq!(reports.len(), 3);
    let agg: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/aggregate.json")).unwrap())
            .unwrap();
    assert_eq!(agg.as_array().unwrap().len(), 3);
    assert_eq!(agg[2]["fraction_docs"]["n"], 3);

    let first = std::fs::read(dir.path().join("out/reports/subset_2/02_scip_combined.json")).unwrap();
    let first_md = std::fs::read(dir.path().join("out/accounting.md")).unwrap();
    let out = prunekit(dir.path(), &["run", "--config", "cfg.json"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(
        std::fs::read(dir.path().join("out/reports/subset_2/02_scip_combined.json")).unwrap(),
        first
    );
    assert_eq!(
        std::fs::read(dir.path().join("out/accounting.md")).unwrap(),
        first_md
    );
}

#[test]
fn run_rejects_missing_embeddings_before_work() {
    let dir = tempfile::tempdir().unwrap();
    pipeline_fixture(dir.path(), GRID_SPECS, false);
    let out = prunekit(dir.path(), &["run", "--config", "cfg.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("requires embeddings"), "{}", stderr(&out));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn cluster_and_audit() {
    let dir = tempfile::tempdir().unwrap();
    pipeline_fixture(dir.path(), GRID_SPECS, true);
    let out = prunekit(
        dir.path(),
        &["ingest", "--input", "corpus.jsonl", "--out", "m.jsonl"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let out = prunekit(
        dir.path(),
        &[
            "--json",
            "cluster",
            "--manifest",
            "m.jsonl",
            "--embeddings",
            "emb.embd",
            "--k",
            "6",
            "--out",
            "clu",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout_json(&out)["k"], 6);
    let out = prunekit(
        dir.path(),
        &[
            "--json",
            "audit",
            "--manifest",
            "m.jsonl",
            "--clustering",
            "clu",
            "--out-dir",
            "audit",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let profile = std::fs::read_to_string(dir.path().join("audit/distance_length.csv")).unwrap();
    assert_eq!(profile.lines().next(), Some("doc_id,distance,token_count"));
    assert_eq!(profile.lines().count(), 601);

    let out = prunekit(
        dir.path(),
        &[
            "--json",
            "prune",
            "--manifest",
            "m.jsonl",
            "--strategy",
            "semdedup",
            "--epsilon",
            "0.01",
            "--clustering",
            "clu",
            "--embeddings",
            "emb.embd",
            "--out",
            "sd.json",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let leftovers: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with(".tmp"))
        .collect();
    assert!(leftovers.is_empty());
}
