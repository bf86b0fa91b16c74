use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use dcgnet::dataset::Dataset;
use dcgnet::graph::build_ppmi;

const SMALL_SPEC: &str = r#"
values_per_concept = [2, 3, 2]
num_patches = 6
patch_dim = 8
samples = 200
"#;

const TINY_CONFIG: &str = r#"
[model]
text_dim = 16
embed_dim = 16
heads = 2
top_k = 3

[train]
epochs = 1
batch_size = 16
"#;

fn dcgnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcgnet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

/// The single machine-readable error line of a failed command.
fn error_line(o: &Output) -> serde_json::Value {
    let err = stderr(o);
    let last = err.lines().last().expect("error line");
    serde_json::from_str(last).unwrap_or_else(|e| panic!("not JSON ({e}): {last}"))
}

/// Writes the small spec and tiny config, synthesizes a dataset and trains
/// one checkpoint.
fn setup(dir: &Path) {
    fs::write(dir.join("spec.toml"), SMALL_SPEC).unwrap();
    fs::write(dir.join("run.toml"), TINY_CONFIG).unwrap();
    let o = dcgnet(&["synth", "--spec", "spec.toml", "--out", "data"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = dcgnet(&["train", "--data", "data", "--config", "run.toml", "--out", "run"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn synth_writes_a_dataset_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.toml"), SMALL_SPEC).unwrap();
    for out in ["a", "b"] {
        let o = dcgnet(&["synth", "--spec", "spec.toml", "--out", out, "--seed", "7"], d);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("bayes accuracy"));
    }
    for file in ["manifest", "train.records", "val.records", "test.records"] {
        let a = fs::read(d.join("a").join(file)).unwrap();
        assert_eq!(a, fs::read(d.join("b").join(file)).unwrap(), "{file}");
    }
    let names: BTreeSet<String> = fs::read_dir(d.join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(names.len(), 4, "{names:?}");
    let data = Dataset::read(&d.join("a")).unwrap();
    assert_eq!(data.manifest.generator.unwrap().seed, 7);
}

#[test]
fn missing_inputs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = dcgnet(&["synth", "--spec", "missing.toml", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let line = error_line(&o);
    assert_eq!(line["error"], "io");
    assert!(line["message"].as_str().unwrap().contains("missing.toml"));
    assert!(!dir.path().join("x").exists());

    let o = dcgnet(&["eval", "--checkpoint", "none.ckpt", "--data", "nowhere"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = dcgnet(&["train", "--bogus"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["error"], "usage");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.toml"), SMALL_SPEC).unwrap();
    assert!(dcgnet(&["synth", "--spec", "spec.toml", "--out", "data"], d).status.success());
    fs::write(d.join("bad.toml"), "[train]\nlearning_rat = 0.1\n").unwrap();
    let o = dcgnet(&["train", "--data", "data", "--config", "bad.toml", "--out", "run"], d);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["error"], "config");
    assert!(!d.join("run").exists());

    fs::write(d.join("bad_spec.toml"), "sample = 10\n").unwrap();
    let o = dcgnet(&["synth", "--spec", "bad_spec.toml", "--out", "x"], d);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn smoke_training_eval_and_explain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let start = Instant::now();
    setup(d);
    assert!(start.elapsed().as_secs() < 30);
    let log = fs::read_to_string(d.join("run/train.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(records.iter().any(|r| r["kind"] == "epoch"));
    let step = records.iter().find(|r| r["kind"] == "step").unwrap();
    for key in ["lr", "align", "concept", "cons", "diag", "total"] {
        assert!(step[key].is_number(), "{key}");
    }

    let eval = |fmt: &str| dcgnet(&["eval", "--checkpoint", "run/model.ckpt", "--data", "data", "--format", fmt], d);
    let a = eval("pretty");
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&eval("pretty")));
    let out = stdout(&a);
    let names: Vec<&str> = out.lines().map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(names, ["diag_acc", "diag_f1", "concept_acc", "concept_f1"]);
    let rec: serde_json::Value = serde_json::from_str(stdout(&eval("records")).trim()).unwrap();
    assert!(rec["concept_f1"].is_number());

    let data = Dataset::read(&d.join("data")).unwrap();
    let id = data.test[0].id.to_string();
    let ex = |fmt: &str| dcgnet(&["explain", "--checkpoint", "run/model.ckpt", "--data", "data", "--ids", &id, "--top-n", "2", "--format", fmt], d);
    let o = ex("records");
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), stdout(&ex("records")));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1);
    let report: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(report["concepts"].as_array().unwrap().len(), 3);
    assert_eq!(report["contributions"].as_array().unwrap().len(), 2);
    assert_eq!(report["neighbourhoods"].as_array().unwrap().len(), 2);
    assert!(stdout(&ex("pretty")).contains("contributions"));

    // Panel C edges must appear in the adjacency dump with the same weight.
    let o = dcgnet(&["graph", "--checkpoint", "run/model.ckpt", "--out", "graph"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let dump = fs::read_to_string(d.join("graph/adjacency.triplets")).unwrap();
    let edges: BTreeSet<(u64, u64, String)> = dump
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split(' ').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].to_string())
        })
        .collect();
    let mut checked = 0;
    for n in report["neighbourhoods"].as_array().unwrap() {
        for node in n["nodes"].as_array().unwrap() {
            let i = node["node"].as_u64().unwrap();
            for e in node["edges"].as_array().unwrap() {
                let w = e["weight"].as_f64().unwrap();
                assert!(edges.contains(&(i, e["target"].as_u64().unwrap(), format!("{w}"))), "{i} -> {e}");
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
    // Sparsity bound of the dump.
    let mut per_row = std::collections::BTreeMap::new();
    for (i, _, _) in &edges {
        *per_row.entry(*i).or_insert(0) += 1;
    }
    assert!(per_row.values().all(|&c| c <= 3), "{per_row:?}");

    let o = dcgnet(&["explain", "--checkpoint", "run/model.ckpt", "--data", "data", "--ids", "999999"], d);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn multi_seed_training_reports_mean_and_std() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let o = dcgnet(&["train", "--data", "data", "--config", "run.toml", "--out", "sweep", "--seeds", "1,2,3"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("mean±std"));
    for s in 1..=3 {
        assert!(d.join(format!("sweep/seed-{s}/model.ckpt")).exists());
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("sweep/summary.json")).unwrap()).unwrap();
    let runs = summary["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 3);
    let accs: Vec<f64> = runs.iter().map(|r| r["test"]["diag_acc"].as_f64().unwrap()).collect();
    let mean = accs.iter().sum::<f64>() / 3.0;
    let std = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    assert!((summary["aggregate"]["diag_acc"]["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert!((summary["aggregate"]["diag_acc"]["std"].as_f64().unwrap() - std).abs() < 1e-12);
}

#[test]
fn divergence_keeps_a_checkpoint_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.toml"), SMALL_SPEC).unwrap();
    assert!(dcgnet(&["synth", "--spec", "spec.toml", "--out", "data"], d).status.success());
    fs::write(d.join("hot.toml"), format!("{TINY_CONFIG}learning_rate = 1e3\nwarmup_fraction = 0.0\n")).unwrap();
    let o = dcgnet(&["train", "--data", "data", "--config", "hot.toml", "--out", "run"], d);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_line(&o)["error"], "diverged");
    assert!(d.join("run/model.ckpt").exists());
    let log = fs::read_to_string(d.join("run/train.jsonl")).unwrap();
    assert!(log.lines().last().unwrap().contains("\"kind\":\"abort\""));
    let o = dcgnet(&["eval", "--checkpoint", "run/model.ckpt", "--data", "data"], d);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn graph_dump_from_dataset_has_prior_and_mask_only() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.toml"), SMALL_SPEC).unwrap();
    assert!(dcgnet(&["synth", "--spec", "spec.toml", "--out", "data"], d).status.success());
    let o = dcgnet(&["graph", "--data", "data", "--out", "g"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("g/prior.triplets").exists() && d.join("g/mask.triplets").exists());
    assert!(!d.join("g/adjacency.triplets").exists());
    let legend = fs::read_to_string(d.join("g/nodes.tsv")).unwrap();
    assert_eq!(legend.lines().count(), 7);
    // Mask: all ordered cross-concept pairs of a 2+3+2 dictionary.
    let mask = fs::read_to_string(d.join("g/mask.triplets")).unwrap();
    assert_eq!(mask.lines().count(), 7 * 7 - (4 + 9 + 4));
}

#[test]
fn fully_correlated_data_puts_aligned_pairs_on_top() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = r#"
num_classes = 2
values_per_concept = [3, 3, 3]
tables = [[[0.3, 0.3, 0.4], [0.3, 0.3, 0.4], [0.3, 0.3, 0.4]], [[0.5, 0.2, 0.3], [0.5, 0.2, 0.3], [0.5, 0.2, 0.3]]]
correlation = 1.0
num_patches = 6
patch_dim = 8
samples = 400
"#;
    fs::write(d.join("spec.toml"), spec).unwrap();
    assert!(dcgnet(&["synth", "--spec", "spec.toml", "--out", "data"], d).status.success());
    assert!(dcgnet(&["graph", "--data", "data", "--out", "g"], d).status.success());
    let mut entries: Vec<(usize, usize, f64)> = fs::read_to_string(d.join("g/prior.triplets"))
        .unwrap()
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split(' ').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    entries.sort_by(|a, b| b.2.total_cmp(&a.2));
    // Oracle: the same prior recomputed in process from the written labels.
    let data = Dataset::read(&d.join("data")).unwrap();
    let prior = build_ppmi(&data.train_concept_labels(), data.dictionary(), 1.0).unwrap();
    let aligned = 3 * 2 * 3;
    for &(i, j, w) in &entries[..aligned] {
        assert_eq!(i % 3, j % 3, "edge {i}->{j} is not between aligned values");
        assert_eq!(w, prior.matrix.at(i, j));
    }
    assert!(entries[aligned..].iter().all(|e| e.2 < entries[aligned - 1].2));
}

#[test]
fn gradcheck_command() {
    let dir = tempfile::tempdir().unwrap();
    let o = dcgnet(&["gradcheck"], dir.path());
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().all(|l| l.starts_with("ok")));
    assert!(out.lines().any(|l| l.contains("model")));

    let o = dcgnet(&["gradcheck", "--op", "softmax"], dir.path());
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 1);

    let o = dcgnet(&["gradcheck", "--op", "softmax", "--corrupt"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL softmax") && stdout(&o).contains("input0[0]"));
    assert!(error_line(&o)["message"].as_str().unwrap().contains("input0[0]"));

    let o = dcgnet(&["gradcheck", "--op", "nonsense"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}
