use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn stcausal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stcausal"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    /// Small synthetic corpus plus a config pointing at it.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace { dir };
        let cfg = format!(
            r#"seed = 5

[paths]
dataset = {data:?}
embeddings = {emb:?}
output = {out:?}

[synth]
n_tweets = 160
dim = 8
seed = 3

[features]
dim = 8

[model]
d_model = 8
heads = 2
max_epochs = 3
"#,
            data = ws.path("data.jsonl").display().to_string(),
            emb = ws.path("emb.jsonl").display().to_string(),
            out = ws.path("runs").display().to_string(),
        );
        std::fs::write(ws.path("run.toml"), cfg).unwrap();
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    fn run(&self, args: &[&str]) -> Output {
        let o = stcausal(args);
        assert!(o.status.success(), "{args:?} failed: {}", text(&o));
        o
    }

    fn synth(&self) {
        self.run(&["synth", "-c", &self.arg("run.toml")]);
    }

    /// Trains and returns the run directory.
    fn train(&self) -> PathBuf {
        let o = self.run(&["--threads", "1", "train", "-c", &self.arg("run.toml")]);
        let out = String::from_utf8_lossy(&o.stdout).to_string();
        let line = out.lines().find(|l| l.starts_with("run directory: ")).expect("run directory line");
        PathBuf::from(line.trim_start_matches("run directory: "))
    }
}

fn read_jsonl(p: &Path) -> Vec<Value> {
    std::fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn ingest_reports_and_sets_exit_codes() {
    let ws = Workspace::new();
    ws.synth();
    let o = stcausal(&["ingest", &ws.arg("data.jsonl")]);
    assert_eq!(o.status.code(), Some(0));
    assert!(text(&o).contains("records: 160"));

    let mut lines: Vec<String> = std::fs::read_to_string(ws.path("data.jsonl"))
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect();
    lines[2] = lines[2].replace("\"mask\":[\"O\"", "\"mask\":[");
    std::fs::write(ws.path("bad.jsonl"), lines.join("\n")).unwrap();
    let o = stcausal(&["ingest", &ws.arg("bad.jsonl")]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    assert!(text(&o).contains("line 3"), "{}", text(&o));

    std::fs::write(ws.path("empty.jsonl"), "").unwrap();
    let o = stcausal(&["ingest", &ws.arg("empty.jsonl")]);
    assert_eq!(o.status.code(), Some(0));
    assert!(text(&o).contains("records: 0"));
}

#[test]
fn synth_is_deterministic_and_sized() {
    let ws = Workspace::new();
    ws.synth();
    let first = std::fs::read(ws.path("data.jsonl")).unwrap();
    let emb = std::fs::read(ws.path("emb.jsonl")).unwrap();
    ws.synth();
    assert_eq!(first, std::fs::read(ws.path("data.jsonl")).unwrap());
    assert_eq!(emb, std::fs::read(ws.path("emb.jsonl")).unwrap());
    assert_eq!(read_jsonl(&ws.path("data.jsonl")).len(), 160);
}

#[test]
fn train_writes_artifacts_and_reruns_identically() {
    let ws = Workspace::new();
    ws.synth();
    let dir = ws.train();
    for f in ["config.toml", "checkpoint.json", "curves.csv", "metrics.json"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    let name = dir.file_name().unwrap().to_string_lossy().to_string();
    assert!(name.starts_with("run-") && name.ends_with("-seed5"), "{name}");
    let metrics = std::fs::read(dir.join("metrics.json")).unwrap();
    let curves = std::fs::read(dir.join("curves.csv")).unwrap();

    // The snapshot alone reproduces the run.
    let snapshot = ws.path("snapshot.toml");
    std::fs::copy(dir.join("config.toml"), &snapshot).unwrap();
    let o = ws.run(&["train", "-c", &snapshot.display().to_string()]);
    assert!(text(&o).contains(&name));
    assert_eq!(metrics, std::fs::read(dir.join("metrics.json")).unwrap());
    assert_eq!(curves, std::fs::read(dir.join("curves.csv")).unwrap());

    let m: Value = serde_json::from_slice(&metrics).unwrap();
    for k in ["accuracy", "precision", "recall", "f1", "auc", "counts"] {
        assert!(m.get(k).is_some(), "metrics lack {k}");
    }
}

#[test]
fn eval_and_predict_from_checkpoint() {
    let ws = Workspace::new();
    ws.synth();
    let dir = ws.train();
    let ckpt = dir.join("checkpoint.json").display().to_string();

    let a = ws.run(&["eval", "--checkpoint", &ckpt]);
    let b = ws.run(&["eval", "--checkpoint", &ckpt, "--out", &ws.arg("eval.json")]);
    assert_eq!(a.stdout, b.stdout);
    let stored: Value = serde_json::from_slice(&std::fs::read(dir.join("metrics.json")).unwrap()).unwrap();
    let fresh: Value = serde_json::from_str(&std::fs::read_to_string(ws.path("eval.json")).unwrap()).unwrap();
    assert_eq!(stored, fresh);

    ws.run(&["predict", "--checkpoint", &ckpt, "--delta", "0.5", "--out", &ws.arg("p50.jsonl")]);
    ws.run(&["predict", "--checkpoint", &ckpt, "--delta", "0.9", "--out", &ws.arg("p90.jsonl")]);
    let p50 = read_jsonl(&ws.path("p50.jsonl"));
    let p90 = read_jsonl(&ws.path("p90.jsonl"));
    let key = |v: &Value| (v["tweet_id"].to_string(), v["cause"].to_string(), v["effect"].to_string());
    let low: HashSet<_> = p50.iter().map(key).collect();
    assert!(p90.iter().all(|v| low.contains(&key(v))));
    assert!(p90.len() <= p50.len());

    let events: HashSet<(String, String)> = read_jsonl(&ws.path("data.jsonl"))
        .iter()
        .flat_map(|r| {
            let tid = r["tweet_id"].as_str().unwrap().to_string();
            r["events"]
                .as_array()
                .unwrap()
                .iter()
                .map(move |e| (tid.clone(), e["id"].as_str().unwrap().to_string()))
                .collect::<Vec<_>>()
        })
        .collect();
    for v in &p50 {
        let s = v["score"].as_f64().unwrap();
        assert!((0.5..=1.0).contains(&s));
        let tid = v["tweet_id"].as_str().unwrap().to_string();
        assert!(events.contains(&(tid.clone(), v["cause"].as_str().unwrap().to_string())));
        assert!(events.contains(&(tid, v["effect"].as_str().unwrap().to_string())));
        assert_ne!(v["cause"], v["effect"]);
    }
}

#[test]
fn incompatible_checkpoint_is_a_runtime_error() {
    let ws = Workspace::new();
    ws.synth();
    let dir = ws.train();
    let ckpt = dir.join("checkpoint.json").display().to_string();
    // Hash embeddings of another width change the input dimension.
    let toml = std::fs::read_to_string(ws.path("run.toml")).unwrap();
    let no_emb: String = toml.lines().filter(|l| !l.starts_with("embeddings")).collect::<Vec<_>>().join("\n");
    std::fs::write(ws.path("hash.toml"), no_emb).unwrap();
    let o = stcausal(&["eval", "--checkpoint", &ckpt, "-c", &ws.arg("hash.toml"), "--set", "features.dim=12"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(text(&o).contains("incompatible checkpoint"), "{}", text(&o));
}

#[test]
fn single_class_split_flags_auc() {
    let ws = Workspace::new();
    let cfg = std::fs::read_to_string(ws.path("run.toml")).unwrap().replace(
        "[synth]\n",
        "[synth]\ncausal_tweet_prob = 0.0\nspatial_signal = 0.0\ntemporal_signal = 0.0\n",
    );
    std::fs::write(ws.path("run.toml"), cfg).unwrap();
    ws.synth();
    let dir = ws.train();
    let m: Value = serde_json::from_slice(&std::fs::read(dir.join("metrics.json")).unwrap()).unwrap();
    assert!(m["auc"].is_null());
    let flags: Vec<&str> = m["flags"].as_array().unwrap().iter().map(|f| f.as_str().unwrap()).collect();
    assert!(flags.contains(&"auc_undefined"), "{flags:?}");
}

#[test]
fn bad_config_and_missing_files() {
    let ws = Workspace::new();
    let o = stcausal(&["train", "-c", &ws.arg("run.toml"), "--set", "model.layers=3"]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    let o = stcausal(&["train", "-c", &ws.arg("run.toml"), "--set", "split.train=0.5"]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));

    ws.synth();
    std::fs::remove_file(ws.path("emb.jsonl")).unwrap();
    let o = stcausal(&["train", "-c", &ws.arg("run.toml")]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(text(&o).contains(&ws.arg("emb.jsonl")), "{}", text(&o));

    let o = stcausal(&["bogus"]);
    assert_eq!(o.status.code(), Some(1));
    let o = stcausal(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn build_graphs_and_ablation_outputs() {
    let ws = Workspace::new();
    ws.synth();
    let o = ws.run(&["build-graphs", "-c", &ws.arg("run.toml"), "--out", &ws.arg("graphs.jsonl")]);
    let stats: Value = serde_json::from_slice(&o.stdout).unwrap();
    let graphs = read_jsonl(&ws.path("graphs.jsonl"));
    assert!(!graphs.is_empty());
    assert!(stats.is_object());

    ws.run(&[
        "ablation",
        "-c",
        &ws.arg("run.toml"),
        "--set",
        "model.max_epochs=1",
        "--out",
        &ws.arg("ablation.csv"),
    ]);
    let csv = std::fs::read_to_string(ws.path("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "variant,accuracy,precision,recall,f1,auc,best_epoch,epochs");
    let variants: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(variants, ["none", "no_spatial", "no_temporal", "no_both"]);
}
