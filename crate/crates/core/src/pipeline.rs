//! End-to-end runs: configuration, data preparation, training and the
//! command implementations behind the CLI.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{write_curves, EvalReport};
use crate::features::{compute_features, EmbeddingSource, EmbeddingTable, FeatureConfig, KnockoutMode};
use crate::graph::{build_graphs, graph_stats, write_graphs, GraphStats, WindowConfig, WindowGraph};
use crate::ingest::{read_dataset, sort_chronologically, split_dataset, write_dataset, SplitRatios, TweetRecord, ValidationReport};
use crate::model::{predict_pairs, train, Checkpoint, GatModel, GraphInput, ModelConfig, PairRef, TrainOutcome};
use crate::synth::{generate, AblationRow, SynthConfig};
use crate::Exec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// JSON Lines dataset.
    pub dataset: Option<PathBuf>,
    /// Embedding file; without it events are embedded by the hash encoder.
    pub embeddings: Option<PathBuf>,
    /// Parent directory for run outputs.
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            dataset: None,
            embeddings: None,
            output: PathBuf::from("runs"),
        }
    }
}

/// Everything a run depends on. `seed` drives the split and overrides
/// `model.seed`; `synth.seed` names the corpus and stays independent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub knockout: KnockoutMode,
    pub paths: Paths,
    pub split: SplitRatios,
    pub features: FeatureConfig,
    pub graph: WindowConfig,
    pub model: ModelConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let seed = 42;
        RunConfig {
            seed,
            knockout: KnockoutMode::None,
            paths: Paths::default(),
            split: SplitRatios::default(),
            features: FeatureConfig::default(),
            graph: WindowConfig::default(),
            model: ModelConfig {
                seed,
                ..Default::default()
            },
            synth: SynthConfig::default(),
        }
    }
}

/// Parses a `key.path=value` override. The value is read as a TOML value
/// and falls back to a bare string.
fn parse_override(s: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("override `{s}` has an empty key segment")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for seg in parents {
        let entry = cur
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{seg}` in `{}` is not a section", path.join("."))))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    /// Builds a config from TOML text plus dotted overrides, then validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {}", e.message())))?;
        for o in overrides {
            let (path, value) = parse_override(o)?;
            set_path(&mut table, &path, value)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("config: {}", e.message())))?;
        cfg.model.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.features.validate()?;
        self.graph.validate()?;
        self.model.validate()?;
        self.synth.validate()?;
        if self.model.seed != self.seed {
            return Err(Error::Config(format!(
                "model.seed {} differs from run seed {}",
                self.model.seed, self.seed
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    /// First 12 hex digits of the SHA-256 of the resolved TOML.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(digest)[..12].to_string()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.paths.output.join(format!("run-{}-seed{}", self.hash(), self.seed))
    }

    fn dataset_path(&self) -> Result<&Path> {
        self.paths
            .dataset
            .as_deref()
            .ok_or_else(|| Error::Config("paths.dataset is not set".into()))
    }

    pub fn embedding_source(&self) -> Result<EmbeddingSource> {
        match &self.paths.embeddings {
            Some(p) => Ok(EmbeddingSource::Table(EmbeddingTable::read(p)?)),
            None => Ok(EmbeddingSource::Hash {
                seed: self.features.hash_seed,
                dim: self.features.dim,
            }),
        }
    }
}

/// Reads a dataset and rejects it if any line fails validation.
pub fn load_records(path: &Path, exec: Exec) -> Result<Vec<TweetRecord>> {
    let ds = read_dataset(path, exec)?;
    if !ds.report.is_clean() {
        return Err(Error::Format(format!(
            "{}: {} invalid record(s); first: {}",
            path.display(),
            ds.report.error_count,
            ds.report.errors.first().map(String::as_str).unwrap_or("?")
        )));
    }
    Ok(ds.records)
}

/// Graphs over the whole corpus with candidate pairs assigned to the split
/// of the tweet they come from.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub records: Vec<TweetRecord>,
    pub graphs: Vec<WindowGraph>,
    pub train: Vec<PairRef>,
    pub validation: Vec<PairRef>,
    pub test: Vec<PairRef>,
}

impl Prepared {
    pub fn in_dim(&self) -> usize {
        self.graphs.first().map_or(0, WindowGraph::feature_dim)
    }

    pub fn inputs(&self, mode: KnockoutMode) -> Vec<GraphInput<'_>> {
        self.graphs.iter().map(|g| GraphInput::from_graph(g, mode)).collect()
    }

    pub fn partition(&self, split: Split) -> &[PairRef] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn stats(&self) -> GraphStats {
        let mut s = GraphStats::default();
        for g in &self.graphs {
            s += graph_stats(g);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

pub fn prepare(
    mut records: Vec<TweetRecord>,
    source: &EmbeddingSource,
    cfg: &RunConfig,
    exec: Exec,
) -> Result<Prepared> {
    sort_chronologically(&mut records);
    let split = split_dataset(&records, cfg.split, cfg.seed)?;
    let mut part: HashMap<&str, Split> = HashMap::new();
    for (recs, s) in [
        (&split.train, Split::Train),
        (&split.validation, Split::Validation),
        (&split.test, Split::Test),
    ] {
        part.extend(recs.iter().map(|r| (r.tweet_id.as_str(), s)));
    }

    let features = compute_features(&records, source, &cfg.features, exec)?;
    let graphs = build_graphs(&records, &features, &cfg.graph, exec)?;
    let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (gi, g) in graphs.iter().enumerate() {
        for p in &g.candidate_pairs {
            let tid = g.nodes[p.src].origin.tweet_id.as_str();
            let bucket = match part.get(tid) {
                Some(Split::Train) => &mut train,
                Some(Split::Validation) => &mut validation,
                Some(Split::Test) => &mut test,
                None => return Err(Error::Consistency(format!("pair from unknown tweet {tid}"))),
            };
            bucket.push(PairRef::new(gi, p));
        }
    }
    Ok(Prepared {
        records,
        graphs,
        train,
        validation,
        test,
    })
}

pub fn prepare_from_paths(cfg: &RunConfig, exec: Exec) -> Result<Prepared> {
    let records = load_records(cfg.dataset_path()?, exec)?;
    let source = cfg.embedding_source()?;
    prepare(records, &source, cfg, exec)
}

#[derive(Debug, Clone)]
pub struct Fit {
    pub outcome: TrainOutcome,
    pub test_report: EvalReport,
}

pub fn evaluate_pairs(
    model: &GatModel,
    prepared: &Prepared,
    pairs: &[PairRef],
    mode: KnockoutMode,
    exec: Exec,
) -> Result<EvalReport> {
    if model.in_dim != prepared.in_dim() {
        return Err(Error::Checkpoint(format!(
            "model expects {} input features, data has {}",
            model.in_dim,
            prepared.in_dim()
        )));
    }
    let probs = predict_pairs(model, &prepared.inputs(mode), pairs, exec)?;
    let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
    let labels: Vec<u8> = pairs.iter().map(|p| p.label).collect();
    EvalReport::compute(&scores, &labels, model.config.threshold)
}

pub fn fit(prepared: &Prepared, cfg: &RunConfig, mode: KnockoutMode, exec: Exec) -> Result<Fit> {
    let model = GatModel::new(prepared.in_dim(), cfg.model.clone())?;
    let inputs = prepared.inputs(mode);
    let outcome = train(model, &inputs, &prepared.train, &prepared.validation, exec)?;
    let test_report = evaluate_pairs(&outcome.model, prepared, &prepared.test, mode, exec)?;
    Ok(Fit { outcome, test_report })
}

/// One model per knockout mode on the same prepared data.
pub fn ablation(records: Vec<TweetRecord>, source: &EmbeddingSource, cfg: &RunConfig, exec: Exec) -> Result<Vec<AblationRow>> {
    let prepared = prepare(records, source, cfg, exec)?;
    KnockoutMode::ALL
        .into_iter()
        .map(|mode| {
            let f = fit(&prepared, cfg, mode, exec)?;
            Ok(AblationRow {
                variant: mode,
                report: f.test_report,
                best_epoch: f.outcome.best_epoch,
                epochs: f.outcome.history.len(),
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,accuracy,precision,recall,f1,auc,best_epoch,epochs\n");
    for r in rows {
        let m = &r.report;
        let auc = m.auc.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.variant.as_str(),
            m.accuracy,
            m.precision,
            m.recall,
            m.f1,
            auc,
            r.best_epoch,
            r.epochs
        );
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

// Commands. Each returns what the CLI prints.

pub fn cmd_ingest(path: &Path, exec: Exec) -> Result<ValidationReport> {
    Ok(read_dataset(path, exec)?.report)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SynthSummary {
    pub records: usize,
    pub events: usize,
    pub positive_pairs: usize,
    pub dataset: PathBuf,
    pub embeddings: PathBuf,
}

/// Writes the configured synthetic corpus to `paths.dataset` and
/// `paths.embeddings`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthSummary> {
    let dataset = cfg.dataset_path()?.to_path_buf();
    let embeddings = cfg
        .paths
        .embeddings
        .clone()
        .ok_or_else(|| Error::Config("paths.embeddings is not set".into()))?;
    let corpus = generate(&cfg.synth)?;
    for p in [&dataset, &embeddings] {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    write_dataset(&dataset, &corpus.records)?;
    crate::features::write_embeddings(&embeddings, &corpus.embeddings)?;
    Ok(SynthSummary {
        records: corpus.records.len(),
        events: corpus.embeddings.len(),
        positive_pairs: corpus.planted.len(),
        dataset,
        embeddings,
    })
}

pub fn cmd_build_graphs(cfg: &RunConfig, out: &Path, exec: Exec) -> Result<GraphStats> {
    let prepared = prepare_from_paths(cfg, exec)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_graphs(out, &prepared.graphs)?;
    Ok(prepared.stats())
}

#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub dir: PathBuf,
    pub report: EvalReport,
    pub best_epoch: usize,
    pub epochs: usize,
}

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CURVES_FILE: &str = "curves.csv";
pub const METRICS_FILE: &str = "metrics.json";

/// Trains on the configured data and writes the resolved config, the best
/// checkpoint, loss curves and test metrics to [`RunConfig::run_dir`].
pub fn cmd_train(cfg: &RunConfig, exec: Exec) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let prepared = prepare_from_paths(cfg, exec)?;
    let fit = fit(&prepared, cfg, cfg.knockout, exec)?;

    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_text(&dir.join(CONFIG_FILE), &cfg.to_toml())?;
    let mut ckpt = Checkpoint::from_outcome(&fit.outcome);
    ckpt.context = serde_json::to_value(cfg)?;
    ckpt.save(dir.join(CHECKPOINT_FILE))?;
    write_curves(dir.join(CURVES_FILE), &fit.outcome.history)?;
    fit.test_report.write_json(dir.join(METRICS_FILE))?;
    Ok(TrainArtifacts {
        dir,
        report: fit.test_report,
        best_epoch: fit.outcome.best_epoch,
        epochs: fit.outcome.history.len(),
    })
}

/// The run config stored in a checkpoint by [`cmd_train`].
pub fn checkpoint_config(ckpt: &Checkpoint) -> Result<RunConfig> {
    if ckpt.context.is_null() {
        return Err(Error::Checkpoint("checkpoint carries no run config".into()));
    }
    let cfg: RunConfig = serde_json::from_value(ckpt.context.clone())?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_eval(ckpt: &Checkpoint, cfg: &RunConfig, split: Split, exec: Exec) -> Result<EvalReport> {
    let model = ckpt.to_model()?;
    let prepared = prepare_from_paths(cfg, exec)?;
    evaluate_pairs(&model, &prepared, prepared.partition(split), cfg.knockout, exec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedCause {
    pub tweet_id: String,
    pub cause: String,
    pub effect: String,
    pub score: f64,
}

/// Every candidate pair in the dataset whose causal probability reaches
/// `delta`, in graph order.
pub fn cmd_predict(ckpt: &Checkpoint, cfg: &RunConfig, delta: f64, exec: Exec) -> Result<Vec<PredictedCause>> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!("threshold {delta} outside (0, 1)")));
    }
    let model = ckpt.to_model()?;
    let prepared = prepare_from_paths(cfg, exec)?;
    if model.in_dim != prepared.in_dim() {
        return Err(Error::Checkpoint(format!(
            "model expects {} input features, data has {}",
            model.in_dim,
            prepared.in_dim()
        )));
    }
    let pairs: Vec<PairRef> = prepared
        .graphs
        .iter()
        .enumerate()
        .flat_map(|(gi, g)| g.candidate_pairs.iter().map(move |p| PairRef::new(gi, p)))
        .collect();
    let probs = predict_pairs(&model, &prepared.inputs(cfg.knockout), &pairs, exec)?;
    let event = |gi: usize, v: usize| {
        let o = &prepared.graphs[gi].nodes[v].origin;
        (o.tweet_id.clone(), o.event_id.clone().unwrap_or_default())
    };
    Ok(pairs
        .iter()
        .zip(probs)
        .filter(|(_, p)| p[1] >= delta)
        .map(|(p, pr)| {
            let (tweet_id, cause) = event(p.graph, p.src);
            let (_, effect) = event(p.graph, p.dst);
            PredictedCause {
                tweet_id,
                cause,
                effect,
                score: pr[1],
            }
        })
        .collect())
}

pub fn write_predictions(path: &Path, preds: &[PredictedCause]) -> Result<()> {
    let mut text = String::new();
    for p in preds {
        text.push_str(&serde_json::to_string(p)?);
        text.push('\n');
    }
    write_text(path, &text)
}

/// Four-variant comparison on the configured dataset, or on a corpus from
/// `synth` when no dataset is set. Writes the table to `out`.
pub fn cmd_ablation(cfg: &RunConfig, out: &Path, exec: Exec) -> Result<Vec<AblationRow>> {
    let rows = match &cfg.paths.dataset {
        Some(p) => ablation(load_records(p, exec)?, &cfg.embedding_source()?, cfg, exec)?,
        None => crate::synth::run_ablation(&generate(&cfg.synth)?, cfg, exec)?,
    };
    write_text(out, &ablation_csv(&rows))?;
    Ok(rows)
}
