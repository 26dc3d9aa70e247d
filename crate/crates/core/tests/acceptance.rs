//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::sync::OnceLock;
use std::time::Instant;

use common::{check_graph_invariants, instance, max_fd_error, random_corpus, random_graph};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stcausal_core::eval::{confusion, prf1, roc_auc, ConfusionCounts};
use stcausal_core::features::{compute_features, EmbeddingSource, EmbeddingTable, FeatureConfig, KnockoutMode};
use stcausal_core::graph::{build_graphs, WindowConfig};
use stcausal_core::ingest::{parse_lines, parse_tweet};
use stcausal_core::model::{attention_coefficients, focal_loss, GatLayerParams};
use stcausal_core::pipeline::{cmd_train, fit, prepare, Fit, Prepared, RunConfig, CURVES_FILE, METRICS_FILE};
use stcausal_core::synth::{generate, SynthConfig, SynthCorpus};
use stcausal_core::Exec;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = (0.0, String::new());
    for _ in 0..20 {
        let inst = instance(&mut rng);
        let e = max_fd_error(&inst, 1e-4);
        if e.0 > worst.0 {
            worst = e;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst.0 <= 1e-4, || format!("max relative error {:.3e} at {}", worst.0, worst.1))?;
    ensure(secs < 30.0, || format!("took {secs:.1}s"))?;
    Ok(format!("20 instances, max relative error {:.2e}, {secs:.1}s", worst.0))
}

fn focal_reduces_to_cross_entropy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let p1: f64 = rng.random_range(1e-9..1.0 - 1e-9);
        let label = rng.random_range(0..2usize);
        let pt = if label == 1 { p1 } else { 1.0 - p1 };
        let ce = -pt.ln();
        let fl = focal_loss([1.0 - p1, p1], label, 1.0, 0.0);
        worst = worst.max((fl - ce).abs());
    }
    ensure(worst <= 1e-12, || format!("max gap {worst:e}"))?;
    Ok(format!("1000 draws, max gap {worst:.1e}"))
}

fn attention_rows_sum_to_one() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    let mut rows = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=30);
        let dim = rng.random_range(1..=8);
        let density = rng.random_range(0.0..0.5);
        let g = random_graph(&mut rng, n, dim, density);
        let h = Array2::from_shape_fn((n, dim), |(i, j)| g.nodes[i].features.0[j] * 4.0);
        let heads = rng.random_range(1..=4);
        let mut p = GatLayerParams::glorot(dim, heads, rng.random_range(1..=4), rng.random_bool(0.5), &mut rng);
        p.attn.mapv_inplace(|a| a * 5.0);
        for head in 0..heads {
            for v in 0..n {
                let alpha = attention_coefficients(&p, head, &h, g.adjacency(), v).map_err(|e| e.to_string())?;
                worst = worst.max((alpha.iter().sum::<f64>() - 1.0).abs());
                rows += 1;
            }
        }
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    Ok(format!("{rows} rows over 100 graphs, max deviation {worst:.1e}"))
}

fn graph_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let source = EmbeddingSource::Hash { seed: 3, dim: 8 };
    let fcfg = FeatureConfig {
        dim: 8,
        ..Default::default()
    };
    let mut graphs_total = 0;
    for trial in 0..1000 {
        let n = rng.random_range(0..30);
        let span = rng.random_range(0..50_000);
        let records = random_corpus(&mut rng, n, span);
        let cfg = WindowConfig {
            window_secs: [30, 600, 3600, 21_600][rng.random_range(0..4)],
            spatial_km: rng.random_range(1.0..80.0),
            semantic_threshold: rng.random_range(0.3..1.0),
            temporal_successors: rng.random_range(1..=6),
            cross_tweet_pairs: false,
        };
        let features = compute_features(&records, &source, &fcfg, Exec::Sequential).map_err(|e| e.to_string())?;
        let graphs = build_graphs(&records, &features, &cfg, Exec::Sequential).map_err(|e| e.to_string())?;
        check_graph_invariants(&records, &graphs, cfg.window_secs).map_err(|e| format!("corpus {trial}: {e}"))?;
        graphs_total += graphs.len();
    }
    Ok(format!("1000 corpora, {graphs_total} windows"))
}

fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn metric_oracles() -> Outcome {
    // Hand-worked confusion examples.
    let cases: [(ConfusionCounts, (f64, f64, f64)); 3] = [
        (
            ConfusionCounts { tp: 5, fp: 1, tn: 11, fn_: 3 },
            (5.0 / 6.0, 5.0 / 8.0, 5.0 / 7.0),
        ),
        (ConfusionCounts { tp: 1, fp: 1, tn: 0, fn_: 1 }, (0.5, 0.5, 0.5)),
        (ConfusionCounts { tp: 0, fp: 0, tn: 4, fn_: 2 }, (0.0, 0.0, 0.0)),
    ];
    for (c, want) in cases {
        let got = prf1(&c);
        ensure(got == want, || format!("prf1({c:?}) = {got:?}, want {want:?}"))?;
    }
    let c = confusion(&[1, 1, 0, 0, 1], &[1, 0, 0, 1, 1]).map_err(|e| e.to_string())?;
    ensure(c == ConfusionCounts { tp: 2, fp: 1, tn: 1, fn_: 1 }, || format!("confusion {c:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(2..=20);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let auc = roc_auc(&scores, &labels).map_err(|e| e.to_string())?;
        worst = worst.max((auc - brute_force_auc(&scores, &labels)).abs());
    }
    ensure(worst <= 1e-12, || format!("AUC max gap {worst:e}"))?;
    Ok(format!("prf1 exact on 3 examples; AUC on 200 tied instances, max gap {worst:.1e}"))
}

struct Strong {
    corpus: SynthCorpus,
    cfg: RunConfig,
    prepared: Prepared,
    full: Fit,
    secs: f64,
}

fn strong_run() -> &'static Result<Strong, String> {
    static RUN: OnceLock<Result<Strong, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = RunConfig::default();
        let corpus = generate(&cfg.synth).map_err(|e| e.to_string())?;
        let table = EmbeddingTable::from_rows(corpus.embeddings.iter().cloned()).map_err(|e| e.to_string())?;
        let prepared = prepare(corpus.records.clone(), &EmbeddingSource::Table(table), &cfg, Exec::Sequential)
            .map_err(|e| e.to_string())?;
        let start = Instant::now();
        let full = fit(&prepared, &cfg, KnockoutMode::None, Exec::Sequential).map_err(|e| e.to_string())?;
        let secs = start.elapsed().as_secs_f64();
        Ok(Strong {
            corpus,
            cfg,
            prepared,
            full,
            secs,
        })
    })
}

fn end_to_end() -> Outcome {
    let s = strong_run().as_ref().map_err(Clone::clone)?;
    let frac = s.corpus.positive_fraction();
    let r = &s.full.test_report;
    ensure(s.corpus.records.len() == 2000, || format!("{} tweets", s.corpus.records.len()))?;
    ensure((frac - 0.25).abs() <= 0.03, || format!("positive fraction {frac:.3}"))?;
    ensure(s.cfg.model.d_model == 32 && s.cfg.model.heads == 4, || "not the desk-scale model".into())?;
    ensure(r.f1 >= 0.85, || format!("test F1 {:.4}", r.f1))?;
    ensure(s.secs < 300.0, || format!("training took {:.0}s on one core", s.secs))?;
    Ok(format!(
        "2000 tweets, positive fraction {frac:.3}, test F1 {:.4} (AUC {:.4}), trained in {:.0}s on one core",
        r.f1,
        r.auc.unwrap_or(f64::NAN),
        s.secs
    ))
}

fn ablation_f1(prepared: &Prepared, cfg: &RunConfig, modes: &[KnockoutMode]) -> Result<Vec<f64>, String> {
    modes
        .iter()
        .map(|&m| fit(prepared, cfg, m, Exec::Parallel).map(|f| f.test_report.f1).map_err(|e| e.to_string()))
        .collect()
}

fn ablation_direction() -> Outcome {
    let s = strong_run().as_ref().map_err(Clone::clone)?;
    let ablated = [KnockoutMode::NoSpatial, KnockoutMode::NoTemporal, KnockoutMode::NoBoth];
    let f1 = ablation_f1(&s.prepared, &s.cfg, &ablated)?;
    let full = s.full.test_report.f1;
    for (m, f) in ablated.iter().zip(&f1) {
        ensure(full - f >= 0.02, || format!("full {full:.4} vs {} {f:.4}", m.as_str()))?;
    }

    let null_cfg = RunConfig {
        synth: SynthConfig {
            spatial_signal: 0.0,
            temporal_signal: 0.0,
            ..s.cfg.synth.clone()
        },
        ..s.cfg.clone()
    };
    let corpus = generate(&null_cfg.synth).map_err(|e| e.to_string())?;
    let table = EmbeddingTable::from_rows(corpus.embeddings.iter().cloned()).map_err(|e| e.to_string())?;
    let prepared = prepare(corpus.records, &EmbeddingSource::Table(table), &null_cfg, Exec::Parallel)
        .map_err(|e| e.to_string())?;
    let null = ablation_f1(&prepared, &null_cfg, &KnockoutMode::ALL)?;
    let spread = null.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - null.iter().cloned().fold(f64::INFINITY, f64::min);
    ensure(spread <= 0.05, || format!("null-corpus F1 spread {spread:.4}: {null:?}"))?;
    Ok(format!(
        "F1 full {full:.4} / no_spatial {:.4} / no_temporal {:.4} / no_both {:.4}; null spread {spread:.4}",
        f1[0], f1[1], f1[2]
    ))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data.jsonl");
    let emb = dir.path().join("emb.jsonl");
    let corpus = generate(&SynthConfig {
        n_tweets: 400,
        seed: 99,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    stcausal_core::ingest::write_dataset(&data, &corpus.records).map_err(|e| e.to_string())?;
    stcausal_core::features::write_embeddings(&emb, &corpus.embeddings).map_err(|e| e.to_string())?;
    let cfg = RunConfig::from_toml(
        "",
        &[
            format!("paths.dataset={:?}", data.display().to_string()),
            format!("paths.embeddings={:?}", emb.display().to_string()),
            format!("paths.output={:?}", dir.path().join("runs").display().to_string()),
            "model.max_epochs=6".into(),
        ],
    )
    .map_err(|e| e.to_string())?;
    let read = |p: std::path::PathBuf| std::fs::read(&p).map_err(|e| format!("{}: {e}", p.display()));
    let a = cmd_train(&cfg, Exec::Parallel).map_err(|e| e.to_string())?;
    let (m1, c1) = (read(a.dir.join(METRICS_FILE))?, read(a.dir.join(CURVES_FILE))?);
    let b = cmd_train(&cfg, Exec::Sequential).map_err(|e| e.to_string())?;
    let (m2, c2) = (read(b.dir.join(METRICS_FILE))?, read(b.dir.join(CURVES_FILE))?);
    ensure(m1 == m2, || "metrics JSON differs between runs".into())?;
    ensure(c1 == c2, || "loss curves differ between runs".into())?;
    Ok(format!("metrics and {}-epoch curves byte-identical", a.epochs))
}

const SCHEMA_FIELDS: [&str; 10] = [
    "tweet_text",
    "tokens",
    "events",
    "causal_relation",
    "mask",
    "tweet_id",
    "date_str",
    "date_numeric",
    "geolocation",
    "bounding_box",
];

fn keys(line: &str) -> Result<BTreeSet<String>, String> {
    let v: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let obj = v.as_object().ok_or("not an object")?;
    Ok(obj.keys().cloned().collect())
}

fn schema_round_trip() -> Outcome {
    let fields: BTreeSet<String> = SCHEMA_FIELDS.iter().map(|s| s.to_string()).collect();
    let golden = include_str!("data/golden.jsonl");
    let ds = parse_lines(golden, Exec::Sequential);
    ensure(ds.report.is_clean() && ds.records.len() == 20, || format!("golden file: {}", ds.report))?;
    for (i, line) in golden.lines().enumerate() {
        ensure(keys(line)? == fields, || format!("golden line {} field names", i + 1))?;
    }

    let synthetic = generate(&SynthConfig::default()).map_err(|e| e.to_string())?.records;
    for (i, r) in ds.records.iter().chain(&synthetic).enumerate() {
        let line = r.to_json_line();
        ensure(keys(&line)? == fields, || format!("record {i} re-serialized with other field names"))?;
        let back = parse_tweet(&line, i + 1).map_err(|e| e.to_string())?;
        ensure(&back == r, || format!("record {} changed on round trip", r.tweet_id))?;
        let again = parse_tweet(&back.to_json_line(), i + 1).map_err(|e| e.to_string())?;
        ensure(again == back, || format!("record {} unstable on second round trip", r.tweet_id))?;
    }
    Ok(format!("20 golden and {} synthetic records", synthetic.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient oracle", gradient_oracle),
        ("focal loss reduces to cross-entropy", focal_reduces_to_cross_entropy),
        ("attention normalization", attention_rows_sum_to_one),
        ("graph invariants", graph_invariants),
        ("metric oracles", metric_oracles),
        ("end-to-end synthetic", end_to_end),
        ("ablation direction", ablation_direction),
        ("determinism", determinism),
        ("schema round trip", schema_round_trip),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
}
