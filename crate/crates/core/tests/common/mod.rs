#![allow(dead_code)]

use std::collections::{HashMap, HashSet};

use ndarray::Array2;
use rand::Rng;
use stcausal_core::features::NodeFeatures;
use stcausal_core::graph::{Edge, EdgeKind, Node, NodeKind, NodeOrigin, WindowGraph};
use stcausal_core::ingest::{
    sort_chronologically, BoundingBox, CausalAnnotation, CausalPair, EventMention, LatLon, RoleTag, TweetRecord,
};
use stcausal_core::model::*;
use stcausal_core::Exec;

pub const KINDS: [EdgeKind; 4] = [EdgeKind::Contextual, EdgeKind::Spatial, EdgeKind::Temporal, EdgeKind::Attribute];

/// Random graph with `n` nodes, `dim`-wide uniform features and each ordered
/// node pair linked with probability `p`.
pub fn random_graph<R: Rng>(rng: &mut R, n: usize, dim: usize, p: f64) -> WindowGraph {
    let nodes = (0..n)
        .map(|id| Node {
            id,
            kind: NodeKind::Event,
            features: NodeFeatures((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()),
            origin: NodeOrigin {
                tweet_id: format!("t{id}"),
                event_id: Some("e".into()),
            },
            timestamp: Some(id as i64),
        })
        .collect();
    let mut edges = Vec::new();
    for src in 0..n {
        for dst in 0..n {
            if src != dst && rng.random_bool(p) {
                edges.push(Edge {
                    src,
                    dst,
                    kind: KINDS[rng.random_range(0..4)],
                });
            }
        }
    }
    WindowGraph::new(0, 0, 1, nodes, edges, Vec::new())
}

pub fn features(g: &WindowGraph) -> Array2<f64> {
    let dim = g.feature_dim();
    Array2::from_shape_fn((g.nodes.len(), dim), |(i, j)| g.nodes[i].features.0[j])
}

pub fn random_pairs<R: Rng>(rng: &mut R, graph: usize, n: usize, count: usize) -> Vec<PairRef> {
    (0..count)
        .map(|_| {
            let src = rng.random_range(0..n);
            let mut dst = rng.random_range(0..n - 1);
            if dst >= src {
                dst += 1;
            }
            PairRef {
                graph,
                src,
                dst,
                label: rng.random_range(0..2),
            }
        })
        .collect()
}

/// Small model with random (not just Glorot) biases so every tensor matters.
pub fn random_model<R: Rng>(rng: &mut R, in_dim: usize, d_model: usize, heads: usize) -> GatModel {
    let cfg = ModelConfig {
        d_model,
        heads,
        dropout: 0.0,
        seed: rng.random(),
        ..Default::default()
    };
    let mut m = GatModel::new(in_dim, cfg).unwrap();
    m.params.classifier.b1.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    m.params.classifier.b2.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    m
}

pub fn loss(m: &GatModel, inputs: &[GraphInput<'_>], pairs: &[PairRef], w: [f64; 2], red: Reduction) -> f64 {
    forward_batch(m, inputs, pairs, w, Mode::Eval, red, Exec::Sequential).unwrap().loss
}

/// Smallest distance of any LeakyReLU or ELU input from its kink.
pub fn kink_margin(fwd: &BatchForward) -> f64 {
    let mut m = f64::INFINITY;
    for p in &fwd.passes {
        for c in [&p.layer1, &p.layer2] {
            m = c.raw.iter().chain(c.pre.iter()).fold(m, |m, x| m.min(x.abs()));
        }
        m = p.hidden_pre.iter().fold(m, |m, x| m.min(x.abs()));
    }
    m
}

pub struct Instance {
    pub graph: WindowGraph,
    pub x: Array2<f64>,
    pub pairs: Vec<PairRef>,
    pub model: GatModel,
    pub weights: [f64; 2],
}

pub fn instance<R: Rng>(rng: &mut R) -> Instance {
    loop {
        let n = rng.random_range(2..=12);
        let dim = rng.random_range(2..=6);
        let graph = random_graph(rng, n, dim, 0.3);
        let x = features(&graph);
        let (d_model, heads) = [(2, 1), (4, 2), (6, 3), (8, 2), (8, 4), (4, 1)][rng.random_range(0..6)];
        let mut model = random_model(rng, dim, d_model, heads);
        model.config.gamma = [0.0, 1.0, 2.0, 2.5][rng.random_range(0..4)];
        let count = rng.random_range(1..=6);
        let pairs = random_pairs(rng, 0, n, count);
        let weights = [rng.random_range(0.3..2.0), rng.random_range(0.3..2.0)];
        let inst = Instance {
            graph,
            x,
            pairs,
            model,
            weights,
        };
        let inputs = [GraphInput::with_features(&inst.graph, inst.x.clone()).unwrap()];
        let fwd = forward_batch(&inst.model, &inputs, &inst.pairs, inst.weights, Mode::Eval, Reduction::Mean, Exec::Sequential)
            .unwrap();
        if kink_margin(&fwd) > 1e-3 {
            return inst;
        }
    }
}

/// Largest relative gap between analytic and central-difference gradients,
/// `|a - n| / max(|a|, |n|, 1e-6)`, and the parameter where it occurs.
pub fn max_fd_error(inst: &Instance, eps: f64) -> (f64, String) {
    let inputs = [GraphInput::with_features(&inst.graph, inst.x.clone()).unwrap()];
    let (_, grad) = graph_loss_and_grad(
        &inst.model,
        &inputs,
        &inst.pairs,
        inst.weights,
        Mode::Eval,
        Reduction::Mean,
        Exec::Sequential,
    )
    .unwrap();
    let mut m = inst.model.clone();
    let names = m.params.names();
    let counts: Vec<usize> = m.params.slices().iter().map(|s| s.len()).collect();
    let mut worst = (0.0, String::new());
    for (t, &len) in counts.iter().enumerate() {
        for i in 0..len {
            let orig = m.params.slices()[t][i];
            m.params.slices_mut()[t][i] = orig + eps;
            let up = loss(&m, &inputs, &inst.pairs, inst.weights, Reduction::Mean);
            m.params.slices_mut()[t][i] = orig - eps;
            let down = loss(&m, &inputs, &inst.pairs, inst.weights, Reduction::Mean);
            m.params.slices_mut()[t][i] = orig;
            let num = (up - down) / (2.0 * eps);
            let ana = grad.slices()[t][i];
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{}[{i}]", names[t]));
            }
        }
    }
    worst
}

/// Small random corpus in chronological order: tied timestamps, tweets with
/// no events, missing or partial location data and random annotations.
pub fn random_corpus<R: Rng>(rng: &mut R, n: usize, span: i64) -> Vec<TweetRecord> {
    let t0 = rng.random_range(1_000_000..2_000_000_000i64);
    let places = ["Houston", "Katy", "Galveston"];
    let mut records: Vec<TweetRecord> = (0..n)
        .map(|i| {
            let n_events = rng.random_range(0..=4);
            let ids: Vec<String> = (0..n_events).map(|k| format!("evt_{:03}", k + 1)).collect();
            let mut pairs = Vec::new();
            for a in 0..n_events {
                for b in 0..n_events {
                    if a != b && rng.random_bool(0.25) {
                        pairs.push(CausalPair {
                            cause: ids[a].clone(),
                            effect: ids[b].clone(),
                        });
                    }
                }
            }
            let bounding_box = rng.random_bool(0.6).then(|| {
                let lat = rng.random_range(29.0..30.5);
                let lon = rng.random_range(-96.0..-94.5);
                let c = LatLon { lat, lon };
                BoundingBox { corners: [c; 4] }
            });
            TweetRecord {
                tweet_id: format!("{i}"),
                tweet_text: format!("tweet {i}"),
                tokens: vec!["tweet".into()],
                events: ids
                    .iter()
                    .map(|id| EventMention {
                        id: id.clone(),
                        trigger: ["rain", "flood", "outage", "rescue"][rng.random_range(0..4)].into(),
                        arguments: Default::default(),
                    })
                    .collect(),
                causal_relation: CausalAnnotation { pairs },
                mask: vec![RoleTag::Outside],
                date_str: String::new(),
                date_numeric: t0 + rng.random_range(0..=span),
                geolocation: rng.random_bool(0.5).then(|| places[rng.random_range(0..3)].to_string()),
                bounding_box,
                location_mentions: None,
                location_signal: None,
            }
        })
        .collect();
    sort_chronologically(&mut records);
    records
}

/// Checks window graphs built from `records` against an independent
/// recomputation: the window of every event, node timestamps inside their
/// window, temporal edges pointing forward, edge endpoints inside the graph
/// and candidate labels equal to the annotations.
pub fn check_graph_invariants(records: &[TweetRecord], graphs: &[WindowGraph], window: i64) -> Result<(), String> {
    let Some(t0) = records.iter().map(|r| r.date_numeric).min() else {
        return if graphs.is_empty() { Ok(()) } else { Err("graphs from an empty corpus".into()) };
    };
    let mut expected: HashMap<(String, String), i64> = HashMap::new();
    let mut positives: HashSet<(String, String, String)> = HashSet::new();
    for r in records {
        for e in &r.events {
            expected.insert((r.tweet_id.clone(), e.id.clone()), (r.date_numeric - t0) / window);
        }
        for p in &r.causal_relation.pairs {
            positives.insert((r.tweet_id.clone(), p.cause.clone(), p.effect.clone()));
        }
    }

    let mut seen: HashMap<(String, String), usize> = HashMap::new();
    let mut labelled = HashSet::new();
    let mut prev_index = None;
    for g in graphs {
        if prev_index.is_some_and(|p| p >= g.window_index) {
            return Err(format!("window {} out of order", g.window_index));
        }
        prev_index = Some(g.window_index);
        if g.window_end - g.window_start != window || g.window_start != t0 + g.window_index * window {
            return Err(format!("window {} has bounds [{}, {})", g.window_index, g.window_start, g.window_end));
        }
        let n = g.nodes.len();
        for node in g.event_nodes() {
            let key = (node.origin.tweet_id.clone(), node.origin.event_id.clone().unwrap_or_default());
            let Some(&k) = expected.get(&key) else {
                return Err(format!("unknown event node {key:?}"));
            };
            if k != g.window_index {
                return Err(format!("{key:?} belongs to window {k}, found in {}", g.window_index));
            }
            let ts = node.timestamp.ok_or("event node without timestamp")?;
            if ts < g.window_start || ts >= g.window_end {
                return Err(format!("{key:?} at {ts} outside [{}, {})", g.window_start, g.window_end));
            }
            *seen.entry(key).or_default() += 1;
        }
        for e in &g.edges {
            if e.src >= n || e.dst >= n {
                return Err(format!("edge {}->{} leaves window {}", e.src, e.dst, g.window_index));
            }
            if e.kind == EdgeKind::Temporal {
                let (a, b) = (g.nodes[e.src].timestamp, g.nodes[e.dst].timestamp);
                if !(a < b) {
                    return Err(format!("temporal edge {}->{} runs {a:?} -> {b:?}", e.src, e.dst));
                }
            }
        }
        let event_count = g.event_nodes().count();
        let mut by_tweet: HashMap<&str, usize> = HashMap::new();
        for node in g.event_nodes() {
            *by_tweet.entry(node.origin.tweet_id.as_str()).or_default() += 1;
        }
        let intra: usize = by_tweet.values().map(|&c| c * (c - 1)).sum();
        if g.candidate_pairs.len() != intra {
            return Err(format!("{} candidate pairs, expected {intra}", g.candidate_pairs.len()));
        }
        for p in &g.candidate_pairs {
            if p.src >= event_count || p.dst >= event_count {
                return Err("candidate pair on a non-event node".into());
            }
            let (a, b) = (&g.nodes[p.src].origin, &g.nodes[p.dst].origin);
            if a.tweet_id != b.tweet_id {
                return Err("candidate pair spans tweets".into());
            }
            let key = (a.tweet_id.clone(), a.event_id.clone().unwrap(), b.event_id.clone().unwrap());
            let truth = positives.contains(&key);
            if truth != (p.label == 1) {
                return Err(format!("pair {key:?} labelled {}, annotated {truth}", p.label));
            }
            if truth {
                labelled.insert(key);
            }
        }
    }
    if let Some((k, c)) = seen.iter().find(|(_, &c)| c != 1) {
        return Err(format!("{k:?} appears {c} times"));
    }
    if seen.len() != expected.len() {
        return Err(format!("{} of {} events placed", seen.len(), expected.len()));
    }
    if labelled != positives {
        return Err(format!("{} of {} annotations labelled", labelled.len(), positives.len()));
    }
    Ok(())
}
