//! Windowed heterogeneous event graphs.
//!
//! Tweets are bucketed into half-open windows `[t0 + k*w, t0 + (k+1)*w)`
//! anchored at the first timestamp. Each window becomes one [`WindowGraph`]
//! holding event nodes plus shared location and timestamp nodes, typed edges
//! between them, and the labelled ordered event pairs to classify.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureTable, NodeFeatures};
use crate::ingest::{CausalPair, LatLon, TweetRecord};
use crate::par::{self, Exec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Event,
    Spatial,
    Temporal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EdgeKind {
    /// Same tweet, or semantically similar events across tweets.
    Contextual,
    /// Events of geographically close tweets.
    Spatial,
    /// Earlier event to later event.
    Temporal,
    /// Event to its location or timestamp node.
    Attribute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeOrigin {
    pub tweet_id: String,
    pub event_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub kind: NodeKind,
    pub features: NodeFeatures,
    /// First tweet that produced the node.
    pub origin: NodeOrigin,
    pub timestamp: Option<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub kind: EdgeKind,
}

impl Edge {
    /// Temporal edges carry messages from `src` to `dst` only; every other
    /// kind is symmetric.
    pub fn is_directed(&self) -> bool {
        self.kind == EdgeKind::Temporal
    }
}

/// Ordered event pair `(cause candidate, effect candidate)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CandidatePair {
    pub src: usize,
    pub dst: usize,
    pub label: u8,
}

/// Compressed in-neighbour lists, self-loop included.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Adjacency {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

impl Adjacency {
    pub fn build(n: usize, edges: &[Edge]) -> Self {
        let mut lists: Vec<Vec<usize>> = (0..n).map(|v| vec![v]).collect();
        for e in edges {
            lists[e.dst].push(e.src);
            if !e.is_directed() {
                lists[e.src].push(e.dst);
            }
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for mut l in lists {
            l.sort_unstable();
            l.dedup();
            neighbors.extend(l);
            offsets.push(neighbors.len());
        }
        Adjacency { offsets, neighbors }
    }

    pub fn len(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Nodes whose messages `v` aggregates, sorted, including `v`.
    pub fn of(&self, v: usize) -> &[usize] {
        &self.neighbors[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowGraph {
    pub window_index: i64,
    pub window_start: i64,
    pub window_end: i64,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    pub candidate_pairs: Vec<CandidatePair>,
    #[serde(skip)]
    adjacency: Adjacency,
}

impl WindowGraph {
    pub fn new(
        window_index: i64,
        window_start: i64,
        window_end: i64,
        nodes: Vec<Node>,
        edges: Vec<Edge>,
        candidate_pairs: Vec<CandidatePair>,
    ) -> Self {
        let adjacency = Adjacency::build(nodes.len(), &edges);
        WindowGraph {
            window_index,
            window_start,
            window_end,
            nodes,
            edges,
            candidate_pairs,
            adjacency,
        }
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    pub fn feature_dim(&self) -> usize {
        self.nodes.first().map_or(0, |n| n.features.0.len())
    }

    pub fn event_nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Event)
    }

    /// Restores the adjacency after deserialisation.
    pub fn rebuild_adjacency(&mut self) {
        self.adjacency = Adjacency::build(self.nodes.len(), &self.edges);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    /// Window length w_t in seconds.
    pub window_secs: i64,
    /// Centroid distance at or below which tweets count as co-located.
    pub spatial_km: f64,
    /// Cosine similarity of semantic segments for cross-tweet contextual edges.
    pub semantic_threshold: f64,
    /// Each event links to at most this many chronologically next events.
    pub temporal_successors: usize,
    /// Also emit unlabelled cross-tweet candidate pairs (label 0).
    pub cross_tweet_pairs: bool,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            window_secs: 6 * 3600,
            spatial_km: 50.0,
            semantic_threshold: 0.85,
            temporal_successors: 5,
            cross_tweet_pairs: false,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_secs <= 0 {
            return Err(Error::Config("graph.window_secs must be positive".into()));
        }
        if !(self.spatial_km >= 0.0) {
            return Err(Error::Config("graph.spatial_km must be non-negative".into()));
        }
        if !(-1.0..=1.0).contains(&self.semantic_threshold) {
            return Err(Error::Config("graph.semantic_threshold must lie in [-1, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct WindowBucket<'a> {
    pub index: i64,
    pub start: i64,
    pub end: i64,
    pub records: Vec<&'a TweetRecord>,
}

/// Splits chronologically sorted records into non-empty windows of length `window_secs`.
pub fn partition_windows(records: &[TweetRecord], window_secs: i64) -> Result<Vec<WindowBucket<'_>>> {
    if window_secs <= 0 {
        return Err(Error::Config("window length must be positive".into()));
    }
    if let Some(w) = records.windows(2).find(|w| w[1].date_numeric < w[0].date_numeric) {
        return Err(Error::Ordering(format!(
            "tweet {} ({}) follows tweet {} ({})",
            w[1].tweet_id, w[1].date_numeric, w[0].tweet_id, w[0].date_numeric
        )));
    }
    let Some(first) = records.first() else {
        return Ok(Vec::new());
    };
    let t0 = first.date_numeric;
    let mut buckets: Vec<WindowBucket<'_>> = Vec::new();
    for r in records {
        let k = (r.date_numeric - t0).div_euclid(window_secs);
        match buckets.last_mut() {
            Some(b) if b.index == k => b.records.push(r),
            _ => buckets.push(WindowBucket {
                index: k,
                start: t0 + k * window_secs,
                end: t0 + (k + 1) * window_secs,
                records: vec![r],
            }),
        }
    }
    Ok(buckets)
}

fn location_key(r: &TweetRecord) -> Option<String> {
    if let Some(g) = &r.geolocation {
        return Some(format!("name:{}", g.trim().to_lowercase()));
    }
    r.bounding_box.map(|b| {
        let c = b.centroid();
        format!("at:{:.2},{:.2}", c.lat, c.lon)
    })
}

fn co_located(a: &TweetRecord, b: &TweetRecord, km: f64) -> bool {
    match (a.bounding_box, b.bounding_box) {
        (Some(x), Some(y)) => x.centroid().haversine_km(y.centroid()) <= km,
        _ => match (&a.geolocation, &b.geolocation) {
            (Some(x), Some(y)) => x.trim().eq_ignore_ascii_case(y.trim()),
            _ => false,
        },
    }
}

fn cosine(a: &[f64], b: &[f64], na: f64, nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Feature vector of an attribute node: a kind indicator inside the semantic
/// segment, zero elsewhere.
fn attribute_features(kind: NodeKind, dim: usize, semantic_dim: usize) -> NodeFeatures {
    let mut v = vec![0.0; dim];
    let slot = match kind {
        NodeKind::Spatial => 0,
        _ => 1.min(semantic_dim.saturating_sub(1)),
    };
    if dim > 0 {
        v[slot] = 1.0;
    }
    NodeFeatures(v)
}

pub fn build_window_graph(
    bucket: &WindowBucket<'_>,
    features: &FeatureTable,
    cfg: &WindowConfig,
) -> Result<WindowGraph> {
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    // (tweet index, node id) for every event node.
    let mut events: Vec<(usize, usize)> = Vec::new();

    for (t, r) in bucket.records.iter().enumerate() {
        for e in &r.events {
            let f = features.get(&r.tweet_id, &e.id).ok_or_else(|| {
                Error::Consistency(format!("no features for event {} of tweet {}", e.id, r.tweet_id))
            })?;
            events.push((t, nodes.len()));
            nodes.push(Node {
                id: nodes.len(),
                kind: NodeKind::Event,
                features: f.clone(),
                origin: NodeOrigin {
                    tweet_id: r.tweet_id.clone(),
                    event_id: Some(e.id.clone()),
                },
                timestamp: Some(r.date_numeric),
            });
        }
    }
    let dim = nodes.first().map_or(features.dim(), |n| n.features.0.len());
    let semantic_dim = nodes.first().map_or(0, |n| n.features.semantic_dim());

    // Attribute nodes in first-appearance order.
    let mut spatial_ids: HashMap<String, usize> = HashMap::new();
    let mut temporal_ids: HashMap<i64, usize> = HashMap::new();
    for &(t, ev) in &events {
        let r = bucket.records[t];
        if let Some(key) = location_key(r) {
            let next = nodes.len();
            let id = *spatial_ids.entry(key).or_insert(next);
            if id == next {
                nodes.push(Node {
                    id,
                    kind: NodeKind::Spatial,
                    features: attribute_features(NodeKind::Spatial, dim, semantic_dim),
                    origin: NodeOrigin {
                        tweet_id: r.tweet_id.clone(),
                        event_id: None,
                    },
                    timestamp: None,
                });
            }
            edges.push(Edge {
                src: ev,
                dst: id,
                kind: EdgeKind::Attribute,
            });
        }
        let next = nodes.len();
        let id = *temporal_ids.entry(r.date_numeric).or_insert(next);
        if id == next {
            nodes.push(Node {
                id,
                kind: NodeKind::Temporal,
                features: attribute_features(NodeKind::Temporal, dim, semantic_dim),
                origin: NodeOrigin {
                    tweet_id: r.tweet_id.clone(),
                    event_id: None,
                },
                timestamp: Some(r.date_numeric),
            });
        }
        edges.push(Edge {
            src: ev,
            dst: id,
            kind: EdgeKind::Attribute,
        });
    }

    // Contextual: same tweet, or similar semantics across tweets.
    let norms: Vec<f64> = events
        .iter()
        .map(|&(_, v)| nodes[v].features.semantic().iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    for i in 0..events.len() {
        for j in i + 1..events.len() {
            let ((ti, vi), (tj, vj)) = (events[i], events[j]);
            let linked = ti == tj
                || cosine(
                    nodes[vi].features.semantic(),
                    nodes[vj].features.semantic(),
                    norms[i],
                    norms[j],
                ) >= cfg.semantic_threshold;
            if linked {
                edges.push(Edge {
                    src: vi,
                    dst: vj,
                    kind: EdgeKind::Contextual,
                });
            }
        }
    }

    // Spatial: events of distinct, co-located tweets.
    let n_tweets = bucket.records.len();
    let mut by_tweet: Vec<Vec<usize>> = vec![Vec::new(); n_tweets];
    for &(t, v) in &events {
        by_tweet[t].push(v);
    }
    for a in 0..n_tweets {
        for b in a + 1..n_tweets {
            if by_tweet[a].is_empty() || by_tweet[b].is_empty() {
                continue;
            }
            if co_located(bucket.records[a], bucket.records[b], cfg.spatial_km) {
                for &u in &by_tweet[a] {
                    for &v in &by_tweet[b] {
                        edges.push(Edge {
                            src: u,
                            dst: v,
                            kind: EdgeKind::Spatial,
                        });
                    }
                }
            }
        }
    }

    // Temporal: each event to its k nearest strictly later events.
    let mut chrono: Vec<usize> = events.iter().map(|&(_, v)| v).collect();
    chrono.sort_by_key(|&v| (nodes[v].timestamp, v));
    for (pos, &u) in chrono.iter().enumerate() {
        let tu = nodes[u].timestamp;
        let later = chrono[pos + 1..]
            .iter()
            .filter(|&&v| nodes[v].timestamp > tu)
            .take(cfg.temporal_successors);
        for &v in later {
            edges.push(Edge {
                src: u,
                dst: v,
                kind: EdgeKind::Temporal,
            });
        }
    }

    let mut g = WindowGraph::new(bucket.index, bucket.start, bucket.end, nodes, edges, Vec::new());
    let annotations: Vec<(String, CausalPair)> = bucket
        .records
        .iter()
        .flat_map(|r| {
            r.causal_relation
                .pairs
                .iter()
                .map(move |p| (r.tweet_id.clone(), p.clone()))
        })
        .collect();
    g.candidate_pairs = generate_candidate_pairs(&g, &annotations, cfg.cross_tweet_pairs)?;
    Ok(g)
}

/// Every ordered pair of distinct events sharing a tweet, labelled 1 exactly
/// when it matches an annotated `(CAUSE, EFFECT)`. With `cross_tweet`, pairs
/// spanning tweets are appended with label 0.
pub fn generate_candidate_pairs(
    g: &WindowGraph,
    annotations: &[(String, CausalPair)],
    cross_tweet: bool,
) -> Result<Vec<CandidatePair>> {
    let mut index: HashMap<(&str, &str), usize> = HashMap::new();
    let mut tweets: Vec<(&str, Vec<usize>)> = Vec::new();
    for n in g.event_nodes() {
        let tid = n.origin.tweet_id.as_str();
        let eid = n.origin.event_id.as_deref().unwrap_or_default();
        index.insert((tid, eid), n.id);
        match tweets.last_mut() {
            Some((t, ids)) if *t == tid => ids.push(n.id),
            _ => tweets.push((tid, vec![n.id])),
        }
    }
    let mut positive = HashSet::new();
    for (tid, p) in annotations {
        let lookup = |eid: &str| {
            index.get(&(tid.as_str(), eid)).copied().ok_or_else(|| {
                Error::Consistency(format!("annotation references unknown event {tid}/{eid}"))
            })
        };
        positive.insert((lookup(&p.cause)?, lookup(&p.effect)?));
    }

    let mut pairs = Vec::new();
    for (_, ids) in &tweets {
        for &a in ids {
            for &b in ids {
                if a != b {
                    pairs.push(CandidatePair {
                        src: a,
                        dst: b,
                        label: positive.contains(&(a, b)) as u8,
                    });
                }
            }
        }
    }
    if cross_tweet {
        for (i, (_, xs)) in tweets.iter().enumerate() {
            for (j, (_, ys)) in tweets.iter().enumerate() {
                if i == j {
                    continue;
                }
                for &a in xs {
                    for &b in ys {
                        pairs.push(CandidatePair {
                            src: a,
                            dst: b,
                            label: 0,
                        });
                    }
                }
            }
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct GraphStats {
    pub event_nodes: usize,
    pub spatial_nodes: usize,
    pub temporal_nodes: usize,
    pub contextual_edges: usize,
    pub spatial_edges: usize,
    pub temporal_edges: usize,
    pub attribute_edges: usize,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
}

impl std::ops::AddAssign for GraphStats {
    fn add_assign(&mut self, o: Self) {
        self.event_nodes += o.event_nodes;
        self.spatial_nodes += o.spatial_nodes;
        self.temporal_nodes += o.temporal_nodes;
        self.contextual_edges += o.contextual_edges;
        self.spatial_edges += o.spatial_edges;
        self.temporal_edges += o.temporal_edges;
        self.attribute_edges += o.attribute_edges;
        self.positive_pairs += o.positive_pairs;
        self.negative_pairs += o.negative_pairs;
    }
}

pub fn graph_stats(g: &WindowGraph) -> GraphStats {
    let mut s = GraphStats::default();
    for n in &g.nodes {
        match n.kind {
            NodeKind::Event => s.event_nodes += 1,
            NodeKind::Spatial => s.spatial_nodes += 1,
            NodeKind::Temporal => s.temporal_nodes += 1,
        }
    }
    for e in &g.edges {
        match e.kind {
            EdgeKind::Contextual => s.contextual_edges += 1,
            EdgeKind::Spatial => s.spatial_edges += 1,
            EdgeKind::Temporal => s.temporal_edges += 1,
            EdgeKind::Attribute => s.attribute_edges += 1,
        }
    }
    for p in &g.candidate_pairs {
        if p.label == 1 {
            s.positive_pairs += 1;
        } else {
            s.negative_pairs += 1;
        }
    }
    s
}

/// Partitions sorted records and builds every window graph.
pub fn build_graphs(
    records: &[TweetRecord],
    features: &FeatureTable,
    cfg: &WindowConfig,
    exec: Exec,
) -> Result<Vec<WindowGraph>> {
    cfg.validate()?;
    let buckets = partition_windows(records, cfg.window_secs)?;
    par::map(exec, &buckets, |b| build_window_graph(b, features, cfg))
        .into_iter()
        .collect()
}

pub fn write_graphs(path: impl AsRef<Path>, graphs: &[WindowGraph]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for g in graphs {
        text.push_str(&serde_json::to_string(g)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Centroid of a record, if it carries coordinates.
pub fn record_centroid(r: &TweetRecord) -> Option<LatLon> {
    r.bounding_box.map(|b| b.centroid())
}
