//! Per-event feature vectors: semantic mixing, calendar and location signals,
//! and their concatenation into one node feature vector.

use std::collections::HashMap;
use std::hash::Hasher;
use std::path::Path;

use chrono::{DateTime, Datelike, Timelike};
use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{EventMention, TweetRecord};
use crate::par::{self, Exec};

/// Number of temporal feature entries.
pub const TEMPORAL_DIM: usize = 4;
/// Number of spatial feature entries.
pub const SPATIAL_DIM: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticEmbedding(pub Vec<f64>);

/// `[hour/24, weekday/7, month/12, day/31]`, weekday counted from Monday = 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalFeatures(pub [f64; TEMPORAL_DIM]);

/// `[g1, g2, l1, l2, lat/90, lon/180]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialFeatures(pub [f64; SPATIAL_DIM]);

impl SpatialFeatures {
    pub fn has_coordinates(&self) -> bool {
        self.0[0] == 1.0
    }

    /// Fills the reserved `l2` slot.
    pub fn with_reserved(mut self, value: f64) -> Self {
        self.0[3] = value.clamp(0.0, 1.0);
        self
    }
}

/// `[semantic ‖ temporal ‖ spatial]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeFeatures(pub Vec<f64>);

impl NodeFeatures {
    pub fn semantic_dim(&self) -> usize {
        self.0.len() - TEMPORAL_DIM - SPATIAL_DIM
    }

    pub fn semantic(&self) -> &[f64] {
        &self.0[..self.semantic_dim()]
    }

    pub fn temporal(&self) -> &[f64] {
        let d = self.semantic_dim();
        &self.0[d..d + TEMPORAL_DIM]
    }

    pub fn spatial(&self) -> &[f64] {
        &self.0[self.semantic_dim() + TEMPORAL_DIM..]
    }

    pub fn temporal_mut(&mut self) -> &mut [f64] {
        let d = self.semantic_dim();
        &mut self.0[d..d + TEMPORAL_DIM]
    }

    pub fn spatial_mut(&mut self) -> &mut [f64] {
        let d = self.semantic_dim();
        &mut self.0[d + TEMPORAL_DIM..]
    }
}

/// Which context segments to zero before training (ablation variants).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnockoutMode {
    #[default]
    None,
    NoSpatial,
    NoTemporal,
    NoBoth,
}

impl KnockoutMode {
    pub const ALL: [KnockoutMode; 4] = [
        KnockoutMode::None,
        KnockoutMode::NoSpatial,
        KnockoutMode::NoTemporal,
        KnockoutMode::NoBoth,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            KnockoutMode::None => "none",
            KnockoutMode::NoSpatial => "no_spatial",
            KnockoutMode::NoTemporal => "no_temporal",
            KnockoutMode::NoBoth => "no_both",
        }
    }

    pub fn drops_spatial(self) -> bool {
        matches!(self, KnockoutMode::NoSpatial | KnockoutMode::NoBoth)
    }

    pub fn drops_temporal(self) -> bool {
        matches!(self, KnockoutMode::NoTemporal | KnockoutMode::NoBoth)
    }

    pub fn apply(self, f: &mut NodeFeatures) {
        if self.drops_spatial() {
            f.spatial_mut().fill(0.0);
        }
        if self.drops_temporal() {
            f.temporal_mut().fill(0.0);
        }
    }
}

impl std::str::FromStr for KnockoutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KnockoutMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown knockout mode `{s}`")))
    }
}

/// `alpha * v_trigger + (1 - alpha) * v_cls`.
pub fn combine_trigger_cls(
    v_trigger: &SemanticEmbedding,
    v_cls: &SemanticEmbedding,
    alpha: f64,
) -> Result<SemanticEmbedding> {
    if v_trigger.0.len() != v_cls.0.len() {
        return Err(Error::Shape(format!(
            "trigger embedding has {} entries, [CLS] embedding {}",
            v_trigger.0.len(),
            v_cls.0.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(SemanticEmbedding(
        v_trigger
            .0
            .iter()
            .zip(&v_cls.0)
            .map(|(t, c)| alpha * t + (1.0 - alpha) * c)
            .collect(),
    ))
}

/// Calendar features of a Unix timestamp, read in UTC.
pub fn encode_temporal(date_numeric: i64) -> TemporalFeatures {
    let t = DateTime::from_timestamp(date_numeric.max(0), 0).expect("non-negative timestamp is in range");
    TemporalFeatures([
        t.hour() as f64 / 24.0,
        t.weekday().num_days_from_monday() as f64 / 7.0,
        t.month() as f64 / 12.0,
        t.day() as f64 / 31.0,
    ])
}

/// Location signals of a tweet. `l2` is left at zero; see
/// [`SpatialFeatures::with_reserved`].
pub fn encode_spatial(record: &TweetRecord, location_mentions: u32, cap: u32) -> SpatialFeatures {
    let cap = cap.max(1);
    let g1 = record.bounding_box.is_some();
    let g2 = record.geolocation.is_some();
    let l1 = location_mentions.min(cap) as f64 / cap as f64;
    let (lat, lon) = match record.bounding_box {
        Some(b) => {
            let c = b.centroid();
            (c.lat / 90.0, c.lon / 180.0)
        }
        None => (0.0, 0.0),
    };
    SpatialFeatures([g1 as u8 as f64, g2 as u8 as f64, l1, 0.0, lat, lon])
}

pub fn fuse_features(
    sem: &SemanticEmbedding,
    tmp: &TemporalFeatures,
    spa: &SpatialFeatures,
) -> NodeFeatures {
    let mut v = Vec::with_capacity(sem.0.len() + TEMPORAL_DIM + SPATIAL_DIM);
    v.extend_from_slice(&sem.0);
    v.extend_from_slice(&tmp.0);
    v.extend_from_slice(&spa.0);
    NodeFeatures(v)
}

fn ngram_hash(seed: u64, gram: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write_u64(seed);
    h.write(gram);
    // FNV's low bits mix poorly for short keys.
    let x = h.finish();
    x ^ (x >> 29).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

fn hashed_ngrams(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    let mut add = |gram: &[u8]| {
        let h = ngram_hash(seed, gram);
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[(h % dim as u64) as usize] += sign;
    };
    for word in text.split_whitespace() {
        let padded: Vec<u8> = format!("<{}>", word.to_lowercase()).into_bytes();
        add(&padded);
        for gram in padded.windows(3) {
            add(gram);
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    } else {
        v[(ngram_hash(seed, b"\0empty") % dim as u64) as usize] = 1.0;
    }
    v
}

/// Deterministic stand-in for an encoder: unit vectors from signed feature
/// hashing of character trigrams. Returns `(v_trigger, v_cls)`.
pub fn hash_embed(trigger: &str, context: &str, dim: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let dim = dim.max(1);
    (
        hashed_ngrams(trigger, dim, seed),
        hashed_ngrams(context, dim, seed ^ 0x5bd1_e995),
    )
}

/// One line of an embeddings file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub tweet_id: String,
    pub event_id: String,
    pub v_trigger: Vec<f64>,
    pub v_cls: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct EmbeddingTable {
    dim: usize,
    rows: HashMap<(String, String), (Vec<f64>, Vec<f64>)>,
}

impl EmbeddingTable {
    pub fn from_rows(rows: impl IntoIterator<Item = EmbeddingRow>) -> Result<Self> {
        let mut table = EmbeddingTable::default();
        for (i, row) in rows.into_iter().enumerate() {
            if table.rows.is_empty() {
                table.dim = row.v_trigger.len();
            }
            if row.v_trigger.len() != table.dim || row.v_cls.len() != table.dim || table.dim == 0 {
                return Err(Error::Shape(format!(
                    "embedding row {} ({}/{}) has dims {}/{}, expected {}",
                    i + 1,
                    row.tweet_id,
                    row.event_id,
                    row.v_trigger.len(),
                    row.v_cls.len(),
                    table.dim
                )));
            }
            if row.v_trigger.iter().chain(&row.v_cls).any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "embedding for {}/{}",
                    row.tweet_id, row.event_id
                )));
            }
            table
                .rows
                .insert((row.tweet_id, row.event_id), (row.v_trigger, row.v_cls));
        }
        Ok(table)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rows = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str::<EmbeddingRow>(l).map_err(|e| Error::Parse {
                    line: i + 1,
                    message: format!("{}: {e}", path.display()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(rows)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, tweet_id: &str, event_id: &str) -> Option<&(Vec<f64>, Vec<f64>)> {
        self.rows.get(&(tweet_id.to_string(), event_id.to_string()))
    }
}

pub fn write_embeddings(path: impl AsRef<Path>, rows: &[EmbeddingRow]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Where `(v_trigger, v_cls)` pairs come from.
#[derive(Debug, Clone)]
pub enum EmbeddingSource {
    Table(EmbeddingTable),
    Hash { seed: u64, dim: usize },
}

impl EmbeddingSource {
    pub fn dim(&self) -> usize {
        match self {
            EmbeddingSource::Table(t) => t.dim(),
            EmbeddingSource::Hash { dim, .. } => *dim,
        }
    }

    pub fn resolve(&self, record: &TweetRecord, event: &EventMention) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            EmbeddingSource::Table(t) => t.get(&record.tweet_id, &event.id).cloned().ok_or_else(|| {
                Error::Consistency(format!(
                    "no embedding for event {} of tweet {}",
                    event.id, record.tweet_id
                ))
            }),
            EmbeddingSource::Hash { seed, dim } => {
                Ok(hash_embed(&event.trigger, &record.tweet_text, *dim, *seed))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Weight of the trigger embedding against the [CLS] embedding.
    pub alpha: f64,
    /// Semantic dimension used by the hash encoder.
    pub dim: usize,
    pub hash_seed: u64,
    /// Cap K for the normalised location-mention count.
    pub mention_cap: u32,
    /// Populate the reserved spatial slot from the record's `location_signal`.
    pub use_location_signal: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            alpha: 0.7,
            dim: 64,
            hash_seed: 0x00c0_ffee,
            mention_cap: 5,
            use_location_signal: false,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("features.alpha {} outside [0, 1]", self.alpha)));
        }
        if self.dim == 0 || self.mention_cap == 0 {
            return Err(Error::Config("features.dim and features.mention_cap must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn event_features(
    record: &TweetRecord,
    event: &EventMention,
    source: &EmbeddingSource,
    cfg: &FeatureConfig,
) -> Result<NodeFeatures> {
    let (vt, vc) = source.resolve(record, event)?;
    let sem = combine_trigger_cls(&SemanticEmbedding(vt), &SemanticEmbedding(vc), cfg.alpha)?;
    let tmp = encode_temporal(record.date_numeric);
    let mut spa = encode_spatial(record, record.location_mentions.unwrap_or(0), cfg.mention_cap);
    if cfg.use_location_signal {
        spa = spa.with_reserved(record.location_signal.unwrap_or(0.0));
    }
    Ok(fuse_features(&sem, &tmp, &spa))
}

/// Fused features for every event, keyed by `(tweet_id, event_id)`.
#[derive(Debug, Clone, Default)]
pub struct FeatureTable {
    dim: usize,
    map: HashMap<(String, String), NodeFeatures>,
}

impl FeatureTable {
    /// Full node feature dimension (semantic + 10).
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, tweet_id: &str, event_id: &str) -> Option<&NodeFeatures> {
        self.map.get(&(tweet_id.to_string(), event_id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut NodeFeatures> {
        self.map.values_mut()
    }

    pub fn insert(&mut self, tweet_id: &str, event_id: &str, f: NodeFeatures) {
        self.dim = f.0.len();
        self.map.insert((tweet_id.to_string(), event_id.to_string()), f);
    }
}

pub fn compute_features(
    records: &[TweetRecord],
    source: &EmbeddingSource,
    cfg: &FeatureConfig,
    exec: Exec,
) -> Result<FeatureTable> {
    cfg.validate()?;
    let per_record = par::map(exec, records, |r| {
        r.events
            .iter()
            .map(|e| event_features(r, e, source, cfg).map(|f| (e.id.clone(), f)))
            .collect::<Result<Vec<_>>>()
    });
    let mut table = FeatureTable {
        dim: source.dim() + TEMPORAL_DIM + SPATIAL_DIM,
        map: HashMap::new(),
    };
    for (r, feats) in records.iter().zip(per_record) {
        for (id, f) in feats? {
            table.map.insert((r.tweet_id.clone(), id), f);
        }
    }
    Ok(table)
}
