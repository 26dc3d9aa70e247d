//! Annotated tweet records: JSON Lines parsing, validation and splitting.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Exec};

/// Token-level causal role tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RoleTag {
    Outside,
    Cause,
    Effect,
}

impl RoleTag {
    pub fn as_str(self) -> &'static str {
        match self {
            RoleTag::Outside => "O",
            RoleTag::Cause => "I-C",
            RoleTag::Effect => "I-E",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "O" => Some(RoleTag::Outside),
            "I-C" => Some(RoleTag::Cause),
            "I-E" => Some(RoleTag::Effect),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventMention {
    pub id: String,
    pub trigger: String,
    pub arguments: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CausalPair {
    #[serde(rename = "CAUSE")]
    pub cause: String,
    #[serde(rename = "EFFECT")]
    pub effect: String,
}

/// `relation` is derived: it is true exactly when `pairs` is non-empty.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CausalAnnotation {
    pub pairs: Vec<CausalPair>,
}

impl CausalAnnotation {
    pub fn relation(&self) -> bool {
        !self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    /// Great-circle distance in kilometres.
    pub fn haversine_km(self, other: LatLon) -> f64 {
        const EARTH_RADIUS_KM: f64 = 6371.0088;
        let (p1, p2) = (self.lat.to_radians(), other.lat.to_radians());
        let dp = p2 - p1;
        let dl = (other.lon - self.lon).to_radians();
        let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
        2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub corners: [LatLon; 4],
}

impl BoundingBox {
    /// Arithmetic mean of the four corners.
    pub fn centroid(&self) -> LatLon {
        let lat = self.corners.iter().map(|c| c.lat).sum::<f64>() / 4.0;
        let lon = self.corners.iter().map(|c| c.lon).sum::<f64>() / 4.0;
        LatLon { lat, lon }
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.corners.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "({},{})", c.lat, c.lon)?;
        }
        Ok(())
    }
}

pub fn bbox_centroid(b: &BoundingBox) -> LatLon {
    b.centroid()
}

/// Parses `"(lat1,lon1),(lat2,lon2),(lat3,lon3),(lat4,lon4)"`.
pub fn parse_bounding_box(s: &str) -> Result<BoundingBox> {
    let mut corners = Vec::with_capacity(4);
    let mut rest = s.trim();
    while !rest.is_empty() {
        let open = rest
            .strip_prefix('(')
            .ok_or_else(|| Error::Format(format!("expected '(' in bounding box {s:?}")))?;
        let close = open
            .find(')')
            .ok_or_else(|| Error::Format(format!("unclosed '(' in bounding box {s:?}")))?;
        let (lat, lon) = open[..close]
            .split_once(',')
            .ok_or_else(|| Error::Format(format!("corner without ',' in {s:?}")))?;
        let lat = parse_coord(lat, 90.0, "latitude")?;
        let lon = parse_coord(lon, 180.0, "longitude")?;
        corners.push(LatLon { lat, lon });
        rest = open[close + 1..].trim_start();
        if let Some(r) = rest.strip_prefix(',') {
            rest = r.trim_start();
            if rest.is_empty() {
                return Err(Error::Format(format!("trailing ',' in bounding box {s:?}")));
            }
        } else if !rest.is_empty() {
            return Err(Error::Format(format!("unexpected text in bounding box {s:?}")));
        }
    }
    let corners: [LatLon; 4] = corners.try_into().map_err(|c: Vec<LatLon>| {
        Error::Format(format!("bounding box needs 4 corners, got {}", c.len()))
    })?;
    Ok(BoundingBox { corners })
}

fn parse_coord(s: &str, bound: f64, what: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("{what} {s:?} is not a number")))?;
    if !v.is_finite() || v.abs() > bound {
        return Err(Error::Format(format!("{what} {v} outside [-{bound}, {bound}]")));
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TweetRecord {
    pub tweet_id: String,
    pub tweet_text: String,
    pub tokens: Vec<String>,
    pub events: Vec<EventMention>,
    pub causal_relation: CausalAnnotation,
    pub mask: Vec<RoleTag>,
    pub date_str: String,
    pub date_numeric: i64,
    pub geolocation: Option<String>,
    pub bounding_box: Option<BoundingBox>,
    /// Supplementary count of distinct location mentions in the text.
    pub location_mentions: Option<u32>,
    /// Supplementary location statistic in [0, 1] for the reserved spatial slot.
    pub location_signal: Option<f64>,
}

impl TweetRecord {
    pub fn event(&self, id: &str) -> Option<&EventMention> {
        self.events.iter().find(|e| e.id == id)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&WireTweet::from(self)).expect("tweet serialization cannot fail")
    }
}

// Wire format. Field order follows the published schema.

#[derive(Serialize, Deserialize)]
struct WireEvent {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    trigger: Option<String>,
    #[serde(default)]
    arguments: Option<BTreeMap<String, String>>,
}

#[derive(Serialize, Deserialize)]
struct WireCausal {
    #[serde(default)]
    relation: Option<bool>,
    #[serde(default)]
    pairs: Option<Vec<WirePair>>,
}

#[derive(Serialize, Deserialize)]
struct WirePair {
    #[serde(rename = "CAUSE", default)]
    cause: Option<String>,
    #[serde(rename = "EFFECT", default)]
    effect: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum StrOrInt {
    Int(i64),
    Str(String),
}

#[derive(Serialize, Deserialize)]
struct WireTweet {
    #[serde(default)]
    tweet_text: Option<String>,
    #[serde(default)]
    tokens: Option<Vec<String>>,
    #[serde(default)]
    events: Option<Vec<WireEvent>>,
    #[serde(default)]
    causal_relation: Option<WireCausal>,
    #[serde(default)]
    mask: Option<Vec<String>>,
    #[serde(default)]
    tweet_id: Option<StrOrInt>,
    #[serde(default)]
    date_str: Option<String>,
    #[serde(default)]
    date_numeric: Option<StrOrInt>,
    #[serde(default)]
    geolocation: Option<String>,
    #[serde(default)]
    bounding_box: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    location_mentions: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    location_signal: Option<f64>,
}

impl From<&TweetRecord> for WireTweet {
    fn from(r: &TweetRecord) -> Self {
        WireTweet {
            tweet_text: Some(r.tweet_text.clone()),
            tokens: Some(r.tokens.clone()),
            events: Some(
                r.events
                    .iter()
                    .map(|e| WireEvent {
                        id: Some(e.id.clone()),
                        trigger: Some(e.trigger.clone()),
                        arguments: Some(e.arguments.clone()),
                    })
                    .collect(),
            ),
            causal_relation: Some(WireCausal {
                relation: Some(r.causal_relation.relation()),
                pairs: Some(
                    r.causal_relation
                        .pairs
                        .iter()
                        .map(|p| WirePair {
                            cause: Some(p.cause.clone()),
                            effect: Some(p.effect.clone()),
                        })
                        .collect(),
                ),
            }),
            mask: Some(r.mask.iter().map(|m| m.as_str().to_string()).collect()),
            tweet_id: Some(StrOrInt::Str(r.tweet_id.clone())),
            date_str: Some(r.date_str.clone()),
            date_numeric: Some(StrOrInt::Int(r.date_numeric)),
            geolocation: Some(r.geolocation.clone().unwrap_or_default()),
            bounding_box: Some(r.bounding_box.map(|b| b.to_string()).unwrap_or_default()),
            location_mentions: r.location_mentions,
            location_signal: r.location_signal,
        }
    }
}

fn required<T>(v: Option<T>, line: usize, field: &str) -> Result<T> {
    v.ok_or_else(|| Error::validation(line, field, "missing required field"))
}

/// Parses and validates one JSON object. `line` is only used in error messages.
pub fn parse_tweet(text: &str, line: usize) -> Result<TweetRecord> {
    let wire: WireTweet = serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })?;

    let tweet_id = match required(wire.tweet_id, line, "tweet_id")? {
        StrOrInt::Str(s) => s,
        StrOrInt::Int(i) => i.to_string(),
    };
    if tweet_id.is_empty() {
        return Err(Error::validation(line, "tweet_id", "empty id"));
    }
    let tweet_text = required(wire.tweet_text, line, "tweet_text")?;
    let tokens = required(wire.tokens, line, "tokens")?;

    let mask = required(wire.mask, line, "mask")?
        .iter()
        .map(|m| {
            RoleTag::parse(m)
                .ok_or_else(|| Error::validation(line, "mask", format!("unknown tag {m:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if mask.len() != tokens.len() {
        return Err(Error::validation(
            line,
            "mask",
            format!("{} tags for {} tokens", mask.len(), tokens.len()),
        ));
    }

    let mut events = Vec::new();
    let mut seen = HashSet::new();
    for ev in required(wire.events, line, "events")? {
        let id = required(ev.id, line, "events.id")?;
        let trigger = required(ev.trigger, line, "events.trigger")?;
        if trigger.trim().is_empty() {
            return Err(Error::validation(line, "events.trigger", format!("empty trigger for {id}")));
        }
        if !seen.insert(id.clone()) {
            return Err(Error::validation(line, "events.id", format!("duplicate event id {id}")));
        }
        events.push(EventMention {
            id,
            trigger,
            arguments: ev.arguments.unwrap_or_default(),
        });
    }

    let causal = required(wire.causal_relation, line, "causal_relation")?;
    let relation = required(causal.relation, line, "causal_relation.relation")?;
    let mut pairs = Vec::new();
    for p in causal.pairs.unwrap_or_default() {
        let cause = required(p.cause, line, "causal_relation.pairs.CAUSE")?;
        let effect = required(p.effect, line, "causal_relation.pairs.EFFECT")?;
        for id in [&cause, &effect] {
            if !seen.contains(id) {
                return Err(Error::validation(
                    line,
                    "causal_relation.pairs",
                    format!("event {id} is not among the record's events"),
                ));
            }
        }
        if cause == effect {
            return Err(Error::validation(
                line,
                "causal_relation.pairs",
                format!("{cause} cannot cause itself"),
            ));
        }
        pairs.push(CausalPair { cause, effect });
    }
    if relation != !pairs.is_empty() {
        return Err(Error::validation(
            line,
            "causal_relation.relation",
            format!("relation={relation} but {} pairs", pairs.len()),
        ));
    }

    let date_str = required(wire.date_str, line, "date_str")?;
    let date_numeric = match required(wire.date_numeric, line, "date_numeric")? {
        StrOrInt::Int(i) => i,
        StrOrInt::Str(s) => s
            .trim()
            .parse()
            .map_err(|_| Error::validation(line, "date_numeric", format!("{s:?} is not an integer")))?,
    };
    if date_numeric <= 0 {
        return Err(Error::validation(line, "date_numeric", "must be positive"));
    }

    let geolocation = wire.geolocation.filter(|g| !g.trim().is_empty());
    let bounding_box = match wire.bounding_box.as_deref().map(str::trim) {
        None | Some("") => None,
        Some(s) => Some(
            parse_bounding_box(s).map_err(|e| Error::validation(line, "bounding_box", e.to_string()))?,
        ),
    };
    if let Some(v) = wire.location_signal {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::validation(line, "location_signal", "must lie in [0, 1]"));
        }
    }

    Ok(TweetRecord {
        tweet_id,
        tweet_text,
        tokens,
        events,
        causal_relation: CausalAnnotation { pairs },
        mask,
        date_str,
        date_numeric,
        geolocation,
        bounding_box,
        location_mentions: wire.location_mentions,
        location_signal: wire.location_signal,
    })
}

/// Outcome of validating a dataset file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub record_count: usize,
    pub error_count: usize,
    /// First errors in line order, at most [`ValidationReport::MAX_LISTED`].
    pub errors: Vec<String>,
}

impl ValidationReport {
    pub const MAX_LISTED: usize = 10;

    pub fn is_clean(&self) -> bool {
        self.error_count == 0
    }

    fn push(&mut self, err: &Error) {
        self.error_count += 1;
        if self.errors.len() < Self::MAX_LISTED {
            self.errors.push(err.to_string());
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "records: {}", self.record_count)?;
        writeln!(f, "errors: {}", self.error_count)?;
        for e in &self.errors {
            writeln!(f, "  {e}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub records: Vec<TweetRecord>,
    pub report: ValidationReport,
}

/// Parses every non-blank line; invalid lines are counted in the report and
/// skipped. Duplicate tweet ids are reported against the later line.
pub fn parse_lines(text: &str, exec: Exec) -> Dataset {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l))
        .collect();
    let parsed = par::map(exec, &lines, |&(n, l)| parse_tweet(l, n));

    let mut out = Dataset::default();
    let mut ids = HashSet::new();
    for (res, &(n, _)) in parsed.into_iter().zip(&lines) {
        match res {
            Ok(rec) if !ids.insert(rec.tweet_id.clone()) => {
                let err = Error::validation(n, "tweet_id", format!("duplicate id {}", rec.tweet_id));
                out.report.push(&err);
            }
            Ok(rec) => out.records.push(rec),
            Err(e) => out.report.push(&e),
        }
    }
    out.report.record_count = out.records.len();
    out
}

pub fn read_dataset(path: impl AsRef<Path>, exec: Exec) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_lines(&text, exec))
}

pub fn write_dataset(path: impl AsRef<Path>, records: &[TweetRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for r in records {
        text.push_str(&r.to_json_line());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.validation, self.test];
        if r.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::Config(format!("split ratios must be positive, got {r:?}")));
        }
        if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios must sum to 1, got {r:?}")));
        }
        Ok(())
    }

    /// Partition sizes by largest remainder: each within one record of its
    /// exact share, summing to `n`.
    pub fn sizes(&self, n: usize) -> [usize; 3] {
        let exact = [self.train, self.validation, self.test].map(|r| r * n as f64);
        let mut sizes = exact.map(|x| x.floor() as usize);
        let mut left = n - sizes.iter().sum::<usize>().min(n);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            sizes[i] += 1;
            left -= 1;
        }
        sizes
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<TweetRecord>,
    pub validation: Vec<TweetRecord>,
    pub test: Vec<TweetRecord>,
}

impl DatasetSplit {
    pub fn sizes(&self) -> [usize; 3] {
        [self.train.len(), self.validation.len(), self.test.len()]
    }
}

/// Sorts by `(date_numeric, tweet_id)`.
pub fn sort_chronologically(records: &mut [TweetRecord]) {
    records.sort_by(|a, b| {
        a.date_numeric
            .cmp(&b.date_numeric)
            .then_with(|| a.tweet_id.cmp(&b.tweet_id))
    });
}

/// Seeded record-level shuffle, cut by `ratios`, then each partition is put
/// back in chronological order.
pub fn split_dataset(records: &[TweetRecord], ratios: SplitRatios, seed: u64) -> Result<DatasetSplit> {
    ratios.validate()?;
    let [n_train, n_val, _] = ratios.sizes(records.len());
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let take = |ids: &[usize]| {
        let mut part: Vec<TweetRecord> = ids.iter().map(|&i| records[i].clone()).collect();
        sort_chronologically(&mut part);
        part
    };
    Ok(DatasetSplit {
        train: take(&idx[..n_train]),
        validation: take(&idx[n_train..n_train + n_val]),
        test: take(&idx[n_train + n_val..]),
    })
}
