//! Synthetic corpora with planted causal structure.
//!
//! A tweet either carries a causal chain `e0 -> e1 (-> e2)` or a handful of
//! unrelated events. Every event has a chain position `k` in `{0, 1, 2}`: its
//! trigger comes from that position's vocabulary and its embedding is the
//! hashed trigger plus `semantic_signal * c_k` for a random direction `c_k`.
//! Non-causal tweets either copy the chain's positions (with probability
//! `decoy_chain_prob`) or draw each `k` independently, so text alone cannot
//! tell a chain from a decoy.
//!
//! The rest of the signal sits in the tweet's context. The region is split
//! into a hazard side (west) and a safe side, the day into a hazard band
//! (00-12 UTC) and a safe band. Each tweet lands in one of the four cells
//! uniformly, so tweet density says nothing, and is then causal with
//! probability [`causal_prob`]. At full strength a tweet hazardous on both
//! cues is always causal and one safe on both never is; with both signals at
//! zero the context is independent of the label.

use std::collections::BTreeMap;

use chrono::DateTime;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::features::{hash_embed, EmbeddingRow, FeatureTable};
use crate::ingest::{
    sort_chronologically, BoundingBox, CausalAnnotation, CausalPair, EventMention, LatLon, RoleTag, TweetRecord,
};

pub use crate::features::KnockoutMode;

const VOCAB: [&[&str]; 3] = [
    &["rain", "storm", "hurricane", "wind", "surge", "downpour", "landfall", "tornado"],
    &["flood", "flooding", "outage", "collapse", "overflow", "blackout", "washout", "leak"],
    &["rescue", "evacuation", "shelter", "closure", "relief", "cleanup", "donation", "curfew"],
];

const FILLER: &[&str] = &[
    "the", "near", "after", "downtown", "reported", "road", "people", "now", "still", "county", "update", "via",
    "heavy", "across", "area", "local", "again", "tonight", "residents", "officials",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_tweets: usize,
    /// Inclusive range of events per tweet; the lower bound is at least 2.
    pub events_per_tweet: [usize; 2],
    /// Probability that a tweet carries a planted chain. The default gives
    /// roughly one positive per three negative ordered pairs.
    pub causal_tweet_prob: f64,
    pub spatial_signal: f64,
    pub temporal_signal: f64,
    /// Length of the planted position direction added to trigger embeddings.
    pub semantic_signal: f64,
    /// Probability that a non-causal tweet reuses the chain's positions, so
    /// that only its context tells it apart from a causal one.
    pub decoy_chain_prob: f64,
    pub dim: usize,
    /// `[start, end)` in Unix seconds.
    pub time_span: [i64; 2],
    /// `[lat_min, lat_max, lon_min, lon_max]` in degrees.
    pub region: [f64; 4],
    /// Probability that a tweet carries a place name.
    pub geolocation_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_tweets: 2000,
            events_per_tweet: [2, 3],
            causal_tweet_prob: 2.0 / 3.0,
            spatial_signal: 1.0,
            temporal_signal: 1.0,
            semantic_signal: 1.0,
            decoy_chain_prob: 1.0,
            dim: 64,
            // 2017-08-26 00:00 to 2017-08-31 00:00 UTC.
            time_span: [1_503_705_600, 1_504_137_600],
            region: [25.0, 50.0, -125.0, -65.0],
            geolocation_prob: 0.5,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("synth.{m}")));
        if self.n_tweets == 0 {
            return fail("n_tweets must be at least 1".into());
        }
        let [lo, hi] = self.events_per_tweet;
        if lo < 2 || hi < lo || hi > 26 {
            return fail(format!("events_per_tweet [{lo}, {hi}] must satisfy 2 <= lo <= hi <= 26"));
        }
        for (name, p) in [
            ("causal_tweet_prob", self.causal_tweet_prob),
            ("spatial_signal", self.spatial_signal),
            ("temporal_signal", self.temporal_signal),
            ("decoy_chain_prob", self.decoy_chain_prob),
            ("geolocation_prob", self.geolocation_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} {p} outside [0, 1]"));
            }
        }
        let p = self.causal_tweet_prob;
        if (self.spatial_signal > 0.0 || self.temporal_signal > 0.0) && !(0.25..=0.75).contains(&p) {
            return fail(format!("causal_tweet_prob {p} must lie in [0.25, 0.75] when a context signal is set"));
        }
        if !(self.semantic_signal >= 0.0) || !self.semantic_signal.is_finite() {
            return fail("semantic_signal must be non-negative".into());
        }
        if self.dim == 0 {
            return fail("dim must be positive".into());
        }
        let [t0, t1] = self.time_span;
        if t0 <= 0 || t1 <= t0 {
            return fail("time_span must be a positive, non-empty interval".into());
        }
        let [la0, la1, lo0, lo1] = self.region;
        if !(-90.0..=90.0).contains(&la0) || !(-90.0..=90.0).contains(&la1) || la1 <= la0 {
            return fail("region latitudes must be ordered and within [-90, 90]".into());
        }
        if !(-180.0..=180.0).contains(&lo0) || !(-180.0..=180.0).contains(&lo1) || lo1 <= lo0 {
            return fail("region longitudes must be ordered and within [-180, 180]".into());
        }
        Ok(())
    }

    /// Expected share of positive ordered pairs, `p E[n-1] / E[n(n-1)]`.
    pub fn expected_positive_fraction(&self) -> f64 {
        let [lo, hi] = self.events_per_tweet;
        let k = (hi - lo + 1) as f64;
        let chain: f64 = (lo..=hi).map(|n| (n - 1) as f64).sum::<f64>() / k;
        let pairs: f64 = (lo..=hi).map(|n| (n * (n - 1)) as f64).sum::<f64>() / k;
        self.causal_tweet_prob * chain / pairs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    /// Chronologically sorted records.
    pub records: Vec<TweetRecord>,
    pub embeddings: Vec<EmbeddingRow>,
    /// Every planted `(tweet_id, pair)`; identical to the emitted annotations.
    pub planted: Vec<(String, CausalPair)>,
}

impl SynthCorpus {
    pub fn positive_fraction(&self) -> f64 {
        let pairs: usize = self.records.iter().map(|r| r.events.len() * (r.events.len() - 1)).sum();
        if pairs == 0 {
            0.0
        } else {
            self.planted.len() as f64 / pairs as f64
        }
    }
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn gaussian_direction<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    // Box-Muller; only the direction matters.
    let mut v: Vec<f64> = (0..dim)
        .map(|_| {
            let u1: f64 = 1.0 - rng.random::<f64>();
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect();
    unit(&mut v);
    v
}

/// Probability that a tweet in the given cell carries a chain:
/// `p + (σs·s + σt·t) / 4 + σs·σt·s·t·(1 - 2p) / 2` with `s`, `t` = +1 on the
/// hazard side of each cue and -1 otherwise. Multilinear in the signals, it
/// averages to `p` over the cells and stays in `[0, 1]` for `p` in
/// `[1/4, 3/4]`.
pub fn causal_prob(cfg: &SynthConfig, hazard_side: bool, hazard_band: bool) -> f64 {
    let sign = |b: bool| if b { 1.0 } else { -1.0 };
    let (s, t) = (sign(hazard_side), sign(hazard_band));
    let (ss, st) = (cfg.spatial_signal, cfg.temporal_signal);
    let p = cfg.causal_tweet_prob;
    (p + (ss * s + st * t) / 4.0 + ss * st * s * t * (1.0 - 2.0 * p) / 2.0).clamp(0.0, 1.0)
}

fn draw_time<R: Rng>(rng: &mut R, hazard_band: bool, cfg: &SynthConfig) -> i64 {
    let [t0, t1] = cfg.time_span;
    // Rejection keeps the draw inside the span for spans that cut a day short.
    for _ in 0..1000 {
        let t = rng.random_range(t0..t1);
        let hour = t.rem_euclid(86_400) / 3600;
        if (hour < 12) == hazard_band {
            return t;
        }
    }
    rng.random_range(t0..t1)
}

fn draw_place<R: Rng>(rng: &mut R, hazard_side: bool, cfg: &SynthConfig) -> LatLon {
    let [la0, la1, lo0, lo1] = cfg.region;
    let mid = (lo0 + lo1) / 2.0;
    let (a, b) = if hazard_side { (lo0, mid) } else { (mid, lo1) };
    let round = |x: f64| (x * 1e4).round() / 1e4;
    LatLon {
        lat: round(rng.random_range(la0..la1)),
        lon: round(rng.random_range(a..b)),
    }
}

fn bbox_around(c: LatLon) -> BoundingBox {
    let d = 0.05;
    let lat = |x: f64| ((x * 1e4).round() / 1e4).clamp(-90.0, 90.0);
    let lon = |x: f64| ((x * 1e4).round() / 1e4).clamp(-180.0, 180.0);
    BoundingBox {
        corners: [
            LatLon { lat: lat(c.lat - d), lon: lon(c.lon - d) },
            LatLon { lat: lat(c.lat - d), lon: lon(c.lon + d) },
            LatLon { lat: lat(c.lat + d), lon: lon(c.lon + d) },
            LatLon { lat: lat(c.lat + d), lon: lon(c.lon - d) },
        ],
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let directions: Vec<Vec<f64>> = (0..3).map(|_| gaussian_direction(&mut rng, cfg.dim)).collect();
    let hash_seed = rng.random::<u64>();

    let mut records = Vec::with_capacity(cfg.n_tweets);
    let mut embeddings = Vec::new();
    for i in 0..cfg.n_tweets {
        let n = rng.random_range(cfg.events_per_tweet[0]..=cfg.events_per_tweet[1]);
        let hazard_side = rng.random_bool(0.5);
        let hazard_band = rng.random_bool(0.5);
        let causal = rng.random_bool(causal_prob(cfg, hazard_side, hazard_band));
        // Chain positions, in chain order for causal tweets.
        let positions: Vec<usize> = if causal || rng.random_bool(cfg.decoy_chain_prob) {
            (0..n).map(|k| k.min(2)).collect()
        } else {
            (0..n).map(|_| rng.random_range(0..3)).collect()
        };
        // A chain longer than three repeats the effect position; keep the
        // planted links to consecutive events.
        let triggers: Vec<&str> = positions
            .iter()
            .map(|&k| *VOCAB[k].choose(&mut rng).expect("non-empty vocabulary"))
            .collect();

        // Events are listed in random order so list position says nothing.
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let ids: Vec<String> = {
            let mut ids = vec![String::new(); n];
            for (slot, &ev) in order.iter().enumerate() {
                ids[ev] = format!("evt_{:03}", slot + 1);
            }
            ids
        };
        let pairs: Vec<CausalPair> = if causal {
            (0..n - 1)
                .map(|k| CausalPair {
                    cause: ids[k].clone(),
                    effect: ids[k + 1].clone(),
                })
                .collect()
        } else {
            Vec::new()
        };

        let ts = draw_time(&mut rng, hazard_band, cfg);
        let place = draw_place(&mut rng, hazard_side, cfg);
        let geolocation = rng
            .random_bool(cfg.geolocation_prob)
            .then(|| format!("cell {:.0},{:.0}", place.lat.floor(), place.lon.floor()));

        // Tokens: triggers in listing order interleaved with filler.
        let mut tokens = Vec::new();
        let mut mask = Vec::new();
        let mut events = Vec::with_capacity(n);
        for &ev in &order {
            for _ in 0..rng.random_range(1..=3) {
                tokens.push(FILLER.choose(&mut rng).expect("non-empty filler").to_string());
                mask.push(RoleTag::Outside);
            }
            tokens.push(triggers[ev].to_string());
            let is_cause = pairs.iter().any(|p| p.cause == ids[ev]);
            let is_effect = pairs.iter().any(|p| p.effect == ids[ev]);
            mask.push(match (is_cause, is_effect) {
                (true, _) => RoleTag::Cause,
                (false, true) => RoleTag::Effect,
                _ => RoleTag::Outside,
            });
            let mut arguments = BTreeMap::new();
            if let Some(g) = &geolocation {
                arguments.insert("location".to_string(), g.clone());
            }
            events.push(EventMention {
                id: ids[ev].clone(),
                trigger: triggers[ev].to_string(),
                arguments,
            });
        }
        tokens.push(FILLER.choose(&mut rng).expect("non-empty filler").to_string());
        mask.push(RoleTag::Outside);
        let tweet_text = tokens.join(" ");
        let tweet_id = (900_000_000_000_000_000u64 + i as u64).to_string();

        for &ev in &order {
            let (mut v_trigger, v_cls) = hash_embed(triggers[ev], &tweet_text, cfg.dim, hash_seed);
            for (x, c) in v_trigger.iter_mut().zip(&directions[positions[ev]]) {
                *x += cfg.semantic_signal * c;
            }
            unit(&mut v_trigger);
            embeddings.push(EmbeddingRow {
                tweet_id: tweet_id.clone(),
                event_id: ids[ev].clone(),
                v_trigger,
                v_cls,
            });
        }

        records.push(TweetRecord {
            tweet_id,
            tweet_text,
            tokens,
            events,
            causal_relation: CausalAnnotation { pairs },
            mask,
            date_str: DateTime::from_timestamp(ts, 0)
                .expect("span is in range")
                .format("%a %b %d %H:%M:%S +0000 %Y")
                .to_string(),
            date_numeric: ts,
            geolocation,
            bounding_box: Some(bbox_around(place)),
            location_mentions: None,
            location_signal: None,
        });
    }
    sort_chronologically(&mut records);
    let planted = records
        .iter()
        .flat_map(|r| r.causal_relation.pairs.iter().map(move |p| (r.tweet_id.clone(), p.clone())))
        .collect();
    Ok(SynthCorpus {
        records,
        embeddings,
        planted,
    })
}

/// Copy of `features` with the segments `mode` drops set to zero.
pub fn knockout(features: &FeatureTable, mode: KnockoutMode) -> FeatureTable {
    let mut out = features.clone();
    out.values_mut().for_each(|f| mode.apply(f));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: KnockoutMode,
    pub report: EvalReport,
    pub best_epoch: usize,
    pub epochs: usize,
}

/// Trains one model per knockout mode with identical seeds and settings and
/// reports each on the test split.
pub fn run_ablation(
    corpus: &SynthCorpus,
    cfg: &crate::pipeline::RunConfig,
    exec: crate::Exec,
) -> Result<Vec<AblationRow>> {
    let table = crate::features::EmbeddingTable::from_rows(corpus.embeddings.iter().cloned())?;
    crate::pipeline::ablation(
        corpus.records.clone(),
        &crate::features::EmbeddingSource::Table(table),
        cfg,
        exec,
    )
}
