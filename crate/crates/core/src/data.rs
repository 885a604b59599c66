//! Best-track ingestion, tweet pairing, SMOTE, splitting and the synthetic
//! dataset generator.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, Continuous, Discrete, Normal as NormalDensity};

use crate::classifier::Category;
use crate::error::{Error, Result};
use crate::rng::stage_rng;
use crate::text::{format_timestamp, parse_timestamp, write_labeled, write_lines, write_tweets, LabeledText, RawTweet};
use crate::trainer::TrainItem;

pub const BESTTRACK_HEADER: [&str; 8] = ["storm_id", "timestamp", "lat", "lon", "vmax", "rad", "mslp", "label"];
pub const ENV_FEATURES: [&str; 5] = ["lat", "lon", "vmax", "rad", "mslp"];
pub const DEFAULT_SLOT_LENGTH: i64 = 6 * 3600;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TyphoonObservation {
    pub storm_id: String,
    /// UTC seconds since the epoch.
    pub timestamp: i64,
    pub lat: f64,
    pub lon: f64,
    pub vmax: f64,
    pub rad: f64,
    pub mslp: f64,
    pub label: Category,
}

impl TyphoonObservation {
    /// Environmental features in [`ENV_FEATURES`] order.
    pub fn env(&self) -> Vec<f64> {
        vec![self.lat, self.lon, self.vmax, self.rad, self.mslp]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    /// 1-based line number in the source file (the header is line 1).
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Besttrack {
    pub observations: Vec<TyphoonObservation>,
    pub rejected: Vec<Rejection>,
}

fn parse_row(rec: &csv::StringRecord, cols: &[usize; 8]) -> std::result::Result<TyphoonObservation, String> {
    let field = |i: usize| -> std::result::Result<&str, String> {
        let v = rec.get(cols[i]).map(str::trim).unwrap_or("");
        if v.is_empty() {
            Err(format!("missing {}", BESTTRACK_HEADER[i]))
        } else {
            Ok(v)
        }
    };
    let num = |i: usize| -> std::result::Result<f64, String> {
        let v = field(i)?;
        match v.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(x),
            _ => Err(format!("invalid {} {v:?}", BESTTRACK_HEADER[i])),
        }
    };
    let storm_id = field(0)?.to_string();
    let ts = field(1)?;
    let timestamp = parse_timestamp(ts).ok_or_else(|| format!("invalid timestamp {ts:?}"))?;
    let obs = TyphoonObservation {
        storm_id,
        timestamp,
        lat: num(2)?,
        lon: num(3)?,
        vmax: num(4)?,
        rad: num(5)?,
        mslp: num(6)?,
        label: field(7)?.parse().map_err(|_| format!("unknown label {:?}", rec.get(cols[7])))?,
    };
    if !(-90.0..=90.0).contains(&obs.lat) {
        return Err(format!("latitude {} out of range", obs.lat));
    }
    if obs.vmax < 0.0 {
        return Err(format!("negative vmax {}", obs.vmax));
    }
    if !(obs.mslp > 800.0 && obs.mslp < 1100.0) {
        return Err(format!("mslp {} outside (800, 1100)", obs.mslp));
    }
    Ok(obs)
}

/// Reads a best-track CSV. Invalid rows are dropped and listed in
/// [`Besttrack::rejected`]; the rest come back sorted by storm and time.
pub fn parse_besttrack(path: &Path) -> Result<Besttrack> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let headers = reader.headers()?.clone();
    let mut cols = [0usize; 8];
    let mut missing = Vec::new();
    for (i, name) in BESTTRACK_HEADER.iter().enumerate() {
        match headers.iter().position(|h| h.trim() == *name) {
            Some(p) => cols[i] = p,
            None => missing.push(*name),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            message: format!("missing columns: {}", missing.join(", ")),
        });
    }
    let mut rows = Vec::new();
    let mut rejected = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = rec.as_ref().ok().and_then(|r| r.position()).map_or(i + 2, |p| p.line() as usize);
        match rec.map_err(|e| e.to_string()).and_then(|r| parse_row(&r, &cols)) {
            Ok(o) => rows.push((line, o)),
            Err(reason) => rejected.push(Rejection { line, reason }),
        }
    }
    rows.sort_by(|(la, a), (lb, b)| (&a.storm_id, a.timestamp, la).cmp(&(&b.storm_id, b.timestamp, lb)));
    let mut observations: Vec<TyphoonObservation> = Vec::with_capacity(rows.len());
    for (line, o) in rows {
        if let Some(prev) = observations.last() {
            if prev.storm_id == o.storm_id && prev.timestamp == o.timestamp {
                rejected.push(Rejection {
                    line,
                    reason: format!("duplicate timestamp for {}", o.storm_id),
                });
                continue;
            }
        }
        observations.push(o);
    }
    rejected.sort_by_key(|r| r.line);
    if !rejected.is_empty() {
        log::warn!("{}: dropped {} invalid rows", path.display(), rejected.len());
    }
    Ok(Besttrack { observations, rejected })
}

pub fn write_besttrack(path: &Path, observations: &[TyphoonObservation]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(BESTTRACK_HEADER)?;
    for o in observations {
        w.write_record([
            o.storm_id.clone(),
            format_timestamp(o.timestamp),
            o.lat.to_string(),
            o.lon.to_string(),
            o.vmax.to_string(),
            o.rad.to_string(),
            o.mslp.to_string(),
            o.label.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedInstance {
    pub observation: TyphoonObservation,
    pub tweets: Vec<RawTweet>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Pairing {
    pub instances: Vec<PairedInstance>,
    /// Tweets outside every slot.
    pub discarded: usize,
}

/// Assigns each tweet to the observation whose slot `[t, t + slot_length)`
/// contains it. When slots overlap the one with the latest start wins; among
/// equal starts the first observation in input order wins.
pub fn pair_tweet_batches(observations: &[TyphoonObservation], tweets: &[RawTweet], slot_length: i64) -> Result<Pairing> {
    if slot_length <= 0 {
        return Err(Error::Config(format!("slot_length must be positive, got {slot_length}")));
    }
    let mut order: Vec<usize> = (0..observations.len()).collect();
    order.sort_by_key(|&i| (observations[i].timestamp, i));
    let starts: Vec<i64> = order.iter().map(|&i| observations[i].timestamp).collect();
    let mut batches: Vec<Vec<RawTweet>> = vec![Vec::new(); observations.len()];
    let mut discarded = 0;
    for t in tweets {
        let after = starts.partition_point(|&s| s <= t.timestamp);
        if after == 0 {
            discarded += 1;
            continue;
        }
        let start = starts[after - 1];
        if t.timestamp >= start + slot_length {
            discarded += 1;
            continue;
        }
        let first = starts.partition_point(|&s| s < start);
        batches[order[first]].push(t.clone());
    }
    Ok(Pairing {
        instances: observations
            .iter()
            .cloned()
            .zip(batches)
            .map(|(observation, tweets)| PairedInstance { observation, tweets })
            .collect(),
        discarded,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmoteOutput {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Where each output row came from, indexing the input rows.
    pub origins: Vec<TrainItem>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Oversamples every class up to the majority count with points
/// `x + u * (x_nn - x)`, `x_nn` among the `k` nearest same-class rows.
/// The real rows come first, unchanged.
pub fn smote_oversample<R: Rng>(features: &[Vec<f64>], labels: &[usize], k: usize, rng: &mut R) -> Result<SmoteOutput> {
    if features.len() != labels.len() {
        return Err(Error::shape("smote_oversample", &[features.len()], &[labels.len()]));
    }
    if k < 1 {
        return Err(Error::Config("SMOTE k must be at least 1".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let majority = by_class.values().map(Vec::len).max().unwrap_or(0);
    let mut out = SmoteOutput {
        features: features.to_vec(),
        labels: labels.to_vec(),
        origins: (0..features.len()).map(TrainItem::Real).collect(),
    };
    for (&class, members) in &by_class {
        let need = majority - members.len();
        if need == 0 {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::Data(format!(
                "class {class} has a single member; SMOTE needs at least two (lower k or merge classes)"
            )));
        }
        let kk = k.min(members.len() - 1);
        let neighbors: Vec<Vec<usize>> = members
            .iter()
            .map(|&a| {
                let mut others: Vec<(f64, usize)> = members
                    .iter()
                    .filter(|&&b| b != a)
                    .map(|&b| (sq_dist(&features[a], &features[b]), b))
                    .collect();
                others.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
                others.into_iter().take(kk).map(|(_, b)| b).collect()
            })
            .collect();
        for j in 0..need {
            let slot = j % members.len();
            let base = members[slot];
            let neighbor = neighbors[slot][rng.random_range(0..kk)];
            let u: f64 = rng.random();
            let x = features[base]
                .iter()
                .zip(&features[neighbor])
                .map(|(a, b)| a + u * (b - a))
                .collect();
            out.features.push(x);
            out.labels.push(class);
            out.origins.push(TrainItem::Synthetic { base, neighbor, u });
        }
    }
    Ok(out)
}

/// Seeded shuffle-and-cut into `(train, test)` index lists, each sorted.
/// The train side gets `floor(n * ratio)` items; in stratified mode the
/// per-class shares are rounded by largest remainder.
pub fn train_test_split<R: Rng>(labels: &[usize], ratio: f64, stratified: bool, rng: &mut R) -> Result<(Vec<usize>, Vec<usize>)> {
    if labels.is_empty() {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let n_train = (labels.len() as f64 * ratio + 1e-9).floor() as usize;
    let mut idx: Vec<usize> = (0..labels.len()).collect();
    idx.shuffle(rng);
    let (mut train, mut test) = if stratified {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &i in &idx {
            groups.entry(labels[i]).or_default().push(i);
        }
        let exact: Vec<f64> = groups.values().map(|g| g.len() as f64 * ratio).collect();
        let mut take: Vec<usize> = exact.iter().map(|x| (x + 1e-9).floor() as usize).collect();
        let mut by_rem: Vec<usize> = (0..take.len()).collect();
        by_rem.sort_by(|&a, &b| (exact[b] - take[b] as f64).total_cmp(&(exact[a] - take[a] as f64)).then(a.cmp(&b)));
        let mut short = n_train.saturating_sub(take.iter().sum());
        for g in by_rem {
            if short == 0 {
                break;
            }
            take[g] += 1;
            short -= 1;
        }
        let (mut tr, mut te) = (Vec::new(), Vec::new());
        for (g, t) in groups.values().zip(take) {
            tr.extend_from_slice(&g[..t]);
            te.extend_from_slice(&g[t..]);
        }
        (tr, te)
    } else {
        let te = idx.split_off(n_train);
        (idx, te)
    };
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub const POSITIVE_WORDS: [&str; 8] = ["safe", "calm", "relief", "grateful", "hopeful", "fine", "thankful", "recovered"];
pub const NEGATIVE_WORDS: [&str; 8] = ["scared", "flooded", "destroyed", "terrible", "damage", "fear", "trapped", "devastating"];
const FILLER_WORDS: [&str; 14] = [
    "typhoon", "storm", "wind", "rain", "city", "today", "news", "update", "everyone", "coast", "tonight", "power",
    "family", "school",
];
const ENTITIES: [&str; 5] = ["Manila", "Tacloban", "Philippine Sea", "Red Cross", "Luzon"];
const NOISE_TOKENS: [&str; 4] = ["#typhoon", "@pagasa", "https://t.co/x1", "(link: http://bit.ly/abc)"];

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n: usize,
    pub seed: u64,
    pub class_priors: [f64; 4],
    /// Per-class means of lat, lon, vmax, rad, mslp.
    pub env_means: [[f64; 5]; 4],
    pub env_sd: [f64; 5],
    /// Scales how far each class's positive-tweet fraction drops below 0.5.
    pub signal_strength: f64,
    pub positive_drop: [f64; 4],
    pub fraction_noise: f64,
    pub min_tweets: usize,
    pub mean_extra_tweets: f64,
    pub slot_length: i64,
    pub sentiment_examples: usize,
    pub semantic_dim: usize,
    pub bayes_samples: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let pos = [0.0, 0.7, 2.3, 3.6];
        let means = pos.map(|p| [15.0, 130.0, 50.0 + 20.0 * p, 40.0 + 10.0 * p, 1000.0 - 15.0 * p]);
        SynthSpec {
            n: 2000,
            seed: 42,
            class_priors: [0.3, 0.3, 0.22, 0.18],
            env_means: means,
            env_sd: [5.0, 8.0, 19.6, 21.0, 16.8],
            signal_strength: 1.0,
            positive_drop: [0.0, 0.35, 0.45, 0.5],
            fraction_noise: 0.01,
            min_tweets: 10,
            mean_extra_tweets: 14.0,
            slot_length: DEFAULT_SLOT_LENGTH,
            sentiment_examples: 4000,
            semantic_dim: 200,
            bayes_samples: 20000,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        let total: f64 = self.class_priors.iter().sum();
        if self.class_priors.iter().any(|p| p.is_nan() || *p < 0.0) || (total - 1.0).abs() > 1e-9 {
            return bad(format!("class_priors must be nonnegative and sum to 1, got {:?}", self.class_priors));
        }
        if self.env_sd.iter().any(|s| s.is_nan() || *s <= 0.0) {
            return bad("env_sd entries must be positive".into());
        }
        if self.env_means.iter().flatten().any(|m| !m.is_finite()) {
            return bad("env_means must be finite".into());
        }
        if !(self.signal_strength >= 0.0 && self.fraction_noise >= 0.0 && self.mean_extra_tweets >= 0.0) {
            return bad("signal_strength, fraction_noise and mean_extra_tweets must be nonnegative".into());
        }
        if self.slot_length <= 0 || self.semantic_dim == 0 || self.bayes_samples == 0 {
            return bad("slot_length, semantic_dim and bayes_samples must be positive".into());
        }
        if self.sentiment_examples < 2 {
            return bad("sentiment_examples must be at least 2".into());
        }
        Ok(())
    }

    /// Mean positive-tweet fraction of each class.
    pub fn positive_fraction(&self) -> [f64; 4] {
        self.positive_drop.map(|d| (0.5 - self.signal_strength * d).clamp(0.0, 1.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SynthSpec,
    /// Bayes-optimal accuracy from the environmental features alone.
    pub bayes_env_only: f64,
    /// Bayes-optimal accuracy from environment, tweet count and sentiment split.
    pub bayes_combined: f64,
    pub class_counts: [usize; 4],
    pub tweets: usize,
    pub sentiment_examples: usize,
}

pub struct SynthDataset {
    pub observations: Vec<TyphoonObservation>,
    pub tweets: Vec<RawTweet>,
    pub sentiment: Vec<LabeledText>,
    /// Entity phrase (underscore-joined, lower case) to vector.
    pub semantic: BTreeMap<String, Vec<f64>>,
    pub truth: GroundTruth,
}

fn tweet_text<R: Rng>(positive: bool, rng: &mut R) -> String {
    let pool = if positive { &POSITIVE_WORDS } else { &NEGATIVE_WORDS };
    let mut words: Vec<&str> = Vec::with_capacity(7);
    for _ in 0..rng.random_range(1..=2) {
        words.push(pool[rng.random_range(0..pool.len())]);
    }
    for _ in 0..rng.random_range(2..=4) {
        words.push(FILLER_WORDS[rng.random_range(0..FILLER_WORDS.len())]);
    }
    if rng.random_bool(0.3) {
        words.push(ENTITIES[rng.random_range(0..ENTITIES.len())]);
    }
    words.shuffle(rng);
    if rng.random_bool(0.2) {
        words.push(NOISE_TOKENS[rng.random_range(0..NOISE_TOKENS.len())]);
    }
    words.join(" ")
}

fn draw_env<R: Rng>(spec: &SynthSpec, class: usize, rng: &mut R) -> [f64; 5] {
    loop {
        let mut x = [0.0; 5];
        for (j, v) in x.iter_mut().enumerate() {
            *v = spec.env_means[class][j] + spec.env_sd[j] * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        if x[2] >= 0.0 && x[4] > 800.0 && x[4] < 1100.0 && (-90.0..=90.0).contains(&x[0]) {
            return x;
        }
    }
}

fn draw_class<R: Rng>(priors: &[f64; 4], rng: &mut R) -> usize {
    let mut u: f64 = rng.random();
    for (k, p) in priors.iter().enumerate() {
        if u < *p {
            return k;
        }
        u -= p;
    }
    priors.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

fn round_to(x: f64, digits: i32) -> f64 {
    let f = 10f64.powi(digits);
    (x * f).round() / f
}

/// Builds a synthetic corpus: storms of consecutive 6-hourly observations,
/// per-class Gaussian environments, and tweet batches whose share of
/// positive tweets falls with class index.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = stage_rng(spec.seed, "synth");
    let q = spec.positive_fraction();
    let extra = if spec.mean_extra_tweets > 0.0 {
        Some(Poisson::new(spec.mean_extra_tweets).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let noise = Normal::new(0.0, spec.fraction_noise).map_err(|e| Error::Config(e.to_string()))?;

    let mut observations = Vec::with_capacity(spec.n);
    let mut tweets = Vec::new();
    let mut class_counts = [0usize; 4];
    // 2015-01-01T00:00:00Z
    let mut t = 1_420_070_400i64;
    let mut storm = 0;
    while observations.len() < spec.n {
        storm += 1;
        let len = rng.random_range(8..=40).min(spec.n - observations.len());
        let storm_id = format!("SYN{storm:03}");
        for _ in 0..len {
            let k = draw_class(&spec.class_priors, &mut rng);
            class_counts[k] += 1;
            let x = draw_env(spec, k, &mut rng);
            let obs = TyphoonObservation {
                storm_id: storm_id.clone(),
                timestamp: t,
                lat: round_to(x[0], 4),
                lon: round_to(x[1], 4),
                vmax: round_to(x[2], 4),
                rad: round_to(x[3], 4),
                mslp: round_to(x[4], 4),
                label: Category::ALL[k],
            };
            let c = spec.min_tweets + extra.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
            let qi = (q[k] + noise.sample(&mut rng)).clamp(0.0, 1.0);
            for _ in 0..c {
                let positive = rng.random_bool(qi);
                tweets.push(RawTweet {
                    id: format!("{}", tweets.len() + 1),
                    timestamp: t + rng.random_range(0..spec.slot_length),
                    text: tweet_text(positive, &mut rng),
                });
            }
            observations.push(obs);
            t += spec.slot_length;
        }
        // A quiet gap between storms; a few tweets there fall outside every slot.
        for _ in 0..3 {
            tweets.push(RawTweet {
                id: format!("{}", tweets.len() + 1),
                timestamp: t + rng.random_range(0..spec.slot_length),
                text: tweet_text(rng.random_bool(0.5), &mut rng),
            });
        }
        t += 4 * spec.slot_length;
    }

    let sentiment = (0..spec.sentiment_examples)
        .map(|i| {
            let positive = i % 2 == 0;
            LabeledText {
                text: tweet_text(positive, &mut rng),
                label: u8::from(positive),
            }
        })
        .collect();

    let semantic = ENTITIES
        .iter()
        .map(|e| {
            let key = e.to_ascii_lowercase().replace(' ', "_");
            let v = (0..spec.semantic_dim).map(|_| round_to(rng.random_range(-0.5..0.5), 6)).collect();
            (key, v)
        })
        .collect();

    let (bayes_env_only, bayes_combined) = bayes_accuracy(spec)?;
    let truth = GroundTruth {
        spec: spec.clone(),
        bayes_env_only,
        bayes_combined,
        class_counts,
        tweets: tweets.len(),
        sentiment_examples: spec.sentiment_examples,
    };
    Ok(SynthDataset {
        observations,
        tweets,
        sentiment,
        semantic,
        truth,
    })
}

/// Monte Carlo estimate of the Bayes-optimal accuracy (mean of the maximum
/// posterior) for the env-only and the combined feature sets. The tweet
/// likelihood integrates the fraction noise on a 121-point grid and treats
/// `n` and `c - n` positives alike, since the variance statistic cannot tell
/// them apart.
pub fn bayes_accuracy(spec: &SynthSpec) -> Result<(f64, f64)> {
    spec.validate()?;
    let mut rng = stage_rng(spec.seed, "bayes");
    let q = spec.positive_fraction();
    let extra = if spec.mean_extra_tweets > 0.0 {
        Some(Poisson::new(spec.mean_extra_tweets).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let std_normal = NormalDensity::new(0.0, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let grid: Vec<(f64, f64)> = {
        let z: Vec<f64> = (0..121).map(|i| -6.0 + 0.1 * i as f64).collect();
        let w: Vec<f64> = z.iter().map(|&z| std_normal.pdf(z)).collect();
        let total: f64 = w.iter().sum();
        z.into_iter().zip(w).map(|(z, w)| (z, w / total)).collect()
    };
    let densities: Vec<Vec<NormalDensity>> = spec
        .env_means
        .iter()
        .map(|mu| {
            mu.iter()
                .zip(&spec.env_sd)
                .map(|(&m, &s)| NormalDensity::new(m, s).map_err(|e| Error::Config(e.to_string())))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let log_prior: Vec<f64> = spec.class_priors.iter().map(|p| p.ln()).collect();

    let mut tweet_cache: BTreeMap<(usize, usize), [f64; 4]> = BTreeMap::new();
    let mut tweet_loglik = |c: usize, npos: usize| -> Result<[f64; 4]> {
        if let Some(v) = tweet_cache.get(&(c, npos)) {
            return Ok(*v);
        }
        let mut out = [0.0; 4];
        for (k, o) in out.iter_mut().enumerate() {
            let mut p = 0.0;
            for &(z, w) in &grid {
                let qq = (q[k] + spec.fraction_noise * z).clamp(0.0, 1.0);
                let b = Binomial::new(qq, c as u64).map_err(|e| Error::Config(e.to_string()))?;
                let mut pk = b.pmf(npos as u64);
                if 2 * npos != c {
                    pk += b.pmf((c - npos) as u64);
                }
                p += w * pk;
            }
            *o = (p + 1e-300).ln();
        }
        tweet_cache.insert((c, npos), out);
        Ok(out)
    };

    let max_posterior = |ll: &[f64; 4]| -> f64 {
        let m = ll.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = ll.iter().map(|l| (l - m).exp()).sum();
        1.0 / total
    };

    let noise = Normal::new(0.0, spec.fraction_noise).map_err(|e| Error::Config(e.to_string()))?;
    let (mut env_acc, mut comb_acc) = (0.0, 0.0);
    for _ in 0..spec.bayes_samples {
        let k = draw_class(&spec.class_priors, &mut rng);
        let x: Vec<f64> = (0..5)
            .map(|j| spec.env_means[k][j] + spec.env_sd[j] * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let mut ll = [0.0; 4];
        for (kk, l) in ll.iter_mut().enumerate() {
            *l = log_prior[kk] + x.iter().zip(&densities[kk]).map(|(v, d)| d.ln_pdf(*v)).sum::<f64>();
        }
        env_acc += max_posterior(&ll);
        let c = spec.min_tweets + extra.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
        let qi = (q[k] + noise.sample(&mut rng)).clamp(0.0, 1.0);
        let npos = (0..c).filter(|_| rng.random_bool(qi)).count();
        let tl = tweet_loglik(c, npos)?;
        for (l, t) in ll.iter_mut().zip(tl) {
            *l += t;
        }
        comb_acc += max_posterior(&ll);
    }
    let n = spec.bayes_samples as f64;
    Ok((env_acc / n, comb_acc / n))
}

/// Writes `besttrack.csv`, `tweets.jsonl`, `sentiment.jsonl`, `semantic.txt`
/// and `ground_truth.json` into `dir`.
pub fn write_synth(dir: &Path, data: &SynthDataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_besttrack(&dir.join("besttrack.csv"), &data.observations)?;
    write_tweets(&dir.join("tweets.jsonl"), &data.tweets)?;
    write_labeled(&dir.join("sentiment.jsonl"), &data.sentiment)?;
    let d = data.semantic.values().next().map_or(0, Vec::len);
    let mut lines = vec![format!("{} {d}", data.semantic.len())];
    for (k, v) in &data.semantic {
        let nums: Vec<String> = v.iter().map(f64::to_string).collect();
        lines.push(format!("{k} {}", nums.join(" ")));
    }
    write_lines(&dir.join("semantic.txt"), &lines)?;
    let gt = dir.join("ground_truth.json");
    std::fs::write(&gt, serde_json::to_string_pretty(&data.truth)? + "\n").map_err(|e| Error::io(&gt, e))
}
