//! Run configuration and the five pipeline stages. Each stage reads the
//! previous stages' outputs under `paths.output_dir` and writes its own
//! subdirectory, always including the effective `config.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::classifier::{Category, HeadConfig};
use crate::data::{
    pair_tweet_batches, parse_besttrack, smote_oversample, synth_generate, train_test_split, write_synth,
    GroundTruth, Rejection, SynthSpec, TyphoonObservation, DEFAULT_SLOT_LENGTH, ENV_FEATURES,
};
use crate::embeddings::{import_table, load_semantic_vectors, merge_tables, train_skipgram, export_table, EmbeddingTable, SkipgramConfig};
use crate::error::{Error, Result};
use crate::eval::{
    category_names, confusion, export_timeseries, metrics, permutation_importance, Importance, Metrics, TimeseriesRow,
};
use crate::features::{batch_statistics, sentiment_scores, Normalizer, SentimentConfig};
use crate::rng::stage_rng;
use crate::text::{
    compute_fixed_length, format_timestamp, pad_or_truncate, preprocess, read_labeled, read_tweets, write_lines,
    Gazetteer, TokenSeq,
};
use crate::trainer::{
    classifier_inputs, classify_rows, fit, JointConfig, JointModel, LabeledSeq, Slot, TrainItem, TrainMode,
    TrainingReport, NUM_CLASSES,
};

pub const OUTPUT_DIR_ENV: &str = "TYPHOON_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub output_dir: PathBuf,
    /// Inputs; `null` means the file of the same role under `<output_dir>/synth`.
    pub besttrack: Option<PathBuf>,
    pub tweets: Option<PathBuf>,
    pub sentiment: Option<PathBuf>,
    pub semantic: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub ratio: f64,
    pub stratified: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoteConfig {
    pub enabled: bool,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportanceConfig {
    pub repeats: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    /// Seconds covered by each observation's tweet slot.
    pub slot_length: i64,
    pub split: SplitConfig,
    pub smote: SmoteConfig,
    pub embedding: SkipgramConfig,
    pub extractor: SentimentConfig,
    pub classifier: HeadConfig,
    pub training: JointConfig,
    pub synth: SynthSpec,
    pub importance: ImportanceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            paths: PathsConfig {
                output_dir: PathBuf::from("runs/default"),
                besttrack: None,
                tweets: None,
                sentiment: None,
                semantic: None,
            },
            slot_length: DEFAULT_SLOT_LENGTH,
            split: SplitConfig {
                ratio: 0.8,
                stratified: true,
            },
            smote: SmoteConfig { enabled: true, k: 5 },
            embedding: SkipgramConfig::default(),
            extractor: SentimentConfig::default(),
            classifier: HeadConfig::default(),
            training: JointConfig::default(),
            synth: SynthSpec::default(),
            importance: ImportanceConfig { repeats: 5 },
        }
    }
}

/// Nested seeds are filled from the top-level one, so they may be omitted.
const DERIVED_KEYS: [&str; 3] = ["embedding.seed", "training.seed", "synth.seed"];

fn collect_missing(want: &Value, have: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(w), Value::Object(h)) = (want, have) else {
        return;
    };
    for (k, v) in w {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match h.get(k) {
            None if DERIVED_KEYS.contains(&path.as_str()) => {}
            None => out.push(path),
            Some(sub) => collect_missing(v, sub, &path, out),
        }
    }
}

fn leaf_paths(v: &Value, prefix: &str, out: &mut Vec<String>) {
    if let Value::Object(m) = v {
        for (k, sub) in m {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            out.push(path.clone());
            leaf_paths(sub, &path, out);
        }
    }
}

fn fill_derived(doc: &mut Value, defaults: &Value) {
    for key in DERIVED_KEYS {
        let (section, leaf) = key.split_once('.').unwrap_or((key, key));
        if let (Some(Value::Object(s)), Some(d)) = (doc.get_mut(section), defaults.pointer(&format!("/{section}/{leaf}"))) {
            s.entry(leaf).or_insert_with(|| d.clone());
        }
    }
}

/// Resolves an override key: an exact dotted path wins, otherwise a bare
/// name must match the last segment of exactly one path.
pub fn resolve_key(doc: &Value, key: &str) -> Result<String> {
    let mut paths = Vec::new();
    leaf_paths(doc, "", &mut paths);
    if paths.iter().any(|p| p == key) {
        return Ok(key.to_string());
    }
    let hits: Vec<&String> = paths.iter().filter(|p| p.rsplit('.').next() == Some(key)).collect();
    match hits.as_slice() {
        [one] => Ok((*one).clone()),
        [] => Err(Error::Config(format!("unknown config key {key:?}"))),
        many => Err(Error::Config(format!(
            "ambiguous config key {key:?}: {}",
            many.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        ))),
    }
}

/// Applies `key=value`; the value is read as JSON when it parses, otherwise
/// as a string.
pub fn apply_override(doc: &mut Value, key: &str, raw: &str) -> Result<()> {
    let path = resolve_key(doc, key)?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let pointer = format!("/{}", path.replace('.', "/"));
    match doc.pointer_mut(&pointer) {
        Some(slot) => {
            *slot = value;
            Ok(())
        }
        None => Err(Error::Config(format!("unknown config key {key:?}"))),
    }
}

impl RunConfig {
    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).unwrap_or(Value::Null)
    }

    /// Parses a full configuration document. Every missing key is listed in
    /// the error.
    pub fn from_value(mut doc: Value) -> Result<Self> {
        if !doc.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let defaults = RunConfig::default().to_value();
        let mut missing = Vec::new();
        collect_missing(&defaults, &doc, "", &mut missing);
        if !missing.is_empty() {
            return Err(Error::Config(format!("missing config keys: {}", missing.join(", "))));
        }
        let mut unknown = Vec::new();
        collect_missing(&doc, &defaults, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        fill_derived(&mut doc, &defaults);
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Self::from_value(doc)
    }

    /// Config file (or defaults), then the output-dir environment variable,
    /// then `key=value` overrides.
    pub fn load(path: Option<&Path>, output_dir_env: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let base = match path {
            Some(p) => Self::from_file(p)?,
            None => RunConfig::default(),
        };
        let mut doc = base.to_value();
        if let Some(dir) = output_dir_env.filter(|d| !d.is_empty()) {
            doc["paths"]["output_dir"] = Value::String(dir.to_string());
        }
        for (k, v) in overrides {
            apply_override(&mut doc, k, v)?;
        }
        Self::from_value(doc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.slot_length <= 0 {
            return Err(Error::Config("slot_length must be positive".into()));
        }
        if !(self.split.ratio > 0.0 && self.split.ratio < 1.0) {
            return Err(Error::Config("split.ratio must lie in (0, 1)".into()));
        }
        if self.smote.k < 1 {
            return Err(Error::Config("smote.k must be at least 1".into()));
        }
        if self.importance.repeats < 1 {
            return Err(Error::Config("importance.repeats must be at least 1".into()));
        }
        self.embedding.validate()?;
        self.training.validate()?;
        self.synth.validate()
    }

    /// Copy with every nested seed taken from the top-level one and the
    /// synthetic entity vectors sized to the embedding dimension.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        c.embedding.seed = crate::rng::derive_seed(self.seed, "embed");
        c.training.seed = self.seed;
        c.synth.seed = self.seed;
        c.synth.semantic_dim = self.embedding.d;
        c
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.paths.output_dir.join(stage)
    }

    fn input(&self, given: &Option<PathBuf>, file: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.stage_dir("synth").join(file))
    }

    pub fn besttrack_path(&self) -> PathBuf {
        self.input(&self.paths.besttrack, "besttrack.csv")
    }

    pub fn tweets_path(&self) -> PathBuf {
        self.input(&self.paths.tweets, "tweets.jsonl")
    }

    pub fn sentiment_path(&self) -> PathBuf {
        self.input(&self.paths.sentiment, "sentiment.jsonl")
    }

    pub fn semantic_path(&self) -> PathBuf {
        self.input(&self.paths.semantic, "semantic.txt")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let lines = items.iter().map(serde_json::to_string).collect::<std::result::Result<Vec<_>, _>>()?;
    write_lines(path, &lines)
}

/// Creates the stage directory and writes its config snapshot.
fn open_stage(cfg: &RunConfig, stage: &str) -> Result<PathBuf> {
    let dir = cfg.stage_dir(stage);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_json(&dir.join("config.json"), cfg)?;
    Ok(dir)
}

fn stage_err(stage: &str, e: Error) -> Error {
    match e {
        Error::Data(m) => Error::Data(format!("{stage}: {m}")),
        Error::Contract(m) => Error::Contract(format!("{stage}: {m}")),
        Error::Config(m) => Error::Config(format!("{stage}: {m}")),
        other => other,
    }
}

pub fn run_synth(cfg: &RunConfig) -> Result<GroundTruth> {
    let cfg = cfg.effective();
    cfg.validate()?;
    let dir = open_stage(&cfg, "synth")?;
    let data = synth_generate(&cfg.synth).map_err(|e| stage_err("synth", e))?;
    write_synth(&dir, &data)?;
    log::info!(
        "synth: {} observations, {} tweets, bayes env-only {:.3}, combined {:.3}",
        data.observations.len(),
        data.tweets.len(),
        data.truth.bayes_env_only,
        data.truth.bayes_combined
    );
    Ok(data.truth)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub observation: TyphoonObservation,
    pub tweets: Vec<TokenSeq>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledTokens {
    pub label: u8,
    pub seq: TokenSeq,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairingReport {
    pub observations: usize,
    pub rejected: Vec<Rejection>,
    pub tweets_total: usize,
    pub tweets_paired: usize,
    pub tweets_discarded: usize,
    pub empty_slots: usize,
    pub sentiment_examples: usize,
    pub class_counts: BTreeMap<Category, usize>,
    pub entity_phrases: usize,
    /// Padded sequence length shared by all tweets.
    pub fixed_length: usize,
}

/// Cleans, tokenizes and pairs tweets with observations.
pub fn run_preprocess(cfg: &RunConfig) -> Result<PairingReport> {
    let cfg = cfg.effective();
    cfg.validate()?;
    let dir = open_stage(&cfg, "preprocess")?;
    let bt = parse_besttrack(&cfg.besttrack_path())?;
    if bt.observations.is_empty() {
        return Err(Error::Data("preprocess: no valid best-track rows".into()));
    }
    let tweets = read_tweets(&cfg.tweets_path())?;
    let sem_path = cfg.semantic_path();
    let gazetteer = if sem_path.exists() {
        Gazetteer::new(load_semantic_vectors(&sem_path, cfg.embedding.d)?.into_keys())
    } else {
        log::warn!("{}: not found, entity recognition disabled", sem_path.display());
        Gazetteer::default()
    };
    let pairing = pair_tweet_batches(&bt.observations, &tweets, cfg.slot_length)?;
    let records: Vec<SlotRecord> = pairing
        .instances
        .iter()
        .map(|inst| SlotRecord {
            observation: inst.observation.clone(),
            tweets: inst.tweets.iter().map(|t| preprocess(&t.id, &t.text, &gazetteer)).collect(),
        })
        .collect();
    let all: Vec<TokenSeq> = records.iter().flat_map(|r| r.tweets.iter().cloned()).collect();
    let fixed_length = if all.is_empty() { 1 } else { compute_fixed_length(&all)? };
    let sentiment: Vec<LabeledTokens> = read_labeled(&cfg.sentiment_path())?
        .iter()
        .enumerate()
        .map(|(i, l)| LabeledTokens {
            label: l.label,
            seq: preprocess(&format!("s{}", i + 1), &l.text, &gazetteer),
        })
        .collect();
    write_jsonl(&dir.join("slots.jsonl"), &records)?;
    write_jsonl(&dir.join("sentiment_tokens.jsonl"), &sentiment)?;
    let mut class_counts = BTreeMap::new();
    for r in &records {
        *class_counts.entry(r.observation.label).or_insert(0) += 1;
    }
    let report = PairingReport {
        observations: records.len(),
        rejected: bt.rejected,
        tweets_total: tweets.len(),
        tweets_paired: all.len(),
        tweets_discarded: pairing.discarded,
        empty_slots: records.iter().filter(|r| r.tweets.is_empty()).count(),
        sentiment_examples: sentiment.len(),
        class_counts,
        entity_phrases: gazetteer.len(),
        fixed_length,
    };
    write_json(&dir.join("pairing_report.json"), &report)?;
    log::info!(
        "preprocess: {} slots, {} tweets paired, {} discarded, {} rows rejected",
        report.observations,
        report.tweets_paired,
        report.tweets_discarded,
        report.rejected.len()
    );
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedSummary {
    pub vocab: usize,
    pub d: usize,
    pub entity_rows: usize,
    pub epoch_losses: Vec<f64>,
}

/// Trains skip-gram vectors over all preprocessed tweets and merges in the
/// semantic entity vectors.
pub fn run_embed(cfg: &RunConfig) -> Result<EmbedSummary> {
    let cfg = cfg.effective();
    cfg.validate()?;
    let pre = cfg.stage_dir("preprocess");
    let records: Vec<SlotRecord> = read_jsonl(&pre.join("slots.jsonl"))?;
    let sentiment: Vec<LabeledTokens> = read_jsonl(&pre.join("sentiment_tokens.jsonl"))?;
    let dir = open_stage(&cfg, "embed")?;
    let corpus: Vec<TokenSeq> = records
        .iter()
        .flat_map(|r| r.tweets.iter().cloned())
        .chain(sentiment.iter().map(|s| s.seq.clone()))
        .collect();
    let out = train_skipgram(&corpus, &cfg.embedding).map_err(|e| stage_err("embed", e))?;
    let sem_path = cfg.semantic_path();
    let table = if sem_path.exists() {
        merge_tables(&out.table, &load_semantic_vectors(&sem_path, cfg.embedding.d)?)?
    } else {
        out.table
    };
    export_table(&table, &dir.join("embeddings.txt"), Some(&cfg.embedding))?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in out.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    let lp = dir.join("losses.csv");
    std::fs::write(&lp, csv).map_err(|e| Error::io(&lp, e))?;
    let summary = EmbedSummary {
        vocab: table.vocab.len(),
        d: table.d,
        entity_rows: table.entity_marks.len(),
        epoch_losses: out.epoch_losses,
    };
    log::info!("embed: {} rows of dimension {}", summary.vocab, summary.d);
    Ok(summary)
}

/// Everything the trainer and evaluator need, rebuilt from stage outputs.
pub struct Prepared {
    pub observations: Vec<TyphoonObservation>,
    pub slots: Vec<Slot>,
    pub labeled: Vec<LabeledSeq>,
    pub table: EmbeddingTable,
    pub normalizer: Normalizer,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Loads preprocessing and embedding outputs. The split and normalizer are
/// computed fresh unless `fitted` supplies them.
pub fn prepare(cfg: &RunConfig, fitted: Option<(SplitRecord, Normalizer)>) -> Result<Prepared> {
    let cfg = cfg.effective();
    let pre = cfg.stage_dir("preprocess");
    let records: Vec<SlotRecord> = read_jsonl(&pre.join("slots.jsonl"))?;
    let sentiment: Vec<LabeledTokens> = read_jsonl(&pre.join("sentiment_tokens.jsonl"))?;
    let report: PairingReport = read_json(&pre.join("pairing_report.json"))?;
    let (table, _) = import_table(&cfg.stage_dir("embed").join("embeddings.txt"))?;
    if records.is_empty() {
        return Err(Error::Data("no slots to train on".into()));
    }
    let s = report.fixed_length;
    let to_idx = |seq: &TokenSeq| -> Result<Vec<usize>> { Ok(table.vocab.indices(&pad_or_truncate(seq, s)?)) };
    let labels: Vec<usize> = records.iter().map(|r| r.observation.label.index()).collect();
    let (split, normalizer) = match fitted {
        Some(f) => f,
        None => {
            let (train, test) =
                train_test_split(&labels, cfg.split.ratio, cfg.split.stratified, &mut stage_rng(cfg.seed, "split"))?;
            let env: Vec<Vec<f64>> = train.iter().map(|&i| records[i].observation.env()).collect();
            let counts: Vec<usize> = train.iter().map(|&i| records[i].tweets.len()).collect();
            (SplitRecord { train, test }, Normalizer::fit(&env, &counts)?)
        }
    };
    let mut slots = Vec::with_capacity(records.len());
    for r in &records {
        slots.push(Slot {
            static_features: normalizer.static_part(&r.observation.env(), r.tweets.len())?,
            tweets: r.tweets.iter().map(to_idx).collect::<Result<_>>()?,
            label: r.observation.label.index(),
        });
    }
    let labeled = sentiment
        .iter()
        .map(|l| {
            Ok(LabeledSeq {
                tokens: to_idx(&l.seq)?,
                label: usize::from(l.label),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Prepared {
        observations: records.into_iter().map(|r| r.observation).collect(),
        slots,
        labeled,
        table,
        normalizer,
        train: split.train,
        test: split.test,
    })
}

/// Training items for the train split, SMOTE-balanced when enabled.
/// Neighbors are searched over the scaled environment and count.
pub fn training_items(cfg: &RunConfig, prep: &Prepared) -> Result<Vec<TrainItem>> {
    if !cfg.smote.enabled {
        return Ok(prep.train.iter().map(|&i| TrainItem::Real(i)).collect());
    }
    let feats: Vec<Vec<f64>> = prep.train.iter().map(|&i| prep.slots[i].static_features.clone()).collect();
    let labels: Vec<usize> = prep.train.iter().map(|&i| prep.slots[i].label).collect();
    let out = smote_oversample(&feats, &labels, cfg.smote.k, &mut stage_rng(cfg.seed, "smote"))
        .map_err(|e| stage_err("smote", e))?;
    Ok(out
        .origins
        .into_iter()
        .map(|o| match o {
            TrainItem::Real(i) => TrainItem::Real(prep.train[i]),
            TrainItem::Synthetic { base, neighbor, u } => TrainItem::Synthetic {
                base: prep.train[base],
                neighbor: prep.train[neighbor],
                u,
            },
        })
        .collect())
}

pub fn build_model(cfg: &RunConfig, prep: &Prepared) -> Result<JointModel> {
    JointModel::new(
        cfg.training.mode,
        ENV_FEATURES.len(),
        Some(&prep.table),
        &cfg.extractor,
        &cfg.classifier,
        &mut stage_rng(cfg.seed, "init"),
    )
}

/// Builds and fits a model on prepared data without writing anything.
pub fn train_prepared(cfg: &RunConfig, prep: &Prepared) -> Result<(JointModel, TrainingReport)> {
    let cfg = cfg.effective();
    let items = training_items(&cfg, prep)?;
    let mut model = build_model(&cfg, prep)?;
    let report = fit(&mut model, &prep.slots, &items, &prep.test, &prep.labeled, &cfg.training)
        .map_err(|e| stage_err("train", e))?;
    Ok((model, report))
}

pub fn run_train(cfg: &RunConfig) -> Result<TrainingReport> {
    let cfg = cfg.effective();
    cfg.validate()?;
    let prep = prepare(&cfg, None)?;
    let dir = open_stage(&cfg, "train")?;
    let (model, report) = train_prepared(&cfg, &prep)?;
    model.save(&dir)?;
    report.write_csv(&dir.join("training.csv"))?;
    write_json(&dir.join("normalizer.json"), &prep.normalizer)?;
    write_json(
        &dir.join("split.json"),
        &SplitRecord {
            train: prep.train.clone(),
            test: prep.test.clone(),
        },
    )?;
    if let Some(last) = report.last() {
        log::info!("train: final test accuracy {:.4}", last.test_acc);
    }
    Ok(report)
}

pub fn feature_names(mode: TrainMode) -> Vec<String> {
    let mut names: Vec<String> = ENV_FEATURES.iter().map(|s| s.to_string()).collect();
    if mode != TrainMode::StandaloneEnvOnly {
        names.extend(["c", "v_neg", "v_pos"].map(String::from));
    }
    names
}

fn argmax_rows(probs: &[Vec<f64>]) -> Vec<usize> {
    probs
        .iter()
        .map(|p| {
            p.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub metrics: Metrics,
    pub importance: Vec<(String, Importance)>,
}

/// Permutation importance of every classifier input column on the test split.
pub fn feature_importance(cfg: &RunConfig, model: &JointModel, prep: &Prepared) -> Result<Vec<(String, Importance)>> {
    let rows = classifier_inputs(model, &prep.slots, &prep.test, cfg.training.sentiment_mode)?;
    let labels: Vec<usize> = prep.test.iter().map(|&i| prep.slots[i].label).collect();
    let predict = |rows: &[Vec<f64>]| Ok(argmax_rows(&classify_rows(model, rows)?));
    let mut rng = stage_rng(cfg.seed, "importance");
    feature_names(model.mode)
        .into_iter()
        .enumerate()
        .map(|(j, name)| {
            let imp = permutation_importance(&rows, &labels, NUM_CLASSES, j, cfg.importance.repeats, &mut rng, predict)?;
            Ok((name, imp))
        })
        .collect()
}

pub fn run_evaluate(cfg: &RunConfig) -> Result<EvalSummary> {
    let cfg = cfg.effective();
    cfg.validate()?;
    let train_dir = cfg.stage_dir("train");
    let split: SplitRecord = read_json(&train_dir.join("split.json"))?;
    let norm: Normalizer = read_json(&train_dir.join("normalizer.json"))?;
    let prep = prepare(&cfg, Some((split, norm)))?;
    let model = JointModel::load(&train_dir, Some(&prep.table))?;
    let dir = open_stage(&cfg, "evaluate")?;
    let mode = cfg.training.sentiment_mode;

    let all: Vec<usize> = (0..prep.slots.len()).collect();
    let inputs = classifier_inputs(&model, &prep.slots, &all, mode)?;
    let predicted = argmax_rows(&classify_rows(&model, &inputs)?);
    let truth: Vec<usize> = prep.test.iter().map(|&i| prep.slots[i].label).collect();
    let test_pred: Vec<usize> = prep.test.iter().map(|&i| predicted[i]).collect();
    let cm = confusion(&truth, &test_pred, NUM_CLASSES)?;
    let m = metrics(&cm)?;
    let names = category_names();
    let write = |file: &str, body: String| -> Result<()> {
        let p = dir.join(file);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write("metrics.csv", m.to_csv(&names))?;
    write("confusion.csv", cm.to_csv(&names))?;

    let importance = feature_importance(&cfg, &model, &prep)?;
    let mut csv = String::from("feature,baseline_f1,mean_drop,std_drop\n");
    for (name, imp) in &importance {
        csv.push_str(&format!("{name},{},{},{}\n", imp.baseline, imp.mean, imp.std));
    }
    write("importance.csv", csv)?;

    let is_test: Vec<bool> = {
        let mut v = vec![false; prep.slots.len()];
        prep.test.iter().for_each(|&i| v[i] = true);
        v
    };
    let probs = match &model.extractor {
        Some(ext) => {
            let seqs: Vec<Vec<usize>> = prep.slots.iter().flat_map(|s| s.tweets.iter().cloned()).collect();
            if seqs.is_empty() {
                Vec::new()
            } else {
                ext.predict(&model.store, &seqs)?
            }
        }
        None => Vec::new(),
    };
    let mut at = 0;
    let mut rows = Vec::with_capacity(prep.slots.len());
    for (i, (slot, obs)) in prep.slots.iter().zip(&prep.observations).enumerate() {
        let c = slot.tweets.len();
        let (stats, mean) = if model.extractor.is_some() && c > 0 {
            let p = &probs[at..at + c];
            at += c;
            (
                batch_statistics(&sentiment_scores(p, mode)),
                p.iter().map(|x| x[1]).sum::<f64>() / c as f64,
            )
        } else {
            (batch_statistics(&[]), 0.0)
        };
        rows.push(TimeseriesRow {
            storm_id: obs.storm_id.clone(),
            timestamp: format_timestamp(obs.timestamp),
            split: if is_test[i] { "test" } else { "train" }.to_string(),
            true_label: obs.label,
            predicted_label: Category::ALL[predicted[i]],
            c,
            v_neg: stats.v_neg,
            v_pos: stats.v_pos,
            mean_sentiment: mean,
        });
    }
    export_timeseries(&dir.join("timeseries.csv"), &rows)?;
    log::info!("evaluate: test accuracy {:.4}, macro F1 {:.4}", m.accuracy, m.f1_macro);
    Ok(EvalSummary { metrics: m, importance })
}
