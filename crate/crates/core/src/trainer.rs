//! Joint optimization of the feature extractor and the classifier under one
//! weighted loss, plus the standalone baselines.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{build_head, classify_forward, predict_category, ClassifierHead, HeadConfig};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::features::{
    batch_statistics, combine_features, sentiment_scores, tape_combine, tape_statistics, SentimentConfig,
    SentimentMode, SentimentModel, StatFeatures,
};
use crate::params::{Checkpoint, ParamGroup, ParamStore};
use crate::rng::derive_seed;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Both models under the weighted sum of both losses.
    #[default]
    Joint,
    /// Classifier on the environmental features only; no extractor.
    StandaloneEnvOnly,
    /// The extractor learns from the sentiment loss alone; the classifier
    /// sees its statistics as constants.
    FeatureExtractorOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointConfig {
    pub lambda_f1: f64,
    pub lambda_f2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub mode: TrainMode,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Upper bound on labeled sentiment tweets added to each batch.
    pub sentiment_cap: usize,
    pub sentiment_mode: SentimentMode,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            lambda_f1: 1.0,
            lambda_f2: 1.0,
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            mode: TrainMode::Joint,
            clip_norm: Some(5.0),
            sentiment_cap: 256,
            sentiment_mode: SentimentMode::Soft,
        }
    }
}

impl JointConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda_f1 >= 0.0 && self.lambda_f2 >= 0.0) {
            return bad("loss weights must be nonnegative");
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.epsilon > 0.0) {
            return bad("learning_rate must be nonnegative and epsilon positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }
}

/// Mean cross-entropy of `probs` (`[n x k]` or `[k]`) against class indices.
pub fn cross_entropy(tape: &mut Tape, probs: Var, targets: &[usize]) -> Result<Var> {
    let shape = tape.shape(probs).to_vec();
    let (n, k) = match shape.as_slice() {
        [k] => (1, *k),
        [n, k] => (*n, *k),
        _ => return Err(Error::shape("cross_entropy", &shape, &[])),
    };
    if targets.len() != n {
        return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
    }
    let mut onehot = vec![0.0; n * k];
    for (i, &t) in targets.iter().enumerate() {
        if t >= k {
            return Err(Error::contract(format!("target class {t} out of range for {k} classes")));
        }
        onehot[i * k + t] = 1.0;
    }
    tape.cross_entropy(probs, &Tensor::new(shape, onehot)?)
}

/// `lambda_f1 * l_f1 + lambda_f2 * l_f2` on the tape.
pub fn joint_loss(tape: &mut Tape, l_f1: Var, l_f2: Var, cfg: &JointConfig) -> Result<Var> {
    for (name, v) in [("l_f1", l_f1), ("l_f2", l_f2)] {
        let x = tape.value(v).item()?;
        if !x.is_finite() {
            return Err(Error::contract(format!("{name} is not finite ({x})")));
        }
    }
    let a = tape.scale(l_f1, cfg.lambda_f1);
    let b = tape.scale(l_f2, cfg.lambda_f2);
    tape.add(a, b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One bias-corrected Adam update over every parameter in `store`.
    /// Frozen rows are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, cfg: &JointConfig) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} parameters but the store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            if self.m[i].len() != p.value.len() {
                return Err(Error::shape("adam_step", &[self.m[i].len()], p.value.shape()));
            }
            let (_, cols) = p.value.rows_cols();
            let cols = cols.max(1);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let frozen = &p.frozen_rows;
            let values = p.value.data_mut();
            for (j, &g) in p.grad.iter().enumerate() {
                if frozen.get(j / cols).copied().unwrap_or(false) {
                    continue;
                }
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                values[j] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
            }
        }
        Ok(())
    }
}

/// One environmental observation with its tweets, ready for training.
#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    /// Normalized environmental features followed by the scaled log count.
    pub static_features: Vec<f64>,
    /// Token index sequences of the slot's tweets, each of the fixed length.
    pub tweets: Vec<Vec<usize>>,
    pub label: usize,
}

/// A labeled sentiment example (0 negative, 1 positive).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSeq {
    pub tokens: Vec<usize>,
    pub label: usize,
}

/// A training instance: a real slot or a SMOTE point between two slots of
/// the same class, `base + u * (neighbor - base)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TrainItem {
    Real(usize),
    Synthetic { base: usize, neighbor: usize, u: f64 },
}

impl TrainItem {
    fn base(&self) -> usize {
        match *self {
            TrainItem::Real(i) => i,
            TrainItem::Synthetic { base, .. } => base,
        }
    }

    fn slots(&self) -> impl Iterator<Item = usize> {
        let (a, b) = match *self {
            TrainItem::Real(i) => (i, None),
            TrainItem::Synthetic { base, neighbor, .. } => (base, Some(neighbor)),
        };
        std::iter::once(a).chain(b)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelMeta {
    pub mode: TrainMode,
    pub env_features: usize,
    pub head: HeadConfig,
    pub sentiment: Option<SentimentConfig>,
}

/// Both models and their parameters.
#[derive(Clone, Debug)]
pub struct JointModel {
    pub store: ParamStore,
    pub extractor: Option<SentimentModel>,
    pub head: ClassifierHead,
    pub mode: TrainMode,
    /// Number of environmental features `m`.
    pub env_features: usize,
}

impl JointModel {
    /// Builds a model; `table` is required unless `mode` is
    /// [`TrainMode::StandaloneEnvOnly`].
    pub fn new<R: Rng>(
        mode: TrainMode,
        env_features: usize,
        table: Option<&EmbeddingTable>,
        sentiment: &SentimentConfig,
        head: &HeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let (extractor, input_len) = match mode {
            TrainMode::StandaloneEnvOnly => (None, env_features),
            _ => {
                let table = table.ok_or_else(|| Error::Config("an embedding table is required".into()))?;
                (
                    Some(SentimentModel::init(&mut store, table, sentiment, rng)?),
                    env_features + 3,
                )
            }
        };
        let head = build_head(&mut store, head, input_len, NUM_CLASSES, rng)?;
        Ok(JointModel {
            store,
            extractor,
            head,
            mode,
            env_features,
        })
    }

    pub fn meta(&self) -> ModelMeta {
        ModelMeta {
            mode: self.mode,
            env_features: self.env_features,
            head: self.head.config.clone(),
            sentiment: self.extractor.as_ref().map(|e| e.config.clone()),
        }
    }

    /// Writes `extractor.ckpt` (when present) and `classifier.ckpt`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = serde_json::to_value(self.meta())?;
        if self.extractor.is_some() {
            self.store
                .save_checkpoint(&dir.join("extractor.ckpt"), Some(ParamGroup::Extractor), meta.clone())?;
        }
        self.store
            .save_checkpoint(&dir.join("classifier.ckpt"), Some(ParamGroup::Classifier), meta)
    }

    /// Rebuilds a model saved with [`JointModel::save`]. The table only
    /// supplies the embedding shape; its values come from the checkpoint.
    pub fn load(dir: &Path, table: Option<&EmbeddingTable>) -> Result<Self> {
        let cls = Checkpoint::read(&dir.join("classifier.ckpt"))?;
        let meta: ModelMeta = serde_json::from_value(cls.meta.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sentiment = meta.sentiment.clone().unwrap_or_default();
        let mut model = JointModel::new(meta.mode, meta.env_features, table, &sentiment, &meta.head, &mut rng)?;
        if model.extractor.is_some() {
            model.store.load_values(&Checkpoint::read(&dir.join("extractor.ckpt"))?)?;
        }
        model.store.load_values(&cls)?;
        Ok(model)
    }

    fn head_row(&self, static_features: &[f64]) -> Vec<f64> {
        match self.mode {
            TrainMode::StandaloneEnvOnly => static_features[..self.env_features].to_vec(),
            _ => static_features.to_vec(),
        }
    }
}

/// Draws `n` labeled examples with replacement.
pub fn sample_labeled<'a, R: Rng>(corpus: &'a [LabeledSeq], n: usize, rng: &mut R) -> Vec<&'a LabeledSeq> {
    if corpus.is_empty() {
        return Vec::new();
    }
    (0..n).map(|_| &corpus[rng.random_range(0..corpus.len())]).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepOutput {
    pub l_f1: f64,
    pub l_f2: f64,
    pub l_joint: f64,
    pub correct: usize,
    pub total: usize,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Forward and backward for one batch. Gradients are zeroed first and left
/// in `model.store`; no parameter changes.
pub fn compute_step<R: Rng>(
    model: &mut JointModel,
    slots: &[Slot],
    items: &[TrainItem],
    labeled: &[&LabeledSeq],
    cfg: &JointConfig,
    rng: &mut R,
) -> Result<StepOutput> {
    if items.is_empty() {
        return Err(Error::contract("empty training batch"));
    }
    model.store.zero_grad();
    let mut tape = Tape::new();

    let mut order: Vec<usize> = Vec::new();
    let mut pos: HashMap<usize, usize> = HashMap::new();
    for item in items {
        for s in item.slots() {
            if s >= slots.len() {
                return Err(Error::contract(format!("training item refers to missing slot {s}")));
            }
            pos.entry(s).or_insert_with(|| {
                order.push(s);
                order.len() - 1
            });
        }
    }

    let labeled: &[&LabeledSeq] = if model.extractor.is_some() { labeled } else { &[] };
    let mut stats: Vec<(Var, Var)> = Vec::with_capacity(order.len());
    let l_f1 = match &model.extractor {
        None => tape.constant(Tensor::scalar(0.0)),
        Some(ext) => {
            let mut seqs: Vec<&[usize]> = Vec::new();
            let mut ranges = Vec::with_capacity(order.len());
            for &s in &order {
                let start = seqs.len();
                seqs.extend(slots[s].tweets.iter().map(Vec::as_slice));
                ranges.push(start..seqs.len());
            }
            let lab_start = seqs.len();
            seqs.extend(labeled.iter().map(|l| l.tokens.as_slice()));
            let probs = if seqs.is_empty() {
                None
            } else {
                Some(ext.forward_indices(&mut tape, &model.store, &seqs, true, rng)?)
            };
            for r in ranges {
                let block = match probs {
                    Some(p) if !r.is_empty() => Some(tape.slice_rows(p, r.start, r.end)?),
                    _ => None,
                };
                let (vn, vp) = tape_statistics(&mut tape, block, cfg.sentiment_mode)?;
                stats.push(if model.mode == TrainMode::FeatureExtractorOnly {
                    let a = tape.constant(tape.value(vn).clone());
                    let b = tape.constant(tape.value(vp).clone());
                    (a, b)
                } else {
                    (vn, vp)
                });
            }
            match probs {
                Some(p) if !labeled.is_empty() => {
                    let lp = tape.slice_rows(p, lab_start, lab_start + labeled.len())?;
                    let targets: Vec<usize> = labeled.iter().map(|l| l.label).collect();
                    cross_entropy(&mut tape, lp, &targets)?
                }
                _ => tape.constant(Tensor::scalar(0.0)),
            }
        }
    };

    let mut rows = Vec::with_capacity(items.len());
    let mut targets = Vec::with_capacity(items.len());
    for item in items {
        targets.push(slots[item.base()].label);
        let row = match (*item, model.extractor.is_some()) {
            (TrainItem::Real(i), false) => {
                let r = model.head_row(&slots[i].static_features);
                tape.constant(Tensor::new(vec![1, r.len()], r)?)
            }
            (TrainItem::Real(i), true) => {
                let (vn, vp) = stats[pos[&i]];
                tape_combine(&mut tape, &slots[i].static_features, vn, vp)?
            }
            (TrainItem::Synthetic { base, neighbor, u }, with_ext) => {
                let a = &slots[base].static_features;
                let b = &slots[neighbor].static_features;
                let mixed: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + u * (y - x)).collect();
                if with_ext {
                    let (na, pa) = stats[pos[&base]];
                    let (nb, pb) = stats[pos[&neighbor]];
                    let mut lerp = |x: Var, y: Var| -> Result<Var> {
                        let x = tape.scale(x, 1.0 - u);
                        let y = tape.scale(y, u);
                        tape.add(x, y)
                    };
                    let vn = lerp(na, nb)?;
                    let vp = lerp(pa, pb)?;
                    tape_combine(&mut tape, &mixed, vn, vp)?
                } else {
                    let r = model.head_row(&mixed);
                    tape.constant(Tensor::new(vec![1, r.len()], r)?)
                }
            }
        };
        rows.push(row);
    }
    let x = tape.concat(&rows, 0)?;
    let probs = classify_forward(&mut tape, &model.store, &model.head, x, true, rng)?;
    let l_f2 = cross_entropy(&mut tape, probs, &targets)?;
    let joint_cfg = match model.mode {
        TrainMode::StandaloneEnvOnly => JointConfig {
            lambda_f1: 0.0,
            ..cfg.clone()
        },
        _ => cfg.clone(),
    };
    let l_joint = joint_loss(&mut tape, l_f1, l_f2, &joint_cfg)?;
    tape.backward(l_joint)?;
    tape.accumulate_param_grads(&mut model.store)?;

    let correct = tape
        .value(probs)
        .data()
        .chunks(NUM_CLASSES)
        .zip(&targets)
        .filter(|(p, &t)| predict_category(p).is_ok_and(|c| c.index() == t))
        .count();
    Ok(StepOutput {
        l_f1: tape.value(l_f1).item()?,
        l_f2: tape.value(l_f2).item()?,
        l_joint: tape.value(l_joint).item()?,
        correct,
        total: items.len(),
        grad_norm: model.store.grad_norm(),
    })
}

/// [`compute_step`], optional clipping, then one Adam update of both models.
pub fn train_step<R: Rng>(
    model: &mut JointModel,
    adam: &mut AdamState,
    slots: &[Slot],
    items: &[TrainItem],
    labeled: &[&LabeledSeq],
    cfg: &JointConfig,
    rng: &mut R,
) -> Result<StepOutput> {
    let mut out = compute_step(model, slots, items, labeled, cfg, rng)?;
    if let Some(c) = cfg.clip_norm {
        out.grad_norm = model.store.clip_grad_norm(c);
    }
    adam.step(&mut model.store, cfg)?;
    Ok(out)
}

/// Statistics of each slot under the current extractor, without dropout.
pub fn slot_statistics(model: &JointModel, slots: &[Slot], idx: &[usize], mode: SentimentMode) -> Result<Vec<StatFeatures>> {
    let Some(ext) = &model.extractor else {
        return Ok(idx
            .iter()
            .map(|&i| StatFeatures {
                c: slots[i].tweets.len(),
                ..StatFeatures::default()
            })
            .collect());
    };
    let seqs: Vec<Vec<usize>> = idx.iter().flat_map(|&i| slots[i].tweets.iter().cloned()).collect();
    let probs = if seqs.is_empty() { Vec::new() } else { ext.predict(&model.store, &seqs)? };
    let mut out = Vec::with_capacity(idx.len());
    let mut at = 0;
    for &i in idx {
        let c = slots[i].tweets.len();
        out.push(batch_statistics(&sentiment_scores(&probs[at..at + c], mode)));
        at += c;
    }
    Ok(out)
}

/// Rows fed to the classifier for the given slots: env only for the
/// standalone baseline, otherwise the full combined vector.
pub fn classifier_inputs(model: &JointModel, slots: &[Slot], idx: &[usize], mode: SentimentMode) -> Result<Vec<Vec<f64>>> {
    if model.extractor.is_none() {
        return Ok(idx.iter().map(|&i| model.head_row(&slots[i].static_features)).collect());
    }
    let stats = slot_statistics(model, slots, idx, mode)?;
    Ok(idx
        .iter()
        .zip(stats)
        .map(|(&i, s)| {
            let mut row = slots[i].static_features.clone();
            row.push(s.v_neg);
            row.push(s.v_pos);
            row
        })
        .collect())
}

/// Class probabilities for classifier input rows, dropout off.
pub fn classify_rows(model: &JointModel, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let width = model.head.input_len;
    let mut out = Vec::with_capacity(rows.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in rows.chunks(1024) {
        let mut flat = Vec::with_capacity(chunk.len() * width);
        for r in chunk {
            if r.len() != width {
                return Err(Error::shape("classify_rows", &[r.len()], &[width]));
            }
            flat.extend_from_slice(r);
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![chunk.len(), width], flat)?);
        let p = classify_forward(&mut tape, &model.store, &model.head, x, false, &mut rng)?;
        out.extend(tape.value(p).data().chunks(NUM_CLASSES).map(<[f64]>::to_vec));
    }
    Ok(out)
}

pub fn predict_slots(model: &JointModel, slots: &[Slot], idx: &[usize], mode: SentimentMode) -> Result<Vec<Vec<f64>>> {
    classify_rows(model, &classifier_inputs(model, slots, idx, mode)?)
}

pub fn accuracy(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.is_empty() {
        return Ok(0.0);
    }
    let mut hit = 0;
    for (p, &y) in probs.iter().zip(labels) {
        if predict_category(p)?.index() == y {
            hit += 1;
        }
    }
    Ok(hit as f64 / probs.len() as f64)
}

/// Combined-feature row for an externally computed [`StatFeatures`].
pub fn combined_row(env: &[f64], stats: &StatFeatures, norm: &crate::features::Normalizer) -> Result<Vec<f64>> {
    combine_features(env, stats, norm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_f1: f64,
    pub l_f2: f64,
    pub l_joint: f64,
    /// Running accuracy over the epoch's training batches (dropout on).
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,l_f1,l_f2,l_joint,train_acc,test_acc\n");
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.epoch, r.l_f1, r.l_f2, r.l_joint, r.train_acc, r.test_acc
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Trains for `cfg.epochs` epochs over `train` (reshuffled each epoch) and
/// scores the held-out `test` slots after every epoch.
pub fn fit(
    model: &mut JointModel,
    slots: &[Slot],
    train: &[TrainItem],
    test: &[usize],
    labeled: &[LabeledSeq],
    cfg: &JointConfig,
) -> Result<TrainingReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "fit"));
    let mut adam = AdamState::new(&model.store);
    let mut order: Vec<TrainItem> = train.to_vec();
    let test_labels: Vec<usize> = test.iter().map(|&i| slots[i].label).collect();
    let mut report = TrainingReport::default();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut s1, mut s2, mut sj, mut correct, mut seen, mut batches) = (0.0, 0.0, 0.0, 0, 0, 0);
        for batch in order.chunks(cfg.batch_size) {
            let sample = if model.extractor.is_some() && cfg.lambda_f1 > 0.0 {
                let tweets: usize = batch
                    .iter()
                    .flat_map(TrainItem::slots)
                    .map(|s| slots[s].tweets.len())
                    .sum();
                sample_labeled(labeled, tweets.min(cfg.sentiment_cap), &mut rng)
            } else {
                Vec::new()
            };
            let out = train_step(model, &mut adam, slots, batch, &sample, cfg, &mut rng)?;
            if !out.l_joint.is_finite() {
                return Err(Error::Data(format!("training diverged at epoch {epoch}")));
            }
            s1 += out.l_f1;
            s2 += out.l_f2;
            sj += out.l_joint;
            correct += out.correct;
            seen += out.total;
            batches += 1;
        }
        let probs = predict_slots(model, slots, test, cfg.sentiment_mode)?;
        let rec = EpochRecord {
            epoch,
            l_f1: s1 / batches as f64,
            l_f2: s2 / batches as f64,
            l_joint: sj / batches as f64,
            train_acc: correct as f64 / seen as f64,
            test_acc: accuracy(&probs, &test_labels)?,
        };
        log::info!(
            "epoch {epoch}: l_f1 {:.4} l_f2 {:.4} l_joint {:.4} train_acc {:.3} test_acc {:.3}",
            rec.l_f1,
            rec.l_f2,
            rec.l_joint,
            rec.train_acc,
            rec.test_acc
        );
        report.epochs.push(rec);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::tests::tiny_table;

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![0.5, 0.5]));
        let l = cross_entropy(&mut tape, p, &[1]).unwrap();
        assert!((tape.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-9);
        let p = tape.constant(Tensor::vector(vec![0.0, 1.0]));
        let l = cross_entropy(&mut tape, p, &[1]).unwrap();
        assert!(tape.value(l).item().unwrap().abs() < 1e-9);
        let p = tape.constant(Tensor::new(vec![2, 2], vec![0.5, 0.5, 0.2, 0.8]).unwrap());
        let l = cross_entropy(&mut tape, p, &[0, 1]).unwrap();
        let want = (2f64.ln() - 0.8f64.ln()) / 2.0;
        assert!((tape.value(l).item().unwrap() - want).abs() < 1e-15);
        assert!(cross_entropy(&mut tape, p, &[0, 2]).is_err());
    }

    #[test]
    fn joint_loss_examples() {
        let cfg = JointConfig::default();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(0.3));
        let b = tape.constant(Tensor::scalar(0.7));
        let j = joint_loss(&mut tape, a, b, &cfg).unwrap();
        assert!((tape.value(j).item().unwrap() - 1.0).abs() < 1e-15);
        let z = tape.constant(Tensor::scalar(0.0));
        let j = joint_loss(&mut tape, z, z, &cfg).unwrap();
        assert_eq!(tape.value(j).item().unwrap(), 0.0);
        let bad = tape.constant(Tensor::scalar(f64::NAN));
        assert!(joint_loss(&mut tape, bad, z, &cfg).is_err());
    }

    #[test]
    fn adam_examples() {
        let mut store = ParamStore::new();
        let a = store.add("a", ParamGroup::Extractor, Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = store.add("b", ParamGroup::Classifier, Tensor::vector(vec![1.0, 2.0])).unwrap();
        let cfg = JointConfig::default();
        let mut adam = AdamState::new(&store);
        adam.step(&mut store, &cfg).unwrap();
        assert_eq!(store.value(a).data(), &[1.0, 2.0]);
        store.get_mut(a).grad.iter_mut().for_each(|g| *g = 1.0);
        store.get_mut(b).grad.iter_mut().for_each(|g| *g = 1.0);
        let mut adam = AdamState::new(&store);
        adam.step(&mut store, &cfg).unwrap();
        let d = store.value(a).data()[0] - 1.0;
        assert!((d + 0.001).abs() < 1e-9, "{d}");
        assert_eq!(store.value(a).data(), store.value(b).data());
        store.add("c", ParamGroup::Classifier, Tensor::scalar(0.0)).unwrap();
        assert!(adam.step(&mut store, &cfg).is_err());
    }

    #[test]
    fn adam_skips_frozen_rows() {
        let mut store = ParamStore::new();
        let t = store
            .add("t", ParamGroup::Extractor, Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap())
            .unwrap();
        store.set_frozen_rows(t, vec![true, false]).unwrap();
        store.get_mut(t).grad.iter_mut().for_each(|g| *g = 1.0);
        let mut adam = AdamState::new(&store);
        adam.step(&mut store, &JointConfig::default()).unwrap();
        assert_eq!(&store.value(t).data()[..2], &[1.0, 1.0]);
        assert!(store.value(t).data()[2] < 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(JointConfig {
            epochs: 0,
            ..JointConfig::default()
        }
        .validate()
        .is_err());
        assert!(JointConfig {
            lambda_f1: -1.0,
            ..JointConfig::default()
        }
        .validate()
        .is_err());
        assert!(JointConfig::default().validate().is_ok());
    }

    fn toy(seed: u64) -> (JointModel, Vec<Slot>, Vec<LabeledSeq>) {
        let table = tiny_table(4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sent = SentimentConfig {
            units: 4,
            ..SentimentConfig::default()
        };
        let model = JointModel::new(TrainMode::Joint, 2, Some(&table), &sent, &HeadConfig::default(), &mut rng).unwrap();
        let slots = (0..8)
            .map(|i| Slot {
                static_features: vec![(i % 4) as f64 / 3.0, 0.5, 0.7],
                tweets: (0..(i % 3)).map(|j| vec![1 + (i + j) % 4, 2, 0]).collect(),
                label: i % 4,
            })
            .collect();
        let labeled = vec![
            LabeledSeq {
                tokens: vec![1, 3, 0],
                label: 1,
            },
            LabeledSeq {
                tokens: vec![4, 4, 0],
                label: 0,
            },
        ];
        (model, slots, labeled)
    }

    #[test]
    fn zero_weights_leave_parameters_unchanged() {
        let (mut model, slots, _) = toy(1);
        let before = model.store.clone();
        let cfg = JointConfig {
            lambda_f2: 0.0,
            ..JointConfig::default()
        };
        let mut adam = AdamState::new(&model.store);
        let items: Vec<TrainItem> = (0..8).map(TrainItem::Real).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = train_step(&mut model, &mut adam, &slots, &items, &[], &cfg, &mut rng).unwrap();
        assert_eq!(out.l_f1, 0.0);
        assert_eq!(out.grad_norm, 0.0);
        for ((_, a), (_, b)) in model.store.iter().zip(before.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn unlabeled_batch_still_reaches_extractor() {
        let (mut model, slots, _) = toy(2);
        let items: Vec<TrainItem> = (0..8).map(TrainItem::Real).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = compute_step(&mut model, &slots, &items, &[], &JointConfig::default(), &mut rng).unwrap();
        assert_eq!(out.l_f1, 0.0);
        let ext = model.extractor.as_ref().unwrap();
        assert!(model.store.grad(ext.fwd.wx[0]).iter().any(|g| *g != 0.0));
    }

    #[test]
    fn overfit_one_batch() {
        let (mut model, slots, labeled) = toy(4);
        let items = vec![
            TrainItem::Real(0),
            TrainItem::Real(1),
            TrainItem::Synthetic {
                base: 2,
                neighbor: 6,
                u: 0.4,
            },
            TrainItem::Real(5),
        ];
        let refs: Vec<&LabeledSeq> = labeled.iter().collect();
        let cfg = JointConfig::default();
        let mut adam = AdamState::new(&model.store);
        let mut last = f64::INFINITY;
        for _ in 0..6 {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let out = train_step(&mut model, &mut adam, &slots, &items, &refs, &cfg, &mut rng).unwrap();
            assert!(out.l_joint < last, "{} !< {last}", out.l_joint);
            last = out.l_joint;
        }
    }

    #[test]
    fn fit_is_deterministic_and_rejects_empty() {
        let run = || {
            let (mut model, slots, labeled) = toy(5);
            let items: Vec<TrainItem> = (0..6).map(TrainItem::Real).collect();
            let cfg = JointConfig {
                epochs: 2,
                batch_size: 3,
                ..JointConfig::default()
            };
            fit(&mut model, &slots, &items, &[6, 7], &labeled, &cfg).unwrap()
        };
        assert_eq!(run().to_csv(), run().to_csv());
        let (mut model, slots, labeled) = toy(5);
        assert!(fit(&mut model, &slots, &[], &[0], &labeled, &JointConfig::default()).is_err());
    }

    #[test]
    fn save_and_load_round_trip() {
        let (model, slots, _) = toy(6);
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let table = tiny_table(4);
        let back = JointModel::load(dir.path(), Some(&table)).unwrap();
        let idx: Vec<usize> = (0..8).collect();
        let a = predict_slots(&model, &slots, &idx, SentimentMode::Soft).unwrap();
        let b = predict_slots(&back, &slots, &idx, SentimentMode::Soft).unwrap();
        assert_eq!(a, b);
    }
}
