//! Feature extractor: a BiLSTM sentiment model over embedded tweets, the
//! per-slot sentiment statistics and their combination with environmental
//! features.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::layers::{bilstm_forward_batch, dropout_forward, lstm_run, Activation, DenseParams, LstmParams};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const EMBEDDING_PARAM: &str = "extractor.embedding";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    #[default]
    Bilstm,
    /// Forward direction only.
    Lstm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SentimentConfig {
    pub kind: ExtractorKind,
    pub units: usize,
    pub dropout: f64,
}

impl Default for SentimentConfig {
    fn default() -> Self {
        SentimentConfig {
            kind: ExtractorKind::Bilstm,
            units: 64,
            dropout: 0.25,
        }
    }
}

/// Whether per-tweet sentiment scores are probabilities or 0/1 labels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SentimentMode {
    #[default]
    Soft,
    Hard,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentimentModel {
    pub config: SentimentConfig,
    pub embedding: ParamId,
    pub fwd: LstmParams,
    pub bwd: Option<LstmParams>,
    pub head: DenseParams,
}

impl SentimentModel {
    /// Registers the embedding table (PAD and semantic rows frozen), the
    /// recurrent layer and the 2-way output layer in `store`.
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        table: &EmbeddingTable,
        config: &SentimentConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if config.units < 1 {
            return Err(Error::Config("extractor units must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config(format!("extractor dropout {} must lie in [0, 1)", config.dropout)));
        }
        let g = ParamGroup::Extractor;
        let embedding = store.add(EMBEDDING_PARAM, g, table.vectors.clone())?;
        store.set_frozen_rows(embedding, table.frozen_rows())?;
        let (d, u) = (table.d, config.units);
        let fwd = LstmParams::init(store, "extractor.lstm_fwd", g, d, u, rng)?;
        let bwd = match config.kind {
            ExtractorKind::Bilstm => Some(LstmParams::init(store, "extractor.lstm_bwd", g, d, u, rng)?),
            ExtractorKind::Lstm => None,
        };
        let width = if bwd.is_some() { 2 * u } else { u };
        let head = DenseParams::init(store, "extractor.out", g, width, 2, rng)?;
        Ok(SentimentModel {
            config: config.clone(),
            embedding,
            fwd,
            bwd,
            head,
        })
    }

    pub fn d(&self) -> usize {
        self.fwd.d
    }

    /// Runs the stack over timestep inputs (`steps[t]` is `[n x d]`) and
    /// returns `[n x 2]` probabilities, column 0 negative, column 1 positive.
    pub fn forward_steps<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        steps: &[Var],
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let f = self.fwd.bind(tape, store);
        let h = match &self.bwd {
            Some(b) => {
                let b = b.bind(tape, store);
                bilstm_forward_batch(tape, &f, &b, steps)?
            }
            None => lstm_run(tape, &f, steps, false)?,
        };
        let h = dropout_forward(tape, h, self.config.dropout, training, rng)?;
        let z = self.head.forward(tape, store, h, Activation::None)?;
        tape.softmax(z)
    }

    /// Probabilities `[n x 2]` for `n` index sequences of equal length.
    pub fn forward_indices<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seqs: &[&[usize]],
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let s = seqs.first().map_or(0, |q| q.len());
        if seqs.is_empty() || s == 0 {
            return Err(Error::contract("sentiment forward over no tokens"));
        }
        if let Some(bad) = seqs.iter().find(|q| q.len() != s) {
            return Err(Error::shape("sentiment_forward", &[s], &[bad.len()]));
        }
        let mut steps = Vec::with_capacity(s);
        let mut rows = Vec::with_capacity(seqs.len());
        for t in 0..s {
            rows.clear();
            rows.extend(seqs.iter().map(|q| q[t]));
            steps.push(tape.gather(store, self.embedding, &rows)?);
        }
        self.forward_steps(tape, store, &steps, training, rng)
    }

    /// Probabilities `[2]` for one embedded tweet matrix `[s x d]`.
    pub fn forward_matrix<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        m: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let shape = tape.shape(m).to_vec();
        if shape.len() != 2 || shape[1] != self.d() || shape[0] == 0 {
            return Err(Error::shape("sentiment_forward", &shape, &[self.d()]));
        }
        let steps = (0..shape[0])
            .map(|t| tape.slice_rows(m, t, t + 1))
            .collect::<Result<Vec<_>>>()?;
        let p = self.forward_steps(tape, store, &steps, training, rng)?;
        tape.reshape(p, &[2])
    }

    /// Inference over many sequences, in chunks, without dropout.
    pub fn predict(&self, store: &ParamStore, seqs: &[Vec<usize>]) -> Result<Vec<[f64; 2]>> {
        let mut out = Vec::with_capacity(seqs.len());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for chunk in seqs.chunks(512) {
            let refs: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
            let mut tape = Tape::new();
            let p = self.forward_indices(&mut tape, store, &refs, false, &mut rng)?;
            out.extend(tape.value(p).data().chunks(2).map(|r| [r[0], r[1]]));
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StatFeatures {
    pub c: usize,
    pub v_neg: f64,
    pub v_pos: f64,
}

fn pop_variance(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let (sum, n) = xs.clone().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        return 0.0;
    }
    let mu = sum / n as f64;
    xs.map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64
}

/// Tweet count and the population variances of the negative and positive
/// score series. An empty slot gives all zeros.
pub fn batch_statistics(sentiments: &[(f64, f64)]) -> StatFeatures {
    StatFeatures {
        c: sentiments.len(),
        v_neg: pop_variance(sentiments.iter().map(|p| p.0)),
        v_pos: pop_variance(sentiments.iter().map(|p| p.1)),
    }
}

/// Converts probabilities to the scores used for the statistics.
pub fn sentiment_scores(probs: &[[f64; 2]], mode: SentimentMode) -> Vec<(f64, f64)> {
    probs
        .iter()
        .map(|p| match mode {
            SentimentMode::Soft => (p[0], p[1]),
            SentimentMode::Hard => {
                let pos = if p[1] > p[0] { 1.0 } else { 0.0 };
                (1.0 - pos, pos)
            }
        })
        .collect()
}

/// `(v_neg, v_pos)` for one slot as rank-0 tape nodes. `probs` is the
/// slot's `[c x 2]` probability block, or `None` for an empty slot. Hard
/// mode scores are constants and carry no gradient.
pub fn tape_statistics(tape: &mut Tape, probs: Option<Var>, mode: SentimentMode) -> Result<(Var, Var)> {
    let Some(p) = probs else {
        let z = tape.constant(Tensor::scalar(0.0));
        return Ok((z, z));
    };
    match mode {
        SentimentMode::Soft => {
            let c = tape.shape(p)[0];
            let neg = tape.slice_cols(p, 0, 1)?;
            let pos = tape.slice_cols(p, 1, 2)?;
            debug_assert!(c > 0);
            Ok((tape.pop_variance(neg)?, tape.pop_variance(pos)?))
        }
        SentimentMode::Hard => {
            let rows: Vec<[f64; 2]> = tape.value(p).data().chunks(2).map(|r| [r[0], r[1]]).collect();
            let s = batch_statistics(&sentiment_scores(&rows, SentimentMode::Hard));
            let vn = tape.constant(Tensor::scalar(s.v_neg));
            let vp = tape.constant(Tensor::scalar(s.v_pos));
            Ok((vn, vp))
        }
    }
}

/// Min-max ranges of the environmental features and the largest training
/// `ln(1 + c)`, fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub env_min: Vec<f64>,
    pub env_max: Vec<f64>,
    pub log_count_max: f64,
}

impl Normalizer {
    pub fn fit(env: &[Vec<f64>], counts: &[usize]) -> Result<Self> {
        let Some(first) = env.first() else {
            return Err(Error::contract("cannot fit a normalizer on no rows"));
        };
        let m = first.len();
        let mut lo = vec![f64::INFINITY; m];
        let mut hi = vec![f64::NEG_INFINITY; m];
        for row in env {
            if row.len() != m {
                return Err(Error::shape("normalizer fit", &[m], &[row.len()]));
            }
            for (j, &x) in row.iter().enumerate() {
                lo[j] = lo[j].min(x);
                hi[j] = hi[j].max(x);
            }
        }
        let log_count_max = counts.iter().map(|&c| (c as f64).ln_1p()).fold(0.0, f64::max);
        Ok(Normalizer {
            env_min: lo,
            env_max: hi,
            log_count_max,
        })
    }

    pub fn m(&self) -> usize {
        self.env_min.len()
    }

    /// Min-max scaled features; a constant training feature maps to 0.
    pub fn env(&self, env: &[f64]) -> Result<Vec<f64>> {
        if env.len() != self.m() {
            return Err(Error::shape("combine_features", &[env.len()], &[self.m()]));
        }
        Ok(env
            .iter()
            .zip(self.env_min.iter().zip(&self.env_max))
            .map(|(&x, (&lo, &hi))| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 })
            .collect())
    }

    pub fn count(&self, c: usize) -> f64 {
        if self.log_count_max > 0.0 {
            (c as f64).ln_1p() / self.log_count_max
        } else {
            0.0
        }
    }

    /// `[scaled env; scaled count]`, the part that does not depend on the
    /// extractor.
    pub fn static_part(&self, env: &[f64], c: usize) -> Result<Vec<f64>> {
        let mut v = self.env(env)?;
        v.push(self.count(c));
        Ok(v)
    }
}

/// `[scaled env (m); scaled log count; v_neg; v_pos]`.
pub fn combine_features(env: &[f64], stats: &StatFeatures, norm: &Normalizer) -> Result<Vec<f64>> {
    let mut v = norm.static_part(env, stats.c)?;
    v.push(stats.v_neg);
    v.push(stats.v_pos);
    Ok(v)
}

/// Tape version of [`combine_features`] giving a `[1 x (m+3)]` row.
pub fn tape_combine(tape: &mut Tape, static_part: &[f64], v_neg: Var, v_pos: Var) -> Result<Var> {
    let s = tape.constant(Tensor::new(vec![1, static_part.len()], static_part.to_vec())?);
    let vn = tape.reshape(v_neg, &[1, 1])?;
    let vp = tape.reshape(v_pos, &[1, 1])?;
    tape.concat(&[s, vn, vp], 1)
}
