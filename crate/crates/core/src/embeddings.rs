//! Skip-gram word embeddings, semantic entity vectors and the merged table.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::{Gazetteer, Token, TokenSeq};

pub const PAD_TOKEN: &str = "<pad>";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn with_pad() -> Self {
        let mut v = Vocab::default();
        v.push(PAD_TOKEN);
        v
    }

    fn push(&mut self, token: &str) -> usize {
        let i = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), i);
        i
    }

    /// Index of `token`; 0 (PAD) when unknown.
    pub fn get(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Including PAD.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 1
    }

    pub fn indices(&self, seq: &TokenSeq) -> Vec<usize> {
        seq.tokens.iter().map(|t| t.key().map_or(0, |k| self.get(k))).collect()
    }
}

/// Tokens with frequency at least `min_count`, ordered by (frequency desc,
/// token asc) and indexed from 1. Index 0 is PAD.
pub fn build_vocab(corpus: &[TokenSeq], min_count: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::contract("cannot build a vocabulary from an empty corpus"));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for seq in corpus {
        for k in seq.tokens.iter().filter_map(Token::key) {
            *counts.entry(k).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count.max(1)).collect();
    if kept.is_empty() {
        return Err(Error::Data(format!("no token occurs at least {min_count} times")));
    }
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let mut vocab = Vocab::with_pad();
    for (t, _) in kept {
        vocab.push(t);
    }
    Ok(vocab)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkipgramConfig {
    pub d: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub min_count: usize,
    pub seed: u64,
}

impl Default for SkipgramConfig {
    fn default() -> Self {
        SkipgramConfig {
            d: 200,
            window: 5,
            negatives: 5,
            epochs: 5,
            learning_rate: 0.025,
            min_count: 2,
            seed: 0,
        }
    }
}

impl SkipgramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 1 || self.window < 1 || self.negatives < 1 || self.min_count < 1 {
            return Err(Error::Config(
                "skip-gram d, window, negatives and min_count must all be at least 1".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("skip-gram learning rate {} is invalid", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub vocab: Vocab,
    /// `[V x d]`; row 0 is the zero PAD row.
    pub vectors: Tensor,
    pub d: usize,
    /// Rows copied from the semantic source.
    pub entity_marks: BTreeSet<usize>,
}

impl EmbeddingTable {
    pub fn row(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    pub fn vector(&self, token: &str) -> Option<&[f64]> {
        self.vocab.lookup(token).map(|i| self.row(i))
    }

    /// PAD and semantic rows; these stay fixed during joint training.
    pub fn frozen_rows(&self) -> Vec<bool> {
        (0..self.vocab.len())
            .map(|i| i == 0 || self.entity_marks.contains(&i))
            .collect()
    }

    pub fn gazetteer(&self) -> Gazetteer {
        Gazetteer::new(self.entity_marks.iter().map(|&i| self.vocab.token(i)))
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub struct SkipgramOutput {
    pub table: EmbeddingTable,
    /// Mean pair loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Skip-gram with negative sampling (unigram^0.75 noise) and a linearly
/// decaying learning rate. Returns the center (input) vectors.
pub fn train_skipgram(corpus: &[TokenSeq], cfg: &SkipgramConfig) -> Result<SkipgramOutput> {
    cfg.validate()?;
    let vocab = build_vocab(corpus, cfg.min_count)?;
    let v = vocab.len();
    if v < 3 {
        return Err(Error::Data(format!(
            "skip-gram needs at least 2 vocabulary tokens, found {}",
            v - 1
        )));
    }
    let d = cfg.d;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let sentences: Vec<Vec<usize>> = corpus
        .iter()
        .map(|s| vocab.indices(s).into_iter().filter(|&i| i != 0).collect::<Vec<_>>())
        .filter(|s: &Vec<usize>| s.len() >= 2)
        .collect();
    let mut counts = vec![0usize; v];
    for s in &sentences {
        for &i in s {
            counts[i] += 1;
        }
    }
    let weights: Vec<f64> = counts.iter().map(|&c| (c as f64).powf(0.75)).collect();
    let noise = WeightedIndex::new(&weights).map_err(|e| Error::Data(format!("noise distribution: {e}")))?;

    let mut input = vec![0.0; v * d];
    for x in input.iter_mut().skip(d) {
        *x = rng.random_range(-0.5..0.5) / d as f64;
    }
    let mut output = vec![0.0; v * d];

    let pairs_per_epoch: usize = sentences
        .iter()
        .map(|s| {
            (0..s.len())
                .map(|i| i.min(cfg.window) + (s.len() - 1 - i).min(cfg.window))
                .sum::<usize>()
        })
        .sum();
    let total = (pairs_per_epoch * cfg.epochs).max(1) as f64;
    let mut done = 0usize;
    let mut grad_in = vec![0.0; d];
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        let mut loss = 0.0;
        let mut pairs = 0usize;
        for s in &sentences {
            for (i, &center) in s.iter().enumerate() {
                let lo = i.saturating_sub(cfg.window);
                let hi = (i + cfg.window).min(s.len() - 1);
                for (j, &ctx) in s.iter().enumerate().take(hi + 1).skip(lo) {
                    if j == i {
                        continue;
                    }
                    let lr = cfg.learning_rate * (1.0 - done as f64 / total).max(1e-4);
                    done += 1;
                    pairs += 1;
                    grad_in.iter_mut().for_each(|g| *g = 0.0);
                    let vc = center * d;
                    for n in 0..=cfg.negatives {
                        let (target, label) = if n == 0 {
                            (ctx, 1.0)
                        } else {
                            let t = noise.sample(&mut rng);
                            if t == ctx {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let ut = target * d;
                        let dot: f64 = (0..d).map(|k| input[vc + k] * output[ut + k]).sum();
                        loss -= if label > 0.0 { log_sigmoid(dot) } else { log_sigmoid(-dot) };
                        let g = lr * (label - sigmoid(dot));
                        for k in 0..d {
                            grad_in[k] += g * output[ut + k];
                            output[ut + k] += g * input[vc + k];
                        }
                    }
                    for k in 0..d {
                        input[vc + k] += grad_in[k];
                    }
                }
            }
        }
        epoch_losses.push(if pairs > 0 { loss / pairs as f64 } else { 0.0 });
    }

    Ok(SkipgramOutput {
        table: EmbeddingTable {
            vocab,
            vectors: Tensor::new(vec![v, d], input)?,
            d,
            entity_marks: BTreeSet::new(),
        },
        epoch_losses,
    })
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn parse_vector_line(path: &Path, n: usize, line: &str, d: usize) -> Result<(String, Vec<f64>)> {
    let mut parts = line.split_whitespace();
    let key = parts.next().ok_or_else(|| parse_err(path, n, "empty vector line"))?;
    let vals = parts
        .map(|p| p.parse::<f64>().map_err(|_| parse_err(path, n, format!("malformed float {p:?}"))))
        .collect::<Result<Vec<f64>>>()?;
    if vals.len() != d {
        return Err(parse_err(
            path,
            n,
            format!("dimension mismatch: {} values, expected {d}", vals.len()),
        ));
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(parse_err(path, n, "non-finite vector component"));
    }
    Ok((key.to_string(), vals))
}

fn read_word2vec(path: &Path, expected_d: Option<usize>) -> Result<Vec<(String, Vec<f64>)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let header = loop {
        match lines.next() {
            None => return Ok(Vec::new()),
            Some((_, l)) => {
                let l = l.map_err(|e| Error::io(path, e))?;
                if !l.trim().is_empty() {
                    break l;
                }
            }
        }
    };
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|p| p.parse().map_err(|_| parse_err(path, 1, format!("bad header {header:?}"))))
        .collect::<Result<_>>()?;
    let [count, d] = dims[..] else {
        return Err(parse_err(path, 1, format!("header must be \"V d\", got {header:?}")));
    };
    if let Some(e) = expected_d {
        if d != e {
            return Err(parse_err(path, 1, format!("dimension mismatch: file has {d}, expected {e}")));
        }
    }
    let mut out = Vec::with_capacity(count);
    for (i, l) in lines {
        let l = l.map_err(|e| Error::io(path, e))?;
        if l.trim().is_empty() {
            continue;
        }
        out.push(parse_vector_line(path, i + 1, &l, d)?);
    }
    if out.len() != count {
        log::warn!("{}: header lists {count} vectors but {} were read", path.display(), out.len());
    }
    Ok(out)
}

/// Reads semantic (entity) vectors in word2vec text format. Keys are
/// lower-cased phrases with words joined by underscores.
pub fn load_semantic_vectors(path: &Path, expected_d: usize) -> Result<BTreeMap<String, Vec<f64>>> {
    let entries = read_word2vec(path, Some(expected_d))?;
    if entries.is_empty() {
        log::warn!("{}: no semantic vectors found", path.display());
    }
    Ok(entries.into_iter().map(|(k, v)| (k.to_ascii_lowercase(), v)).collect())
}

/// Adds or overwrites every semantic phrase with its vector and marks the
/// row as an entity row. Other rows are left untouched.
pub fn merge_tables(table: &EmbeddingTable, semantic: &BTreeMap<String, Vec<f64>>) -> Result<EmbeddingTable> {
    let d = table.d;
    let mut vocab = table.vocab.clone();
    let mut data = table.vectors.data().to_vec();
    let mut marks = table.entity_marks.clone();
    for (phrase, vec) in semantic {
        if vec.len() != d {
            return Err(Error::shape("merge_tables", &[vec.len()], &[d]));
        }
        let row = match vocab.lookup(phrase) {
            Some(i) if i != 0 => i,
            _ => {
                data.extend(std::iter::repeat_n(0.0, d));
                vocab.push(phrase)
            }
        };
        data[row * d..(row + 1) * d].copy_from_slice(vec);
        marks.insert(row);
    }
    let v = vocab.len();
    Ok(EmbeddingTable {
        vocab,
        vectors: Tensor::new(vec![v, d], data)?,
        d,
        entity_marks: marks,
    })
}

/// `[s x d]` matrix of the sequence; PAD and unknown tokens give zero rows.
pub fn lookup_sequence(table: &EmbeddingTable, seq: &TokenSeq) -> Tensor {
    let d = table.d;
    let mut data = Vec::with_capacity(seq.len() * d);
    for i in table.vocab.indices(seq) {
        data.extend_from_slice(table.row(i));
    }
    Tensor::new(vec![seq.len(), d], data).expect("rows of width d")
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    d: usize,
    entity_marks: Vec<usize>,
    #[serde(default)]
    config: Option<SkipgramConfig>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes every row (PAD included, in index order) in word2vec text format
/// plus a `<path>.json` sidecar with the entity rows and training config.
pub fn export_table(table: &EmbeddingTable, path: &Path, config: Option<&SkipgramConfig>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{} {}", table.vocab.len(), table.d).map_err(io)?;
    for (i, tok) in table.vocab.tokens().iter().enumerate() {
        write!(w, "{tok}").map_err(io)?;
        for x in table.row(i) {
            write!(w, " {x}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)?;
    let side = Sidecar {
        d: table.d,
        entity_marks: table.entity_marks.iter().copied().collect(),
        config: config.cloned(),
    };
    let sp = sidecar_path(path);
    std::fs::write(&sp, serde_json::to_string_pretty(&side)?).map_err(|e| Error::io(&sp, e))
}

pub fn import_table(path: &Path) -> Result<(EmbeddingTable, Option<SkipgramConfig>)> {
    let sp = sidecar_path(path);
    let side: Sidecar =
        serde_json::from_str(&std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?)?;
    let entries = read_word2vec(path, Some(side.d))?;
    if entries.first().map(|e| e.0.as_str()) != Some(PAD_TOKEN) {
        return Err(parse_err(path, 2, "first row must be the padding token"));
    }
    let mut vocab = Vocab::default();
    let mut data = Vec::with_capacity(entries.len() * side.d);
    for (k, v) in &entries {
        vocab.push(k);
        data.extend_from_slice(v);
    }
    let v = vocab.len();
    if let Some(&bad) = side.entity_marks.iter().find(|&&i| i >= v) {
        return Err(Error::Data(format!("entity row {bad} out of range for {v} rows")));
    }
    Ok((
        EmbeddingTable {
            vocab,
            vectors: Tensor::new(vec![v, side.d], data)?,
            d: side.d,
            entity_marks: side.entity_marks.into_iter().collect(),
        },
        side.config,
    ))
}
