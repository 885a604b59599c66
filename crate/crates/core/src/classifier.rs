//! Typhoon category classifier heads over the combined feature vector.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{dropout_forward, maxpool1d_forward, Activation, Conv1dParams, DenseParams};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Intensity categories in increasing order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    TD,
    TS,
    TY,
    ST,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::TD, Category::TS, Category::TY, Category::ST];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::TD => "TD",
            Category::TS => "TS",
            Category::TY => "TY",
            Category::ST => "ST",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "TD" => Ok(Category::TD),
            "TS" => Ok(Category::TS),
            "TY" => Ok(Category::TY),
            "ST" => Ok(Category::ST),
            other => Err(Error::Data(format!("unknown typhoon category {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    Cnn,
    Dnn,
    Rnn,
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(HeadKind::Cnn),
            "dnn" => Ok(HeadKind::Dnn),
            "rnn" => Ok(HeadKind::Rnn),
            other => Err(Error::Config(format!("unknown classifier kind {other:?}"))),
        }
    }
}

/// Architecture constants for all three heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub conv_channels: (usize, usize),
    pub kernel_size: usize,
    pub pool: usize,
    pub conv_dropout: (f64, f64),
    pub dnn_units: (usize, usize),
    pub rnn_units: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            kind: HeadKind::Cnn,
            conv_channels: (32, 16),
            kernel_size: 3,
            pool: 2,
            conv_dropout: (0.30, 0.20),
            dnn_units: (64, 32),
            rnn_units: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadLayers {
    Cnn {
        conv1: Conv1dParams,
        conv2: Conv1dParams,
        out: DenseParams,
    },
    Dnn {
        h1: DenseParams,
        h2: DenseParams,
        out: DenseParams,
    },
    Rnn {
        wx: ParamId,
        wh: ParamId,
        b: ParamId,
        out: DenseParams,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub config: HeadConfig,
    pub input_len: usize,
    pub k: usize,
    pub layers: HeadLayers,
}

/// Length after two rounds of pooling.
fn pooled_len(len: usize, pool: usize) -> usize {
    len.div_ceil(pool).div_ceil(pool)
}

/// Adds the head's parameters to `store` under the `classifier.` prefix.
pub fn build_head<R: Rng>(
    store: &mut ParamStore,
    config: &HeadConfig,
    input_len: usize,
    k: usize,
    rng: &mut R,
) -> Result<ClassifierHead> {
    if input_len < 1 || k < 1 {
        return Err(Error::Config("classifier input length and class count must be at least 1".into()));
    }
    let g = ParamGroup::Classifier;
    let layers = match config.kind {
        HeadKind::Cnn => {
            let (c1, c2) = config.conv_channels;
            if config.pool < 1 {
                return Err(Error::Config("pool window must be at least 1".into()));
            }
            let conv1 = Conv1dParams::init(store, "classifier.conv1", g, 1, c1, config.kernel_size, rng)?;
            let conv2 = Conv1dParams::init(store, "classifier.conv2", g, c1, c2, config.kernel_size, rng)?;
            let flat = pooled_len(input_len, config.pool) * c2;
            let out = DenseParams::init(store, "classifier.out", g, flat, k, rng)?;
            HeadLayers::Cnn { conv1, conv2, out }
        }
        HeadKind::Dnn => {
            let (a, b) = config.dnn_units;
            HeadLayers::Dnn {
                h1: DenseParams::init(store, "classifier.dense1", g, input_len, a, rng)?,
                h2: DenseParams::init(store, "classifier.dense2", g, a, b, rng)?,
                out: DenseParams::init(store, "classifier.out", g, b, k, rng)?,
            }
        }
        HeadKind::Rnn => {
            let u = config.rnn_units;
            HeadLayers::Rnn {
                wx: store.add_glorot("classifier.rnn_wx", g, &[1, u], 1, u, rng)?,
                wh: store.add_glorot("classifier.rnn_wh", g, &[u, u], u, u, rng)?,
                b: store.add_filled("classifier.rnn_b", g, &[u], 0.0)?,
                out: DenseParams::init(store, "classifier.out", g, u, k, rng)?,
            }
        }
    };
    Ok(ClassifierHead {
        config: config.clone(),
        input_len,
        k,
        layers,
    })
}

impl ClassifierHead {
    pub fn out_layer(&self) -> DenseParams {
        match &self.layers {
            HeadLayers::Cnn { out, .. } | HeadLayers::Dnn { out, .. } | HeadLayers::Rnn { out, .. } => *out,
        }
    }
}

/// Probabilities `[n x k]` for `x` of shape `[n x input_len]`, or `[k]` for
/// a single `[input_len]` vector.
pub fn classify_forward<R: Rng>(
    tape: &mut Tape,
    store: &ParamStore,
    head: &ClassifierHead,
    x: Var,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (x, single) = match shape.as_slice() {
        [l] if *l == head.input_len => (tape.reshape(x, &[1, *l])?, true),
        [_, l] if *l == head.input_len => (x, false),
        _ => return Err(Error::shape("classify_forward", &shape, &[head.input_len])),
    };
    let n = tape.shape(x)[0];
    let len = head.input_len;
    let cfg = &head.config;
    let logits = match &head.layers {
        HeadLayers::Cnn { conv1, conv2, out } => {
            let h = tape.reshape(x, &[n, len, 1])?;
            let h = conv1.forward(tape, store, h)?;
            let h = tape.relu(h);
            let h = maxpool1d_forward(tape, h, cfg.pool)?;
            let h = dropout_forward(tape, h, cfg.conv_dropout.0, training, rng)?;
            let h = conv2.forward(tape, store, h)?;
            let h = tape.relu(h);
            let h = maxpool1d_forward(tape, h, cfg.pool)?;
            let h = dropout_forward(tape, h, cfg.conv_dropout.1, training, rng)?;
            let flat = tape.value(h).len() / n.max(1);
            let h = tape.reshape(h, &[n, flat])?;
            out.forward(tape, store, h, Activation::None)?
        }
        HeadLayers::Dnn { h1, h2, out } => {
            let h = h1.forward(tape, store, x, Activation::Relu)?;
            let h = h2.forward(tape, store, h, Activation::Relu)?;
            out.forward(tape, store, h, Activation::None)?
        }
        HeadLayers::Rnn { wx, wh, b, out } => {
            let wx = tape.param(store, *wx);
            let wh = tape.param(store, *wh);
            let b = tape.param(store, *b);
            let mut h = tape.constant(Tensor::zeros(&[n, cfg.rnn_units]));
            for t in 0..len {
                let xt = tape.slice_cols(x, t, t + 1)?;
                let a = tape.matmul(xt, wx)?;
                let r = tape.matmul(h, wh)?;
                let s = tape.add(a, r)?;
                let s = tape.add(s, b)?;
                h = tape.tanh(s);
            }
            out.forward(tape, store, h, Activation::None)?
        }
    };
    let p = tape.softmax(logits)?;
    if single {
        tape.reshape(p, &[head.k])
    } else {
        Ok(p)
    }
}

/// Argmax category; ties go to the lowest index.
pub fn predict_category(probs: &[f64]) -> Result<Category> {
    if probs.is_empty() || probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::contract(format!("cannot predict from probabilities {probs:?}")));
    }
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    Category::from_index(best).ok_or_else(|| Error::contract(format!("class index {best} has no category")))
}
