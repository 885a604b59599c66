//! Network layers built on the tape: LSTM / BiLSTM, dense, 1-D convolution,
//! max-pooling, dropout and softmax.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Gate order used everywhere: input, forget, output, candidate.
pub const GATES: [&str; 4] = ["i", "f", "o", "g"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmParams {
    pub d: usize,
    pub u: usize,
    /// `[d x u]` input weights per gate.
    pub wx: [ParamId; 4],
    /// `[u x u]` recurrent weights per gate.
    pub wh: [ParamId; 4],
    /// `[u]` biases per gate.
    pub b: [ParamId; 4],
}

/// LSTM parameters bound onto one tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundLstm {
    pub d: usize,
    pub u: usize,
    wx: [Var; 4],
    wh: [Var; 4],
    b: [Var; 4],
}

impl LstmParams {
    /// Glorot-uniform matrices, zero biases except the forget bias at 1.0.
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        d: usize,
        u: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut wx = Vec::with_capacity(4);
        let mut wh = Vec::with_capacity(4);
        let mut b = Vec::with_capacity(4);
        for gate in GATES {
            wx.push(store.add_glorot(&format!("{prefix}.wx_{gate}"), group, &[d, u], d, u, rng)?);
            wh.push(store.add_glorot(&format!("{prefix}.wh_{gate}"), group, &[u, u], u, u, rng)?);
            let fill = if gate == "f" { 1.0 } else { 0.0 };
            b.push(store.add_filled(&format!("{prefix}.b_{gate}"), group, &[u], fill)?);
        }
        Ok(LstmParams {
            d,
            u,
            wx: wx.try_into().expect("four gates"),
            wh: wh.try_into().expect("four gates"),
            b: b.try_into().expect("four gates"),
        })
    }

    /// Looks up parameters previously created under `prefix`.
    pub fn find(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |name: String| store.id(&name).ok_or_else(|| Error::contract(format!("missing parameter {name}")));
        let mut wx = Vec::new();
        let mut wh = Vec::new();
        let mut b = Vec::new();
        for gate in GATES {
            wx.push(get(format!("{prefix}.wx_{gate}"))?);
            wh.push(get(format!("{prefix}.wh_{gate}"))?);
            b.push(get(format!("{prefix}.b_{gate}"))?);
        }
        let shape = store.value(wx[0]).shape();
        Ok(LstmParams {
            d: shape[0],
            u: shape[1],
            wx: wx.try_into().expect("four gates"),
            wh: wh.try_into().expect("four gates"),
            b: b.try_into().expect("four gates"),
        })
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.wx.iter().chain(&self.wh).chain(&self.b).copied()
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BoundLstm {
        BoundLstm {
            d: self.d,
            u: self.u,
            wx: self.wx.map(|id| tape.param(store, id)),
            wh: self.wh.map(|id| tape.param(store, id)),
            b: self.b.map(|id| tape.param(store, id)),
        }
    }
}

fn as_rows(tape: &mut Tape, v: Var, width: usize, what: &str) -> Result<(Var, bool)> {
    let shape = tape.shape(v).to_vec();
    match shape.as_slice() {
        [n] if *n == width => Ok((tape.reshape(v, &[1, width])?, true)),
        [_, n] if *n == width => Ok((v, false)),
        _ => Err(Error::Contract(format!("{what} has shape {shape:?}, expected [{width}] or [n x {width}]"))),
    }
}

/// One LSTM step. `x` is `[n x d]` (or `[d]`), `h_prev` and `m_prev` are
/// `[n x u]` (or `[u]`). Returns `(h_t, m_t)` with the same leading shape.
pub fn lstm_cell_step(tape: &mut Tape, p: &BoundLstm, x: Var, h_prev: Var, m_prev: Var) -> Result<(Var, Var)> {
    let (x2, flat) = as_rows(tape, x, p.d, "lstm input")?;
    let (h2, _) = as_rows(tape, h_prev, p.u, "lstm hidden state")?;
    let (m2, _) = as_rows(tape, m_prev, p.u, "lstm memory state")?;
    let n = tape.shape(x2)[0];
    if tape.shape(h2)[0] != n || tape.shape(m2)[0] != n {
        return Err(Error::shape("lstm_cell_step", tape.shape(x2), tape.shape(h2)));
    }
    let mut pre = [x2; 4];
    for (k, slot) in pre.iter_mut().enumerate() {
        let a = tape.matmul(x2, p.wx[k])?;
        let r = tape.matmul(h2, p.wh[k])?;
        let s = tape.add(a, r)?;
        *slot = tape.add(s, p.b[k])?;
    }
    let i = tape.sigmoid(pre[0]);
    let f = tape.sigmoid(pre[1]);
    let o = tape.sigmoid(pre[2]);
    let g = tape.tanh(pre[3]);
    let keep = tape.mul(f, m2)?;
    let write = tape.mul(i, g)?;
    let m = tape.add(keep, write)?;
    let tm = tape.tanh(m);
    let h = tape.mul(o, tm)?;
    if flat {
        let u = p.u;
        Ok((tape.reshape(h, &[u])?, tape.reshape(m, &[u])?))
    } else {
        Ok((h, m))
    }
}

/// Runs one direction over `steps` (each `[n x d]`) from zero state and
/// returns the final hidden state `[n x u]`.
pub fn lstm_run(tape: &mut Tape, p: &BoundLstm, steps: &[Var], reverse: bool) -> Result<Var> {
    let Some(&first) = steps.first() else {
        return Err(Error::contract("lstm over an empty sequence"));
    };
    let n = tape.shape(first).first().copied().unwrap_or(1);
    let mut h = tape.constant(Tensor::zeros(&[n, p.u]));
    let mut m = tape.constant(Tensor::zeros(&[n, p.u]));
    let order: Box<dyn Iterator<Item = &Var>> = if reverse {
        Box::new(steps.iter().rev())
    } else {
        Box::new(steps.iter())
    };
    for &x in order {
        (h, m) = lstm_cell_step(tape, p, x, h, m)?;
    }
    Ok(h)
}

/// Batched BiLSTM: `steps[t]` holds timestep `t` for every sequence as
/// `[n x d]`. Returns `[n x 2u]` = concat(forward final, backward final).
pub fn bilstm_forward_batch(tape: &mut Tape, fwd: &BoundLstm, bwd: &BoundLstm, steps: &[Var]) -> Result<Var> {
    let hf = lstm_run(tape, fwd, steps, false)?;
    let hb = lstm_run(tape, bwd, steps, true)?;
    tape.concat(&[hf, hb], 1)
}

/// BiLSTM over one `[s x d]` sequence, giving a `[2u]` vector.
pub fn bilstm_forward(tape: &mut Tape, fwd: &BoundLstm, bwd: &BoundLstm, seq: Var) -> Result<Var> {
    let shape = tape.shape(seq).to_vec();
    if shape.len() != 2 || shape[1] != fwd.d || bwd.d != fwd.d {
        return Err(Error::shape("bilstm_forward", &shape, &[fwd.d]));
    }
    if shape[0] == 0 {
        return Err(Error::contract("bilstm over an empty sequence"));
    }
    let steps = (0..shape[0])
        .map(|t| tape.slice_rows(seq, t, t + 1))
        .collect::<Result<Vec<_>>>()?;
    let out = bilstm_forward_batch(tape, fwd, bwd, &steps)?;
    tape.reshape(out, &[fwd.u + bwd.u])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
    Tanh,
}

/// `activation(x . w + b)` with `x` `[n x in]`, `w` `[in x out]`, `b` `[out]`.
pub fn dense_forward(tape: &mut Tape, w: Var, b: Var, x: Var, activation: Activation) -> Result<Var> {
    let z = tape.matmul(x, w)?;
    let z = tape.add(z, b)?;
    Ok(match activation {
        Activation::None => z,
        Activation::Relu => tape.relu(z),
        Activation::Sigmoid => tape.sigmoid(z),
        Activation::Tanh => tape.tanh(z),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl DenseParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(DenseParams {
            w: store.add_glorot(&format!("{prefix}.w"), group, &[fan_in, fan_out], fan_in, fan_out, rng)?,
            b: store.add_filled(&format!("{prefix}.b"), group, &[fan_out], 0.0)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, activation: Activation) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        dense_forward(tape, w, b, x, activation)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dParams {
    /// `[out x in x k]`.
    pub kernels: ParamId,
    /// `[out]`.
    pub bias: ParamId,
    pub kernel_size: usize,
}

impl Conv1dParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        in_ch: usize,
        out_ch: usize,
        kernel_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!("conv kernel size {kernel_size} must be odd")));
        }
        let shape = [out_ch, in_ch, kernel_size];
        Ok(Conv1dParams {
            kernels: store.add_glorot(
                &format!("{prefix}.kernels"),
                group,
                &shape,
                in_ch * kernel_size,
                out_ch * kernel_size,
                rng,
            )?,
            bias: store.add_filled(&format!("{prefix}.bias"), group, &[out_ch], 0.0)?,
            kernel_size,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.kernels);
        let b = tape.param(store, self.bias);
        conv1d_forward(tape, w, b, x)
    }
}

/// Same-padded cross-correlation; `x` is `[len x in]` or `[batch x len x in]`.
pub fn conv1d_forward(tape: &mut Tape, kernels: Var, bias: Var, x: Var) -> Result<Var> {
    if tape.shape(x).len() >= 2 && tape.shape(x)[tape.shape(x).len() - 2] == 0 {
        return Err(Error::contract("conv1d over an empty sequence"));
    }
    tape.conv1d(x, kernels, bias)
}

pub fn maxpool1d_forward(tape: &mut Tape, x: Var, pool: usize) -> Result<Var> {
    tape.maxpool1d(x, pool)
}

/// Inverted dropout. With `training == false` (or `rate == 0`) the input node
/// is returned unchanged.
pub fn dropout_forward<R: Rng>(tape: &mut Tape, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::contract(format!("dropout rate {rate} must lie in [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let mask = (0..tape.value(x).len())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    tape.mask_mul(x, mask)
}

pub fn softmax(tape: &mut Tape, z: Var) -> Result<Var> {
    tape.softmax(z)
}

/// Rows of an embedding table. Row 0 is the padding row by convention.
pub fn embedding_lookup(tape: &mut Tape, store: &ParamStore, table: ParamId, rows: &[usize]) -> Result<Var> {
    tape.gather(store, table, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradient_check, gradient_check_params, Coordinates};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_lstm(store: &mut ParamStore, prefix: &str, bias: f64) -> LstmParams {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = LstmParams::init(store, prefix, ParamGroup::Extractor, 1, 1, &mut rng).unwrap();
        for id in p.ids().collect::<Vec<_>>() {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        for id in p.b {
            store.value_mut(id).data_mut()[0] = bias;
        }
        p
    }

    #[test]
    fn lstm_zero_params_give_zero_state() {
        let mut store = ParamStore::new();
        let p = scalar_lstm(&mut store, "l", 0.0);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, &store);
        let x = tape.constant(Tensor::vector(vec![3.0]));
        let z = tape.constant(Tensor::vector(vec![0.0]));
        let (h, m) = lstm_cell_step(&mut tape, &b, x, z, z).unwrap();
        assert_eq!(tape.value(h).data(), &[0.0]);
        assert_eq!(tape.value(m).data(), &[0.0]);
    }

    #[test]
    fn lstm_saturated_gates() {
        let mut store = ParamStore::new();
        let p = scalar_lstm(&mut store, "l", 50.0);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, &store);
        let x = tape.constant(Tensor::vector(vec![0.0]));
        let z = tape.constant(Tensor::vector(vec![0.0]));
        let (h, m) = lstm_cell_step(&mut tape, &b, x, z, z).unwrap();
        assert!((tape.value(m).data()[0] - 1.0).abs() < 1e-12);
        assert!((tape.value(h).data()[0] - 1f64.tanh()).abs() < 1e-12);
    }

    #[test]
    fn lstm_dimension_mismatch() {
        let mut store = ParamStore::new();
        let p = scalar_lstm(&mut store, "l", 0.0);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, &store);
        let x = tape.constant(Tensor::vector(vec![0.0, 1.0]));
        let z = tape.constant(Tensor::vector(vec![0.0]));
        assert!(lstm_cell_step(&mut tape, &b, x, z, z).is_err());
    }

    #[test]
    fn bilstm_hand_unrolled_two_steps() {
        // u = d = 1 with distinct scalar weights per gate.
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = LstmParams::init(&mut store, "f", ParamGroup::Extractor, 1, 1, &mut rng).unwrap();
        let bw = LstmParams::init(&mut store, "b", ParamGroup::Extractor, 1, 1, &mut rng).unwrap();
        let get = |p: &LstmParams, store: &ParamStore| {
            let v = |id: ParamId| store.value(id).data()[0];
            (p.wx.map(v), p.wh.map(v), p.b.map(v))
        };
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let step = |w: &([f64; 4], [f64; 4], [f64; 4]), x: f64, h: f64, m: f64| {
            let z = |k: usize| w.0[k] * x + w.1[k] * h + w.2[k];
            let m2 = sig(z(1)) * m + sig(z(0)) * z(3).tanh();
            (sig(z(2)) * m2.tanh(), m2)
        };
        let xs = [0.7, -1.3];
        let wf = get(&f, &store);
        let wb = get(&bw, &store);
        let (h1, m1) = step(&wf, xs[0], 0.0, 0.0);
        let (hf, _) = step(&wf, xs[1], h1, m1);
        let (g1, n1) = step(&wb, xs[1], 0.0, 0.0);
        let (hb, _) = step(&wb, xs[0], g1, n1);

        let mut tape = Tape::new();
        let bf = f.bind(&mut tape, &store);
        let bb = bw.bind(&mut tape, &store);
        let seq = tape.constant(Tensor::new(vec![2, 1], xs.to_vec()).unwrap());
        let out = bilstm_forward(&mut tape, &bf, &bb, seq).unwrap();
        let got = tape.value(out).data();
        assert!((got[0] - hf).abs() < 1e-12 && (got[1] - hb).abs() < 1e-12);
    }

    #[test]
    fn bilstm_palindrome_with_shared_params() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = LstmParams::init(&mut store, "p", ParamGroup::Extractor, 3, 4, &mut rng).unwrap();
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, &store);
        let rows = [[0.1, 0.2, 0.3], [-0.5, 0.4, 0.0], [0.1, 0.2, 0.3]].concat();
        let seq = tape.constant(Tensor::new(vec![3, 3], rows).unwrap());
        let out = bilstm_forward(&mut tape, &b, &b, seq).unwrap();
        let d = tape.value(out).data();
        assert_eq!(d.len(), 8);
        assert_eq!(&d[..4], &d[4..]);
    }

    #[test]
    fn bilstm_rejects_empty_sequence() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = LstmParams::init(&mut store, "p", ParamGroup::Extractor, 3, 4, &mut rng).unwrap();
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, &store);
        let seq = tape.constant(Tensor::zeros(&[0, 3]));
        assert!(bilstm_forward(&mut tape, &b, &b, seq).is_err());
    }

    #[test]
    fn dense_examples() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::vector(vec![-2.0]));
        let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let y = dense_forward(&mut tape, w, b, x, Activation::Relu).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0]);

        let eye = tape.constant(Tensor::identity(2));
        let zb = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let x = tape.constant(Tensor::new(vec![1, 2], vec![0.3, -4.0]).unwrap());
        let y = dense_forward(&mut tape, eye, zb, x, Activation::None).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv_examples() {
        let mut tape = Tape::new();
        let id = tape.constant(Tensor::new(vec![1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap());
        let ones = tape.constant(Tensor::new(vec![1, 1, 3], vec![1.0; 3]).unwrap());
        let b = tape.constant(Tensor::vector(vec![0.0]));
        let x = tape.constant(Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let y = conv1d_forward(&mut tape, id, b, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let y = conv1d_forward(&mut tape, ones, b, x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 6.0, 5.0]);

        let even = tape.constant(Tensor::zeros(&[1, 1, 2]));
        assert!(conv1d_forward(&mut tape, even, b, x).is_err());
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Conv1dParams::init(&mut store, "c", ParamGroup::Classifier, 1, 1, 4, &mut rng).is_err());
    }

    #[test]
    fn maxpool_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![4, 1], vec![1.0, 3.0, 2.0, 5.0]).unwrap());
        let y = maxpool1d_forward(&mut tape, x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 5.0]);
        let x = tape.constant(Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let y = maxpool1d_forward(&mut tape, x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 3.0]);
        assert!(maxpool1d_forward(&mut tape, x, 0).is_err());
    }

    #[test]
    fn dropout_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[100_000], 1.0));
        let same = dropout_forward(&mut tape, x, 0.5, false, &mut rng).unwrap();
        assert_eq!(tape.value(same), tape.value(x));
        let same = dropout_forward(&mut tape, x, 0.0, true, &mut rng).unwrap();
        assert_eq!(tape.value(same), tape.value(x));
        let y = dropout_forward(&mut tape, x, 0.5, true, &mut rng).unwrap();
        let mean = tape.value(y).data().iter().sum::<f64>() / 100_000.0;
        assert!((0.98..=1.02).contains(&mean), "{mean}");
        assert!(dropout_forward(&mut tape, x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::vector(vec![0.0; 4]));
        let p = softmax(&mut tape, z).unwrap();
        assert_eq!(tape.value(p).data(), &[0.25; 4]);
        let z = tape.constant(Tensor::vector(vec![0.0, 2f64.ln()]));
        let p = softmax(&mut tape, z).unwrap();
        let d = tape.value(p).data();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-15 && (d[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn lstm_cell_gradient_check_64_units() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = LstmParams::init(&mut store, "l", ParamGroup::Extractor, 8, 64, &mut rng).unwrap();
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let h: Vec<f64> = (0..64).map(|i| (i as f64 * 0.3).cos() * 0.5).collect();
        let m: Vec<f64> = (0..64).map(|i| (i as f64 * 0.11).sin()).collect();
        let err = gradient_check_params(
            &mut store,
            |tape, store| {
                let b = p.bind(tape, store);
                let xv = tape.constant(Tensor::vector(x.clone()));
                let hv = tape.constant(Tensor::vector(h.clone()));
                let mv = tape.constant(Tensor::vector(m.clone()));
                let (ht, _) = lstm_cell_step(tape, &b, xv, hv, mv)?;
                Ok(tape.sum(ht))
            },
            Coordinates::All,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn conv_and_pool_gradient_check() {
        let x = Tensor::new(vec![2, 5, 2], (0..20).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.1).collect()).unwrap();
        let w = Tensor::new(vec![3, 2, 3], (0..18).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let err = gradient_check(
            |tape, xv| {
                let wv = tape.constant(w.clone());
                let b = tape.constant(Tensor::vector(vec![0.1, -0.2, 0.3]));
                let y = conv1d_forward(tape, wv, b, xv)?;
                let y = tape.tanh(y);
                let p = maxpool1d_forward(tape, y, 2)?;
                Ok(tape.sum(p))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
