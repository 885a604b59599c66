//! Central-difference gradient checking against the tape.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::contract(format!("gradient check eps {eps} must lie in (0, 1e-2]")));
    }
    Ok(())
}

fn scalar(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Largest relative error between the tape gradient of `f` at `x` and a
/// central difference with step `eps`, over every coordinate of `x`.
pub fn gradient_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_eps(eps)?;
    let eval = |input: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(input.clone(), false);
        let out = f(&mut tape, v)?;
        scalar(&tape, out)
    };
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let out = f(&mut tape, v)?;
    scalar(&tape, out)?;
    tape.backward(out)?;
    let analytic = tape.grad(v)?;

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for (i, a) in analytic.iter().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        worst = worst.max(relative_error(*a, (up - down) / (2.0 * eps)));
    }
    Ok(worst)
}

/// Which parameter coordinates a store-level check visits.
#[derive(Clone, Copy, Debug)]
pub enum Coordinates {
    All,
    /// Up to `n` coordinates per parameter, chosen with `seed`.
    Sample { n: usize, seed: u64 },
}

/// Gradient check over the parameters in `store`. `f` builds the loss from
/// the store on a fresh tape; it must be deterministic. Frozen rows are
/// skipped since they receive no gradient by design.
pub fn gradient_check_params<F>(store: &mut ParamStore, f: F, coords: Coordinates, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    check_eps(eps)?;
    store.zero_grad();
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    scalar(&tape, out)?;
    tape.backward(out)?;
    tape.accumulate_param_grads(store)?;

    let ids: Vec<ParamId> = store.ids().collect();
    let mut worst: f64 = 0.0;
    for (pi, id) in ids.into_iter().enumerate() {
        let p = store.get(id);
        let (_, cols) = p.value.rows_cols();
        let candidates: Vec<usize> = (0..p.value.len())
            .filter(|&i| !p.is_row_frozen(i / cols.max(1)))
            .collect();
        let chosen: Vec<usize> = match coords {
            Coordinates::All => candidates,
            Coordinates::Sample { n, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(pi as u64));
                let take = n.min(candidates.len());
                sample(&mut rng, candidates.len(), take)
                    .into_iter()
                    .map(|j| candidates[j])
                    .collect()
            }
        };
        for i in chosen {
            let analytic = store.get(id).grad[i];
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + eps;
            let up = {
                let mut t = Tape::new();
                let o = f(&mut t, store)?;
                scalar(&t, o)?
            };
            store.value_mut(id).data_mut()[i] = orig - eps;
            let down = {
                let mut t = Tape::new();
                let o = f(&mut t, store)?;
                scalar(&t, o)?
            };
            store.value_mut(id).data_mut()[i] = orig;
            worst = worst.max(relative_error(analytic, (up - down) / (2.0 * eps)));
        }
    }
    store.zero_grad();
    Ok(worst)
}
