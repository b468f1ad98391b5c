//! Finite-difference verification of analytic gradients.

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::Result;

/// Central-difference step at f64.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Check the gradient of a scalar function with respect to its input point.
///
/// `f` builds the scalar output on the given tape from the leaf it is handed;
/// it must be deterministic across calls. Returns the maximum over
/// coordinates of |analytic - central difference| / max(|a|, |n|, 1e-8); the
/// caller compares against its tolerance.
pub fn grad_check<F>(mut f: F, point: &Tensor) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    // analytic pass: the point enters as a trainable parameter
    let mut store = ParamStore::new();
    let id = store.add("gradcheck.point", point.clone());
    let mut tape = Tape::new();
    let leaf = tape.param(&store, id);
    let out = f(&mut tape, leaf)?;
    tape.backward(out, &mut store)?;
    let analytic = store
        .get(id)
        .grad
        .clone()
        .unwrap_or_else(|| vec![0.0; point.len()]);

    // numeric pass, coordinate by coordinate
    let mut max_err = 0.0f64;
    for i in 0..point.len() {
        let numeric = central_difference(&mut f, point, i)?;
        max_err = max_err.max(relative_error(analytic[i], numeric));
    }
    Ok(max_err)
}

fn central_difference<F>(f: &mut F, point: &Tensor, coord: usize) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut eval = |delta: f64| -> Result<f64> {
        let mut shifted = point.clone();
        shifted.data_mut()[coord] += delta;
        let mut tape = Tape::new();
        let leaf = tape.constant(&shifted);
        let out = f(&mut tape, leaf)?;
        tape.extract(out).item()
    };
    let plus = eval(GRAD_CHECK_STEP)?;
    let minus = eval(-GRAD_CHECK_STEP)?;
    Ok((plus - minus) / (2.0 * GRAD_CHECK_STEP))
}

/// Check gradients of a scalar function with respect to store parameters.
///
/// `f` computes the scalar loss from the store (registering whatever leaves
/// it needs). Every coordinate of every listed parameter is perturbed in
/// turn. Returns the maximum relative error over all coordinates.
pub fn grad_check_params<F>(store: &ParamStore, ids: &[ParamId], mut f: F) -> Result<f64>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    // analytic gradients
    let mut work = store.clone();
    work.zero_grads(ids);
    let mut tape = Tape::new();
    let out = f(&work, &mut tape)?;
    tape.backward(out, &mut work)?;

    let mut max_err = 0.0f64;
    for &id in ids {
        let n = work.get(id).len();
        let analytic = work
            .get(id)
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; n]);
        for coord in 0..n {
            let mut eval = |delta: f64| -> Result<f64> {
                let mut shifted = store.clone();
                shifted.get_mut(id).data_mut()[coord] += delta;
                let mut tape = Tape::new();
                let out = f(&shifted, &mut tape)?;
                tape.extract(out).item()
            };
            let plus = eval(GRAD_CHECK_STEP)?;
            let minus = eval(-GRAD_CHECK_STEP)?;
            let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
            max_err = max_err.max(relative_error(analytic[coord], numeric));
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_at_three() {
        // d/dx x^2 at 3: analytic 6, central difference exact to O(h^2)
        let point = Tensor::from_vec(vec![3.0]);
        let err = grad_check(|tape, x| {
            let sq = tape.square(x)?;
            tape.sum(sq)
        }, &point)
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn linear_is_exact() {
        let point = Tensor::from_vec(vec![1.0, -2.0, 0.5]);
        let err = grad_check(|tape, x| {
            let w = tape.constant_values(vec![3], vec![2.0, -1.0, 4.0])?;
            let prod = tape.mul(x, w)?;
            tape.sum(prod)
        }, &point)
        .unwrap();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn composite_function_matches_finite_differences() {
        // f(x) = mean(sigmoid(x)^2 + exp(-|x|))
        let mut rng = crate::rng::SeededRng::new(21);
        let point = Tensor::from_vec((0..8).map(|_| rng.uniform_range(-2.0, 2.0)).collect());
        let err = grad_check(|tape, x| {
            let s = tape.sigmoid(x)?;
            let s2 = tape.square(s)?;
            let a = tape.abs(x)?;
            let na = tape.neg(a)?;
            let e = tape.exp(na)?;
            let total = tape.add(s2, e)?;
            tape.mean(total)
        }, &point)
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn param_variant_checks_matmul_weights() {
        let mut rng = crate::rng::SeededRng::new(33);
        let mut store = ParamStore::new();
        let (w, b) = store.add_linear("lin", 4, 3, &mut rng);
        let x = Tensor::new(vec![2, 4], (0..8).map(|_| rng.uniform_range(-2.0, 2.0)).collect()).unwrap();
        let err = grad_check_params(&store, &[w, b], |store, tape| {
            let xv = tape.constant(&x);
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            let lin = tape.matmul(xv, wv)?;
            let out = tape.add(lin, bv)?;
            let act = tape.relu(out)?;
            let sq = tape.square(act)?;
            tape.mean(sq)
        })
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }
}
