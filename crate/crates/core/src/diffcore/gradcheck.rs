//! Central-difference gradient oracle.

use super::{Array, Graph, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Components smaller than this fraction of the largest checked component
/// are compared against it instead of against themselves.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// Largest elementwise relative error `|a - n| / max(|a|, |n|, floor)`.
fn worst_rel_err(pairs: &[(f64, f64)]) -> f64 {
    let scale = pairs.iter().fold(0.0f64, |m, &(a, n)| m.max(a.abs()).max(n.abs()));
    let floor = (RELATIVE_FLOOR * scale).max(1e-8);
    pairs
        .iter()
        .map(|&(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of `f` at `x` with central differences and
/// returns the largest relative error over the elements of `x`.
pub fn finite_diff_check<F>(f: F, x: &Array<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Invalid("finite difference step must be positive".into()));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = f(&mut tape, xv)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Array::zeros(x.shape()));

    let eval = |p: Array<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(p, false);
        let y = f(&mut t, v)?;
        Ok(t.value(y).item())
    };
    let mut pairs = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        pairs.push((analytic.data()[i], numeric));
    }
    Ok(worst_rel_err(&pairs))
}

/// Finite-difference check of a parameter-store objective at selected
/// `(parameter, flat index)` coordinates.
pub fn param_finite_diff_check<F>(
    store: &ParamStore<f64>,
    f: F,
    coords: &[(String, usize)],
    eps: f64,
) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let y = f(&mut g)?;
        g.param_grads(y, 1.0)?
    };
    let mut probe = store.clone();
    let mut eval = |name: &str, i: usize, delta: f64| -> Result<f64> {
        let orig = probe.value(name)?.data()[i];
        probe.get_mut(name)?.value.data_mut()[i] = orig + delta;
        let out = {
            let mut g = Graph::new(&probe);
            let y = f(&mut g)?;
            g.value(y).item()
        };
        probe.get_mut(name)?.value.data_mut()[i] = orig;
        Ok(out)
    };
    let mut pairs = Vec::with_capacity(coords.len());
    for (name, i) in coords {
        let a = analytic
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("`{name}` is not trainable")))?
            .data()[*i];
        let numeric = (eval(name, *i, eps)? - eval(name, *i, -eps)?) / (2.0 * eps);
        pairs.push((a, numeric));
    }
    Ok(worst_rel_err(&pairs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Array::vector(vec![0.3, -1.2, 2.5]);
        let err = finite_diff_check(
            |t, x| {
                let y = t.scale(x, 3.0);
                Ok(t.sum(y))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn quadratic_gradient_is_two_x() {
        let mut t = Tape::new();
        let x = t.leaf(Array::vector(vec![1.0, -2.0, 0.5]), true);
        let sq = t.mul(x, x).unwrap();
        let l = t.sum(sq);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn tiny_components_are_judged_against_the_scale() {
        assert_eq!(worst_rel_err(&[(1.0, 1.0), (1e-9, 0.0)]), 1e-9 / 1e-3);
        assert_eq!(worst_rel_err(&[(2.0, 1.0)]), 0.5);
        assert_eq!(worst_rel_err(&[(0.0, 0.0)]), 0.0);
    }
}
