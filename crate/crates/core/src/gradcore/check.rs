//! Central finite-difference gradient checking.

use super::{Binder, Graph, ParamStore, Tensor, Var};
use crate::error::Result;

/// Outcome of a gradient check at one point.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Largest relative error over all coordinates.
    pub max_rel_error: f64,
    /// Coordinate at which `max_rel_error` occurs.
    pub worst_index: usize,
    /// Coordinates where the one-sided differences disagree: the function has
    /// a kink there and any value in between is a valid subgradient.
    pub kinks: Vec<usize>,
    pub passed: bool,
}

/// Relative error with a floor on the denominator, so that both tiny
/// gradients and large ones are judged on a comparable scale.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares the tape gradient of a scalar function to central differences.
///
/// `f` builds the function on a fresh graph from the input variable.
pub fn grad_check<F>(f: F, point: &Tensor, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let y = f(&mut g, x)?;
        Ok(g.value(y).item())
    };
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    let analytic = g
        .backward(y)?
        .get(x)
        .map(Tensor::into_data)
        .unwrap_or_else(|| vec![0.0; point.len()]);
    let f0 = g.value(y).item();

    let mut probe = point.clone();
    let (numeric, kinks) = numeric_gradient(point.len(), f0, |i, delta| {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + delta;
        let v = eval(&probe);
        probe.data_mut()[i] = orig;
        v
    })?;
    Ok(summarize(
        analytic,
        numeric,
        kinks,
        tolerance,
        DEFAULT_FLOOR,
    ))
}

/// Denominator floor used by [`grad_check`].
pub const DEFAULT_FLOOR: f64 = 1e-8;

/// Central differences of a function of `n` coordinates.
///
/// `shifted(i, δ)` evaluates the function with coordinate `i` moved by `δ`;
/// `f0` is the unshifted value. Returns the numeric gradient and the
/// coordinates where the one-sided differences disagree (kinks).
pub fn numeric_gradient<F>(n: usize, f0: f64, mut shifted: F) -> Result<(Vec<f64>, Vec<usize>)>
where
    F: FnMut(usize, f64) -> Result<f64>,
{
    let h = DEFAULT_STEP;
    let mut numeric = Vec::with_capacity(n);
    let mut kinks = Vec::new();
    for i in 0..n {
        let fp = shifted(i, h)?;
        let fm = shifted(i, -h)?;
        let forward = (fp - f0) / h;
        let backward = (f0 - fm) / h;
        if (forward - backward).abs() > 1e-2 * (forward.abs() + backward.abs()).max(1.0) {
            kinks.push(i);
        }
        numeric.push((fp - fm) / (2.0 * h));
    }
    Ok((numeric, kinks))
}

/// Builds a report from paired analytic and numeric gradients.
pub fn summarize(
    analytic: Vec<f64>,
    numeric: Vec<f64>,
    kinks: Vec<usize>,
    tolerance: f64,
    floor: f64,
) -> GradCheckReport {
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        if kinks.contains(&i) {
            continue;
        }
        let e = relative_error(*a, *n, floor);
        if e > max_rel_error {
            max_rel_error = e;
            worst_index = i;
        }
    }
    GradCheckReport {
        passed: max_rel_error <= tolerance,
        analytic,
        numeric,
        max_rel_error,
        worst_index,
        kinks,
    }
}

/// Smallest denominator at which central differences of a function of size
/// `f0` can resolve a relative error of `tolerance`.
///
/// Rounding puts noise of about `ε·|f0|/h` on every numeric derivative;
/// gradients below ten times that divided by the tolerance are judged on
/// absolute error instead. Exact zeros (a bias feeding batch norm) otherwise
/// show a relative error of 1.
pub fn resolution_floor(f0: f64, tolerance: f64) -> f64 {
    10.0 * f64::EPSILON * f0.abs().max(1.0) / (DEFAULT_STEP * tolerance)
}

/// Gradient check over every parameter a function actually reads.
///
/// `f` builds a scalar from parameters bound through the [`Binder`]; each
/// coordinate of every bound parameter is perturbed in a private copy of the
/// store. Parameters the function never binds cannot affect it and are not
/// probed. The denominator floor is at least [`resolution_floor`]. The
/// returned list names `(parameter, offset)` per coordinate.
pub fn store_grad_check<F>(
    store: &ParamStore,
    f: F,
    tolerance: f64,
    floor: f64,
) -> Result<(GradCheckReport, Vec<(String, usize)>)>
where
    F: Fn(&mut Graph, &mut Binder) -> Result<Var>,
{
    let mut g = Graph::new();
    let mut b = Binder::new(store);
    let y = f(&mut g, &mut b)?;
    let f0 = g.value(y).item();
    let grads = b.gradients(&g.backward(y)?);
    let mut analytic = Vec::new();
    let mut coords = Vec::new();
    for name in b.bound().keys() {
        let len = store.get(name)?.len();
        match grads.get(name) {
            Some(t) => analytic.extend_from_slice(t.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, len)),
        }
        coords.extend((0..len).map(|k| (name.clone(), k)));
    }
    let mut probe = store.clone();
    let (numeric, kinks) = numeric_gradient(coords.len(), f0, |i, delta| {
        let (name, k) = &coords[i];
        let data = probe
            .trainable
            .get_mut(name)
            .expect("bound parameter")
            .data_mut();
        let orig = data[*k];
        data[*k] = orig + delta;
        let v = {
            let mut g = Graph::new();
            let mut b = Binder::new(&probe);
            f(&mut g, &mut b).map(|y| g.value(y).item())
        };
        probe
            .trainable
            .get_mut(name)
            .expect("bound parameter")
            .data_mut()[*k] = orig;
        v
    })?;
    let floor = floor.max(resolution_floor(f0, tolerance));
    Ok((
        summarize(analytic, numeric, kinks, tolerance, floor),
        coords,
    ))
}
