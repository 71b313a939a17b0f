//! Finite-difference verification of analytic gradients.

use super::{Dd, Float, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{contract_err, Result};

/// Relative error with the floor used throughout: `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Largest relative error between the analytic gradient of `f` at `x` and
/// its central finite-difference estimate with the given step.
pub fn finite_difference_check<T, F>(f: F, x: &Tensor<T>, step: f64) -> Result<f64>
where
    T: Float,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let id = store.add("x", x.clone());
    let report = check_params(&store, |g, s| {
        let v = g.param(s, id);
        f(g, v)
    }, step, |_| true)?;
    Ok(report.max_rel_error)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
    /// Coordinates re-checked in double-double precision.
    pub refined: usize,
}

type Coord = (ParamId, usize);

fn eval_scalar<T: Float>(
    f: &impl Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
    store: &ParamStore<T>,
) -> Result<T> {
    let mut g = Graph::new();
    let root = f(&mut g, store)?;
    let v = g.value(root);
    if v.numel() != 1 {
        return Err(contract_err!("checked function must be scalar, got {:?}", v.shape()));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(contract_err!("checked function is not finite"));
    }
    Ok(v)
}

fn coordinates<T: Float>(store: &ParamStore<T>, select: impl Fn(&str) -> bool) -> Vec<Coord> {
    store
        .ids()
        .filter(|&id| select(store.name(id)))
        .flat_map(|id| (0..store.get(id).numel()).map(move |i| (id, i)))
        .collect()
}

fn summarise<T: Float>(store: &ParamStore<T>, coords: &[Coord], errs: &[f64], refined: usize) -> GradCheckReport {
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coordinates: coords.len(), refined };
    for (&(id, i), &err) in coords.iter().zip(errs) {
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((store.name(id).to_string(), i));
        }
    }
    report
}

/// Checks every coordinate of every parameter selected by `select`.
pub fn check_params<T, F>(
    store: &ParamStore<T>,
    f: F,
    step: f64,
    select: impl Fn(&str) -> bool,
) -> Result<GradCheckReport>
where
    T: Float,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    let coords = coordinates(store, select);
    let errs = probe(store, &f, &coords, &[step], 0.0, false)?;
    Ok(summarise(store, &coords, &errs, 0))
}

/// Like [`check_params`], but each coordinate is probed with the steps in
/// order until one agrees within `accept`; the best agreement is kept.
/// Every step yields the central quotient and both one-sided quotients.
///
/// Large steps straddle ReLU kinks while small ones drown tiny gradients in
/// rounding noise, and a kink closer than the smallest step spoils every
/// central quotient while leaving the one-sided quotient on its far side
/// intact. A coordinate counts as verified when some estimate reproduces
/// its analytic value.
pub fn check_params_ladder<T, F>(
    store: &ParamStore<T>,
    f: F,
    steps: &[f64],
    accept: f64,
    select: impl Fn(&str) -> bool,
) -> Result<GradCheckReport>
where
    T: Float,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    let coords = coordinates(store, select);
    let errs = probe(store, &f, &coords, steps, accept, true)?;
    Ok(summarise(store, &coords, &errs, 0))
}

/// [`check_params_ladder`] in f64, after which every coordinate still above
/// `accept` is checked again with `fine`, the same function evaluated in
/// double-double precision, gradient included. The refined error replaces
/// the f64 one.
///
/// A gradient component of 1e-10 on a loss of a few hundred moves the loss
/// by less than its f64 rounding for any step small enough to avoid
/// curvature, so such coordinates cannot be verified in f64 at all.
pub fn check_params_refined<F, G>(
    store: &ParamStore<f64>,
    f: F,
    fine: G,
    steps: &[f64],
    fine_steps: &[f64],
    accept: f64,
    select: impl Fn(&str) -> bool,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
    G: Fn(&mut Graph<Dd>, &ParamStore<Dd>) -> Result<Var>,
{
    let coords = coordinates(store, select);
    let mut errs = probe(store, &f, &coords, steps, accept, true)?;
    let hard: Vec<usize> = (0..coords.len()).filter(|&c| errs[c] > accept).collect();
    if !hard.is_empty() {
        let wide = store.cast::<Dd>();
        let sub: Vec<Coord> = hard.iter().map(|&c| coords[c]).collect();
        let fine_errs = probe(&wide, &fine, &sub, fine_steps, accept, true)?;
        for (&c, e) in hard.iter().zip(fine_errs) {
            errs[c] = e;
        }
    }
    Ok(summarise(store, &coords, &errs, hard.len()))
}

fn probe<T, F>(
    store: &ParamStore<T>,
    f: &F,
    coords: &[Coord],
    steps: &[f64],
    accept: f64,
    one_sided: bool,
) -> Result<Vec<f64>>
where
    T: Float,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    if steps.is_empty() || steps.iter().any(|&s| !(s > 0.0)) {
        return Err(contract_err!("finite-difference steps must be positive"));
    }
    let base = eval_scalar(f, store)?;
    let mut g = Graph::new();
    let root = f(&mut g, store)?;
    let grads = g.backward(root)?;

    let mut probe = store.clone();
    let mut errs = Vec::with_capacity(coords.len());
    for &(id, i) in coords {
        let orig = store.get(id).data()[i];
        let analytic = grads.get(id).map_or(0.0, |t| t.data()[i].as_f64());
        let mut err = f64::INFINITY;
        for &step in steps {
            let h = T::from_f64(step);
            let (hi, lo) = (orig + h, orig - h);
            probe.get_mut(id).data_mut()[i] = hi;
            let up = eval_scalar(f, &probe)?;
            probe.get_mut(id).data_mut()[i] = lo;
            let down = eval_scalar(f, &probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            // Differences stay in T and divide by the step actually
            // represented in T.
            err = err.min(relative_error(analytic, ((up - down) / (hi - lo)).as_f64()));
            if one_sided {
                err = err.min(relative_error(analytic, ((up - base) / (hi - orig)).as_f64()));
                err = err.min(relative_error(analytic, ((base - down) / (orig - lo)).as_f64()));
            }
            if err <= accept {
                break;
            }
        }
        errs.push(err);
    }
    Ok(errs)
}
