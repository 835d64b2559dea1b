//! Central finite-difference gradient checks.
//!
//! The reported error for a tensor is
//! `max_i |analytic_i - numeric_i| / max(max|analytic|, max|numeric|, 1e-6)`,
//! i.e. the worst deviation relative to the tensor's gradient scale.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

use super::{Graph, ParamStore, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
const SCALE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub max_abs_err: f64,
    pub rel_err: f64,
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, f64) {
    let max_abs = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(SCALE_FLOOR, f64::max);
    (max_abs, max_abs / scale)
}

/// Finite-difference formula used for the numeric side of a check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, error O(h^2).
    Central(f64),
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, error O(h^4).
    /// Tolerates a larger step, so roundoff in deep composites stays small.
    FivePoint(f64),
}

impl Default for Stencil {
    fn default() -> Self {
        Stencil::Central(DEFAULT_STEP)
    }
}

/// Central differences of `eval` at `coords` of `point`.
pub fn numeric_gradient(
    point: &mut [f64],
    coords: &[usize],
    h: f64,
    eval: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    numeric_gradient_with(point, coords, Stencil::Central(h), eval)
}

pub fn numeric_gradient_with(
    point: &mut [f64],
    coords: &[usize],
    stencil: Stencil,
    mut eval: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let (offsets, weights, h): (&[f64], &[f64], f64) = match stencil {
        Stencil::Central(h) => (&[1.0, -1.0], &[0.5, -0.5], h),
        Stencil::FivePoint(h) => (&[2.0, 1.0, -1.0, -2.0], &[-1.0 / 12.0, 8.0 / 12.0, -8.0 / 12.0, 1.0 / 12.0], h),
    };
    coords
        .iter()
        .map(|&i| {
            let orig = point[i];
            let mut acc = 0.0;
            for (o, w) in offsets.iter().zip(weights) {
                point[i] = orig + o * h;
                acc += w * eval(point)?;
            }
            point[i] = orig;
            Ok(acc / h)
        })
        .collect()
}

fn pick_coords(n: usize, limit: usize, rng: &mut impl Rng) -> Vec<usize> {
    if limit == 0 || limit >= n {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, limit).into_vec();
        v.sort_unstable();
        v
    }
}

/// Checks parameter gradients of the scalar produced by `build`.
///
/// `build` must be a deterministic function of the store (no dropout).
/// At most `per_param` coordinates of each parameter are probed (0 = all).
pub fn check_params(
    store: &ParamStore<f64>,
    names: &[String],
    per_param: usize,
    h: f64,
    rng: &mut impl Rng,
    build: impl Fn(&ParamStore<f64>) -> Result<(Graph<f64>, Var)>,
) -> Result<Vec<GradCheck>> {
    check_params_with(store, names, per_param, Stencil::Central(h), rng, build)
}

pub fn check_params_with(
    store: &ParamStore<f64>,
    names: &[String],
    per_param: usize,
    stencil: Stencil,
    rng: &mut impl Rng,
    build: impl Fn(&ParamStore<f64>) -> Result<(Graph<f64>, Var)>,
) -> Result<Vec<GradCheck>> {
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    let (graph, loss) = build(&analytic_store)?;
    graph.backward_into(loss, &mut analytic_store)?;
    drop(graph);

    let mut work = store.clone();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let grad = analytic_store
            .grad(name)
            .ok_or_else(|| Error::Contract(format!("no gradient for `{name}`")))?
            .to_f64_vec();
        let base = work.value(name)?.clone();
        let coords = pick_coords(base.numel(), per_param, rng);
        let mut point = base.to_f64_vec();
        let shape = base.shape().to_vec();
        let numeric = numeric_gradient_with(&mut point, &coords, stencil, |p| {
            work.set(name, Tensor::new(shape.clone(), p.to_vec())?)?;
            let (g, l) = build(&work)?;
            g.value(l).item()
        })?;
        work.set(name, base)?;
        let analytic: Vec<f64> = coords.iter().map(|&i| grad[i]).collect();
        let (max_abs_err, rel_err) = relative_error(&analytic, &numeric);
        out.push(GradCheck {
            name: name.clone(),
            checked: coords.len(),
            max_abs_err,
            rel_err,
        });
    }
    Ok(out)
}

/// Checks the gradient with respect to an input tensor fed through `f`.
pub fn check_input(
    name: &str,
    input: &Tensor<f64>,
    h: f64,
    f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>,
) -> Result<GradCheck> {
    let mut g = Graph::new(true, 0);
    let x = g.input(input.clone());
    let loss = f(&mut g, x)?;
    let grads = g.backward(loss)?;
    let analytic = grads
        .get(x)
        .map(Tensor::to_f64_vec)
        .unwrap_or_else(|| vec![0.0; input.numel()]);
    let coords: Vec<usize> = (0..input.numel()).collect();
    let mut point = input.to_f64_vec();
    let numeric = numeric_gradient(&mut point, &coords, h, |p| {
        let mut g = Graph::new(true, 0);
        let x = g.input(Tensor::new(input.shape().to_vec(), p.to_vec())?);
        let l = f(&mut g, x)?;
        g.value(l).item()
    })?;
    let (max_abs_err, rel_err) = relative_error(&analytic, &numeric);
    Ok(GradCheck {
        name: name.to_string(),
        checked: coords.len(),
        max_abs_err,
        rel_err,
    })
}
