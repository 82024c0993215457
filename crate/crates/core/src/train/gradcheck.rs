//! Analytic gradients against central finite differences.

use candle::{DType, Tensor};
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoordCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checks: Vec<CoordCheck>,
    pub max_rel_error: f64,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// `n` coordinates drawn uniformly over every scalar under `prefix`.
pub fn sample_coords<R: Rng + ?Sized>(store: &ParamStore, prefix: &str, n: usize, rng: &mut R) -> Vec<(String, usize)> {
    let sizes: Vec<(String, usize)> = store
        .names()
        .filter(|k| k.starts_with(prefix))
        .map(|k| (k.to_string(), store.get(k).map_or(0, |v| v.elem_count())))
        .collect();
    let total: usize = sizes.iter().map(|s| s.1).sum();
    if total == 0 {
        return Vec::new();
    }
    (0..n)
        .map(|_| {
            let mut k = rng.random_range(0..total);
            for (name, size) in &sizes {
                if k < *size {
                    return (name.clone(), k);
                }
                k -= size;
            }
            unreachable!("index within total")
        })
        .collect()
}

/// Compares `d loss / d theta` from backprop with
/// `(loss(theta + eps) - loss(theta - eps)) / 2 eps` at each coordinate.
/// The store must be double precision; every perturbed value is restored.
pub fn grad_check(
    store: &ParamStore,
    coords: &[(String, usize)],
    eps: f64,
    loss: impl Fn() -> Result<Tensor>,
) -> Result<GradCheckReport> {
    if store.dtype() != DType::F64 {
        return Err(Error::Parameter("gradient checks need an f64 parameter store".into()));
    }
    let l = loss()?;
    let grads = l.backward()?;
    let eval = || -> Result<f64> { Ok(loss()?.to_scalar::<f64>()?) };
    let mut checks = Vec::with_capacity(coords.len());
    for (name, index) in coords {
        let var = store
            .get(name)
            .ok_or_else(|| Error::Parameter(format!("no parameter named {name}")))?;
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.get(*index)?.to_scalar::<f64>()?,
            None => 0.0,
        };
        let original = store.element(name, *index)?;
        store.set_element(name, *index, original + eps)?;
        let up = eval();
        store.set_element(name, *index, original - eps)?;
        let down = eval();
        store.set_element(name, *index, original)?;
        let numeric = (up? - down?) / (2.0 * eps);
        checks.push(CoordCheck {
            name: name.clone(),
            index: *index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { checks, max_rel_error })
}

/// Fixed random projection `sum(output * r)` used as a scalar probe loss.
pub fn random_projection<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Ok(Tensor::from_vec(v, shape, &candle::Device::Cpu)?)
}
