//! Central finite-difference verification of reverse-mode gradients.

use super::{no_grad, Parameter, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Gradients smaller than this are compared in absolute terms; below it,
/// finite differences carry more rounding noise than signal.
pub const SCALE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate (across all checked tensors, in
    /// order), if any coordinate was checked.
    pub worst_index: Option<usize>,
    /// Name of the tensor holding the worst coordinate, when known.
    pub worst_tensor: Option<String>,
    pub coordinates: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }

    fn observe(&mut self, index: usize, tensor: Option<&str>, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.coordinates += 1;
        if err > self.max_rel_error || self.worst_index.is_none() || err.is_nan() {
            self.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            self.worst_index = Some(index);
            self.worst_tensor = tensor.map(str::to_string);
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(SCALE_FLOOR)
}

/// Compares the gradient of scalar `f` at `x` against
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let probe = Tensor::leaf(x.data().to_vec(), x.shape())?;
    let out = f(&probe)?;
    if out.numel() != 1 {
        return Err(Error::NotScalar(out.shape().to_vec()));
    }
    out.backward()?;
    let analytic = probe.grad().unwrap_or_else(|| vec![0.0; probe.numel()]);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        worst_tensor: None,
        coordinates: 0,
        tolerance: tol,
    };
    let mut shifted = x.data().to_vec();
    for i in 0..shifted.len() {
        let orig = shifted[i];
        shifted[i] = orig + h;
        let plus = no_grad(|| f(&Tensor::new(shifted.clone(), x.shape())?))?.item()?;
        shifted[i] = orig - h;
        let minus = no_grad(|| f(&Tensor::new(shifted.clone(), x.shape())?))?.item()?;
        shifted[i] = orig;
        report.observe(i, None, analytic[i], (plus - minus) / (2.0 * h));
    }
    Ok(report)
}

/// Gradient check over every coordinate of a set of parameters. `params`
/// hands out the parameters of `target`; `f` computes the scalar loss.
pub fn grad_check_parameters<M, P, F>(
    target: &mut M,
    params: P,
    f: F,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    P: Fn(&mut M) -> Vec<&mut Parameter>,
    F: Fn(&M) -> Result<Tensor>,
{
    for p in params(target) {
        p.zero_grad();
    }
    let loss = f(target)?;
    if loss.numel() != 1 {
        return Err(Error::NotScalar(loss.shape().to_vec()));
    }
    loss.backward()?;
    drop(loss);
    let analytic: Vec<(String, Vec<f64>)> = params(target)
        .into_iter()
        .map(|p| {
            let g = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
            p.zero_grad();
            (p.name().to_string(), g)
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        worst_tensor: None,
        coordinates: 0,
        tolerance: tol,
    };
    let mut flat = 0;
    for (pi, (name, grad)) in analytic.iter().enumerate() {
        for (i, &g) in grad.iter().enumerate() {
            let orig = params(target)[pi].data()[i];
            let mut eval_at = |value: f64| -> Result<f64> {
                params(target)[pi].update(|d, _| d[i] = value);
                no_grad(|| f(target))?.item()
            };
            let plus = eval_at(orig + h)?;
            let minus = eval_at(orig - h)?;
            params(target)[pi].update(|d, _| d[i] = orig);
            report.observe(flat, Some(name), g, (plus - minus) / (2.0 * h));
            flat += 1;
        }
    }
    Ok(report)
}
