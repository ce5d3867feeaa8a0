use crate::error::{Error, Result};
use crate::tensor::Parameter;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer and bookkeeping state carried across epochs and checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    /// Learning rate used by the most recent step.
    pub lr: f64,
    /// Seed of the minibatch shuffling generator.
    pub seed: u64,
    pub best_val_acc: Option<f64>,
    /// First and second moments, one pair per parameter in model order.
    pub first_moments: Vec<Vec<f64>>,
    pub second_moments: Vec<Vec<f64>>,
}

impl TrainState {
    /// Fresh state with zero moments for `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Parameter>, lr: f64, seed: u64) -> Self {
        let first_moments: Vec<Vec<f64>> =
            params.into_iter().map(|p| vec![0.0; p.numel()]).collect();
        TrainState {
            step: 0,
            lr,
            seed,
            best_val_acc: None,
            second_moments: first_moments.clone(),
            first_moments,
        }
    }
}

/// One bias-corrected Adam update using each parameter's accumulated
/// gradient (absent gradients count as zero). Increments `state.step`.
pub fn adam_step(
    params: &mut [&mut Parameter],
    state: &mut TrainState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != state.first_moments.len() || params.len() != state.second_moments.len() {
        return Err(Error::shape(
            "adam_step",
            &[params.len()],
            &[state.first_moments.len(), state.second_moments.len()],
        ));
    }
    for ((p, m), v) in params
        .iter()
        .zip(&state.first_moments)
        .zip(&state.second_moments)
    {
        if m.len() != p.numel() || v.len() != p.numel() {
            return Err(Error::shape("adam_step", p.shape(), &[m.len(), v.len()]));
        }
    }
    state.step += 1;
    state.lr = cfg.lr;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, m), v) in params
        .iter_mut()
        .zip(&mut state.first_moments)
        .zip(&mut state.second_moments)
    {
        p.update(|theta, grad| {
            let step = |theta: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *theta -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
            };
            match grad {
                Some(grad) => {
                    for (((t, m), v), &g) in theta
                        .iter_mut()
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                        .zip(grad)
                    {
                        step(t, m, v, g);
                    }
                }
                None => {
                    for ((t, m), v) in theta.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                        step(t, m, v, 0.0);
                    }
                }
            }
        });
    }
    Ok(())
}
