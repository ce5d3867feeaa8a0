use crate::error::{Error, Result};
use crate::tensor::{Op, Tensor};

/// Probabilities are clamped to `[LOG_CLAMP, 1 - LOG_CLAMP]` before logs.
pub const LOG_CLAMP: f64 = 1e-12;

/// Focal-style binary loss with separate exponents for positive and
/// negative classes, averaged over the `C` classes:
///
/// `-(1/C) Σ_c [ y_c (1-p_c)^γ+ ln p_c + (1-y_c) p_c^γ- ln(1-p_c) ]`
///
/// `probs` is a `[C]` vector of per-class probabilities and `targets` a
/// binary vector of the same length. A `[B, C]` batch gives the mean over
/// all `B * C` terms, i.e. the mean of the per-sample losses. Exact 0 and 1 are clamped; anything
/// outside `[0, 1]` (or NaN) is an error. With `γ+ = γ- = 0` this is mean
/// binary cross-entropy.
pub fn asymmetric_loss(
    probs: &Tensor,
    targets: &[f64],
    gamma_pos: f64,
    gamma_neg: f64,
) -> Result<Tensor> {
    const OP: &str = "asymmetric_loss";
    if !matches!(probs.shape().len(), 1 | 2) || probs.numel() != targets.len() || targets.is_empty()
    {
        return Err(Error::shape(OP, probs.shape(), &[targets.len()]));
    }
    if let Some(index) = targets.iter().position(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Config(format!("{OP}: target {index} is not 0 or 1")));
    }
    if let Some((index, &value)) = probs
        .data()
        .iter()
        .enumerate()
        .find(|(_, p)| !(0.0..=1.0).contains(*p))
    {
        return Err(Error::ProbabilityOutOfRange {
            op: OP,
            index,
            value,
        });
    }
    let total: f64 = probs
        .data()
        .iter()
        .zip(targets)
        .map(|(&p, &y)| class_term(p, y, gamma_pos, gamma_neg))
        .sum();
    let value = -total / targets.len() as f64;
    Ok(Tensor::from_op(
        vec![value],
        vec![],
        Op::AsymmetricLoss {
            targets: targets.to_vec(),
            gamma_pos,
            gamma_neg,
            clamp: LOG_CLAMP,
        },
        vec![probs.clone()],
    ))
}

/// Un-negated contribution of one class (≤ 0).
fn class_term(p: f64, y: f64, gamma_pos: f64, gamma_neg: f64) -> f64 {
    let p = p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
    if y > 0.5 {
        (1.0 - p).powf(gamma_pos) * p.ln()
    } else {
        p.powf(gamma_neg) * (1.0 - p).ln()
    }
}

pub fn one_hot(class: usize, classes: usize) -> Vec<f64> {
    let mut y = vec![0.0; classes];
    if class < classes {
        y[class] = 1.0;
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{grad_check, DEFAULT_STEP, DEFAULT_TOLERANCE};

    fn loss(p: &[f64], y: &[f64], gp: f64, gn: f64) -> f64 {
        let t = Tensor::new(p.to_vec(), &[p.len()]).unwrap();
        asymmetric_loss(&t, y, gp, gn).unwrap().item().unwrap()
    }

    #[test]
    fn positive_term_value() {
        assert!((loss(&[0.8], &[1.0], 1.0, 4.0) - 0.0446287).abs() < 1e-6);
    }

    #[test]
    fn negative_term_value() {
        assert!((loss(&[0.2], &[0.0], 1.0, 4.0) - 0.000357).abs() < 1e-6);
    }

    #[test]
    fn zero_gammas_give_binary_cross_entropy() {
        let p = [0.3, 0.9, 0.05, 0.6];
        let y = [0.0, 1.0, 0.0, 0.0];
        let bce: f64 = p
            .iter()
            .zip(&y)
            .map(|(&p, &y): (&f64, &f64)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
            .sum::<f64>()
            / 4.0;
        assert!((loss(&p, &y, 0.0, 0.0) - bce).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let l = loss(&[1.0 - 1e-9, 1e-9, 1e-9], &[1.0, 0.0, 0.0], 1.0, 4.0);
        assert!(l >= 0.0 && l < 1e-9);
    }

    #[test]
    fn invalid_probabilities_rejected() {
        let t = Tensor::new(vec![0.5, 1.2], &[2]).unwrap();
        assert!(matches!(
            asymmetric_loss(&t, &[1.0, 0.0], 1.0, 4.0),
            Err(Error::ProbabilityOutOfRange { index: 1, .. })
        ));
        let t = Tensor::new(vec![f64::NAN], &[1]).unwrap();
        assert!(asymmetric_loss(&t, &[1.0], 1.0, 4.0).is_err());
        let t = Tensor::new(vec![0.5], &[1]).unwrap();
        assert!(asymmetric_loss(&t, &[0.5], 1.0, 4.0).is_err());
    }

    #[test]
    fn lowering_negative_probability_never_raises_loss() {
        let y = [1.0, 0.0];
        let mut prev = f64::INFINITY;
        for k in (1..20).rev() {
            let l = loss(&[0.6, k as f64 / 20.0], &y, 1.0, 4.0);
            assert!(l <= prev);
            prev = l;
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = Tensor::new(vec![0.7, 0.2, 0.45, 0.9], &[4]).unwrap();
        let y = [0.0, 1.0, 0.0, 0.0];
        let report = grad_check(
            |p| asymmetric_loss(p, &y, 1.0, 4.0),
            &x,
            DEFAULT_STEP,
            DEFAULT_TOLERANCE,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
