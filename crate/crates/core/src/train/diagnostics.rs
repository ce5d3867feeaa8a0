//! Finite-difference gradient checks over every building block at tiny
//! dimensions, plus the full model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{EncodedSample, QuestionType};
use crate::error::{Error, Result};
use crate::model::{
    asymmetric_loss, one_hot, CmanFusion, FusionKind, HeadKind, ModelConfig, Q2ATransformer,
};
use crate::nn::{
    AttentionConfig, BlockConfig, DecoderLayer, EncoderLayer, LayerNorm, Module,
    MultiHeadAttention, ParamInit, SublayerStyle,
};
use crate::tensor::gradcheck::{
    grad_check, grad_check_parameters, GradCheckReport, DEFAULT_STEP, DEFAULT_TOLERANCE,
};
use crate::tensor::{Activation, Tensor};

/// Names of the checks, in the order they run.
pub const GRADCHECK_CASES: [&str; 10] = [
    "matmul",
    "softmax",
    "layer_norm",
    "activation",
    "attention",
    "encoder_layer",
    "decoder_layer",
    "cman_fusion",
    "asymmetric_loss",
    "model",
];

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor::new(data, &[rows, cols]).expect("shape matches data")
}

/// Scalar readout with a non-uniform upstream gradient.
fn readout(t: &Tensor, seed: u64) -> Result<Tensor> {
    let w = random(1, t.numel(), seed).reshape(t.shape())?;
    Ok(t.mul(&w)?.sum())
}

/// Inserts an identity op whose derivative is wrong by half when `fault`
/// is set; the check of that case must then fail.
fn tap(t: Tensor, name: &str, fault: bool) -> Tensor {
    if fault {
        t.map_pointwise(&format!("faulty_{name}"), |x| x, |_| 1.5)
    } else {
        t
    }
}

fn worse(a: GradCheckReport, b: GradCheckReport) -> GradCheckReport {
    let coordinates = a.coordinates + b.coordinates;
    let mut out = if b.max_rel_error > a.max_rel_error {
        b
    } else {
        a
    };
    out.coordinates = coordinates;
    out
}

fn block(dim: usize, heads: usize) -> BlockConfig {
    BlockConfig {
        dim,
        num_heads: heads,
        ffn_mult: 2,
        activation: Activation::Gelu,
        style: SublayerStyle::PreNorm,
        eps: 1e-5,
    }
}

/// Configuration of the full-model check.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 4,
        num_image_tokens: 4,
        cell_channels: 3,
        max_question_tokens: 3,
        question_vocab_size: 5,
        num_answer_classes: 4,
        answer_embed_dim: 6,
        fusion_layers: 1,
        question_layers: 1,
        decoder_layers: 2,
        num_heads: 2,
        ffn_mult: 2,
        fusion_kind: FusionKind::Cman,
        head_kind: HeadKind::Decoder,
        seed: 17,
        ..ModelConfig::default()
    }
}

fn run_case(name: &'static str, fault: bool) -> Result<GradCheckReport> {
    let (h, tol) = (DEFAULT_STEP, DEFAULT_TOLERANCE);
    let mut init = ParamInit::new(31);
    match name {
        "matmul" => {
            let w = random(4, 3, 1);
            let lhs = grad_check(
                |x| readout(&tap(x.matmul(&w)?, name, fault), 2),
                &random(5, 4, 3),
                h,
                tol,
            )?;
            let a = random(5, 4, 4);
            let rhs = grad_check(
                |x| readout(&tap(a.matmul(x)?, name, fault), 5),
                &random(4, 3, 6),
                h,
                tol,
            )?;
            Ok(worse(lhs, rhs))
        }
        "softmax" => grad_check(
            |x| readout(&tap(x.softmax_rows()?, name, fault), 7),
            &random(3, 5, 8),
            h,
            tol,
        ),
        "layer_norm" => {
            let (gamma, beta) = (
                random(1, 5, 9).reshape(&[5])?,
                random(1, 5, 10).reshape(&[5])?,
            );
            let input = grad_check(
                |x| readout(&tap(x.layer_norm(&gamma, &beta, 1e-5)?, name, fault), 11),
                &random(3, 5, 12),
                h,
                tol,
            )?;
            let x = random(3, 5, 13);
            let mut norm = LayerNorm::new("norm", 5, 1e-5);
            let params = grad_check_parameters(
                &mut norm,
                |m| m.parameters_mut(),
                |m| readout(&tap(m.forward(&x)?, name, fault), 14),
                h,
                tol,
            )?;
            Ok(worse(input, params))
        }
        "activation" => {
            // Shifted away from the ReLU kink so differences stay one-sided.
            let away: Vec<f64> = random(4, 4, 15)
                .data()
                .iter()
                .map(|&v| if v.abs() < 0.05 { v + 0.1 } else { v })
                .collect();
            let x = Tensor::new(away, &[4, 4])?;
            let mut report: Option<GradCheckReport> = None;
            for act in [Activation::Gelu, Activation::Relu, Activation::Sigmoid] {
                let r = grad_check(
                    |t| readout(&tap(t.activation(act), name, fault), 16),
                    &x,
                    h,
                    tol,
                )?;
                report = Some(match report {
                    Some(prev) => worse(prev, r),
                    None => r,
                });
            }
            Ok(report.expect("three activations checked"))
        }
        "attention" => {
            let mut mha = MultiHeadAttention::new(&mut init, "attn", AttentionConfig::new(4, 2)?);
            let (q, kv) = (random(3, 4, 17), random(5, 4, 18));
            grad_check_parameters(
                &mut mha,
                |m| m.parameters_mut(),
                |m| readout(&tap(m.forward(&q, &kv, &kv)?, name, fault), 19),
                h,
                tol,
            )
        }
        "encoder_layer" => {
            let mut layer = EncoderLayer::new(&mut init, "enc", &block(4, 2))?;
            let x = random(3, 4, 20);
            grad_check_parameters(
                &mut layer,
                |m| m.parameters_mut(),
                |m| readout(&tap(m.forward(&x)?, name, fault), 21),
                h,
                tol,
            )
        }
        "decoder_layer" => {
            let mut layer = DecoderLayer::new(&mut init, "dec", &block(4, 2))?;
            let (queries, memory) = (random(3, 4, 22), random(5, 4, 23));
            grad_check_parameters(
                &mut layer,
                |m| m.parameters_mut(),
                |m| readout(&tap(m.forward(&queries, &memory)?, name, fault), 24),
                h,
                tol,
            )
        }
        "cman_fusion" => {
            let mut fusion = CmanFusion::new(&mut init, 1, &block(4, 2))?;
            let (image, question) = (random(4, 4, 25), random(3, 4, 26));
            grad_check_parameters(
                &mut fusion,
                |m| m.parameters_mut(),
                |m| readout(&tap(m.forward(&image, &question)?, name, fault), 27),
                h,
                tol,
            )
        }
        "asymmetric_loss" => {
            let y = one_hot(2, 4);
            let probs = random(1, 4, 28).sigmoid().detach().reshape(&[4])?;
            grad_check(
                |p| Ok(tap(asymmetric_loss(p, &y, 1.0, 4.0)?, name, fault)),
                &probs,
                h,
                tol,
            )
        }
        "model" => {
            let cfg = tiny_config();
            let sample = EncodedSample {
                image: random(cfg.num_image_tokens, cfg.cell_channels, 29),
                tokens: (0..cfg.max_question_tokens)
                    .map(|i| (i + 1) % cfg.question_vocab_size)
                    .collect(),
                answer: 2,
                qtype: QuestionType::Open,
                truncated: false,
            };
            let mut model = Q2ATransformer::new(cfg)?;
            grad_check_parameters(
                &mut model,
                |m| m.parameters_mut(),
                |m| Ok(tap(m.loss(&sample)?.0, name, fault)),
                h,
                tol,
            )
        }
        other => Err(Error::Config(format!("unknown gradient check {other:?}"))),
    }
}

/// Runs every check in [`GRADCHECK_CASES`]. `fault` names a case whose
/// backward pass is deliberately corrupted (for exercising the reporting).
pub fn gradcheck_suite(
    fault: Option<&str>,
    mut on_case: impl FnMut(&GradCheckCase),
) -> Result<Vec<GradCheckCase>> {
    if let Some(f) = fault {
        if !GRADCHECK_CASES.contains(&f) {
            return Err(Error::Config(format!("unknown gradient check {f:?}")));
        }
    }
    GRADCHECK_CASES
        .iter()
        .map(|&name| {
            let case = GradCheckCase {
                name,
                report: run_case(name, fault == Some(name))?,
            };
            on_case(&case);
            Ok(case)
        })
        .collect()
}
