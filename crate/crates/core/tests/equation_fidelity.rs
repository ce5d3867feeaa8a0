#[path = "support/oracle.rs"]
mod oracle;

use q2a::model::{FusionKind, HeadKind, ModelConfig, Q2ATransformer};
use q2a::tensor::{Activation, Tensor};
use q2a::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_plain(answer_dim: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        feature_dim: 4,
        num_image_tokens: 4,
        cell_channels: 7,
        max_question_tokens: 3,
        question_vocab_size: 6,
        num_answer_classes: 5,
        answer_embed_dim: answer_dim,
        fusion_layers: 2,
        question_layers: 1,
        decoder_layers: 2,
        num_heads: 2,
        ffn_mult: 2,
        activation: Activation::Gelu,
        fusion_kind: FusionKind::Cman,
        head_kind: HeadKind::Decoder,
        per_class_head: false,
        plain_eq2: true,
        seed,
        ..ModelConfig::default()
    }
}

fn max_abs_diff(cfg: ModelConfig, input_seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(input_seed);
    let cells: Vec<Vec<f64>> = (0..cfg.num_image_tokens)
        .map(|_| {
            (0..cfg.cell_channels)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect();
    let tokens: Vec<usize> = (0..cfg.max_question_tokens)
        .map(|_| rng.random_range(0..cfg.question_vocab_size))
        .collect();

    let model = Q2ATransformer::new(cfg.clone())?;
    let flat: Vec<f64> = cells.concat();
    let probs = model
        .forward(
            &Tensor::new(flat, &[cfg.num_image_tokens, cfg.cell_channels])?,
            &tokens,
        )?
        .sigmoid();

    let expected = oracle::plain_probs(&cfg, &oracle::Weights::of(&model), &cells, &tokens);
    assert_eq!(expected.len(), probs.numel());
    Ok(probs
        .data()
        .iter()
        .zip(&expected)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

#[test]
fn plain_forward_matches_explicit_loops() {
    for seed in 0..4 {
        let err = max_abs_diff(tiny_plain(4, seed), 100 + seed).unwrap();
        assert!(err <= 1e-9, "seed {seed}: max abs error {err:e}");
    }
}

#[test]
fn plain_forward_matches_with_projected_memory() {
    // D_a != D_f routes the fused features through the memory projection.
    let err = max_abs_diff(tiny_plain(6, 9), 7).unwrap();
    assert!(err <= 1e-9, "max abs error {err:e}");
}
