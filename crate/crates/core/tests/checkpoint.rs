use std::path::PathBuf;

use q2a::data::{generate_dataset, EncodedSample};
use q2a::model::{AnswerSelection, FusionKind, HeadKind, ModelConfig, Q2ATransformer};
use q2a::nn::Module;
use q2a::train::{
    decode_checkpoint, encode_checkpoint, evaluate, load_checkpoint, save_checkpoint, train,
    Checkpoint, TrainConfig, TrainState,
};
use q2a::Error;
use sha2::{Digest, Sha256};

fn small(fusion: FusionKind, head: HeadKind) -> ModelConfig {
    ModelConfig {
        feature_dim: 8,
        answer_embed_dim: 8,
        fusion_layers: 1,
        question_layers: 1,
        decoder_layers: 1,
        num_heads: 2,
        ffn_mult: 2,
        fusion_kind: fusion,
        head_kind: head,
        seed: 3,
        ..ModelConfig::default()
    }
}

fn checkpoint_for(cfg: ModelConfig) -> Checkpoint {
    let data = generate_dataset(1, 2, 0).unwrap();
    let mut cfg = cfg;
    cfg.fit_to_data(&data);
    let model = Q2ATransformer::new(cfg).unwrap();
    let state = TrainState::new(model.parameters(), 1e-3, 5);
    Checkpoint {
        model,
        state,
        answers: data.answers.answers().to_vec(),
        tokens: data.tokens.tokens().to_vec(),
    }
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/checkpoint_v1.bin")
}

#[test]
fn encoding_matches_frozen_golden_file() {
    let bytes =
        encode_checkpoint(&checkpoint_for(small(FusionKind::Cman, HeadKind::Decoder))).unwrap();
    if std::env::var_os("Q2A_BLESS").is_some() {
        std::fs::write(golden_path(), &bytes).unwrap();
    }
    let golden = std::fs::read(golden_path()).unwrap();
    assert_eq!(&golden[..4], b"Q2AC");
    assert_eq!(u32::from_le_bytes(golden[4..8].try_into().unwrap()), 1);
    assert!(
        bytes == golden,
        "checkpoint layout changed ({} vs {} bytes)",
        bytes.len(),
        golden.len()
    );

    let decoded = decode_checkpoint(&golden).unwrap();
    assert_eq!(encode_checkpoint(&decoded).unwrap(), golden);
}

/// Swaps the JSON header for one describing `cfg` and re-seals the file.
fn with_header_config(bytes: &[u8], cfg: &ModelConfig) -> Vec<u8> {
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut header: serde_json::Value =
        serde_json::from_slice(&bytes[12..12 + header_len]).unwrap();
    header["model"] = serde_json::to_value(cfg).unwrap();
    let new_header = serde_json::to_vec(&header).unwrap();
    let body_end = bytes.len() - 32;
    let mut out = bytes[..8].to_vec();
    out.extend_from_slice(&(new_header.len() as u32).to_le_bytes());
    out.extend_from_slice(&new_header);
    out.extend_from_slice(&bytes[12 + header_len..body_end]);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

#[test]
fn parameter_table_must_match_the_config() {
    let linear = checkpoint_for(small(FusionKind::Cman, HeadKind::Linear));
    let bytes = encode_checkpoint(&linear).unwrap();
    let mut decoder_cfg = linear.model.config().clone();
    decoder_cfg.head_kind = HeadKind::Decoder;
    match decode_checkpoint(&with_header_config(&bytes, &decoder_cfg)) {
        Err(Error::MissingParameters(names)) => {
            assert!(names.iter().any(|n| n == "decoder.answers"))
        }
        other => panic!("expected missing parameters, got {other:?}"),
    }

    let decoder = checkpoint_for(small(FusionKind::Cman, HeadKind::Decoder));
    let bytes = encode_checkpoint(&decoder).unwrap();
    let mut wider = decoder.model.config().clone();
    wider.ffn_mult = 3;
    assert!(matches!(
        decode_checkpoint(&with_header_config(&bytes, &wider)),
        Err(Error::MalformedCheckpoint(_))
    ));
}

#[test]
fn corruption_and_foreign_files_are_rejected() {
    let bytes =
        encode_checkpoint(&checkpoint_for(small(FusionKind::Sum, HeadKind::Decoder))).unwrap();
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 0x10;
    assert!(matches!(decode_checkpoint(&flipped), Err(Error::Checksum)));
    assert!(matches!(
        decode_checkpoint(&bytes[..bytes.len() - 1]),
        Err(Error::Checksum)
    ));
    assert!(decode_checkpoint(b"definitely not a checkpoint file, just text").is_err());
}

fn encoded(n: usize, seed: u64, cfg: &mut ModelConfig) -> Vec<EncodedSample> {
    let data = generate_dataset(n, 4, seed).unwrap();
    cfg.fit_to_data(&data);
    data.encode(cfg).unwrap()
}

#[test]
fn reloaded_model_evaluates_bit_identically() {
    let mut cfg = small(FusionKind::Cman, HeadKind::Decoder);
    let train_set = encoded(64, 1, &mut cfg);
    let eval_set = encoded(500, 2, &mut cfg);
    let mut model = Q2ATransformer::new(cfg).unwrap();
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(model.parameters(), tc.lr, tc.shuffle_seed);
    train(
        &mut model,
        &train_set,
        &eval_set[..50],
        &tc,
        &mut state,
        |_| {},
    )
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.q2a");
    let ckpt = Checkpoint {
        model,
        state,
        answers: Vec::new(),
        tokens: Vec::new(),
    };
    save_checkpoint(&path, &ckpt).unwrap();
    let loaded = load_checkpoint(&path).unwrap();

    for (a, b) in ckpt
        .model
        .parameters()
        .iter()
        .zip(loaded.model.parameters())
    {
        assert_eq!(a.name(), b.name());
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(ckpt.state, loaded.state);
    let before = evaluate(&ckpt.model, &eval_set, AnswerSelection::default()).unwrap();
    let after = evaluate(&loaded.model, &eval_set, AnswerSelection::default()).unwrap();
    assert_eq!(before, after);
    for s in &eval_set[..20] {
        let (x, y) = (
            ckpt.model.predict(s).unwrap(),
            loaded.model.predict(s).unwrap(),
        );
        assert!(x
            .logits
            .iter()
            .zip(&y.logits)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
