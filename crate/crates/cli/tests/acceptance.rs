//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. `cargo test --release --test acceptance -- 3 7` runs a subset.

#[path = "../../core/tests/support/oracle.rs"]
mod oracle;
#[path = "../../core/tests/support/rules.rs"]
mod rules;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{ensure, Result};
use q2a::data::{generate_dataset, EncodedSample, QuestionType, YES};
use q2a::model::{
    asymmetric_loss, AnswerSelection, FusionKind, HeadKind, ModelConfig, Q2ATransformer,
};
use q2a::nn::Module;
use q2a::tensor::{Activation, Tensor};
use q2a::train::{
    evaluate, gradcheck_suite, load_checkpoint, run_ablation, save_checkpoint, train,
    write_history, Checkpoint, TrainConfig, TrainState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String)>;

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let cases = gradcheck_suite(None, |_| {})?;
    let elapsed = start.elapsed();
    let worst = cases
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .expect("suite is non-empty");
    let failed: Vec<&str> = cases
        .iter()
        .filter(|c| c.report.tolerance > 1e-4 || !c.report.passed())
        .map(|c| c.name)
        .collect();
    let ok = failed.is_empty() && elapsed < Duration::from_secs(60);
    Ok((
        ok,
        format!(
            "{} checks, worst {:.2e} ({}), failed [{}], {:.2}s",
            cases.len(),
            worst.report.max_rel_error,
            worst.name,
            failed.join(", "),
            elapsed.as_secs_f64()
        ),
    ))
}

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
        plain_eq2: true,
        seed,
        ..ModelConfig::default()
    }
}

fn equation_fidelity() -> Outcome {
    let mut worst = 0.0f64;
    for (i, answer_dim) in [4, 4, 4, 6].into_iter().enumerate() {
        let cfg = tiny_plain(answer_dim, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
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
        let image = Tensor::new(cells.concat(), &[cfg.num_image_tokens, cfg.cell_channels])?;
        let probs = model.forward(&image, &tokens)?.sigmoid();
        let expected = oracle::plain_probs(&cfg, &oracle::Weights::of(&model), &cells, &tokens);
        ensure!(
            expected.len() == probs.numel(),
            "oracle produced {} values",
            expected.len()
        );
        for (a, b) in probs.data().iter().zip(&expected) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok((
        worst <= 1e-9,
        format!("max abs deviation {worst:.2e} over 4 models"),
    ))
}

fn loss_of(p: &[f64], y: &[f64], gp: f64, gn: f64) -> Result<f64> {
    Ok(asymmetric_loss(&Tensor::new(p.to_vec(), &[p.len()])?, y, gp, gn)?.item()?)
}

fn loss_unit_values() -> Outcome {
    let pos = loss_of(&[0.8], &[1.0], 1.0, 4.0)?;
    let neg = loss_of(&[0.2], &[0.0], 1.0, 4.0)?;
    let p = [0.3, 0.9, 0.05, 0.6, 0.999];
    let y = [0.0, 1.0, 0.0, 0.0, 1.0];
    let bce = p
        .iter()
        .zip(&y)
        .map(|(&p, &y)| -(y * f64::ln(p) + (1.0 - y) * f64::ln(1.0 - p)))
        .sum::<f64>()
        / p.len() as f64;
    let at_zero = loss_of(&p, &y, 0.0, 0.0)?;
    let ok = (pos - 0.0446287).abs() <= 1e-6
        && (neg - 0.000357).abs() <= 1e-6
        && (at_zero - bce).abs() <= 1e-15;
    Ok((
        ok,
        format!(
            "positive {pos:.7}, negative {neg:.6}, gamma=0 vs bce {:.1e}",
            (at_zero - bce).abs()
        ),
    ))
}

fn learnability() -> Outcome {
    let mut cfg = ModelConfig::reference();
    let data = generate_dataset(6_000, 4, 1)?;
    cfg.fit_to_data(&data);
    let (tr, va) = data.split_tail(1_000);
    let (tr, va) = (tr.encode(&cfg)?, va.encode(&cfg)?);
    let open_classes = cfg.num_answer_classes - 2;
    // Stop as soon as the target is met; the epoch cap is the criterion's.
    let tc = TrainConfig {
        epochs: 30,
        target_accuracy: Some(0.95),
        ..TrainConfig::reference()
    };
    let mut model = Q2ATransformer::new(cfg)?;
    let mut state = TrainState::new(model.parameters(), tc.lr, tc.shuffle_seed);
    let start = Instant::now();
    let outcome = train(&mut model, &tr, &va, &tc, &mut state, |r| {
        eprintln!(
            "  [4] epoch {:>2} loss {:.5} overall {:.3} ({:.0}s)",
            r.epoch,
            r.train_loss,
            r.val.overall_acc.unwrap_or(0.0),
            start.elapsed().as_secs_f64()
        )
    })?;
    let elapsed = start.elapsed();
    let best = outcome.best().expect("at least one epoch");
    let acc = best.val.overall_acc.unwrap_or(0.0);
    let ok = acc >= 0.95 && outcome.history.len() <= 30 && elapsed < Duration::from_secs(600);
    Ok((
        ok,
        format!(
            "overall {acc:.4} (open {:.4}, closed {:.4}, C={}) after {} epochs, {:.0}s, {} train / {} held out",
            best.val.open_acc.unwrap_or(0.0),
            best.val.closed_acc.unwrap_or(0.0),
            open_classes + 2,
            outcome.history.len(),
            elapsed.as_secs_f64(),
            tr.len(),
            va.len()
        ),
    ))
}

/// Desk-scale grid settings: the reference architecture at half width
/// with one fusion and one decoder layer, trained for the default 30 epochs.
fn ablation_desk() -> (ModelConfig, TrainConfig) {
    let model = ModelConfig {
        feature_dim: 32,
        answer_embed_dim: 32,
        fusion_layers: 1,
        decoder_layers: 1,
        num_heads: 4,
        ffn_mult: 2,
        ..ModelConfig::reference()
    };
    let train = TrainConfig {
        epochs: 30,
        lr: 5e-4,
        ..TrainConfig::reference()
    };
    (model, train)
}

fn out_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).expect("target tmpdir is writable");
    dir
}

fn ablation_trend() -> Outcome {
    let (mut cfg, tc) = ablation_desk();
    let data = generate_dataset(3_500, 4, 5)?;
    cfg.fit_to_data(&data);
    let (tr, va) = data.split_tail(500);
    let (tr, va) = (tr.encode(&cfg)?, va.encode(&cfg)?);
    let start = Instant::now();
    let table = run_ablation(&cfg, &tc, &tr, &va, &[0, 1, 2, 3, 4], |r| {
        eprintln!(
            "  [5] #{} {}+{} seed {} overall {:.3} ({:.0}s)",
            r.row,
            r.fusion.as_str(),
            r.head.as_str(),
            r.seed,
            r.report.overall_acc.unwrap_or(0.0),
            start.elapsed().as_secs_f64()
        )
    })?;
    let dir = out_dir();
    table.write_runs(dir.join("ablation.csv"))?;
    table.write_medians(dir.join("ablation_medians.csv"))?;
    let medians: Vec<String> = table
        .medians()
        .iter()
        .map(|m| format!("#{}={:.3}", m.row, m.overall_acc.unwrap_or(0.0)))
        .collect();
    let checks = table.trend_checks();
    let held = checks.iter().filter(|c| c.holds).count();
    let violated: Vec<&str> = checks
        .iter()
        .filter(|c| !c.holds)
        .map(|c| c.description.as_str())
        .collect();
    Ok((
        held >= 4,
        format!(
            "{held}/{} comparisons hold (violated: [{}]); medians {}; csv {}",
            checks.len(),
            violated.join("; "),
            medians.join(" "),
            dir.join("ablation.csv").display()
        ),
    ))
}

fn dataset_soundness() -> Outcome {
    let data = generate_dataset(10_000, 4, 2024)?;
    let mut inconsistent = 0;
    let (mut yes, mut closed) = (0usize, 0usize);
    for s in &data.samples {
        let expected = rules::expected_answer(&s.image, &s.question_text);
        if expected.as_deref().ok() != data.answers.answer(s.answer_class) {
            inconsistent += 1;
        }
        if s.qtype == QuestionType::Closed {
            closed += 1;
            yes += usize::from(s.answer_class == YES);
        }
    }
    let no = closed - yes;
    let gap = yes.abs_diff(no) as f64 / yes.max(no).max(1) as f64;
    Ok((
        inconsistent == 0 && closed > 0 && gap <= 0.05,
        format!(
            "{inconsistent} rule mismatches in {}; yes {yes} / no {no} (gap {:.2}%)",
            data.len(),
            100.0 * gap
        ),
    ))
}

fn small_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 16,
        answer_embed_dim: 16,
        fusion_layers: 1,
        decoder_layers: 1,
        num_heads: 2,
        ffn_mult: 2,
        seed: 8,
        ..ModelConfig::reference()
    }
}

fn history_bytes(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    tr: &[EncodedSample],
    va: &[EncodedSample],
    name: &str,
) -> Result<(Vec<u8>, Checkpoint)> {
    let mut model = Q2ATransformer::new(cfg.clone())?;
    let mut state = TrainState::new(model.parameters(), tc.lr, tc.shuffle_seed);
    let outcome = train(&mut model, tr, va, tc, &mut state, |_| {})?;
    let path = out_dir().join(name);
    write_history(&path, &outcome.history)?;
    let ckpt = Checkpoint {
        model,
        state,
        answers: Vec::new(),
        tokens: Vec::new(),
    };
    Ok((std::fs::read(path)?, ckpt))
}

fn reproducibility() -> Outcome {
    let mut cfg = small_config();
    let data = generate_dataset(700, 4, 9)?;
    cfg.fit_to_data(&data);
    let (tr, va) = data.split_tail(300);
    let (tr, va) = (tr.encode(&cfg)?, va.encode(&cfg)?);
    let tc = TrainConfig {
        epochs: 3,
        shuffle_seed: 4,
        ..TrainConfig::reference()
    };
    let (first, ckpt) = history_bytes(&cfg, &tc, &tr, &va, "history_a.csv")?;
    let (second, _) = history_bytes(&cfg, &tc, &tr, &va, "history_b.csv")?;

    let path = out_dir().join("roundtrip.q2a");
    save_checkpoint(&path, &ckpt)?;
    let loaded = load_checkpoint(&path)?;
    let before = evaluate(&ckpt.model, &va, AnswerSelection::default())?;
    let after = evaluate(&loaded.model, &va, AnswerSelection::default())?;
    let mut logits_equal = true;
    for s in &va {
        let (a, b) = (ckpt.model.predict(s)?, loaded.model.predict(s)?);
        logits_equal &= a
            .logits
            .iter()
            .zip(&b.logits)
            .all(|(x, y)| x.to_bits() == y.to_bits());
    }
    let ok = first == second && before == after && logits_equal;
    Ok((
        ok,
        format!(
            "history csv identical: {}, reloaded eval identical: {}, logits bit-identical: {logits_equal} ({} samples)",
            first == second,
            before == after,
            va.len()
        ),
    ))
}

fn untrained_chance() -> Outcome {
    let mut cfg = ModelConfig::reference();
    let data = generate_dataset(4_000, 4, 77)?;
    cfg.fit_to_data(&data);
    let open_classes = data.answers.open_classes();
    let samples = data.encode(&cfg)?;
    let report = evaluate(
        &Q2ATransformer::new(cfg)?,
        &samples,
        AnswerSelection::ByQuestionType,
    )?;
    let (closed, open) = (
        report.closed_acc.unwrap_or(f64::NAN),
        report.open_acc.unwrap_or(f64::NAN),
    );
    let chance = 1.0 / open_classes as f64;
    let ok = (closed - 0.5).abs() <= 0.1 && (open - chance).abs() <= 0.05 && samples.len() >= 2000;
    Ok((
        ok,
        format!(
            "closed {closed:.4} (n={}), open {open:.4} vs 1/{open_classes}={chance:.4} (n={})",
            report.n_closed, report.n_open
        ),
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient fidelity", gradient_fidelity),
        ("equation fidelity", equation_fidelity),
        ("loss unit values", loss_unit_values),
        ("learnability", learnability),
        ("ablation trend", ablation_trend),
        ("dataset soundness", dataset_soundness),
        ("reproducibility", reproducibility),
        ("untrained chance", untrained_chance),
    ];
    let wanted: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = match run() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e:#}")),
        };
        failures += usize::from(!ok);
        println!(
            "{} criterion {id} ({name}): {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
