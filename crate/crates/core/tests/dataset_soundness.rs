#[path = "support/rules.rs"]
mod rules;

use q2a::data::{generate_dataset, load_dataset, save_dataset, QuestionType, NO, YES};

#[test]
fn every_answer_follows_from_the_grid() {
    let data = generate_dataset(10_000, 4, 2024).unwrap();
    let mut inconsistent = Vec::new();
    for (i, s) in data.samples.iter().enumerate() {
        let given = data.answers.answer(s.answer_class).unwrap();
        match rules::expected_answer(&s.image, &s.question_text) {
            Ok(expected) if expected == given => {}
            Ok(expected) => {
                inconsistent.push(format!("#{i} {:?}: {given} != {expected}", s.question_text))
            }
            Err(why) => inconsistent.push(format!("#{i}: {why}")),
        }
    }
    assert!(
        inconsistent.is_empty(),
        "{} bad samples, first: {:?}",
        inconsistent.len(),
        &inconsistent[..inconsistent.len().min(5)]
    );
}

#[test]
fn closed_questions_are_balanced_and_typed() {
    let data = generate_dataset(10_000, 4, 99).unwrap();
    let counts = data.class_counts();
    let closed = counts[YES] + counts[NO];
    assert!(closed > 4_000);
    // yes and no counts within 5% of each other
    let (yes, no) = (counts[YES] as f64, counts[NO] as f64);
    assert!((yes - no).abs() <= 0.05 * yes.max(no), "yes {yes} / no {no}");
    for s in &data.samples {
        let is_yes_no = s.answer_class == YES || s.answer_class == NO;
        assert_eq!(s.qtype == QuestionType::Closed, is_yes_no);
        assert_eq!(
            data.tokens.detokenize(&s.question_tokens).unwrap(),
            s.question_text
        );
    }
    let open = data
        .samples
        .iter()
        .filter(|s| s.qtype == QuestionType::Open)
        .count();
    assert!((4_700..=5_300).contains(&open), "{open} open questions");
}

#[test]
fn every_open_class_occurs() {
    let data = generate_dataset(10_000, 4, 5).unwrap();
    let counts = data.class_counts();
    let open = &counts[NO + 1..];
    let expected = data
        .samples
        .iter()
        .filter(|s| s.qtype == QuestionType::Open)
        .count() as f64
        / open.len() as f64;
    for (c, &n) in open.iter().enumerate() {
        assert!(
            (n as f64 - expected).abs() < 0.3 * expected,
            "class {} seen {n} times",
            c + NO + 1
        );
    }
}

#[test]
fn saved_dataset_matches_golden_file() {
    let data = generate_dataset(6, 2, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("small.tsv");
    save_dataset(&data, &path).unwrap();
    let written = std::fs::read_to_string(&path).unwrap();
    let golden = include_str!("golden/dataset_g2_n6_seed11.tsv");
    assert_eq!(written, golden);
    assert_eq!(load_dataset(&path).unwrap(), data);
}

#[test]
fn generation_is_reproducible() {
    let a = generate_dataset(500, 4, 7).unwrap();
    let b = generate_dataset(500, 4, 7).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, generate_dataset(500, 4, 8).unwrap());
}
