//! Answers a generated question by reading the grid, without using the
//! generator. Works on question text and answer strings only.
#![allow(dead_code)]

use q2a::data::{ImageGrid, ObjectShape};

fn shape_named(word: &str) -> Option<ObjectShape> {
    ObjectShape::ALL
        .into_iter()
        .find(|s| s.word() == word || s.plural() == word)
}

/// The answer string the grid implies, or an explanation of why the
/// question is unanswerable (unknown form, ambiguous referent).
pub fn expected_answer(grid: &ImageGrid, question: &str) -> Result<String, String> {
    let words: Vec<&str> = question.split_whitespace().collect();
    let objects = || grid.cells().iter().flatten();
    match words.as_slice() {
        ["is", "there", "a", color, shape] => {
            let shape = shape_named(shape).ok_or(format!("unknown shape in {question:?}"))?;
            let present = objects().any(|o| o.shape == shape && o.color.word() == *color);
            Ok(if present { "yes" } else { "no" }.to_string())
        }
        ["what", "color", "is", "the", shape] => {
            let shape = shape_named(shape).ok_or(format!("unknown shape in {question:?}"))?;
            let matches: Vec<_> = objects().filter(|o| o.shape == shape).collect();
            match matches.as_slice() {
                [only] => Ok(only.color.word().to_string()),
                other => Err(format!(
                    "{} {}s in grid for {question:?}",
                    other.len(),
                    shape.word()
                )),
            }
        }
        ["how", "many", shapes] => {
            let shape = shape_named(shapes).ok_or(format!("unknown shape in {question:?}"))?;
            Ok(objects().filter(|o| o.shape == shape).count().to_string())
        }
        _ => Err(format!("unrecognised question {question:?}")),
    }
}
