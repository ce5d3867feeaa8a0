use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    AnswerVocabulary, Color, Dataset, ImageGrid, Object, ObjectShape, QuestionType,
    TokenVocabulary, VqaSample,
};
use crate::error::{Error, Result};

/// Share of open questions, per thousand samples.
pub const OPEN_PER_MILLE: u32 = 502;

/// Deterministic synthetic dataset. Sample `i` is drawn from its own ChaCha
/// stream, so any prefix of a larger dataset with the same seed is identical
/// and generation can be split across workers by index range.
///
/// Only integer draws are used, so output is platform independent.
pub fn generate_dataset(n_samples: usize, grid_size: usize, seed: u64) -> Result<Dataset> {
    if n_samples == 0 {
        return Err(Error::EmptyDataset);
    }
    if grid_size == 0 {
        return Err(Error::Config("grid size must be at least 1".into()));
    }
    let answers = AnswerVocabulary::for_grid(grid_size);
    let tokens = TokenVocabulary::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n_samples)
        .map(|i| {
            rng.set_stream(i as u64);
            rng.set_word_pos(0);
            generate_sample(&mut rng, grid_size, &answers, &tokens)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        grid_size,
        answers,
        tokens,
        samples,
    })
}

fn generate_sample(
    rng: &mut ChaCha8Rng,
    grid_size: usize,
    answers: &AnswerVocabulary,
    tokens: &TokenVocabulary,
) -> Result<VqaSample> {
    let open = rng.random_range(0..1000) < OPEN_PER_MILLE;
    let (image, text, answer) = if open {
        // Open answers are drawn uniformly over every open class, so a
        // constant guess scores 1 / (#open classes).
        let class = rng.random_range(2..answers.len());
        if class < 2 + Color::ALL.len() {
            color_question(rng, grid_size, Color::ALL[class - 2])
        } else {
            count_question(rng, grid_size, class - 2 - Color::ALL.len())
        }
    } else {
        closed_question(rng, grid_size)
    };
    let answer_class = answers.class_of(&answer).ok_or_else(|| {
        Error::VocabularyMismatch(format!("generated answer {answer:?} not in vocabulary"))
    })?;
    Ok(VqaSample {
        image,
        question_tokens: tokens.tokenize(&text)?,
        question_text: text,
        answer_class,
        qtype: if open {
            QuestionType::Open
        } else {
            QuestionType::Closed
        },
    })
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, items: &[T]) -> T {
    items[rng.random_range(0..items.len())]
}

fn random_object(rng: &mut ChaCha8Rng) -> Object {
    Object {
        shape: pick(rng, &ObjectShape::ALL),
        color: pick(rng, &Color::ALL),
    }
}

fn other_than<T: Copy + PartialEq>(rng: &mut ChaCha8Rng, items: &[T], avoid: T) -> T {
    let rest: Vec<T> = items.iter().copied().filter(|&x| x != avoid).collect();
    pick(rng, &rest)
}

/// Each cell independently empty with probability 1/2, else a random object.
fn base_grid(rng: &mut ChaCha8Rng, grid_size: usize) -> ImageGrid {
    let mut grid = ImageGrid::empty(grid_size);
    for cell in grid.cells_mut() {
        if rng.random_range(0..2u32) == 1 {
            *cell = Some(random_object(rng));
        }
    }
    grid
}

fn closed_question(rng: &mut ChaCha8Rng, grid_size: usize) -> (ImageGrid, String, String) {
    let target = random_object(rng);
    let yes = rng.random_range(0..2u32) == 0;
    let mut grid = base_grid(rng, grid_size);
    let n = grid.cells().len();
    if yes {
        if !grid.cells().contains(&Some(target)) {
            let at = rng.random_range(0..n);
            grid.cells_mut()[at] = Some(target);
        }
    } else {
        for cell in grid.cells_mut() {
            if *cell == Some(target) {
                *cell = Some(Object {
                    shape: target.shape,
                    color: other_than(rng, &Color::ALL, target.color),
                });
            }
        }
    }
    let text = format!("is there a {} {}", target.color.word(), target.shape.word());
    let answer = if yes { "yes" } else { "no" };
    (grid, text, answer.to_string())
}

fn color_question(
    rng: &mut ChaCha8Rng,
    grid_size: usize,
    color: Color,
) -> (ImageGrid, String, String) {
    let shape = pick(rng, &ObjectShape::ALL);
    let mut grid = base_grid(rng, grid_size);
    for cell in grid.cells_mut() {
        if let Some(obj) = cell {
            if obj.shape == shape {
                obj.shape = other_than(rng, &ObjectShape::ALL, shape);
            }
        }
    }
    let at = rng.random_range(0..grid.cells().len());
    grid.cells_mut()[at] = Some(Object { shape, color });
    let text = format!("what color is the {}", shape.word());
    (grid, text, color.word().to_string())
}

fn count_question(
    rng: &mut ChaCha8Rng,
    grid_size: usize,
    count: usize,
) -> (ImageGrid, String, String) {
    let shape = pick(rng, &ObjectShape::ALL);
    let n = grid_size * grid_size;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut grid = ImageGrid::empty(grid_size);
    for (rank, &cell) in order.iter().enumerate() {
        grid.cells_mut()[cell] = if rank < count {
            Some(Object {
                shape,
                color: pick(rng, &Color::ALL),
            })
        } else if rng.random_range(0..2u32) == 1 {
            Some(Object {
                shape: other_than(rng, &ObjectShape::ALL, shape),
                color: pick(rng, &Color::ALL),
            })
        } else {
            None
        };
    }
    let text = format!("how many {}", shape.plural());
    (grid, text, count.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{NO, YES};

    #[test]
    fn closed_answers_are_yes_or_no() {
        let data = generate_dataset(300, 4, 3).unwrap();
        for s in &data.samples {
            let closed = s.answer_class == YES || s.answer_class == NO;
            assert_eq!(closed, s.qtype == QuestionType::Closed);
        }
    }

    #[test]
    fn single_sample_keeps_full_vocabulary() {
        let data = generate_dataset(1, 4, 11).unwrap();
        assert_eq!(data.len(), 1);
        assert_eq!(data.answers.len(), 23);
    }

    #[test]
    fn zero_samples_rejected() {
        assert!(matches!(
            generate_dataset(0, 4, 0),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn prefix_stable_across_sizes() {
        let small = generate_dataset(20, 4, 5).unwrap();
        let large = generate_dataset(50, 4, 5).unwrap();
        assert_eq!(small.samples[..], large.samples[..20]);
    }
}
