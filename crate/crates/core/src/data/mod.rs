//! Procedural grid-world VQA data.
//!
//! Each image is a `G x G` grid whose cells are empty or hold one coloured
//! shape. Questions come from three templates:
//!
//! - `is there a <color> <shape>` (closed, answered yes / no)
//! - `what color is the <shape>` (open, only asked when that shape is unique)
//! - `how many <shape>s` (open, answered with a count in `0..=G*G`)

mod format;
mod synth;

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

pub use format::{load_dataset, save_dataset, FORMAT_VERSION};
pub use synth::{generate_dataset, OPEN_PER_MILLE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObjectShape {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl ObjectShape {
    pub const ALL: [ObjectShape; 3] = [
        ObjectShape::Circle,
        ObjectShape::Square,
        ObjectShape::Triangle,
    ];

    pub fn word(self) -> &'static str {
        match self {
            ObjectShape::Circle => "circle",
            ObjectShape::Square => "square",
            ObjectShape::Triangle => "triangle",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            ObjectShape::Circle => "circles",
            ObjectShape::Square => "squares",
            ObjectShape::Triangle => "triangles",
        }
    }

    fn code(self) -> char {
        match self {
            ObjectShape::Circle => 'c',
            ObjectShape::Square => 's',
            ObjectShape::Triangle => 't',
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    fn code(self) -> char {
        match self {
            Color::Red => 'r',
            Color::Green => 'g',
            Color::Blue => 'b',
            Color::Yellow => 'y',
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Object {
    pub shape: ObjectShape,
    pub color: Color,
}

/// Square grid of optional objects, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageGrid {
    size: usize,
    cells: Vec<Option<Object>>,
}

impl ImageGrid {
    /// One-hot shape block (3) followed by one-hot colour block (4); both
    /// blocks are zero for an empty cell.
    pub const CELL_CHANNELS: usize = 7;

    pub fn new(size: usize, cells: Vec<Option<Object>>) -> Result<Self> {
        if cells.len() != size * size {
            return Err(Error::Config(format!(
                "a {size}x{size} grid needs {} cells, got {}",
                size * size,
                cells.len()
            )));
        }
        Ok(ImageGrid { size, cells })
    }

    pub fn empty(size: usize) -> Self {
        ImageGrid {
            size,
            cells: vec![None; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn cells(&self) -> &[Option<Object>] {
        &self.cells
    }

    pub fn cells_mut(&mut self) -> &mut [Option<Object>] {
        &mut self.cells
    }

    /// `[G*G, CELL_CHANNELS]` feature matrix, one row per cell.
    pub fn features(&self) -> Tensor {
        let mut data = vec![0.0; self.cells.len() * Self::CELL_CHANNELS];
        for (row, cell) in data.chunks_exact_mut(Self::CELL_CHANNELS).zip(&self.cells) {
            if let Some(obj) = cell {
                row[obj.shape.index()] = 1.0;
                row[3 + obj.color.index()] = 1.0;
            }
        }
        Tensor::new(data, &[self.cells.len(), Self::CELL_CHANNELS]).expect("feature matrix shape")
    }

    pub(crate) fn encode_cells(&self) -> String {
        self.cells
            .iter()
            .map(|c| match c {
                Some(o) => format!("{}{}", o.shape.code(), o.color.code()),
                None => "..".to_string(),
            })
            .collect::<Vec<_>>()
            .join(",")
    }

    pub(crate) fn decode_cells(size: usize, text: &str) -> std::result::Result<Self, String> {
        let cells = text
            .split(',')
            .map(|code| {
                let mut chars = code.chars();
                match (chars.next(), chars.next(), chars.next()) {
                    (Some('.'), Some('.'), None) => Ok(None),
                    (Some(s), Some(c), None) => {
                        let shape = ObjectShape::ALL.into_iter().find(|x| x.code() == s);
                        let color = Color::ALL.into_iter().find(|x| x.code() == c);
                        match (shape, color) {
                            (Some(shape), Some(color)) => Ok(Some(Object { shape, color })),
                            _ => Err(format!("invalid cell code {code:?}")),
                        }
                    }
                    _ => Err(format!("invalid cell code {code:?}")),
                }
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        ImageGrid::new(size, cells).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QuestionType {
    Closed,
    Open,
}

impl QuestionType {
    pub fn as_str(self) -> &'static str {
        match self {
            QuestionType::Closed => "closed",
            QuestionType::Open => "open",
        }
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VqaSample {
    pub image: ImageGrid,
    pub question_text: String,
    pub question_tokens: Vec<usize>,
    pub answer_class: usize,
    pub qtype: QuestionType,
}

/// Answer strings <-> class indices. Index 0 is always `yes` and index 1 is
/// always `no`; every other class is an open-question answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerVocabulary {
    answers: Vec<String>,
    index: HashMap<String, usize>,
}

pub const YES: usize = 0;
pub const NO: usize = 1;

impl AnswerVocabulary {
    /// `yes`, `no`, the four colours, then counts `0..=G*G`.
    pub fn for_grid(grid_size: usize) -> Self {
        let mut answers: Vec<String> = vec!["yes".into(), "no".into()];
        answers.extend(Color::ALL.iter().map(|c| c.word().to_string()));
        answers.extend((0..=grid_size * grid_size).map(|k| k.to_string()));
        Self::from_answers(answers).expect("generated vocabulary is well formed")
    }

    pub fn from_answers(answers: Vec<String>) -> Result<Self> {
        if answers.len() < 2 || answers[YES] != "yes" || answers[NO] != "no" {
            return Err(Error::VocabularyMismatch(
                "answer vocabulary must start with \"yes\", \"no\"".into(),
            ));
        }
        let mut index = HashMap::with_capacity(answers.len());
        for (i, a) in answers.iter().enumerate() {
            if index.insert(a.clone(), i).is_some() {
                return Err(Error::VocabularyMismatch(format!("duplicate answer {a:?}")));
            }
        }
        Ok(AnswerVocabulary { answers, index })
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn class_of(&self, answer: &str) -> Option<usize> {
        self.index.get(answer).copied()
    }

    pub fn answer(&self, class: usize) -> Option<&str> {
        self.answers.get(class).map(String::as_str)
    }

    /// Number of classes that answer open questions.
    pub fn open_classes(&self) -> usize {
        self.answers.len() - 2
    }
}

pub fn is_closed_answer(class: usize) -> bool {
    class == YES || class == NO
}

/// Closed word list for question text. Id 0 is padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenVocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

pub const PAD: usize = 0;
pub const PAD_TOKEN: &str = "<pad>";

impl TokenVocabulary {
    pub fn standard() -> Self {
        let mut tokens: Vec<String> = [
            PAD_TOKEN, "is", "there", "a", "what", "color", "the", "how", "many",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        tokens.extend(Color::ALL.iter().map(|c| c.word().to_string()));
        tokens.extend(ObjectShape::ALL.iter().map(|s| s.word().to_string()));
        tokens.extend(ObjectShape::ALL.iter().map(|s| s.plural().to_string()));
        Self::from_tokens(tokens).expect("standard vocabulary is well formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(PAD_TOKEN) {
            return Err(Error::VocabularyMismatch(format!(
                "token 0 must be {PAD_TOKEN}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::VocabularyMismatch(format!("duplicate token {t:?}")));
            }
        }
        Ok(TokenVocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Whitespace tokenisation against the closed word list.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.index
                    .get(w)
                    .copied()
                    .ok_or_else(|| Error::UnknownToken(w.to_string()))
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let words = ids
            .iter()
            .filter(|&&id| id != PAD)
            .map(|&id| {
                self.tokens
                    .get(id)
                    .map(String::as_str)
                    .ok_or(Error::OutOfVocabulary {
                        id,
                        size: self.tokens.len(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }
}

/// Samples plus the vocabularies they are encoded against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub grid_size: usize,
    pub answers: AnswerVocabulary,
    pub tokens: TokenVocabulary,
    pub samples: Vec<VqaSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Per-class answer counts, in vocabulary order.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.answers.len()];
        for s in &self.samples {
            counts[s.answer_class] += 1;
        }
        counts
    }

    /// Splits off the last `holdout` samples.
    pub fn split_tail(mut self, holdout: usize) -> (Dataset, Dataset) {
        let cut = self.samples.len().saturating_sub(holdout);
        let tail = self.samples.split_off(cut);
        let val = Dataset {
            samples: tail,
            ..self.clone()
        };
        (self, val)
    }

    /// Checks that `other` encodes answers and tokens the same way.
    pub fn check_compatible(&self, answers: &[String], tokens: &[String]) -> Result<()> {
        if self.answers.answers() != answers {
            return Err(Error::VocabularyMismatch(format!(
                "dataset has {} answer classes, model expects {}",
                self.answers.len(),
                answers.len()
            )));
        }
        if self.tokens.tokens() != tokens {
            return Err(Error::VocabularyMismatch(
                "question token lists differ".into(),
            ));
        }
        Ok(())
    }

    pub fn encode(&self, cfg: &ModelConfig) -> Result<Vec<EncodedSample>> {
        self.samples.iter().map(|s| encode_sample(s, cfg)).collect()
    }
}

impl ModelConfig {
    /// Takes image, question and answer sizes from `data`.
    pub fn fit_to_data(&mut self, data: &Dataset) {
        self.num_image_tokens = data.grid_size * data.grid_size;
        self.cell_channels = ImageGrid::CELL_CHANNELS;
        self.question_vocab_size = data.tokens.len();
        self.num_answer_classes = data.answers.len();
    }
}

/// Model-ready view of one sample.
#[derive(Debug, Clone)]
pub struct EncodedSample {
    /// `[N, cell_channels]`
    pub image: Tensor,
    /// Exactly `max_question_tokens` ids, right-padded with [`PAD`].
    pub tokens: Vec<usize>,
    pub answer: usize,
    pub qtype: QuestionType,
    /// The question was longer than `max_question_tokens` and was cut.
    pub truncated: bool,
}

pub fn encode_sample(sample: &VqaSample, cfg: &ModelConfig) -> Result<EncodedSample> {
    let n_cells = sample.image.cells().len();
    if n_cells != cfg.num_image_tokens {
        return Err(Error::Config(format!(
            "image has {n_cells} cells, model expects {}",
            cfg.num_image_tokens
        )));
    }
    if let Some(&id) = sample
        .question_tokens
        .iter()
        .find(|&&id| id >= cfg.question_vocab_size)
    {
        return Err(Error::OutOfVocabulary {
            id,
            size: cfg.question_vocab_size,
        });
    }
    if sample.answer_class >= cfg.num_answer_classes {
        return Err(Error::VocabularyMismatch(format!(
            "answer class {} outside {} classes",
            sample.answer_class, cfg.num_answer_classes
        )));
    }
    let m = cfg.max_question_tokens;
    let truncated = sample.question_tokens.len() > m;
    let mut tokens: Vec<usize> = sample.question_tokens.iter().copied().take(m).collect();
    tokens.resize(m, PAD);
    Ok(EncodedSample {
        image: sample.image.features(),
        tokens,
        answer: sample.answer_class,
        qtype: sample.qtype,
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_with_tokens(ids: Vec<usize>) -> VqaSample {
        VqaSample {
            image: ImageGrid::empty(4),
            question_text: String::new(),
            question_tokens: ids,
            answer_class: YES,
            qtype: QuestionType::Closed,
        }
    }

    #[test]
    fn vocabulary_layout() {
        let answers = AnswerVocabulary::for_grid(4);
        assert_eq!(answers.len(), 23);
        assert_eq!(answers.class_of("yes"), Some(0));
        assert_eq!(answers.class_of("no"), Some(1));
        assert_eq!(answers.class_of("16"), Some(22));
        assert_eq!(answers.open_classes(), 21);
        assert!(AnswerVocabulary::from_answers(vec!["no".into(), "yes".into()]).is_err());
        assert_eq!(TokenVocabulary::standard().len(), 19);
    }

    #[test]
    fn features_are_one_hot_blocks() {
        let mut grid = ImageGrid::empty(2);
        grid.cells_mut()[3] = Some(Object {
            shape: ObjectShape::Square,
            color: Color::Yellow,
        });
        let f = grid.features();
        assert_eq!(f.shape(), &[4, 7]);
        assert_eq!(f.row(0), &[0.0; 7]);
        assert_eq!(f.row(3), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn padding_fills_trailing_slots() {
        let cfg = ModelConfig::default();
        let enc = encode_sample(&sample_with_tokens(vec![7, 8, 16]), &cfg).unwrap();
        assert_eq!(enc.tokens, vec![7, 8, 16, PAD, PAD, PAD, PAD, PAD]);
        assert!(!enc.truncated);
    }

    #[test]
    fn long_questions_are_truncated_and_flagged() {
        let cfg = ModelConfig {
            max_question_tokens: 2,
            ..ModelConfig::default()
        };
        let enc = encode_sample(&sample_with_tokens(vec![1, 2, 3]), &cfg).unwrap();
        assert_eq!(enc.tokens, vec![1, 2]);
        assert!(enc.truncated);
    }

    #[test]
    fn encode_then_decode_recovers_ids() {
        let tokens = TokenVocabulary::standard();
        let ids = tokens.tokenize("how many circles").unwrap();
        let enc = encode_sample(&sample_with_tokens(ids.clone()), &ModelConfig::default()).unwrap();
        let stripped: Vec<usize> = enc.tokens.iter().copied().filter(|&t| t != PAD).collect();
        assert_eq!(stripped, ids);
        assert_eq!(tokens.detokenize(&enc.tokens).unwrap(), "how many circles");
        assert_eq!(enc.answer, YES);
    }

    #[test]
    fn unknown_words_and_ids_are_rejected() {
        let tokens = TokenVocabulary::standard();
        assert!(
            matches!(tokens.tokenize("is there a dog"), Err(Error::UnknownToken(w)) if w == "dog")
        );
        let err =
            encode_sample(&sample_with_tokens(vec![1, 99]), &ModelConfig::default()).unwrap_err();
        assert!(matches!(err, Error::OutOfVocabulary { id: 99, .. }));
    }

    #[test]
    fn cell_codes_round_trip() {
        let mut grid = ImageGrid::empty(2);
        grid.cells_mut()[1] = Some(Object {
            shape: ObjectShape::Triangle,
            color: Color::Green,
        });
        let text = grid.encode_cells();
        assert_eq!(text, "..,tg,..,..");
        assert_eq!(ImageGrid::decode_cells(2, &text).unwrap(), grid);
        assert!(ImageGrid::decode_cells(2, "..,xx,..,..").is_err());
        assert!(ImageGrid::decode_cells(3, &text).is_err());
    }
}
