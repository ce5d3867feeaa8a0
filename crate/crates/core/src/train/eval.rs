use crate::data::{EncodedSample, QuestionType};
use crate::error::Result;
use crate::model::{AnswerSelection, Q2ATransformer};

/// Top-1 accuracy split by question type. Accuracies are `None` for an
/// empty partition rather than 0.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub open_acc: Option<f64>,
    pub closed_acc: Option<f64>,
    pub overall_acc: Option<f64>,
    pub n_open: usize,
    pub n_closed: usize,
    pub correct_open: usize,
    pub correct_closed: usize,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn empty(classes: usize) -> Self {
        EvalReport {
            open_acc: None,
            closed_acc: None,
            overall_acc: None,
            n_open: 0,
            n_closed: 0,
            correct_open: 0,
            correct_closed: 0,
            confusion: vec![vec![0; classes]; classes],
        }
    }

    /// Report over `(truth, predicted, qtype)` triples.
    pub fn from_predictions(
        classes: usize,
        items: impl IntoIterator<Item = (usize, usize, QuestionType)>,
    ) -> Self {
        let mut report = Self::empty(classes);
        for (truth, predicted, qtype) in items {
            report.record(truth, predicted, qtype);
        }
        report.refresh();
        report
    }

    fn record(&mut self, truth: usize, predicted: usize, qtype: QuestionType) {
        let hit = usize::from(truth == predicted);
        match qtype {
            QuestionType::Open => {
                self.n_open += 1;
                self.correct_open += hit;
            }
            QuestionType::Closed => {
                self.n_closed += 1;
                self.correct_closed += hit;
            }
        }
        self.confusion[truth][predicted] += 1;
    }

    fn refresh(&mut self) {
        let frac = |c: usize, n: usize| (n > 0).then(|| c as f64 / n as f64);
        self.open_acc = frac(self.correct_open, self.n_open);
        self.closed_acc = frac(self.correct_closed, self.n_closed);
        self.overall_acc = frac(
            self.correct_open + self.correct_closed,
            self.n_open + self.n_closed,
        );
    }

    /// Combines reports over disjoint shards.
    pub fn merge(&self, other: &EvalReport) -> EvalReport {
        let mut out = self.clone();
        out.n_open += other.n_open;
        out.n_closed += other.n_closed;
        out.correct_open += other.correct_open;
        out.correct_closed += other.correct_closed;
        for (row, other_row) in out.confusion.iter_mut().zip(&other.confusion) {
            for (c, o) in row.iter_mut().zip(other_row) {
                *c += o;
            }
        }
        out.refresh();
        out
    }

    pub fn total(&self) -> usize {
        self.n_open + self.n_closed
    }
}

/// Samples per forward pass during evaluation; predictions do not depend on it
/// beyond rounding.
const EVAL_BATCH: usize = 64;

pub fn evaluate(
    model: &Q2ATransformer,
    data: &[EncodedSample],
    selection: AnswerSelection,
) -> Result<EvalReport> {
    let classes = model.config().num_answer_classes;
    let mut report = EvalReport::empty(classes);
    for chunk in data.chunks(EVAL_BATCH) {
        let samples: Vec<&EncodedSample> = chunk.iter().collect();
        for (s, pred) in chunk.iter().zip(model.predict_batch(&samples)?) {
            report.record(s.answer, pred.select(s.qtype, selection), s.qtype);
        }
    }
    report.refresh();
    Ok(report)
}
