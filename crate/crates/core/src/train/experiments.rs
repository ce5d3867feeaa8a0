//! Answer-dimension sweep and the fusion x head ablation grid.

use std::path::Path;

use super::eval::EvalReport;
use super::fit::{train, TrainConfig};
use super::optim::TrainState;
use crate::data::EncodedSample;
use crate::error::{Error, Result};
use crate::model::{FusionKind, HeadKind, ModelConfig, Q2ATransformer};
use crate::nn::Module;

/// Trains a fresh model and returns its best-epoch validation report.
pub fn train_and_report(
    model_cfg: ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &[EncodedSample],
    val_set: &[EncodedSample],
) -> Result<EvalReport> {
    let mut model = Q2ATransformer::new(model_cfg)?;
    let mut state = TrainState::new(model.parameters(), train_cfg.lr, train_cfg.shuffle_seed);
    let outcome = train(
        &mut model,
        train_set,
        val_set,
        train_cfg,
        &mut state,
        |_| {},
    )?;
    Ok(outcome
        .best()
        .map(|r| r.val.clone())
        .unwrap_or_else(|| EvalReport::empty(model.config().num_answer_classes)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub dim: usize,
    pub report: EvalReport,
}

/// One model per answer-embedding width, everything else from `base`.
pub fn sweep_answer_dim(
    dims: &[usize],
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &[EncodedSample],
    val_set: &[EncodedSample],
    mut on_row: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    if dims.is_empty() {
        return Err(Error::Config("sweep needs at least one dimension".into()));
    }
    dims.iter()
        .map(|&dim| {
            let cfg = ModelConfig {
                answer_embed_dim: dim,
                ..base.clone()
            };
            let row = SweepRow {
                dim,
                report: train_and_report(cfg, train_cfg, train_set, val_set)?,
            };
            on_row(&row);
            Ok(row)
        })
        .collect()
}

fn acc(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_sweep(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["dim", "open_acc", "closed_acc", "overall_acc"])?;
    for r in rows {
        w.write_record([
            r.dim.to_string(),
            acc(r.report.open_acc),
            acc(r.report.closed_acc),
            acc(r.report.overall_acc),
        ])?;
    }
    w.flush().map_err(|e| crate::Error::io(path, e))
}

/// The six fusion x head cells, numbered 1..=6: odd rows use the linear
/// head, even rows the answer decoder; rows 1-2 multiply, 3-4 sum and 5-6
/// use cross-modality attention.
pub const ABLATION_GRID: [(usize, FusionKind, HeadKind); 6] = [
    (1, FusionKind::Mul, HeadKind::Linear),
    (2, FusionKind::Mul, HeadKind::Decoder),
    (3, FusionKind::Sum, HeadKind::Linear),
    (4, FusionKind::Sum, HeadKind::Decoder),
    (5, FusionKind::Cman, HeadKind::Linear),
    (6, FusionKind::Cman, HeadKind::Decoder),
];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub row: usize,
    pub fusion: FusionKind,
    pub head: HeadKind,
    pub seed: u64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationMedian {
    pub row: usize,
    pub fusion: FusionKind,
    pub head: HeadKind,
    pub open_acc: Option<f64>,
    pub closed_acc: Option<f64>,
    pub overall_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub runs: Vec<AblationRun>,
}

/// A pairwise ordering the grid is expected to show.
#[derive(Debug, Clone, PartialEq)]
pub struct TrendCheck {
    pub description: String,
    pub holds: bool,
}

/// Trains every grid cell once per seed. Each seed drives both the model
/// initialisation and minibatch shuffling of that run.
pub fn run_ablation(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &[EncodedSample],
    val_set: &[EncodedSample],
    seeds: &[u64],
    mut on_run: impl FnMut(&AblationRun),
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut runs = Vec::with_capacity(seeds.len() * ABLATION_GRID.len());
    for &(row, fusion, head) in &ABLATION_GRID {
        for &seed in seeds {
            let cfg = ModelConfig {
                fusion_kind: fusion,
                head_kind: head,
                seed,
                ..base.clone()
            };
            let tc = TrainConfig {
                shuffle_seed: seed,
                ..train_cfg.clone()
            };
            let run = AblationRun {
                row,
                fusion,
                head,
                seed,
                report: train_and_report(cfg, &tc, train_set, val_set)?,
            };
            on_run(&run);
            runs.push(run);
        }
    }
    Ok(AblationTable { runs })
}

/// Median of the defined values; the mean of the middle pair for even counts.
pub fn median(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    })
}

impl AblationTable {
    pub fn medians(&self) -> Vec<AblationMedian> {
        ABLATION_GRID
            .iter()
            .map(|&(row, fusion, head)| {
                let runs: Vec<&AblationRun> = self.runs.iter().filter(|r| r.row == row).collect();
                AblationMedian {
                    row,
                    fusion,
                    head,
                    open_acc: median(runs.iter().map(|r| r.report.open_acc)),
                    closed_acc: median(runs.iter().map(|r| r.report.closed_acc)),
                    overall_acc: median(runs.iter().map(|r| r.report.overall_acc)),
                }
            })
            .collect()
    }

    /// Decoder beats linear head within each fusion kind, and the
    /// cross-attention + decoder cell beats every other decoder cell and
    /// the best linear-head cell.
    pub fn trend_checks(&self) -> Vec<TrendCheck> {
        let med: Vec<f64> = self
            .medians()
            .iter()
            .map(|m| m.overall_acc.unwrap_or(0.0))
            .collect();
        let at = |row: usize| med[row - 1];
        let ge = |a: usize, b: usize| TrendCheck {
            description: format!("#{a} >= #{b}"),
            holds: at(a) >= at(b),
        };
        vec![
            ge(2, 1),
            ge(4, 3),
            ge(6, 5),
            ge(6, 2),
            ge(6, 4),
            TrendCheck {
                description: "#6 >= max(#1, #3)".into(),
                holds: at(6) >= at(1).max(at(3)),
            },
        ]
    }

    pub fn write_runs(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "row",
            "fusion",
            "head",
            "seed",
            "open_acc",
            "closed_acc",
            "overall_acc",
        ])?;
        for r in &self.runs {
            w.write_record([
                r.row.to_string(),
                r.fusion.as_str().to_string(),
                r.head.as_str().to_string(),
                r.seed.to_string(),
                acc(r.report.open_acc),
                acc(r.report.closed_acc),
                acc(r.report.overall_acc),
            ])?;
        }
        w.flush().map_err(|e| crate::Error::io(path, e))
    }

    pub fn write_medians(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "row",
            "fusion",
            "head",
            "median_open_acc",
            "median_closed_acc",
            "median_overall_acc",
        ])?;
        for m in self.medians() {
            w.write_record([
                m.row.to_string(),
                m.fusion.as_str().to_string(),
                m.head.as_str().to_string(),
                acc(m.open_acc),
                acc(m.closed_acc),
                acc(m.overall_acc),
            ])?;
        }
        w.flush().map_err(|e| crate::Error::io(path, e))
    }
}
