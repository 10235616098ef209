//! Evaluation: micro-F1, selection sparsity, segment statistics, and
//! rationale overlap with planted spans.

use serde::{Deserialize, Serialize};

use crate::classifier::{hard_mask, predict_all, train, ClassifierParams, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{segment_count, selected_count};
use crate::par::map_slice;
use crate::scoring::{Instance, Span};

/// Micro-averaged F1 from pooled true/false positives over all labels. For
/// single-label multi-class data this equals accuracy.
pub fn micro_f1<T: PartialEq>(predictions: &[T], gold: &[T]) -> Result<f64> {
    micro_f1_excluding(predictions, gold, None)
}

/// Micro-F1 where `negative` (a "no relation" label) never counts as a
/// positive prediction or a positive gold instance.
pub fn micro_f1_excluding<T: PartialEq>(
    predictions: &[T],
    gold: &[T],
    negative: Option<&T>,
) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::LengthMismatch {
            expected: gold.len(),
            actual: predictions.len(),
        });
    }
    if gold.is_empty() {
        return Err(Error::Invalid {
            field: "gold",
            reason: "no examples to score".into(),
        });
    }
    let is_pos = |x: &T| negative != Some(x);
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (p, g) in predictions.iter().zip(gold) {
        if p == g {
            if is_pos(g) {
                tp += 1;
            }
        } else {
            if is_pos(p) {
                fp += 1;
            }
            if is_pos(g) {
                fneg += 1;
            }
        }
    }
    let denom = 2 * tp + fp + fneg;
    Ok(if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    })
}

/// Precision and recall of a selection against a gold span.
pub fn rationale_overlap(mask: &[bool], gold: Span) -> Result<(f64, f64)> {
    gold.check_bounds(mask.len())?;
    let selected = selected_count(mask);
    let hit = gold.indices().filter(|&i| mask[i]).count();
    let precision = if selected == 0 {
        0.0
    } else {
        hit as f64 / selected as f64
    };
    let recall = hit as f64 / gold.len() as f64;
    Ok((precision, recall))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub instances: usize,
    /// Absent when no classifier was evaluated.
    pub micro_f1: Option<f64>,
    /// Selected tokens over sentence length, averaged over instances.
    pub mean_sparsity_rate: f64,
    pub mean_segment_count: f64,
    pub mean_segment_length: f64,
    /// Averaged over instances carrying a gold rationale span.
    pub rationale_precision: Option<f64>,
    pub rationale_recall: Option<f64>,
}

impl EvalReport {
    /// Flat `key=value` lines; absent values print as `na`.
    pub fn to_kv_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "na".to_string(), |x| format!("{x:.6}"));
        format!(
            "instances={}\nmicro_f1={}\nmean_sparsity_rate={:.6}\nmean_segment_count={:.6}\nmean_segment_length={:.6}\nrationale_precision={}\nrationale_recall={}\n",
            self.instances,
            opt(self.micro_f1),
            self.mean_sparsity_rate,
            self.mean_segment_count,
            self.mean_segment_length,
            opt(self.rationale_precision),
            opt(self.rationale_recall),
        )
    }

    /// Aggregates mask statistics over `(mask, gold span)` pairs.
    pub fn from_masks(masks: &[(Vec<bool>, Option<Span>)], micro_f1: Option<f64>) -> Result<Self> {
        let n = masks.len();
        let mut rate = 0.0;
        let mut segs = 0.0;
        let (mut sel_total, mut seg_total) = (0usize, 0usize);
        let (mut prec, mut rec, mut with_gold) = (0.0, 0.0, 0usize);
        for (mask, gold) in masks {
            let sel = selected_count(mask);
            let s = segment_count(mask);
            if !mask.is_empty() {
                rate += sel as f64 / mask.len() as f64;
            }
            segs += s as f64;
            sel_total += sel;
            seg_total += s;
            if let Some(span) = gold {
                let (p, r) = rationale_overlap(mask, *span)?;
                prec += p;
                rec += r;
                with_gold += 1;
            }
        }
        let mean = |x: f64, d: usize| if d == 0 { 0.0 } else { x / d as f64 };
        Ok(Self {
            instances: n,
            micro_f1,
            mean_sparsity_rate: mean(rate, n),
            mean_segment_count: mean(segs, n),
            mean_segment_length: mean(sel_total as f64, seg_total),
            rationale_precision: (with_gold > 0).then(|| prec / with_gold as f64),
            rationale_recall: (with_gold > 0).then(|| rec / with_gold as f64),
        })
    }
}

/// Hard masks under `params`/`cfg` for every instance, in order.
pub fn hard_masks(
    dataset: &[Instance],
    params: &ClassifierParams,
    cfg: &TrainConfig,
) -> Result<Vec<Vec<bool>>> {
    map_slice(cfg.execution, dataset, |_, inst| {
        hard_mask(inst, params, cfg)
    })
    .into_iter()
    .collect()
}

/// Classifier and rationale evaluation on labelled data.
pub fn evaluate(
    dataset: &[Instance],
    params: &ClassifierParams,
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    let masks = hard_masks(dataset, params, cfg)?;
    let pairs: Vec<_> = masks
        .into_iter()
        .zip(dataset)
        .map(|(m, inst)| (m, inst.rationale))
        .collect();
    let f1 = if dataset.iter().all(|i| i.label.is_some()) && !dataset.is_empty() {
        let predictions = predict_all(dataset, params, cfg)?;
        let gold: Vec<Option<usize>> = dataset
            .iter()
            .map(|i| i.label.as_deref().and_then(|l| params.label_index(l)))
            .collect();
        let predictions: Vec<Option<usize>> = predictions.into_iter().map(Some).collect();
        Some(micro_f1(&predictions, &gold)?)
    } else {
        None
    };
    EvalReport::from_masks(&pairs, f1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub micro_f1: f64,
    pub mean_selected_rate: f64,
    pub mean_segment_count: f64,
    pub rationale_recall: Option<f64>,
}

/// Trains on `train_set` and evaluates on `test_set` at each budget fraction.
pub fn k_sweep(
    train_set: &[Instance],
    test_set: &[Instance],
    fractions: &[f64],
    cfg: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    if let Some(&f) = fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::BadFraction(f));
    }
    fractions
        .iter()
        .map(|&fraction| {
            let cfg = TrainConfig {
                budget_fraction: fraction,
                ..cfg.clone()
            };
            let (params, _) = train(train_set, &cfg)?;
            let report = evaluate(test_set, &params, &cfg)?;
            Ok(SweepRow {
                fraction,
                micro_f1: report.micro_f1.unwrap_or(0.0),
                mean_selected_rate: report.mean_sparsity_rate,
                mean_segment_count: report.mean_segment_count,
                rationale_recall: report.rationale_recall,
            })
        })
        .collect()
}
