//! Linear relation classifier over soft-masked token embeddings.
//!
//! The feature of an instance is `[mean_i p_i x_i ; x_e1 + x_e2]`, where `p`
//! is the soft mask: exact chain marginals whose multiplier meets the token
//! budget in expectation. Training minimizes cross-entropy by minibatch
//! gradient descent; gradients flow through the marginals into importance
//! scores, embeddings, and the continuity bonus. Evaluation swaps the soft
//! mask for the feasible hard mask from [`crate::relax::tune_lambda`].

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::exact::dp_map;
use crate::metrics::micro_f1;
use crate::model::{resolve_fraction, Budget, ChainModel};
use crate::par::{map_slice, Execution};
use crate::relax::{tune_lambda, BudgetedSoftMask};
use crate::rng;
use crate::scoring::{dot, importance_scores, Instance, DEFAULT_BUDGET_FRACTION};

/// Switches that remove one component of the extractor.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Edge bonus fixed at 0.
    pub no_continuity: bool,
    /// Multiplier fixed at 0 and budget equal to the sentence length.
    pub no_sparsity: bool,
    /// Entity block of the feature is zeroed.
    pub no_entities: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub edge_bonus: f64,
    pub train_edge_bonus: bool,
    pub budget_fraction: f64,
    pub seed: u64,
    pub ablation: Ablation,
    /// Evaluate with exact budgeted MAP masks instead of the Lagrangian ones.
    #[serde(default)]
    pub exact_masks: bool,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2.0,
            epochs: 30,
            batch_size: 32,
            temperature: 1.0,
            edge_bonus: 0.5,
            train_edge_bonus: false,
            budget_fraction: DEFAULT_BUDGET_FRACTION,
            seed: 0,
            ablation: Ablation::default(),
            exact_masks: false,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: String| Err(Error::Invalid { field, reason });
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(
                "learning_rate",
                format!("{} must be positive", self.learning_rate),
            );
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(
                "temperature",
                format!("{} must be positive", self.temperature),
            );
        }
        if !(self.edge_bonus >= 0.0 && self.edge_bonus.is_finite()) {
            return bad(
                "edge_bonus",
                format!("{} must be non-negative", self.edge_bonus),
            );
        }
        if !(self.budget_fraction > 0.0 && self.budget_fraction <= 1.0) {
            return Err(Error::BadFraction(self.budget_fraction));
        }
        Ok(())
    }
}

/// Classifier weights (`C x 2D`, row-major), bias, label names, and the
/// continuity bonus used by the extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub labels: Vec<String>,
    pub dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub edge_bonus: f64,
}

impl ClassifierParams {
    pub fn zeros(labels: Vec<String>, dim: usize, edge_bonus: f64) -> Self {
        let c = labels.len();
        Self {
            labels,
            dim,
            weight: vec![0.0; c * 2 * dim],
            bias: vec![0.0; c],
            edge_bonus,
        }
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn feature_len(&self) -> usize {
        2 * self.dim
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    fn row(&self, c: usize) -> &[f64] {
        let f = self.feature_len();
        &self.weight[c * f..(c + 1) * f]
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight.len() != self.num_labels() * self.feature_len() {
            return Err(Error::LengthMismatch {
                expected: self.num_labels() * self.feature_len(),
                actual: self.weight.len(),
            });
        }
        if self.bias.len() != self.num_labels() {
            return Err(Error::LengthMismatch {
                expected: self.num_labels(),
                actual: self.bias.len(),
            });
        }
        if self.weight.iter().chain(&self.bias).any(|v| !v.is_finite())
            || !self.edge_bonus.is_finite()
        {
            return Err(Error::NonFinite { field: "params" });
        }
        Ok(())
    }

    fn check_instance(&self, inst: &Instance) -> Result<()> {
        if inst.dim() != self.dim {
            return Err(Error::LengthMismatch {
                expected: self.dim,
                actual: inst.dim(),
            });
        }
        Ok(())
    }
}

/// Sorted, de-duplicated label names of a dataset.
pub fn label_set(dataset: &[Instance]) -> Result<Vec<String>> {
    let mut labels = Vec::new();
    for (index, inst) in dataset.iter().enumerate() {
        match &inst.label {
            Some(l) => labels.push(l.clone()),
            None => return Err(Error::Unlabeled { index }),
        }
    }
    labels.sort();
    labels.dedup();
    Ok(labels)
}

/// Extractor model for an instance under the given settings.
pub fn extractor_model(inst: &Instance, edge_bonus: f64, cfg: &TrainConfig) -> Result<ChainModel> {
    let scores = importance_scores(inst)?;
    let len = scores.len();
    let r = if cfg.ablation.no_continuity {
        0.0
    } else {
        edge_bonus
    };
    let k = if cfg.ablation.no_sparsity {
        len
    } else {
        resolve_fraction(cfg.budget_fraction, len)?
    };
    ChainModel::uniform(scores, r, Budget::Count(k))
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.iter().map(|e| e / total).collect()
}

fn feature(inst: &Instance, mask: &[f64], entity: &[f64], cfg: &TrainConfig) -> Vec<f64> {
    let dim = inst.dim();
    let len = inst.len() as f64;
    let mut f = vec![0.0; 2 * dim];
    for (p, col) in mask.iter().zip(inst.embeddings.columns()) {
        for (fd, x) in f[..dim].iter_mut().zip(col) {
            *fd += p * x / len;
        }
    }
    if !cfg.ablation.no_entities {
        f[dim..].copy_from_slice(entity);
    }
    f
}

fn logits(params: &ClassifierParams, f: &[f64]) -> Vec<f64> {
    (0..params.num_labels())
        .map(|c| dot(params.row(c), f) + params.bias[c])
        .collect()
}

struct ForwardPass {
    entity: Vec<f64>,
    mask: BudgetedSoftMask,
    feature: Vec<f64>,
    probs: Vec<f64>,
}

fn forward_pass(
    inst: &Instance,
    params: &ClassifierParams,
    cfg: &TrainConfig,
) -> Result<ForwardPass> {
    params.check_instance(inst)?;
    let model = extractor_model(inst, params.edge_bonus, cfg)?;
    let mask = BudgetedSoftMask::fit(&model, cfg.temperature)?;
    let entity = inst.entity_vector();
    let feature = feature(inst, &mask.probs, &entity, cfg);
    let probs = softmax(&logits(params, &feature));
    Ok(ForwardPass {
        entity,
        mask,
        feature,
        probs,
    })
}

/// Label distribution from the soft-masked feature.
pub fn forward(inst: &Instance, params: &ClassifierParams, cfg: &TrainConfig) -> Result<Vec<f64>> {
    Ok(forward_pass(inst, params, cfg)?.probs)
}

/// The soft mask used by [`forward`].
pub fn training_mask(
    inst: &Instance,
    params: &ClassifierParams,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    Ok(forward_pass(inst, params, cfg)?.mask.probs)
}

/// Hard feasible mask used at evaluation time: the Lagrangian solution, or
/// the exact one with `exact_masks`.
pub fn hard_mask(
    inst: &Instance,
    params: &ClassifierParams,
    cfg: &TrainConfig,
) -> Result<Vec<bool>> {
    let model = extractor_model(inst, params.edge_bonus, cfg)?;
    let solution = if cfg.exact_masks {
        dp_map(&model)
    } else {
        tune_lambda(&model).solution
    };
    Ok(solution.mask.into_bits())
}

/// Prediction with the hard mask; returns the label index and distribution.
pub fn predict(
    inst: &Instance,
    params: &ClassifierParams,
    cfg: &TrainConfig,
) -> Result<(usize, Vec<f64>)> {
    params.check_instance(inst)?;
    let bits = hard_mask(inst, params, cfg)?;
    let mask: Vec<f64> = bits.iter().map(|&b| b as u8 as f64).collect();
    let f = feature(inst, &mask, &inst.entity_vector(), cfg);
    let probs = softmax(&logits(params, &f));
    let best = argmax(&probs);
    Ok((best, probs))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn gold_index(inst: &Instance, index: usize, params: &ClassifierParams) -> Result<usize> {
    let label = inst.label.as_deref().ok_or(Error::Unlabeled { index })?;
    params.label_index(label).ok_or_else(|| Error::Invalid {
        field: "label",
        reason: format!("instance {index} has unknown label {label:?}"),
    })
}

/// Mean negative log-likelihood over a labelled batch.
pub fn loss(batch: &[Instance], params: &ClassifierParams, cfg: &TrainConfig) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, inst) in batch.iter().enumerate() {
        let y = gold_index(inst, i, params)?;
        let probs = forward(inst, params, cfg)?;
        total += -probs[y].ln();
    }
    Ok(total / batch.len() as f64)
}

/// Gradient of the per-instance loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub edge_bonus: f64,
    /// Token-major `L x D`, matching [`crate::scoring::Embeddings`] storage.
    pub embeddings: Vec<f64>,
}

/// Loss and analytic gradient for one labelled instance.
pub fn loss_and_grad(
    inst: &Instance,
    label: usize,
    params: &ClassifierParams,
    cfg: &TrainConfig,
) -> Result<(f64, Gradient)> {
    let fwd = forward_pass(inst, params, cfg)?;
    let dim = inst.dim();
    let len = inst.len();
    let flen = params.feature_len();
    let loss = -fwd.probs[label].ln();

    let mut dz = fwd.probs.clone();
    dz[label] -= 1.0;
    let mut weight = vec![0.0; params.weight.len()];
    let mut df = vec![0.0; flen];
    for (c, &g) in dz.iter().enumerate() {
        let row = params.row(c);
        for k in 0..flen {
            weight[c * flen + k] = g * fwd.feature[k];
            df[k] += row[k] * g;
        }
    }

    let mut d_emb = vec![0.0; len * dim];
    let mut d_entity = vec![0.0; dim];
    if !cfg.ablation.no_entities {
        d_entity.copy_from_slice(&df[dim..]);
    }
    let df_mask = &df[..dim];
    let mut d_probs = vec![0.0; len];
    for (i, col) in inst.embeddings.columns().enumerate() {
        d_probs[i] = dot(col, df_mask) / len as f64;
        let p = fwd.mask.probs[i];
        for d in 0..dim {
            d_emb[i * dim + d] += p * df_mask[d] / len as f64;
        }
    }

    let mask_grad = fwd.mask.vjp(&d_probs);
    // s_i = <x_i, e>
    for (i, col) in inst.embeddings.columns().enumerate() {
        let ds = mask_grad.unary[i];
        for d in 0..dim {
            d_emb[i * dim + d] += ds * fwd.entity[d];
            d_entity[d] += ds * col[d];
        }
    }
    for span in [inst.e1, inst.e2] {
        let n = span.len() as f64;
        for i in span.indices() {
            for d in 0..dim {
                d_emb[i * dim + d] += d_entity[d] / n;
            }
        }
    }
    let edge_bonus = if cfg.ablation.no_continuity {
        0.0
    } else {
        mask_grad.edge_sum()
    };

    Ok((
        loss,
        Gradient {
            weight,
            bias: dz,
            edge_bonus,
            embeddings: d_emb,
        },
    ))
}

/// Which parameters [`grad_check`] perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradCheckScope {
    /// Every embedding entry, weight, bias, and the edge bonus.
    All,
    /// Classifier weights and bias only; the mask does not move.
    WeightsOnly,
}

/// Maximum relative error between the analytic gradient and central
/// differences. Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check(
    inst: &Instance,
    params: &ClassifierParams,
    cfg: &TrainConfig,
    epsilon: f64,
    scope: GradCheckScope,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Invalid {
            field: "epsilon",
            reason: format!("{epsilon} is outside [1e-7, 1e-3]"),
        });
    }
    let label = gold_index(inst, 0, params)?;
    let (_, grad) = loss_and_grad(inst, label, params, cfg)?;
    let loss_at = |inst: &Instance, params: &ClassifierParams| -> Result<f64> {
        Ok(-forward(inst, params, cfg)?[label].ln())
    };
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
    let mut worst = 0.0f64;

    let mut p = params.clone();
    for k in 0..params.weight.len() {
        p.weight[k] = params.weight[k] + epsilon;
        let up = loss_at(inst, &p)?;
        p.weight[k] = params.weight[k] - epsilon;
        let dn = loss_at(inst, &p)?;
        p.weight[k] = params.weight[k];
        worst = worst.max(rel(grad.weight[k], (up - dn) / (2.0 * epsilon)));
    }
    for c in 0..params.bias.len() {
        p.bias[c] = params.bias[c] + epsilon;
        let up = loss_at(inst, &p)?;
        p.bias[c] = params.bias[c] - epsilon;
        let dn = loss_at(inst, &p)?;
        p.bias[c] = params.bias[c];
        worst = worst.max(rel(grad.bias[c], (up - dn) / (2.0 * epsilon)));
    }
    if scope == GradCheckScope::WeightsOnly {
        return Ok(worst);
    }

    if !cfg.ablation.no_continuity {
        p.edge_bonus = params.edge_bonus + epsilon;
        let up = loss_at(inst, &p)?;
        p.edge_bonus = (params.edge_bonus - epsilon).max(0.0);
        let dn = loss_at(inst, &p)?;
        let step = params.edge_bonus + epsilon - p.edge_bonus;
        worst = worst.max(rel(grad.edge_bonus, (up - dn) / step));
    }

    let dim = inst.dim();
    let mut x = inst.clone();
    for i in 0..inst.len() {
        for d in 0..dim {
            let orig = inst.embeddings.column(i)[d];
            x.embeddings.column_mut(i)[d] = orig + epsilon;
            let up = loss_at(&x, params)?;
            x.embeddings.column_mut(i)[d] = orig - epsilon;
            let dn = loss_at(&x, params)?;
            x.embeddings.column_mut(i)[d] = orig;
            worst = worst.max(rel(
                grad.embeddings[i * dim + d],
                (up - dn) / (2.0 * epsilon),
            ));
        }
    }
    Ok(worst)
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub micro_f1: f64,
}

/// Trains from zero-initialized weights. Deterministic given `cfg.seed`: the
/// only randomness is the per-epoch shuffle, and per-instance gradients are
/// summed in a fixed order.
pub fn train(
    dataset: &[Instance],
    cfg: &TrainConfig,
) -> Result<(ClassifierParams, Vec<EpochStats>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Invalid {
            field: "dataset",
            reason: "training set is empty".into(),
        });
    }
    let dim = dataset[0].dim();
    for inst in dataset {
        inst.validate()?;
        if inst.dim() != dim {
            return Err(Error::LengthMismatch {
                expected: dim,
                actual: inst.dim(),
            });
        }
    }
    let labels = label_set(dataset)?;
    let mut params = ClassifierParams::zeros(labels, dim, cfg.edge_bonus);
    let gold: Vec<usize> = dataset
        .iter()
        .enumerate()
        .map(|(i, inst)| gold_index(inst, i, &params))
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = rng::stream(cfg.seed, "train-shuffle", epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = map_slice(cfg.execution, batch, |_, &i| {
                loss_and_grad(&dataset[i], gold[i], &params, cfg)
            });
            let scale = cfg.learning_rate / batch.len() as f64;
            let mut step_w = vec![0.0; params.weight.len()];
            let mut step_b = vec![0.0; params.bias.len()];
            let mut step_r = 0.0;
            for result in results {
                let (l, g) = result?;
                epoch_loss += l;
                step_w.iter_mut().zip(&g.weight).for_each(|(s, v)| *s += v);
                step_b.iter_mut().zip(&g.bias).for_each(|(s, v)| *s += v);
                step_r += g.edge_bonus;
            }
            params
                .weight
                .iter_mut()
                .zip(&step_w)
                .for_each(|(w, g)| *w -= scale * g);
            params
                .bias
                .iter_mut()
                .zip(&step_b)
                .for_each(|(b, g)| *b -= scale * g);
            if cfg.train_edge_bonus && !cfg.ablation.no_continuity {
                params.edge_bonus = (params.edge_bonus - scale * step_r).max(0.0);
            }
        }
        let predictions = predict_all(dataset, &params, cfg)?;
        history.push(EpochStats {
            epoch,
            loss: epoch_loss / dataset.len() as f64,
            micro_f1: micro_f1(&predictions, &gold)?,
        });
    }
    Ok((params, history))
}

/// Hard-mask predictions for every instance, in input order.
pub fn predict_all(
    dataset: &[Instance],
    params: &ClassifierParams,
    cfg: &TrainConfig,
) -> Result<Vec<usize>> {
    map_slice(cfg.execution, dataset, |_, inst| {
        predict(inst, params, cfg).map(|p| p.0)
    })
    .into_iter()
    .collect()
}
