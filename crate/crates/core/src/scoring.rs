//! Token importance from embeddings and entity positions.
//!
//! Each entity span is mean-pooled into a vector; a token's importance is its
//! inner product with the sum of the two entity vectors.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Budget, ChainModel};

/// Inclusive token range `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start > end {
            return Err(Error::Invalid {
                field: "span",
                reason: format!("start {start} is after end {end}"),
            });
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i <= self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    pub fn indices(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }

    pub fn check_bounds(&self, len: usize) -> Result<()> {
        if self.end >= len {
            return Err(Error::SpanOutOfBounds {
                span: self.to_string(),
                len,
            });
        }
        Ok(())
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.start, self.end)
    }
}

/// A `D x L` embedding matrix stored token-major (one contiguous column per
/// token).
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    dim: usize,
    len: usize,
    data: Vec<f64>,
}

impl Embeddings {
    /// From per-token columns, each of length `D`.
    pub fn from_columns(columns: Vec<Vec<f64>>) -> Result<Self> {
        let len = columns.len();
        let dim = columns.first().map_or(0, Vec::len);
        if let Some(bad) = columns.iter().find(|c| c.len() != dim) {
            return Err(Error::LengthMismatch {
                expected: dim,
                actual: bad.len(),
            });
        }
        let data: Vec<f64> = columns.into_iter().flatten().collect();
        Self::check_finite(&data)?;
        Ok(Self { dim, len, data })
    }

    /// From a row-major `D x L` list: entry `(d, i)` at `d * L + i`.
    pub fn from_row_major(dim: usize, len: usize, values: &[f64]) -> Result<Self> {
        if values.len() != dim * len {
            return Err(Error::LengthMismatch {
                expected: dim * len,
                actual: values.len(),
            });
        }
        Self::check_finite(values)?;
        let mut data = vec![0.0; dim * len];
        for d in 0..dim {
            for i in 0..len {
                data[i * dim + d] = values[d * len + i];
            }
        }
        Ok(Self { dim, len, data })
    }

    fn check_finite(values: &[f64]) -> Result<()> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                field: "embeddings",
            });
        }
        Ok(())
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim * self.len];
        for i in 0..self.len {
            for d in 0..self.dim {
                out[d * self.len + i] = self.data[i * self.dim + d];
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn column(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn column_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1)).take(self.len)
    }

    /// Mean of the columns in `span`.
    pub fn pool(&self, span: Span) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for i in span.indices() {
            for (o, v) in out.iter_mut().zip(self.column(i)) {
                *o += v;
            }
        }
        let n = span.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
}

/// A sentence with token embeddings, two entity spans, and optional label and
/// gold rationale span.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub tokens: Vec<String>,
    pub embeddings: Embeddings,
    pub e1: Span,
    pub e2: Span,
    pub label: Option<String>,
    pub rationale: Option<Span>,
}

impl Instance {
    pub fn new(
        tokens: Vec<String>,
        embeddings: Embeddings,
        e1: Span,
        e2: Span,
        label: Option<String>,
    ) -> Result<Self> {
        let inst = Self {
            tokens,
            embeddings,
            e1,
            e2,
            label,
            rationale: None,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn with_rationale(mut self, span: Span) -> Result<Self> {
        span.check_bounds(self.len())?;
        self.rationale = Some(span);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embeddings.len() != self.tokens.len() {
            return Err(Error::LengthMismatch {
                expected: self.tokens.len(),
                actual: self.embeddings.len(),
            });
        }
        let len = self.len();
        self.e1.check_bounds(len)?;
        self.e2.check_bounds(len)?;
        if self.e1.overlaps(&self.e2) {
            return Err(Error::OverlappingSpans {
                e1: self.e1.to_string(),
                e2: self.e2.to_string(),
            });
        }
        if let Some(r) = self.rationale {
            r.check_bounds(len)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    /// `x_e1 + x_e2`, each entity mean-pooled over its span.
    pub fn entity_vector(&self) -> Vec<f64> {
        let a = self.embeddings.pool(self.e1);
        let b = self.embeddings.pool(self.e2);
        a.iter().zip(&b).map(|(x, y)| x + y).collect()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `s_i = <x_i, x_e1 + x_e2>` for every token.
pub fn importance_scores(inst: &Instance) -> Result<Vec<f64>> {
    inst.validate()?;
    let entity = inst.entity_vector();
    Ok(inst
        .embeddings
        .columns()
        .map(|col| dot(col, &entity))
        .collect())
}

/// Chain model with importance scores, a uniform edge bonus, and
/// `K = ceil(budget_fraction * L)`.
pub fn build_chain_model(
    inst: &Instance,
    edge_bonus: f64,
    budget_fraction: f64,
) -> Result<ChainModel> {
    if edge_bonus.is_nan() || edge_bonus < 0.0 {
        return Err(Error::Invalid {
            field: "edge_bonus",
            reason: format!("{edge_bonus} is negative"),
        });
    }
    let scores = importance_scores(inst)?;
    ChainModel::uniform(scores, edge_bonus, Budget::Fraction(budget_fraction))
}

/// Default budget: 60% of the tokens.
pub const DEFAULT_BUDGET_FRACTION: f64 = 0.6;

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(columns: Vec<Vec<f64>>, e1: (usize, usize), e2: (usize, usize)) -> Instance {
        let tokens = (0..columns.len()).map(|i| format!("t{i}")).collect();
        Instance::new(
            tokens,
            Embeddings::from_columns(columns).unwrap(),
            Span::new(e1.0, e1.1).unwrap(),
            Span::new(e2.0, e2.1).unwrap(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn unit_basis_scores() {
        let i = inst(vec![vec![1.0, 0.0], vec![0.0, 1.0]], (0, 0), (1, 1));
        assert_eq!(importance_scores(&i).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn orthogonal_token_scores_zero() {
        let i = inst(
            vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 0.0, 5.0],
                vec![1.0, 1.0, 0.0],
            ],
            (0, 0),
            (2, 2),
        );
        assert_eq!(importance_scores(&i).unwrap()[1], 0.0);
    }

    #[test]
    fn scaling_is_quadratic() {
        let cols = vec![vec![0.5, -1.0], vec![2.0, 0.25], vec![1.5, 1.0]];
        let base = importance_scores(&inst(cols.clone(), (0, 0), (2, 2))).unwrap();
        let scaled: Vec<Vec<f64>> = cols
            .iter()
            .map(|c| c.iter().map(|v| v * 3.0).collect())
            .collect();
        let out = importance_scores(&inst(scaled, (0, 0), (2, 2))).unwrap();
        for (a, b) in base.iter().zip(&out) {
            assert!((a * 9.0 - b).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_token_entities_are_mean_pooled() {
        let i = inst(
            vec![
                vec![2.0, 0.0],
                vec![0.0, 2.0],
                vec![1.0, 1.0],
                vec![1.0, 0.0],
            ],
            (0, 1),
            (3, 3),
        );
        assert_eq!(i.entity_vector(), vec![2.0, 1.0]);
        assert_eq!(importance_scores(&i).unwrap()[2], 3.0);
    }

    #[test]
    fn budget_from_fraction() {
        let cols = |n: usize| (0..n).map(|i| vec![i as f64, 1.0]).collect::<Vec<_>>();
        let m = build_chain_model(&inst(cols(10), (0, 0), (9, 9)), 0.5, 0.6).unwrap();
        assert_eq!(m.budget(), 6);
        assert_eq!(m.edge(), &[0.5; 9]);
        let m = build_chain_model(&inst(cols(7), (0, 0), (6, 6)), 0.5, 0.6).unwrap();
        assert_eq!(m.budget(), 5);
        let m = build_chain_model(&inst(cols(7), (0, 0), (6, 6)), 0.0, 1.0).unwrap();
        assert_eq!(m.budget(), 7);
        assert!(build_chain_model(&inst(cols(7), (0, 0), (6, 6)), -1.0, 0.6).is_err());
    }

    #[test]
    fn span_validation() {
        let e = Embeddings::from_columns(vec![vec![1.0]; 4]).unwrap();
        let tokens: Vec<String> = (0..4).map(|i| i.to_string()).collect();
        let overlap = Instance::new(
            tokens.clone(),
            e.clone(),
            Span::new(0, 2).unwrap(),
            Span::new(2, 3).unwrap(),
            None,
        );
        assert_eq!(
            overlap,
            Err(Error::OverlappingSpans {
                e1: "[0, 2]".into(),
                e2: "[2, 3]".into()
            })
        );
        let oob = Instance::new(
            tokens,
            e,
            Span::new(0, 0).unwrap(),
            Span::new(3, 4).unwrap(),
            None,
        );
        assert!(matches!(oob, Err(Error::SpanOutOfBounds { .. })));
        assert!(Span::new(3, 2).is_err());
    }

    #[test]
    fn row_major_roundtrip() {
        let e = Embeddings::from_row_major(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(e.column(1), &[2.0, 5.0]);
        assert_eq!(e.to_row_major(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(Embeddings::from_row_major(2, 2, &[1.0]).is_err());
    }
}
