//! Synthetic relation corpus with planted rationales.
//!
//! Embedding axis 0 measures relevance to the entity pair, axes `1..=C` carry
//! one direction per relation label, and the remaining axes hold label-free
//! content. Every sentence is laid out as
//!
//! ```text
//! prefix | E1 | cue span | gap | E2 | suffix
//! ```
//!
//! The cue span is contiguous, points along its label's direction, and is the
//! most relevant part of the sentence. Other positions are filler (weakly
//! relevant, label-free) or, at `distractor_rate`, distractors: irrelevant
//! tokens that point at a different label. Each cue token votes for the true
//! label only with probability `cue_fidelity`, so small budgets that cut into
//! the cue lose evidence, while no budget lets distractors in.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scoring::{Embeddings, Instance, Span};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_instances: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub dim: usize,
    pub num_labels: usize,
    pub cue_min: usize,
    pub cue_max: usize,
    pub distractor_rate: f64,
    pub noise_scale: f64,
    pub seed: u64,
    #[serde(default)]
    pub geometry: Geometry,
}

/// Magnitudes of each token type along the relevance and label axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub entity_relevance: f64,
    pub cue_relevance: f64,
    pub cue_label: f64,
    /// Probability that a cue token points at the true label rather than a
    /// random other one.
    pub cue_fidelity: f64,
    pub filler_relevance: f64,
    pub filler_content: f64,
    pub distractor_relevance: f64,
    pub distractor_label: f64,
    pub max_gap: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            entity_relevance: 1.5,
            cue_relevance: 2.25,
            cue_label: 1.0,
            cue_fidelity: 0.75,
            filler_relevance: 0.4,
            filler_content: 0.3,
            distractor_relevance: 0.0,
            distractor_label: 1.0,
            max_gap: 2,
        }
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_instances: 2000,
            min_len: 12,
            max_len: 30,
            dim: 16,
            num_labels: 4,
            cue_min: 4,
            cue_max: 8,
            distractor_rate: 0.2,
            noise_scale: 0.1,
            seed: 0,
            geometry: Geometry::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: String| Err(Error::Invalid { field, reason });
        if self.num_labels == 0 {
            return bad("num_labels", "must be positive".into());
        }
        if self.dim < self.num_labels + 1 {
            return bad(
                "dim",
                format!(
                    "{} leaves no room for {} label axes",
                    self.dim, self.num_labels
                ),
            );
        }
        if self.cue_min == 0 || self.cue_min > self.cue_max {
            return bad(
                "cue_min",
                format!(
                    "cue length range {}..={} is empty",
                    self.cue_min, self.cue_max
                ),
            );
        }
        if self.min_len > self.max_len {
            return bad(
                "min_len",
                format!("length range {}..={} is empty", self.min_len, self.max_len),
            );
        }
        // Two single-token entities, the longest cue, and the widest gap.
        let needed = 2 + self.cue_max + self.geometry.max_gap;
        if self.min_len < needed {
            return bad(
                "min_len",
                format!("{} cannot fit a layout of {needed} tokens", self.min_len),
            );
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return bad(
                "distractor_rate",
                format!("{} is outside [0, 1]", self.distractor_rate),
            );
        }
        if !(0.0..=1.0).contains(&self.geometry.cue_fidelity) {
            return bad(
                "cue_fidelity",
                format!("{} is outside [0, 1]", self.geometry.cue_fidelity),
            );
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad(
                "noise_scale",
                format!("{} must be non-negative", self.noise_scale),
            );
        }
        Ok(())
    }

    pub fn label_name(c: usize) -> String {
        format!("rel_{c}")
    }

    pub fn labels(&self) -> Vec<String> {
        (0..self.num_labels).map(Self::label_name).collect()
    }
}

/// Generates the corpus. Instance `i` draws only from its own random stream.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<Instance>> {
    cfg.validate()?;
    (0..cfg.n_instances)
        .map(|i| generate_one(cfg, &mut rng::stream(cfg.seed, "synth-instance", i as u64)))
        .collect()
}

#[derive(Clone, Copy)]
enum Kind {
    Entity,
    Cue,
    Filler,
    Distractor,
}

fn generate_one(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let g = &cfg.geometry;
    let len = rng.random_range(cfg.min_len..=cfg.max_len);
    let label = rng.random_range(0..cfg.num_labels);
    let cue_len = rng.random_range(cfg.cue_min..=cfg.cue_max);
    let gap = rng.random_range(0..=g.max_gap);
    let free = len - 2 - cue_len - gap;
    // Entities take one or two tokens when room allows.
    let e1_len = if free >= 2 {
        rng.random_range(1..=2)
    } else {
        1
    };
    let e2_len = if free > e1_len {
        rng.random_range(1..=2)
    } else {
        1
    };
    let used = e1_len + e2_len + cue_len + gap;
    let prefix = rng.random_range(0..=len - used);

    let e1 = Span::new(prefix, prefix + e1_len - 1)?;
    let cue = Span::new(e1.end + 1, e1.end + cue_len)?;
    let e2_start = cue.end + 1 + gap;
    let e2 = Span::new(e2_start, e2_start + e2_len - 1)?;

    let kinds: Vec<Kind> = (0..len)
        .map(|i| {
            if e1.contains(i) || e2.contains(i) {
                Kind::Entity
            } else if cue.contains(i) {
                Kind::Cue
            } else if rng.random_bool(cfg.distractor_rate) {
                Kind::Distractor
            } else {
                Kind::Filler
            }
        })
        .collect();

    let noise = Normal::new(0.0, cfg.noise_scale.max(f64::MIN_POSITIVE)).expect("valid normal");
    let content = Normal::new(0.0, g.filler_content.max(f64::MIN_POSITIVE)).expect("valid normal");
    let label_axis = |c: usize| 1 + c;
    let other_label = |rng: &mut ChaCha8Rng| {
        if cfg.num_labels == 1 {
            label
        } else {
            (label + rng.random_range(1..cfg.num_labels)) % cfg.num_labels
        }
    };

    let mut tokens = Vec::with_capacity(len);
    let mut columns = Vec::with_capacity(len);
    for (i, kind) in kinds.iter().enumerate() {
        let mut x = vec![0.0; cfg.dim];
        let name = match kind {
            Kind::Entity => {
                x[0] = g.entity_relevance;
                if e1.contains(i) {
                    "ENT1"
                } else {
                    "ENT2"
                }
            }
            Kind::Cue => {
                x[0] = g.cue_relevance;
                let vote = if rng.random_bool(g.cue_fidelity) {
                    label
                } else {
                    other_label(rng)
                };
                x[label_axis(vote)] += g.cue_label;
                "cue"
            }
            Kind::Filler => {
                x[0] = g.filler_relevance;
                if g.filler_content > 0.0 {
                    for v in x.iter_mut().skip(cfg.num_labels + 1) {
                        *v += content.sample(rng);
                    }
                }
                "w"
            }
            Kind::Distractor => {
                x[0] = g.distractor_relevance;
                let other = other_label(rng);
                x[label_axis(other)] += g.distractor_label;
                "dis"
            }
        };
        if cfg.noise_scale > 0.0 {
            x.iter_mut().for_each(|v| *v += noise.sample(rng));
        }
        tokens.push(format!("{name}{i}"));
        columns.push(x);
    }

    Instance::new(
        tokens,
        Embeddings::from_columns(columns)?,
        e1,
        e2,
        Some(SynthConfig::label_name(label)),
    )?
    .with_rationale(cue)
}
