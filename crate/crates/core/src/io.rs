//! JSON-lines datasets and results files.
//!
//! A dataset file holds an optional header object (recognised by its
//! `"format"` key) followed by one record per line. A record carries either
//! `embeddings` (row-major `D x L`, entry `(d, i)` at `d * L + i`) or
//! precomputed `scores`; spans are inclusive `[start, end]` pairs.
//!
//! ```text
//! {"format":"chainmask-dataset","version":1,"labels":["rel_0","rel_1"]}
//! {"tokens":["a","b","c"],"embeddings":[1,0,0,0,1,0],"e1":[0,0],"e2":[1,1],"label":"rel_0"}
//! {"tokens":["x","y"],"scores":[1.5,-2],"edges":[0.5]}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::SolverTag;
use crate::model::{Budget, ChainModel};
use crate::scoring::{Embeddings, Instance, Span};
use crate::synth::{self, SynthConfig};

pub const FORMAT: &str = "chainmask-dataset";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
}

impl Header {
    pub fn new(labels: Vec<String>) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            labels,
            synth: None,
        }
    }
}

/// One line of a dataset file, as stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
    /// Per-edge continuity bonuses for score records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<f64>>,
    /// Token budget for score records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e1: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e2: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<[usize; 2]>,
}

/// A record with precomputed importance scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRecord {
    pub tokens: Vec<String>,
    pub scores: Vec<f64>,
    pub edges: Option<Vec<f64>>,
    pub budget: Option<usize>,
    pub label: Option<String>,
    pub rationale: Option<Span>,
}

impl ScoredRecord {
    /// Chain model using the record's own edges and budget where present and
    /// the given defaults otherwise.
    pub fn chain_model(&self, edge_bonus: f64, budget_fraction: f64) -> Result<ChainModel> {
        let len = self.scores.len();
        let edge = match &self.edges {
            Some(e) => e.clone(),
            None => vec![edge_bonus; len.saturating_sub(1)],
        };
        let budget = match self.budget {
            Some(k) => Budget::Count(k),
            None => Budget::Fraction(budget_fraction),
        };
        ChainModel::new(self.scores.clone(), edge, budget)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Embedded(Instance),
    Scored(ScoredRecord),
}

impl Entry {
    pub fn len(&self) -> usize {
        match self {
            Entry::Embedded(i) => i.len(),
            Entry::Scored(s) => s.scores.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn label(&self) -> Option<&str> {
        match self {
            Entry::Embedded(i) => i.label.as_deref(),
            Entry::Scored(s) => s.label.as_deref(),
        }
    }

    pub fn rationale(&self) -> Option<Span> {
        match self {
            Entry::Embedded(i) => i.rationale,
            Entry::Scored(s) => s.rationale,
        }
    }

    /// Chain model for the entry: importance scores from embeddings, or the
    /// stored scores.
    pub fn chain_model(&self, edge_bonus: f64, budget_fraction: f64) -> Result<ChainModel> {
        match self {
            Entry::Embedded(i) => crate::scoring::build_chain_model(i, edge_bonus, budget_fraction),
            Entry::Scored(s) => s.chain_model(edge_bonus, budget_fraction),
        }
    }

    fn from_record(r: Record) -> Result<Self> {
        let span = |field: &'static str, v: Option<[usize; 2]>| -> Result<Option<Span>> {
            v.map(|[a, b]| {
                Span::new(a, b).map_err(|_| Error::Invalid {
                    field,
                    reason: format!("start {a} is after end {b}"),
                })
            })
            .transpose()
        };
        let rationale = span("rationale", r.rationale)?;
        let len = r.tokens.len();
        match (r.embeddings, r.scores) {
            (Some(values), None) => {
                if r.edges.is_some() || r.budget.is_some() {
                    return Err(Error::Invalid {
                        field: "edges",
                        reason: "edges and budget apply only to score records".into(),
                    });
                }
                if len == 0 {
                    return Err(Error::Invalid {
                        field: "tokens",
                        reason: "an embedded record needs at least one token".into(),
                    });
                }
                if values.len() % len != 0 {
                    return Err(Error::Invalid {
                        field: "embeddings",
                        reason: format!("{} values do not fill a D x {len} matrix", values.len()),
                    });
                }
                let emb = Embeddings::from_row_major(values.len() / len, len, &values)?;
                let missing = |field| Error::Invalid {
                    field,
                    reason: "required with embeddings".into(),
                };
                let e1 = span("e1", r.e1)?.ok_or_else(|| missing("e1"))?;
                let e2 = span("e2", r.e2)?.ok_or_else(|| missing("e2"))?;
                let mut inst = Instance::new(r.tokens, emb, e1, e2, r.label)?;
                if let Some(s) = rationale {
                    inst = inst.with_rationale(s)?;
                }
                Ok(Entry::Embedded(inst))
            }
            (None, Some(scores)) => {
                if scores.len() != len {
                    return Err(Error::LengthMismatch {
                        expected: len,
                        actual: scores.len(),
                    });
                }
                if let Some(s) = rationale {
                    s.check_bounds(len)?;
                }
                let rec = ScoredRecord {
                    tokens: r.tokens,
                    scores,
                    edges: r.edges,
                    budget: r.budget,
                    label: r.label,
                    rationale,
                };
                // Reject bad models at load time rather than at solve time.
                rec.chain_model(0.0, 1.0)?;
                Ok(Entry::Scored(rec))
            }
            (Some(_), Some(_)) => Err(Error::Invalid {
                field: "scores",
                reason: "a record has either embeddings or scores, not both".into(),
            }),
            (None, None) => Err(Error::Invalid {
                field: "embeddings",
                reason: "a record needs embeddings or scores".into(),
            }),
        }
    }

    fn to_record(&self) -> Record {
        let pair = |s: Span| [s.start, s.end];
        match self {
            Entry::Embedded(i) => Record {
                tokens: i.tokens.clone(),
                embeddings: Some(i.embeddings.to_row_major()),
                scores: None,
                edges: None,
                budget: None,
                e1: Some(pair(i.e1)),
                e2: Some(pair(i.e2)),
                label: i.label.clone(),
                rationale: i.rationale.map(pair),
            },
            Entry::Scored(s) => Record {
                tokens: s.tokens.clone(),
                embeddings: None,
                scores: Some(s.scores.clone()),
                edges: s.edges.clone(),
                budget: s.budget,
                e1: None,
                e2: None,
                label: s.label.clone(),
                rationale: s.rationale.map(pair),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub header: Option<Header>,
    pub entries: Vec<Entry>,
}

impl Dataset {
    pub fn from_instances(header: Option<Header>, instances: Vec<Instance>) -> Self {
        Self {
            header,
            entries: instances.into_iter().map(Entry::Embedded).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// All entries as embedded instances; fails on the first score record.
    pub fn instances(&self) -> Result<Vec<Instance>> {
        self.entries
            .iter()
            .enumerate()
            .map(|(index, e)| match e {
                Entry::Embedded(i) => Ok(i.clone()),
                Entry::Scored(_) => Err(Error::Invalid {
                    field: "embeddings",
                    reason: format!("record {index} has scores only; training needs embeddings"),
                }),
            })
            .collect()
    }
}

fn line_error(line: usize, e: Error) -> Error {
    Error::AtLine {
        line,
        source: Box::new(e),
    }
}

/// Parses a dataset from JSON lines. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn read_dataset<R: Read>(reader: R) -> Result<Dataset> {
    let mut out = Dataset::default();
    let mut first = true;
    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = n + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let parse_err = |e: serde_json::Error| Error::Parse {
            line: lineno,
            message: e.to_string(),
        };
        if value.get("format").is_some() {
            if !first {
                return Err(Error::Parse {
                    line: lineno,
                    message: "header must be the first line".into(),
                });
            }
            let header: Header = serde_json::from_value(value).map_err(parse_err)?;
            if header.format != FORMAT || header.version != VERSION {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!(
                        "unsupported format {} version {}",
                        header.format, header.version
                    ),
                });
            }
            out.header = Some(header);
        } else {
            let record: Record = serde_json::from_value(value).map_err(parse_err)?;
            let entry = Entry::from_record(record).map_err(|e| line_error(lineno, e))?;
            out.entries.push(entry);
        }
        first = false;
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_dataset(file)
}

fn write_json_line<W: Write, T: Serialize>(w: &mut W, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value).map_err(|e| Error::Io(e.to_string()))?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn write_dataset<W: Write>(mut writer: W, dataset: &Dataset) -> Result<()> {
    if let Some(h) = &dataset.header {
        write_json_line(&mut writer, h)?;
    }
    for e in &dataset.entries {
        write_json_line(&mut writer, &e.to_record())?;
    }
    writer.flush()?;
    Ok(())
}

pub fn save_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    write_dataset(BufWriter::new(file), dataset)
}

/// Generates a synthetic corpus with its header (which records the
/// configuration) and writes it to `path`.
pub fn generate_synthetic(cfg: &SynthConfig, path: impl AsRef<Path>) -> Result<Dataset> {
    let instances = synth::generate(cfg)?;
    let mut header = Header::new(cfg.labels());
    header.synth = Some(cfg.clone());
    let dataset = Dataset::from_instances(Some(header), instances);
    save_dataset(path, &dataset)?;
    Ok(dataset)
}

/// One line of a results file. Fields that a command does not produce are
/// omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub index: usize,
    /// Selected tokens as a `0`/`1` string.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feasible: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dual_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duality_gap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marginals: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_partition: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub empirical_freq: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_probs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<String>,
}

impl ResultRecord {
    pub fn new(index: usize) -> Self {
        Self {
            index,
            mask: None,
            score: None,
            feasible: None,
            solver: None,
            lambda: None,
            dual_bound: None,
            duality_gap: None,
            marginals: None,
            log_partition: None,
            samples: None,
            empirical_freq: None,
            predicted: None,
            label_probs: None,
            gold: None,
        }
    }
}

/// Writes records in the order given.
pub fn write_results<W: Write>(mut writer: W, records: &[ResultRecord]) -> Result<()> {
    for r in records {
        write_json_line(&mut writer, r)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_results<R: Read>(reader: R) -> Result<Vec<ResultRecord>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"{"format":"chainmask-dataset","version":1,"labels":["rel_0","rel_1"]}
{"tokens":["a","b","c"],"embeddings":[1,0,0,0,1,0],"e1":[0,0],"e2":[1,1],"label":"rel_0"}

{"tokens":["x","y"],"scores":[1.5,-2],"edges":[0.5],"budget":1}
"#;

    #[test]
    fn parses_header_and_both_record_kinds() {
        let ds = read_dataset(EXAMPLE.as_bytes()).unwrap();
        assert_eq!(ds.header.as_ref().unwrap().labels, ["rel_0", "rel_1"]);
        assert_eq!(ds.len(), 2);
        let Entry::Embedded(inst) = &ds.entries[0] else {
            panic!()
        };
        assert_eq!(inst.dim(), 2);
        assert_eq!(inst.embeddings.column(0), &[1.0, 0.0]);
        assert_eq!(inst.embeddings.column(1), &[0.0, 1.0]);
        let model = ds.entries[1].chain_model(0.0, 1.0).unwrap();
        assert_eq!(model.unary(), &[1.5, -2.0]);
        assert_eq!(model.budget(), 1);
        assert!(ds.instances().is_err());
    }

    #[test]
    fn empty_and_header_only_files() {
        assert!(read_dataset("".as_bytes()).unwrap().is_empty());
        let ds = read_dataset(r#"{"format":"chainmask-dataset","version":1}"#.as_bytes()).unwrap();
        assert!(ds.is_empty() && ds.header.is_some());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad = "{\"tokens\":[\"a\"],\"scores\":[1]}\n{\"tokens\": [\n";
        assert!(matches!(
            read_dataset(bad.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
        let unknown = "{\"tokens\":[\"a\"],\"scores\":[1],\"colour\":1}\n";
        assert!(matches!(
            read_dataset(unknown.as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
        let late_header = "{\"tokens\":[\"a\"],\"scores\":[1]}\n{\"format\":\"chainmask-dataset\",\"version\":1}\n";
        assert!(matches!(
            read_dataset(late_header.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn overlapping_spans_are_named() {
        let line = r#"{"tokens":["a","b","c","d"],"embeddings":[1,1,1,1],"e1":[0,2],"e2":[2,3]}"#;
        let err = read_dataset(line.as_bytes()).unwrap_err();
        assert_eq!(
            err.to_string(),
            "line 1: entity spans [0, 2] and [2, 3] overlap"
        );
    }

    #[test]
    fn record_shape_errors() {
        for line in [
            r#"{"tokens":["a"],"embeddings":[1],"scores":[1],"e1":[0,0],"e2":[0,0]}"#,
            r#"{"tokens":["a"]}"#,
            r#"{"tokens":["a","b"],"embeddings":[1,2,3],"e1":[0,0],"e2":[1,1]}"#,
            r#"{"tokens":["a","b"],"embeddings":[1,2],"e1":[0,0]}"#,
            r#"{"tokens":["a","b"],"scores":[1]}"#,
            r#"{"tokens":["a","b"],"scores":[1,2],"edges":[-1]}"#,
            r#"{"tokens":["a","b"],"scores":[1,2],"budget":3}"#,
            r#"{"tokens":["a","b"],"scores":[1,2],"rationale":[1,0]}"#,
        ] {
            let err = read_dataset(line.as_bytes()).unwrap_err();
            assert!(
                matches!(err, Error::AtLine { line: 1, .. }),
                "{line}: {err}"
            );
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ds = read_dataset(EXAMPLE.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        let again = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(ds, again);
        let mut buf2 = Vec::new();
        write_dataset(&mut buf2, &again).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn synthetic_files_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_instances: 20,
            ..Default::default()
        };
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        let ds = generate_synthetic(&cfg, &a).unwrap();
        generate_synthetic(&cfg, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(load_dataset(&a).unwrap(), ds);

        let empty = dir.path().join("empty.jsonl");
        generate_synthetic(
            &SynthConfig {
                n_instances: 0,
                ..cfg
            },
            &empty,
        )
        .unwrap();
        let text = std::fs::read_to_string(&empty).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("{\"format\":\"chainmask-dataset\""));
    }

    #[test]
    fn results_round_trip() {
        let mut r = ResultRecord::new(3);
        r.mask = Some("0110".into());
        r.score = Some(0.1 + 0.2);
        r.solver = Some(SolverTag::Dp);
        let mut buf = Vec::new();
        write_results(&mut buf, std::slice::from_ref(&r)).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text,
            "{\"index\":3,\"mask\":\"0110\",\"score\":0.30000000000000004,\"solver\":\"dp\"}\n"
        );
        assert_eq!(read_results(buf.as_slice()).unwrap(), vec![r]);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_dataset("/nonexistent/data.jsonl").unwrap_err();
        assert!(matches!(err, Error::Io(_)));
        assert!(!err.is_data_error());
    }
}
