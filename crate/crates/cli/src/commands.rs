use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use chainmask::classifier::{self, EpochStats};
use chainmask::io::{self, Dataset, Entry, ResultRecord};
use chainmask::metrics::{self, SweepRow};
use chainmask::par::map_slice;
use chainmask::relax::{perturb_and_map_sample, tune_lambda, SampleOptions};
use chainmask::{
    chain_marginals, dp_map, rng, Ablation, Budget, ChainModel, ClassifierParams, Error, Execution,
    Mask, RelaxConfig, SynthConfig, TrainConfig,
};

pub enum CliError {
    Usage(String),
    Data(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_data_error() {
            CliError::Data(e)
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

#[derive(Parser, Debug)]
#[command(
    name = "chainmask",
    version,
    about = "Budgeted, continuity-aware token selection"
)]
pub struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Token budget as a fraction of sentence length, rounded up.
    #[arg(long, global = true, default_value_t = 0.6)]
    budget_fraction: f64,
    /// Token budget as an absolute count; overrides --budget-fraction.
    #[arg(long, global = true)]
    budget: Option<usize>,
    /// Continuity bonus between adjacent selected tokens [default: 0.5].
    #[arg(long, global = true)]
    edge_bonus: Option<f64>,
    /// Multiplier on the selected-token count for marginals and sampling.
    #[arg(long, global = true, default_value_t = 0.0)]
    lambda: f64,
    #[arg(long, global = true, default_value_t = 1.0)]
    temperature: f64,
    /// Remove a component; may be repeated.
    #[arg(long, global = true, value_enum)]
    ablation: Vec<AblationFlag>,
    /// Exact budgeted MAP (default for solve).
    #[arg(long, global = true, conflicts_with = "relaxed")]
    exact: bool,
    /// Lagrangian relaxation with a tuned multiplier.
    #[arg(long, global = true)]
    relaxed: bool,
    /// Structured results file.
    #[arg(short, long, global = true)]
    output: Option<PathBuf>,
    /// Process instances on one thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[allow(clippy::enum_variant_names)]
enum AblationFlag {
    NoContinuity,
    NoSparsity,
    NoEntities,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Best budgeted mask per instance.
    Solve { input: PathBuf },
    /// Exact per-token selection marginals and log-partition.
    Marginals { input: PathBuf },
    /// Perturb-and-MAP samples and their per-token frequencies.
    Sample {
        input: PathBuf,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 1.0)]
        noise_scale: f64,
        /// Include every sampled mask in the results file.
        #[arg(long)]
        keep_samples: bool,
    },
    /// Feasible mask, multiplier, and duality gap from the relaxation.
    TuneLambda { input: PathBuf },
    /// Train the relation classifier; writes the model file.
    Train {
        input: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Evaluate a trained model.
    Eval {
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Train and evaluate across budget fractions.
    SweepK {
        input: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6,0.8,1.0")]
        fractions: Vec<f64>,
        /// Trailing share of the dataset held out for evaluation.
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Write a synthetic corpus to --output.
    Gen(GenArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 2.0)]
    learning_rate: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Learn the continuity bonus as well.
    #[arg(long)]
    train_edge_bonus: bool,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 2000)]
    n_instances: usize,
    #[arg(long, default_value_t = 12)]
    min_len: usize,
    #[arg(long, default_value_t = 30)]
    max_len: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    labels: usize,
    #[arg(long, default_value_t = 4)]
    cue_min: usize,
    #[arg(long, default_value_t = 8)]
    cue_max: usize,
    #[arg(long, default_value_t = 0.2)]
    distractor_rate: f64,
    #[arg(long, default_value_t = 0.1)]
    noise_scale: f64,
}

const DEFAULT_EDGE_BONUS: f64 = 0.5;

/// Contents of the file written by `train` and read by `eval`.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    params: ClassifierParams,
    config: TrainConfig,
    history: Vec<EpochStats>,
}

impl Global {
    fn execution(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::default()
        }
    }

    fn has(&self, flag: AblationFlag) -> bool {
        self.ablation.contains(&flag)
    }

    fn edge_bonus(&self) -> CliResult<f64> {
        let r = self.edge_bonus.unwrap_or(DEFAULT_EDGE_BONUS);
        if !(r >= 0.0 && r.is_finite()) {
            return Err(usage(format!(
                "--edge-bonus must be a non-negative number, got {r}"
            )));
        }
        Ok(r)
    }

    fn fraction(&self) -> CliResult<f64> {
        let f = self.budget_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(usage(format!(
                "--budget-fraction must lie in (0, 1], got {f}"
            )));
        }
        Ok(f)
    }

    fn relax_config(&self) -> CliResult<RelaxConfig> {
        let lambda = if self.has(AblationFlag::NoSparsity) {
            0.0
        } else {
            self.lambda
        };
        RelaxConfig::new(lambda, self.temperature, self.seed).map_err(usage)
    }

    /// Chain model for an entry with budget override and ablations applied.
    fn model(&self, entry: &Entry) -> chainmask::Result<ChainModel> {
        let edge = self.edge_bonus.unwrap_or(DEFAULT_EDGE_BONUS);
        let mut model = entry.chain_model(edge, self.budget_fraction)?;
        if let Some(k) = self.budget {
            model = model.with_budget(Budget::Count(k))?;
        }
        if self.has(AblationFlag::NoContinuity) {
            let zeros = vec![0.0; model.edge().len()];
            model = ChainModel::new(model.unary().to_vec(), zeros, Budget::Count(model.budget()))?;
        }
        if self.has(AblationFlag::NoSparsity) {
            model = model.with_budget(Budget::Count(model.len()))?;
        }
        Ok(model)
    }

    fn models(&self, dataset: &Dataset) -> CliResult<Vec<ChainModel>> {
        self.edge_bonus()?;
        self.fraction()?;
        let models: chainmask::Result<Vec<_>> =
            map_slice(self.execution(), &dataset.entries, |i, e| {
                self.model(e).map_err(|err| Error::AtLine {
                    line: i + 1,
                    source: Box::new(err),
                })
            })
            .into_iter()
            .collect();
        Ok(models?)
    }

    fn ablation(&self) -> Ablation {
        Ablation {
            no_continuity: self.has(AblationFlag::NoContinuity),
            no_sparsity: self.has(AblationFlag::NoSparsity),
            no_entities: self.has(AblationFlag::NoEntities),
        }
    }

    fn train_config(&self, args: Option<&TrainArgs>) -> CliResult<TrainConfig> {
        let mut cfg = TrainConfig {
            temperature: self.temperature,
            edge_bonus: self.edge_bonus()?,
            budget_fraction: self.fraction()?,
            seed: self.seed,
            ablation: self.ablation(),
            exact_masks: self.exact,
            execution: self.execution(),
            ..TrainConfig::default()
        };
        if let Some(a) = args {
            cfg.epochs = a.epochs;
            cfg.learning_rate = a.learning_rate;
            cfg.batch_size = a.batch_size;
            cfg.train_edge_bonus = a.train_edge_bonus;
        }
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }
}

fn mask_string(bits: &[bool]) -> String {
    Mask::new(bits.to_vec()).to_string()
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| usage(format!("cannot write {}: {e}", path.display())))
}

fn write_records(path: Option<&Path>, records: &[ResultRecord]) -> CliResult<()> {
    if let Some(p) = path {
        io::write_results(create(p)?, records)?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> CliResult<()> {
    if let Some(p) = path {
        let mut w = create(p)?;
        serde_json::to_writer_pretty(&mut w, value).map_err(usage)?;
        w.write_all(b"\n").map_err(usage)?;
        w.flush().map_err(usage)?;
    }
    Ok(())
}

fn load(path: &Path) -> CliResult<Dataset> {
    Ok(io::load_dataset(path)?)
}

fn fmt_probs(p: &[f64]) -> String {
    p.iter()
        .map(|x| format!("{x:.4}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn run(cli: Cli) -> CliResult<()> {
    let g = &cli.global;
    let out = g.output.as_deref();
    match &cli.command {
        Command::Solve { input } => solve(g, &load(input)?, out),
        Command::TuneLambda { input } => {
            let dataset = load(input)?;
            relaxed(g, &dataset, out)
        }
        Command::Marginals { input } => marginals(g, &load(input)?, out),
        Command::Sample {
            input,
            samples,
            noise_scale,
            keep_samples,
        } => sample(g, &load(input)?, *samples, *noise_scale, *keep_samples, out),
        Command::Train { input, train } => {
            let cfg = g.train_config(Some(train))?;
            let instances = load(input)?.instances()?;
            let (params, history) = classifier::train(&instances, &cfg)?;
            for h in &history {
                println!(
                    "epoch {:>3}  loss {:.6}  train_micro_f1 {:.4}",
                    h.epoch, h.loss, h.micro_f1
                );
            }
            write_json(
                out,
                &ModelFile {
                    params,
                    config: cfg,
                    history,
                },
            )
        }
        Command::Eval { input, model } => eval(g, &load(input)?, model, out),
        Command::SweepK {
            input,
            fractions,
            test_fraction,
            train,
        } => {
            let cfg = g.train_config(Some(train))?;
            if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                return Err(usage(format!(
                    "--test-fraction must lie in (0, 1), got {test_fraction}"
                )));
            }
            if let Some(f) = fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
                return Err(usage(format!("budget fraction {f} is outside (0, 1]")));
            }
            let instances = load(input)?.instances()?;
            let n_test = ((instances.len() as f64) * test_fraction).round() as usize;
            let (train_set, test_set) = instances.split_at(instances.len() - n_test);
            if train_set.is_empty() || test_set.is_empty() {
                return Err(usage("dataset too small to split into train and test sets"));
            }
            let rows = metrics::k_sweep(train_set, test_set, fractions, &cfg)?;
            println!("fraction  micro_f1  selected_rate  segments  rationale_recall");
            for r in &rows {
                let recall = r
                    .rationale_recall
                    .map_or("na".into(), |x| format!("{x:.4}"));
                println!(
                    "{:>8.2}  {:>8.4}  {:>13.4}  {:>8.4}  {:>16}",
                    r.fraction, r.micro_f1, r.mean_selected_rate, r.mean_segment_count, recall
                );
            }
            write_json::<Vec<SweepRow>>(out, &rows)
        }
        Command::Gen(a) => {
            let path = out.ok_or_else(|| usage("gen needs --output"))?;
            let cfg = SynthConfig {
                n_instances: a.n_instances,
                min_len: a.min_len,
                max_len: a.max_len,
                dim: a.dim,
                num_labels: a.labels,
                cue_min: a.cue_min,
                cue_max: a.cue_max,
                distractor_rate: a.distractor_rate,
                noise_scale: a.noise_scale,
                seed: g.seed,
                ..SynthConfig::default()
            };
            cfg.validate().map_err(usage)?;
            let dataset = io::generate_synthetic(&cfg, path)?;
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for e in &dataset.entries {
                *counts.entry(e.label().unwrap_or("")).or_default() += 1;
            }
            println!("instances={}", dataset.len());
            for (label, n) in counts {
                println!("label {label}={n}");
            }
            Ok(())
        }
    }
}

fn solve(g: &Global, dataset: &Dataset, out: Option<&Path>) -> CliResult<()> {
    if g.relaxed {
        return relaxed(g, dataset, out);
    }
    let models = g.models(dataset)?;
    let solutions = map_slice(g.execution(), &models, |_, m| dp_map(m));
    let records: Vec<ResultRecord> = solutions
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut r = ResultRecord::new(i);
            r.mask = Some(mask_string(s.bits()));
            r.score = Some(s.score);
            r.feasible = Some(true);
            r.solver = Some(s.solver);
            r
        })
        .collect();
    for r in &records {
        println!(
            "{}  mask {}  score {}",
            r.index,
            r.mask.as_deref().unwrap_or(""),
            r.score.unwrap_or(0.0)
        );
    }
    write_records(out, &records)
}

fn relaxed(g: &Global, dataset: &Dataset, out: Option<&Path>) -> CliResult<()> {
    let models = g.models(dataset)?;
    let fits = map_slice(g.execution(), &models, |_, m| tune_lambda(m));
    let records: Vec<ResultRecord> = fits
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mut r = ResultRecord::new(i);
            r.mask = Some(mask_string(f.solution.bits()));
            r.score = Some(f.solution.score);
            r.feasible = Some(true);
            r.solver = Some(f.solution.solver);
            r.lambda = Some(f.lambda);
            r.dual_bound = Some(f.dual_bound);
            r.duality_gap = Some(f.duality_gap);
            r
        })
        .collect();
    for r in &records {
        println!(
            "{}  mask {}  score {}  lambda {}  gap {}",
            r.index,
            r.mask.as_deref().unwrap_or(""),
            r.score.unwrap_or(0.0),
            r.lambda.unwrap_or(0.0),
            r.duality_gap.unwrap_or(0.0)
        );
    }
    write_records(out, &records)
}

fn marginals(g: &Global, dataset: &Dataset, out: Option<&Path>) -> CliResult<()> {
    let cfg = g.relax_config()?;
    let models = g.models(dataset)?;
    let results: chainmask::Result<Vec<_>> =
        map_slice(g.execution(), &models, |_, m| chain_marginals(m, &cfg))
            .into_iter()
            .collect();
    let records: Vec<ResultRecord> = results?
        .into_iter()
        .enumerate()
        .map(|(i, m)| {
            let mut r = ResultRecord::new(i);
            r.log_partition = Some(m.log_z);
            r.marginals = Some(m.probs);
            r
        })
        .collect();
    for r in &records {
        println!(
            "{}  log_z {:.6}  p {}",
            r.index,
            r.log_partition.unwrap_or(0.0),
            fmt_probs(r.marginals.as_deref().unwrap_or(&[]))
        );
    }
    write_records(out, &records)
}

fn sample(
    g: &Global,
    dataset: &Dataset,
    n: usize,
    noise_scale: f64,
    keep: bool,
    out: Option<&Path>,
) -> CliResult<()> {
    let base = g.relax_config()?;
    if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
        return Err(usage(format!(
            "--noise-scale must be non-negative, got {noise_scale}"
        )));
    }
    let models = g.models(dataset)?;
    // Instances run in parallel; the samples of one instance run sequentially.
    let opts = SampleOptions {
        noise_scale,
        execution: Execution::Sequential,
    };
    let batches: chainmask::Result<Vec<_>> = map_slice(g.execution(), &models, |i, m| {
        let cfg = RelaxConfig {
            seed: rng::stream_seed(base.seed, "instance", i as u64),
            ..base
        };
        perturb_and_map_sample(m, &cfg, n, opts)
    })
    .into_iter()
    .collect();
    let records: Vec<ResultRecord> = batches?
        .into_iter()
        .enumerate()
        .map(|(i, b)| {
            let mut r = ResultRecord::new(i);
            r.empirical_freq = Some(b.empirical_freq);
            if keep {
                r.samples = Some(b.masks.iter().map(|m| mask_string(m)).collect());
            }
            r
        })
        .collect();
    for r in &records {
        println!(
            "{}  freq {}",
            r.index,
            fmt_probs(r.empirical_freq.as_deref().unwrap_or(&[]))
        );
    }
    write_records(out, &records)
}

fn eval(g: &Global, dataset: &Dataset, model_path: &Path, out: Option<&Path>) -> CliResult<()> {
    let text = std::fs::read_to_string(model_path)
        .map_err(|e| usage(format!("cannot read {}: {e}", model_path.display())))?;
    let model: ModelFile = serde_json::from_str(&text).map_err(|e| {
        CliError::Data(Error::Parse {
            line: e.line(),
            message: format!("{}: {e}", model_path.display()),
        })
    })?;
    let mut params = model.params;
    params.validate()?;
    if g.edge_bonus.is_some() {
        params.edge_bonus = g.edge_bonus()?;
    }
    let cfg = g.train_config(None)?;
    let instances = dataset.instances()?;

    let labelled = !instances.is_empty() && instances.iter().all(|i| i.label.is_some());
    let predictions: chainmask::Result<Vec<_>> = map_slice(
        cfg.execution,
        &instances,
        |_, inst| -> chainmask::Result<_> {
            let mask = classifier::hard_mask(inst, &params, &cfg)?;
            let (best, probs) = classifier::predict(inst, &params, &cfg)?;
            Ok((mask, best, probs))
        },
    )
    .into_iter()
    .collect();
    let predictions = predictions?;

    let f1 = if labelled {
        let gold: Vec<Option<usize>> = instances
            .iter()
            .map(|i| i.label.as_deref().and_then(|l| params.label_index(l)))
            .collect();
        let pred: Vec<Option<usize>> = predictions.iter().map(|p| Some(p.1)).collect();
        Some(metrics::micro_f1(&pred, &gold)?)
    } else {
        None
    };
    let pairs: Vec<_> = predictions
        .iter()
        .zip(&instances)
        .map(|(p, inst)| (p.0.clone(), inst.rationale))
        .collect();
    let report = metrics::EvalReport::from_masks(&pairs, f1)?;
    print!("{}", report.to_kv_text());

    let records: Vec<ResultRecord> = predictions
        .into_iter()
        .zip(&instances)
        .enumerate()
        .map(|(i, ((mask, best, probs), inst))| {
            let mut r = ResultRecord::new(i);
            r.mask = Some(mask_string(&mask));
            r.predicted = Some(params.labels[best].clone());
            r.label_probs = Some(probs);
            r.gold = inst.label.clone();
            r
        })
        .collect();
    write_records(out, &records)
}
