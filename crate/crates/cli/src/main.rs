use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dcgnet::checkpoint::{Checkpoint, RunMeta};
use dcgnet::config::RunConfig;
use dcgnet::dataset::{Dataset, SplitName};
use dcgnet::explain::explain;
use dcgnet::gradcheck::{check_model, op_names, run_op_checks, tiny_fixture, CheckOutcome, FiniteDiff};
use dcgnet::graph::{build_mask, build_ppmi};
use dcgnet::io::{create_dir_all, read_to_string, write_atomic};
use dcgnet::metrics::Metrics;
use dcgnet::synth::{generate, SyntheticSpec};
use dcgnet::train::{build_model, evaluate, train, LogRecord};
use dcgnet::Tensor;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "dcgnet", version, about = "Concept-graph bottleneck classifier: data, training, evaluation and explanations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic concept-annotated dataset.
    Synth(SynthArgs),
    /// Train a model (or one per seed) and save the best-validation checkpoint.
    Train(TrainArgs),
    /// Diagnosis and concept metrics of a checkpoint on one split.
    Eval(EvalArgs),
    /// Per-sample explanation reports.
    Explain(ExplainArgs),
    /// Dump the co-occurrence prior, structural mask and learned adjacency.
    Graph(GraphArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Pretty,
    Records,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

impl From<Split> for SplitName {
    fn from(s: Split) -> Self {
        match s {
            Split::Train => SplitName::Train,
            Split::Val => SplitName::Val,
            Split::Test => SplitName::Test,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Generator spec (TOML); defaults are used when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Run configuration (TOML with [model] and [train] tables).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seeds; one run each plus a mean ± std summary.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    #[arg(long, value_enum, default_value = "pretty")]
    format: Format,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Comma-separated sample ids; every sample of the split when omitted.
    #[arg(long, value_delimiter = ',')]
    ids: Option<Vec<u64>>,
    /// Concepts listed in the contribution and graph panels.
    #[arg(long, default_value_t = 5)]
    top_n: usize,
    #[arg(long, value_enum, default_value = "records")]
    format: Format,
    /// Write reports to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GraphArgs {
    /// Dump the learned adjacency of this checkpoint.
    #[arg(long, required_unless_present = "data", conflicts_with = "data")]
    checkpoint: Option<PathBuf>,
    /// Dump the prior and mask built from this dataset's training split.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run configuration; only the prior smoothing is used.
    #[arg(long, requires = "data")]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Check a single operation ("model" selects the end-to-end check).
    #[arg(long)]
    op: Option<String>,
    /// Negative control: perturb one analytic gradient entry.
    #[arg(long)]
    corrupt: bool,
}

/// A problem with the command's inputs rather than with the computation.
#[derive(Debug)]
struct InputError(String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

fn input_error(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

/// `(exit code, kind)`; 2 means the inputs were at fault.
fn classify(err: &anyhow::Error) -> (u8, &'static str) {
    for cause in err.chain() {
        if cause.downcast_ref::<InputError>().is_some() {
            return (2, "input");
        }
        if let Some(e) = cause.downcast_ref::<dcgnet::Error>() {
            use dcgnet::Error as E;
            let code = match e {
                E::Config(_) | E::Schema(_) | E::Format { .. } | E::Lookup(_) | E::Checkpoint(_) | E::Shape { .. } => 2,
                E::Io { source, .. } if source.kind() != std::io::ErrorKind::Other => 2,
                _ => 1,
            };
            return (code, e.kind());
        }
    }
    (1, "runtime")
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    error: &'a str,
    message: String,
}

fn report_error(kind: &str, message: String) {
    let line = ErrorLine {
        error: kind,
        message: message.replace('\n', " "),
    };
    eprintln!("{}", serde_json::to_string(&line).expect("error line serializes"));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report_error("usage", e.to_string().lines().next().unwrap_or("").to_string());
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Explain(a) => cmd_explain(a),
        Command::Graph(a) => cmd_graph(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            report_error(kind, format!("{e:#}"));
            ExitCode::from(code)
        }
    }
}

fn read_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::read(dir).with_context(|| format!("reading dataset {}", dir.display()))
}

fn load_checkpoint(path: &Path, data: &Dataset) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path, Some(data.dictionary())).with_context(|| format!("loading {}", path.display()))?;
    let shape = ckpt.model.data_shape();
    let m = &data.manifest;
    if ckpt.class_names != m.class_names || shape.num_patches != m.num_patches || shape.patch_dim != m.patch_dim {
        return Err(input_error(format!(
            "{} was trained on a different class set or patch grid than this dataset",
            path.display()
        )));
    }
    Ok(ckpt)
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = read_to_string(path)?;
            SyntheticSpec::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let data = generate(&spec)?;
    data.write(&args.out)?;
    let m = &data.manifest;
    println!(
        "wrote {}: {} classes, {} concepts ({} nodes), {} patches × {}, splits {}/{}/{}, bayes accuracy {:.4}",
        args.out.display(),
        m.num_classes(),
        m.schema.num_concepts(),
        m.schema.num_nodes(),
        m.num_patches,
        m.patch_dim,
        m.splits.train,
        m.splits.val,
        m.splits.test,
        m.bayes_accuracy.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?),
        None => Ok(RunConfig::default()),
    }
}

/// Outcome of one seeded training run.
#[derive(Serialize)]
struct RunSummary {
    seed: u64,
    best_epoch: usize,
    val: Option<Metrics>,
    test: Metrics,
}

fn train_one(data: &Dataset, config: &RunConfig, seed: u64, out: &Path) -> Result<RunSummary> {
    let mut train_cfg = config.train.clone();
    train_cfg.seed = seed;
    let mut model = build_model(data, &config.model, seed)?;
    let mut log = String::new();
    let mut restored = 0;
    let result = train(&mut model, data, &train_cfg, &mut |r: &LogRecord| {
        log.push_str(&serde_json::to_string(r).expect("log record serializes"));
        log.push('\n');
        match r {
            LogRecord::Epoch { epoch, val, best, .. } => {
                eprintln!(
                    "seed {seed} epoch {epoch}: val diag acc {:.4} f1 {:.4}, concept acc {:.4}{}",
                    val.diag_acc,
                    val.diag_f1,
                    val.concept_acc,
                    if *best { " *" } else { "" }
                );
            }
            LogRecord::Abort { restored_epoch, .. } => restored = *restored_epoch,
            LogRecord::Step { .. } => {}
        }
        Ok(())
    });
    create_dir_all(out)?;
    let (epoch, val) = match &result {
        Ok(report) => (report.best_epoch, report.best_val),
        Err(_) => (restored, None),
    };
    let ckpt = Checkpoint {
        model,
        class_names: data.manifest.class_names.clone(),
        meta: RunMeta {
            seed,
            epoch,
            val_diag_f1: val.map(|v| v.diag_f1),
        },
    };
    ckpt.save(&out.join("model.ckpt"))?;
    write_atomic(&out.join("train.jsonl"), log.as_bytes())?;
    let report = result.context("training aborted; the last good checkpoint was saved")?;
    let test = evaluate(&ckpt.model, &data.test)?;
    let summary = RunSummary {
        seed,
        best_epoch: report.best_epoch,
        val: report.best_val,
        test,
    };
    let json = serde_json::to_string_pretty(&summary)? + "\n";
    write_atomic(&out.join("metrics.json"), json.as_bytes())?;
    Ok(summary)
}

/// Mean and sample standard deviation.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn metric_columns(m: &Metrics) -> [(&'static str, f64); 4] {
    [
        ("diag_acc", m.diag_acc),
        ("diag_f1", m.diag_f1),
        ("concept_acc", m.concept_acc),
        ("concept_f1", m.concept_f1),
    ]
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let config = load_run_config(args.config.as_deref())?;
    let data = read_dataset(&args.data)?;
    let Some(seeds) = args.seeds else {
        let seed = args.seed.unwrap_or(config.train.seed);
        let s = train_one(&data, &config, seed, &args.out)?;
        println!("seed {seed}: best epoch {}", s.best_epoch);
        print_metrics(&s.test, Format::Pretty);
        return Ok(());
    };
    if seeds.is_empty() {
        return Err(input_error("--seeds needs at least one seed"));
    }
    let mut runs = Vec::new();
    for &seed in &seeds {
        runs.push(train_one(&data, &config, seed, &args.out.join(format!("seed-{seed}")))?);
    }
    let mut table = String::from("seed  diag_acc  diag_f1  concept_acc  concept_f1\n");
    for r in &runs {
        let cols = metric_columns(&r.test);
        let _ = writeln!(table, "{:<5} {:.4}    {:.4}   {:.4}       {:.4}", r.seed, cols[0].1, cols[1].1, cols[2].1, cols[3].1);
    }
    let mut aggregate = serde_json::Map::new();
    let mut line = String::from("mean±std");
    for (i, (name, _)) in metric_columns(&runs[0].test).iter().enumerate() {
        let xs: Vec<f64> = runs.iter().map(|r| metric_columns(&r.test)[i].1).collect();
        let (mean, std) = mean_std(&xs);
        let _ = write!(line, "  {mean:.4}±{std:.4}");
        aggregate.insert(name.to_string(), serde_json::json!({ "mean": mean, "std": std }));
    }
    table.push_str(&line);
    println!("{table}");
    let json = serde_json::to_string_pretty(&serde_json::json!({ "runs": runs, "aggregate": aggregate }))? + "\n";
    write_atomic(&args.out.join("summary.json"), json.as_bytes())?;
    Ok(())
}

fn print_metrics(m: &Metrics, format: Format) {
    match format {
        Format::Records => println!("{}", serde_json::to_string(m).expect("metrics serialize")),
        Format::Pretty => {
            for (name, v) in metric_columns(m) {
                println!("{name:<12} {v:.4}");
            }
        }
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let data = read_dataset(&args.data)?;
    let ckpt = load_checkpoint(&args.checkpoint, &data)?;
    let metrics = evaluate(&ckpt.model, data.split(args.split.into()))?;
    print_metrics(&metrics, args.format);
    Ok(())
}

fn cmd_explain(args: ExplainArgs) -> Result<()> {
    let data = read_dataset(&args.data)?;
    let ckpt = load_checkpoint(&args.checkpoint, &data)?;
    let split = data.split(args.split.into());
    let samples: Vec<_> = match &args.ids {
        None => split.iter().collect(),
        Some(ids) => ids
            .iter()
            .map(|id| {
                split
                    .iter()
                    .find(|s| s.id == *id)
                    .ok_or_else(|| input_error(format!("no sample with id {id} in the {} split", SplitName::from(args.split).as_str())))
            })
            .collect::<Result<_>>()?,
    };
    let reports = explain(&ckpt.model, &samples, &ckpt.class_names, args.top_n)?;
    let mut out = String::new();
    for r in &reports {
        match args.format {
            Format::Records => {
                out.push_str(&serde_json::to_string(r)?);
                out.push('\n');
            }
            Format::Pretty => out.push_str(&r.pretty()),
        }
    }
    match &args.out {
        Some(path) => write_atomic(path, out.as_bytes())?,
        None => print!("{out}"),
    }
    Ok(())
}

/// Non-zero entries as `i j weight` lines, weights in shortest round-trip form.
fn triplets(t: &Tensor) -> String {
    let n = t.shape()[1];
    let mut s = String::new();
    for (idx, &v) in t.data().iter().enumerate() {
        if v != 0.0 {
            let _ = writeln!(s, "{} {} {v}", idx / n, idx % n);
        }
    }
    s
}

fn cmd_graph(args: GraphArgs) -> Result<()> {
    let mut dumps: Vec<(&str, Tensor)> = Vec::new();
    let dict = if let Some(dir) = &args.data {
        let config = load_run_config(args.config.as_deref())?;
        let data = read_dataset(dir)?;
        let dict = data.dictionary().clone();
        let prior = build_ppmi(&data.train_concept_labels(), &dict, config.model.ppmi_smoothing)?;
        dumps.push(("prior", prior.matrix));
        dumps.push(("mask", build_mask(&dict)));
        dict
    } else {
        let path = args.checkpoint.as_ref().expect("clap requires one source");
        let ckpt = Checkpoint::load(path, None).with_context(|| format!("loading {}", path.display()))?;
        let model = ckpt.model;
        let (_, _, stochastic) = model.adjacency()?;
        dumps.push(("prior", model.graph.prior().clone()));
        dumps.push(("mask", model.graph.mask().clone()));
        dumps.push(("adjacency", stochastic));
        model.dictionary().clone()
    };
    create_dir_all(&args.out)?;
    let mut legend = String::new();
    for id in 0..dict.num_nodes() {
        let (k, m) = dict.node(id)?;
        let c = &dict.concepts()[k];
        let _ = writeln!(legend, "{id}\t{}\t{}", c.name, c.values[m]);
    }
    write_atomic(&args.out.join("nodes.tsv"), legend.as_bytes())?;
    for (name, t) in &dumps {
        let text = triplets(t);
        write_atomic(&args.out.join(format!("{name}.triplets")), text.as_bytes())?;
        println!("{name}: {} non-zero entries over {} nodes", text.lines().count(), dict.num_nodes());
    }
    Ok(())
}

fn print_outcome(o: &CheckOutcome) {
    let status = if o.passed { "ok  " } else { "FAIL" };
    let at = o
        .worst
        .as_ref()
        .map(|w| format!(" at {}[{}] analytic={:e} numeric={:e}", w.input, w.index, w.analytic, w.numeric))
        .unwrap_or_default();
    println!("{status} {:<14} max_rel_err={:.3e} entries={}{at}", o.name, o.max_rel_error, o.entries);
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let cfg = FiniteDiff {
        corrupt: args.corrupt,
        ..FiniteDiff::default()
    };
    let mut outcomes = Vec::new();
    let only_model = args.op.as_deref() == Some("model");
    if let Some(op) = args.op.as_deref().filter(|_| !only_model) {
        if !op_names().contains(&op) {
            return Err(input_error(format!("unknown op {op:?}; expected one of model, {}", op_names().join(", "))));
        }
    }
    if !only_model {
        outcomes.extend(run_op_checks(args.op.as_deref(), cfg)?);
    }
    if args.op.is_none() || only_model {
        let (model, batch, ctx) = tiny_fixture(0)?;
        outcomes.push(check_model(&model, &batch, &ctx, cfg)?);
    }
    for o in &outcomes {
        print_outcome(o);
    }
    let failed: Vec<&CheckOutcome> = outcomes.iter().filter(|o| !o.passed).collect();
    if let Some(first) = failed.first() {
        let w = first.worst.as_ref().expect("a failed check has a worst entry");
        bail!(
            "{} of {} gradient checks failed; worst in {}: {}[{}] relative error {:.3e}",
            failed.len(),
            outcomes.len(),
            first.name,
            w.input,
            w.index,
            first.max_rel_error
        );
    }
    Ok(())
}
