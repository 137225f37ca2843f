use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mopo_core::config::{RunConfig, Split};
use mopo_core::corpus::{generate_world, CorpusError, World};
use mopo_core::curves::{render_svg, Run};
use mopo_core::encoder::EncoderParams;
use mopo_core::eval::MetricReport;
use mopo_core::index::FlatIndex;
use mopo_core::objective::LambdaSchedule;
use mopo_core::pipeline::{evaluate, retrieve_split, save_records, score_records};
use mopo_core::retriever::{BeamConfig, OracleSummarizer};
use mopo_core::trainer::{load_telemetry, save_telemetry, train, Mode, TrainError};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// Marks an error as a configuration problem (exit code 2).
#[derive(Debug)]
struct ConfigProblem(String);

impl std::fmt::Display for ConfigProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigProblem {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigProblem(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "mopo", version, about = "Momentum posterior regularization lab for multi-hop dense retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and train/dev splits.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an encoder and write a run directory.
    Train(TrainArgs),
    /// Encode the corpus and dump a flat index.
    Index {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Beam-retrieve a split and dump ranked chains as JSONL.
    Retrieve {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        beam: BeamArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieve and score a split; writes retrieval.jsonl and metrics.csv.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        beam: BeamArgs,
        /// Output directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate one run per value of a hyperparameter.
    Sweep(SweepArgs),
    /// Render loss and loss-ratio curves from telemetry files.
    Curves {
        #[arg(required = true)]
        telemetry: Vec<PathBuf>,
        #[arg(long, default_value = "curves.svg")]
        out: PathBuf,
        /// Exponential smoothing factor in [0, 1), shared by all curves.
        #[arg(long, default_value_t = 0.0)]
        smoothing: f64,
    },
}

#[derive(Args, Clone)]
struct ConfigArg {
    /// TOML run configuration; every field is optional.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct TrainOverrides {
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Data directory from gen-data; generated from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
}

#[derive(Args)]
struct BeamArgs {
    /// Beam size as B1xB2, e.g. 10x20 or 50x50.
    #[arg(long, value_parser = parse_beam)]
    beam: Option<BeamConfig>,
    /// Build the hop-2 query from the gold first-hop summary.
    #[arg(long)]
    gold_summaries: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepParam {
    Lambda,
    M,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    param: SweepParam,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    /// Run the sweep points concurrently.
    #[arg(long)]
    parallel: bool,
    #[command(flatten)]
    overrides: TrainOverrides,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

fn parse_beam(s: &str) -> Result<BeamConfig, String> {
    s.parse()
}

fn load_config(arg: &ConfigArg) -> anyhow::Result<RunConfig> {
    let cfg = match &arg.config {
        Some(path) => RunConfig::load(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?,
        None => RunConfig::default(),
    };
    Ok(cfg)
}

fn apply_overrides(cfg: &mut RunConfig, o: &TrainOverrides) {
    if let Some(mode) = o.mode {
        if mode != cfg.trainer.mode {
            // a schedule written for another mode does not carry over
            cfg.trainer.lambda = None;
        }
        cfg.trainer.mode = mode;
    }
    if let Some(lr) = o.lr {
        cfg.trainer.lr = lr;
    }
    if let Some(steps) = o.steps {
        cfg.trainer.steps = steps;
    }
    if let Some(seed) = o.seed {
        cfg.trainer.seed = seed;
    }
}

fn validated(cfg: RunConfig) -> anyhow::Result<RunConfig> {
    cfg.validate().map_err(|e| config_err(e.to_string()))?;
    Ok(cfg.resolved())
}

fn corpus_error(e: CorpusError) -> anyhow::Error {
    match e {
        CorpusError::Config(_) | CorpusError::Unsatisfiable { .. } => config_err(e.to_string()),
        other => anyhow!(other),
    }
}

fn train_error(e: TrainError) -> anyhow::Error {
    match e {
        TrainError::Config(_) => config_err(e.to_string()),
        other => anyhow!(other),
    }
}

fn load_world(cfg: &RunConfig, data: Option<&Path>) -> anyhow::Result<World> {
    match data {
        Some(dir) => World::read_dir(dir).with_context(|| format!("reading data from {}", dir.display())),
        None => generate_world(&cfg.world).map_err(corpus_error),
    }
}

fn split_samples(world: &World, split: Split) -> &[mopo_core::corpus::QASample] {
    match split {
        Split::Train => &world.train,
        Split::Dev => &world.dev,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_gen_data(config: &ConfigArg, out: &Path) -> anyhow::Result<()> {
    let cfg = validated(load_config(config)?)?;
    let world = generate_world(&cfg.world).map_err(corpus_error)?;
    world.write_dir(out).map_err(corpus_error)?;
    println!(
        "wrote {} documents, {} train and {} dev questions to {}",
        world.corpus.len(),
        world.train.len(),
        world.dev.len(),
        out.display()
    );
    Ok(())
}

struct RunSummary {
    report: MetricReport,
}

/// Train, checkpoint and evaluate into `out`.
fn run_training(cfg: &RunConfig, world: &World, out: &Path, quiet: bool) -> anyhow::Result<RunSummary> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_file(&out.join("resolved_config.toml"), cfg.to_toml())?;

    let init = EncoderParams::init(world.corpus.vocab.len(), cfg.encoder.hidden, cfg.encoder.out_dim, cfg.encoder.seed)?;
    let train_cfg = cfg.trainer.resolve();
    let outcome = train(&train_cfg, &cfg.objective, &world.train, &world.corpus, init).map_err(train_error)?;

    outcome.theta.save_checkpoint(&out.join("checkpoint.bin"))?;
    if let Some(teacher) = &outcome.teacher {
        teacher.save_checkpoint(&out.join("teacher.bin"))?;
    }
    save_telemetry(&out.join("telemetry.csv"), &outcome.telemetry)?;
    let mut runs = vec![Run {
        name: train_cfg.mode.name().to_string(),
        rows: outcome.telemetry.clone(),
    }];
    if !outcome.teacher_telemetry.is_empty() {
        save_telemetry(&out.join("teacher_telemetry.csv"), &outcome.teacher_telemetry)?;
        runs.push(Run {
            name: "teacher".into(),
            rows: outcome.teacher_telemetry.clone(),
        });
    }
    write_file(&out.join("curves.svg"), render_svg(&runs, 0.0))?;

    let samples = split_samples(world, cfg.eval.split);
    let (records, report) = evaluate(
        samples,
        &world.corpus,
        &outcome.theta,
        &OracleSummarizer,
        &cfg.beam,
        cfg.objective.temperature,
        &cfg.eval.k_list,
    )?;
    save_records(&out.join("retrieval.jsonl"), &records)?;
    report.save_csv(&out.join("metrics.csv"))?;
    if !quiet {
        if let Some(last) = outcome.telemetry.last() {
            println!(
                "{}: {} steps, final total loss {:.4} (ratio {:.3})",
                train_cfg.mode.name(),
                last.step,
                last.total,
                last.ratio
            );
        }
        print!("{report}");
    }
    Ok(RunSummary { report })
}

fn cmd_train(args: &TrainArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.config)?;
    apply_overrides(&mut cfg, &args.overrides);
    let cfg = validated(cfg)?;
    let world = load_world(&cfg, args.data.as_deref())?;
    run_training(&cfg, &world, &args.out, false)?;
    Ok(())
}

fn load_model(model: &ModelArgs) -> anyhow::Result<(RunConfig, World, EncoderParams)> {
    let mut cfg = load_config(&model.config)?;
    if let Some(split) = model.split {
        cfg.eval.split = match split {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
        };
    }
    let cfg = validated(cfg)?;
    let world = load_world(&cfg, model.data.as_deref())?;
    let expected = (world.corpus.vocab.len(), cfg.encoder.hidden, cfg.encoder.out_dim);
    let params = match EncoderParams::load_checkpoint(&model.checkpoint) {
        // the vocabulary fixes |V|; widths come from the checkpoint itself
        Ok(p) if p.vocab_size() == expected.0 => p,
        Ok(_) => EncoderParams::load_checkpoint_expecting(&model.checkpoint, expected)?,
        Err(e) => return Err(anyhow!(e).context(format!("loading {}", model.checkpoint.display()))),
    };
    Ok((cfg, world, params))
}

fn beam_from(cfg: &RunConfig, args: &BeamArgs) -> BeamConfig {
    let mut beam = args.beam.clone().unwrap_or_else(|| cfg.beam.clone());
    beam.gold_summaries = beam.gold_summaries || args.gold_summaries || cfg.beam.gold_summaries;
    beam
}

fn cmd_index(model: &ModelArgs, out: &Path) -> anyhow::Result<()> {
    let (_, world, params) = load_model(model)?;
    let index = FlatIndex::build(world.corpus.docs(), &params)?;
    index.save(out)?;
    println!("indexed {} documents ({} dims) into {}", index.len(), index.dim(), out.display());
    Ok(())
}

fn cmd_retrieve(model: &ModelArgs, beam: &BeamArgs, out: &Path) -> anyhow::Result<()> {
    let (cfg, world, params) = load_model(model)?;
    let beam = beam_from(&cfg, beam);
    let index = FlatIndex::build(world.corpus.docs(), &params)?;
    let samples = split_samples(&world, cfg.eval.split);
    let records = retrieve_split(
        samples,
        &world.corpus,
        &index,
        &params,
        &OracleSummarizer,
        &beam,
        cfg.objective.temperature,
    )?;
    save_records(out, &records)?;
    println!("wrote {} rankings to {}", records.len(), out.display());
    Ok(())
}

fn cmd_eval(model: &ModelArgs, beam: &BeamArgs, out: Option<&Path>) -> anyhow::Result<()> {
    let (cfg, world, params) = load_model(model)?;
    let beam = beam_from(&cfg, beam);
    let samples = split_samples(&world, cfg.eval.split);
    let index = FlatIndex::build(world.corpus.docs(), &params)?;
    let records = retrieve_split(
        samples,
        &world.corpus,
        &index,
        &params,
        &OracleSummarizer,
        &beam,
        cfg.objective.temperature,
    )?;
    let report = score_records(&records, samples, &cfg.eval.k_list);
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => model
            .checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    std::fs::create_dir_all(&dir)?;
    save_records(&dir.join("retrieval.jsonl"), &records)?;
    report.save_csv(&dir.join("metrics.csv"))?;
    if report.empty_rankings > 0 {
        eprintln!("warning: {} queries had empty rankings", report.empty_rankings);
    }
    println!(
        "beam {}x{}{}",
        beam.b1,
        beam.b2,
        if beam.gold_summaries { " (gold first-hop summaries)" } else { "" }
    );
    print!("{report}");
    Ok(())
}

fn sweep_point(base: &RunConfig, param: SweepParam, value: f64) -> RunConfig {
    let mut cfg = base.clone();
    match param {
        SweepParam::Lambda => {
            cfg.trainer.lambda = Some(LambdaSchedule::Fixed { value });
        }
        SweepParam::M => cfg.trainer.momentum = value,
    }
    cfg
}

/// `min over runs of (metric - best) / best`, in per-mille.
fn performance_gap(values: &[f64]) -> f64 {
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(best > 0.0) {
        return 0.0;
    }
    values
        .iter()
        .map(|v| 1000.0 * (v - best) / best)
        .fold(f64::INFINITY, f64::min)
}

fn cmd_sweep(args: &SweepArgs) -> anyhow::Result<()> {
    let mut base = load_config(&args.config)?;
    apply_overrides(&mut base, &args.overrides);
    let base = validated(base)?;
    let points: Vec<RunConfig> = args
        .values
        .iter()
        .map(|&v| validated(sweep_point(&base, args.param, v)))
        .collect::<anyhow::Result<_>>()?;
    let world = load_world(&base, args.data.as_deref())?;
    let name = match args.param {
        SweepParam::Lambda => "lambda",
        SweepParam::M => "m",
    };
    let dirs: Vec<PathBuf> = args.values.iter().map(|v| args.out.join(format!("{name}={v}"))).collect();

    let results: Vec<anyhow::Result<RunSummary>> = if args.parallel {
        let world = &world;
        std::thread::scope(|scope| {
            let handles: Vec<_> = points
                .iter()
                .zip(&dirs)
                .map(|(cfg, dir)| scope.spawn(move || run_training(cfg, world, dir, true)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(anyhow!("sweep worker panicked"))))
                .collect()
        })
    } else {
        points
            .iter()
            .zip(&dirs)
            .map(|(cfg, dir)| run_training(cfg, &world, dir, true))
            .collect()
    };
    let reports: Vec<MetricReport> = results
        .into_iter()
        .map(|r| r.map(|s| s.report))
        .collect::<anyhow::Result<_>>()?;

    let k_list = &base.eval.k_list;
    let mut header = vec!["param".to_string(), "value".to_string()];
    for k in k_list {
        header.push(format!("recall@{k}"));
        header.push(format!("em@{k}"));
    }
    let column = |r: &MetricReport, i: usize| {
        let m = &r.by_k[i / 2];
        if i.is_multiple_of(2) {
            m.recall
        } else {
            m.em
        }
    };
    let n_cols = 2 * k_list.len();
    std::fs::create_dir_all(&args.out)?;
    let path = args.out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(&header)?;
    for (v, r) in args.values.iter().zip(&reports) {
        let mut row = vec![name.to_string(), v.to_string()];
        row.extend((0..n_cols).map(|i| format!("{:.2}", column(r, i))));
        w.write_record(&row)?;
    }
    let mut pg = vec![name.to_string(), "PG_permille".to_string()];
    pg.extend((0..n_cols).map(|i| {
        let col: Vec<f64> = reports.iter().map(|r| column(r, i)).collect();
        format!("{:.2}", performance_gap(&col))
    }));
    w.write_record(&pg)?;
    w.flush()?;
    println!("{}", std::fs::read_to_string(&path)?);
    Ok(())
}

fn run_name(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    match path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str()) {
        Some(dir) if stem == "telemetry" => dir.to_string(),
        Some(dir) => format!("{dir}/{stem}"),
        None => stem.to_string(),
    }
}

fn cmd_curves(files: &[PathBuf], out: &Path, smoothing: f64) -> anyhow::Result<()> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(config_err(format!("smoothing must lie in [0, 1), got {smoothing}")));
    }
    let runs = files
        .iter()
        .map(|f| {
            Ok(Run {
                name: run_name(f),
                rows: load_telemetry(f).with_context(|| format!("reading {}", f.display()))?,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    if runs.iter().any(|r| r.rows.is_empty()) {
        bail!("telemetry file without rows");
    }
    write_file(out, render_svg(&runs, smoothing))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData { config, out } => cmd_gen_data(config, out),
        Command::Train(args) => cmd_train(args),
        Command::Index { model, out } => cmd_index(model, out),
        Command::Retrieve { model, beam, out } => cmd_retrieve(model, beam, out),
        Command::Eval { model, beam, out } => cmd_eval(model, beam, out.as_deref()),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Curves {
            telemetry,
            out,
            smoothing,
        } => cmd_curves(telemetry, out, *smoothing),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigProblem>().is_some() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::from(EXIT_RUNTIME)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gap_is_per_mille_of_best() {
        let gap = performance_gap(&[94.49, 93.85, 94.0]);
        assert!((gap - 1000.0 * (93.85 - 94.49) / 94.49).abs() < 1e-12);
        assert_eq!(performance_gap(&[50.0, 50.0]), 0.0);
    }

    #[test]
    fn run_names() {
        assert_eq!(run_name(Path::new("runs/mopo/telemetry.csv")), "mopo");
        assert_eq!(run_name(Path::new("runs/pr/teacher_telemetry.csv")), "pr/teacher_telemetry");
    }
}
