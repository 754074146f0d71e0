use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use engage_core::corpus::{discover_sessions, read_session, ActionVocabulary};
use engage_core::dataset::{read_windows_file, window_corpus, write_windows_file, Dataset};
use engage_core::eval::{
    aggregate, make_folds, read_fold_records, render_report, run_experiment, train_fold, write_fold_records,
    ExperimentConfig,
};
use engage_core::models::Modality;
use engage_core::preprocess::{normalize_and_rescale_trace, WindowSpec};
use engage_core::synth::{generate_corpus, SynthConfig};
use engage_core::timecond::Strategy;
use engage_core::Error;

/// Player-engagement modelling pipeline.
#[derive(Debug, Parser)]
#[command(name = "engage", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus with a planted engagement signal.
    Synth(SynthArgs),
    /// Validate a corpus and list per-session warnings.
    Ingest(IngestArgs),
    /// Cut a corpus into labelled windows.
    Window(WindowArgs),
    /// Train one configuration on one fold and save its checkpoint.
    Train(TrainArgs),
    /// Run the cross-validated sweep and write fold records and the report.
    Evaluate(EvaluateArgs),
    /// Re-render the report from saved fold records.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output corpus directory.
    #[arg(long)]
    out: PathBuf,
    /// `key = value` generator config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    participants: Option<usize>,
    /// Session length in seconds.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    effect: Option<f64>,
    #[arg(long)]
    drift: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    /// Replace existing sessions.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Debug, Args)]
struct WindowArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for `windows.tsv` and `window_summary.tsv`.
    #[arg(long)]
    out: PathBuf,
    /// `key = value` window spec.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    stride: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// Windows file written by `window`.
    #[arg(long)]
    windows: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `key = value` experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed; replaces any seed list in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ExperimentArgs,
    #[arg(long)]
    modality: Option<Modality>,
    #[arg(long)]
    conditioning: Option<Strategy>,
    #[arg(long, default_value_t = 0)]
    repeat: usize,
    #[arg(long, default_value_t = 0)]
    fold: usize,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: ExperimentArgs,
    /// Worker threads (defaults to the available cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Fold records written by `evaluate`.
    #[arg(long)]
    records: PathBuf,
    /// Also write the rendered report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .chain()
                .find_map(|c| c.downcast_ref::<Error>())
                .map(Error::exit_code)
                .unwrap_or(2);
            ExitCode::from(code as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(args) => synth(args),
        Command::Ingest(args) => ingest(args),
        Command::Window(args) => window(args),
        Command::Train(args) => train(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Report(args) => report(args),
    }
}

/// Creates `dir` and refuses to clobber any of `files` unless `force`.
fn prepare_out(dir: &Path, files: &[&str], force: bool) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    if !force {
        if let Some(existing) = files.iter().map(|f| dir.join(f)).find(|p| p.exists()) {
            return Err(Error::Config(format!("{} already exists; pass --force to overwrite", existing.display())).into());
        }
    }
    Ok(())
}

fn write_run_manifest(out: &Path, command: &str, config: Option<&Path>, input: &Path, resolved: &str) -> Result<()> {
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let text = format!(
        "command = {command}\nconfig = {}\ninput = {}\noutput = {}\ntimestamp = {timestamp}\n# resolved configuration\n{resolved}",
        config.map(|c| c.display().to_string()).unwrap_or_else(|| "(defaults)".into()),
        input.display(),
        out.display(),
    );
    let path = out.join("run.manifest");
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_text_config<T>(path: Option<&Path>, parse: impl Fn(&str, &Path) -> engage_core::Result<T>, default: T) -> Result<T> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(parse(&text, p)?)
        }
        None => Ok(default),
    }
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut cfg = read_text_config(args.config.as_deref(), SynthConfig::parse, SynthConfig::default())?;
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.participants {
        cfg.n_participants = v;
    }
    if let Some(v) = args.duration {
        cfg.duration_s = v;
    }
    if let Some(v) = args.effect {
        cfg.effect_strength = v;
    }
    if let Some(v) = args.drift {
        cfg.time_drift = v;
    }
    if let Some(v) = args.noise {
        cfg.noise_sd = v;
    }
    cfg.validate()?;
    let manifests = generate_corpus(&cfg, &args.out, args.force)?;
    write_run_manifest(&args.out, "synth", args.config.as_deref(), Path::new("-"), &cfg.render())?;
    println!("wrote {} sessions to {}", manifests.len(), args.out.display());
    Ok(())
}

fn ingest(args: IngestArgs) -> Result<()> {
    let vocab = ActionVocabulary::standard();
    let manifests = discover_sessions(&args.corpus)?;
    if manifests.is_empty() {
        return Err(Error::Data(format!("no sessions found under {}", args.corpus.display())).into());
    }
    let mut warned = 0;
    for manifest in &manifests {
        let (session, mut warnings) = read_session(manifest, &vocab)?;
        let mut notes: Vec<String> = warnings.drain(..).map(|w| w.to_string()).collect();
        if let Err(e) = normalize_and_rescale_trace(&session.trace, session.duration_s, WindowSpec::default().trace_hz) {
            notes.push(e.to_string());
        }
        println!(
            "{}\t{} s\t{} events\t{} frames\t{} trace points",
            session.participant_id,
            session.duration_s,
            session.events.len(),
            session.features.frame_count(),
            session.trace.len()
        );
        for note in &notes {
            println!("  warning: {note}");
        }
        warned += usize::from(!notes.is_empty());
    }
    println!("{} sessions, {warned} with warnings", manifests.len());
    Ok(())
}

fn window(args: WindowArgs) -> Result<()> {
    let mut spec = read_text_config(args.config.as_deref(), WindowSpec::parse, WindowSpec::default())?;
    if let Some(v) = args.stride {
        spec.stride_s = v;
    }
    if let Some(v) = args.epsilon {
        spec.epsilon = v;
    }
    spec.validate()?;
    prepare_out(&args.out, &["windows.tsv", "window_summary.tsv"], args.force)?;
    let corpus = window_corpus(&args.corpus, &spec, &ActionVocabulary::standard())?;
    write_windows_file(&corpus.file, &args.out.join("windows.tsv"))?;
    let summary = corpus.render_summary();
    fs::write(args.out.join("window_summary.tsv"), &summary).context("writing window summary")?;
    write_run_manifest(&args.out, "window", args.config.as_deref(), &args.corpus, &spec.render())?;
    print!("{summary}");
    Ok(())
}

fn experiment_config(args: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut cfg = read_text_config(args.config.as_deref(), ExperimentConfig::parse, ExperimentConfig::default())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        cfg.seeds = None;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = read_windows_file(path)?;
    Ok(Dataset::load(&file)?)
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = experiment_config(&args.common)?;
    if let Some(m) = args.modality {
        cfg.modalities = vec![m];
    }
    if let Some(s) = args.conditioning {
        cfg.strategies = vec![s];
    }
    let (modality, conditioning) = (cfg.modalities[0], cfg.strategies[0]);
    prepare_out(&args.common.out, &["model.ckpt", "fold_record.tsv"], args.common.force)?;
    let data = load_dataset(&args.common.windows)?;
    let plans = make_folds(&data.participant_ids(), &cfg.repeat_seeds(), cfg.folds, cfg.participants)?;
    let plan = plans
        .iter()
        .find(|p| p.repeat == args.repeat && p.fold == args.fold)
        .ok_or_else(|| Error::Config(format!("no fold {} in repeat {}", args.fold, args.repeat)))?;
    let model_config = cfg.model_config(modality, conditioning, plan.model_seed());
    let (result, model) = train_fold(plan, &model_config, &data, &cfg.train)?;
    model.save_checkpoint(&args.common.out.join("model.ckpt"))?;
    write_fold_records(std::slice::from_ref(&result), &args.common.out.join("fold_record.tsv"))?;
    let resolved = format!(
        "{}# trained\nmodality = {modality}\nconditioning = {conditioning}\nrepeat = {}\nfold = {}\n",
        cfg.render(),
        args.repeat,
        args.fold
    );
    write_run_manifest(&args.common.out, "train", args.common.config.as_deref(), &args.common.windows, &resolved)?;
    println!(
        "{} repeat {} fold {}: test accuracy {:.4} (baseline {:.4}), {} epochs, best epoch {}",
        model_config.label(),
        result.repeat,
        result.fold,
        result.test_accuracy,
        result.baseline_accuracy,
        result.epochs_run,
        result.best_epoch
    );
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let cfg = experiment_config(&args.common)?;
    let jobs = args
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    if jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()).into());
    }
    prepare_out(&args.common.out, &["folds.tsv", "report.txt"], args.common.force)?;
    let data = load_dataset(&args.common.windows)?;
    let records = run_experiment(&data, &cfg, jobs)?;
    write_fold_records(&records, &args.common.out.join("folds.tsv"))?;
    let text = render_report(&aggregate(&records)?);
    fs::write(args.common.out.join("report.txt"), &text).context("writing report")?;
    write_run_manifest(&args.common.out, "evaluate", args.common.config.as_deref(), &args.common.windows, &cfg.render())?;
    print!("{text}");
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let records = read_fold_records(&args.records)?;
    let text = render_report(&aggregate(&records)?);
    if let Some(out) = &args.out {
        fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
    }
    print!("{text}");
    Ok(())
}
