use std::path::{Path, PathBuf};
use std::process::ExitCode;

use biasaudit::corpus::{
    self, assign_splits, compute_stats, compute_weights, dedup_test_against_train, read_instances, write_instances,
    write_jsonl, IngestOptions, InputFormat, Instance, Split, UnmappedPolicy,
};
use biasaudit::disparity::{disparity_report, FnRule, FprBase};
use biasaudit::embedstore::EmbeddingServiceConfig;
use biasaudit::harness::{
    self, evaluation_set, render, run_audit, run_detector, score_predictions, write_reports, CorpusSummary,
    DetectorEntry, EmbeddingSettings, EvalReport, HarnessError, PreparedCorpus, Provenance, ReportFormat, RunConfig,
    SeedBlock,
};
use biasaudit::promptdetect::{read_predictions, PoolSelector, Strategy};
use biasaudit::taxonomy::RuleSet;
use biasaudit::Axis;
use clap::{Args, Parser, Subcommand, ValueEnum};

type Result<T> = std::result::Result<T, HarnessError>;

/// Audit social-bias detectors for per-axis and multi-axis error disparities.
#[derive(Parser)]
#[command(name = "biasaudit", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stage, overriding the config's seed block.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Harmonize a raw dataset into the canonical instance schema.
    Ingest(IngestArgs),
    /// Assign train/dev/test splits.
    Split(SplitArgs),
    /// Remove test instances that nearly duplicate train/dev instances.
    Dedup(DedupArgs),
    /// Label counts and co-occurrences.
    Stats(StatsArgs),
    /// Loss weights from the training split.
    Weights(InstancesArg),
    /// Query a chat detector for every evaluation instance.
    Detect(DetectArgs),
    /// Score prediction files against instances.
    Score(ScoreArgs),
    /// Per-axis error rates and disparity gaps of one prediction file.
    Disparity(DisparityArgs),
    /// Re-render a machine-readable report.
    Report(ReportArgs),
    /// Run the configured pipeline end to end.
    Audit(AuditArgs),
}

#[derive(Args)]
struct InstancesArg {
    /// Canonical instances file.
    #[arg(long)]
    instances: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "canonical-jsonl")]
    format: InputFormat,
    /// Dataset tag recorded on every instance and used for missing ids.
    #[arg(long)]
    dataset: String,
    /// Harmonization rules (JSONL); the bundled rules by default.
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "skip")]
    on_unmapped: UnmappedArg,
    #[arg(long, default_value_t = ',')]
    delimiter: char,
}

#[derive(Clone, Copy, ValueEnum)]
enum UnmappedArg {
    Skip,
    Abort,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    instances: PathBuf,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    dev_fraction: Option<f64>,
}

#[derive(Args)]
struct EmbedArgs {
    /// Embedding service URL.
    #[arg(long)]
    embed_endpoint: Option<String>,
    #[arg(long)]
    embed_model: Option<String>,
    /// Vector cache file.
    #[arg(long)]
    embed_cache: Option<PathBuf>,
}

#[derive(Args)]
struct DedupArgs {
    #[arg(long)]
    instances: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
    #[command(flatten)]
    embed: EmbedArgs,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    instances: PathBuf,
    /// Restrict to one split.
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

#[derive(Args, Default)]
struct DetectorFlags {
    /// Few-shot examples per prompt.
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    /// Chat-completion URL.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    policy_file: Option<PathBuf>,
    #[arg(long)]
    max_inflight: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Random,
    Rag,
}

#[derive(Args, Default)]
struct DisparityFlags {
    #[arg(long, value_enum)]
    fpr_base: Option<FprBaseArg>,
    #[arg(long, value_enum)]
    fn_rule: Option<FnRuleArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FprBaseArg {
    Disjoint,
    UnbiasedOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum FnRuleArg {
    Coverage,
    Binary,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    instances: PathBuf,
    /// Name of the prediction file written under `<out>/predictions/`.
    #[arg(long, default_value = "detector")]
    name: String,
    #[command(flatten)]
    detector: DetectorFlags,
    #[command(flatten)]
    embed: EmbedArgs,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    instances: PathBuf,
    /// Prediction files; each is reported under its file stem.
    #[arg(long, required = true, num_args = 1..)]
    predictions: Vec<PathBuf>,
    #[arg(long)]
    resamples: Option<usize>,
    #[command(flatten)]
    disparity: DisparityFlags,
}

#[derive(Args)]
struct DisparityArgs {
    #[arg(long)]
    instances: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    /// Axis pair for a multi-axis gap, e.g. GEN,RAC. Repeatable.
    #[arg(long = "pair")]
    pairs: Vec<String>,
    #[command(flatten)]
    disparity: DisparityFlags,
}

#[derive(Args)]
struct ReportArgs {
    /// A `report.json` written by `score` or `audit`.
    #[arg(long)]
    report: PathBuf,
    #[arg(long, value_enum, default_value = "markdown")]
    format: FormatArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Markdown,
    Csv,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Markdown => ReportFormat::Markdown,
            FormatArg::Csv => ReportFormat::Csv,
        }
    }
}

#[derive(Args)]
struct AuditArgs {
    #[command(flatten)]
    detector: DetectorFlags,
    #[command(flatten)]
    disparity: DisparityFlags,
}

fn config_error(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

fn corpus_error(stage: &'static str) -> impl Fn(corpus::CorpusError) -> HarnessError {
    move |source| HarnessError::Corpus { stage, source }
}

fn io_error(path: &Path) -> impl Fn(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::parse("")?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = SeedBlock {
            base: seed,
            ..SeedBlock::default()
        };
    }
    if let Some(out) = &cli.out {
        // CLI paths are relative to the working directory
        cfg.output.dir = std::path::absolute(out).map_err(io_error(out))?;
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir).map_err(io_error(&dir))?;
    Ok(dir)
}

fn apply_detector_flags(entry: &mut DetectorEntry, flags: &DetectorFlags) {
    if let Some(k) = flags.shots {
        entry.shots = k;
        if k == 0 {
            entry.strategy = Strategy::None;
        } else if entry.strategy == Strategy::None {
            entry.strategy = Strategy::RandomBalanced;
        }
    }
    if let Some(s) = flags.strategy {
        entry.strategy = match s {
            StrategyArg::Random => Strategy::RandomBalanced,
            StrategyArg::Rag => Strategy::Rag,
        };
    }
    if let Some(e) = &flags.endpoint {
        entry.endpoint = Some(e.clone());
        entry.predictions = None;
    }
    if let Some(m) = &flags.model {
        entry.model = m.clone();
    }
    if let Some(p) = &flags.policy_file {
        entry.policy_file = Some(std::path::absolute(p).unwrap_or_else(|_| p.clone()));
    }
    if let Some(n) = flags.max_inflight {
        entry.client.max_inflight = n;
    }
}

fn apply_disparity_flags(cfg: &mut RunConfig, flags: &DisparityFlags) {
    if let Some(b) = flags.fpr_base {
        cfg.disparity.fpr_base = match b {
            FprBaseArg::Disjoint => FprBase::Disjoint,
            FprBaseArg::UnbiasedOnly => FprBase::UnbiasedOnly,
        };
    }
    if let Some(r) = flags.fn_rule {
        cfg.disparity.fn_rule = match r {
            FnRuleArg::Coverage => FnRule::Coverage,
            FnRuleArg::Binary => FnRule::Binary,
        };
    }
}

fn apply_embed_flags(cfg: &mut RunConfig, flags: &EmbedArgs) -> Result<()> {
    match (&flags.embed_endpoint, &flags.embed_model) {
        (Some(e), Some(m)) => {
            let cache = cfg.embedding.as_ref().and_then(|s| s.cache.clone());
            cfg.embedding = Some(EmbeddingSettings {
                service: EmbeddingServiceConfig::new(e.clone(), m.clone()),
                cache,
            });
        }
        (None, None) => {}
        _ => return Err(config_error("--embed-endpoint and --embed-model go together")),
    }
    if let Some(c) = &flags.embed_cache {
        let settings = cfg
            .embedding
            .as_mut()
            .ok_or_else(|| config_error("--embed-cache needs an embedding service"))?;
        settings.cache = Some(std::path::absolute(c).map_err(io_error(c))?);
    }
    Ok(())
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(io_error(path))
}

fn ingest(cli: &Cli, args: &IngestArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let rules = match &args.rules {
        Some(p) => RuleSet::load(p).map_err(|e| config_error(e.to_string()))?,
        None => RuleSet::builtin(),
    };
    let mut options = IngestOptions::new(args.format, args.dataset.clone());
    options.on_unmapped = match args.on_unmapped {
        UnmappedArg::Skip => UnmappedPolicy::Skip,
        UnmappedArg::Abort => UnmappedPolicy::Abort,
    };
    options.delimiter = args.delimiter;
    let outcome = corpus::ingest(&args.input, &options, &rules).map_err(corpus_error("ingest"))?;
    let out = out_dir(&cfg)?.join("instances.jsonl");
    write_instances(&out, &outcome.instances).map_err(corpus_error("ingest"))?;
    for s in &outcome.skipped {
        tracing::warn!(line = s.line, id = %s.id, "skipped: {}", s.reason);
    }
    eprintln!(
        "{} instances written to {}, {} records skipped",
        outcome.instances.len(),
        out.display(),
        outcome.skipped.len()
    );
    Ok(())
}

fn split(cli: &Cli, args: &SplitArgs) -> Result<()> {
    let mut cfg = load_config(cli)?;
    if let Some(f) = args.train_fraction {
        cfg.split.train_fraction = f;
    }
    if let Some(f) = args.dev_fraction {
        cfg.split.dev_fraction_of_train = f;
    }
    let instances = read_instances(&args.instances).map_err(corpus_error("split"))?;
    let instances = assign_splits(instances, &cfg.split_plan()).map_err(corpus_error("split"))?;
    let out = out_dir(&cfg)?.join("instances.jsonl");
    write_instances(&out, &instances).map_err(corpus_error("split"))?;
    let summary = CorpusSummary::new(&instances, &instances, 0, 0);
    eprintln!("splits {:?} (seed {}) written to {}", summary.splits, cfg.seeds().split, out.display());
    Ok(())
}

async fn dedup(cli: &Cli, args: &DedupArgs) -> Result<()> {
    let mut cfg = load_config(cli)?;
    apply_embed_flags(&mut cfg, &args.embed)?;
    if let Some(t) = args.threshold {
        cfg.dedup.threshold = t;
    }
    let instances = read_instances(&args.instances).map_err(corpus_error("dedup"))?;
    let vectors = harness::embed_instances(&cfg, &instances).await?;
    let (test, reference): (Vec<Instance>, Vec<Instance>) =
        instances.iter().cloned().partition(|i| i.split == Split::Test);
    let reference: Vec<Instance> = reference.into_iter().filter(|i| i.split != Split::Unassigned).collect();
    let outcome = dedup_test_against_train(&test, &reference, &vectors, cfg.dedup.threshold)
        .map_err(corpus_error("dedup"))?;
    let removed: std::collections::HashSet<&str> = outcome.removed.iter().map(|r| r.test_id.as_str()).collect();
    let kept: Vec<Instance> = instances.iter().filter(|i| !removed.contains(i.id.as_str())).cloned().collect();
    let dir = out_dir(&cfg)?;
    write_instances(&dir.join("instances.jsonl"), &kept).map_err(corpus_error("dedup"))?;
    write_jsonl(&dir.join("dedup_removed.jsonl"), &outcome.removed).map_err(corpus_error("dedup"))?;
    eprintln!("{} test instances removed at threshold {}", outcome.removed.len(), cfg.dedup.threshold);
    Ok(())
}

fn restrict(instances: Vec<Instance>, split: Option<SplitArg>) -> Vec<Instance> {
    let Some(s) = split else { return instances };
    let want = match s {
        SplitArg::Train => Split::Train,
        SplitArg::Dev => Split::Dev,
        SplitArg::Test => Split::Test,
    };
    instances.into_iter().filter(|i| i.split == want).collect()
}

fn stats(cli: &Cli, args: &StatsArgs) -> Result<()> {
    let instances = restrict(read_instances(&args.instances).map_err(corpus_error("stats"))?, args.split);
    let stats = compute_stats(&instances);
    if cli.out.is_some() || cli.config.is_some() {
        let cfg = load_config(cli)?;
        write_json(&out_dir(&cfg)?.join("stats.json"), &stats)?;
    }
    print_json(&stats);
    Ok(())
}

fn weights(cli: &Cli, args: &InstancesArg) -> Result<()> {
    let cfg = load_config(cli)?;
    let train = restrict(
        read_instances(&args.instances).map_err(corpus_error("weights"))?,
        Some(SplitArg::Train),
    );
    let table = compute_weights(&train).map_err(corpus_error("weights"))?;
    write_json(&out_dir(&cfg)?.join("weights.json"), &table)?;
    print_json(&table);
    Ok(())
}

async fn detect(cli: &Cli, args: &DetectArgs) -> Result<()> {
    let mut cfg = load_config(cli)?;
    apply_embed_flags(&mut cfg, &args.embed)?;
    let mut entry = cfg
        .detectors
        .iter()
        .find(|d| d.name == args.name)
        .cloned()
        .unwrap_or_else(|| DetectorEntry {
            name: args.name.clone(),
            model: String::new(),
            endpoint: None,
            predictions: None,
            policy_file: None,
            shots: 0,
            strategy: Strategy::None,
            pool: PoolSelector::TrainDev,
            prompt: Default::default(),
            client: Default::default(),
        });
    entry.policy_file = entry.policy_file.as_ref().map(|p| cfg.resolve(p));
    apply_detector_flags(&mut entry, &args.detector);
    if entry.endpoint.as_deref().is_none_or(str::is_empty) || entry.model.is_empty() {
        return Err(config_error("detect needs --endpoint and --model"));
    }
    let fewshot = entry.fewshot(cfg.seeds().fewshot);
    let instances = read_instances(&args.instances).map_err(corpus_error("detect"))?;
    let vectors = if fewshot.strategy == Strategy::Rag {
        Some(harness::embed_instances(&cfg, &instances).await?)
    } else {
        None
    };
    let eval = evaluation_set(&instances);
    let corpus = PreparedCorpus {
        instances,
        vectors,
        ..Default::default()
    };
    let path = out_dir(&cfg)?.join("predictions").join(format!("{}.jsonl", entry.name));
    let preds = run_detector(&entry, &fewshot, &corpus, &eval, &path).await?;
    let invalid = preds.iter().filter(|p| p.invalid).count();
    eprintln!("{} predictions ({} invalid) in {}", preds.len(), invalid, path.display());
    Ok(())
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "detector".into())
}

fn score(cli: &Cli, args: &ScoreArgs) -> Result<()> {
    let mut cfg = load_config(cli)?;
    apply_disparity_flags(&mut cfg, &args.disparity);
    if let Some(n) = args.resamples {
        cfg.bootstrap.n_resamples = n;
    }
    let options = cfg.score_options()?;
    let instances = read_instances(&args.instances).map_err(corpus_error("score"))?;
    let eval = evaluation_set(&instances);
    let mut detectors = Vec::new();
    for path in &args.predictions {
        let name = file_stem(path);
        let preds = read_predictions(path).map_err(|source| HarnessError::Detect {
            detector: name.clone(),
            source,
        })?;
        detectors.push(score_predictions(&name, &eval, &preds, &options)?);
    }
    let report = EvalReport {
        provenance: Provenance {
            tool_version: harness::TOOL_VERSION.into(),
            seeds: cfg.seeds(),
            bootstrap: options.bootstrap,
        },
        config: None,
        corpus: CorpusSummary::new(&instances, &eval, 0, 0),
        detectors,
    };
    let dir = out_dir(&cfg)?;
    write_reports(&report, &dir, &cfg.output.formats)?;
    print!("{}", render(&report, ReportFormat::Markdown));
    Ok(())
}

fn parse_pair(s: &str) -> Result<(Axis, Axis)> {
    let parts: Vec<&str> = s.split([',', '+']).map(str::trim).collect();
    let [a, b] = parts.as_slice() else {
        return Err(config_error(format!("pair `{s}` must name two axes, e.g. GEN,RAC")));
    };
    let axis = |x: &str| x.parse::<Axis>().map_err(|e| config_error(e.to_string()));
    Ok((axis(a)?, axis(b)?))
}

fn disparity(cli: &Cli, args: &DisparityArgs) -> Result<()> {
    let mut cfg = load_config(cli)?;
    apply_disparity_flags(&mut cfg, &args.disparity);
    let mut options = cfg.score_options()?;
    if !args.pairs.is_empty() {
        options.pair_groups = args.pairs.iter().map(|p| parse_pair(p)).collect::<Result<_>>()?;
    }
    let instances = read_instances(&args.instances).map_err(corpus_error("disparity"))?;
    let eval = evaluation_set(&instances);
    let name = file_stem(&args.predictions);
    let preds = read_predictions(&args.predictions).map_err(|source| HarnessError::Detect {
        detector: name,
        source,
    })?;
    let pairs = harness::join_predictions(&eval, &preds)?;
    let report = disparity_report(&pairs, &options.pair_groups, &options.disparity)?;
    if cli.out.is_some() || cli.config.is_some() {
        write_json(&out_dir(&cfg)?.join("disparity.json"), &report)?;
    }
    print_json(&report);
    Ok(())
}

fn report(cli: &Cli, args: &ReportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.report).map_err(io_error(&args.report))?;
    let report: EvalReport = serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", args.report.display())))?;
    let format = ReportFormat::from(args.format);
    let rendered = render(&report, format);
    if cli.out.is_some() {
        let cfg = load_config(cli)?;
        write_reports(&report, &out_dir(&cfg)?, &[format])?;
    } else {
        print!("{rendered}");
    }
    Ok(())
}

async fn audit(cli: &Cli, args: &AuditArgs) -> Result<()> {
    if cli.config.is_none() {
        return Err(config_error("audit needs --config"));
    }
    let mut cfg = load_config(cli)?;
    for entry in &mut cfg.detectors {
        apply_detector_flags(entry, &args.detector);
    }
    apply_disparity_flags(&mut cfg, &args.disparity);
    let report = run_audit(&cfg).await?;
    print!("{}", render(&report, ReportFormat::Markdown));
    eprintln!("report written to {}", cfg.out_dir().display());
    Ok(())
}

async fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest(a) => ingest(&cli, a),
        Command::Split(a) => split(&cli, a),
        Command::Dedup(a) => dedup(&cli, a).await,
        Command::Stats(a) => stats(&cli, a),
        Command::Weights(a) => weights(&cli, a),
        Command::Detect(a) => detect(&cli, a).await,
        Command::Score(a) => score(&cli, a),
        Command::Disparity(a) => disparity(&cli, a),
        Command::Report(a) => report(&cli, a),
        Command::Audit(a) => audit(&cli, a).await,
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("tokio runtime");
    match runtime.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
