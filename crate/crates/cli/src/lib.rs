//! The `flowr` command-line tool.
//!
//! Every failure is reported as one line on stderr,
//! `error kind=<kind> message="<text>"`, with a nonzero exit code.
//! Relative output paths are resolved against `FLOWR_OUT_DIR` when it is set.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use flowr_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use flowr_core::config::ExperimentConfig;
use flowr_core::data::{generate_synthetic_world, read_dataset, write_dataset, EmbeddingDataset};
use flowr_core::encoder::{pretrain, ClassEmbeddings};
use flowr_core::error::FlowrError;
use flowr_core::experiment::{evaluate, read_records, summarize, write_records, EvalConfig, EvalOutput, Method};
use flowr_core::gradcheck::{verification_suite, GradCheckOptions};
use flowr_core::meta::{identity_affine, initial_params, meta_train, MetaParams, Setting};
use flowr_core::metrics::write_roc_csv;

pub const OUT_DIR_ENV: &str = "FLOWR_OUT_DIR";

#[derive(Debug)]
pub struct CliError {
    pub kind: String,
    pub message: String,
}

impl CliError {
    fn new(kind: &str, message: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error kind={} message={:?}", self.kind, self.message)
    }
}

impl From<FlowrError> for CliError {
    fn from(e: FlowrError) -> Self {
        Self::new(e.kind(), e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn with_path(path: &Path) -> impl FnOnce(FlowrError) -> CliError + '_ {
    move |e| CliError::new(e.kind(), format!("{}: {e}", path.display()))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::new("io", format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(
    name = "flowr",
    version,
    about = "Few-shot open-world recognition with conjugate Gaussian class models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a labelled dataset from the Gaussian generative model.
    GenSynthetic(GenArgs),
    /// Pre-train the encoder and class embeddings.
    Pretrain(PretrainArgs),
    /// Meta-train the shared prior, CRP concentration and encoder.
    Metatrain(MetatrainArgs),
    /// Evaluate a checkpoint on sampled test episodes.
    Eval(EvalArgs),
    /// Render the metric table from stored per-query records.
    Report(ReportArgs),
    /// Check every analytic gradient against finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 25.0)]
    prior_variance: f64,
    #[arg(long, default_value_t = 0.5)]
    noise_variance: f64,
    /// Points per class.
    #[arg(long, default_value_t = 30)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Where the experiment configuration comes from, plus field overrides.
#[derive(Debug, Args, Default)]
struct ConfigArgs {
    /// JSON experiment configuration.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset: sc-paper or lc-paper.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Embedding width.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Known-known classes (large context).
    #[arg(long)]
    known_classes: Option<usize>,
    /// Support classes per episode (small context).
    #[arg(long)]
    support_classes: Option<usize>,
    #[arg(long)]
    novel_classes: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    shots_min: Option<usize>,
    #[arg(long)]
    shots_max: Option<usize>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Args)]
struct MetatrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    setting: Option<Setting>,
    /// Pre-trained checkpoint supplying the encoder and class embeddings.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    /// Teacher-forced sequential query loss.
    #[arg(long)]
    sequential: bool,
    /// Print a progress record every this many steps.
    #[arg(long, default_value_t = 100)]
    log_every: usize,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    setting: Option<Setting>,
    /// Unknown-unknown detection TPR of the operating point.
    #[arg(long)]
    tpr: Option<f64>,
    #[arg(long, default_value = "flowr")]
    method: Method,
    #[arg(long)]
    episodes: Option<usize>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Output-layer fine-tuning steps on each support set.
    #[arg(long)]
    fine_tune_steps: Option<usize>,
    /// Training data providing the known-known means of large-context baselines.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Directory for records.jsonl, roc.csv and metrics.txt.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    tpr: f64,
    #[arg(long, default_value = "flowr")]
    method: Method,
    /// Also write the ROC points to this CSV file.
    #[arg(long)]
    roc: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    configs: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

/// Parse `argv` (including the program name), run the command and return
/// the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let err = CliError::new("usage", first.trim_start_matches("error: "));
            eprintln!("{err}");
            return 2;
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match dispatch(cli.command, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = out.flush();
            eprintln!("{e}");
            1
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> CliResult<()> {
    match cmd {
        Command::GenSynthetic(a) => gen_synthetic(a, out),
        Command::Pretrain(a) => run_pretrain(a, out),
        Command::Metatrain(a) => run_metatrain(a, out),
        Command::Eval(a) => run_eval(a, out),
        Command::Report(a) => run_report(a, out),
        Command::GradCheck(a) => run_grad_check(a, out),
    }
}

fn say(out: &mut dyn Write, line: impl fmt::Display) -> CliResult<()> {
    writeln!(out, "{line}").map_err(|e| CliError::new("io", format!("stdout: {e}")))
}

fn warn(message: &str) {
    eprintln!("warning message={message:?}");
}

/// Resolve an output path: relative paths go under `FLOWR_OUT_DIR` when set.
fn output_path(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if path.is_relative() => PathBuf::from(dir).join(path),
        _ => path.to_path_buf(),
    }
}

fn prepare_parent(path: &Path) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    Ok(())
}

fn load_data(path: &Path) -> CliResult<EmbeddingDataset> {
    read_dataset(path).map_err(with_path(path))
}

fn load_ckpt(path: &Path, expected: Option<&ExperimentConfig>) -> CliResult<Checkpoint> {
    let (ck, warnings) = load_checkpoint(path, expected).map_err(with_path(path))?;
    for w in warnings {
        warn(&format!("{}: {w}", path.display()));
    }
    Ok(ck)
}

fn preset_for(setting: Setting) -> ExperimentConfig {
    match setting {
        Setting::SmallContext => ExperimentConfig::sc_paper(),
        Setting::LargeContext => ExperimentConfig::lc_paper(),
    }
}

impl ConfigArgs {
    fn explicit(&self) -> bool {
        self.config.is_some() || self.preset.is_some()
    }

    /// Base configuration: `--config`, `--preset`, then `fallback`.
    fn base(&self, fallback: impl FnOnce() -> ExperimentConfig) -> CliResult<ExperimentConfig> {
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            return ExperimentConfig::from_json(&text).map_err(with_path(path));
        }
        if let Some(name) = &self.preset {
            return Ok(ExperimentConfig::preset(name)?);
        }
        Ok(fallback())
    }

    /// Apply overrides. Episode-shape flags go to the training or the
    /// evaluation episode depending on `for_eval`.
    fn apply(&self, cfg: &mut ExperimentConfig, for_eval: bool) -> CliResult<()> {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.dim {
            cfg.dim = v;
        }
        if let Some(v) = self.known_classes {
            cfg.n_known_classes = v;
        }
        let ep = if for_eval {
            &mut cfg.eval_episode
        } else {
            &mut cfg.train_episode
        };
        if let Some(v) = self.support_classes {
            ep.n_support_classes = v;
        }
        if let Some(v) = self.novel_classes {
            ep.n_novel_classes = v;
        }
        if let Some(v) = self.queries {
            ep.queries_per_class = v;
        }
        if let Some(v) = self.shots_min {
            ep.shots_min = v;
        }
        if let Some(v) = self.shots_max {
            ep.shots_max = v;
        }
        if cfg.setting == Setting::LargeContext {
            ep.n_support_classes = 0;
        }
        cfg.validate()?;
        Ok(())
    }
}

fn gen_synthetic(a: GenArgs, out: &mut dyn Write) -> CliResult<()> {
    let world = generate_synthetic_world(a.classes, a.dim, a.prior_variance, a.noise_variance, a.points, a.seed)?;
    let path = output_path(&a.out);
    prepare_parent(&path)?;
    write_dataset(&path, &world.dataset).map_err(with_path(&path))?;
    say(
        out,
        format_args!(
            "wrote path={} classes={} dim={} records={}",
            path.display(),
            world.dataset.n_classes(),
            world.dataset.dim(),
            world.dataset.len()
        ),
    )
}

/// Keep only classes `1..=n` (the known-known classes of the large context).
fn restrict_classes(ds: &EmbeddingDataset, n: usize) -> CliResult<EmbeddingDataset> {
    if n > ds.n_classes() {
        return Err(CliError::new(
            "config",
            format!("{n} known-known classes requested, dataset has {}", ds.n_classes()),
        ));
    }
    let samples = ds.samples().iter().filter(|s| s.label <= n).cloned().collect();
    Ok(EmbeddingDataset::new(ds.dim(), samples)?)
}

fn run_pretrain(a: PretrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut cfg = a.cfg.base(ExperimentConfig::sc_paper)?;
    if let Some(v) = a.epochs {
        cfg.pretrain_epochs = v;
    }
    if let Some(v) = a.cfg.step_size {
        cfg.pretrain_step_size = v;
    }
    if let Some(v) = a.cfg.batch_size {
        cfg.pretrain_batch_size = v;
    }
    a.cfg.apply(&mut cfg, false)?;
    let mut data = load_data(&a.data)?;
    if cfg.setting == Setting::LargeContext {
        data = restrict_classes(&data, cfg.n_known_classes)?;
    }
    let trained = pretrain(&data, &cfg.pretrain_config())?;
    let first = trained.loss_trace.first().copied().unwrap_or(f64::NAN);
    let last = trained.loss_trace.last().copied().unwrap_or(f64::NAN);
    let params = MetaParams::small_context(trained.encoder, cfg.crp()?, cfg.noise()?);
    let ck = Checkpoint::new(params, Some(trained.embeddings), Some(cfg));
    let path = output_path(&a.out);
    prepare_parent(&path)?;
    save_checkpoint(&path, &ck).map_err(with_path(&path))?;
    say(
        out,
        format_args!(
            "pretrain batches={} first_loss={first:.6} final_loss={last:.6} classes={} checkpoint={}",
            trained.loss_trace.len(),
            data.n_classes(),
            path.display()
        ),
    )
}

fn truncate_embeddings(emb: &ClassEmbeddings, n: usize) -> CliResult<ClassEmbeddings> {
    if emb.n_classes() < n {
        return Err(CliError::new(
            "config",
            format!(
                "{n} known-known classes requested, checkpoint embeds {}",
                emb.n_classes()
            ),
        ));
    }
    Ok(ClassEmbeddings::new(
        emb.means[..n].to_vec(),
        emb.variances[..n].to_vec(),
    )?)
}

fn run_metatrain(a: MetatrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let init = a.init.as_deref().map(|p| load_ckpt(p, None)).transpose()?;
    let fallback_setting = a.setting.unwrap_or(Setting::SmallContext);
    let mut cfg = a.cfg.base(|| preset_for(fallback_setting))?;
    if let Some(s) = a.setting {
        cfg.setting = s;
    }
    if let Some(v) = a.steps {
        cfg.meta_steps = v;
    }
    if let Some(v) = a.cfg.step_size {
        cfg.meta_step_size = v;
    }
    if let Some(v) = a.cfg.batch_size {
        cfg.meta_batch_size = v;
    }
    cfg.sequential_meta |= a.sequential;
    a.cfg.apply(&mut cfg, false)?;
    let data = load_data(&a.data)?;

    let (encoder, embeddings) = match &init {
        Some(ck) => (ck.params.encoder.clone(), ck.embeddings.clone()),
        None => (identity_affine(data.dim()), None),
    };
    let embeddings = match (cfg.setting, embeddings) {
        (Setting::LargeContext, Some(e)) => Some(truncate_embeddings(&e, cfg.n_known_classes)?),
        (Setting::LargeContext, None) => {
            return Err(CliError::new(
                "config",
                "large-context meta-training needs --init with a pre-trained checkpoint",
            ))
        }
        (_, e) => e,
    };
    cfg.dim = encoder.d_out();
    let params = initial_params(cfg.setting, &encoder, embeddings.as_ref(), cfg.crp()?, cfg.noise()?)?;
    let log_every = a.log_every.max(1);
    let steps = cfg.meta_steps;
    let mut log_err = None;
    let (params, trace) = meta_train(&data, params, &cfg.meta_train_config(), |r| {
        if (r.step % log_every == 0 || r.step + 1 == steps) && log_err.is_none() {
            log_err = say(
                out,
                format_args!(
                    "step={} loss={:.6} nll={:.6} adapt={:.6}",
                    r.step, r.loss, r.nll, r.adapt
                ),
            )
            .err();
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    let ck = Checkpoint::new(params, embeddings, Some(cfg.clone()));
    let path = output_path(&a.out);
    prepare_parent(&path)?;
    save_checkpoint(&path, &ck).map_err(with_path(&path))?;
    say(
        out,
        format_args!(
            "metatrain setting={} steps={} final_loss={:.6} b={:.6} checkpoint={}",
            cfg.setting,
            trace.len(),
            trace.last().map_or(f64::NAN, |r| r.loss),
            ck.params.crp.b(),
            path.display()
        ),
    )
}

fn write_outputs(dir: &Path, result: &EvalOutput, table: &str) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join("records.jsonl");
    let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    write_records(&mut w, &result.records).map_err(with_path(&path))?;
    w.flush().map_err(io_err(&path))?;

    let path = dir.join("roc.csv");
    let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    write_roc_csv(&mut w, &result.roc).map_err(io_err(&path))?;
    w.flush().map_err(io_err(&path))?;

    let path = dir.join("metrics.txt");
    std::fs::write(&path, table).map_err(io_err(&path))
}

fn run_eval(a: EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let explicit = a.cfg.explicit();
    let mut cfg = a.cfg.base(|| preset_for(a.setting.unwrap_or(Setting::SmallContext)))?;
    let expected = explicit.then(|| cfg.clone());
    let ck = load_ckpt(&a.checkpoint, expected.as_ref())?;
    if !explicit {
        if let Some(stored) = &ck.config {
            if a.setting.is_none_or(|s| s == stored.setting) {
                cfg = stored.clone();
            }
        }
    }
    if let Some(s) = a.setting {
        cfg.setting = s;
    }
    if let Some(v) = a.episodes {
        cfg.eval_episodes = v;
    }
    if let Some(v) = a.tpr {
        cfg.tpr = v;
    }
    if let Some(v) = a.fine_tune_steps {
        cfg.fine_tune_steps = v;
    }
    if let Some(v) = a.cfg.step_size {
        cfg.fine_tune_step_size = v;
    }
    a.cfg.apply(&mut cfg, true)?;
    if !(cfg.tpr > 0.0 && cfg.tpr <= 1.0) {
        return Err(CliError::new(
            "config",
            format!("--tpr must lie in (0, 1], got {}", cfg.tpr),
        ));
    }

    let data = load_data(&a.data)?;
    let reference = a.reference.as_deref().map(load_data).transpose()?;
    let known_classes = match cfg.setting {
        Setting::SmallContext => Vec::new(),
        Setting::LargeContext if a.method == Method::Flowr => (1..=ck.params.n_known()).collect(),
        Setting::LargeContext => cfg.known_classes(),
    };
    let eval_cfg = EvalConfig {
        setting: cfg.setting,
        method: a.method,
        episode: cfg.eval_episode,
        episodes: cfg.eval_episodes,
        seed: cfg.seed,
        tpr: cfg.tpr,
        workers: a.workers,
        fine_tune_steps: cfg.fine_tune_steps,
        fine_tune_step_size: cfg.fine_tune_step_size,
        known_classes,
    };
    let result = evaluate(&ck.params, &data, reference.as_ref(), &eval_cfg)?;
    let table = result.metric_table();
    let dir = match (a.out_dir, std::env::var_os(OUT_DIR_ENV)) {
        (Some(d), _) => output_path(&d),
        (None, Some(d)) => PathBuf::from(d),
        (None, None) => PathBuf::from("."),
    };
    write_outputs(&dir, &result, &table)?;
    write!(out, "{table}").map_err(|e| CliError::new("io", format!("stdout: {e}")))
}

fn run_report(a: ReportArgs, out: &mut dyn Write) -> CliResult<()> {
    let file = File::open(&a.records).map_err(io_err(&a.records))?;
    let records = read_records(BufReader::new(file)).map_err(with_path(&a.records))?;
    let result = summarize(a.method, records, a.tpr)?;
    if let Some(path) = a.roc {
        let path = output_path(&path);
        prepare_parent(&path)?;
        let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
        write_roc_csv(&mut w, &result.roc).map_err(io_err(&path))?;
        w.flush().map_err(io_err(&path))?;
    }
    write!(out, "{}", result.metric_table()).map_err(|e| CliError::new("io", format!("stdout: {e}")))
}

fn run_grad_check(a: GradCheckArgs, out: &mut dyn Write) -> CliResult<()> {
    let entries = verification_suite(a.seed, a.configs, &GradCheckOptions::default())?;
    let mut worst: Option<&flowr_core::gradcheck::SuiteEntry> = None;
    for e in &entries {
        say(
            out,
            format_args!(
                "loss={} config={} max_rel_error={:.3e} n_checked={} passed={}",
                e.loss.name(),
                e.config,
                e.report.max_rel_error,
                e.report.n_checked,
                e.report.passed(a.tolerance)
            ),
        )?;
        if worst.is_none_or(|w| e.report.max_rel_error > w.report.max_rel_error) {
            worst = Some(e);
        }
    }
    let Some(w) = worst else {
        return say(out, "checked=0");
    };
    say(
        out,
        format_args!(
            "checked={} worst_loss={} worst_config={} max_rel_error={:.3e} tolerance={:e}",
            entries.len(),
            w.loss.name(),
            w.config,
            w.report.max_rel_error,
            a.tolerance
        ),
    )?;
    if w.report.passed(a.tolerance) {
        Ok(())
    } else {
        Err(CliError::new(
            "gradient_check",
            format!(
                "{} gradient (config {}) relative error {:.3e} exceeds {:e} at parameter {}",
                w.loss.name(),
                w.config,
                w.report.max_rel_error,
                a.tolerance,
                w.report.worst_index
            ),
        ))
    }
}
