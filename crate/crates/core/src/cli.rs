//! Command-line front end.
//!
//! Exit codes: 0 success, 2 input or configuration error, 3 statistics
//! error, 4 training divergence, 5 gradient-check failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckConfig};
use crate::loss::{balance_weights, relation_stats, StatsDocument};
use crate::model::{Checkpoint, FusionMode};
use crate::train::{
    evaluate, fusion_arms, generate_synthetic, paired_gap, run_ablation, standard_arms, train,
    write_trace, AblationPlan, Dataset, SyntheticSpec, TrainConfig, DEFAULT_THRESHOLD,
};

// stdout writes that tolerate a closed pipe
macro_rules! say {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

pub const THREADS_ENV: &str = "ABRNET_THREADS";
pub const MANIFEST_FORMAT: &str = "abrnet-manifest/1";

#[derive(Debug, Parser)]
#[command(
    name = "abrnet",
    version,
    about = "Relation network for multi-label unit detection"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from a JSON spec.
    GenData { spec: PathBuf, out: PathBuf },
    /// Write label co-occurrence statistics and balance weights as JSON.
    Stats { dataset: PathBuf, out: PathBuf },
    /// Train a model and write checkpoint, trace and manifest to OUT_DIR.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on a random mini-problem.
    GradCheck(GradCheckArgs),
    /// Train a set of configurations over several seeds on the clustered benchmark.
    Ablate(AblateArgs),
}

#[derive(Debug, Args, Default)]
pub struct Overrides {
    /// Relation layers.
    #[arg(long)]
    pub m: Option<usize>,
    /// Units kept per coefficient row.
    #[arg(long)]
    pub k: Option<usize>,
    /// Relation layers retained per training sample.
    #[arg(long)]
    pub t: Option<usize>,
    /// Weight of the relation pair loss.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long = "p-pos", allow_hyphen_values = true)]
    pub p_pos: Option<f64>,
    #[arg(long = "p-neg", allow_hyphen_values = true)]
    pub p_neg: Option<f64>,
    /// Relation dropout on or off.
    #[arg(long, value_parser = clap::builder::BoolishValueParser::new())]
    pub dropout: Option<bool>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// attention, avg, concat or score-avg.
    #[arg(long, value_parser = parse_fusion)]
    pub fusion: Option<FusionMode>,
}

fn parse_fusion(s: &str) -> std::result::Result<FusionMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Overrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(m) = self.m {
            cfg.model.m = m;
        }
        if let Some(k) = self.k {
            cfg.model.k = Some(k);
        }
        if let Some(t) = self.t {
            cfg.model.t = t;
        }
        if let Some(v) = self.lambda {
            cfg.loss.lambda = v;
        }
        if let Some(v) = self.p_pos {
            cfg.loss.p_pos = v;
        }
        if let Some(v) = self.p_neg {
            cfg.loss.p_neg = v;
        }
        if let Some(v) = self.dropout {
            cfg.dropout_enabled = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.fusion {
            cfg.model.fusion = v;
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training configuration JSON; omitted fields take their defaults.
    #[arg(long, conflicts_with = "from_manifest")]
    pub config: Option<PathBuf>,
    /// Reuse the resolved configuration recorded by an earlier run.
    #[arg(long)]
    pub from_manifest: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    /// Also write the report JSON here.
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Training configuration JSON supplying model and loss settings; the
    /// mini-problem always uses 4 units, 8 feature and 4 projection dims.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long, hide = true)]
    pub corrupt_backward: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Synthetic spec; defaults to the built-in two-cluster benchmark.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 5000)]
    pub samples: usize,
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Compare fusion rules instead of relation layers, pair loss and dropout.
    #[arg(long)]
    pub fusion: bool,
    /// Also write per-arm results here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

/// Artifacts and settings of one training run, written before training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format: String,
    pub version: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: String,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: RunManifest = read_json(path)?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Input {
                path: Some(path.to_path_buf()),
                msg: format!("unsupported manifest format {:?}", m.format),
            });
        }
        Ok(m)
    }

    fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub fn version() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Input {
        path: Some(path.to_path_buf()),
        msg: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Input {
        path: Some(path.to_path_buf()),
        msg: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.into()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Held for the duration of a run; removes the lockfile on drop.
struct OutDirLock(PathBuf);

impl OutDirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".abrnet.lock");
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(OutDirLock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Input {
                path: Some(dir.to_path_buf()),
                msg: format!("output directory is in use ({} exists)", path.display()),
            }),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutDirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Sizes the global worker pool from `ABRNET_THREADS`, if set.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw.trim().parse().ok().filter(|&t| t > 0).ok_or_else(|| {
        Error::Config(format!("{THREADS_ENV}={raw:?} must be a positive integer"))
    })?;
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
    {
        log::debug!("worker pool already configured: {e}");
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out } => cmd_gen_data(&spec, &out),
        Command::Stats { dataset, out } => cmd_stats(&dataset, &out),
        Command::Train(args) => cmd_train(&args).map(|_| ()),
        Command::Eval(args) => cmd_eval(&args),
        Command::GradCheck(args) => cmd_grad_check(&args),
        Command::Ablate(args) => cmd_ablate(&args),
    }
}

pub fn cmd_gen_data(spec_path: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec_path).map_err(|e| Error::Input {
        path: Some(spec_path.to_path_buf()),
        msg: e.to_string(),
    })?;
    let spec: SyntheticSpec = serde_json::from_str(&text)
        .map_err(|e| Error::Spec(format!("{}: {e}", spec_path.display())))?;
    let data = generate_synthetic(&spec)?;
    data.save(out)?;

    let labels = data.labels();
    let rates: Vec<String> = (0..data.n())
        .map(|u| {
            let on = labels.rows().iter().filter(|r| r[u] == 1).count();
            format!("{:.3}", on as f64 / data.len().max(1) as f64)
        })
        .collect();
    say!("wrote {}", out.display());
    say!(
        "n = {}, d_l = {}, samples = {}",
        data.n(),
        data.d_l(),
        data.len()
    );
    say!("label rates: {}", rates.join(" "));
    Ok(())
}

pub fn cmd_stats(dataset: &Path, out: &Path) -> Result<()> {
    let data = Dataset::load(dataset)?;
    let labels = data.labels();
    let stats = relation_stats(&labels)?;
    let weights = balance_weights(&labels)?;
    write_json(out, &StatsDocument::new(&stats, &weights))?;

    let n = data.n();
    let mut pairs: Vec<(usize, usize, f64)> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| (i, j, stats.a[(i, j)]))
        .collect();
    pairs.sort_by(|x, y| x.2.total_cmp(&y.2));
    say!("wrote {}", out.display());
    if let (Some(neg), Some(pos)) = (pairs.first(), pairs.last()) {
        say!(
            "strongest positive: a[{},{}] = {:.4}",
            pos.0 + 1,
            pos.1 + 1,
            pos.2
        );
        say!(
            "strongest negative: a[{},{}] = {:.4}",
            neg.0 + 1,
            neg.1 + 1,
            neg.2
        );
    }
    Ok(())
}

/// Base config from the manifest or config file, then flag overrides, then
/// unit count and feature size from the dataset when the file left them out.
fn resolve_train_config(args: &TrainArgs, data: &Dataset) -> Result<TrainConfig> {
    let mut cfg = if let Some(path) = &args.from_manifest {
        RunManifest::load(path)?.config
    } else if let Some(path) = &args.config {
        let raw: serde_json::Value = read_json(path)?;
        let model = raw.get("model");
        let has = |key: &str| model.and_then(|m| m.get(key)).is_some();
        let (has_n, has_d) = (has("n"), has("d_l"));
        let mut cfg: TrainConfig = serde_json::from_value(raw).map_err(|e| Error::Input {
            path: Some(path.clone()),
            msg: e.to_string(),
        })?;
        if !has_n {
            cfg.model.n = data.n();
        }
        if !has_d {
            cfg.model.d_l = data.d_l();
        }
        cfg
    } else {
        let mut cfg = TrainConfig::default();
        cfg.model.n = data.n();
        cfg.model.d_l = data.d_l();
        cfg
    };
    args.overrides.apply(&mut cfg);
    cfg.model.k = Some(cfg.model.effective_k());
    cfg.validate()?;
    Ok(cfg)
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

pub fn cmd_train(args: &TrainArgs) -> Result<RunManifest> {
    let data = Dataset::load(&args.dataset)?;
    let cfg = resolve_train_config(args, &data)?;
    let _lock = OutDirLock::acquire(&args.out_dir)?;
    let out = absolute(&args.out_dir);
    let manifest_path = out.join("manifest.json");
    let mut manifest = RunManifest {
        format: MANIFEST_FORMAT.to_string(),
        version: version(),
        seed: cfg.seed,
        config: cfg.clone(),
        dataset: absolute(&args.dataset),
        checkpoint: out.join("checkpoint.json"),
        trace: out.join("trace.csv"),
        started_at: now(),
        finished_at: None,
        status: "running".to_string(),
    };
    manifest.save(&manifest_path)?;

    let save_trace = |rows: &[crate::train::TraceRow]| -> Result<()> {
        let f = fs::File::create(&manifest.trace)?;
        write_trace(rows, std::io::BufWriter::new(f))
    };
    match train(&data, &cfg) {
        Ok(run) => {
            save_trace(&run.trace)?;
            Checkpoint::new(&cfg.model, &run.params).save(&manifest.checkpoint)?;
            if let Some(last) = run.trace.last() {
                say!(
                    "trained {} epochs, final batch loss {:.6} (cross {:.6}, relation {:.6})",
                    cfg.epochs,
                    last.l_total,
                    last.l_cross,
                    last.l_aur
                );
            }
            say!("wrote {}", out.display());
            manifest.finished_at = Some(now());
            manifest.status = "complete".to_string();
            manifest.save(&manifest_path)?;
            Ok(manifest)
        }
        Err(Error::Divergence {
            epoch,
            batch,
            partial,
        }) => {
            save_trace(&partial.trace)?;
            Checkpoint::new(&cfg.model, &partial.params)
                .save(&out.join("checkpoint.partial.json"))?;
            manifest.finished_at = Some(now());
            manifest.status = format!("diverged at epoch {epoch}, batch {batch}");
            manifest.save(&manifest_path)?;
            Err(Error::Divergence {
                epoch,
                batch,
                partial,
            })
        }
        Err(e) => {
            manifest.finished_at = Some(now());
            manifest.status = format!("failed: {e}");
            manifest.save(&manifest_path)?;
            Err(e)
        }
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let params = ckpt.params()?;
    let data = Dataset::load(&args.dataset)?;
    let report = evaluate(&data, &params, &ckpt.config, args.threshold)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Io(e.into()))?;
    let _ = write!(std::io::stdout(), "{}", report.table());
    say!("{json}");
    if let Some(path) = &args.json {
        write_json(path, &report)?;
    }
    Ok(())
}

pub fn grad_check_config(args: &GradCheckArgs) -> Result<GradCheckConfig> {
    let mut gc = GradCheckConfig {
        seed: args.seed,
        corrupt_backward: args.corrupt_backward,
        ..Default::default()
    };
    if let Some(path) = &args.config {
        let cfg: TrainConfig = read_json(path)?;
        let (n, d_l, d_m) = (gc.model.n, gc.model.d_l, gc.model.d_m);
        gc.model = cfg.model;
        gc.model.n = n;
        gc.model.d_l = d_l;
        gc.model.d_m = d_m;
        gc.loss = cfg.loss;
        gc.dropout_enabled = cfg.dropout_enabled;
    }
    if let Some(m) = args.m {
        gc.model.m = m;
    }
    if let Some(k) = args.k {
        gc.model.k = Some(k);
    }
    if let Some(t) = args.t {
        gc.model.t = t;
    }
    if gc.model.m == 0 {
        gc.dropout_enabled = false;
    } else if args.t.is_none() && gc.model.t > gc.model.m {
        gc.model.t = gc.model.m;
    }
    Ok(gc)
}

pub fn cmd_grad_check(args: &GradCheckArgs) -> Result<()> {
    let gc = grad_check_config(args)?;
    let report = grad_check(&gc)?;
    say!(
        "m = {}, k = {}, t = {}: point {} of {} drawn, kink margin {:.2e}",
        gc.model.m,
        gc.model.effective_k(),
        gc.model.t,
        report.attempts,
        gc.max_attempts,
        report.kink_margin
    );
    say!("{:<24} {:>8} {:>14}", "tensor", "entries", "max rel err");
    for t in &report.tensors {
        say!(
            "{:<24} {:>8} {:>14.3e}{}",
            t.name,
            t.entries,
            t.max_rel_error,
            if t.passed { "" } else { "  FAIL" }
        );
    }
    if report.passed() {
        say!("ok: all below {:e}", gc.tolerance);
        Ok(())
    } else {
        Err(Error::GradCheck(report.failures()))
    }
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(p) => read_json(p)?,
        None => SyntheticSpec::clustered_benchmark(args.samples, 0),
    };
    spec.samples = args.samples;
    let mut base = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(e) = args.epochs {
        base.epochs = e;
    }
    let plan = AblationPlan {
        spec,
        base,
        seeds: (0..args.seeds).collect(),
        train_fraction: 0.8,
    };
    let arms = if args.fusion {
        fusion_arms()
    } else {
        standard_arms()
    };
    let results = run_ablation(&plan, &arms)?;

    say!("{:<32} {:>9} {:>9}", "configuration", "F1(%)", "SE(%)");
    for r in &results {
        say!(
            "{:<32} {:>9.2} {:>9.2}",
            r.name,
            100.0 * r.mean,
            100.0 * r.std_error
        );
    }
    for w in results.windows(2) {
        let (gap, se) = paired_gap(&w[0].f1, &w[1].f1);
        say!(
            "{} vs {}: {:+.2} +/- {:.2}",
            w[0].name,
            w[1].name,
            100.0 * gap,
            100.0 * se
        );
    }
    if let Some(path) = &args.json {
        write_json(path, &results)?;
    }
    Ok(())
}
