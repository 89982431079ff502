//! `zodarts`: command-line workbench around the search and evaluation engines.

mod manifest;

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use zodarts::checkpoint;
use zodarts::config::{self, RunConfig};
use zodarts::data::{generate_synthetic, DatasetContainer, SyntheticKind, SyntheticSpec};
use zodarts::eval::{
    derive_size_tiers, evaluation_campaign, materialize, retrain_with_discard, sample_architecture, sample_sizes,
    CampaignInput, Init, SizeDistribution, TierName,
};
use zodarts::search::{SearchState, Searcher};
use zodarts::supernet::ArchMode;
use zodarts::trace;

use manifest::RunManifest;

pub const CHECKPOINT_FILE: &str = "checkpoint.zckp";

#[derive(Parser, Debug)]
#[command(name = "zodarts", version, about = "Zeroth-order differentiable architecture search workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run (or resume) a supernet search.
    Search(SearchArgs),
    /// Draw architectures from searched supernets and record their sizes.
    Sample(SampleArgs),
    /// Sample one architecture from a checkpoint and retrain it.
    Retrain(RetrainArgs),
    /// Sample, filter, retrain and aggregate over several checkpoints.
    Evaluate(EvaluateArgs),
    /// Derive S/M/L size tiers from a sizes file.
    DeriveTiers(DeriveTiersArgs),
    /// Write a synthetic dataset container.
    SynthData(SynthArgs),
    /// Re-export trace tables from checkpoints.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct TierArgs {
    /// Size tier to enforce.
    #[arg(long, requires = "tiers")]
    tier: Option<TierName>,
    /// Tiers file written by `derive-tiers`.
    #[arg(long)]
    tiers: Option<PathBuf>,
}

impl TierArgs {
    fn bounds(&self) -> Result<Option<zodarts::search::Bounds>> {
        let (Some(name), Some(path)) = (self.tier, &self.tiers) else {
            return Ok(None);
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let tiers = config::parse_tiers(&text).with_context(|| format!("parsing {}", path.display()))?;
        let t = tiers.iter().find(|t| t.name == name).expect("all tiers present");
        Ok(Some(t.bounds()))
    }
}

#[derive(Args, Debug)]
struct SearchArgs {
    /// Run configuration. Optional when resuming.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Total epochs `n`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Stop after this many epochs; the checkpoint can be resumed later.
    #[arg(long)]
    early_stop: Option<usize>,
    /// Train fraction of the non-test samples.
    #[arg(long)]
    split: Option<f64>,
    /// Continue from the checkpoint in `--out`.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    tier: TierArgs,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long, num_args = 1.., required = true)]
    checkpoints: Vec<PathBuf>,
    /// Architectures per checkpoint.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for `sizes.csv` and `architectures.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RetrainArgs {
    #[arg(long, num_args = 1, required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long, num_args = 1.., required = true)]
    checkpoints: Vec<PathBuf>,
    /// Architectures per checkpoint.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Retraining epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    tier: TierArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DeriveTiersArgs {
    /// CSV with one parameter count per line.
    #[arg(long)]
    sizes: PathBuf,
    /// Tiers file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value = "blobs")]
    kind: SyntheticKind,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Container file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    checkpoints: Vec<PathBuf>,
    /// Output directory; one subdirectory per checkpoint.
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Search(a) => search(a),
        Command::Sample(a) => sample(a),
        Command::Retrain(a) => retrain(a),
        Command::Evaluate(a) => evaluate(a),
        Command::DeriveTiers(a) => derive_tiers(a),
        Command::SynthData(a) => synth(a),
        Command::Report(a) => report(a),
    }
}

/// Worker count for retraining jobs.
fn threads() -> Result<usize> {
    match std::env::var("ZODARTS_THREADS") {
        Ok(v) => {
            let n: usize = v.parse().with_context(|| format!("ZODARTS_THREADS={v:?} is not a count"))?;
            ensure!(n > 0, "ZODARTS_THREADS must be at least 1");
            Ok(n)
        }
        Err(_) => Ok(1),
    }
}

/// Accepts either a run directory or a checkpoint file.
fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn load_checkpoint(p: &Path) -> Result<(RunConfig, SearchState)> {
    let path = checkpoint_path(p);
    checkpoint::load_search(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn checkpoint_name(p: &Path) -> String {
    let p = if p.is_dir() { p } else { p.parent().unwrap_or(p) };
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Probability mode in effect at the last completed epoch.
fn final_mode(cfg: &RunConfig, state: &SearchState) -> ArchMode {
    cfg.search.mode(state.epoch.saturating_sub(1))
}

/// Makes dataset paths absolute so the embedded configuration is self-contained.
fn absolutize(cfg: &mut RunConfig, base: &Path) -> Result<()> {
    for p in [&mut cfg.data.train, &mut cfg.data.val, &mut cfg.data.test].into_iter().flatten() {
        if p.is_relative() {
            *p = std::path::absolute(base.join(&*p)).with_context(|| format!("resolving {}", p.display()))?;
        }
    }
    Ok(())
}

fn search(a: SearchArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let ckpt = a.out.join(CHECKPOINT_FILE);
    let mut manifest = RunManifest::start("search");
    let (mut cfg, state) = if a.resume && ckpt.exists() {
        manifest.add_input(&ckpt)?;
        let (cfg, state) = load_checkpoint(&ckpt)?;
        log::info!("resuming at epoch {}", state.epoch);
        (cfg, Some(state))
    } else {
        let path = a.config.as_ref().context("--config is required unless resuming")?;
        manifest.add_input(path)?;
        let mut cfg = RunConfig::read(path).with_context(|| format!("reading {}", path.display()))?;
        absolutize(&mut cfg, path.parent().unwrap_or(Path::new(".")))?;
        if let Some(s) = a.seed {
            cfg.search.seed = s;
        }
        if let Some(e) = a.epochs {
            cfg.search.epochs = e;
        }
        if let Some(s) = a.split {
            cfg.data.split = s;
        }
        if let Some(b) = a.tier.bounds()? {
            cfg.search.c_lower = Some(b.lower);
            cfg.search.c_upper = Some(b.upper);
        }
        (cfg, None)
    };
    if a.resume && state.is_some() && (a.seed.is_some() || a.epochs.is_some() || a.split.is_some() || a.tier.tier.is_some()) {
        bail!("--seed, --epochs, --split and --tier cannot change a resumed run");
    }
    cfg.search.early_stop = a.early_stop;
    cfg.validate()?;
    let splits = cfg.data.load(Path::new("."))?;
    for c in [Some(&splits.train), Some(&splits.val), splits.test.as_ref()].into_iter().flatten() {
        manifest.add_dataset(c);
    }
    let (train, val) = (splits.train.to_dataset(), splits.val.to_dataset());
    let mut searcher = match state {
        Some(st) => Searcher::resume(cfg.search.clone(), &train, &val, st)?,
        None => Searcher::new(cfg.supernet.clone(), cfg.search.clone(), &train, &val)?,
    };
    while !searcher.is_finished() {
        let rec = searcher.run_epoch()?;
        log::info!(
            "epoch {} done: C = {:.1}, confident edges {:.2}",
            rec.epoch,
            rec.expected_params,
            rec.confident_edge_fraction(0.99)
        );
        checkpoint::save_search(&ckpt, &searcher.state, &cfg)?;
    }
    if searcher.state.trace.is_empty() {
        bail!("no epochs were run");
    }
    checkpoint::save_search(&ckpt, &searcher.state, &cfg)?;
    trace::export_trace(&searcher.state.trace, &a.out, &cfg.supernet.kernel_sizes, &cfg.supernet.depths)?;
    std::fs::write(a.out.join("config.toml"), cfg.to_text()?)?;
    manifest.config = cfg.to_text()?;
    manifest.seed = cfg.search.seed;
    manifest.finish(&a.out, "ok")
}

fn sample(a: SampleArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    let mut manifest = RunManifest::start("sample");
    let mut all_sizes = Vec::new();
    let mut seeds = Vec::new();
    let mut archs = Vec::new();
    let mut per = 0;
    for (i, p) in a.checkpoints.iter().enumerate() {
        manifest.add_input(&checkpoint_path(p))?;
        let (cfg, state) = load_checkpoint(p)?;
        let n = a.samples.unwrap_or(cfg.eval.size_samples);
        per = n;
        let mode = final_mode(&cfg, &state);
        let seed = a.seed ^ ((i as u64) << 32);
        all_sizes.extend(sample_sizes(&state.net, &mode, n, seed)?);
        seeds.push(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..n {
            let arch = sample_architecture(&state.net, &mode, &mut rng)?;
            archs.push(serde_json::json!({
                "checkpoint": checkpoint_name(p),
                "params": arch.param_count(),
                "arch": arch.describe(),
            }));
        }
    }
    std::fs::write(a.out.join("sizes.csv"), trace::sizes_csv(&all_sizes))?;
    std::fs::write(a.out.join("architectures.json"), serde_json::to_string_pretty(&archs)? + "\n")?;
    let dist = SizeDistribution::new(all_sizes, seeds, per)?;
    log::info!(
        "{} sizes: P20 {} P50 {} P95 {}",
        dist.sizes.len(),
        dist.percentile(20),
        dist.percentile(50),
        dist.percentile(95)
    );
    manifest.seed = a.seed;
    manifest.finish(&a.out, "ok")
}

fn derive_tiers(a: DeriveTiersArgs) -> Result<()> {
    let mut manifest = RunManifest::start("derive-tiers");
    manifest.add_input(&a.sizes)?;
    let text = std::fs::read_to_string(&a.sizes).with_context(|| format!("reading {}", a.sizes.display()))?;
    let sizes = trace::parse_sizes(&text)?;
    let dist = SizeDistribution::new(sizes, Vec::new(), 0)?;
    let tiers = derive_size_tiers(&dist);
    for t in &tiers {
        log::info!("tier {}: [{}, {}]", t.name, t.c_lower, t.c_upper);
    }
    std::fs::write(&a.out, config::tiers_to_text(&tiers)?)?;
    let dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    manifest.finish_named(dir, &format!("{}.manifest.json", file_stem(&a.out)), "ok")
}

fn file_stem(p: &Path) -> String {
    p.file_name().map_or_else(|| "out".into(), |n| n.to_string_lossy().into_owned())
}

fn retrain(a: RetrainArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    let mut manifest = RunManifest::start("retrain");
    let p = &a.checkpoints[0];
    manifest.add_input(&checkpoint_path(p))?;
    let (mut cfg, state) = load_checkpoint(p)?;
    if let Some(e) = a.epochs {
        cfg.retrain.epochs = e;
    }
    let splits = cfg.data.load(Path::new("."))?;
    let test = splits.test.context("retraining needs a test split (data.test or data.test_count)")?;
    let (train, val, test) = (splits.train.to_dataset(), splits.val.to_dataset(), test.to_dataset());
    let mode = final_mode(&cfg, &state);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let arch = sample_architecture(&state.net, &mode, &mut rng)?;
    log::info!("retraining {} ({} parameters)", arch.describe(), arch.param_count());
    let mut model = materialize(&arch, Init::Fresh { seed: a.seed })?;
    let out = retrain_with_discard(&mut model, &train, &val, &test, &cfg.retrain, a.seed)?;
    let json = serde_json::json!({
        "checkpoint": checkpoint_name(p),
        "seed": a.seed,
        "arch": arch.describe(),
        "outcome": out,
    });
    std::fs::write(a.out.join("retrain.json"), serde_json::to_string_pretty(&json)? + "\n")?;
    manifest.seed = a.seed;
    manifest.config = cfg.to_text()?;
    manifest.finish(&a.out, if out.discarded.is_some() { "discarded" } else { "ok" })
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    let mut manifest = RunManifest::start("evaluate");
    let mut inputs = Vec::new();
    let mut first: Option<RunConfig> = None;
    for p in &a.checkpoints {
        manifest.add_input(&checkpoint_path(p))?;
        let (cfg, state) = load_checkpoint(p)?;
        let mode = final_mode(&cfg, &state);
        if let Some(f) = &first {
            if f.data != cfg.data {
                log::warn!("{} was searched on different data; using the first checkpoint's data", p.display());
            }
        } else {
            first = Some(cfg);
        }
        inputs.push(CampaignInput {
            name: checkpoint_name(p),
            net: state.net,
            mode,
        });
    }
    let mut cfg = first.expect("at least one checkpoint");
    if let Some(e) = a.epochs {
        cfg.retrain.epochs = e;
    }
    let samples = a.samples.unwrap_or(cfg.eval.samples);
    let splits = cfg.data.load(Path::new("."))?;
    let test = splits.test.context("evaluation needs a test split (data.test or data.test_count)")?;
    let (train, val, test) = (splits.train.to_dataset(), splits.val.to_dataset(), test.to_dataset());
    let report = evaluation_campaign(
        &inputs,
        samples,
        a.tier.bounds()?,
        &cfg.retrain,
        (&train, &val, &test),
        a.seed,
        threads()?,
    )?;
    std::fs::write(a.out.join("report.csv"), trace::report_csv(&report))?;
    std::fs::write(a.out.join("summary.csv"), trace::summary_csv(&report, samples))?;
    std::fs::write(a.out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let s = &report.summary;
    log::info!(
        "{} sampled, {} filtered, {} retrained, {} discarded",
        s.sampled,
        s.filtered,
        s.retrained,
        s.discarded
    );
    if let (Some(m), Some(sd)) = (s.mean_test_acc, s.std_test_acc) {
        log::info!("test accuracy {m:.4} ± {sd:.4}");
    }
    manifest.seed = a.seed;
    manifest.config = cfg.to_text()?;
    manifest.finish(&a.out, "ok")
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        kind: a.kind,
        samples: a.samples,
        classes: a.classes,
        channels: a.channels,
        size: a.size,
        noise: a.noise,
        seed: a.seed,
    };
    let c: DatasetContainer = generate_synthetic(&spec)?;
    c.write(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    log::info!("wrote {} samples to {}", c.len(), a.out.display());
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    for p in &a.checkpoints {
        let (cfg, state) = load_checkpoint(p)?;
        let dir = a.out.join(checkpoint_name(p));
        std::fs::create_dir_all(&dir)?;
        trace::export_trace(&state.trace, &dir, &cfg.supernet.kernel_sizes, &cfg.supernet.depths)
            .with_context(|| format!("exporting {}", p.display()))?;
        log::info!("{}: {} epochs exported to {}", p.display(), state.trace.len(), dir.display());
    }
    Ok(())
}
