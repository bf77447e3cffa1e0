//! `lwpv`: inspect, analyse, verify, train and run the light-weight
//! parallel local-global vision transformer.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use lwplg::analysis::{self, FlopCategory, GlobalMode};
use lwplg::model::{self, micro_config};
use lwplg::train::{train_toy, TrainConfig};
use lwplg::verify::{gradcheck_suite, Options, Scope, GRAD_TOL};
use lwplg::{build_model, variant_config, Model, ModelConfig};

macro_rules! out {
    ($($arg:tt)*) => {
        if let Err(e) = write!(std::io::stdout(), $($arg)*) {
            stdout_failed(e)
        }
    };
}

macro_rules! outln {
    ($($arg:tt)*) => {
        if let Err(e) = writeln!(std::io::stdout(), $($arg)*) {
            stdout_failed(e)
        }
    };
}

fn stdout_failed(e: std::io::Error) -> ! {
    if e.kind() == std::io::ErrorKind::BrokenPipe {
        std::process::exit(0);
    }
    eprintln!("error: writing to stdout: {e}");
    std::process::exit(1);
}

#[derive(Parser)]
#[command(name = "lwpv", version, about = "Light-weight parallel local-global vision transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "verbatim")]
enum Variant {
    #[value(alias = "a")]
    A,
    #[value(alias = "r")]
    R,
    /// The scaled-down configuration used by `train-toy`.
    #[value(alias = "MICRO")]
    #[allow(non_camel_case_types)]
    micro,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "A")]
    variant: Variant,
    /// JSON model configuration; overrides --variant.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScopeArg {
    Op,
    Block,
    Model,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Per-stage configuration table with split ratio and head dimension.
    Describe {
        #[command(flatten)]
        model: ModelArgs,
        /// Print the configuration as JSON instead.
        #[arg(long)]
        json: bool,
    },
    /// Exact parameter count, grouped by stage.
    Params {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long, conflicts_with = "csv")]
        json: bool,
        #[arg(long)]
        csv: bool,
    },
    /// Analytic FLOPs at one input size.
    Flops {
        #[command(flatten)]
        model: ModelArgs,
        /// `224` or `HxW`.
        #[arg(long, default_value = "224")]
        size: String,
        #[arg(long)]
        classes: Option<usize>,
        /// Count global attention over the full grid instead of the pooled one.
        #[arg(long)]
        naive: bool,
        #[arg(long)]
        json: bool,
    },
    /// FLOPs over several square input sizes, as CSV.
    Sweep {
        #[command(flatten)]
        model: ModelArgs,
        /// Comma-separated sizes.
        #[arg(long, default_value = "224,448,896")]
        sizes: String,
        #[arg(long)]
        naive: bool,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        scope: ScopeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb the weights seen by the finite differences; every item should fail.
        #[arg(long)]
        self_test: bool,
    },
    /// SGD on the synthetic shape task with the micro configuration.
    TrainToy {
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        /// Print the loss every N steps (0 disables).
        #[arg(long, default_value_t = 50)]
        log_every: usize,
        /// Exit with status 1 when the final train accuracy is below this.
        #[arg(long)]
        min_accuracy: Option<f64>,
        /// Save the trained weights here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify one PPM/PGM image and print the top-5 classes.
    Infer {
        #[command(flatten)]
        model: ModelArgs,
        /// Weights file; a freshly seeded model is used when absent.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 224)]
        size: usize,
        /// Number of classes; read from the weights file when absent.
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
    /// A check ran and did not pass; the report is already printed.
    Verification,
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

type CmdResult = Result<(), Failure>;

fn load_config(args: &ModelArgs, classes: Option<usize>) -> Result<ModelConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(usage)?;
            ModelConfig::from_json(&text).map_err(usage)?
        }
        None => match args.variant {
            Variant::A => variant_config("A").map_err(usage)?,
            Variant::R => variant_config("R").map_err(usage)?,
            Variant::micro => micro_config(3),
        },
    };
    if let Some(k) = classes {
        cfg.num_classes = k;
        cfg.validate().map_err(usage)?;
    }
    Ok(cfg)
}

fn describe(args: &ModelArgs, json: bool) -> CmdResult {
    let cfg = load_config(args, None)?;
    if json {
        outln!("{}", cfg.to_json());
        return Ok(());
    }
    outln!(
        "variant {}: stem C1={}, expansion C5={}, {} classes",
        cfg.name,
        cfg.stem_channels,
        cfg.expansion_channels,
        cfg.num_classes
    );
    outln!(
        "{:<6} {:>6} {:>5} {:>10} {:>10} {:>6} {:>9} {:>10}",
        "stage",
        "blocks",
        "C",
        "lsa",
        "gsa",
        "r",
        "head_dim",
        "downsample"
    );
    for (i, s) in cfg.stages.iter().enumerate() {
        let gsa = s.gsa.map_or("absent".to_string(), |g| format!("{}/{}", g.window, g.heads));
        let r = s.ratio().map_err(|e| anyhow!(e))?;
        let dim = s.head_dim().map_err(|e| anyhow!(e))?;
        outln!(
            "{:<6} {:>6} {:>5} {:>10} {:>10} {:>6} {:>9} {:>10}",
            i + 1,
            s.repeats,
            s.channels,
            format!("{}/{}", s.lsa.window, s.lsa.heads),
            gsa,
            r.to_string(),
            dim,
            if s.downsample_in { "lw-embed" } else { "stem" }
        );
    }
    for (i, s) in cfg.stages.iter().enumerate() {
        let gsa = s.gsa.map_or("gsa: absent".to_string(), |g| format!("gsa {}/{}", g.window, g.heads));
        outln!(
            "stage {}: blocks={}, C={}, lsa {}/{}, {gsa}, r={}, head_dim={}",
            i + 1,
            s.repeats,
            s.channels,
            s.lsa.window,
            s.lsa.heads,
            s.ratio().map_err(|e| anyhow!(e))?,
            s.head_dim().map_err(|e| anyhow!(e))?
        );
    }
    Ok(())
}

fn millions(n: usize) -> String {
    format!("{:.3}M", n as f64 / 1e6)
}

fn params(args: &ModelArgs, classes: Option<usize>, json: bool, csv: bool) -> CmdResult {
    let cfg = load_config(args, classes)?;
    let model = build_model::<f32>(&cfg, 0).map_err(|e| anyhow!(e))?;
    let report = analysis::count_params(&model.weights);
    if json {
        outln!("{}", serde_json::to_string_pretty(&report).context("serializing report")?);
    } else if csv {
        out!("{}", report.to_csv());
    } else {
        outln!("variant {} ({} classes)", cfg.name, cfg.num_classes);
        for (g, n) in &report.groups {
            outln!("  {g:<12} {n:>10}");
        }
        outln!("total {} ({})", report.total, millions(report.total));
    }
    Ok(())
}

fn global_mode(naive: bool) -> GlobalMode {
    if naive {
        GlobalMode::Naive
    } else {
        GlobalMode::Pooled
    }
}

fn flops(args: &ModelArgs, size: &str, classes: Option<usize>, naive: bool, json: bool) -> CmdResult {
    let cfg = load_config(args, classes)?;
    let (h, w) = lwplg::parse::parse_size(size).map_err(usage)?;
    let report = analysis::count_flops_with(&cfg, h, w, global_mode(naive)).map_err(usage)?;
    if json {
        outln!("{}", serde_json::to_string_pretty(&report).context("serializing report")?);
        return Ok(());
    }
    let g = |v: u64| v as f64 / 1e9;
    outln!("variant {} at {h}x{w} ({})", cfg.name, analysis::FLOP_CONVENTION);
    let mut groups = vec!["stem".to_string()];
    groups.extend((0..cfg.stages.len()).map(|i| format!("stages/{i}")));
    groups.extend(["expansion".to_string(), "head".to_string()]);
    for p in &groups {
        outln!("  {p:<12} {:>10.4} G", g(report.prefix_total(p)));
    }
    for (label, cat) in
        [("conv", FlopCategory::Conv), ("local attn", FlopCategory::LocalAttn), ("global attn", FlopCategory::GlobalAttn)]
    {
        outln!("  {label:<12} {:>10.4} G", g(report.category_total(cat)));
    }
    outln!("total {} MACs ({:.3} GFLOPs)", report.total, report.gflops());
    Ok(())
}

fn sweep_threads() -> Result<usize, Failure> {
    match std::env::var("LWPV_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| usage(anyhow!("LWPV_THREADS must be a positive integer, got `{v}`"))),
        Err(_) => Ok(1),
    }
}

fn sweep(args: &ModelArgs, sizes: &str, naive: bool, out: Option<&Path>) -> CmdResult {
    let cfg = load_config(args, None)?;
    let sizes = lwplg::parse::parse_sizes(sizes).map_err(usage)?;
    let threads = sweep_threads()?;
    let rows = analysis::resolution_sweep_parallel(&cfg, &sizes, global_mode(naive), threads).map_err(usage)?;
    let csv = analysis::sweep_csv(&rows);
    match out {
        Some(path) => {
            fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?;
            eprintln!("wrote {} rows to {}", rows.len(), path.display());
        }
        None => out!("{csv}"),
    }
    Ok(())
}

fn gradcheck(scope: ScopeArg, seed: u64, self_test: bool) -> CmdResult {
    let scope = match scope {
        ScopeArg::Op => Scope::Op,
        ScopeArg::Block => Scope::Block,
        ScopeArg::Model => Scope::Model,
        ScopeArg::All => Scope::All,
    };
    let results = gradcheck_suite(scope, Options { seed, self_test, ..Options::default() }).map_err(|e| anyhow!(e))?;
    outln!("{:<6} {:<52} {:>12} {:>8} {:>10}  result", "scope", "item", "max_rel_err", "checked", "unresolved");
    for r in &results {
        outln!(
            "{:<6} {:<52} {:>12.3e} {:>8} {:>10}  {}",
            format!("{:?}", r.scope).to_lowercase(),
            r.name,
            r.max_rel_error,
            r.checked,
            r.unresolved,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    outln!("{} items, {} failed (tolerance {GRAD_TOL:e})", results.len(), failed);
    if failed > 0 {
        return Err(Failure::Verification);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    classes: usize,
    steps: usize,
    lr: f64,
    seed: u64,
    batch: usize,
    log_every: usize,
    min_accuracy: Option<f64>,
    out: Option<&Path>,
) -> CmdResult {
    if classes == 0 || batch == 0 || !(lr.is_finite() && lr > 0.0) {
        return Err(usage(anyhow!("classes and batch must be positive and lr a positive number")));
    }
    let cfg = TrainConfig { classes, steps, lr, seed, batch, ..TrainConfig::default() };
    let stdout = std::io::stdout();
    let (model, report) = train_toy(&cfg, |s| {
        if log_every > 0 && (s.step % log_every == 0 || s.step + 1 == steps) {
            let _ = writeln!(stdout.lock(), "step {:>5}  loss {:.6}  batch_acc {:.3}", s.step, s.loss, s.batch_accuracy);
        }
    })
    .map_err(|e| match e {
        lwplg::Error::Diverged { .. } => {
            eprintln!("error: {e}");
            Failure::Verification
        }
        other => Failure::Runtime(anyhow!(other)),
    })?;
    outln!(
        "initial loss {:.6}, final loss {:.6} (mean of last {}), train accuracy {:.4}, trailing window non-increasing: {}",
        report.initial_loss,
        report.final_loss,
        cfg.window.min(steps.max(1)),
        report.train_accuracy,
        report.trailing_non_increasing
    );
    if let Some(path) = out {
        model::save_weights(&model.weights, path).with_context(|| format!("writing {}", path.display()))?;
        eprintln!("saved weights to {}", path.display());
    }
    if let Some(min) = min_accuracy {
        if report.train_accuracy < min {
            eprintln!("train accuracy {:.4} below required {min}", report.train_accuracy);
            return Err(Failure::Verification);
        }
    }
    Ok(())
}

fn infer(args: &ModelArgs, weights: Option<&Path>, image: &Path, size: usize, classes: Option<usize>, seed: u64) -> CmdResult {
    if size < model::MIN_INPUT {
        return Err(usage(anyhow!("--size must be at least {}", model::MIN_INPUT)));
    }
    let store = match weights {
        Some(p) => Some(model::load_weights::<f32>(p).with_context(|| format!("loading weights {}", p.display()))?),
        None => None,
    };
    let classes = classes.or_else(|| store.as_ref().and_then(|s| s.get("head/weight")).map(|t| t.dims()[0]));
    let cfg = load_config(args, classes)?;
    let model = match &store {
        Some(s) => Model::with_weights(&cfg, s).context("weights do not match the configuration")?,
        None => build_model(&cfg, seed).map_err(|e| anyhow!(e))?,
    };
    let bytes = fs::read(image).with_context(|| format!("reading {}", image.display()))?;
    let img = lwplg::image::decode_pnm(&bytes).with_context(|| format!("decoding {}", image.display()))?;
    let x = lwplg::image::preprocess(&img, size).map_err(|e| anyhow!(e))?;
    let logits = model.forward(&x).map_err(|e| anyhow!(e))?;
    let row: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
    let probs = lwplg::oracle::naive_softmax_row(&row);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    outln!("rank  class  score");
    for (rank, &k) in order.iter().take(5).enumerate() {
        outln!("{:>4}  {k:>5}  {:.6}", rank + 1, probs[k]);
    }
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Describe { model, json } => describe(&model, json),
        Command::Params { model, classes, json, csv } => params(&model, classes, json, csv),
        Command::Flops { model, size, classes, naive, json } => flops(&model, &size, classes, naive, json),
        Command::Sweep { model, sizes, naive, out } => sweep(&model, &sizes, naive, out.as_deref()),
        Command::Gradcheck { scope, seed, self_test } => gradcheck(scope, seed, self_test),
        Command::TrainToy { classes, steps, lr, seed, batch, log_every, min_accuracy, out } => {
            train(classes, steps, lr, seed, batch, log_every, min_accuracy, out.as_deref())
        }
        Command::Infer { model, weights, image, size, classes, seed } => {
            infer(&model, weights.as_deref(), &image, size, classes, seed)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification) => ExitCode::from(1),
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}\n\nRun `lwpv --help` for usage.");
            ExitCode::from(2)
        }
    }
}
