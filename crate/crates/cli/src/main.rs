use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use liveness_core::datagen::{gen_benchmark, load_manifest, write_dataset};
use liveness_core::harness::{
    evaluate, run_protocol, train, BetaSchedule, ComparisonTable, Protocol, ProtocolPlan, Suite,
    TrainConfig, REPORT_FILE, SUMMARY_CSV,
};
use liveness_core::metrics::ThresholdRule;
use liveness_core::parallel::Exec;
use liveness_core::pdle::EncodingMode;
use liveness_core::LabeledImage;

#[derive(Parser)]
#[command(name = "liveness", version, about = "Liveness-score regression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-domain dataset (PNG files plus manifest.csv).
    Gen(GenArgs),
    /// Train one model and evaluate it on the test split.
    Train {
        #[command(flatten)]
        train: TrainArgs,
        /// Directory for the checkpoint, log and report.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a manifest with a saved checkpoint.
    Eval(EvalArgs),
    /// Run the four label-encoding variants with matched seeds.
    Ablate {
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the discretization level K.
    Ksweep {
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        plan: PlanArgs,
        /// K values to run.
        #[arg(long, value_delimiter = ',', default_values_t = liveness_core::harness::K_SWEEP.to_vec())]
        k_values: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    domains: usize,
    #[arg(long, default_value_t = 500)]
    per_class: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write one manifest per domain (manifest_d{id}.csv).
    #[arg(long)]
    split_domains: bool,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Manifest that fixes the threshold under the dev-eer rule.
    #[arg(long)]
    dev_manifest: Option<PathBuf>,
    /// dev-eer, test-eer, or fixed:<tau>.
    #[arg(long, default_value = "test-eer")]
    threshold: String,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Encoding {
    Full,
    PatchOnly,
    LabelOnly,
    Off,
}

impl From<Encoding> for EncodingMode {
    fn from(e: Encoding) -> Self {
        match e {
            Encoding::Full => EncodingMode::Full,
            Encoding::PatchOnly => EncodingMode::PatchOnly,
            Encoding::LabelOnly => EncodingMode::LabelOnly,
            Encoding::Off => EncodingMode::Off,
        }
    }
}

/// Training options. Each flag overrides the config file, which overrides
/// the built-in defaults.
#[derive(Args)]
struct TrainArgs {
    /// TOML file with `TrainConfig` keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Ramp beta in with this steepness instead of keeping it constant.
    #[arg(long)]
    beta_ramp: Option<f64>,
    #[arg(long)]
    p_apply: Option<f64>,
    #[arg(long, value_enum)]
    encoding: Option<Encoding>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    lr_gamma: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Square crop fed to the network.
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long)]
    domain_hidden: Option<usize>,
    /// Training manifest; repeat for several.
    #[arg(long = "train-manifest")]
    train_manifests: Vec<PathBuf>,
    #[arg(long)]
    test_manifest: Option<PathBuf>,
    /// Hold this domain out (leave-one-domain-out protocol).
    #[arg(long, conflicts_with = "intra")]
    held_out: Option<usize>,
    /// Split every domain into train and test (intra protocol).
    #[arg(long)]
    intra: bool,
    /// dev-eer, test-eer, or fixed:<tau>.
    #[arg(long)]
    threshold: Option<String>,
    #[arg(long)]
    sequential: bool,
    #[arg(long)]
    log_exchanges: bool,
}

impl TrainArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { cfg.$field = v; })*
            };
        }
        set!(
            k => k,
            alpha => alpha,
            beta => beta,
            p_apply => p_apply,
            lr => learning_rate,
            weight_decay => weight_decay,
            lr_gamma => lr_gamma,
            batch_size => batch_size,
            epochs => max_epochs,
            seed => seed,
            widths => encoder_widths,
            domain_hidden => domain_hidden,
        );
        if let Some(steepness) = self.beta_ramp {
            cfg.beta_schedule = BetaSchedule::Ramp { steepness };
        }
        if let Some(e) = self.encoding {
            cfg.encoding = e.into();
        }
        if let Some(c) = self.crop {
            cfg.crop_size = (c, c);
        }
        if !self.train_manifests.is_empty() {
            cfg.train_manifests = self.train_manifests.clone();
        }
        if let Some(t) = &self.test_manifest {
            cfg.test_manifest = Some(t.clone());
        }
        if let Some(held_out) = self.held_out {
            cfg.protocol = Protocol::LeaveOneOut { held_out };
        }
        if self.intra {
            cfg.protocol = Protocol::Intra;
        }
        if let Some(rule) = &self.threshold {
            cfg.threshold = rule.parse()?;
        }
        if self.sequential {
            cfg.exec = Exec::Sequential;
        }
        if self.log_exchanges {
            cfg.log_exchanges = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    /// Domains to hold out in turn; defaults to all of them.
    #[arg(long = "hold-out", value_delimiter = ',')]
    hold_out: Vec<usize>,
}

fn exec(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let images = gen_benchmark(
        args.domains,
        args.per_class,
        (args.size, args.size),
        args.seed,
        exec(args.sequential),
    )?;
    let (path, manifest) = write_dataset(&args.out, &images, args.seed)?;
    println!("wrote {} images, manifest {}", manifest.rows.len(), path.display());
    if args.split_domains {
        for d in 0..args.domains {
            let mut sub = manifest.clone();
            sub.rows.retain(|r| r.domain == d);
            let p = args.out.join(format!("manifest_d{d}.csv"));
            fs::write(&p, sub.to_text())?;
            println!("domain {d}: {} rows, {}", sub.rows.len(), p.display());
        }
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs, out: &Path) -> Result<()> {
    let cfg = args.resolve()?;
    let outcome = train(&cfg, Some(out))?;
    let r = &outcome.report;
    for e in &r.epochs {
        println!(
            "epoch {:>3}  lr {:.3e}  mse {:.5}  adv {}  total {:.5}",
            e.epoch,
            e.lr,
            e.mse,
            e.adv.map_or("-".to_string(), |a| format!("{a:.5}")),
            e.total
        );
    }
    println!(
        "test: auc {:.4}  eer {:.4}  acer {:.4}  hter {:.4}  (tau {:.4}, {})",
        r.metrics.auc, r.metrics.eer, r.metrics.acer, r.metrics.hter, r.metrics.tau, cfg.threshold
    );
    println!("report written to {}", out.join(REPORT_FILE).display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let rule: ThresholdRule = args.threshold.parse()?;
    let report = evaluate(
        &args.checkpoint,
        &args.manifest,
        rule,
        args.dev_manifest.as_deref(),
        exec(args.sequential),
    )?;
    let json = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => fs::write(path, json).with_context(|| format!("writing {}", path.display()))?,
        None => println!("{json}"),
    }
    Ok(())
}

/// Every image named by the configured manifests, pooled.
fn pooled_images(cfg: &TrainConfig) -> Result<Vec<LabeledImage>> {
    if cfg.train_manifests.is_empty() {
        bail!("no training manifest given (use --train-manifest or the config file)");
    }
    let mut images = Vec::new();
    for path in cfg.train_manifests.iter().chain(cfg.test_manifest.iter()) {
        images.extend(load_manifest(path)?.images);
    }
    Ok(images)
}

fn print_table(table: &ComparisonTable, out: &Path) {
    println!("{:<12} {:>3} {:>5} {:>9} {:>8} {:>9} {:>9}", "variant", "K", "runs", "mean AUC", "std", "mean ACER", "mean HTER");
    for s in &table.summary {
        println!(
            "{:<12} {:>3} {:>5} {:>9.4} {:>8.4} {:>9.4} {:>9.4}",
            s.variant, s.k, s.runs, s.mean_auc, s.std_auc, s.mean_acer, s.mean_hter
        );
    }
    println!("tables written to {}", out.join(SUMMARY_CSV).display());
}

fn cmd_suite(suite: Suite, train: &TrainArgs, plan: &PlanArgs, k_values: Option<&[usize]>, out: &Path) -> Result<()> {
    let cfg = train.resolve()?;
    let images = pooled_images(&cfg)?;
    let plan = ProtocolPlan {
        seeds: plan.seeds.clone(),
        held_out: plan.hold_out.clone(),
        k_values: k_values.map_or_else(|| ProtocolPlan::default().k_values, <[usize]>::to_vec),
    };
    let table = run_protocol(suite, &cfg, &images, &plan, Some(out))?;
    print_table(&table, out);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train { train, out } => cmd_train(train, out),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate { train, plan, out } => cmd_suite(Suite::Ablation, train, plan, None, out),
        Command::Ksweep {
            train,
            plan,
            k_values,
            out,
        } => cmd_suite(Suite::KSweep, train, plan, Some(k_values), out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
