use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use trida_core::diagnostics::parse_diagnostics_csv;
use trida_core::harness::{self, mean_std, Recipe, RunConfig, RunReport};
use trida_core::taxonomy::{load_taxonomy, select_pretrain_classes};
use trida_core::Error;

/// Three-domain adaptation experiments.
#[derive(Parser, Debug)]
#[command(name = "trida", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Unsupervised domain adaptation with labeled source and unlabeled target.
    Uda(RunArgs),
    /// Source-free step 1: train on labeled source data.
    Sfuda1(RunArgs),
    /// Source-free step 2: adapt a step-1 model to unlabeled target data.
    Sfuda2(RunArgs),
    /// Fine-tune on source data with corrupted labels while tracking diagnostics.
    Probe(RunArgs),
    /// Synthesize pre-training images from the initial model.
    Synth(RunArgs),
    /// Select pre-training classes related to the target classes.
    Select(RunArgs),
    /// Summarize diagnostics CSV files and redraw their charts.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Key-value configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Number of runs with consecutive seeds.
    #[arg(long)]
    repeats: Option<usize>,
    /// Enable or disable all three intermediate-domain losses.
    #[arg(long, value_name = "on|off")]
    trida: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    source_checkpoint: Option<PathBuf>,
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Diagnostics CSV files written by earlier runs.
    #[arg(required = true)]
    files: Vec<PathBuf>,
    /// Directory for redrawn charts (defaults to each file's directory).
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self, recipe: Recipe) -> trida_core::Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.recipe = recipe;
        if let Some(p) = &self.config {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            cfg.apply_text(&text)?;
        }
        cfg.apply_env()?;
        cfg.recipe = recipe;
        let show = |p: &Path| p.display().to_string();
        let flags: [(&str, Option<String>); 11] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("run_id", self.run_id.clone()),
            ("output_dir", self.output_dir.as_deref().map(show)),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("repeats", self.repeats.map(|v| v.to_string())),
            ("trida", self.trida.clone()),
            ("trida.beta", self.beta.map(|v| v.to_string())),
            ("tau", self.tau.map(|v| v.to_string())),
            ("source_checkpoint", self.source_checkpoint.as_deref().map(show)),
            ("init_checkpoint", self.init_checkpoint.as_deref().map(show)),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

fn print_report(r: &RunReport) {
    let accs: Vec<String> = r.final_accuracy.iter().map(|(d, a)| format!("{d}={a:.4}")).collect();
    println!(
        "{} seed={} {} config={} ({:.1}s)",
        r.run_id,
        r.seed,
        accs.join(" "),
        &r.config_hash[..12],
        r.wall_clock_secs
    );
}

fn run_recipe(args: &RunArgs, recipe: Recipe) -> anyhow::Result<()> {
    let cfg = args.config(recipe)?;
    cfg.validate()?;
    let reports = harness::run_repeats(&cfg)?;
    for r in &reports {
        print_report(r);
    }
    if reports.len() > 1 {
        let acc: Vec<f64> = reports.iter().filter_map(|r| r.accuracy("target")).collect();
        if !acc.is_empty() {
            let (m, s) = mean_std(&acc);
            println!("target accuracy over {} seeds: {:.4} ± {:.4}", acc.len(), m, s);
        }
    }
    println!("outputs in {}", cfg.output_dir.display());
    Ok(())
}

fn select(args: &RunArgs) -> anyhow::Result<()> {
    let cfg = args.config(Recipe::SfudaStep1)?;
    cfg.validate()?;
    let domains = harness::load_domains(&cfg)?;
    let mut tax = load_taxonomy(&cfg.taxonomy)?;
    if let Some(p) = &cfg.class_map {
        tax.load_class_mapping(p)?;
    }
    let sel = select_pretrain_classes(&tax, domains.pretrain.class_set(), domains.target.class_set(), cfg.tau)?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let path = cfg.output_dir.join(format!("selection_{}.csv", cfg.run_id));
    sel.write_csv(&path)?;
    println!(
        "selected {} of {} pre-training classes at tau={}: {}",
        sel.selected.len(),
        domains.pretrain.class_set().len(),
        cfg.tau,
        sel.selected.join(",")
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn report(args: &ReportArgs) -> anyhow::Result<()> {
    for file in &args.files {
        let text = std::fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
        let records = parse_diagnostics_csv(&text).with_context(|| format!("reading {}", file.display()))?;
        let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
        let run_id = stem.strip_prefix("diag_").unwrap_or(stem);
        let dir = args
            .output_dir
            .clone()
            .unwrap_or_else(|| file.parent().map(Path::to_path_buf).unwrap_or_default());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        harness::write_charts(&records, &dir, run_id)?;
        match (records.first(), records.last()) {
            (Some(a), Some(b)) => println!(
                "{run_id}: epochs {}..{} w_st {:.4}->{:.4} w_sp {:.4}->{:.4} w_tp {:.4}->{:.4} silhouette {:.4}->{:.4} acc_target {:.4}->{:.4}",
                a.epoch, b.epoch, a.w_st, b.w_st, a.w_sp, b.w_sp, a.w_tp, b.w_tp, a.silhouette_pretrain, b.silhouette_pretrain, a.acc_target, b.acc_target
            ),
            _ => println!("{run_id}: no records"),
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Uda(a) => run_recipe(a, Recipe::Uda),
        Command::Sfuda1(a) => run_recipe(a, Recipe::SfudaStep1),
        Command::Sfuda2(a) => run_recipe(a, Recipe::SfudaStep2),
        Command::Probe(a) => run_recipe(a, Recipe::NoisyProbe),
        Command::Synth(a) => run_recipe(a, Recipe::Synthesize),
        Command::Select(a) => select(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
