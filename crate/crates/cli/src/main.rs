use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use taskweigh::bench::{
    fixtures::check_fixtures, run_benchmark, run_meta, train, BenchConfig, RunConfig,
};
use taskweigh::tasks::{export_dataset, generate_dataset, Preset};
use taskweigh::weighting::StrategyId;

#[derive(Parser)]
#[command(name = "taskweigh", version, about = "Multi-task loss weighting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Run(Common),
    /// Run a preset x method x seed matrix and print the comparison table.
    Bench(Common),
    /// Search task weights (and update periods) with the evolution strategy.
    Meta(Common),
    /// Recompute the published reference metrics and weight pairs.
    Fixtures,
    /// Write the generated dataset as JSON.
    ExportDataset(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    strategy: Option<StrategyId>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Worker threads for candidate and matrix evaluation.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory; defaults to a named directory under $TASKWEIGH_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn run_config(&self, default_strategy: StrategyId) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::new(Preset::ImbalancedSeg, default_strategy, 0),
        };
        if let Some(p) = self.preset {
            cfg.preset = p;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.strategy {
            cfg.strategy.id = s;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = Some(e);
        }
        Ok(cfg)
    }

    /// `--out`, else `$TASKWEIGH_OUT/<name>`, else `runs/<name>`.
    fn out_dir(&self, name: &str) -> PathBuf {
        if let Some(o) = &self.out {
            return o.clone();
        }
        let root = std::env::var_os("TASKWEIGH_OUT").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(name)
    }
}

fn run_name(kind: &str, cfg: &RunConfig) -> String {
    format!("{kind}-{}-{}-seed{}", cfg.preset.as_str(), cfg.strategy.id, cfg.seed)
}

fn cmd_run(args: &Common) -> Result<()> {
    let mut cfg = args.run_config(StrategyId::None)?;
    if cfg.out.is_none() || args.out.is_some() {
        cfg.out = Some(args.out_dir(&run_name("run", &cfg)));
    }
    let result = train(&cfg, None)?;
    let m = &result.metrics;
    println!(
        "{} on {}: mAP {:.4}  mIoU {:.4}  G {:.4}  ({} epochs, {:.1}s)",
        cfg.strategy.id,
        cfg.preset.as_str(),
        m.map,
        m.miou,
        m.combined,
        result.epochs.len(),
        result.wall_secs
    );
    println!("wrote {}", cfg.out.as_deref().unwrap_or(Path::new(".")).display());
    Ok(())
}

fn cmd_meta(args: &Common) -> Result<()> {
    let mut cfg = args.run_config(StrategyId::MetaAsync)?;
    if !cfg.strategy.id.is_meta() {
        cfg.strategy.id = StrategyId::MetaAsync;
    }
    cfg.strategy.weights = None;
    if cfg.out.is_none() || args.out.is_some() {
        cfg.out = Some(args.out_dir(&run_name("meta", &cfg)));
    }
    let meta = run_meta(&cfg, args.jobs)?;
    let w = meta.best_config.strategy.weights.unwrap_or([f64::NAN; 2]);
    let nu = meta.best_config.schedule.unwrap_or_default();
    println!(
        "best candidate {} after {} evaluations ({} new): G {:.4}  mAP {:.4}  mIoU {:.4}",
        meta.best.id,
        meta.history.len(),
        meta.evaluated,
        meta.best.fitness,
        meta.result.metrics.map,
        meta.result.metrics.miou
    );
    println!("weights seg {:.4} det {:.4}  periods seg {} det {}", w[0], w[1], nu.nu_seg, nu.nu_det);
    println!("wrote {}", cfg.out.as_deref().unwrap_or(Path::new(".")).display());
    Ok(())
}

fn cmd_bench(args: &Common) -> Result<()> {
    let mut bench = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            BenchConfig::from_toml(&text)?
        }
        None => BenchConfig::default(),
    };
    if let Some(p) = args.preset {
        bench.presets = vec![p];
    }
    if let Some(s) = args.seed {
        bench.seeds = vec![s];
    }
    if let Some(s) = args.strategy {
        bench.methods = vec![s];
    }
    if let Some(e) = args.epochs {
        bench.base.epochs = Some(e);
    }
    bench.validate()?;
    let matrix = bench.matrix();
    info!("running {} configurations on {} worker(s)", matrix.len(), args.jobs);
    let table = run_benchmark(&matrix, args.jobs)?;
    print!("{}", table.render());
    let out = args.out_dir("bench");
    table.write(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_fixtures() -> Result<()> {
    let report = check_fixtures()?;
    print!("{}", report.render());
    println!(
        "max G error {:.1e}, max average error {:.1e}, max weight-sum error {:.1e}",
        report.max_row_error(),
        report.max_average_error(),
        report.max_weight_sum_error()
    );
    if !report.passes() {
        bail!("reference values are not reproduced");
    }
    Ok(())
}

fn cmd_export(args: &Common) -> Result<()> {
    let cfg = args.run_config(StrategyId::None)?;
    let data = generate_dataset(&cfg.benchmark_config()?)?;
    let mut path = args.out_dir(&format!("dataset-{}-seed{}", cfg.preset.as_str(), cfg.seed));
    if path.extension().is_none() {
        path = path.join("dataset.json");
    }
    export_dataset(&data, &path)?;
    println!(
        "wrote {} ({} train, {} with segmentation labels, {} val)",
        path.display(),
        data.train.len(),
        data.train_seg().len(),
        data.val.len()
    );
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<taskweigh::Error>())
        .map_or(1, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Meta(a) => cmd_meta(a),
        Command::Fixtures => cmd_fixtures(),
        Command::ExportDataset(a) => cmd_export(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
