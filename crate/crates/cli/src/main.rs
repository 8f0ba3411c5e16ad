use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use tengrad::fisher::{flop_report, LayerDims};
use tengrad::harness::{
    dump_block, grid_preset, parallel_map, prepare_data, run_experiment, run_rates, tune, verify, ExperimentConfig,
    RatesConfig,
};

#[derive(Parser)]
#[command(name = "tengrad", version, about = "Natural gradient training with Woodbury-inverted Fisher blocks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from one or more config files and write their trace CSVs.
    Train {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        /// Independent configs to run at once.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Grid-search lr, weight decay and damping before the full run.
        #[arg(long)]
        tune: bool,
    },
    /// Run a verification suite: factorization, woodbury, jvpvjp, general,
    /// gradients, flops, convergence or all.
    Verify { suite: String },
    /// Full-batch convergence-rate runs over several seeds.
    Rates { config: PathBuf },
    /// Closed-form multiply-add counts. `DIxDO` for a dense layer,
    /// `SxFxC` for a conv layer (spatial x patch x output channels).
    Flops {
        dims: String,
        #[arg(long, short = 'm', default_value_t = 128)]
        batch: usize,
    },
    /// Write the dense damped block inverse of one layer at initialization.
    DumpBlock { config: PathBuf, layer: usize, out: PathBuf },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(2)
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig::from_file(path)?;
    c.apply_seed_env()?;
    Ok(c)
}

fn train_one(path: &Path, with_tuning: bool) -> Result<String> {
    // load errors already name the file
    let mut config = load_config(path)?;
    train_loaded(path, &mut config, with_tuning).with_context(|| path.display().to_string())
}

fn train_loaded(path: &Path, config: &mut ExperimentConfig, with_tuning: bool) -> Result<String> {
    let mut lines = Vec::new();
    if with_tuning {
        let (train, test) = prepare_data(config)?;
        let result = tune(config, &train, test.as_ref(), &grid_preset(), 1)?;
        lines.push(format!(
            "{}: tuned lr {} weight_decay {} damping {} (train loss {:.6} after {} epochs, {} runs)",
            path.display(),
            result.best.lr,
            result.best.weight_decay,
            result.best.damping,
            result.best_score,
            config.tune.epochs,
            result.evaluated.len()
        ));
        config.optim = result.best;
    }
    let trace = run_experiment(config)?;
    lines.push(format!("{}: {}", path.display(), trace.summary()));
    if let Some(out) = &config.output {
        lines.push(format!("{}: trace written to {}", path.display(), out.display()));
    }
    Ok(lines.join("\n"))
}

fn parse_dims(dims: &str) -> Result<LayerDims> {
    let parts: Vec<usize> = dims
        .split('x')
        .map(|p| p.trim().parse().with_context(|| format!("bad dimension `{}` in `{}`", p, dims)))
        .collect::<Result<_>>()?;
    match parts[..] {
        [d_in, d_out] => Ok(LayerDims::Dense { d_in, d_out }),
        [spatial, patch, c_out] => Ok(LayerDims::Conv { spatial, patch, c_out }),
        _ => Err(anyhow!("expected DIxDO or SxFxC, got `{}`", dims)),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { configs, jobs, tune } => {
            let results = parallel_map(&configs, jobs, |p| train_one(p, tune));
            let mut failed = false;
            for r in results {
                match r {
                    Ok(summary) => println!("{}", summary),
                    Err(e) => {
                        failed = true;
                        eprintln!("error: {:#}", e);
                    }
                }
            }
            Ok(if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
        }
        Command::Verify { suite } => {
            let report = verify::verify(&suite)
                .ok_or_else(|| anyhow!("unknown suite `{}`; expected one of {:?} or all", suite, verify::SUITES))??;
            println!("{}", report);
            Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Rates { config } => {
            let mut cfg = RatesConfig::from_file(&config)?;
            cfg.apply_seed_env()?;
            let outcomes = run_rates(&cfg)?;
            let holding = outcomes.iter().filter(|o| o.rate_holds(cfg.k_max)).count();
            for o in &outcomes {
                println!("{}", o.summary(cfg.k_max));
            }
            println!("rate held through k={} in {} of {} seeds", cfg.k_max, holding, outcomes.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::Flops { dims, batch } => {
            if batch == 0 {
                bail!("batch must be at least 1");
            }
            let r = flop_report(parse_dims(&dims)?, batch);
            println!("covfactor          {}", r.covfactor);
            println!("factorization      {}", r.factorization);
            println!("tengrad_curvature  {}", r.tengrad_curvature);
            println!("explicit_gram      {}", r.explicit_gram);
            println!("jvp                {}", r.jvp);
            println!("solve              {}", r.solve);
            println!("vjp                {}", r.vjp);
            println!("combine            {}", r.combine);
            println!("tengrad_step       {}", r.tengrad_step);
            println!("tengrad_storage    {}", r.tengrad_storage);
            println!("explicit/curvature {:.4}", r.explicit_gram as f64 / r.tengrad_curvature.max(1) as f64);
            Ok(ExitCode::SUCCESS)
        }
        Command::DumpBlock { config, layer, out } => {
            let cfg = load_config(&config)?;
            let block = dump_block(&cfg, layer)?;
            let mut w = std::io::BufWriter::new(
                std::fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?,
            );
            for r in 0..block.rows() {
                let row: Vec<String> = block.row(r).iter().map(|v| format!("{:e}", v)).collect();
                writeln!(w, "{}", row.join(","))?;
            }
            w.flush()?;
            println!("{}x{} block written to {}", block.rows(), block.cols(), out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
