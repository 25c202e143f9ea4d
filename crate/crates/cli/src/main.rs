use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use starlight_cli::commands::{self, ModelRef};
use starlight_cli::{CliResult, ExperimentConfig, RunContext};

#[derive(Parser)]
#[command(name = "starlight", version, about = "Star-model training and loss-barrier experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; checkpoints are reused when their inputs match.
    #[arg(long)]
    run_dir: PathBuf,
    /// Overrides the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source and held-out models.
    Train(Common),
    /// Train the configured star model.
    Star(Common),
    /// Regular-regular, star-regular and star-source barrier tables.
    Barrier(Common),
    /// Interpolation curve between two models (`source:I`, `heldout:I`, `star`, `star_fusion` or a checkpoint path).
    Curve {
        #[command(flatten)]
        common: Common,
        a: String,
        b: String,
    },
    /// Run the config's [sweep] section.
    Sweep(Common),
    /// Star-domain versus deep-ensemble uncertainty.
    Bma(Common),
    /// Regular, ensemble and fusion-star test accuracy.
    Fuse(Common),
}

fn open(c: &Common) -> CliResult<RunContext> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    RunContext::open(cfg, &c.run_dir)
}

fn run(cli: Cli) -> CliResult<()> {
    let started = Instant::now();
    let (name, ctx) = match &cli.command {
        Command::Train(c) => {
            let ctx = open(c)?;
            for r in commands::train(&ctx)? {
                println!("{} {}: train loss {:.4}, test acc {:.4}", r.role, r.index, r.train_loss, r.test_accuracy);
            }
            ("train", ctx)
        }
        Command::Star(c) => {
            let ctx = open(c)?;
            let s = commands::star(&ctx)?;
            println!(
                "{} ({}): train loss {:.4}, test acc {:.4}, {} re-alignments",
                s.report.name, s.report.objective, s.report.train_loss, s.report.test_accuracy, s.report.repermutations
            );
            ("star", ctx)
        }
        Command::Barrier(c) => {
            let ctx = open(c)?;
            let t = commands::barrier(&ctx)?.table;
            println!("regular-regular {:.4} +- {:.4}", t.regular_regular.mean, t.regular_regular.std);
            println!("star-regular    {:.4} +- {:.4}", t.star_regular.mean, t.star_regular.std);
            println!("star-source     {:.4} +- {:.4}", t.star_source.mean, t.star_source.std);
            println!("ratio {:.3}, gap {:.2} pooled std", t.ratio, t.gap_in_pooled_std);
            ("barrier", ctx)
        }
        Command::Curve { common, a, b } => {
            let ctx = open(common)?;
            let s = commands::curve(&ctx, &a.parse::<ModelRef>()?, &b.parse::<ModelRef>()?)?;
            println!("barrier {:.6} at t = {}", s.barrier, s.argmax_t);
            ("curve", ctx)
        }
        Command::Sweep(c) => {
            let ctx = open(c)?;
            for p in commands::sweep(&ctx)? {
                println!(
                    "{}: regular-regular {:.4}, star-regular {:.4}, star train loss {:.4}",
                    p.value, p.regular_regular.mean, p.star_regular.mean, p.star_train_loss
                );
            }
            ("sweep", ctx)
        }
        Command::Bma(c) => {
            let ctx = open(c)?;
            for r in commands::bma(&ctx)? {
                println!("{:?} k={}: auroc {:.4}, ece {:.4}, acc {:.4}", r.mode, r.k, r.report.auroc_maxprob, r.report.ece, r.report.accuracy);
            }
            ("bma", ctx)
        }
        Command::Fuse(c) => {
            let ctx = open(c)?;
            for r in commands::fuse(&ctx)? {
                println!(
                    "|Z|={}: regular {:.4} +- {:.4}, ensemble {:.4}, fusion star {:.4}",
                    r.num_sources, r.regular_mean, r.regular_std, r.ensemble, r.star_fusion
                );
            }
            ("fuse", ctx)
        }
    };
    ctx.finish(name, started)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
