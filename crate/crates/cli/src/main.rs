use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use reid_adapt::harness::{self, keys_help, HarnessError, RunConfig};

#[derive(Parser)]
#[command(
    name = "reid-adapt",
    version,
    about = "Adversarial attribute adaptation for person re-identification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key=value config file
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides `seed`
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `out_dir`
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides one key; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate source and target sample files
    #[command(after_help = keys_help())]
    Synth(Common),
    /// Fit the source encoder and attribute classifier
    #[command(after_help = keys_help())]
    Pretrain(Common),
    /// Adapt the encoder to the unlabelled target domain
    #[command(after_help = keys_help())]
    Adapt(Common),
    /// Rank the target gallery and write a report
    #[command(after_help = keys_help())]
    Eval(Common),
    /// Run a preset comparison: table1 | fig4
    #[command(after_help = keys_help())]
    Experiment {
        preset: String,
        #[command(flatten)]
        common: Common,
    },
}

fn config(c: &Common) -> Result<RunConfig, HarnessError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &c.config {
        cfg.apply_file(path)?;
    }
    if let Some(seed) = c.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(out) = &c.out {
        cfg.set("out_dir", &out.to_string_lossy())?;
    }
    for pair in &c.sets {
        cfg.set_pair(pair)?;
    }
    Ok(cfg)
}

fn run(cmd: Command) -> Result<(), HarnessError> {
    match cmd {
        Command::Synth(c) => {
            for path in harness::cmd_synth(&config(&c)?)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Pretrain(c) => {
            let out = harness::cmd_pretrain(&config(&c)?)?;
            if let (Some(first), Some(last)) = (out.history.first(), out.history.last()) {
                println!("attr loss {first:.4} -> {last:.4} over {} epochs", out.history.len());
            }
        }
        Command::Adapt(c) => {
            let out = harness::cmd_adapt(&config(&c)?)?;
            if let Some(r) = out.trace.records.last() {
                let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
                println!(
                    "epoch {}: d_loss {} m_loss {} rank1 {} mAP {}",
                    r.epoch,
                    fmt(r.d_loss),
                    fmt(r.m_loss),
                    fmt(r.metrics.rank1),
                    fmt(r.metrics.map)
                );
            }
        }
        Command::Eval(c) => println!("{}", harness::cmd_eval(&config(&c)?)?),
        Command::Experiment { preset, common } => {
            let path = harness::cmd_experiment(&preset, &config(&common)?)?;
            print!("{}", std::fs::read_to_string(&path).unwrap_or_default());
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
