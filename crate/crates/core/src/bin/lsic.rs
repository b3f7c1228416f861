use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lsic::config::RunConfig;
use lsic::mixture::MixtureVariant;
use lsic::pipeline::{self, Prepared, CHECKPOINT_FILE};
use lsic::{Error, Result};

#[derive(Parser)]
#[command(name = "lsic", version, about = "Long- and session-based top-n movie recommendation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Mixture variant: v1, v2, v3 or v4.
    #[arg(long, global = true)]
    mixture: Option<MixtureVariant>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Extra overrides, `key=value`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, split and sessionize the data; print statistics.
    Ingest,
    /// MF, pretraining and adversarial training.
    Train {
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Test-set metrics for MF and the trained mixture.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also score without content features.
        #[arg(long)]
        no_content: bool,
    },
    /// Top-n unwatched movies for a user.
    Recommend {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        user: i64,
        #[arg(default_value_t = 10)]
        n: usize,
    },
    /// Retrain and evaluate for several session lengths (days).
    SweepSessions {
        #[arg(value_delimiter = ',', default_values_t = vec![7, 14, 30, 60, 90])]
        periods: Vec<u32>,
    },
    /// Re-rank evaluation for several candidate counts.
    SweepCandidates {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(value_delimiter = ',', default_values_t = vec![20, 50, 100, 200, 500])]
        n: Vec<usize>,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &c.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(m) = c.mixture {
        cfg.mixture = m;
    }
    if let Some(o) = &c.out_dir {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let ck = |p: Option<PathBuf>| p.unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE));
    match cli.command {
        Command::Ingest => {
            let prep = pipeline::cmd_ingest(&cfg)?;
            print!("{}", prep.summary());
        }
        Command::Train { checkpoint } => {
            let prep = Prepared::load(&cfg)?;
            let t = pipeline::cmd_train(&cfg, &prep, checkpoint.as_deref())?;
            println!(
                "best epoch {} (validation NDCG@5 {:.4}); checkpoint {}",
                t.state.best_epoch,
                t.state.best_ndcg,
                cfg.out_dir.join(CHECKPOINT_FILE).display()
            );
        }
        Command::Evaluate { checkpoint, no_content } => {
            let prep = Prepared::load(&cfg)?;
            for r in pipeline::cmd_evaluate(&cfg, &prep, &ck(checkpoint), no_content)? {
                println!("{}", r.table());
            }
        }
        Command::Recommend { checkpoint, user, n } => {
            let prep = Prepared::load(&cfg)?;
            let recs = pipeline::cmd_recommend(&cfg, &prep, &ck(checkpoint), user, n)?;
            if recs.is_empty() {
                println!("user {user} has rated every movie; nothing to recommend");
            }
            for (rank, (movie, score)) in recs.iter().enumerate() {
                println!("{:>3}  {movie:>7}  {score:.6}", rank + 1);
            }
        }
        Command::SweepSessions { periods } => print!("{}", pipeline::cmd_sweep_sessions(&cfg, &periods)?),
        Command::SweepCandidates { checkpoint, n } => {
            let prep = Prepared::load(&cfg)?;
            print!("{}", pipeline::cmd_sweep_candidates(&cfg, &prep, &ck(checkpoint), &n)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
