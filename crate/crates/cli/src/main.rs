use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use mhl_cli::{
    classify, cmd_decode, cmd_evaluate, cmd_prepare, cmd_report, cmd_tokenize, cmd_train, default_run_root,
    resolve_config, ExitKind, RunDir, RUN_ROOT_ENV,
};

#[derive(Parser)]
#[command(name = "mhl", version, about = "Masked history learning for semantic-ID recommenders")]
struct Cli {
    /// Directory holding run directories.
    #[arg(long, global = true, env = RUN_ROOT_ENV)]
    run_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run identifier; artifacts go to <run root>/<run id>/.
    #[arg(long)]
    run_id: String,
    /// TOML config file (merged over its `preset`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset: `desk` or `paper-appendixC`.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Override one field, e.g. `--set train.gamma0=0`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest (or generate) the corpus and write the leave-one-out split.
    Prepare(ConfigArgs),
    /// Fit semantic IDs and the item graph.
    Tokenize(ConfigArgs),
    /// Train through the masking curriculum.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from checkpoints/last.ckpt if present.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs in this invocation (resumable).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Test-set Recall/NDCG, optionally with the truncation pilot.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        pilot: bool,
    },
    /// Write top-k rankings for test contexts or a JSONL of contexts.
    Decode {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// JSONL lines of {"user_id": .., "item_ids": [..]}.
        #[arg(long)]
        contexts: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        topk: usize,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Join run manifests into a comparison table and plot CSVs.
    Report {
        /// Run directories or manifest.json files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.run_root.unwrap_or_else(default_run_root);
    let setup = |a: &ConfigArgs| -> Result<_> {
        let run = RunDir::new(&root, &a.run_id)?;
        let cfg = resolve_config(&run, a.config.as_deref(), a.preset.as_deref(), &a.overrides)?;
        Ok((run, cfg))
    };
    match cli.command {
        Command::Prepare(a) => {
            let (run, cfg) = setup(&a)?;
            let hash = cmd_prepare(&cfg, &run)?;
            println!("prepared {} ({hash})", run.path.display());
        }
        Command::Tokenize(a) => {
            let (run, cfg) = setup(&a)?;
            let hash = cmd_tokenize(&cfg, &run)?;
            println!("tokenized {} ({hash})", run.path.display());
        }
        Command::Train { cfg: a, resume, epochs } => {
            let (run, cfg) = setup(&a)?;
            let s = cmd_train(&cfg, &run, resume, epochs)?;
            let best = s.best_val_ndcg10.map_or("-".into(), |v| format!("{v:.4}"));
            match &s.final_checkpoint {
                Some(p) => println!("trained {} epochs, best val N@10 {best}, wrote {}", s.epochs, p.display()),
                None => println!("paused after epoch {}, best val N@10 {best}; rerun with --resume", s.epochs),
            }
        }
        Command::Evaluate { cfg: a, checkpoint, pilot } => {
            let (run, cfg) = setup(&a)?;
            let s = cmd_evaluate(&cfg, &run, checkpoint.as_deref(), pilot)?;
            for m in &s.report.metrics {
                println!("R@{k} {:.4}  N@{k} {:.4}", m.recall, m.ndcg, k = m.k);
            }
            if let Some(p) = s.pilot {
                match p.relative_ndcg10_change {
                    Some(pct) => println!("pilot: truncated N@10 change {pct:+.1}% over {} users", p.full.n_users),
                    None => println!("pilot: full-history N@10 is 0, relative change undefined"),
                }
            }
        }
        Command::Decode {
            cfg: a,
            checkpoint,
            contexts,
            topk,
            limit,
        } => {
            let (run, cfg) = setup(&a)?;
            let out = cmd_decode(&cfg, &run, checkpoint.as_deref(), contexts.as_deref(), topk, limit)?;
            println!("wrote {}", out.display());
        }
        Command::Report { inputs, out } => {
            let table = cmd_report(&inputs, &out)?;
            print!("{}", table.to_markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { ExitKind::Usage as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = classify(&e);
            eprintln!("error: {e:#}");
            ExitCode::from(kind as u8)
        }
    }
}
