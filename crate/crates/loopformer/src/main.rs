use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use loopformer::config::keys_help;
use loopformer::run::{self, DecodeOptions};
use loopformer::{CliError, Result, RunConfig};

#[derive(Parser)]
#[command(
    name = "loopformer",
    version,
    about = "Train and decode depth-recurrent transformers"
)]
#[command(after_help = after_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file; unset keys keep their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set model.encoder.loops=3`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic or file corpora and the vocabulary
    MakeData(ConfigArgs),
    /// Train a model, writing metrics and checkpoints to --out-dir
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Average the last K checkpoints into ckpt-avg
        #[arg(long, value_name = "K")]
        average_last: Option<usize>,
    },
    /// Decode one sentence per line
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to <out-dir>/translations.txt
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// 1 is greedy; defaults to eval.beam of the checkpoint
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Corpus BLEU of a hypothesis file against a reference file
    Score {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Parameter counts; writes params.csv to --out-dir
    CountParams(ConfigArgs),
    /// Finite-difference and clone-and-sum gradient checks on a tiny model
    GradCheck {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn after_help() -> String {
    format!(
        "Config keys (file lines or --set):\n{}\nLOOPFORMER_LOG selects error, info or debug logging.\nExit codes: 0 ok, 1 config or usage error, 2 runtime failure.",
        keys_help()
    )
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for item in &args.overrides {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{item}`")))?;
        cfg.apply(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_out(dir: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    loopformer::files::write_text(&dir.join(name), text)
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::MakeData(args) => {
            let cfg = load_config(&args)?;
            for path in run::make_data(&cfg, &args.out_dir)? {
                println!("{}", path.display());
            }
        }
        Command::Train {
            config,
            average_last,
        } => {
            let cfg = load_config(&config)?;
            let s = run::train(&cfg, &config.out_dir, average_last)?;
            println!("steps {}", s.steps);
            println!("final loss {:.6}", s.final_loss);
            if let Some(acc) = s.accuracy {
                println!("held-out token accuracy {acc:.4}");
            }
            if let Some(p) = s.checkpoints.last() {
                println!("checkpoint {}", p.display());
            }
            if let Some(p) = s.averaged {
                println!("averaged {}", p.display());
            }
        }
        Command::Translate {
            checkpoint,
            vocab,
            input,
            output,
            out_dir,
            beam,
            alpha,
            max_len,
        } => {
            let output = output.unwrap_or_else(|| out_dir.join(run::TRANSLATIONS_FILE));
            let opts = DecodeOptions {
                beam,
                alpha,
                max_len,
            };
            let n = run::translate_file(&checkpoint, &vocab, &input, &output, &opts)?;
            println!("{n} lines -> {}", output.display());
        }
        Command::Score { hyp, reference } => {
            println!("{}", run::score(&hyp, &reference)?);
        }
        Command::CountParams(args) => {
            let cfg = load_config(&args)?;
            let report = run::param_report(&cfg.model_config());
            print!("{}", report.text);
            write_out(&args.out_dir, "params.csv", &report.csv)?;
        }
        Command::GradCheck { config, seed } => {
            let cfg = load_config(&config)?;
            let entries = run::grad_check(&cfg, seed)?;
            let mut failed = Vec::new();
            let mut csv = String::from("check,max_rel_err,tolerance,passed\n");
            for e in &entries {
                let ok = e.passed();
                println!(
                    "{} {:<28} {:.3e} (< {:.0e})",
                    if ok { "ok  " } else { "FAIL" },
                    e.name,
                    e.max_rel_err,
                    e.tolerance
                );
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    e.name, e.max_rel_err, e.tolerance, ok
                ));
                if !ok {
                    failed.push(e.name.clone());
                }
            }
            write_out(&config.out_dir, "gradcheck.csv", &csv)?;
            if !failed.is_empty() {
                return Err(CliError::GradCheck(failed.join(", ")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LOOPFORMER_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
