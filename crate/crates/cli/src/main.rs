use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lidctc::corpus::Split;
use lidctc::eval::decode_all;
use lidctc::harness::checks::{ctc_oracle_sweep, full_loss_grad_check};
use lidctc::harness::{
    evaluate_model, generate_data, run_experiment_matrix, train, write_report, DataConfig, Dataset,
    Run, TrainConfig,
};
use lidctc::{ConditioningMode, LossConfig};

#[derive(Parser)]
#[command(
    name = "lidctc",
    version,
    about = "Language-conditioned hierarchical CTC on synthetic speech"
)]
struct Cli {
    /// JSON config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// overrides the seed in the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multilingual corpus
    GenCorpus {
        /// utterances per language
        #[arg(long)]
        utts: Option<usize>,
    },
    /// Train one model and evaluate it on the test split
    Train {
        /// corpus directory written by `gen-corpus`
        #[arg(long)]
        data: Option<PathBuf>,
        /// none, sc_ctc, lid_utt, lid_tok, hier_lid_utt or hier_lid_tok
        #[arg(long)]
        mode: Option<ConditioningMode>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Decode a split with a trained run, one JSON line per utterance
    Decode(RunArgs),
    /// Score a trained run on a split
    Eval(RunArgs),
    /// Compare the CTC loss against path enumeration
    CtcCheck {
        #[arg(long, default_value_t = 50)]
        draws: usize,
    },
    /// Finite-difference check of the full training objective
    GradCheck {
        /// conditioning mode of the toy model (all modes when omitted)
        #[arg(long)]
        mode: Option<ConditioningMode>,
    },
    /// Train and evaluate several conditioning modes
    Matrix {
        /// corpus directory written by `gen-corpus`
        #[arg(long)]
        data: Option<PathBuf>,
        /// comma-separated modes (all when omitted)
        #[arg(long, value_delimiter = ',')]
        modes: Vec<ConditioningMode>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// run directory written by `train`
    #[arg(long)]
    run: PathBuf,
    /// corpus directory (defaults to the one the run was trained on)
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    lambda_dec: Option<f64>,
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?}")),
    }
}

fn train_config(cli: &Cli) -> Result<TrainConfig, String> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::load(p).map_err(|e| e.to_string())?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn open_run(args: &RunArgs) -> Result<(Run, Dataset), String> {
    let mut run = Run::open(&args.run).map_err(|e| e.to_string())?;
    if let Some(b) = args.beam {
        run.config.beam.beam = b;
    }
    if let Some(l) = args.lambda_dec {
        run.config.beam.lambda_dec = l;
    }
    let data_dir = args
        .data
        .clone()
        .unwrap_or_else(|| run.config.data_dir.clone());
    let data = Dataset::load(&data_dir).map_err(|e| e.to_string())?;
    Ok((run, data))
}

fn execute(cli: &Cli) -> Result<(), String> {
    match &cli.command {
        Command::GenCorpus { utts } => {
            let mut cfg = match &cli.config {
                Some(p) => DataConfig::load(p).map_err(|e| e.to_string())?,
                None => DataConfig::default(),
            };
            if let Some(s) = cli.seed {
                cfg = cfg.with_seed(s);
            }
            if let Some(n) = utts {
                cfg.corpus.utterances_per_lang = *n;
            }
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("data"));
            let data = generate_data(&cfg, &out).map_err(|e| e.to_string())?;
            println!(
                "wrote {} utterances in {} languages to {}",
                data.utterances.len(),
                data.languages.len(),
                out.display()
            );
        }
        Command::Train { data, mode, epochs } => {
            let mut cfg = train_config(cli)?;
            if let Some(d) = data {
                cfg.data_dir = d.clone();
            }
            if let Some(m) = mode {
                cfg.encoder.mode = *m;
            }
            if let Some(e) = epochs {
                cfg.epochs = *e;
            }
            let outcome = train(&cfg).map_err(|e| e.to_string())?;
            if let Some(r) = &outcome.report {
                print!("{}", r.to_table());
            }
            println!("run written to {}", outcome.run_dir.display());
        }
        Command::Decode(args) => {
            let (run, data) = open_run(args)?;
            let utts = data.split(args.split);
            let results = decode_all(
                &run.model,
                &run.vocab,
                &utts,
                &run.config.beam,
                run.config.threads,
            )
            .map_err(|e| e.to_string())?;
            let mut lines = String::new();
            for r in &results {
                lines.push_str(&serde_json::to_string(r).map_err(|e| e.to_string())?);
                lines.push('\n');
            }
            match &cli.out {
                Some(dir) => {
                    std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
                    let path = dir.join("hyps.jsonl");
                    std::fs::write(&path, lines).map_err(|e| format!("{}: {e}", path.display()))?;
                }
                None => std::io::stdout()
                    .write_all(lines.as_bytes())
                    .map_err(|e| e.to_string())?,
            }
        }
        Command::Eval(args) => {
            let (run, data) = open_run(args)?;
            let utts = data.split(args.split);
            let (report, _) = evaluate_model(
                &run.model,
                &run.vocab,
                &utts,
                &data.languages,
                &run.config.beam,
                run.config.threads,
            )
            .map_err(|e| e.to_string())?;
            let out = cli.out.as_deref().unwrap_or(&args.run);
            std::fs::create_dir_all(out).map_err(|e| format!("{}: {e}", out.display()))?;
            write_report(out, &report).map_err(|e| e.to_string())?;
            print!("{}", report.to_table());
        }
        Command::CtcCheck { draws } => {
            let worst =
                ctc_oracle_sweep(cli.seed.unwrap_or(0), *draws).map_err(|e| e.to_string())?;
            println!("max deviation over {draws} draws: {worst:e}");
            if worst.is_nan() || worst >= 1e-9 {
                return Err(format!("deviation {worst:e} exceeds 1e-9"));
            }
        }
        Command::GradCheck { mode } => {
            let modes = match mode {
                Some(m) => vec![*m],
                None => ConditioningMode::ALL.to_vec(),
            };
            let mut worst: f64 = 0.0;
            for m in modes {
                let (n, r) = full_loss_grad_check(m, cli.seed.unwrap_or(0), &LossConfig::default())
                    .map_err(|e| e.to_string())?;
                println!(
                    "{m}: {n} parameters, max relative error {:e}",
                    r.max_rel_error
                );
                worst = worst.max(r.max_rel_error);
            }
            if worst.is_nan() || worst >= 1e-4 {
                return Err(format!("relative error {worst:e} exceeds 1e-4"));
            }
        }
        Command::Matrix {
            data,
            modes,
            epochs,
        } => {
            let mut cfg = train_config(cli)?;
            if cli.out.is_none() {
                cfg.out_dir = PathBuf::from("runs/matrix");
            }
            if let Some(d) = data {
                cfg.data_dir = d.clone();
            }
            if let Some(e) = epochs {
                cfg.epochs = *e;
            }
            let modes = if modes.is_empty() {
                ConditioningMode::ALL.to_vec()
            } else {
                modes.clone()
            };
            let rows = run_experiment_matrix(&cfg, &modes).map_err(|e| e.to_string())?;
            let csv = lidctc::harness::matrix_csv(&rows);
            print!("{csv}");
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            if failed > 0 {
                return Err(format!("{failed} of {} runs failed", rows.len()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap prints usage and exits with 2 on unknown flags
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {}", msg.lines().next().unwrap_or("failed"));
            ExitCode::FAILURE
        }
    }
}
