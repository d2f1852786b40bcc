//! `nldg`: generate synthetic multi-domain datasets, train single runs,
//! sweep benchmark grids, and aggregate reports.
//!
//! A TOML config file is authoritative; command-line flags override
//! individual fields. `NLDG_OUT_DIR` sets the output directory unless
//! `--out-dir` is given. Exit codes: 0 success, 2 config error, 3 data
//! error, 4 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nldg_core::config::{NoiseKind, TrainConfig};
use nldg_core::data::write_dataset;
use nldg_core::error::Error;
use nldg_core::train::{
    benchmark_table, generate_dataset, run_ablation, run_benchmark, train, train_seed, BenchGrid,
    BenchReport, TrainOptions,
};

const OUT_DIR_ENV: &str = "NLDG_OUT_DIR";

#[derive(Parser)]
#[command(name = "nldg", version, about = "Noisy-label domain-generalized sequence classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags that override fields of the TOML config.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// TOML config file; omitted fields use built-in defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Label noise family: none, sym, or asym
    #[arg(long)]
    noise_kind: Option<String>,
    #[arg(long)]
    noise_rate: Option<f64>,
    #[arg(long)]
    target_domain: Option<usize>,
    /// Comma-separated seed list, e.g. 0,1,2,3,4
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    sequences_per_domain: Option<usize>,
    #[arg(long)]
    generator_seed: Option<u64>,
    /// Pre-generated dataset file to train on
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    disable_elr: bool,
    #[arg(long)]
    disable_felr: bool,
    #[arg(long)]
    disable_cdr: bool,
    /// Use the log-barrier spectral-consistency variant
    #[arg(long)]
    fourier_log: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the configured dataset and write it to a file
    Generate {
        #[command(flatten)]
        overrides: Overrides,
        /// Output dataset path
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured seeds and print a run report
    Train {
        #[command(flatten)]
        overrides: Overrides,
        /// Train only this seed
        #[arg(long)]
        seed: Option<u64>,
        /// Write a checkpoint after every epoch
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Resume from a checkpoint (config must match)
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Write the report JSON here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the noise-type × rate × target benchmark grid
    Bench {
        #[command(flatten)]
        overrides: Overrides,
        /// Comma-separated noise kinds (default sym,asym)
        #[arg(long, default_value = "sym,asym")]
        kinds: String,
        /// Comma-separated noise rates (default 0.2,0.4,0.6)
        #[arg(long, default_value = "0.2,0.4,0.6")]
        rates: String,
        /// Comma-separated target domains (default 0,1,2,3,4)
        #[arg(long, default_value = "0,1,2,3,4")]
        targets: String,
        /// Run the 8-row regularizer ablation grid instead
        #[arg(long)]
        ablation: bool,
        /// Write the report JSON here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate a benchmark report JSON into a CSV table
    Report {
        /// Benchmark report JSON produced by `bench`
        #[arg(long)]
        input: PathBuf,
        /// Write the CSV here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_noise_kind(s: &str) -> Result<NoiseKind, Error> {
    match s {
        "none" => Ok(NoiseKind::None),
        "sym" => Ok(NoiseKind::Sym),
        "asym" => Ok(NoiseKind::Asym),
        other => Err(Error::Config(format!("unknown noise kind {other:?}"))),
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, Error> {
    s.split(',')
        .filter(|p| !p.is_empty())
        .map(|p| p.trim().parse::<T>().map_err(|_| Error::Config(format!("bad {what}: {p:?}"))))
        .collect()
}

fn build_config(ov: &Overrides) -> Result<TrainConfig, Error> {
    let mut cfg = match &ov.config {
        Some(path) => TrainConfig::from_toml_file(path)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = ov.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = ov.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = ov.lr {
        cfg.lr = v;
    }
    if let Some(v) = ov.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = ov.dropout {
        cfg.dropout = v;
    }
    if let Some(v) = &ov.noise_kind {
        cfg.noise_kind = parse_noise_kind(v)?;
        if cfg.noise_kind == NoiseKind::None {
            cfg.noise_rate = 0.0;
        }
    }
    if let Some(v) = ov.noise_rate {
        cfg.noise_rate = v;
    }
    if let Some(v) = ov.target_domain {
        cfg.target_domain = v;
    }
    if let Some(v) = &ov.seeds {
        cfg.seeds = parse_list(v, "seed")?;
    }
    if let Some(v) = ov.sequences_per_domain {
        cfg.sequences_per_domain = v;
    }
    if let Some(v) = ov.generator_seed {
        cfg.generator_seed = v;
    }
    if let Some(v) = &ov.data {
        cfg.data_path = Some(v.clone());
    }
    if let Some(v) = &ov.out_dir {
        cfg.out_dir = Some(v.clone());
    } else if cfg.out_dir.is_none() {
        if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
            cfg.out_dir = Some(PathBuf::from(dir));
        }
    }
    cfg.disable_elr |= ov.disable_elr;
    cfg.disable_felr |= ov.disable_felr;
    cfg.disable_cdr |= ov.disable_cdr;
    cfg.fourier_log_variant |= ov.fourier_log;
    cfg.validate()?;
    Ok(cfg)
}

fn emit(json: String, out: Option<&PathBuf>) -> Result<(), Error> {
    match out {
        Some(path) => std::fs::write(path, json).map_err(Error::from),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate { overrides, out } => {
            let cfg = build_config(&overrides)?;
            let ds = generate_dataset(&cfg)?;
            write_dataset(&ds, &out)?;
            eprintln!("wrote {} sequences across {} domains to {}",
                ds.records.len(), ds.manifest.domains.len(), out.display());
            Ok(())
        }
        Command::Train { overrides, seed, checkpoint, resume, out } => {
            let cfg = build_config(&overrides)?;
            let json = match seed {
                Some(seed) => {
                    let opts = TrainOptions {
                        checkpoint_path: checkpoint,
                        resume_from: resume,
                        stop_after_epoch: None,
                    };
                    let rep = train_seed(&cfg, seed, &opts)?;
                    serde_json::to_string_pretty(&rep).map_err(|e| Error::Data(e.to_string()))?
                }
                None => {
                    if checkpoint.is_some() || resume.is_some() {
                        return Err(Error::Config(
                            "--checkpoint/--resume require --seed".into(),
                        ));
                    }
                    let rep = train(&cfg)?;
                    serde_json::to_string_pretty(&rep).map_err(|e| Error::Data(e.to_string()))?
                }
            };
            emit(json, out.as_ref())
        }
        Command::Bench { overrides, kinds, rates, targets, ablation, out } => {
            let cfg = build_config(&overrides)?;
            if ablation {
                let rows = run_ablation(&cfg)?;
                let json =
                    serde_json::to_string_pretty(&rows).map_err(|e| Error::Data(e.to_string()))?;
                return emit(json, out.as_ref());
            }
            let grid = BenchGrid {
                base: cfg,
                kinds: kinds
                    .split(',')
                    .filter(|p| !p.is_empty())
                    .map(|p| parse_noise_kind(p.trim()))
                    .collect::<Result<_, _>>()?,
                rates: parse_list(&rates, "rate")?,
                targets: parse_list(&targets, "target")?,
            };
            let rep = run_benchmark(&grid)?;
            let json = serde_json::to_string_pretty(&rep).map_err(|e| Error::Data(e.to_string()))?;
            emit(json, out.as_ref())
        }
        Command::Report { input, out } => {
            let text = std::fs::read_to_string(&input)?;
            let rep: BenchReport = serde_json::from_str(&text)
                .map_err(|e| Error::Data(format!("{}: {e}", input.display())))?;
            emit(benchmark_table(&rep), out.as_ref())
        }
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Parse { .. } | Error::Version { .. } | Error::Integrity(_)
        | Error::Io(_) => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
