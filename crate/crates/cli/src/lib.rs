//! Command-line experiment driver: training runs, attack harnesses, theory
//! verification and a small benchmark.
//!
//! Every run is a function of its configuration and seed. Results go to the
//! `out` path (stdout by default) as JSON lines, one record per line.

pub mod commands;
pub mod config;
pub mod theory;

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::{Command, ConfigError, RunConfig, Settings};

/// Exit status for configuration errors.
pub const EXIT_CONFIG: u8 = 2;
/// Exit status for failures while running.
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "dbcl",
    version,
    about = "Sketched collaborative learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Federated training; writes one metrics record per evaluation.
    Train(Common),
    /// Training while a client estimates every round's update.
    AttackEstimate(Common),
    /// Gradient-matching reconstruction with and without sketching.
    AttackGm(Common),
    /// Property inference with and without sketching.
    AttackPia(Common),
    /// Enumeration and Monte Carlo checks of the estimator error.
    VerifyTheory(Common),
    /// Sketch application against dense multiplication.
    Bench(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override one config entry; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Write training records as CSV instead of JSON lines.
    #[arg(long)]
    csv: bool,
    /// Print the effective config and exit.
    #[arg(long)]
    print_config: bool,
}

fn run_config(c: &Common) -> Result<RunConfig, ConfigError> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for arg in &c.set {
        cfg.set_override(arg)?;
    }
    if let Some(seed) = c.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    Ok(cfg)
}

fn configure_threads() -> Result<(), ConfigError> {
    let Ok(value) = std::env::var("DBCL_THREADS") else {
        return Ok(());
    };
    let n: usize = value.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        ConfigError::Invalid(format!("DBCL_THREADS={value} is not a positive integer"))
    })?;
    // Fails only if the pool already exists, as when run twice in one process.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

fn open_out(out: &Option<PathBuf>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match out {
        Some(path) => Box::new(BufWriter::new(
            File::create(path).with_context(|| format!("creating {}", path.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_records<T: Serialize>(
    out: &Option<PathBuf>,
    records: &[T],
    csv: bool,
) -> anyhow::Result<()> {
    let mut w = open_out(out)?;
    if csv {
        let mut writer = csv::Writer::from_writer(w);
        for r in records {
            writer.serialize(r)?;
        }
        writer.flush()?;
    } else {
        for r in records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    Ok(())
}

fn dispatch(cmd: Command, s: &Settings, csv: bool) -> anyhow::Result<()> {
    if csv && !matches!(cmd, Command::Train | Command::AttackEstimate) {
        return Err(
            ConfigError::Invalid("--csv applies to train and attack-estimate only".into()).into(),
        );
    }
    match cmd {
        Command::Train => {
            let outcome = commands::train(s)?;
            if let Some(path) = &s.checkpoint {
                dbcl::checkpoint::save(&outcome.model, path)?;
            }
            if let Some(last) = outcome.history.iter().rev().find(|r| r.phase == "eval") {
                eprintln!(
                    "round {}: eval loss {:.4}, accuracy {:.4}",
                    last.round,
                    last.loss,
                    last.accuracy.unwrap_or(f64::NAN)
                );
            }
            write_records(&s.out, &outcome.history, csv)
        }
        Command::AttackEstimate => {
            let (_, records) = commands::attack_estimate(s)?;
            write_records(&s.out, &records, csv)
        }
        Command::AttackGm => {
            let records = commands::attack_gm(s)?;
            for r in &records {
                eprintln!("trial {} {:<10} mse {:.3e}", r.trial, r.mode, r.mse);
            }
            write_records(&s.out, &records, false)
        }
        Command::AttackPia => {
            let reports = commands::attack_pia(s)?;
            for r in &reports {
                eprintln!("{:<16} auc {:.3}", r.mode.name(), r.auc);
            }
            write_records(&s.out, &reports, false)
        }
        Command::VerifyTheory => {
            let checks = commands::verify_theory(s)?;
            print!("{}", theory::render_table(&checks));
            if s.out.is_some() {
                write_records(&s.out, &checks, false)?;
            }
            let failed = checks.iter().filter(|c| !c.pass).count();
            if failed > 0 {
                anyhow::bail!("{failed} theory checks failed");
            }
            Ok(())
        }
        Command::Bench => {
            let records = commands::bench(s)?;
            write_records(&s.out, &records, false)
        }
    }
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<ConfigError>()
            || matches!(
                c.downcast_ref::<dbcl::Error>(),
                Some(dbcl::Error::Config(_))
            )
    })
}

/// Runs the command line `argv` (program name first) and returns the exit
/// status: 0 on success, [`EXIT_CONFIG`] or [`EXIT_RUNTIME`] on failure.
pub fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    let (cmd, common) = match &cli.command {
        Sub::Train(c) => (Command::Train, c),
        Sub::AttackEstimate(c) => (Command::AttackEstimate, c),
        Sub::AttackGm(c) => (Command::AttackGm, c),
        Sub::AttackPia(c) => (Command::AttackPia, c),
        Sub::VerifyTheory(c) => (Command::VerifyTheory, c),
        Sub::Bench(c) => (Command::Bench, c),
    };
    let prepared = configure_threads()
        .and_then(|()| run_config(common))
        .and_then(|cfg| Ok((cfg.settings(cmd)?, cfg)));
    let (settings, cfg) = match prepared {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    if common.print_config {
        print!("{}", cfg.emit());
        return 0;
    }
    match dispatch(cmd, &settings, common.csv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_config_error(&e) {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            }
        }
    }
}
