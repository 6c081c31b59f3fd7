//! `dkmlmc CONFIG [--workers N] [--output-dir DIR] [--check]`
//!
//! Exit codes: 0 success, 2 invalid configuration, 3 runtime, I/O or
//! interruption. Failures print one JSON object on stderr.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::Parser;
use dk_mlmc::cli::{self, ErrorClass, OUTPUT_DIR_ENV};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "dkmlmc", version, about = "Multilevel Monte Carlo for Dean-Kawasaki fluctuations")]
struct Args {
    /// TOML or JSON experiment file, or a previous summary.json
    config: PathBuf,
    /// Worker threads; results do not depend on this
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory; takes precedence over the config and $DKMLMC_OUTPUT_DIR
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Validate the configuration, print it as JSON and exit
    #[arg(long)]
    check: bool,
}

fn fail(class: ErrorClass, message: &str, violations: &[String]) -> ExitCode {
    let err = json!({ "error": class.name(), "message": message, "violations": violations });
    eprintln!("{err}");
    ExitCode::from(class.exit_code() as u8)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let mut cfg = match cli::parse_config_file(&args.config) {
        Ok(c) => c,
        Err(e) => return fail(ErrorClass::Config, &e.to_string(), &e.violations),
    };
    if let Some(w) = args.workers {
        if w == 0 {
            return fail(ErrorClass::Config, "workers must be at least 1", &["workers must be at least 1".into()]);
        }
        cfg.workers = w;
    }
    if let Some(dir) = &args.output_dir {
        cfg.output_dir = dir.to_string_lossy().into_owned();
        std::env::remove_var(OUTPUT_DIR_ENV);
    }
    if args.check {
        println!("{}", serde_json::to_string_pretty(&cfg.to_value()).expect("json"));
        return ExitCode::SUCCESS;
    }

    let cancel = Arc::new(AtomicBool::new(false));
    {
        let cancel = Arc::clone(&cancel);
        if let Err(e) = ctrlc::set_handler(move || cancel.store(true, Ordering::SeqCst)) {
            eprintln!("warning: no interrupt handler: {e}");
        }
    }
    match cli::run_with_cancel(&cfg, &cancel) {
        Ok(outcome) => {
            println!("{}", outcome.output_dir.join("summary.json").display());
            if !outcome.complete {
                return fail(ErrorClass::Interrupted, "interrupted; partial results written", &[]);
            }
            if !outcome.passed {
                return fail(ErrorClass::Runtime, "self-test failed", &[]);
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.class, &e.message, &[]),
    }
}
