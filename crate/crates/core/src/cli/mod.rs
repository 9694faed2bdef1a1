//! Command-line front end.
//!
//! Exit status: 0 all certificates pass, 1 some certificate fails, 2 configuration error,
//! 3 not a contraction, 4 numerical failure.

pub mod config;
pub mod generate;
pub mod output;
pub mod run;

use std::path::PathBuf;

use clap::Parser;

pub use config::{Mode, RunConfig};
pub use run::{run, RunOutcome};

use crate::error::Error;

pub const THREADS_ENV: &str = "SHADOW_FORGE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "shadow-forge", version, about = "Certified shadowing for nonautonomous systems")]
pub struct Args {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// certify, shadow, verify or oracle-check; overrides the config.
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Output directory; overrides the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also compare against the boundary-value oracle.
    #[arg(long)]
    pub oracle_check: bool,
    /// Seed for random perturbations and sampled checks; overrides the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub quiet: bool,
}

fn init_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize =
        v.trim().parse().map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    if n == 0 {
        return Err(Error::Config(format!("{THREADS_ENV} must be positive")));
    }
    // a second initialization in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args`, runs, prints a short summary and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let quiet = args.quiet;
    let fail = |e: &Error| {
        eprintln!("error: {e}");
        e.exit_code()
    };
    if let Err(e) = init_threads() {
        return fail(&e);
    }
    let mut cfg = match RunConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    if let Some(s) = args.seed {
        cfg.set_seed(s);
    }
    cfg.oracle_check |= args.oracle_check;
    let out_dir = args.out.unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    match run::run(&cfg, &out_dir) {
        Ok(outcome) => {
            if !quiet {
                let status = if outcome.overall { "PASS" } else { "FAIL" };
                println!("{status}: {} ({})", outcome.summary["system"].as_str().unwrap_or(""), out_dir.display());
                for (cert, check) in &outcome.failures {
                    println!("  failed {cert}: {check}");
                }
            }
            outcome.exit_code
        }
        Err(e) => {
            let _ = run::write_error_summary(&out_dir, &e);
            fail(&e)
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = serde_json::to_value(self).map_err(|_| std::fmt::Error)?;
        f.write_str(s.as_str().unwrap_or_default())
    }
}
