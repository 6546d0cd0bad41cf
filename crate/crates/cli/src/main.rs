use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use emp_core::experiment::{cmd_gen_data, cmd_report, cmd_run, ExperimentConfig, Variant, ABLATIONS};
use emp_core::{Error, Result};

/// Lifelong event detection experiments with episodic memory prompts.
///
/// Log verbosity follows the EMP_LOG environment variable (error, warn,
/// info, debug, trace).
#[derive(Parser, Debug)]
#[command(name = "emp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus, ontology, lexicon and synonym map.
    GenData {
        /// TOML experiment config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the synthetic generator seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the configured methods over every permutation seed.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Runs a single task permutation with this seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Adds one run per configured buffer size.
        #[arg(long)]
        sweep_buffer: bool,
        /// Adds a method: wo_einit, wo_epo, wo_kd, discrete, all (the four
        /// ablations), bert_ed, kcn, upperbound, emp or buffer_<m>.
        #[arg(long, value_name = "NAME")]
        ablation: Vec<String>,
    },
    /// Average per-permutation metrics of a run directory into tables.
    Report {
        /// Directory written by `run`.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn variants(config: &ExperimentConfig, sweep_buffer: bool, ablations: &[String]) -> Result<Vec<Variant>> {
    let mut out: Vec<Variant> = Vec::new();
    let mut push = |v: Variant| {
        if !out.contains(&v) {
            out.push(v);
        }
    };
    for m in &config.experiment.methods {
        push(m.parse()?);
    }
    for name in ablations {
        if name == "all" {
            ABLATIONS.into_iter().for_each(&mut push);
        } else {
            push(name.parse()?);
        }
    }
    if sweep_buffer {
        for &m in &config.experiment.buffer_sizes {
            push(Variant::Buffer(m));
        }
    }
    Ok(out)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let mut config = load_config(config.as_deref())?;
            if let Some(s) = seed {
                config.synthetic.seed = s;
            }
            cmd_gen_data(&config, &out)?;
            println!("wrote corpus to {}", out.display());
        }
        Command::Run {
            config,
            out,
            seed,
            sweep_buffer,
            ablation,
        } => {
            let mut config = load_config(config.as_deref())?;
            if let Some(s) = seed {
                config.experiment.permutation_seeds = vec![s];
            }
            let variants = variants(&config, sweep_buffer, &ablation)?;
            let outcomes = cmd_run(&config, &out, &variants)?;
            let mut failed = 0;
            for o in &outcomes {
                for (seed, r) in &o.runs {
                    match r {
                        Ok(m) => println!("{} perm_{seed}: final F1 {:.4}", o.variant, m.final_f1().unwrap_or(0.0)),
                        Err(e) => {
                            failed += 1;
                            println!("{} perm_{seed}: failed: {e}", o.variant);
                        }
                    }
                }
            }
            if failed > 0 {
                return Err(Error::Report(format!(
                    "{failed} run(s) failed; see {}",
                    out.join(emp_core::experiment::FAILURES_FILE).display()
                )));
            }
        }
        Command::Report { out } => {
            let report = cmd_report(&out)?;
            print!("{}", report.table);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EMP_LOG", "warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("emp: {e}");
            ExitCode::FAILURE
        }
    }
}
