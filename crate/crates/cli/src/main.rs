//! `fme` — factor model estimation on CSV panels, simulation of the
//! comparison design, and the Monte Carlo replication tables.
//!
//! Exit codes: 0 success, 2 input or parse error, 3 degenerate model.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use fme_core::inference::{hac_phi, loading_confidence_intervals, Bandwidth, HacOptions};
use fme_core::io::{read_panel_csv, write_matrix_csv, FitFile, TruthFile};
use fme_core::montecarlo::{run_mc, McConfig};
use fme_core::qml::{fit_qml_em, fit_qml_homoskedastic, EmConfig};
use fme_core::simulate::{simulate_panel, DgpConfig};
use fme_core::{demean, factors, pca, Error};

#[derive(Parser)]
#[command(name = "fme", version, about = "Approximate factor model estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    /// Principal components
    Pc,
    /// Quasi maximum likelihood via EM (diagonal idiosyncratic covariance)
    Qml,
    /// Closed-form QML under homoskedastic idiosyncratic components
    QmlHomo,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Ols,
    Gls,
    Lp,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate loadings from a CSV panel and write the fit as JSON
    Estimate {
        /// CSV panel: header row of series names, one row per period
        #[arg(long)]
        input: PathBuf,
        /// Number of factors
        #[arg(long)]
        r: usize,
        #[arg(long, value_enum)]
        method: MethodArg,
        /// Subtract column means before estimating
        #[arg(long)]
        demean: bool,
        /// EM iteration cap (qml only)
        #[arg(long = "em-max-iter", default_value_t = 1000)]
        em_max_iter: usize,
        /// Relative log-likelihood tolerance (qml only)
        #[arg(long = "em-tol", default_value_t = 1e-8)]
        em_tol: f64,
        /// Output fit JSON path
        #[arg(long)]
        output: PathBuf,
    },
    /// Recover factors from a stored fit and a panel; emits a T×r CSV
    Factors {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long, value_enum)]
        estimator: EstimatorArg,
        #[arg(long)]
        input: PathBuf,
        /// Output CSV (stdout when omitted)
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// HAC standard errors and confidence intervals for the loadings
    Se {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Truncation lag: "auto" or a non-negative integer
        #[arg(long, default_value = "auto")]
        bandwidth: String,
        /// Confidence level in (0, 1)
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        /// Output CSV (stdout when omitted)
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Simulate one panel from a design config
    Simulate {
        /// Design JSON (fields of the simulation config)
        #[arg(long)]
        config: PathBuf,
        /// Output panel CSV
        #[arg(long)]
        output: PathBuf,
        /// Optional JSON sidecar with the identified true loadings/factors
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Run the Monte Carlo grid and tabulate estimator comparisons
    Mc {
        /// Study JSON (grid, replications, master_seed)
        #[arg(long)]
        config: PathBuf,
        /// Override the configured replication count
        #[arg(long)]
        reps: Option<usize>,
        /// Override the configured master seed
        #[arg(long)]
        seed: Option<u64>,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (falls back to FME_THREADS, then the config)
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        let code = match e {
            Error::DegenerateModel(_) | Error::DegenerateDraw(_) => 3,
            _ => 2,
        };
        std::process::exit(code);
    }
}

fn open_input(path: &Path) -> Result<BufReader<File>, Error> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::InvalidInput(format!("cannot open {}: {e}", path.display())))
}

fn create_output(path: &Path) -> Result<BufWriter<File>, Error> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::InvalidInput(format!("cannot create {}: {e}", path.display())))
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Estimate {
            input,
            r,
            method,
            demean: do_demean,
            em_max_iter,
            em_tol,
            output,
        } => {
            let (_names, mut panel) = read_panel_csv(open_input(&input)?)?;
            if do_demean {
                panel = demean(&panel);
            }
            let fit = match method {
                MethodArg::Pc => pca::fit_pc(&panel, r)?,
                MethodArg::QmlHomo => fit_qml_homoskedastic(&panel, r)?,
                MethodArg::Qml => {
                    let config = EmConfig {
                        max_iterations: em_max_iter,
                        loglik_rel_tol: em_tol,
                        ..EmConfig::default()
                    };
                    let fit = fit_qml_em(&panel, r, &config)?;
                    if !fit.diagnostics.converged {
                        eprintln!(
                            "warning: EM did not converge within {} iterations \
                             (relative tolerance {}); writing the last iterate",
                            em_max_iter, em_tol
                        );
                    }
                    fit
                }
            };
            FitFile::from_fit(&fit).write_json(create_output(&output)?)?;
            Ok(())
        }
        Command::Factors {
            fit,
            estimator,
            input,
            output,
        } => {
            let (_names, panel) = read_panel_csv(open_input(&input)?)?;
            let fit = FitFile::read_json(open_input(&fit)?)?.into_fit(&panel)?;
            let factors = match estimator {
                EstimatorArg::Ols => factors::factors_ols(&panel, &fit.loadings)?,
                EstimatorArg::Gls => {
                    factors::factors_gls(&panel, &fit.loadings, &fit.idio_variances)?
                }
                EstimatorArg::Lp => {
                    factors::factors_lp(&panel, &fit.loadings, &fit.idio_variances)?
                }
            };
            let names: Vec<String> = (1..=fit.r).map(|j| format!("factor_{j}")).collect();
            match output {
                Some(path) => write_matrix_csv(create_output(&path)?, &names, &factors),
                None => write_matrix_csv(std::io::stdout().lock(), &names, &factors),
            }
        }
        Command::Se {
            fit,
            input,
            bandwidth,
            level,
            output,
        } => {
            let (names, panel) = read_panel_csv(open_input(&input)?)?;
            let fit = FitFile::read_json(open_input(&fit)?)?.into_fit(&panel)?;
            let bandwidth = parse_bandwidth(&bandwidth)?;
            let hac = hac_phi(&fit.factors, &fit.residuals, HacOptions { bandwidth })?;
            let table = loading_confidence_intervals(&fit, &hac, level)?;
            let mut lines = String::from("series,column,estimate,std_error,lower,upper\n");
            for (i, row) in table.iter().enumerate() {
                for (j, ci) in row.iter().enumerate() {
                    lines.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        names[i],
                        j + 1,
                        ci.estimate,
                        ci.std_error,
                        ci.lower,
                        ci.upper
                    ));
                }
            }
            match output {
                Some(path) => create_output(&path)?.write_all(lines.as_bytes()).map_err(Error::Io),
                None => std::io::stdout().write_all(lines.as_bytes()).map_err(Error::Io),
            }
        }
        Command::Simulate {
            config,
            output,
            truth,
        } => {
            let config: DgpConfig = serde_json::from_reader(open_input(&config)?)
                .map_err(|e| Error::Parse(format!("invalid design config: {e}")))?;
            let sim = simulate_panel(&config)?;
            let names: Vec<String> = (1..=config.n).map(|i| format!("x{i}")).collect();
            write_matrix_csv(create_output(&output)?, &names, sim.panel.values())?;
            if let Some(path) = truth {
                TruthFile::from_simulated(&sim).write_json(create_output(&path)?)?;
            }
            Ok(())
        }
        Command::Mc {
            config,
            reps,
            seed,
            out,
            threads,
        } => {
            let mut config: McConfig = serde_json::from_reader(open_input(&config)?)
                .map_err(|e| Error::Parse(format!("invalid study config: {e}")))?;
            if let Some(reps) = reps {
                config.replications = reps;
            }
            if let Some(seed) = seed {
                config.master_seed = seed;
            }
            config.threads = threads.or_else(env_threads).or(config.threads);
            let result = run_mc(&config, &EmConfig::default())?;
            create_output(&out)?
                .write_all(result.to_csv().as_bytes())
                .map_err(Error::Io)?;
            print!("{}", result.to_text_table());
            Ok(())
        }
    }
}

fn parse_bandwidth(s: &str) -> Result<Bandwidth, Error> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(Bandwidth::Auto);
    }
    s.parse::<usize>()
        .map(Bandwidth::Fixed)
        .map_err(|_| Error::InvalidInput(format!("bandwidth must be 'auto' or an integer, got '{s}'")))
}

fn env_threads() -> Option<usize> {
    std::env::var("FME_THREADS").ok()?.parse().ok()
}
