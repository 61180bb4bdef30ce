use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::builder::BoolishValueParser;
use clap::{ArgAction, Parser, Subcommand};

use cptlearn::estimation::{fit, FitConfig, Init, UpdateRule};
use cptlearn::harness::{self, MissingnessSpec};
use cptlearn::netio;
use cptlearn::online::{run_stream, Schedule};
use cptlearn::spectral::{self, SpectralOptions};
use cptlearn::{Error, Network, ParameterVector, Result};

#[derive(Parser)]
#[command(
    name = "cptlearn",
    version,
    about = "Learn CPT parameters of discrete Bayesian networks from incomplete data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw cases from a network and hide values.
    Sample {
        /// Network file or builtin:NAME.
        #[arg(long)]
        network: String,
        #[arg(long)]
        n: usize,
        /// Comma-separated variables that are never observed.
        #[arg(long, default_value = "")]
        hidden: String,
        /// Probability of hiding each remaining value.
        #[arg(long, default_value_t = 0.0)]
        obscure: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Batch estimation with EM(η), EG(η) or gradient projection.
    Fit {
        #[arg(long)]
        network: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, default_value = "em")]
        rule: UpdateRule,
        #[arg(long, default_value_t = 1.0)]
        eta: f64,
        #[arg(long, default_value_t = 200)]
        max_iters: usize,
        /// Log-likelihood change that stops the run; `off` disables it.
        #[arg(long, default_value = "1e-6")]
        tol_ll: String,
        /// Largest parameter change that stops the run.
        #[arg(long)]
        tol_param: Option<f64>,
        /// random, uniform or file:PATH.
        #[arg(long, default_value = "random")]
        init: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "false", action = ArgAction::Set, value_parser = BoolishValueParser::new())]
        warm_start_em1: bool,
        /// Record wall-clock milliseconds in the trace.
        #[arg(long, default_value = "false", action = ArgAction::Set, value_parser = BoolishValueParser::new())]
        timing: bool,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Process a dataset one case at a time.
    Online {
        #[arg(long)]
        network: String,
        #[arg(long)]
        stream: PathBuf,
        #[arg(long, default_value = "em")]
        rule: UpdateRule,
        /// fixed:ETA, inv_t:C,T0 or per_row.
        #[arg(long)]
        schedule: Schedule,
        /// random, uniform or file:PATH.
        #[arg(long, default_value = "uniform")]
        init: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Eigenvalue analysis of EM(η) at a fixpoint.
    Spectral {
        #[arg(long)]
        network: String,
        #[arg(long)]
        data: PathBuf,
        /// Network file holding the fixpoint parameters.
        #[arg(long)]
        theta: PathBuf,
        #[arg(long, default_value = "0.5,1,1.5")]
        etas: String,
        #[arg(long, default_value_t = spectral::DEFAULT_CUTOFF)]
        cutoff: f64,
        /// EM(1) iterations applied to the parameters before the analysis.
        #[arg(long, default_value_t = 0)]
        refine_iters: usize,
        /// Also measure each rate by running EM(η).
        #[arg(long, default_value = "false", action = ArgAction::Set, value_parser = BoolishValueParser::new())]
        empirical: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Query errors of a learned network against the true one.
    Eval {
        #[arg(long)]
        learned: PathBuf,
        #[arg(long)]
        truth: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        targets: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a multi-arm experiment described by a JSON file.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn parse_tol(s: &str) -> Result<Option<f64>> {
    if s.eq_ignore_ascii_case("off") {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::InvalidConfig(format!("tol-ll must be a number or `off`, got `{s}`")))
}

fn names(csv: &str) -> Vec<String> {
    csv.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn load_network(reference: &str) -> Result<Network> {
    harness::load_network_ref(reference, Path::new("."))
}

fn initial(init: &str, seed: u64, network: &Network) -> Result<ParameterVector> {
    let s = &network.structure;
    let init = match init {
        "random" => Init::Random { seed },
        "uniform" => Init::Uniform,
        other => match other.strip_prefix("file:") {
            Some(path) => {
                let net = netio::read_network(path)?;
                if net.structure.variables() != s.variables() {
                    return Err(Error::ShapeMismatch(format!(
                        "{path} does not match the network"
                    )));
                }
                Init::Given(net.theta)
            }
            None => {
                return Err(Error::InvalidConfig(format!(
                    "init must be random, uniform or file:PATH, got `{other}`"
                )))
            }
        },
    };
    init.materialize(s)
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Sample {
            network,
            n,
            hidden,
            obscure,
            seed,
            out,
        } => {
            let net = load_network(&network)?;
            let spec = MissingnessSpec {
                hidden: names(&hidden),
                obscure_prob: obscure,
                seed,
            };
            let cases = harness::obscure(
                &net.structure,
                &harness::forward_sample(&net, n, seed),
                &spec,
            )?;
            netio::write_dataset(&net.structure, &cases, &out)?;
        }
        Command::Fit {
            network,
            data,
            test,
            rule,
            eta,
            max_iters,
            tol_ll,
            tol_param,
            init,
            seed,
            warm_start_em1,
            timing,
            trace,
            out,
        } => {
            let net = load_network(&network)?;
            let s = &net.structure;
            let train = netio::read_dataset(&data, s)?;
            let test = test.map(|p| netio::read_dataset(p, s)).transpose()?;
            let config = FitConfig {
                rule,
                eta,
                max_iters,
                tol_ll: parse_tol(&tol_ll)?,
                tol_param,
                init: Init::Given(initial(&init, seed, &net)?),
                warm_start_em1,
                keep_iterates: false,
                record_timing: timing,
            };
            let result = fit(s, &train, &config, test.as_ref())?;
            netio::write_trace(&result.trace, &trace)?;
            netio::write_network(&net.with_theta(result.theta.clone())?, &out)?;
            let last = result.trace.last().expect("trace holds the initial point");
            println!(
                "{}",
                serde_json::json!({
                    "iterations": result.iterations,
                    "termination": result.termination,
                    "train_ll": last.train_ll,
                    "test_ll": last.test_ll,
                })
            );
        }
        Command::Online {
            network,
            stream,
            rule,
            schedule,
            init,
            seed,
            trace,
            out,
        } => {
            let net = load_network(&network)?;
            let s = &net.structure;
            let cases = netio::read_dataset(&stream, s)?;
            let theta = initial(&init, seed, &net)?;
            let (state, records) = run_stream(s, theta, &cases.cases, rule, &schedule)?;
            netio::write_online_trace(&records, &trace)?;
            netio::write_network(&net.with_theta(state.theta().clone())?, &out)?;
            println!(
                "{}",
                serde_json::json!({ "cases": state.t(), "skipped": state.skipped() })
            );
        }
        Command::Spectral {
            network,
            data,
            theta,
            etas,
            cutoff,
            refine_iters,
            empirical,
            seed,
            out,
        } => {
            let net = load_network(&network)?;
            let s = &net.structure;
            let dataset = netio::read_dataset(&data, s)?;
            let point = netio::read_network(&theta)?;
            if point.structure.variables() != s.variables() {
                return Err(Error::ShapeMismatch(format!(
                    "{} does not match the network",
                    theta.display()
                )));
            }
            let etas = etas
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::InvalidConfig(format!("bad learning rate `{x}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            let options = SpectralOptions {
                cutoff,
                refine_iters,
                empirical,
                seed,
                ..SpectralOptions::default()
            };
            let report = spectral::analyze(s, &point.theta, &dataset, &etas, &options)?;
            write_json(&report, &out)?;
        }
        Command::Eval {
            learned,
            truth,
            data,
            targets,
            out,
        } => {
            let truth = load_network(&truth)?;
            let learned = netio::read_network(&learned)?;
            let dataset = netio::read_dataset(&data, &truth.structure)?;
            let report = harness::evaluate(&learned, &truth, &dataset, &names(&targets))?;
            write_json(&report, &out)?;
        }
        Command::Experiment { config, out_dir } => {
            let text = std::fs::read_to_string(&config).map_err(|e| Error::Io {
                path: config.display().to_string(),
                source: e,
            })?;
            let cfg = harness::ExperimentConfig::from_json(&text)?;
            let base = config.parent().unwrap_or(Path::new("."));
            harness::run_experiment(&cfg, base, &out_dir)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
