use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use edgeslice::harness::{
    closed_form_preparation, emit_results, format_ms, run_benchmark, run_preparation_timing,
    run_road_scenario, run_scenario, write_summary, BenchmarkRun, HarnessError, Mode,
    ScenarioConfig, WorkloadOp,
};

#[derive(Parser, Debug)]
#[command(
    name = "edgeslice",
    version,
    about = "Edge slicing and task offloading testbed"
)]
struct Cli {
    /// Seed for link jitter; overrides the scenario's own seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Which deployment modes to benchmark.
    #[arg(long, global = true, value_enum, default_value_t = ModeArg::Both)]
    mode: ModeArg,
    /// Requests per mode (repetitions for bench-prepare).
    #[arg(long, global = true)]
    requests: Option<usize>,
    /// Directory for samples.csv and summary.txt.
    #[arg(long, global = true, default_value = "results")]
    out: PathBuf,
    /// File with `nodes` and `links` replacing the scenario topology.
    #[arg(long, global = true)]
    topology: Option<PathBuf>,
    /// Pace virtual time against the wall clock (1.0 = real time).
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "1.0")]
    realtime: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Repeated content-instance creation, cloud path against edge path.
    BenchCreate,
    /// Repeated latest-instance retrieval, cloud path against edge path.
    BenchRetrieve,
    /// Slice preparation time over repeated fresh deployments.
    BenchPrepare {
        /// Leave every function image out of the edge cache.
        #[arg(long)]
        cold_cache: bool,
    },
    /// The road-safety walkthrough with its assertion report.
    RoadScenario,
    /// Run the workload declared in a scenario file.
    Run { scenario: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Cloud,
    Edge,
    Both,
}

impl ModeArg {
    fn modes(self) -> Vec<Mode> {
        match self {
            ModeArg::Cloud => vec![Mode::Cloud],
            ModeArg::Edge => vec![Mode::Edge],
            ModeArg::Both => vec![Mode::Cloud, Mode::Edge],
        }
    }
}

enum Failure {
    Harness(HarnessError),
    Assertions(usize),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure::Harness(e)
    }
}

fn prepare_config(cli: &Cli, mut config: ScenarioConfig) -> Result<ScenarioConfig, HarnessError> {
    if let Some(path) = &cli.topology {
        let text = std::fs::read_to_string(path)?;
        config = config.with_topology_text(&text)?;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(factor) = cli.realtime {
        if !(factor.is_finite() && factor > 0.0) {
            return Err(HarnessError::ConfigInvalid(
                "--realtime factor must be > 0".into(),
            ));
        }
        config.realtime = Some(factor);
    }
    config.validate()?;
    Ok(config)
}

fn set_requests(config: &mut ScenarioConfig, requests: usize) {
    if let Some(w) = config.workload.as_mut() {
        w.requests = requests;
    }
}

fn report(run: &BenchmarkRun, out: &Path) -> Result<(), HarnessError> {
    let summaries = emit_results(&run.samples, out)?;
    print!("{}", write_summary(&summaries));
    println!("wrote {} samples to {}", run.samples.len(), out.display());
    Ok(())
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::BenchCreate | Command::BenchRetrieve => {
            let mut config = prepare_config(cli, ScenarioConfig::paper_calibrated())?;
            set_requests(&mut config, cli.requests.unwrap_or(60));
            let op = if matches!(cli.command, Command::BenchCreate) {
                WorkloadOp::Create
            } else {
                WorkloadOp::Retrieve
            };
            let run = run_benchmark(&config, op, &cli.mode.modes())?;
            report(&run, &cli.out)?;
            if let (Some(c), Some(e)) = (run.summary(Mode::Cloud), run.summary(Mode::Edge)) {
                println!("cloud/edge mean ratio: {:.4}", c.mean_ms / e.mean_ms);
            }
        }
        Command::BenchPrepare { cold_cache } => {
            let mut config = prepare_config(cli, ScenarioConfig::paper_calibrated())?;
            if *cold_cache {
                config.registry.preseed = false;
            }
            let prep = run_preparation_timing(&config, cli.requests.unwrap_or(10))?;
            let run = BenchmarkRun {
                summaries: Vec::new(),
                samples: prep.samples.clone(),
            };
            report(&run, &cli.out)?;
            println!("mean preparation time: {} ms", format_ms(prep.mean));
            let schedule = closed_form_preparation(&config)?;
            println!("zero-jitter schedule:  {} ms", format_ms(schedule));
        }
        Command::RoadScenario => {
            let config = prepare_config(cli, ScenarioConfig::road())?;
            let road = run_road_scenario(&config)?;
            for line in &road.trace {
                println!("{line}");
            }
            for a in &road.assertions {
                println!(
                    "[{}] {}: {}",
                    if a.passed { "PASS" } else { "FAIL" },
                    a.name,
                    a.detail
                );
            }
            let failed = road.failures().count();
            if failed > 0 {
                return Err(Failure::Assertions(failed));
            }
        }
        Command::Run { scenario } => {
            let mut config = prepare_config(cli, ScenarioConfig::load(scenario)?)?;
            if let Some(n) = cli.requests {
                set_requests(&mut config, n);
            }
            let run = run_scenario(&config)?;
            report(&run, &cli.out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Assertions(n)) => {
            eprintln!("{n} road-scenario assertion(s) failed");
            ExitCode::from(3)
        }
        Err(Failure::Harness(e)) => {
            eprintln!("error: {e}");
            match e {
                HarnessError::ConfigInvalid(_) => ExitCode::from(2),
                HarnessError::Io(_) | HarnessError::Scenario(_) => ExitCode::from(1),
            }
        }
    }
}
