use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use etdkf::analysis::{
    aggregate, compare_linear_model, diagnostics, metrics, monte_carlo_scenario_covariance, verify,
    GlobalCovariance, LinearDiffusionModel, RunSummary,
};
use etdkf::network_sim::{simulate, Threshold};
use etdkf::{Error, RunLog, Scenario};

#[derive(Parser)]
#[command(
    name = "etdkf",
    version,
    about = "Event-triggered diffusion EKF simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ScenarioArgs {
    /// Scenario JSON file; the built-in default when omitted.
    #[arg(long, value_name = "PATH")]
    scenario: Option<PathBuf>,
    /// Override a scenario field, e.g. `trigger.pi_max=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ScenarioArgs {
    fn load(&self) -> etdkf::Result<Scenario> {
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        match &self.scenario {
            Some(path) => Scenario::from_path(path, &overrides),
            None => Scenario::default_with(&overrides),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum McModel {
    /// Three-node linear model, compared against the covariance recursion.
    Linear,
    /// Final-step errors of full simulator runs.
    Scenario,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario and write runlog.csv and summary.json.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Threshold sweep aggregated over seeds; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Comma-separated thresholds; `inf` allowed. 0 is always added.
        #[arg(long, default_value = "0,1,2,4,8")]
        sweep: String,
        #[arg(long, default_value_t = 5)]
        seeds_per_point: usize,
    },
    /// Run the diagnostic suite; exits 1 if any check fails.
    Verify {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Also write verify.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo covariance estimate; writes montecarlo.json.
    Montecarlo {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "linear")]
        model: McModel,
        #[arg(long, default_value_t = 10_000)]
        mc_runs: usize,
        /// Steps per run of the linear model.
        #[arg(long, default_value_t = 40)]
        steps: usize,
        /// Threshold of the linear model.
        #[arg(long, default_value_t = 0.05)]
        pi_max: f64,
    },
    /// Print the resolved scenario as JSON.
    Scenario {
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> ExitCode {
    match e {
        Error::Scenario { .. } | Error::Io(_) | Error::Json(_) | Error::Csv(_) => ExitCode::from(2),
        _ => ExitCode::from(3),
    }
}

fn dispatch(cmd: Command) -> etdkf::Result<ExitCode> {
    match cmd {
        Command::Run { scenario, out } => run(&scenario.load()?, &out),
        Command::Sweep {
            scenario,
            out,
            sweep,
            seeds_per_point,
        } => {
            let thresholds = parse_thresholds(&sweep)?;
            if seeds_per_point == 0 {
                return Err(Error::Scenario {
                    field: "--seeds-per-point".into(),
                    reason: "must be at least 1".into(),
                });
            }
            run_sweep(&scenario.load()?, &thresholds, seeds_per_point, &out)
        }
        Command::Verify { scenario, out } => {
            let s = scenario.load()?;
            let diags = verify(&s)?;
            for d in &diags {
                println!("{d}");
            }
            if let Some(dir) = out {
                write_json(&dir, "verify.json", &diags)?;
            }
            Ok(if diagnostics::any_failed(&diags) {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            })
        }
        Command::Montecarlo {
            scenario,
            out,
            model,
            mc_runs,
            steps,
            pi_max,
        } => match model {
            McModel::Linear => {
                let seed = scenario.seed.unwrap_or(0);
                let m = LinearDiffusionModel::three_node(pi_max)?;
                let c = compare_linear_model(&m, steps, mc_runs, seed)?;
                println!(
                    "{} runs × {} steps ({} triggered): normalized Frobenius distance {:.4}",
                    c.n_runs, c.n_steps, c.triggers, c.distance
                );
                write_json(
                    &out,
                    "montecarlo.json",
                    &McReport {
                        model: "linear",
                        n_runs: mc_runs,
                        n_steps: steps,
                        seed,
                        distance: Some(c.distance),
                        sample: rows(&c.sample),
                        sigma: Some(rows(&c.sigma)),
                    },
                )?;
                Ok(ExitCode::SUCCESS)
            }
            McModel::Scenario => {
                let s = scenario.load()?;
                let est = monte_carlo_scenario_covariance(&s, mc_runs)?;
                println!(
                    "{} runs of {}: trace {:e}",
                    mc_runs,
                    s.name,
                    est.matrix().trace()
                );
                write_json(
                    &out,
                    "montecarlo.json",
                    &McReport {
                        model: "scenario",
                        n_runs: mc_runs,
                        n_steps: s.n_steps,
                        seed: s.seed,
                        distance: None,
                        sample: rows(&est),
                        sigma: None,
                    },
                )?;
                Ok(ExitCode::SUCCESS)
            }
        },
        Command::Scenario { scenario } => {
            println!("{}", scenario.load()?.to_json_pretty()?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

#[derive(Serialize)]
struct McReport {
    model: &'static str,
    n_runs: usize,
    n_steps: usize,
    seed: u64,
    distance: Option<f64>,
    sample: Vec<Vec<f64>>,
    sigma: Option<Vec<Vec<f64>>>,
}

fn rows(m: &GlobalCovariance) -> Vec<Vec<f64>> {
    m.matrix()
        .row_iter()
        .map(|r| r.iter().copied().collect())
        .collect()
}

fn with_threshold(s: &Scenario, pi: f64) -> Scenario {
    let mut s = s.clone();
    s.trigger.pi_max = Threshold(pi);
    s
}

fn run(s: &Scenario, out: &Path) -> etdkf::Result<ExitCode> {
    let log = simulate(s)?;
    let baseline = if s.pi_max() == 0.0 {
        log.clone()
    } else {
        simulate(&with_threshold(s, 0.0))?
    };
    let summary = RunSummary::new(s, &log, &baseline)?;
    fs::create_dir_all(out)?;
    let mut w = BufWriter::new(File::create(out.join("runlog.csv"))?);
    log.write_csv(&mut w)?;
    w.flush()?;
    write_json(out, "summary.json", &summary)?;
    println!(
        "{}: {} steps, {} triggers, {} messages, saved {:.1}%, mean error {:.3} m",
        s.name,
        s.n_steps,
        summary.trigger_count,
        summary.metrics.total_messages,
        100.0 * summary.metrics.saved_fraction,
        summary.metrics.mean_error_m
    );
    Ok(ExitCode::SUCCESS)
}

fn parse_thresholds(text: &str) -> etdkf::Result<Vec<f64>> {
    let mut out = vec![0.0];
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let t: Threshold = part.parse().map_err(|reason| Error::Scenario {
            field: "--sweep".into(),
            reason,
        })?;
        out.push(t.0);
    }
    out.sort_by(f64::total_cmp);
    out.dedup();
    Ok(out)
}

fn run_sweep(
    s: &Scenario,
    thresholds: &[f64],
    seeds: usize,
    out: &Path,
) -> etdkf::Result<ExitCode> {
    let jobs: Vec<(usize, u64)> = (0..thresholds.len())
        .flat_map(|i| (0..seeds as u64).map(move |j| (i, s.seed.wrapping_add(j))))
        .collect();
    // Indexed collect keeps (threshold, seed) order whatever the completion order.
    let logs: Vec<RunLog> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let mut sc = with_threshold(s, thresholds[i]);
            sc.seed = seed;
            simulate(&sc)
        })
        .collect::<etdkf::Result<_>>()?;
    let per_point: Vec<&[RunLog]> = logs.chunks(seeds).collect();
    let baselines = per_point[0];
    let mut table = Vec::with_capacity(thresholds.len());
    for (pi, runs) in thresholds.iter().zip(&per_point) {
        let row = aggregate(*pi, runs, baselines)?;
        println!(
            "pi_max {:>6}: {} messages, saved {:.1}%, mean error {:.3} m",
            row.pi_max.to_string(),
            row.msgs_total,
            100.0 * row.saved_frac,
            row.mean_err_m
        );
        table.push(row);
    }
    fs::create_dir_all(out)?;
    let mut w = BufWriter::new(File::create(out.join("sweep.csv"))?);
    metrics::write_sweep_csv(&mut w, &table)?;
    w.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn write_json<T: Serialize + ?Sized>(dir: &Path, name: &str, value: &T) -> etdkf::Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join(name))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}
