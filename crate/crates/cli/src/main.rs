use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use opinion_ueba::scenario::{self, RunOptions, Scenario, ScenarioError};
use opinion_ueba::PriorMode;

#[derive(Parser)]
#[command(
    name = "opinion-ueba",
    version,
    about = "Multi-topic opinion dynamics and anomaly scoring"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check every matrix and the scenario schema.
    Validate(Common),
    /// Print the block structure of each logic matrix, epoch and injection.
    Decompose(Common),
    /// Run the epochs and write trajectory.csv, summary.csv and blocks.txt.
    Simulate(Common),
    /// Score the injection weight sweep and write scores.csv.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario TOML file.
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides the scenario seed for initial opinions.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for output files.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Caps the step budget of every epoch.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Prior modes to score.
    #[arg(long, value_enum, default_value_t = Mode::Both)]
    mode: Mode,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Static,
    Online,
    Both,
}

impl Common {
    fn options(&self) -> RunOptions {
        RunOptions {
            seed: self.seed,
            max_steps: self.max_steps,
            modes: match self.mode {
                Mode::Static => vec![PriorMode::Static],
                Mode::Online => vec![PriorMode::Online],
                Mode::Both => vec![PriorMode::Static, PriorMode::Online],
            },
        }
    }
}

fn write_out(dir: &Path, name: &str, body: &str) -> Result<(), ScenarioError> {
    let io = |source| ScenarioError::Io {
        path: dir.join(name).display().to_string(),
        source,
    };
    fs::create_dir_all(dir).map_err(io)?;
    fs::write(dir.join(name), body).map_err(io)
}

fn validate(args: &Common) -> Result<(), ScenarioError> {
    let (report, result) = scenario::validate(&args.scenario);
    print!("{report}");
    result.map(|_| ())
}

fn decompose(args: &Common) -> Result<(), ScenarioError> {
    let sc = Scenario::load(&args.scenario)?;
    let report = scenario::decompose(&sc)?;
    print!("{report}");
    Ok(())
}

fn simulate(args: &Common) -> Result<(), ScenarioError> {
    let sc = Scenario::load(&args.scenario)?;
    let out = scenario::simulate(&sc, &args.options())?;
    let summary = out.summary_csv();
    write_out(&args.out_dir, "trajectory.csv", &out.trajectory_csv())?;
    write_out(&args.out_dir, "summary.csv", &summary)?;
    write_out(&args.out_dir, "blocks.txt", &scenario::decompose(&sc)?)?;
    for line in summary.lines() {
        let fields: Vec<&str> = line.splitn(7, ',').collect();
        println!("{}", fields[..6].join("\t"));
    }
    Ok(())
}

fn sweep(args: &Common) -> Result<(), ScenarioError> {
    let sc = Scenario::load(&args.scenario)?;
    let out = scenario::sweep(&sc, &args.options())?;
    write_out(&args.out_dir, "scores.csv", &out.combined().to_csv())?;
    for (wt, tl) in &out.per_wt {
        write_out(&args.out_dir, &format!("scores_wt_{wt}.csv"), &tl.to_csv())?;
    }
    if !out.drift.is_empty() {
        write_out(&args.out_dir, "drift.csv", &out.drift_csv())?;
    }
    println!("baseline settled after {} steps", out.baseline_steps);
    println!("wt\tmode\tdelta_v\tlikelihood\tposterior");
    for (wt, tl) in &out.per_wt {
        for mode in [PriorMode::Static, PriorMode::Online] {
            if let Some(e) = tl.filter_mode(mode).last() {
                println!(
                    "{wt}\t{mode}\t{:.6e}\t{:.6}\t{:.6}",
                    e.score.delta_v, e.score.likelihood, e.score.posterior
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Validate(a) => validate(a),
        Command::Decompose(a) => decompose(a),
        Command::Simulate(a) => simulate(a),
        Command::Sweep(a) => sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
