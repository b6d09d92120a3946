use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gradinv::config::{parse_config, ExperimentConfig};
use gradinv::pipeline::{self, Reconstruction, Simulation};
use gradinv::report::{write_csv, Manifest};
use gradinv::{dataset, Error, StdClock};
use gradinv_core::flsim::ObservationLog;

#[derive(Parser)]
#[command(name = "gradinv", version, about = "Federated learning simulator and gradient inversion attacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and record the client updates as observations.json.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Reconstruct samples from recorded updates.
    Attack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        observations: PathBuf,
    },
    /// Match updates of consecutive epochs.
    Match {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        observations: PathBuf,
    },
    /// Score saved reconstructions against the hidden samples.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        observations: PathBuf,
        #[arg(long)]
        reconstructions: PathBuf,
    },
    /// Run every enabled stage.
    E2e {
        #[arg(long)]
        config: PathBuf,
    },
    /// Finite-difference and metric oracle checks.
    Selftest,
}

fn read_config(path: &Path) -> Result<ExperimentConfig, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn load_simulation(config: &ExperimentConfig, observations: &Path) -> Result<Simulation, Error> {
    let data = dataset::load(&config.dataset)?;
    let spec = config.model_spec(data.raw.image_shape(), data.raw.classes)?;
    let log: ObservationLog = read_json(observations)?;
    Ok(Simulation { data, spec, log })
}

fn run(command: Command) -> Result<(), Error> {
    let clock = StdClock::new();
    match command {
        Command::Simulate { config } => {
            let config = read_config(&config)?;
            let manifest = Manifest::create(&config.output)?;
            let sim = manifest.stage("simulate", || pipeline::simulate(&config))?;
            let path = config.output.join("observations.json");
            fs::write(&path, serde_json::to_string(&sim.log)?)?;
            println!("{} records written to {}", sim.log.records.len(), path.display());
        }
        Command::Attack { config, observations } => {
            let config = read_config(&config)?;
            let manifest = Manifest::create(&config.output)?;
            let sim = load_simulation(&config, &observations)?;
            let recs = manifest.stage("attack", || pipeline::attack_records(&config, &sim, &clock))?;
            fs::write(config.output.join("reconstructions.json"), serde_json::to_string(&recs)?)?;
            write_csv(&config.output.join("traces.csv"), &pipeline::trace_rows(&recs))?;
            println!("{} reconstructions written", recs.len());
        }
        Command::Match { config, observations } => {
            let config = read_config(&config)?;
            let manifest = Manifest::create(&config.output)?;
            let sim = load_simulation(&config, &observations)?;
            let m = manifest.stage("match", || pipeline::match_epochs(&config, &sim, &clock))?;
            write_csv(&config.output.join("matches.csv"), &pipeline::match_rows(&sim, &m))?;
            for e in &m.epochs {
                println!("epochs {} -> {}: success rate {:.4}", e.epoch, e.epoch + 1, e.success_rate);
            }
        }
        Command::Evaluate {
            config,
            observations,
            reconstructions,
        } => {
            let config = read_config(&config)?;
            let manifest = Manifest::create(&config.output)?;
            let sim = load_simulation(&config, &observations)?;
            let recs: Vec<Reconstruction> = read_json(&reconstructions)?;
            let rows = manifest.stage("evaluate", || pipeline::evaluate(&sim, &recs))?;
            write_csv(&config.output.join("results.csv"), &rows)?;
            for (method, mean) in pipeline::mean_psnr_by_method(&rows) {
                println!("{method}: mean PSNR {mean:.3} dB");
            }
        }
        Command::E2e { config } => {
            let config = read_config(&config)?;
            let summary = pipeline::run_experiment(&config, &clock)?;
            for (method, mean) in pipeline::mean_psnr_by_method(&summary.results) {
                println!("{method}: mean PSNR {mean:.3} dB");
            }
            if let Some(m) = &summary.matching {
                for e in &m.epochs {
                    println!("epochs {} -> {}: success rate {:.4}", e.epoch, e.epoch + 1, e.success_rate);
                }
            }
            println!("artifacts in {}", summary.dir.display());
        }
        Command::Selftest => {
            let checks = gradinv::selftest::run();
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if checks.iter().any(|c| !c.passed) {
                return Err(Error::Data("selftest failed".into()));
            }
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
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
