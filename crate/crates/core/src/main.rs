use std::io::Write;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use coavoid::edgeserver::wire::{spawn, ServeConfig};
use coavoid::edgeserver::EdgeState;
use coavoid::sim::{self, AttackKind, AttackScenario, FileConfig, SimConfig};

#[derive(Parser)]
#[command(name = "coavoid", version, about = "Location-verified contact tracing")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the edge server.
    Serve {
        #[arg(long, default_value_t = 7340)]
        port: u16,
        #[arg(long, default_value_t = 3600)]
        epoch_seconds: u64,
        #[arg(long, default_value_t = 14)]
        retention_days: u32,
        #[arg(long, default_value_t = IpAddr::V4(Ipv4Addr::UNSPECIFIED))]
        bind: IpAddr,
    },
    /// Run a seeded simulation and write metrics.
    Sim {
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        places: Option<usize>,
        #[arg(long)]
        days: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        infection_rate: Option<f64>,
        #[arg(long)]
        resolution: Option<u8>,
        /// TOML file applied before the flags.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an attack scenario and print the verification log.
    Attack {
        #[arg(long)]
        scenario: AttackKind,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare verification time with the upload-everything comparator.
    Bench {
        #[arg(long, default_value_t = 1000)]
        users: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn load(path: Option<&PathBuf>) -> Result<SimConfig, sim::SimError> {
    match path {
        Some(p) => Ok(FileConfig::load(p)?.sim_config()),
        None => Ok(SimConfig::default()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("coavoid: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.cmd {
        Cmd::Serve {
            port,
            epoch_seconds,
            retention_days,
            bind,
        } => {
            if epoch_seconds == 0 {
                return Err("epoch-seconds must be positive".into());
            }
            let state = Arc::new(EdgeState::new(retention_days));
            let handle = spawn(
                state,
                ServeConfig {
                    bind: SocketAddr::new(bind, port),
                    epoch_seconds,
                },
            )?;
            eprintln!("listening on {}", handle.addr());
            handle.wait();
        }
        Cmd::Sim {
            users,
            places,
            days,
            seed,
            infection_rate,
            resolution,
            config,
            out,
        } => {
            let mut cfg = load(config.as_ref())?;
            cfg.users = users.unwrap_or(cfg.users);
            cfg.places = places.unwrap_or(cfg.places);
            cfg.days = days.unwrap_or(cfg.days);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.infection_rate = infection_rate.unwrap_or(cfg.infection_rate);
            cfg.resolution = resolution.unwrap_or(cfg.resolution);
            let result = sim::simulate(&cfg)?;
            sim::emit_metrics(&result.report, Some(&result.timing), &out)?;
            println!("{}", serde_json::to_string_pretty(&result.report.totals)?);
        }
        Cmd::Attack {
            scenario,
            config,
            out,
        } => {
            let mut cfg = load(config.as_ref())?;
            let mut s = cfg.attack.take().unwrap_or_default();
            s.kind = scenario;
            if scenario == AttackKind::Replay {
                s.emit_place = None;
            }
            cfg.attack = Some(AttackScenario { ..s });
            let result = sim::simulate(&cfg)?;
            let report = result.attack.expect("scenario configured");
            let mut stdout = std::io::stdout().lock();
            for line in &report.log {
                match writeln!(stdout, "{line}") {
                    Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => break,
                    other => other?,
                }
            }
            if let Some(out) = out {
                sim::emit_metrics(&result.report, Some(&result.timing), &out)?;
                std::fs::write(
                    out.join("attack.json"),
                    serde_json::to_string_pretty(&report)? + "\n",
                )?;
            }
            eprintln!(
                "suspects {} (wormhole {}, replay {}, fine {}), false contacts {}",
                report.suspects(),
                report.wormhole_suspects,
                report.replay_suspects,
                report.fine_rejections,
                report.false_contacts
            );
        }
        Cmd::Bench { users, seed } => {
            let r = sim::bench(users, seed)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
    }
    Ok(())
}
