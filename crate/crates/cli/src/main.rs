use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use selfheal_cli::config::{ScenarioConfig, TopologyKind};
use selfheal_cli::experiment::{run_experiment, summary_text};
use selfheal_cli::report::{analytics_report, generate_topology, write_topology};

#[derive(Parser)]
#[command(name = "sim", version, about = "Self-healing network simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Mesh,
    Btree,
    Ttree,
}

impl From<Kind> for TopologyKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Mesh => TopologyKind::Mesh,
            Kind::Btree => TopologyKind::Btree,
            Kind::Ttree => TopologyKind::Ttree,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a configured experiment sweep.
    Run {
        /// Config file of `key = value` lines; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a key, e.g. `--set ttl=1`. Repeatable; wins over the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print the closed-form tables.
    ReportAnalytics {
        /// Also write the tables as CSV into this directory.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write a generated topology as an edge list.
    GenTopology {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        nodes: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Mesh area side in meters.
        #[arg(long)]
        side: Option<f64>,
        /// Mesh radio range in meters.
        #[arg(long)]
        range: Option<f64>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { config, overrides } => {
            let mut cfg = ScenarioConfig::default();
            if let Some(path) = &config {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                cfg.apply_text(&text)?;
            }
            for kv in &overrides {
                cfg.apply_override(kv)?;
            }
            cfg.validate()?;
            let report = run_experiment(&cfg, &cfg.output_root())?;
            print!("{}", summary_text(&cfg.name, &report.rows));
            println!("outputs in {}", report.dir.display());
        }
        Command::ReportAnalytics { csv } => print!("{}", analytics_report(csv.as_deref())?),
        Command::GenTopology { kind, nodes, seed, out, side, range } => {
            let t = generate_topology(kind.into(), nodes, seed, side, range)?;
            write_topology(&t, &out)?;
            println!("{} nodes, {} edges, mean degree {:.2} -> {}", t.len(), t.edge_count(), t.mean_degree(), out.display());
        }
    }
    Ok(())
}
