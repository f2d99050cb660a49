use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gta_core::fmt::g17;
use gta_core::harness::{self, Cell, ExperimentConfig, HarnessError};
use gta_core::topology::{build_graph, metropolis_weights, GraphKind, Method};

#[derive(Parser)]
#[command(name = "gta", version, about = "Gradient-tracking experiments and theory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tune, run and write traces, summary, theory and manifest for every grid cell.
    Run {
        config: PathBuf,
        /// Output directory, overriding the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the step-size sweep for one cell and print each candidate.
    Tune {
        config: PathBuf,
        #[arg(long)]
        method: Method,
        #[arg(long, default_value_t = 1)]
        nc: u32,
        #[arg(long, default_value_t = 1)]
        ng: u32,
    },
    /// Evaluate theory quantities over the grid and write theory.csv.
    Theory {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the Metropolis mixing rate of a graph.
    Beta {
        #[arg(long)]
        graph: GraphKind,
        #[arg(long)]
        nodes: usize,
        #[arg(long, default_value_t = 0.0)]
        laziness: f64,
        /// Edge list such as `0-1,1-2`, for `edge_list` graphs.
        #[arg(long)]
        edges: Option<String>,
        /// Also print beta^nc.
        #[arg(long, default_value_t = 1)]
        nc: u32,
    },
}

fn parse_edges(text: &str) -> Result<Vec<(usize, usize)>, HarnessError> {
    text.split(',')
        .map(|p| {
            let (a, b) = p
                .trim()
                .split_once('-')
                .ok_or_else(|| HarnessError::Config(format!("bad edge '{p}'")))?;
            let node = |s: &str| s.trim().parse().map_err(|_| HarnessError::Config(format!("bad node '{s}'")));
            Ok((node(a)?, node(b)?))
        })
        .collect()
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out.unwrap_or_else(|| cfg.output.clone());
            let res = harness::run_experiment(&cfg, &dir)?;
            println!("beta = {}", g17(res.beta));
            for c in &res.cells {
                println!(
                    "{}: alpha = {} final opt_err = {}",
                    c.cell.stem(),
                    g17(c.tune.alpha),
                    g17(c.trace.final_error().opt_err)
                );
            }
            println!("wrote {}", dir.display());
        }
        Command::Tune { config, method, nc, ng } => {
            let cfg = ExperimentConfig::load(&config)?;
            if nc == 0 || ng == 0 {
                return Err(HarnessError::Config("--nc and --ng must be positive".into()));
            }
            let suite = cfg.build_suite()?;
            let w = cfg.build_mixing()?;
            let strategy = cfg.build_strategy(&w, method, nc)?;
            let cell = Cell { method, n_c: nc, n_g: ng };
            let t = harness::tune_step_size(&suite, &strategy, ng, cfg.tune_iterations(&cell), cfg.tune_exponents)?;
            println!("t,alpha,final_opt_err,failure");
            for c in &t.candidates {
                println!(
                    "{},{},{},{}",
                    c.exponent,
                    g17(c.alpha),
                    c.final_opt_err.map(g17).unwrap_or_default(),
                    c.failure.as_deref().unwrap_or("").replace(',', ";")
                );
            }
            println!("best alpha = {}", g17(t.alpha));
        }
        Command::Theory { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out.unwrap_or_else(|| cfg.output.clone());
            let (rows, ordering) = harness::theory_report(&cfg, Some(&dir))?;
            harness::write_theory_csv(&rows, std::io::stdout().lock()).map_err(|source| HarnessError::Io {
                path: "<stdout>".into(),
                source,
            })?;
            for o in &ordering {
                println!(
                    "ordering nc={} ng={} alpha={}: {} >= {} >= {} {}",
                    o.n_c,
                    o.n_g,
                    g17(o.alpha),
                    g17(o.rhos[0]),
                    g17(o.rhos[1]),
                    g17(o.rhos[2]),
                    if o.holds { "holds" } else { "VIOLATED" }
                );
            }
        }
        Command::Beta {
            graph,
            nodes,
            laziness,
            edges,
            nc,
        } => {
            let edges = edges.as_deref().map(parse_edges).transpose()?;
            let g = build_graph(graph, nodes, edges.as_deref())?;
            let w = metropolis_weights(&g, laziness)?;
            println!("beta = {}", g17(w.beta()));
            if nc > 1 {
                println!("beta^{nc} = {}", g17(w.beta().powi(nc as i32)));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
