use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

mod capsule;
mod contingency;
mod powerflow;
mod report;

#[derive(Parser)]
#[command(
    name = "gridsight",
    version,
    about = "Grid risk analysis from signed field reports"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the AC power flow of a grid file.
    Powerflow(powerflow::Args),
    /// Screen and assess N-x contingencies, weighted by field reports.
    Contingency(contingency::Args),
    /// Run the report ingestion service.
    Serve(ServeArgs),
    /// Device keys, report signing and submission.
    #[command(subcommand)]
    Report(report::Command),
    /// Data capsules: packaging, installation and flow simulation.
    #[command(subcommand)]
    Capsule(capsule::Command),
}

#[derive(clap::Args)]
struct ServeArgs {
    /// Address to listen on.
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: std::net::SocketAddr,
    /// JSON list of enrolled device records.
    #[arg(long)]
    registry: PathBuf,
    /// Directory holding the append-only report log.
    #[arg(long)]
    store: PathBuf,
    /// Grid file to assess; the bundled seven-bus network if omitted.
    #[arg(long)]
    grid: Option<PathBuf>,
}

fn serve(args: ServeArgs) -> anyhow::Result<ExitCode> {
    use gridsight_server::{load_state, shutdown_signal, ServeConfig, Server};
    let config = ServeConfig {
        listen: args.listen,
        registry: args.registry,
        store_path: args.store,
        grid: args.grid,
    };
    let state = load_state(&config)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let server = Server::bind(config.listen, state).await?;
        eprintln!("listening on http://{}", server.local_addr()?);
        server.run(shutdown_signal()).await?;
        Ok(ExitCode::SUCCESS)
    })
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    // usage errors exit 1 so that 2 and 3 stay reserved for solver outcomes
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Powerflow(a) => powerflow::run(a),
        Command::Contingency(a) => contingency::run(a),
        Command::Serve(a) => serve(a),
        Command::Report(c) => report::run(c),
        Command::Capsule(c) => capsule::run(c),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Writes `text` to `path`, or stdout when no path is given.
fn emit(path: Option<&std::path::Path>, text: &str) -> anyhow::Result<()> {
    use anyhow::Context;
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn read(path: &std::path::Path) -> anyhow::Result<String> {
    use anyhow::Context;
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_grid(
    path: &std::path::Path,
    lenient: bool,
) -> anyhow::Result<gridsight_core::grid::GridSpec> {
    let text = read(path)?;
    gridsight_core::grid::parse_grid_with(&text, lenient)
        .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> anyhow::Result<T> {
    use anyhow::Context;
    let text = read(path)?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
