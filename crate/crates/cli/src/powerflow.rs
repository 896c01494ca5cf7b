use std::path::PathBuf;
use std::process::ExitCode;

use gridsight_core::powerflow::{line_flows, solve_newton, Controls, SolveOptions, SolveOutcome};
use serde_json::json;

#[derive(clap::Args)]
pub struct Args {
    /// Grid file (JSON).
    #[arg(long)]
    grid: PathBuf,
    /// Ignore unknown keys in the grid file.
    #[arg(long)]
    lenient: bool,
    /// Convergence tolerance on the mismatch infinity norm, p.u.
    #[arg(long, default_value_t = SolveOptions::default().tol)]
    tol: f64,
    #[arg(long, default_value_t = SolveOptions::default().max_iter)]
    max_iter: usize,
    /// Write the solution JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Exit 0 converged, 2 diverged, 3 islanded.
pub fn run(args: Args) -> anyhow::Result<ExitCode> {
    let spec = crate::load_grid(&args.grid, args.lenient)?;
    let opts = SolveOptions {
        tol: args.tol,
        max_iter: args.max_iter,
        ..Default::default()
    };
    let outcome = solve_newton(&spec, &Controls::from_spec(&spec), &opts)?;

    let (doc, code) = match &outcome {
        SolveOutcome::Converged(sol) => {
            let buses: Vec<_> = spec
                .buses
                .iter()
                .enumerate()
                .map(|(i, b)| json!({"id": b.id, "v": sol.state.v[i], "theta": sol.state.theta[i]}))
                .collect();
            let doc = json!({
                "status": "converged",
                "iterations": sol.iterations,
                "mismatch_norm": sol.final_mismatch_norm,
                "trace": sol.trace,
                "slack_power": {"p": sol.slack_power.0, "q": sol.slack_power.1},
                "buses": buses,
                "branches": line_flows(&sol.state, &spec),
                "warnings": sol.warnings,
            });
            (doc, 0)
        }
        SolveOutcome::Diverged { .. } => (serde_json::to_value(&outcome)?, 2),
        SolveOutcome::Islanded { .. } => (serde_json::to_value(&outcome)?, 3),
    };
    crate::emit(args.out.as_deref(), &serde_json::to_string_pretty(&doc)?)?;
    Ok(ExitCode::from(code))
}
