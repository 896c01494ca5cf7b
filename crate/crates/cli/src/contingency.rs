use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use gridsight_core::contingency::{
    analyze, derive_probabilities, risk_surface, Evidence, ScreeningPolicy,
};
use gridsight_core::fixtures::seven_bus;
use gridsight_core::grid::GridSpec;
use gridsight_core::powerflow::{Controls, SolveOptions};
use gridsight_core::report::{
    map_to_asset, GeoFrame, IncidentReport, StoredReport, DEFAULT_RADIUS_M,
};

#[derive(clap::Args)]
pub struct Args {
    /// Grid file; the bundled seven-bus network if omitted.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long)]
    lenient: bool,
    /// Directory of reports: `*.json` incident reports and `*.ndjson` store logs.
    #[arg(long)]
    reports_dir: Option<PathBuf>,
    /// Drop candidates less probable than this.
    #[arg(long, conflicts_with = "exhaustive")]
    threshold: Option<f64>,
    /// Assess at most this many candidates.
    #[arg(long, conflicts_with = "exhaustive")]
    budget: Option<usize>,
    /// Failure probability of assets with no reports.
    #[arg(long, default_value_t = ScreeningPolicy::default().floor)]
    floor: f64,
    /// Largest number of simultaneous outages.
    #[arg(long, default_value_t = 2)]
    max_order: usize,
    /// Assess every candidate, no screening.
    #[arg(long)]
    exhaustive: bool,
    /// Raster resolution (cells per side).
    #[arg(long, default_value_t = 20)]
    res: usize,
    /// Reports farther than this from any branch are not mapped.
    #[arg(long, default_value_t = DEFAULT_RADIUS_M)]
    radius_m: f64,
    /// Where contingencies.csv, risk.csv and risk.svg go.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

struct Loaded {
    evidence: Vec<Evidence>,
    files: usize,
    skipped: usize,
}

fn load_reports(dir: &Path, spec: &GridSpec, radius_m: f64) -> anyhow::Result<Loaded> {
    let frame = GeoFrame::default();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("json" | "ndjson")
            )
        })
        // a store directory also holds its rejection log, which carries no reports
        .filter(|p| p.file_name().is_none_or(|n| n != "rejections.ndjson"))
        .collect();
    paths.sort();

    let mut out = Loaded {
        evidence: Vec::new(),
        files: 0,
        skipped: 0,
    };
    for path in paths {
        out.files += 1;
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) => {
                tracing::warn!("skipping {}: {e}", path.display());
                out.skipped += 1;
                continue;
            }
        };
        if path.extension().is_some_and(|e| e == "ndjson") {
            for (n, line) in text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
            {
                match serde_json::from_str::<StoredReport>(line) {
                    Ok(s) => out.evidence.push(s.evidence()),
                    Err(e) => {
                        tracing::warn!("skipping {}:{}: {e}", path.display(), n + 1);
                        out.skipped += 1;
                    }
                }
            }
            continue;
        }
        let report = serde_json::from_str::<IncidentReport>(&text)
            .map_err(|e| e.to_string())
            .and_then(|r| r.validate().map(|_| r).map_err(|e| e.to_string()));
        match report {
            Ok(r) => out.evidence.push(Evidence {
                report_id: r.report_id,
                asset: map_to_asset(r.location, spec, radius_m, &frame),
                confidence: r.confidence,
            }),
            Err(e) => {
                tracing::warn!("skipping {}: {e}", path.display());
                out.skipped += 1;
            }
        }
    }
    Ok(out)
}

pub fn run(args: Args) -> anyhow::Result<ExitCode> {
    let spec = match &args.grid {
        Some(p) => crate::load_grid(p, args.lenient)?,
        None => seven_bus(),
    };
    let defaults = ScreeningPolicy::default();
    let policy = if args.exhaustive {
        ScreeningPolicy {
            floor: args.floor,
            ..ScreeningPolicy::exhaustive(args.max_order)
        }
    } else {
        ScreeningPolicy {
            floor: args.floor,
            threshold: args.threshold.unwrap_or(defaults.threshold),
            budget: args.budget.unwrap_or(defaults.budget),
            max_order: args.max_order,
        }
    };
    policy.validate()?;
    if args.res < 2 {
        anyhow::bail!("--res must be at least 2");
    }

    let loaded = match &args.reports_dir {
        Some(dir) => load_reports(dir, &spec, args.radius_m)?,
        None => Loaded {
            evidence: Vec::new(),
            files: 0,
            skipped: 0,
        },
    };
    let probs = derive_probabilities(&loaded.evidence, &spec, policy.floor);
    let assessment = analyze(
        &spec,
        &probs,
        &policy,
        &Controls::from_spec(&spec),
        &SolveOptions::default(),
        args.exhaustive,
    )?;
    let raster = risk_surface(&assessment, &spec, args.res)?;

    std::fs::create_dir_all(&args.out_dir)?;
    let write = |name: &str, text: String| {
        let p = args.out_dir.join(name);
        std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    };
    write("contingencies.csv", assessment.to_csv())?;
    write("risk.csv", raster.to_csv())?;
    write("risk.svg", raster.to_svg(&spec))?;

    let mapped = loaded.evidence.iter().filter(|e| e.asset.is_some()).count();
    println!(
        "reports: {} used ({} mapped to assets), {} skipped from {} files",
        loaded.evidence.len(),
        mapped,
        loaded.skipped,
        loaded.files
    );
    println!("contingencies assessed: {}", assessment.assessed.len());
    if let Some(w) = assessment.worst() {
        println!(
            "worst: {} severity {:.3}{} probability {:e}",
            w.contingency,
            w.severity.value,
            if w.severity.unsolvable {
                " (unsolvable)"
            } else {
                ""
            },
            w.probability
        );
    }
    println!(
        "wrote contingencies.csv, risk.csv, risk.svg to {}",
        args.out_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}
