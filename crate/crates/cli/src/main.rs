use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use delayfeed::experiment::{aggregate, run_seed, valid_variant_names, ExperimentConfig};
use delayfeed::harness::{ExperimentReport, RunOptions};
use delayfeed::types::{DAY, HOUR};

#[derive(Parser)]
#[command(name = "delayfeed", version, about = "Delay-adjusted conversion prediction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic click stream and its ground-truth sidecar.
    Gen {
        /// Experiment config (JSON); built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Stream seed; defaults to the config's first seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run variants over one or more seeds and write reports.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// A variant name, a comma-separated list, or `all`.
        #[arg(long, default_value = "all")]
        variant: String,
        /// Comma-separated seeds; overrides the config.
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
        /// Output directory; overrides the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Variants trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Flatten reports into plot-ready CSV series.
    Plotdata {
        /// Directory holding `report_seed<N>.json` files.
        report_dir: PathBuf,
        /// Where to write the CSVs; defaults to the report directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DELAYFEED_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen { config, seed, out } => cmd_gen(config.as_deref(), seed, &out),
        Command::Run {
            config,
            variant,
            seed,
            out,
            jobs,
        } => cmd_run(config.as_deref(), &variant, &seed, out, jobs),
        Command::Plotdata { report_dir, out } => cmd_plotdata(&report_dir, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    ExperimentConfig::from_json(&text).with_context(|| format!("loading config {}", path.display()))
}

fn cmd_gen(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let config = load_config(config)?;
    let seed = seed.unwrap_or(config.seeds[0]);
    let stream = config.stream(seed)?;
    stream
        .write_dir(out)
        .with_context(|| format!("writing stream to {}", out.display()))?;

    let events: usize = stream.examples.iter().map(|e| e.events.len()).sum();
    let label: f64 = stream.examples.iter().map(|e| e.mature_label()).sum();
    println!("clicks:    {}", stream.examples.len());
    println!("campaigns: {}", stream.population.campaigns.len());
    println!("events:    {events}");
    println!("mean mature label: {:.4}", label / stream.examples.len().max(1) as f64);
    println!("campaign median delay:");
    let edges = [(6.0 * HOUR, "< 6h"), (DAY, "6h-1d"), (3.0 * DAY, "1d-3d"), (7.0 * DAY, "3d-7d"), (f64::INFINITY, ">= 7d")];
    let mut counts = [0usize; 5];
    for c in &stream.population.campaigns {
        let m = c.median_delay();
        counts[edges.iter().position(|(e, _)| m < *e).expect("last edge is infinite")] += 1;
    }
    for ((_, label), n) in edges.iter().zip(counts) {
        println!("  {label:>6} {n:4} {}", "#".repeat(n));
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_run(config: Option<&Path>, variant: &str, seeds: &[u64], out: Option<PathBuf>, jobs: usize) -> Result<()> {
    let mut config = load_config(config)?;
    if variant != "all" {
        let names: Vec<String> = variant.split(',').map(|s| s.trim().to_string()).collect();
        let valid = valid_variant_names();
        if let Some(bad) = names.iter().find(|n| !valid.contains(n)) {
            bail!("unknown variant `{bad}`; valid names: {}, all", valid.join(", "));
        }
        config.variants = names;
    }
    if !seeds.is_empty() {
        config.seeds = seeds.to_vec();
    }
    if let Some(out) = out {
        config.output_dir = Some(out);
    }
    config.validate()?;
    let out = config.output_dir.clone().unwrap_or_else(|| PathBuf::from("reports"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let mut reports = Vec::new();
    for &seed in &config.seeds {
        let (report, _) = run_seed(&config, seed, jobs, &RunOptions::default())?;
        write(&out.join(format!("report_seed{seed}.json")), &report.to_json()?)?;
        write(&out.join(format!("report_seed{seed}.csv")), &report.to_csv())?;
        for (name, v) in &report.variants {
            let all = &v.slices["ALL"];
            log::info!(
                "seed {seed} {name:>8}: pll {} bias {} vs M3 {}",
                fmt(all.pll),
                fmt(all.bias),
                all.pll_vs_m3_pct.map_or("-".into(), |p| format!("{p:+.2}%"))
            );
        }
        reports.push(report);
    }
    if reports.len() > 1 {
        let agg = aggregate(&config.seeds, &reports)?;
        write(&out.join("aggregate.json"), &agg.to_json()?)?;
    }
    println!("wrote reports for {} seed(s) to {}", reports.len(), out.display());
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_plotdata(report_dir: &Path, out: Option<&Path>) -> Result<()> {
    let mut found = Vec::new();
    if let Ok(entries) = fs::read_dir(report_dir) {
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(seed) = name.strip_prefix("report_seed").and_then(|s| s.strip_suffix(".json")) {
                found.push((seed.to_string(), entry.path()));
            }
        }
    }
    if found.is_empty() {
        bail!(
            "no reports in {}; expected report_seed<N>.json (and report_seed<N>.csv) as written by `delayfeed run`",
            report_dir.display()
        );
    }
    found.sort();
    let out = out.unwrap_or(report_dir);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (seed, path) in &found {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let report = ExperimentReport::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
        write(&out.join(format!("timeseries_seed{seed}.csv")), &report.timeseries_csv())?;
        write(&out.join(format!("improvements_seed{seed}.csv")), &report.improvements_csv())?;
    }
    println!("wrote plot data for {} report(s) to {}", found.len(), out.display());
    Ok(())
}
