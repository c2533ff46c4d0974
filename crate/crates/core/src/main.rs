use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use warpflow::pipeline::{refinement_study, run_scenario, RunSummary, StudyResult};
use warpflow::scenario::{ScenarioConfig, Stage};
use warpflow::{Error, Result};

#[derive(Parser)]
#[command(
    name = "warpflow",
    version,
    about = "Ricci flow on warped products over a circle"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario JSON file, or `preset:<name>` (flat-static, coupled-p1, coupled-p2).
    #[arg(long)]
    config: String,
    /// Output directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Refinement level: spacing halved this many times (for `study`, the number of levels).
    #[arg(long)]
    level: Option<u32>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Every stage requested by the configuration.
    Run(Common),
    /// Integrate the flow and check the maximum-principle monitors.
    Flow(Common),
    /// Flow plus conjugate heat kernels and their checks.
    Conjugate(Common),
    /// Flow, kernels and Harnack checks.
    Harnack(Common),
    /// Flow, kernels and reduced-distance checks.
    Reduced(Common),
    /// Flow, kernels and entropy functionals.
    Functionals(Common),
    /// Refinement study over several levels.
    Study(Common),
    /// Print the verdicts stored in an output directory.
    Report {
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
}

fn load(common: &Common) -> Result<ScenarioConfig> {
    let mut cfg = match common.config.strip_prefix("preset:") {
        Some(name) => ScenarioConfig::preset(name)?,
        None => ScenarioConfig::load(Path::new(&common.config))?,
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn print_run(s: &RunSummary) {
    println!("{} (n = {}, level {})", s.name, s.n_points, s.level);
    for v in &s.verdicts {
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!(
            "  {tag}  {:<32} value {:>13.6e}  tol {:>10.3e}",
            v.name, v.value, v.tolerance
        );
    }
    for (k, v) in &s.diagnostics {
        println!("  ----  {k:<32} value {v:>13.6e}");
    }
}

fn print_study(s: &StudyResult) {
    let ns: Vec<String> = s.levels.iter().map(|l| l.n_points.to_string()).collect();
    println!("{} study over n = {}", s.name, ns.join(", "));
    for v in &s.verdicts {
        let tag = if v.verdict.pass { "PASS" } else { "FAIL" };
        let order = v
            .verdict
            .order
            .map_or("-".to_string(), |o| format!("{o:.2}"));
        println!(
            "  {tag}  {:<24} order {order:>6}  values {:?}",
            v.name, v.verdict.values
        );
    }
}

fn run_stages(common: &Common, stages: Option<&[Stage]>) -> Result<bool> {
    let mut cfg = load(common)?;
    if let Some(stages) = stages {
        cfg.checks = stages.to_vec();
    }
    let summary = run_scenario(&cfg, common.level.unwrap_or(0), &common.out)?;
    print_run(&summary);
    Ok(summary.all_pass)
}

fn report(out: &Path) -> Result<bool> {
    let mut any = false;
    let mut pass = true;
    for (file, study) in [("verdict.json", false), ("study.json", true)] {
        let path = out.join(file);
        let Ok(text) = std::fs::read_to_string(&path) else {
            continue;
        };
        any = true;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        pass &= value["all_pass"].as_bool().unwrap_or(false);
        let items = value["verdicts"].as_array().cloned().unwrap_or_default();
        println!("{}", path.display());
        for v in items {
            let ok = if study {
                v["verdict"]["pass"].as_bool()
            } else {
                v["pass"].as_bool()
            };
            let tag = if ok == Some(true) { "PASS" } else { "FAIL" };
            println!("  {tag}  {}", v["name"].as_str().unwrap_or("?"));
        }
    }
    if !any {
        return Err(Error::config(format!(
            "no verdict.json or study.json in {}",
            out.display()
        )));
    }
    Ok(pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(c) => run_stages(c, None),
        Command::Flow(c) => run_stages(c, Some(&[Stage::Flow])),
        Command::Conjugate(c) => run_stages(c, Some(&[Stage::Flow, Stage::Conjugate])),
        Command::Harnack(c) => run_stages(c, Some(&[Stage::Flow, Stage::Harnack])),
        Command::Reduced(c) => run_stages(c, Some(&[Stage::Flow, Stage::Reduced])),
        Command::Functionals(c) => run_stages(c, Some(&[Stage::Flow, Stage::Functionals])),
        Command::Study(c) => load(c).and_then(|cfg| {
            let s = refinement_study(&cfg, c.level.unwrap_or(3), Some(&c.out))?;
            print_study(&s);
            Ok(s.all_pass)
        }),
        Command::Report { out } => report(out),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
