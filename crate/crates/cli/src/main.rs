//! `occ4d`: simulate, generate queries, train, evaluate, sweep and report.
//!
//! Exit codes: 0 success, 1 runtime error or failed evaluation threshold,
//! 2 usage error.

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use occ4d::eval::EvalReport;
use occ4d::field::Mode;
use occ4d::pipeline::{
    self, EvalStageConfig, GenQueriesConfig, ScalingConfig, ScalingRow, SimulateConfig, TrainStageConfig,
};
use serde::de::DeserializeOwned;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "occ4d", version, about = "Desk-scale 4D occupancy field pre-training")]
struct Cli {
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true, env = "OCC4D_WORKERS", default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scene suite into a dataset directory.
    Simulate(SimulateArgs),
    /// Fit the feature reduction and write one query set per scene.
    Genqueries(GenqueriesArgs),
    /// Train a field on generated query sets.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a set of scenes.
    Eval(EvalArgs),
    /// Train at several sample counts and evaluate each run.
    Scaling(ScalingArgs),
    /// Summarize evaluation reports and scaling tables as Markdown.
    Report(ReportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON stage config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "OCC4D_DATASET")]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenqueriesArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "OCC4D_DATASET")]
    dataset: PathBuf,
    #[arg(long, env = "OCC4D_QUERIES")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "OCC4D_QUERIES")]
    queries: PathBuf,
    #[arg(long, env = "OCC4D_RUN")]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `amortized` or `fit_per_scene`.
    #[arg(long)]
    mode: Option<String>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "OCC4D_CHECKPOINT")]
    checkpoint: PathBuf,
    /// Dataset directory whose scenes are evaluated.
    #[arg(long, env = "OCC4D_SCENES")]
    scenes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Evaluate even when the checkpoint digest does not match its run.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ScalingArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "OCC4D_QUERIES")]
    queries: PathBuf,
    #[arg(long, env = "OCC4D_SCENES")]
    scenes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated sample counts.
    #[arg(long, value_delimiter = ',')]
    counts: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Args)]
struct ReportArgs {
    /// `report.json` or `scaling.json` files, or directories holding them.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Write the Markdown here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => Ok(pipeline::read_json(p)?),
    }
}

fn simulate(a: SimulateArgs) -> Result<bool> {
    let mut cfg: SimulateConfig = load(&a.config)?;
    cfg.count = a.count.unwrap_or(cfg.count);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    let m = pipeline::run_simulate(&cfg, &a.out)?;
    println!("simulated {} scenes into {} ({} files)", cfg.count, a.out.display(), m.files.len());
    println!("config digest {}", m.config_digest);
    Ok(true)
}

fn genqueries(a: GenqueriesArgs) -> Result<bool> {
    let mut cfg: GenQueriesConfig = load(&a.config)?;
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    let m = pipeline::run_genqueries(&cfg, &a.dataset, &a.out)?;
    let q = pipeline::QueriesDir::open(&a.out)?;
    for i in 0..q.record.count {
        let s = q.sample(i)?;
        if !s.meta.exhausted.is_empty() {
            let names: Vec<&str> = s.meta.exhausted.iter().map(|t| t.name()).collect();
            eprintln!("sample {i}: fewer queries than configured for {}", names.join(", "));
        }
    }
    println!("wrote {} query sets into {}", q.record.count, a.out.display());
    println!("config digest {}", m.config_digest);
    Ok(true)
}

fn parse_mode(s: &str) -> Result<Mode> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .with_context(|| format!("unknown mode '{s}' (expected amortized or fit_per_scene)"))
}

fn train(a: TrainArgs) -> Result<bool> {
    let mut cfg: TrainStageConfig = load(&a.config)?;
    cfg.train.total_steps = a.steps.unwrap_or(cfg.train.total_steps);
    cfg.train.seed = a.seed.unwrap_or(cfg.train.seed);
    if let Some(m) = &a.mode {
        cfg.train.mode = parse_mode(m)?;
    }
    let (m, history) = pipeline::run_train(&cfg, &a.queries, &a.out, a.resume)?;
    if let Some(last) = history.last() {
        println!(
            "step {} loss {:.6} (occ {:.6}, feature {:.6}, ego {:.6})",
            last.step, last.total, last.occ, last.dino, last.ego
        );
    }
    println!("checkpoint {}", a.out.join(pipeline::CHECKPOINT).display());
    println!("config digest {}", m.config_digest);
    Ok(true)
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

fn eval(a: EvalArgs) -> Result<bool> {
    let cfg: EvalStageConfig = load(&a.config)?;
    let o = pipeline::run_eval(&cfg, &a.checkpoint, &a.scenes, &a.out, a.force)?;
    let r = &o.report;
    println!(
        "R@P{:.0} {}  AP {}  soft-IoU {}  ego AP {}  (oracle R@P {})",
        r.precision_target * 100.0,
        fmt(r.r_at_p70),
        fmt(r.ap_occ),
        fmt(r.soft_iou),
        fmt(r.ap_ego),
        fmt(r.oracle.r_at_p)
    );
    println!("report {}", a.out.join("report.json").display());
    for f in &o.failures {
        eprintln!("threshold failed: {f}");
    }
    Ok(o.failures.is_empty())
}

fn scaling(a: ScalingArgs) -> Result<bool> {
    let mut cfg: ScalingConfig = load(&a.config)?;
    if let Some(c) = a.counts {
        cfg.counts = c;
    }
    if let Some(s) = a.seeds {
        cfg.seeds = s;
    }
    println!("{}", ScalingRow::CSV_HEADER);
    let (_, rows) = pipeline::run_scaling(&cfg, &a.queries, &a.scenes, &a.out, |r| println!("{}", r.csv_line()))?;
    for seed in &cfg.seeds {
        let ok = pipeline::scaling_holds(&rows, *seed, 0.05);
        println!("seed {seed}: {}", if ok { "scales" } else { "does not scale" });
    }
    Ok(true)
}

fn find(p: &Path) -> Vec<PathBuf> {
    if p.is_dir() {
        ["report.json", "scaling.json"].iter().map(|f| p.join(f)).filter(|f| f.exists()).collect()
    } else {
        vec![p.to_path_buf()]
    }
}

fn report(a: ReportArgs) -> Result<bool> {
    let mut md = String::new();
    for input in a.inputs.iter().flat_map(|p| find(p)) {
        let text = std::fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", input.display()))?;
        md.push_str(&format!("## {}\n\n", input.display()));
        if value.is_array() {
            let rows: Vec<ScalingRow> = serde_json::from_value(value).context("scaling table")?;
            md.push_str("| samples | seed | R@P70 | oracle R@P70 | ego AP |\n|---|---|---|---|---|\n");
            for r in rows {
                md.push_str(&format!(
                    "| {} | {} | {} | {} | {} |\n",
                    r.samples,
                    r.seed,
                    fmt(r.r_at_p70),
                    fmt(r.oracle_r_at_p70),
                    fmt(r.ap_ego)
                ));
            }
        } else {
            let r: EvalReport = serde_json::from_value(value).context("evaluation report")?;
            md.push_str(&format!(
                "config digest `{}`\n\n| metric | ray-traced | oracle |\n|---|---|---|\n",
                r.config_digest
            ));
            md.push_str(&format!("| R@P{:.0} | {} | {} |\n", r.precision_target * 100.0, fmt(r.r_at_p70), fmt(r.oracle.r_at_p)));
            md.push_str(&format!("| AP | {} | {} |\n", fmt(r.ap_occ), fmt(r.oracle.ap)));
            md.push_str(&format!("| soft-IoU | {} | {} |\n", fmt(r.soft_iou), fmt(r.oracle.soft_iou)));
            md.push_str(&format!(
                "\nego AP {} (base rate {:.4}); probes free {}, occupied {}, unknown {}\n\n",
                fmt(r.ap_ego),
                r.ego_base_rate,
                r.probe_counts.free,
                r.probe_counts.occupied,
                r.probe_counts.unknown
            ));
            md.push_str("| time | R@P | AP | oracle R@P |\n|---|---|---|---|\n");
            for t in &r.per_time_breakdown {
                md.push_str(&format!(
                    "| {:.1} | {} | {} | {} |\n",
                    t.time,
                    fmt(t.raytrace.r_at_p),
                    fmt(t.raytrace.ap),
                    fmt(t.oracle.r_at_p)
                ));
            }
        }
        md.push('\n');
    }
    match a.out {
        Some(p) => std::fs::write(&p, md).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{md}"),
    }
    Ok(true)
}

fn run(cli: Cli) -> Result<bool> {
    let workers = cli.workers;
    occ4d::par::with_workers(workers, move || match cli.cmd {
        Command::Simulate(a) => simulate(a),
        Command::Genqueries(a) => genqueries(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Scaling(a) => scaling(a),
        Command::Report(a) => report(a),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
