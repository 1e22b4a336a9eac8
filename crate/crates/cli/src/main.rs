use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use guidance_interval::config::RunConfig;
use guidance_interval::io;
use guidance_interval::metrics::{MetricOptions, MetricsReport};
use guidance_interval::plot::{self, PlotKind};
use guidance_interval::sampler::GuidedOde;
use guidance_interval::search::{
    grid_sweep, screen_then_confirm, step_importance_ablation, two_phase_search, Evaluator, SweepOptions,
    SweepReport,
};
use guidance_interval::{Error, Result};
use serde_json::json;

const DEFAULT_OUT: &str = "gilab-out";
const JOURNAL: &str = "sweep.journal.jsonl";

#[derive(Parser)]
#[command(name = "gilab", version, about = "Guidance-interval experiments on exact Gaussian-mixture problems")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory; every file a command writes goes here
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Continue an interrupted sweep from its journal
    #[arg(long, global = true)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Print the noise levels of the configured schedule
    Schedule,
    /// Sample a batch and a set of trajectories
    Sample,
    /// Compare two batch files
    Metrics { real: PathBuf, gen: PathBuf },
    /// Evaluate the configured grid of (w, interval) cells
    Sweep,
    /// Two-phase interval search at the configured w
    Search,
    /// Per-step guidance ablation
    Ablate,
    /// Render an SVG plot
    Plot {
        /// Input artifact: trajectories, batch or sweep report
        #[arg(long)]
        input: Option<PathBuf>,
        /// Plot kind, overriding the config
        #[arg(long, value_parser = parse_kind)]
        kind: Option<PlotKind>,
    },
}

fn parse_kind(s: &str) -> std::result::Result<PlotKind, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| {
        format!("unknown plot kind {s:?}; expected trajectory-fan, density-heatmap, histogram, metric-curve or pr-curve")
    })
}

enum Status {
    Done,
    Partial,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Input(_) | Error::Parse(_) | Error::Io(_) => 2,
        Error::Domain(_) | Error::SolverDivergence { .. } | Error::Internal(_) | Error::Search(_) => 3,
        Error::ResumeConflict { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(k) = cli.global.workers {
        if k == 0 {
            eprintln!("error: --workers must be >= 1");
            return ExitCode::from(2);
        }
        // Only fails if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
    }
    match run(&cli) {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::Partial) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::ResumeConflict { .. } = e {
                eprintln!("hint: delete the journal and start a fresh sweep, or pass --resume for a matching config");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> Result<Status> {
    let g = &cli.global;
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    let out = g
        .out
        .clone()
        .or_else(|| match (&cfg.out, &g.config) {
            (Some(o), Some(c)) => Some(c.parent().unwrap_or(Path::new(".")).join(o)),
            (Some(o), None) => Some(o.clone()),
            _ => None,
        })
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    match &cli.command {
        Command::Schedule => cmd_schedule(&cfg, &out),
        Command::Sample => cmd_sample(&cfg, &out),
        Command::Metrics { real, gen } => cmd_metrics(&cfg, g.config.is_some(), real, gen, &out),
        Command::Sweep => cmd_sweep(&cfg, &out, g.resume),
        Command::Search => cmd_search(&cfg, &out),
        Command::Ablate => cmd_ablate(&cfg, &out),
        Command::Plot { input, kind } => cmd_plot(&cfg, g.config.is_some(), input.as_deref(), *kind, &out),
    }
}

fn write(out: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(name), contents)?;
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))
}

fn write_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    write(out, "resolved_config.toml", &cfg.to_toml()?)
}

fn evaluator(cfg: &RunConfig) -> Result<Evaluator> {
    Ok(Evaluator::new(cfg.problem()?, cfg.schedule()?, cfg.solver)?
        .with_k(cfg.metrics.k)
        .with_bins(cfg.metrics.bins))
}

fn cmd_schedule(cfg: &RunConfig, out: &Path) -> Result<Status> {
    let schedule = cfg.schedule()?;
    let csv = io::schedule_csv(&schedule)?;
    print!("{csv}");
    write(out, "schedule.csv", &csv)?;
    write_config(cfg, out)?;
    Ok(Status::Done)
}

fn cmd_sample(cfg: &RunConfig, out: &Path) -> Result<Status> {
    let problem = cfg.problem()?;
    let schedule = cfg.schedule()?;
    let guidance = cfg.guidance(&schedule)?;
    let ev = evaluator(cfg)?;
    let batch = ev.sample(&guidance, cfg.n, cfg.seed)?;
    let reference = ev.reference(cfg.n, cfg.seed)?;
    let model = problem.model()?;
    let chains = cfg.sample.trajectories.min(cfg.n);
    let paths = GuidedOde::new(&model, &problem.class, &schedule, cfg.solver)?.trajectories(&guidance, 0..chains, cfg.seed)?;
    let nfe = batch.provenance().map(|p| p.nfe).unwrap_or_default();
    let meta = json!({
        "schema_version": 1,
        "command": "sample",
        "class": problem.class,
        "seed": cfg.seed,
        "n": cfg.n,
        "solver": cfg.solver,
        "schedule": schedule.rule(),
        "guidance": guidance,
        "guided_steps": guidance.guided_steps(),
        "nfe": nfe,
        "nfe_per_chain": guidance.nfe(cfg.solver),
        "trajectories": chains,
    });
    write(out, "batch.csv", &io::batch_csv(&batch))?;
    write(out, "reference.csv", &io::batch_csv(&reference))?;
    write(out, "trajectories.csv", &io::trajectories_csv(&paths, 0))?;
    write(out, "metadata.json", &serde_json::to_string_pretty(&meta)?)?;
    write_config(cfg, out)?;
    println!(
        "sampled {} chains: {} conditional + {} unconditional denoiser calls",
        cfg.n, nfe.cond, nfe.uncond
    );
    Ok(Status::Done)
}

fn cmd_metrics(cfg: &RunConfig, with_config: bool, real: &Path, gen: &Path, out: &Path) -> Result<Status> {
    let real = io::read_batch_csv(&read(real)?)?;
    let gen = io::read_batch_csv(&read(gen)?)?;
    let problem = if with_config { Some(cfg.problem()?) } else { None };
    let mixture = match &problem {
        Some(p) if p.dim() == real.dim() => Some(p.reference()?),
        _ => None,
    };
    let opts = MetricOptions {
        k: Some(cfg.metrics.k),
        bins: cfg.metrics.bins,
        mixture,
    };
    let report = MetricsReport::compute(&real, &gen, opts)?;
    let text = report.to_json();
    println!("{text}");
    write(out, "metrics.json", &text)?;
    Ok(Status::Done)
}

fn cmd_sweep(cfg: &RunConfig, out: &Path, resume: bool) -> Result<Status> {
    let ev = evaluator(cfg)?;
    let grid = cfg.sweep_grid();
    write_config(cfg, out)?;
    if let Some(screen) = &cfg.sweep.screen {
        let report = screen_then_confirm(&ev, &grid, screen.n_small, grid.n, screen.fraction, &SweepOptions::default())?;
        write(out, "screen.json", &report.to_json())?;
        write(out, "screen.csv", &report.screen.to_csv()?)?;
        write(out, "sweep.csv", &report.confirm.to_csv()?)?;
        write(out, "sweep.json", &report.confirm.to_json())?;
        print_best(&report.confirm);
        return Ok(Status::Done);
    }
    let opts = SweepOptions {
        workers: None,
        journal: Some(out.join(JOURNAL)),
        resume,
        max_cells: cfg.sweep.max_cells,
    };
    fs::create_dir_all(out)?;
    let outcome = grid_sweep(&ev, &grid, &opts)?;
    write(out, "sweep.json", &outcome.report.to_json())?;
    write(out, "sweep.csv", &outcome.report.to_csv()?)?;
    let mut timing = String::from("# gilab timing v1\nw,hi_index,lo_index,seconds\n");
    for t in &outcome.timings {
        let (hi, lo) = t.cell.indices().map(|(h, l)| (h.to_string(), l.to_string())).unwrap_or_default();
        let _ = writeln!(timing, "{},{hi},{lo},{:.6}", t.cell.w, t.seconds);
    }
    write(out, "timing.csv", &timing)?;
    print_best(&outcome.report);
    if outcome.complete {
        Ok(Status::Done)
    } else {
        let total = grid.cells().len();
        eprintln!(
            "sweep stopped after {} of {total} cells; run again with --resume to finish",
            outcome.report.rows.len()
        );
        Ok(Status::Partial)
    }
}

fn print_best(report: &SweepReport) {
    let Some(r) = report.best_row() else {
        println!("no cell evaluated successfully");
        return;
    };
    let loss = r.loss.unwrap_or(f64::NAN);
    match (r.sigma_lo, r.sigma_hi) {
        (Some(lo), Some(hi)) => println!("best {}: {loss:.6} at w = {}, sigma in ({lo}, {hi}]", report.metric, r.w),
        _ => println!("best {}: {loss:.6} without guidance", report.metric),
    }
}

fn cmd_search(cfg: &RunConfig, out: &Path) -> Result<Status> {
    let ev = evaluator(cfg)?;
    let result = two_phase_search(&ev, cfg.search.w, &cfg.two_phase_options())?;
    write(out, "search.json", &result.to_json())?;
    write_config(cfg, out)?;
    println!(
        "w = {}: sigma in ({}, {}], {} = {:.6} after {} evaluations",
        result.w, result.sigma_lo, result.sigma_hi, cfg.search.metric, result.loss, result.evaluations
    );
    Ok(Status::Done)
}

fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<Status> {
    let ev = evaluator(cfg)?;
    let n = cfg.ablate.n.unwrap_or(cfg.n);
    let report = step_importance_ablation(&ev, cfg.ablate.w, cfg.ablate.metric, n, cfg.seed)?;
    let mut csv = String::from("# gilab ablation v1\nstep,sigma,enable_loss,enable_delta,disable_loss,disable_delta\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for s in &report.steps {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            s.step,
            s.sigma,
            opt(s.enable_loss),
            opt(s.enable_delta),
            opt(s.disable_loss),
            opt(s.disable_delta)
        );
    }
    write(out, "ablation.json", &report.to_json())?;
    write(out, "ablation.csv", &csv)?;
    write_config(cfg, out)?;
    println!(
        "full delta {:.6}; sum of single-step deltas {}",
        report.full_delta(),
        opt(report.enable_delta_sum())
    );
    Ok(Status::Done)
}

fn cmd_plot(cfg: &RunConfig, with_config: bool, input: Option<&Path>, kind: Option<PlotKind>, out: &Path) -> Result<Status> {
    let mut spec = cfg.plot.clone();
    if let Some(k) = kind {
        spec.kind = k;
    }
    let problem = if with_config { Some(cfg.problem()?) } else { None };
    let need_input = || input.ok_or_else(|| Error::Input("this plot needs --input".into()));
    let (name, svg) = match spec.kind {
        PlotKind::TrajectoryFan => {
            let paths = io::read_trajectories_csv(&read(need_input()?)?)?;
            let density = match &problem {
                Some(p) if p.dim() == 1 => Some(p.reference()?),
                _ => None,
            };
            ("trajectory-fan", plot::trajectory_fan(&paths, density, &spec)?)
        }
        PlotKind::DensityHeatmap => match input {
            Some(path) => ("density-heatmap", plot::batch_heatmap(&io::read_batch_csv(&read(path)?)?, &spec)?),
            None => {
                let p = cfg.problem()?;
                let schedule = cfg.schedule()?;
                ("density-heatmap", plot::density_plane(p.reference()?, schedule.sigmas(), &spec)?)
            }
        },
        PlotKind::Histogram => {
            let batch = io::read_batch_csv(&read(need_input()?)?)?;
            let density = match &problem {
                Some(p) if p.dim() == batch.dim() => Some(p.reference()?),
                _ => None,
            };
            ("histogram", plot::histogram(&batch, density, &spec)?)
        }
        PlotKind::MetricCurve | PlotKind::PrCurve => {
            let report: SweepReport = serde_json::from_str(&read(need_input()?)?)?;
            if spec.kind == PlotKind::MetricCurve {
                ("metric-curve", plot::metric_curve(&report, &spec)?)
            } else {
                ("pr-curve", plot::pr_curve(&report, &spec)?)
            }
        }
    };
    let file = format!("{name}.svg");
    write(out, &file, &svg)?;
    println!("wrote {}", out.join(file).display());
    Ok(Status::Done)
}
