//! `weathercl`: dataset synthesis, continual training runs, evaluation and reports.
//!
//! Exit codes: 0 on success, 1 when a run fails after it started (artifacts of all
//! completed tasks stay in the output directory), 2 for invalid arguments or an
//! invalid configuration.

mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use weathercl::checkpoint;
use weathercl::config::RunConfig;
use weathercl::imaging::{load_dataset, synthetic_dataset, Dataset, Split, TaskKind};
use weathercl::metrics::MetricRow;
use weathercl::report::{comparison_table, stage_table, TaskReport};
use weathercl::trainer::{evaluate, run_sequence, RunOptions, RUNLOG_HEADER};

#[derive(Parser, Debug)]
#[command(name = "weathercl", version, about = "Continual all-in-one adverse weather removal")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic paired datasets (`<out>/<kind>/{train,test}`).
    Synth(SynthArgs),
    /// Train a task sequence and write checkpoints and reports.
    Train(TrainArgs),
    /// Score a backbone checkpoint on dataset directories.
    Eval(EvalArgs),
    /// Emit comparison tables and plots for finished runs.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output root
    #[arg(long)]
    out: PathBuf,
    /// Weather kinds to synthesize
    #[arg(long, value_delimiter = ',', default_value = "haze,rain,snow")]
    kinds: Vec<String>,
    /// Training pairs per kind
    #[arg(long, default_value_t = 128)]
    train: usize,
    /// Test pairs per kind
    #[arg(long, default_value_t = 24)]
    test: usize,
    /// Image side in pixels
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON run configuration
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset name (finetune, full_method, er_lsw, lsw_kd, joint, joint_m, individual)
    #[arg(long)]
    preset: Option<String>,
    /// Dotted-key override such as `loss.lambda=0.8`; repeatable
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Replace all three seeds (init, data, buffer)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Continue from the latest task-boundary checkpoint in the output directory
    #[arg(long)]
    resume: bool,
    /// Stop after this many tasks
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Backbone checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory (or its manifest.json); repeatable
    #[arg(long = "data", required = true)]
    data: Vec<PathBuf>,
    /// Also write the rows to this CSV file
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directories containing report.json
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Where tables and plots go
    #[arg(long)]
    out: PathBuf,
}

/// A failure and the exit code it maps to.
enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn runtime(e: impl Into<anyhow::Error>) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(a) => synth(&a).map_err(Failure::from),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a).map_err(Failure::from),
        Command::Report(a) => report(&a).map_err(Failure::from),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn parse_kind(name: &str) -> Result<TaskKind> {
    Ok(match name {
        "haze" => TaskKind::Haze,
        "rain" => TaskKind::Rain,
        "snow" => TaskKind::Snow,
        other => bail!("unknown weather kind `{other}` (haze, rain, snow)"),
    })
}

fn synth(a: &SynthArgs) -> Result<()> {
    for (i, name) in a.kinds.iter().enumerate() {
        let kind = parse_kind(name)?;
        let seed = a.seed.wrapping_add(1000 * i as u64);
        for (split, count, dir) in [(Split::Train, a.train, "train"), (Split::Test, a.test, "test")] {
            let ds = synthetic_dataset(&kind, count, a.size, split, seed)?;
            let path = a.out.join(name).join(dir);
            if path.exists() {
                fs::remove_dir_all(&path).with_context(|| format!("clearing {}", path.display()))?;
            }
            ds.save(&path).with_context(|| format!("writing {}", path.display()))?;
            log::info!("{}: {} pairs", path.display(), ds.len());
        }
    }
    Ok(())
}

fn load_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match (&a.config, &a.preset) {
        (Some(path), None) => RunConfig::from_file(path, &a.overrides)?,
        (None, Some(name)) => RunConfig::preset(name, &a.overrides)?,
        _ => bail!("pass exactly one of --config or --preset"),
    };
    if let Some(s) = a.seed {
        cfg.seeds.init = s;
        cfg.seeds.data = s;
        cfg.seeds.buffer = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: &TrainArgs) -> std::result::Result<(), Failure> {
    let cfg = load_config(a).map_err(Failure::Invalid)?;
    let opts = RunOptions {
        out_dir: Some(a.out.clone()),
        resume: a.resume,
        stop_after: a.stop_after,
    };
    match run_sequence(&cfg, &opts) {
        Ok(report) => {
            print!("{}", stage_table(&report));
            log::info!("artifacts in {}", a.out.display());
            Ok(())
        }
        Err(e) => {
            if a.out.join("report.csv").is_file() {
                eprintln!("partial report: {}", a.out.join("report.csv").display());
            }
            Err(Failure::runtime(e))
        }
    }
}

const EVAL_HEADER: &str = "dataset,version_tag,psnr_db,ssim";

fn eval_csv(rows: &[MetricRow]) -> String {
    let mut out = format!("{EVAL_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.dataset, r.version_tag, r.psnr_db, r.ssim));
    }
    out
}

fn eval(a: &EvalArgs) -> Result<()> {
    let model = checkpoint::load_backbone(&a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let sets: Vec<(String, Dataset)> = a
        .data
        .iter()
        .map(|p| {
            let ds = load_dataset(p).with_context(|| format!("loading {}", p.display()))?;
            Ok((p.display().to_string(), ds))
        })
        .collect::<Result<_>>()?;
    let refs: Vec<(String, &Dataset)> = sets.iter().map(|(n, d)| (n.clone(), d)).collect();
    let rows = evaluate(&model, &refs)?;
    let csv = eval_csv(&rows);
    print!("{csv}");
    if let Some(path) = &a.csv {
        fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// A named `(step, value)` curve.
type Curve = (String, Vec<(f64, f64)>);

/// Columns of `runlog.csv` after the task/step/task_step/lr prefix.
fn read_runlog(path: &Path) -> Result<Vec<Curve>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header: Vec<String> = reader.headers()?.iter().map(String::from).collect();
    if header.join(",") != RUNLOG_HEADER {
        bail!("{}: unexpected header", path.display());
    }
    let mut series: Vec<Curve> =
        header[4..].iter().map(|h| (h.clone(), Vec::new())).collect();
    for rec in reader.records() {
        let rec = rec?;
        let step: f64 = rec[1].parse()?;
        for (i, s) in series.iter_mut().enumerate() {
            s.1.push((step, rec[4 + i].parse()?));
        }
    }
    Ok(series)
}

fn report(a: &ReportArgs) -> Result<()> {
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut loaded = Vec::new();
    for dir in &a.runs {
        let path = dir.join("report.json");
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        loaded.push((run_name(dir), dir.clone(), TaskReport::from_json(&text)?));
    }

    let entries: Vec<(&str, &TaskReport)> = loaded.iter().map(|(n, _, r)| (n.as_str(), r)).collect();
    let table = comparison_table(&entries)?;
    fs::write(a.out.join("comparison.csv"), &table)?;
    print!("{table}");

    for (name, dir, rep) in &loaded {
        fs::write(a.out.join(format!("{name}_stages.csv")), stage_table(rep))?;

        let tasks = rep.rows.iter().map(|r| r.task).max().unwrap_or(0);
        let mut curves: Vec<plot::Series> = (1..=tasks)
            .map(|t| plot::Series {
                points: rep
                    .rows
                    .iter()
                    .filter(|r| r.task == t)
                    .map(|r| (r.trained_through as f64, r.psnr_db))
                    .collect(),
                color: plot::PALETTE[(t - 1) % plot::PALETTE.len()],
            })
            .collect();
        curves.push(plot::Series {
            points: rep.averages.iter().map(|s| (s.trained_through as f64, s.psnr_db)).collect(),
            color: plot::PALETTE[5],
        });
        plot::save(&a.out.join(format!("{name}_psnr_vs_task.png")), &curves)?;

        let runlog = dir.join("runlog.csv");
        if runlog.is_file() {
            for (i, (col, points)) in read_runlog(&runlog)?.into_iter().enumerate() {
                let series = plot::Series {
                    points,
                    color: plot::PALETTE[i % plot::PALETTE.len()],
                };
                plot::save(&a.out.join(format!("{name}_{col}_vs_step.png")), &[series])?;
            }
        } else {
            log::warn!("{}: no runlog.csv, skipping loss plots", dir.display());
        }
    }
    log::info!("tables and plots in {}", a.out.display());
    Ok(())
}
