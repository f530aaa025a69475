use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use psta_tcn::checkpoint::Checkpoint;
use psta_tcn::config::{Cell, ConfigFile, DataSource, RunConfig};
use psta_tcn::data::{
    chronological_split, load_csv, sliding_windows, synth_squat, MultiSeries, SplitRatio, SynthParams,
};
use psta_tcn::experiment::{load_source, run_experiment_with, write_reports, ExperimentReport, RunOutcome};
use psta_tcn::train::{evaluate, predict_samples, rmse};
use psta_tcn::Error;

/// Multistep forecasting of multichannel sensor series with parallel
/// attention-gated temporal convolution branches.
#[derive(Parser)]
#[command(name = "psta-tcn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic squat recording as CSV, plus a config sidecar.
    Generate {
        #[arg(long, default_value_t = 4)]
        sensors: usize,
        #[arg(long, default_value_t = 20_000)]
        length: usize,
        /// Standard deviation of the additive sensor noise.
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 1111)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model; writes a checkpoint and a report.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `[output] dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the train seed (and the model seed unless pinned).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint; prints `RMSE=... MAE=...`.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV recording to score.
        #[arg(long, conflicts_with = "config")]
        data: Option<PathBuf>,
        /// Take the data source from a run config instead.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Target column of `--data`; defaults to the one trained on.
        #[arg(long)]
        target: Option<String>,
        #[arg(long, value_enum, default_value_t = Part::All)]
        split: Part,
        /// Directory for `evaluation.json`; defaults to the checkpoint's.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every cell of the config's `[grid]`.
    Sweep(GridArgs),
    /// Train all five variants at the config's settings.
    Ablate(GridArgs),
}

#[derive(clap::Args)]
struct GridArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Cells trained in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Part {
    All,
    Train,
    Test,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let configuration = e
                .chain()
                .any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_configuration));
            ExitCode::from(if configuration { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate {
            sensors,
            length,
            noise,
            seed,
            out,
        } => generate(
            &SynthParams {
                sensors,
                length,
                noise_std: noise,
                seed,
            },
            &out,
        ),
        Command::Train { config, out, seed } => train(&config, out, seed),
        Command::Evaluate {
            checkpoint,
            data,
            config,
            target,
            split,
            out,
        } => evaluate_cmd(&checkpoint, data, config, target, split, out),
        Command::Sweep(args) => grid(args, false),
        Command::Ablate(args) => grid(args, true),
    }
}

fn sidecar_path(out: &Path) -> PathBuf {
    out.with_extension("cfg")
}

fn generate(params: &SynthParams, out: &Path) -> anyhow::Result<()> {
    let series = synth_squat(params)?;
    let file = fs::File::create(out).with_context(|| format!("cannot create {}", out.display()))?;
    series.write_csv(std::io::BufWriter::new(file))?;
    let sidecar = format!(
        "# parameters that produced {}\n[data]\nsynth_sensors = {}\nsynth_length = {}\nsynth_noise = {:?}\nsynth_seed = {}\n",
        out.display(),
        params.sensors,
        params.length,
        params.noise_std,
        params.seed
    );
    let side = sidecar_path(out);
    fs::write(&side, sidecar).with_context(|| format!("cannot write {}", side.display()))?;
    println!(
        "wrote {} ({} channels x {} steps) and {}",
        out.display(),
        series.channels(),
        series.len(),
        side.display()
    );
    Ok(())
}

fn load_config(path: &Path, out: Option<PathBuf>, seed: Option<u64>) -> anyhow::Result<ConfigFile> {
    let mut cfg = ConfigFile::load(path)?;
    if let Some(dir) = out {
        cfg.base.output_dir = dir;
    }
    if let Some(seed) = seed {
        let pinned = cfg.model_seed_pinned();
        cfg.base.train.seed = seed;
        if !pinned {
            cfg.base.model.seed = seed;
        }
    }
    Ok(cfg)
}

fn split_label(s: SplitRatio) -> String {
    format!("{}:{}", s.train, s.test)
}

/// Saves the trained model next to its report as `<dir>/<run_id>/`.
fn save_run(dir: &Path, outcome: &RunOutcome, config: &RunConfig, series: &MultiSeries) -> anyhow::Result<()> {
    let run_dir = dir.join(&outcome.report.run_id);
    fs::create_dir_all(&run_dir)?;
    fs::write(
        run_dir.join("report.json"),
        serde_json::to_string_pretty(&outcome.report)?,
    )?;
    if let Some(model) = &outcome.model {
        let mut ckpt = Checkpoint::new(model.clone());
        ckpt.norm = outcome.norm.clone();
        ckpt.metadata.insert("run_id".into(), outcome.report.run_id.clone());
        ckpt.metadata.insert("target".into(), series.target_name().to_string());
        ckpt.metadata.insert("split".into(), split_label(config.split));
        ckpt.save(run_dir.join("model.ckpt"))?;
    }
    Ok(())
}

fn run_cells(cells: &[Cell], base: &RunConfig, jobs: usize) -> anyhow::Result<Vec<ExperimentReport>> {
    let series = load_source(&base.data)?;
    let dir = &base.output_dir;
    let save_errors = Mutex::new(Vec::new());
    let reports = run_experiment_with(cells, &series, jobs, |outcome| {
        let r = &outcome.report;
        match (&r.error, r.final_test_rmse(), r.final_test_mae()) {
            (Some(e), _, _) => eprintln!("{}: failed: {e}", r.run_id),
            (None, Some(rmse), Some(mae)) => println!("{}: RMSE={rmse:.4} MAE={mae:.4}", r.run_id),
            _ => println!("{}: no epochs run", r.run_id),
        }
        let config = cells.iter().find(|c| c.tags == r.tags).map_or(base, |c| &c.config);
        if let Err(e) = save_run(dir, outcome, config, &series) {
            save_errors.lock().expect("lock").push(format!("{}: {e:#}", r.run_id));
        }
    });
    write_reports(dir, &reports)?;
    let errors = save_errors.into_inner().expect("lock");
    if !errors.is_empty() {
        bail!("could not save runs: {}", errors.join("; "));
    }
    Ok(reports)
}

fn train(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> anyhow::Result<()> {
    let cfg = load_config(config, out, seed)?;
    let cell = Cell {
        config: cfg.base.clone(),
        tags: vec![
            ("variant".into(), cfg.base.model.variant.name().into()),
            ("seed".into(), cfg.base.train.seed.to_string()),
        ],
    };
    let reports = run_cells(std::slice::from_ref(&cell), &cfg.base, 1)?;
    match &reports[0].error {
        Some(e) => bail!("training failed: {e}"),
        None => Ok(()),
    }
}

fn grid(args: GridArgs, ablate: bool) -> anyhow::Result<()> {
    let cfg = load_config(&args.config, args.out, args.seed)?;
    let cells = if ablate { cfg.ablation_cells()? } else { cfg.cells()? };
    if cells.is_empty() {
        return Err(Error::Config {
            field: "grid".into(),
            reason: "no grid cells; add a [grid] section with at least one key".into(),
        }
        .into());
    }
    if args.jobs == 0 {
        return Err(Error::Config {
            field: "jobs".into(),
            reason: "must be at least 1".into(),
        }
        .into());
    }
    let reports = run_cells(&cells, &cfg.base, args.jobs)?;
    println!("summary: {}", cfg.base.output_dir.join("summary.csv").display());
    let failed = reports.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        bail!("{failed} of {} runs failed", reports.len());
    }
    Ok(())
}

fn evaluate_cmd(
    checkpoint: &Path,
    data: Option<PathBuf>,
    config: Option<PathBuf>,
    target: Option<String>,
    part: Part,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let ckpt = Checkpoint::<f64>::load(checkpoint).with_context(|| format!("cannot load {}", checkpoint.display()))?;
    let trained_target = ckpt.metadata.get("target").cloned();
    let series = match (data, config) {
        (Some(path), None) => {
            let target = target
                .or(trained_target)
                .ok_or_else(|| anyhow!("checkpoint names no target column; pass --target"))?;
            load_csv(path, &target)?
        }
        (None, Some(cfg)) => {
            let cfg = ConfigFile::load(&cfg)?;
            match cfg.base.data {
                DataSource::Csv { path, target: t } => load_csv(path, &target.unwrap_or(t))?,
                src @ DataSource::Synth(_) => load_source(&src)?,
            }
        }
        _ => {
            return Err(Error::Config {
                field: "data".into(),
                reason: "pass exactly one of --data or --config".into(),
            }
            .into())
        }
    };
    let spec = ckpt.model.spec().clone();
    if series.channels() != spec.channels() {
        return Err(Error::Shape {
            op: "evaluate: data channels vs checkpoint channels",
            left: vec![series.channels()],
            right: vec![spec.channels()],
        }
        .into());
    }
    let norm = ckpt
        .norm
        .clone()
        .ok_or_else(|| anyhow!("checkpoint carries no normalization statistics"))?;
    let split = match ckpt.metadata.get("split").and_then(|s| s.split_once(':')) {
        Some((a, b)) => SplitRatio {
            train: a.parse()?,
            test: b.parse()?,
        },
        None => SplitRatio::default(),
    };
    let (window, horizon) = (spec.window, spec.horizon);
    let scored = match part {
        Part::All => series,
        Part::Train => chronological_split(&series, split, 0)?.0,
        Part::Test => chronological_split(&series, split, window + horizon)?.1,
    };
    let samples = sliding_windows(&norm.normalize(&scored)?, window, horizon, 1)?;
    let m = evaluate(&ckpt.model, &samples)?;
    let preds = predict_samples(&ckpt.model, &samples)?;
    let c = scored.target_index;
    let denorm = rmse(
        &preds.iter().map(|p| norm.denormalize_channel(c, p)).collect::<Vec<_>>(),
        &samples
            .iter()
            .map(|s| norm.denormalize_channel(c, &s.target))
            .collect::<Vec<_>>(),
    )?;
    println!("RMSE={:.4} MAE={:.4}", m.rmse, m.mae);

    let dir = out.unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
    fs::create_dir_all(&dir)?;
    let record = serde_json::json!({
        "checkpoint": checkpoint.display().to_string(),
        "split": match part { Part::All => "all", Part::Train => "train", Part::Test => "test" },
        "windows": samples.len(),
        "rmse": m.rmse,
        "mae": m.mae,
        "rmse_denorm": denorm,
    });
    fs::write(dir.join("evaluation.json"), serde_json::to_string_pretty(&record)?)?;
    Ok(())
}
