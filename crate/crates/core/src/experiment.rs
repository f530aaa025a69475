//! Grid runner and report files.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionWeights;
use crate::config::{Cell, DataSource, RunConfig};
use crate::data::{
    chronological_split, load_csv, sliding_windows, synth_squat, MultiSeries, NormStats, SplitRatio, WindowSample,
};
use crate::error::{Error, Result};
use crate::model::{ForecastModel, ModelSpec};
use crate::train::{evaluate, predict_samples, rmse, Trainer};

pub fn load_source(source: &DataSource) -> Result<MultiSeries> {
    match source {
        DataSource::Csv { path, target } => load_csv(path, target),
        DataSource::Synth(p) => synth_squat(p),
    }
}

/// Normalized train and test windows for one `(T, tau)` pair. Statistics
/// come from the training split only; test windows stay in time order.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
    pub norm: NormStats,
    pub target_index: usize,
    pub channels: usize,
}

impl PreparedData {
    pub fn new(series: &MultiSeries, window: usize, horizon: usize, split: SplitRatio) -> Result<Self> {
        let (train, test) = chronological_split(series, split, window + horizon)?;
        let norm = NormStats::fit(&train)?;
        Ok(PreparedData {
            train: sliding_windows(&norm.normalize(&train)?, window, horizon, 1)?,
            test: sliding_windows(&norm.normalize(&test)?, window, horizon, 1)?,
            norm,
            target_index: series.target_index,
            channels: series.channels(),
        })
    }

    /// Test RMSE in the target's physical units.
    pub fn denormalized_rmse(&self, preds: &[Vec<f64>], samples: &[WindowSample]) -> Result<f64> {
        let c = self.target_index;
        let p: Vec<Vec<f64>> = preds.iter().map(|p| self.norm.denormalize_channel(c, p)).collect();
        let t: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| self.norm.denormalize_channel(c, &s.target))
            .collect();
        rmse(&p, &t)
    }
}

/// Attention weights of one test window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub origin: usize,
    pub weights: AttentionWeights,
}

/// One run: config echo, per-epoch curves and final metrics. Metric arrays
/// hold one entry per completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub run_id: String,
    pub tags: Vec<(String, String)>,
    pub config: RunConfig,
    /// Resolved spec; absent if the run failed before building the model.
    pub spec: Option<ModelSpec>,
    pub parameter_count: usize,
    pub train_loss: Vec<f64>,
    pub test_rmse: Vec<f64>,
    pub test_mae: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    /// Final model in evaluation mode on the training windows.
    pub train_rmse: Option<f64>,
    pub train_mae: Option<f64>,
    pub test_rmse_denorm: Option<f64>,
    pub attention: Vec<AttentionDump>,
    pub error: Option<String>,
}

impl ExperimentReport {
    fn empty(run_id: String, cell: &Cell) -> Self {
        ExperimentReport {
            run_id,
            tags: cell.tags.clone(),
            config: cell.config.clone(),
            spec: None,
            parameter_count: 0,
            train_loss: Vec::new(),
            test_rmse: Vec::new(),
            test_mae: Vec::new(),
            epoch_seconds: Vec::new(),
            train_rmse: None,
            train_mae: None,
            test_rmse_denorm: None,
            attention: Vec::new(),
            error: None,
        }
    }

    pub fn final_test_rmse(&self) -> Option<f64> {
        self.test_rmse.last().copied()
    }

    pub fn final_test_mae(&self) -> Option<f64> {
        self.test_mae.last().copied()
    }

    /// Long-format rows `(metric, step, value)`; steps count epochs from 1.
    pub fn long_rows(&self) -> Vec<(&'static str, usize, f64)> {
        let mut rows = Vec::new();
        for (metric, values) in [
            ("train_loss", &self.train_loss),
            ("test_rmse", &self.test_rmse),
            ("test_mae", &self.test_mae),
            ("epoch_seconds", &self.epoch_seconds),
        ] {
            rows.extend(values.iter().enumerate().map(|(i, v)| (metric, i + 1, *v)));
        }
        let last = self.train_loss.len();
        for (metric, value) in [
            ("train_rmse", self.train_rmse),
            ("train_mae", self.train_mae),
            ("test_rmse_denorm", self.test_rmse_denorm),
        ] {
            if let Some(v) = value {
                rows.push((metric, last, v));
            }
        }
        rows
    }
}

/// Completed run with the trained model, for callers that keep it.
pub struct RunOutcome {
    pub report: ExperimentReport,
    pub model: Option<ForecastModel<f64>>,
    pub norm: Option<NormStats>,
}

/// Resolves the `ModelSpec` of `config` against the data's channel count.
pub fn resolve_spec(config: &RunConfig, channels: usize) -> Result<ModelSpec> {
    if channels < 2 {
        return Err(Error::config(
            "data",
            "need a target plus at least one exogenous channel",
        ));
    }
    let n_exog = channels - 1;
    if let Some(n) = config.n_exog {
        if n != n_exog {
            return Err(Error::config(
                "model.n_exog",
                format!("config says {n} but the data has {n_exog} exogenous channels"),
            ));
        }
    }
    let spec = ModelSpec {
        n_exog,
        ..config.model.clone()
    };
    spec.validate()?;
    Ok(spec)
}

/// Trains and evaluates one cell on prepared data. Failures end up in the
/// report rather than in the return value.
pub fn run_cell(run_id: String, cell: &Cell, data: &PreparedData) -> RunOutcome {
    let mut report = ExperimentReport::empty(run_id, cell);
    match run_cell_inner(&mut report, cell, data) {
        Ok(model) => RunOutcome {
            report,
            model: Some(model),
            norm: Some(data.norm.clone()),
        },
        Err(e) => {
            report.error = Some(e.to_string());
            RunOutcome {
                report,
                model: None,
                norm: None,
            }
        }
    }
}

fn run_cell_inner(report: &mut ExperimentReport, cell: &Cell, data: &PreparedData) -> Result<ForecastModel<f64>> {
    let spec = resolve_spec(&cell.config, data.channels)?;
    let mut model = ForecastModel::<f64>::build(spec.clone())?;
    report.spec = Some(spec);
    report.parameter_count = model.parameter_count();
    {
        let mut trainer = Trainer::new(&mut model, cell.config.train.clone())?;
        for _ in 0..cell.config.train.epochs {
            let start = Instant::now();
            let loss = trainer.run_epoch(&data.train)?;
            let seconds = start.elapsed().as_secs_f64();
            let m = evaluate(trainer.model(), &data.test)?;
            report.train_loss.push(loss);
            report.epoch_seconds.push(seconds);
            report.test_rmse.push(m.rmse);
            report.test_mae.push(m.mae);
        }
    }
    let train_metrics = evaluate(&model, &data.train)?;
    report.train_rmse = Some(train_metrics.rmse);
    report.train_mae = Some(train_metrics.mae);
    let preds = predict_samples(&model, &data.test)?;
    report.test_rmse_denorm = Some(data.denormalized_rmse(&preds, &data.test)?);
    for s in data.test.iter().take(cell.config.attention_samples) {
        let weights = model.attention_weights(&s.input)?;
        if weights == AttentionWeights::default() {
            break;
        }
        report.attention.push(AttentionDump {
            origin: s.origin,
            weights,
        });
    }
    Ok(model)
}

/// Run identifier from the cell's position and grid values.
pub fn run_id(index: usize, cell: &Cell) -> String {
    let mut id = format!("{index:03}");
    for (k, v) in &cell.tags {
        id.push('-');
        id.push_str(k);
        id.push('=');
        id.push_str(v);
    }
    if cell.tags.is_empty() {
        id.push('-');
        id.push_str(cell.config.model.variant.name());
    }
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_=.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Runs every cell on `series`, up to `jobs` at a time, and returns the
/// reports in cell order. A failing cell records its error and the rest
/// carry on.
pub fn run_experiment(cells: &[Cell], series: &MultiSeries, jobs: usize) -> Vec<ExperimentReport> {
    run_experiment_with(cells, series, jobs, |_| {})
}

/// As [`run_experiment`], calling `on_done` as each run finishes.
pub fn run_experiment_with(
    cells: &[Cell],
    series: &MultiSeries,
    jobs: usize,
    on_done: impl Fn(&RunOutcome) + Sync,
) -> Vec<ExperimentReport> {
    let mut prepared: BTreeMap<(usize, usize, SplitRatio), std::result::Result<Arc<PreparedData>, String>> =
        BTreeMap::new();
    for c in cells {
        let key = (c.config.model.window, c.config.model.horizon, c.config.split);
        prepared.entry(key).or_insert_with(|| {
            PreparedData::new(series, key.0, key.1, key.2)
                .map(Arc::new)
                .map_err(|e| e.to_string())
        });
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<ExperimentReport>>> = Mutex::new(vec![None; cells.len()]);
    let workers = jobs.clamp(1, cells.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                let id = run_id(i, cell);
                let key = (cell.config.model.window, cell.config.model.horizon, cell.config.split);
                let outcome = match &prepared[&key] {
                    Ok(data) => run_cell(id, cell, data),
                    Err(e) => {
                        let mut report = ExperimentReport::empty(id, cell);
                        report.error = Some(e.clone());
                        RunOutcome {
                            report,
                            model: None,
                            norm: None,
                        }
                    }
                };
                on_done(&outcome);
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(outcome.report);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers have finished")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect()
}

/// Appends reports to `reports.jsonl` and their curves to `metrics.csv`
/// under `dir`, and rewrites `summary.csv` with one row per report.
pub fn write_reports(dir: &Path, reports: &[ExperimentReport]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut jsonl = OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("reports.jsonl"))?;
    for r in reports {
        serde_json::to_writer(&mut jsonl, r)?;
        jsonl.write_all(b"\n")?;
    }
    let metrics_path = dir.join("metrics.csv");
    let fresh = !metrics_path.exists();
    let mut metrics = OpenOptions::new().create(true).append(true).open(&metrics_path)?;
    if fresh {
        writeln!(metrics, "run_id,metric,step,value")?;
    }
    for r in reports {
        for (metric, step, value) in r.long_rows() {
            writeln!(metrics, "{},{metric},{step},{value}", r.run_id)?;
        }
    }
    std::fs::write(dir.join("summary.csv"), summary_csv(reports))?;
    Ok(())
}

/// One row per report: id, grid values, final metrics and any error.
pub fn summary_csv(reports: &[ExperimentReport]) -> String {
    let mut tag_keys: Vec<&str> = Vec::new();
    for r in reports {
        for (k, _) in &r.tags {
            if !tag_keys.contains(&k.as_str()) {
                tag_keys.push(k);
            }
        }
    }
    let mut out = String::from("run_id,variant,window,horizon");
    for k in &tag_keys {
        out.push_str(&format!(",grid_{k}"));
    }
    out.push_str(",epochs,test_rmse,test_mae,test_rmse_denorm,error\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    for r in reports {
        let m = &r.config.model;
        out.push_str(&format!("{},{},{},{}", r.run_id, m.variant, m.window, m.horizon));
        for k in &tag_keys {
            let v = r.tags.iter().find(|(tk, _)| tk == k).map_or("", |(_, v)| v.as_str());
            out.push_str(&format!(",{v}"));
        }
        let error = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        out.push_str(&format!(
            ",{},{},{},{},{error}\n",
            r.train_loss.len(),
            opt(r.final_test_rmse()),
            opt(r.final_test_mae()),
            opt(r.test_rmse_denorm)
        ));
    }
    out
}
