//! Multichannel series: CSV ingestion, a synthetic squat generator,
//! chronological splitting, z-score normalization and sliding windows.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channels as rows, time along columns.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiSeries {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub target_index: usize,
}

impl MultiSeries {
    pub fn new(names: Vec<String>, values: Vec<Vec<f64>>, target_index: usize) -> Result<Self> {
        if names.len() != values.len() {
            return Err(Error::Usage(format!(
                "{} names for {} channels",
                names.len(),
                values.len()
            )));
        }
        if values.is_empty() {
            return Err(Error::config("channels", "a series needs at least one channel"));
        }
        if target_index >= values.len() {
            return Err(Error::config(
                "target_index",
                format!("{target_index} is out of range for {} channels", values.len()),
            ));
        }
        let len = values[0].len();
        if let Some(bad) = values.iter().position(|row| row.len() != len) {
            return Err(Error::Usage(format!(
                "channel {} has {} steps, expected {len}",
                names[bad],
                values[bad].len()
            )));
        }
        Ok(MultiSeries {
            names,
            values,
            target_index,
        })
    }

    pub fn channels(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.values[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn target(&self) -> &[f64] {
        &self.values[self.target_index]
    }

    pub fn target_name(&self) -> &str {
        &self.names[self.target_index]
    }

    /// Steps `start..end` of every channel.
    pub fn slice(&self, start: usize, end: usize) -> MultiSeries {
        MultiSeries {
            names: self.names.clone(),
            values: self.values.iter().map(|row| row[start..end].to_vec()).collect(),
            target_index: self.target_index,
        }
    }

    /// Writes a header of channel names, then one line per step. Values use
    /// the shortest representation that parses back to the same float.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.names).map_err(csv_io)?;
        let mut row = Vec::with_capacity(self.channels());
        for t in 0..self.len() {
            row.clear();
            row.extend(self.values.iter().map(|c| c[t].to_string()));
            w.write_record(&row).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Reads a comma-separated file with a header row. `target` names the
/// column to forecast.
pub fn load_csv(path: impl AsRef<Path>, target: &str) -> Result<MultiSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    read_csv(file, path, target)
}

/// As [`load_csv`] over any reader; `path` only labels errors.
pub fn read_csv<R: Read>(input: R, path: &Path, target: &str) -> Result<MultiSeries> {
    let fail = |line: usize, reason: String| Error::Ingestion {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut records = reader.records();
    let header = match records.next() {
        None => return Err(fail(1, "file is empty".into())),
        Some(r) => r.map_err(|e| fail(1, e.to_string()))?,
    };
    let names: Vec<String> = header.iter().map(str::to_owned).collect();
    if names.iter().all(String::is_empty) {
        return Err(fail(1, "header row is empty".into()));
    }
    let target_index = names
        .iter()
        .position(|n| n == target)
        .ok_or_else(|| fail(1, format!("no target column named `{target}`")))?;
    let mut values = vec![Vec::new(); names.len()];
    for record in records {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            fail(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != names.len() {
            return Err(fail(
                line,
                format!("expected {} fields, found {}", names.len(), record.len()),
            ));
        }
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| fail(line, format!("column `{}` holds non-numeric `{cell}`", names[c])))?;
            values[c].push(v);
        }
    }
    if values[0].is_empty() {
        return Err(fail(2, "no data rows after the header".into()));
    }
    MultiSeries::new(names, values, target_index)
}

/// Parameters of the synthetic squat recording.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub sensors: usize,
    pub length: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            sensors: 4,
            length: 20_000,
            noise_std: 0.05,
            seed: 1111,
        }
    }
}

const GRAVITY: f64 = 9.81;
const SAMPLE_RATE: f64 = 50.0;
const REPS_PER_SET: usize = 10;

/// Motion profile of one body segment: lag in steps relative to the squat
/// phase (negative leads), flexion gain, lever arm in metres and mounting
/// tilt in radians.
struct Mount {
    lag: f64,
    gain: f64,
    lever: f64,
    tilt: f64,
}

fn mount(sensor: usize) -> Mount {
    // Sensor 0 is the master on the left arm, 1 the right arm, 2 and 3 the
    // knees. Further sensors cycle through the same segments with small
    // extra offsets.
    let base = match sensor % 4 {
        0 => Mount {
            lag: 0.0,
            gain: 0.55,
            lever: 0.60,
            tilt: 0.10,
        },
        1 => Mount {
            lag: 2.0,
            gain: 0.50,
            lever: 0.60,
            tilt: -0.15,
        },
        2 => Mount {
            lag: -6.0,
            gain: 1.00,
            lever: 0.45,
            tilt: 0.20,
        },
        _ => Mount {
            lag: -5.0,
            gain: 0.95,
            lever: 0.45,
            tilt: -0.05,
        },
    };
    let cycle = (sensor / 4) as f64;
    Mount {
        lag: base.lag + cycle,
        tilt: base.tilt + 0.05 * cycle,
        ..base
    }
}

/// Squat timeline: flexion angle and its first two time derivatives
/// (per second) at arbitrary real-valued step positions.
struct Timeline {
    /// (start step, duration in steps, depth in radians)
    reps: Vec<(f64, f64, f64)>,
}

impl Timeline {
    fn generate(rng: &mut ChaCha20Rng, span: f64, origin: f64) -> Timeline {
        let mut reps = Vec::new();
        let mut t = origin + rng.gen_range(20.0..60.0);
        while t < span {
            for _ in 0..REPS_PER_SET {
                let duration = rng.gen_range(95.0..140.0);
                let depth = rng.gen_range(0.9..1.5);
                reps.push((t, duration, depth));
                t += duration + rng.gen_range(3.0..25.0);
            }
            t += rng.gen_range(150.0..400.0);
        }
        Timeline { reps }
    }

    fn at(&self, t: f64) -> (f64, f64, f64) {
        let i = self.reps.partition_point(|&(start, _, _)| start <= t);
        if i == 0 {
            return (0.0, 0.0, 0.0);
        }
        let (start, duration, depth) = self.reps[i - 1];
        let phase = (t - start) / duration;
        if phase >= 1.0 {
            return (0.0, 0.0, 0.0);
        }
        let w = 2.0 * PI / duration * SAMPLE_RATE;
        let arg = 2.0 * PI * phase;
        let angle = 0.5 * depth * (1.0 - arg.cos());
        let rate = 0.5 * depth * w * arg.sin();
        let accel = 0.5 * depth * w * w * arg.cos();
        (angle, rate, accel)
    }
}

/// Per-sensor triaxial acceleration (m/s^2) and angular velocity (deg/s)
/// at 50 Hz while a subject performs sets of squats, plus the resultant
/// magnitudes of the master sensor. The target is the master's resultant
/// acceleration. Channel order: `s{i}_ax, s{i}_ay, s{i}_az, s{i}_gx,
/// s{i}_gy, s{i}_gz` per sensor, then `acc_res`, `gyro_res`.
pub fn synth_squat(p: &SynthParams) -> Result<MultiSeries> {
    if p.length == 0 {
        return Err(Error::config("length", "must be at least 1"));
    }
    if p.sensors == 0 {
        return Err(Error::config("sensors", "must be at least 1"));
    }
    if !p.noise_std.is_finite() || p.noise_std < 0.0 {
        return Err(Error::config("noise", "must be a finite non-negative number"));
    }
    // Independent streams keep every prefix of the recording the same
    // whatever its total length.
    let stream = |id: u64| {
        let mut rng = ChaCha20Rng::seed_from_u64(p.seed);
        rng.set_stream(id);
        rng
    };
    let margin = 16.0;
    let timeline = Timeline::generate(&mut stream(0), p.length as f64 + margin, -margin);
    let noise = Normal::new(0.0, p.noise_std).expect("checked finite non-negative std");
    let mut phases = stream(1);
    let sway_phase: Vec<f64> = (0..p.sensors).map(|_| phases.gen_range(0.0..2.0 * PI)).collect();

    let mut names = Vec::with_capacity(6 * p.sensors + 2);
    let mut values = Vec::with_capacity(6 * p.sensors + 2);
    for (s, &phase) in sway_phase.iter().enumerate() {
        for axis in ["ax", "ay", "az", "gx", "gy", "gz"] {
            names.push(format!("s{s}_{axis}"));
        }
        let m = mount(s);
        let mut rng = stream(2 + s as u64);
        let mut rows: Vec<Vec<f64>> = (0..6).map(|_| Vec::with_capacity(p.length)).collect();
        for step in 0..p.length {
            let t = step as f64;
            let (angle, rate, accel) = timeline.at(t - m.lag);
            let theta = m.gain * angle + m.tilt;
            let (rate, accel) = (m.gain * rate, m.gain * accel);
            let sway = 0.25 * (2.0 * PI * t / 170.0 + phase).sin();
            // Gravity seen in the rotating sensor frame plus tangential and
            // centripetal components of the segment's swing.
            let tangential = m.lever * accel;
            let centripetal = m.lever * rate * rate;
            let ideal = [
                GRAVITY * theta.sin() + tangential,
                GRAVITY * theta.cos() + centripetal,
                sway + 0.1 * tangential,
                rate.to_degrees(),
                0.15 * rate.to_degrees() * theta.cos(),
                0.08 * accel.to_degrees() / SAMPLE_RATE,
            ];
            for (row, v) in rows.iter_mut().zip(ideal) {
                row.push(v + noise.sample(&mut rng));
            }
        }
        values.extend(rows);
    }
    let magnitude = |base: usize, step: usize| {
        (0..3)
            .map(|a| values[base + a][step] * values[base + a][step])
            .sum::<f64>()
            .sqrt()
    };
    let acc_res: Vec<f64> = (0..p.length).map(|t| magnitude(0, t)).collect();
    let gyro_res: Vec<f64> = (0..p.length).map(|t| magnitude(3, t)).collect();
    names.push("acc_res".into());
    names.push("gyro_res".into());
    values.push(acc_res);
    values.push(gyro_res);
    let target = 6 * p.sensors;
    MultiSeries::new(names, values, target)
}

/// Train-to-test proportion, 4:1 by default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SplitRatio {
    pub train: usize,
    pub test: usize,
}

impl Default for SplitRatio {
    fn default() -> Self {
        SplitRatio { train: 4, test: 1 }
    }
}

/// First `floor(L * train / (train + test))` steps train, the rest test.
/// `min_test_len` is the shortest usable test split, normally `T + tau`.
pub fn chronological_split(
    series: &MultiSeries,
    ratio: SplitRatio,
    min_test_len: usize,
) -> Result<(MultiSeries, MultiSeries)> {
    if ratio.train == 0 || ratio.test == 0 {
        return Err(Error::config("split", "both parts of the ratio must be positive"));
    }
    let len = series.len();
    let cut = (len as u128 * ratio.train as u128 / (ratio.train + ratio.test) as u128) as usize;
    if len - cut < min_test_len {
        return Err(Error::config(
            "split",
            format!(
                "test split has {} steps but at least {min_test_len} are needed",
                len - cut
            ),
        ));
    }
    Ok((series.slice(0, cut), series.slice(cut, len)))
}

/// Per-channel mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Fits on `series`, which must be the training split.
    pub fn fit(series: &MultiSeries) -> Result<NormStats> {
        if series.is_empty() {
            return Err(Error::config("series", "cannot fit statistics on an empty series"));
        }
        let n = series.len() as f64;
        let mut mean = Vec::with_capacity(series.channels());
        let mut std = Vec::with_capacity(series.channels());
        for (name, row) in series.names.iter().zip(&series.values) {
            let m = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let s = var.sqrt();
            if !s.is_finite() || s <= 0.0 {
                return Err(Error::config(
                    format!("channel {name}"),
                    "zero or undefined variance on the training split",
                ));
            }
            mean.push(m);
            std.push(s);
        }
        Ok(NormStats { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, series: &MultiSeries) -> Result<()> {
        if series.channels() != self.channels() {
            return Err(Error::shape("normalize", &[series.channels()], &[self.channels()]));
        }
        if let Some(c) = self.std.iter().position(|s| s.is_nan() || *s <= 0.0) {
            return Err(Error::config(format!("channel {c}"), "zero variance"));
        }
        Ok(())
    }

    pub fn normalize(&self, series: &MultiSeries) -> Result<MultiSeries> {
        self.check(series)?;
        let mut out = series.clone();
        for ((row, m), s) in out.values.iter_mut().zip(&self.mean).zip(&self.std) {
            row.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(out)
    }

    pub fn denormalize(&self, series: &MultiSeries) -> Result<MultiSeries> {
        self.check(series)?;
        let mut out = series.clone();
        for ((row, m), s) in out.values.iter_mut().zip(&self.mean).zip(&self.std) {
            row.iter_mut().for_each(|v| *v = *v * s + m);
        }
        Ok(out)
    }

    /// Maps normalized values of one channel back to physical units.
    pub fn denormalize_channel(&self, channel: usize, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .map(|v| v * self.std[channel] + self.mean[channel])
            .collect()
    }
}

/// One model input with its future targets.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    /// `[channels x T]`, row-major.
    pub input: Vec<f64>,
    /// Target channel at steps `origin + T .. origin + T + tau`.
    pub target: Vec<f64>,
    pub origin: usize,
}

/// Number of windows `sliding_windows` yields; `None` if the series is too
/// short or an argument is zero.
pub fn window_count(len: usize, window: usize, horizon: usize, stride: usize) -> Option<usize> {
    if window == 0 || horizon == 0 || stride == 0 || len < window + horizon {
        return None;
    }
    Some((len - window - horizon) / stride + 1)
}

pub fn sliding_windows(
    series: &MultiSeries,
    window: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<WindowSample>> {
    if window == 0 {
        return Err(Error::config("window", "must be at least 1"));
    }
    if horizon == 0 {
        return Err(Error::config("horizon", "must be at least 1"));
    }
    if stride == 0 {
        return Err(Error::config("stride", "must be at least 1"));
    }
    let count = window_count(series.len(), window, horizon, stride).ok_or_else(|| {
        Error::config(
            "window",
            format!(
                "series of {} steps is shorter than window {window} plus horizon {horizon}",
                series.len()
            ),
        )
    })?;
    let target = series.target();
    Ok((0..count)
        .map(|i| {
            let origin = i * stride;
            let mut input = Vec::with_capacity(series.channels() * window);
            for row in &series.values {
                input.extend_from_slice(&row[origin..origin + window]);
            }
            WindowSample {
                input,
                target: target[origin + window..origin + window + horizon].to_vec(),
                origin,
            }
        })
        .collect())
}

/// Seeded permutation of `samples`.
pub fn shuffle_windows(mut samples: Vec<WindowSample>, seed: u64) -> Vec<WindowSample> {
    samples.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    samples
}
