//! Benchmark data: synthetic sines, CSV windows, min-max scaling, splits and
//! observation masks.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tags};
use crate::tensorgrad::Tensor;

/// Per-feature min-max scaler. A constant feature records a unit range so it
/// maps to 0.0 and back without dividing by zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Scaler {
    pub fn identity(features: usize) -> Self {
        Self {
            min: vec![0.0; features],
            max: vec![1.0; features],
        }
    }

    /// Fits over the rows of a `rows × features` row-major buffer.
    pub fn fit(rows: &[f64], features: usize) -> Self {
        let mut min = vec![f64::INFINITY; features];
        let mut max = vec![f64::NEG_INFINITY; features];
        for row in rows.chunks(features) {
            for j in 0..features {
                min[j] = min[j].min(row[j]);
                max[j] = max[j].max(row[j]);
            }
        }
        for j in 0..features {
            if max[j] <= min[j] {
                max[j] = min[j] + 1.0;
            }
        }
        Self { min, max }
    }

    pub fn features(&self) -> usize {
        self.min.len()
    }

    fn apply(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let d = self.features();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(d) {
            for j in 0..d {
                row[j] = f(row[j], self.min[j], self.max[j] - self.min[j]);
            }
        }
        out
    }

    pub fn scale(&self, x: &Tensor) -> Tensor {
        self.apply(x, |v, lo, range| (v - lo) / range)
    }

    pub fn unscale(&self, x: &Tensor) -> Tensor {
        self.apply(x, |v, lo, range| v * range + lo)
    }
}

/// Fixed-length multivariate windows `[B, L, D_f]` in scaled units.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesBatch {
    pub values: Tensor,
    pub scaler: Scaler,
    pub source_name: String,
}

impl SeriesBatch {
    pub fn new(values: Tensor, scaler: Scaler, source_name: impl Into<String>) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::Data(format!(
                "series batch must be [B, L, D], got {:?}",
                values.shape()
            )));
        }
        if values.shape()[2] != scaler.features() {
            return Err(Error::dim("SeriesBatch", values.shape(), &[scaler.features()]));
        }
        Ok(Self {
            values,
            scaler,
            source_name: source_name.into(),
        })
    }

    pub fn windows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn length(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn features(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn unscaled(&self) -> Tensor {
        self.scaler.unscale(&self.values)
    }

    /// Windows at the given indices, sharing this batch's scaler.
    pub fn select(&self, indices: &[usize]) -> SeriesBatch {
        SeriesBatch {
            values: self.values.gather_leading(indices),
            scaler: self.scaler.clone(),
            source_name: self.source_name.clone(),
        }
    }
}

/// Where windows come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Sines { windows: usize },
    Csv { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    #[serde(default = "default_window")]
    pub window_length: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    pub feature_count: usize,
    #[serde(default = "default_split")]
    pub split_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_window() -> usize {
    24
}
fn default_stride() -> usize {
    1
}
fn default_split() -> f64 {
    0.8
}

impl DatasetSpec {
    pub fn sines(windows: usize) -> Self {
        Self {
            source: DataSource::Sines { windows },
            window_length: 24,
            stride: 1,
            feature_count: 5,
            split_fraction: 0.8,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_length < 2 {
            return Err(Error::Config(format!(
                "window_length must be >= 2, got {}",
                self.window_length
            )));
        }
        if self.stride < 1 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config(format!(
                "split_fraction must lie in (0, 1), got {}",
                self.split_fraction
            )));
        }
        Ok(())
    }

    /// Materializes the dataset.
    pub fn load(&self) -> Result<SeriesBatch> {
        self.validate()?;
        match &self.source {
            DataSource::Sines { windows } => {
                generate_sines(*windows, self.window_length, self.feature_count, self.seed)
            }
            DataSource::Csv { path } => load_csv(path, self),
        }
    }
}

/// Draw ranges for the sines benchmark. Each channel is
/// `sin(2π·η·τ/L + θ)` with `η` in cycles per window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinesParams {
    pub cycles: (f64, f64),
    pub phase: (f64, f64),
}

impl Default for SinesParams {
    /// Angular frequency in `[0, 0.1]` rad/step and phase in `[0, 0.1]`, the
    /// ranges used by the standard time-series generation benchmarks.
    fn default() -> Self {
        Self::standard(24)
    }
}

impl SinesParams {
    pub fn standard(length: usize) -> Self {
        Self {
            cycles: (0.0, 0.1 * length as f64 / (2.0 * PI)),
            phase: (0.0, 0.1),
        }
    }

    /// One full cycle per window at most, phase anywhere on the circle.
    pub fn wide() -> Self {
        Self {
            cycles: (0.0, 1.0),
            phase: (-PI, PI),
        }
    }
}

/// Sines with the standard benchmark ranges for `length`.
pub fn generate_sines(n_windows: usize, length: usize, features: usize, seed: u64) -> Result<SeriesBatch> {
    generate_sines_with(n_windows, length, features, seed, SinesParams::standard(length)).map(|(b, _)| b)
}

/// Generates sines and also returns the drawn `(η, θ)` per window and channel.
pub fn generate_sines_with(
    n_windows: usize,
    length: usize,
    features: usize,
    seed: u64,
    params: SinesParams,
) -> Result<(SeriesBatch, Vec<(f64, f64)>)> {
    if n_windows == 0 || length == 0 || features == 0 {
        return Err(Error::Config(format!(
            "sines needs positive sizes, got windows={n_windows} length={length} features={features}"
        )));
    }
    let mut r = rng::stream(seed, tags::DATA);
    let mut draws = Vec::with_capacity(n_windows * features);
    let mut data = vec![0.0; n_windows * length * features];
    for w in 0..n_windows {
        for j in 0..features {
            let eta = uniform(&mut r, params.cycles);
            let theta = uniform(&mut r, params.phase);
            draws.push((eta, theta));
            for tau in 0..length {
                let v = (2.0 * PI * eta * tau as f64 / length as f64 + theta).sin();
                data[(w * length + tau) * features + j] = (v + 1.0) * 0.5;
            }
        }
    }
    let values = Tensor::new(&[n_windows, length, features], data)?;
    Ok((SeriesBatch::new(values, Scaler::identity(features), "sines")?, draws))
}

fn uniform(r: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * r.random::<f64>()
}

/// Reads a headered numeric CSV, one row per timestep.
pub fn read_csv_rows(path: &Path) -> Result<(Vec<String>, Vec<f64>)> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 1,
            column: 0,
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_owned)
        .collect();
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // 1-based file line: header is line 1
        let row = i + 2;
        let record = record.map_err(|e| Error::Parse {
            row,
            column: 0,
            message: e.to_string(),
        })?;
        if record.len() != header.len() {
            return Err(Error::Parse {
                row,
                column: record.len() + 1,
                message: format!("expected {} cells, found {}", header.len(), record.len()),
            });
        }
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row,
                column: c + 1,
                message: format!("non-numeric cell {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: c + 1,
                    message: format!("non-finite cell {cell:?}"),
                });
            }
            values.push(v);
        }
    }
    Ok((header, values))
}

/// Count of stride-spaced windows of `length` over `rows` timesteps.
pub fn window_count(rows: usize, length: usize, stride: usize) -> usize {
    if rows < length {
        0
    } else {
        (rows - length) / stride + 1
    }
}

/// Sliding windows over a CSV file, min-max scaled with a scaler fitted on the
/// leading `split_fraction` of the rows (the chronological training split).
pub fn load_csv(path: &Path, spec: &DatasetSpec) -> Result<SeriesBatch> {
    spec.validate()?;
    let (header, values) = read_csv_rows(path)?;
    let d = header.len();
    if d == 0 {
        return Err(Error::Data(format!("{} has no columns", path.display())));
    }
    if spec.feature_count != 0 && spec.feature_count != d {
        return Err(Error::Data(format!(
            "{} has {d} columns, expected {}",
            path.display(),
            spec.feature_count
        )));
    }
    let rows = values.len() / d;
    let l = spec.window_length;
    if rows < l {
        return Err(Error::Data(format!(
            "{} has {rows} rows, fewer than the window length {l}",
            path.display()
        )));
    }
    let train_rows = ((rows as f64 * spec.split_fraction).ceil() as usize).clamp(1, rows);
    let scaler = Scaler::fit(&values[..train_rows * d], d);
    let n = window_count(rows, l, spec.stride);
    let mut data = Vec::with_capacity(n * l * d);
    for w in 0..n {
        let start = w * spec.stride;
        data.extend_from_slice(&values[start * d..(start + l) * d]);
    }
    let raw = Tensor::new(&[n, l, d], data)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    SeriesBatch::new(scaler.scale(&raw), scaler, name)
}

/// Shuffled partition into `(first, rest)` with `round(fraction · B)` windows first.
pub fn split(batch: &SeriesBatch, fraction: f64, seed: u64) -> Result<(SeriesBatch, SeriesBatch)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let n = batch.windows();
    let perm = rng::permutation(&mut rng::stream(seed, tags::SPLIT), n);
    let cut = (fraction * n as f64).round() as usize;
    Ok((batch.select(&perm[..cut]), batch.select(&perm[cut..])))
}

/// Which cells a conditional task observes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskMode {
    /// Each cell is hidden independently with probability `ratio`.
    Imputation { ratio: f64 },
    /// The last `horizon` steps are hidden.
    Forecast { horizon: usize },
}

/// Boolean observation pattern over a `[B, L, D]` grid; `true` = observed.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationMask {
    shape: Vec<usize>,
    observed: Vec<bool>,
}

impl ObservationMask {
    pub fn new(shape: &[usize], observed: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != observed.len() {
            return Err(Error::dim("ObservationMask", shape, &[observed.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            observed,
        })
    }

    pub fn all_observed(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            observed: vec![true; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    pub fn is_observed(&self, flat: usize) -> bool {
        self.observed[flat]
    }

    pub fn hidden_count(&self) -> usize {
        self.observed.iter().filter(|o| !**o).count()
    }
}

pub fn make_condition_mask(shape: &[usize], mode: MaskMode, seed: u64) -> Result<ObservationMask> {
    if shape.len() != 3 {
        return Err(Error::dim("make_condition_mask", shape, &[3]));
    }
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    let observed = match mode {
        MaskMode::Imputation { ratio } => {
            if !(ratio > 0.0 && ratio < 1.0) {
                return Err(Error::Config(format!("missing ratio must lie in (0, 1), got {ratio}")));
            }
            let mut r = rng::stream(seed, tags::MASK);
            (0..b * l * d).map(|_| r.random::<f64>() >= ratio).collect()
        }
        MaskMode::Forecast { horizon } => {
            if horizon == 0 || horizon >= l {
                return Err(Error::Config(format!(
                    "forecast horizon must lie in (0, {l}), got {horizon}"
                )));
            }
            (0..b * l * d).map(|i| (i / d) % l < l - horizon).collect()
        }
    };
    ObservationMask::new(shape, observed)
}
