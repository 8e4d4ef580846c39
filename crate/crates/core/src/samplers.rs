//! Unconditional Euler / Euler–Maruyama integration of the learned flow and the
//! masked conditional sampler used for imputation and forecasting.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::datapipe::ObservationMask;
use crate::error::{Error, Result};
use crate::rng::{self, tags, StreamRng};
use crate::tensorgrad::Tensor;
use crate::velocity_model::VelocityModel;

/// Anything that can be integrated: a velocity `v(x, t)` over `[B, L, D]` batches
/// with one time per window.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, times: &[f64]) -> Result<Tensor>;
}

impl VelocityField for VelocityModel {
    fn velocity(&self, x: &Tensor, times: &[f64]) -> Result<Tensor> {
        VelocityModel::velocity(self, x, times)
    }
}

/// `v ≡ 0`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroField;

impl VelocityField for ZeroField {
    fn velocity(&self, x: &Tensor, _times: &[f64]) -> Result<Tensor> {
        Ok(Tensor::zeros(x.shape()))
    }
}

/// Exact marginal velocity when the data distribution is the single window
/// `target`: `v(x, t) = (target − x) / (1 − t)`.
#[derive(Clone, Debug)]
pub struct OnePointField {
    target: Tensor,
}

impl OnePointField {
    /// `target` has the shape of one window, `[L, D]`.
    pub fn new(target: Tensor) -> Self {
        Self { target }
    }
}

impl VelocityField for OnePointField {
    fn velocity(&self, x: &Tensor, times: &[f64]) -> Result<Tensor> {
        let row = self.target.len();
        if x.shape().len() != 3 || x.len() != times.len() * row || x.shape()[1..] != *self.target.shape() {
            return Err(Error::dim("one-point field", x.shape(), self.target.shape()));
        }
        let mut out = x.clone();
        for (b, &t) in times.iter().enumerate() {
            let rest = 1.0 - t;
            let chunk = &mut out.data_mut()[b * row..(b + 1) * row];
            for (o, &s) in chunk.iter_mut().zip(self.target.data()) {
                *o = if rest > 0.0 { (s - *o) / rest } else { 0.0 };
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Sde,
    Ode,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sde" => Ok(Mode::Sde),
            "ode" => Ok(Mode::Ode),
            _ => Err(Error::Config(format!("unknown sampling mode {s:?} (expected sde or ode)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub n_steps: usize,
    pub sigma: f64,
    pub mode: Mode,
    pub power: f64,
    pub clamp: (f64, f64),
    pub seed: u64,
    /// Windows integrated together in one model call.
    pub chunk: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            n_steps: 100,
            sigma: 0.1,
            mode: Mode::Sde,
            power: 2.0,
            clamp: (-1.0, 2.0),
            seed: 0,
            chunk: 256,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be >= 1".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config(format!("sigma must be nonnegative, got {}", self.sigma)));
        }
        if !(self.power >= 1.0) {
            return Err(Error::Config(format!("power must be >= 1, got {}", self.power)));
        }
        if !(self.clamp.0 < self.clamp.1) {
            return Err(Error::Config(format!(
                "clamp bounds must satisfy lo < hi, got {:?}",
                self.clamp
            )));
        }
        if self.chunk == 0 {
            return Err(Error::Config("chunk must be >= 1".into()));
        }
        Ok(())
    }
}

/// `t_k = (k/N)^p`, `k = 0..=N`.
pub fn power_schedule(n: usize, p: f64) -> Result<Vec<f64>> {
    if n == 0 || !(p >= 1.0) {
        return Err(Error::Config(format!("power schedule needs N >= 1 and p >= 1, got N={n}, p={p}")));
    }
    Ok((0..=n)
        .map(|k| if k == n { 1.0 } else { (k as f64 / n as f64).powf(p) })
        .collect())
}

fn sample_streams(seed: u64, start: usize, count: usize) -> Vec<StreamRng> {
    (start..start + count)
        .map(|i| rng::stream(seed, tags::SAMPLE_BASE + i as u64))
        .collect()
}

/// Draws one window of standard normals from each stream.
fn draw(streams: &mut [StreamRng], window: &[usize]) -> Tensor {
    let row: usize = window.iter().product();
    let mut data = Vec::with_capacity(streams.len() * row);
    for s in streams.iter_mut() {
        data.extend(rng::normal_vec(s, row));
    }
    let mut shape = vec![streams.len()];
    shape.extend_from_slice(window);
    Tensor::new(&shape, data).expect("normal draw shape")
}

fn check_state(x: &Tensor, step: usize) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite sampler state at step {step}")))
    }
}

fn clamp(x: &mut Tensor, (lo, hi): (f64, f64)) {
    for v in x.data_mut() {
        *v = v.clamp(lo, hi);
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.len() != 3 {
        return Err(Error::dim("sample", shape, &[0, 0, 0]));
    }
    Ok(())
}

/// Integrates from `N(0, I)` at `t = 0` to `t = 1` on the uniform grid. Sample
/// `i` uses its own stream, so results do not depend on `config.chunk`.
pub fn sample_unconditional(field: &impl VelocityField, shape: &[usize], config: &SampleConfig) -> Result<Tensor> {
    config.validate()?;
    check_shape(shape)?;
    let (b, window) = (shape[0], &shape[1..]);
    let n = config.n_steps;
    let dt = 1.0 / n as f64;
    let noise_scale = match config.mode {
        Mode::Sde if config.sigma > 0.0 => Some(config.sigma * dt.sqrt()),
        _ => None,
    };
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < b {
        let count = config.chunk.min(b - start);
        let mut streams = sample_streams(config.seed, start, count);
        let mut x = draw(&mut streams, window);
        for k in 0..n {
            let t = k as f64 * dt;
            let v = field.velocity(&x, &vec![t; count])?;
            for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
                *xi += vi * dt;
            }
            if let Some(scale) = noise_scale {
                let xi = draw(&mut streams, window);
                for (x, z) in x.data_mut().iter_mut().zip(xi.data()) {
                    *x += scale * z;
                }
            }
            check_state(&x, k)?;
        }
        clamp(&mut x, config.clamp);
        chunks.push(x);
        start += count;
    }
    if chunks.is_empty() {
        return Ok(Tensor::zeros(shape));
    }
    Tensor::concat_leading(&chunks)
}

/// Observation pattern plus ground truth (in model space) at observed cells.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionMask {
    observed: ObservationMask,
    reference: Tensor,
}

impl ConditionMask {
    pub fn new(observed: ObservationMask, reference: Tensor) -> Result<Self> {
        if observed.shape() != reference.shape() {
            return Err(Error::dim("ConditionMask", observed.shape(), reference.shape()));
        }
        check_shape(reference.shape())?;
        let bad = observed
            .observed()
            .iter()
            .zip(reference.data())
            .position(|(&o, v)| o && !v.is_finite());
        if let Some(i) = bad {
            return Err(Error::Contract(format!("reference is not finite at observed cell {i}")));
        }
        Ok(Self { observed, reference })
    }

    pub fn observed(&self) -> &ObservationMask {
        &self.observed
    }

    pub fn reference(&self) -> &Tensor {
        &self.reference
    }

    pub fn shape(&self) -> &[usize] {
        self.reference.shape()
    }
}

/// Masked sampler: observed cells are re-noised toward the reference at each
/// schedule time, every cell takes the fractional endpoint step
/// `x + (t_{k+1} − t_k)/(1 − t_k) · (1 − t_k) · v(x, t_k)`, the state is clamped
/// after each step, and observed cells are finally set to the reference.
pub fn sample_conditional(field: &impl VelocityField, mask: &ConditionMask, config: &SampleConfig) -> Result<Tensor> {
    config.validate()?;
    let shape = mask.shape();
    let (b, window) = (shape[0], &shape[1..]);
    let row: usize = window.iter().product();
    let schedule = power_schedule(config.n_steps, config.power)?;
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < b {
        let count = config.chunk.min(b - start);
        let cells = start * row..(start + count) * row;
        let observed = &mask.observed.observed()[cells.clone()];
        let reference = &mask.reference.data()[cells];
        let mut streams = sample_streams(config.seed, start, count);
        let mut x = draw(&mut streams, window);
        for k in 0..config.n_steps {
            let (t, next) = (schedule[k], schedule[k + 1]);
            let eps = draw(&mut streams, window);
            for (i, xi) in x.data_mut().iter_mut().enumerate() {
                if observed[i] {
                    *xi = t * reference[i] + (1.0 - t) * eps.data()[i];
                }
            }
            let v = field.velocity(&x, &vec![t; count])?;
            let rest = 1.0 - t;
            let scale = (next - t) / rest * rest;
            for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
                *xi += scale * vi;
            }
            check_state(&x, k)?;
            clamp(&mut x, config.clamp);
        }
        for (i, xi) in x.data_mut().iter_mut().enumerate() {
            if observed[i] {
                *xi = reference[i];
            }
        }
        chunks.push(x);
        start += count;
    }
    if chunks.is_empty() {
        return Ok(Tensor::zeros(shape));
    }
    Tensor::concat_leading(&chunks)
}

/// Writes `[B, L, D]` samples as `sample_id,t_index,feature,value` rows.
pub fn write_long_csv(samples: &Tensor, out: impl Write) -> Result<()> {
    check_shape(samples.shape())?;
    let (b, l, d) = (samples.shape()[0], samples.shape()[1], samples.shape()[2]);
    let mut w = std::io::BufWriter::new(out);
    let io = |source| Error::Io {
        path: "<samples>".into(),
        source,
    };
    writeln!(w, "sample_id,t_index,feature,value").map_err(io)?;
    for s in 0..b {
        for t in 0..l {
            for f in 0..d {
                let v = samples.data()[(s * l + t) * d + f];
                writeln!(w, "{s},{t},{f},{v:.8e}").map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

/// Inverse of [`write_long_csv`]; every (sample, time, feature) cell must be present once.
pub fn read_long_csv(input: impl Read) -> Result<Tensor> {
    let mut reader = csv::Reader::from_reader(input);
    let mut cells = Vec::new();
    let (mut b, mut l, mut d) = (0, 0, 0);
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            column: 0,
            message: e.to_string(),
        })?;
        if rec.len() != 4 {
            return Err(Error::Parse {
                row,
                column: rec.len(),
                message: "expected 4 columns (sample_id,t_index,feature,value)".into(),
            });
        }
        let idx = |c: usize| -> Result<usize> {
            rec[c].trim().parse().map_err(|_| Error::Parse {
                row,
                column: c + 1,
                message: format!("invalid index {:?}", &rec[c]),
            })
        };
        let (s, t, f) = (idx(0)?, idx(1)?, idx(2)?);
        let v: f64 = rec[3].trim().parse().map_err(|_| Error::Parse {
            row,
            column: 4,
            message: format!("invalid value {:?}", &rec[3]),
        })?;
        b = b.max(s + 1);
        l = l.max(t + 1);
        d = d.max(f + 1);
        cells.push((s, t, f, v));
    }
    if cells.len() != b * l * d {
        return Err(Error::Data(format!(
            "long-format CSV has {} cells, expected {b}×{l}×{d}",
            cells.len()
        )));
    }
    let mut data = vec![f64::NAN; b * l * d];
    for (s, t, f, v) in cells {
        let slot = &mut data[(s * l + t) * d + f];
        if !slot.is_nan() {
            return Err(Error::Data(format!("duplicate cell ({s}, {t}, {f})")));
        }
        *slot = v;
    }
    Tensor::new(&[b, l, d], data)
}
