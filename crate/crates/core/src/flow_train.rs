//! Linear flow paths, the conditional and stochastic flow-matching losses, and
//! the optimization loop.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::SeriesBatch;
use crate::error::{Error, Result};
use crate::nn::{Adam, Bound};
use crate::rng::{self, tags, StreamRng};
use crate::tensorgrad::{Tape, Tensor, Var};
use crate::velocity_model::VelocityModel;

/// Path schedule `x_t = a(t)·x1 + b(t)·x0` with `a(t) = t`, `b(t) = 1 − t`,
/// plus the two diffusion coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSchedule {
    /// Standard deviation of the velocity perturbation in the SFM loss.
    pub sigma_train: f64,
    /// Diffusion coefficient of the sampling SDE.
    pub sigma_sample: f64,
}

impl Default for FlowSchedule {
    fn default() -> Self {
        Self {
            sigma_train: 0.1,
            sigma_sample: 0.1,
        }
    }
}

impl FlowSchedule {
    pub fn a(&self, t: f64) -> f64 {
        t
    }

    pub fn b(&self, t: f64) -> f64 {
        1.0 - t
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_train >= 0.0 && self.sigma_sample >= 0.0) {
            return Err(Error::Config(format!(
                "diffusion coefficients must be nonnegative, got {self:?}"
            )));
        }
        Ok(())
    }
}

fn check_unit(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Contract(format!("flow time {t} outside [0, 1]")))
    }
}

/// `t·x1 + (1 − t)·x0`.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor> {
    check_unit(t)?;
    x0.zip_map(x1, |a, b| t * b + (1.0 - t) * a)
}

/// Interpolation with one time per leading-axis window.
pub fn interpolate_per_window(x0: &Tensor, x1: &Tensor, times: &[f64]) -> Result<Tensor> {
    if x0.shape() != x1.shape() {
        return Err(Error::dim("interpolate", x0.shape(), x1.shape()));
    }
    let b = x0.shape().first().copied().unwrap_or(0);
    if times.len() != b {
        return Err(Error::dim("interpolate (times)", x0.shape(), &[times.len()]));
    }
    let row = x0.len() / b.max(1);
    let mut out = x0.clone();
    for (i, &t) in times.iter().enumerate() {
        check_unit(t)?;
        let src = &x1.data()[i * row..(i + 1) * row];
        for (o, &b1) in out.data_mut()[i * row..(i + 1) * row].iter_mut().zip(src) {
            *o = t * b1 + (1.0 - t) * *o;
        }
    }
    Ok(out)
}

/// Conditional velocity of the linear path, `x1 − x0`.
pub fn target_velocity(x0: &Tensor, x1: &Tensor) -> Result<Tensor> {
    x1.zip_map(x0, |a, b| a - b)
}

/// Random quantities of one loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowDraw {
    pub times: Vec<f64>,
    pub x0: Tensor,
    /// Velocity perturbation `ε_t ~ N(0, σ_t² I)`.
    pub noise: Tensor,
}

impl FlowDraw {
    /// Draws times, prior samples and the perturbation in that order. The same
    /// stream with `sigma = 0` yields the same times and prior with zero noise.
    pub fn sample(rng: &mut StreamRng, shape: &[usize], sigma: f64) -> Self {
        let b = shape[0];
        let times: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
        let x0 = rng::normal_tensor(rng, shape);
        let noise = rng::normal_tensor(rng, shape).map(|z| sigma * z);
        Self { times, x0, noise }
    }
}

/// `mean ‖v + ε − (x1 − x0)‖²` with `ε` folded into a constant target.
pub fn loss_from_velocity<'t>(v: Var<'t>, x1: &Tensor, draw: &FlowDraw) -> Result<Var<'t>> {
    let target = target_velocity(&draw.x0, x1)?.zip_map(&draw.noise, |u, e| u - e)?;
    let target = v.tape().constant(target);
    Ok(v.sub(target)?.square().mean())
}

/// Loss for a given draw on a tape holding the model parameters.
pub fn flow_loss<'t>(model: &VelocityModel, p: &Bound<'t>, x1: &Tensor, draw: &FlowDraw) -> Result<Var<'t>> {
    let xt = interpolate_per_window(&draw.x0, x1, &draw.times)?;
    let tape = p.var_tape();
    let v = model.forward(p, tape.constant(xt), &draw.times)?;
    loss_from_velocity(v, x1, draw)
}

/// Stochastic flow-matching loss with perturbation scale `sigma_t`.
pub fn sfm_loss<'t>(
    model: &VelocityModel,
    p: &Bound<'t>,
    x1: &Tensor,
    sigma_t: f64,
    rng: &mut StreamRng,
) -> Result<Var<'t>> {
    let draw = FlowDraw::sample(rng, x1.shape(), sigma_t);
    flow_loss(model, p, x1, &draw)
}

/// Conditional flow-matching loss: the `σ_t = 0` case.
pub fn cfm_loss<'t>(model: &VelocityModel, p: &Bound<'t>, x1: &Tensor, rng: &mut StreamRng) -> Result<Var<'t>> {
    sfm_loss(model, p, x1, 0.0, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Cfm,
    Sfm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `learning_rate` to 0 over `steps`.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub grad_clip: f64,
    pub loss_kind: LossKind,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip: 1.0,
            loss_kind: LossKind::Sfm,
            lr_schedule: LrSchedule::Cosine,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be nonnegative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let frac = step as f64 / self.steps as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingReport {
    pub records: Vec<StepRecord>,
    pub train_seconds: f64,
}

impl TrainingReport {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// `step,loss,wall_ms` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,wall_ms\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{:.8e},{:.3}", r.step, r.loss, r.wall_ms);
        }
        out
    }
}

/// Yields minibatch indices from successive shuffles of `0..n`.
struct BatchCycler {
    n: usize,
    order: Vec<usize>,
    pos: usize,
}

impl BatchCycler {
    fn new(n: usize) -> Self {
        Self {
            n,
            order: Vec::new(),
            pos: 0,
        }
    }

    fn next(&mut self, rng: &mut StreamRng, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order = rng::permutation(rng, self.n);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Optimizes `model` in place. Deterministic given `config.seed`.
pub fn train(
    model: &mut VelocityModel,
    data: &SeriesBatch,
    schedule: &FlowSchedule,
    config: &TrainConfig,
) -> Result<TrainingReport> {
    config.validate()?;
    schedule.validate()?;
    if data.windows() == 0 {
        return Err(Error::Data("training data is empty".into()));
    }
    if data.features() != model.config().features {
        return Err(Error::dim(
            "train",
            data.values.shape(),
            &[0, 0, model.config().features],
        ));
    }
    let sigma = match config.loss_kind {
        LossKind::Cfm => 0.0,
        LossKind::Sfm => schedule.sigma_train,
    };
    let mut opt = Adam::new(
        config.learning_rate,
        config.beta1,
        config.beta2,
        config.epsilon,
        config.grad_clip,
    );
    let mut rng = rng::stream(config.seed, tags::TRAIN);
    let mut batches = BatchCycler::new(data.windows());
    let mut report = TrainingReport::default();
    let start = Instant::now();
    for step in 0..config.steps {
        let t0 = Instant::now();
        opt.lr = config.lr_at(step);
        let idx = batches.next(&mut rng, config.batch_size);
        let x1 = data.values.gather_leading(&idx);
        let tape = Tape::new();
        let p = model.params().bind(&tape, true);
        let loss = sfm_loss(model, &p, &x1, sigma, &mut rng)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {value} at step {step} (previous loss {:?})",
                report.records.last().map(|r| r.loss)
            )));
        }
        tape.backward(loss)?;
        let grads = p.grads();
        drop(p);
        drop(tape);
        let norm = opt.step(model.params_mut().values_mut(), &grads);
        if !norm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient norm at step {step} (loss {value})"
            )));
        }
        report.records.push(StepRecord {
            step,
            loss: value,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
        if step % 500 == 0 {
            log::debug!("step {step} loss {value:.5}");
        }
    }
    report.train_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64]) -> Tensor {
        Tensor::new(&[data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn cosine_lr_decays_from_base_to_zero() {
        let cfg = TrainConfig { steps: 100, learning_rate: 2e-3, ..TrainConfig::default() };
        assert_eq!(cfg.lr_at(0), 2e-3);
        assert!((cfg.lr_at(50) - 1e-3).abs() < 1e-15);
        assert!(cfg.lr_at(99) > 0.0 && cfg.lr_at(99) < 1e-6);
        let flat = TrainConfig { lr_schedule: LrSchedule::Constant, ..cfg };
        assert_eq!(flat.lr_at(99), 2e-3);
    }

    #[test]
    fn interpolation_examples() {
        let x0 = t(&[0.0, 0.0]);
        let x1 = t(&[2.0, 4.0]);
        assert_eq!(interpolate(&x0, &x1, 0.25).unwrap(), t(&[0.5, 1.0]));
        let a = t(&[0.3, -1.7]);
        let b = t(&[2.1, 9.0]);
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), b);
        let mid = interpolate(&a, &b, 0.5).unwrap();
        assert!(mid.max_abs_diff(&a.zip_map(&b, |p, q| (p + q) / 2.0).unwrap()) < 1e-15);
        assert!(interpolate(&a, &t(&[1.0]), 0.5).is_err());
        assert!(interpolate(&a, &b, 1.5).is_err());
    }

    #[test]
    fn target_velocity_examples() {
        assert_eq!(target_velocity(&t(&[0.5]), &t(&[2.0])).unwrap(), t(&[1.5]));
        let x = t(&[1.0, 2.0]);
        assert_eq!(target_velocity(&x, &x).unwrap(), t(&[0.0, 0.0]));
        assert!(target_velocity(&x, &t(&[1.0])).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let s = FlowSchedule::default();
        assert_eq!((s.a(0.0), s.a(1.0), s.b(0.0), s.b(1.0)), (0.0, 1.0, 1.0, 0.0));
    }

    #[test]
    fn zero_sigma_draw_has_zero_noise_and_shared_prefix() {
        let a = FlowDraw::sample(&mut rng::stream(1, 0), &[2, 3, 1], 0.0);
        let b = FlowDraw::sample(&mut rng::stream(1, 0), &[2, 3, 1], 0.7);
        assert_eq!(a.times, b.times);
        assert_eq!(a.x0, b.x0);
        assert!(a.noise.data().iter().all(|&v| v == 0.0));
        assert!(b.noise.data().iter().any(|&v| v != 0.0));
    }
}
