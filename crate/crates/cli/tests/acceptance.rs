//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach stdout. The
//! process fails when any criterion fails, except those listed in
//! `KNOWN_RED`, whose failure mode is itself asserted.

#[path = "../../core/tests/common/gradcheck.rs"]
mod gradcheck;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use gradcheck::{max_rel_error, project, random_tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use timeflow_cli::commands::{self, EvaluateArgs};
use timeflow_cli::ExperimentConfig;
use timeflow_core::datapipe::{generate_sines, make_condition_mask, DatasetSpec, MaskMode, SeriesBatch};
use timeflow_core::flow_train::{interpolate_per_window, loss_from_velocity, FlowDraw, LossKind, TrainConfig};
use timeflow_core::metrics::{self, EmbedderModel, Metric, MetricConfig};
use timeflow_core::rng;
use timeflow_core::samplers::*;
use timeflow_core::tensorgrad::{Padding, Unary};
use timeflow_core::velocity_model::{Ablation, ModelConfig, VelocityModel};
use timeflow_core::{Result, Tape, Tensor, Var};

/// Criteria that cannot pass as stated; see the project notes for the analysis.
const KNOWN_RED: &[u32] = &[4];

struct Outcome {
    pass: bool,
    detail: String,
    /// For known-red criteria: whether the documented failure mode was observed.
    diagnosis_holds: bool,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Self {
            pass,
            detail,
            diagnosis_holds: false,
        }
    }
}

fn main() {
    // libtest flags such as --nocapture or a name filter are accepted and ignored
    let only: Option<u32> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "gradient fidelity", c1_gradients),
        (2, "VFE algebraic identities", c2_identities),
        (3, "SFM - CFM loss decomposition", c3_loss_decomposition),
        (4, "sampler vs one-point oracle", c4_sampler_oracle),
        (5, "conditional constraint", c5_conditional),
        (6, "desk-scale Sines reproduction", c6_sines),
        (7, "metric self-comparison floors", c7_metric_floors),
        (8, "SDE vs ODE variant (report only)", c8_sde_vs_ode),
        (9, "command determinism", c9_determinism),
        (10, "efficiency protocol", c10_efficiency),
    ];
    let mut hard_failures = Vec::new();
    for (id, name, run) in criteria {
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let start = Instant::now();
        let out = run();
        let secs = start.elapsed().as_secs_f64();
        let verdict = if out.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {verdict} {name}: {} [{secs:.1}s]", out.detail);
        if !out.pass && !(KNOWN_RED.contains(&id) && out.diagnosis_holds) {
            hard_failures.push(id);
        }
    }
    if !hard_failures.is_empty() {
        eprintln!("unexpected acceptance failures: {hard_failures:?}");
        std::process::exit(1);
    }
}

fn se_of_mean(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

// ---------------------------------------------------------------- 1

fn c1_gradients() -> Outcome {
    const TRIALS: u64 = 25;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let dim = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| rng.random_range(lo..=hi);
    let mut trial = |name: &'static str, rng: &mut ChaCha8Rng, f: &mut dyn FnMut(&mut ChaCha8Rng, u64) -> f64| {
        let e = (0..TRIALS).map(|s| f(rng, s)).fold(0.0, f64::max);
        worst.push((name, e));
    };
    trial("matmul+bias", &mut rng, &mut |rng, seed| {
        let (b, l, k, n) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
        let x = random_tensor(rng, &[b, l, k], 1.0);
        let w = random_tensor(rng, &[k, n], 1.0);
        let bias = random_tensor(rng, &[n], 1.0);
        max_rel_error(&[x, w, bias], |_, v| project(v[0].matmul(v[1])?.add_bias(v[2])?, seed))
    });
    trial("conv1d", &mut rng, &mut |rng, seed| {
        let (b, l, c, co) = (dim(rng, 1, 3), dim(rng, 1, 6), dim(rng, 1, 3), dim(rng, 1, 3));
        let k = 2 * dim(rng, 0, 3) + 1;
        let pad = if seed % 2 == 0 { Padding::Replicate } else { Padding::Zero };
        let x = random_tensor(rng, &[b, l, c], 1.0);
        let w = random_tensor(rng, &[k, c, co], 1.0);
        max_rel_error(&[x, w], |_, v| project(v[0].conv1d(v[1], pad)?, seed))
    });
    trial("attention", &mut rng, &mut |rng, seed| {
        let (heads, dh) = (dim(rng, 1, 2), dim(rng, 1, 3));
        let (b, lq, lk) = (dim(rng, 1, 2), dim(rng, 1, 4), dim(rng, 1, 4));
        let q = random_tensor(rng, &[b, lq, heads * dh], 1.0);
        let k = random_tensor(rng, &[b, lk, heads * dh], 1.0);
        let v = random_tensor(rng, &[b, lk, heads * dh], 1.0);
        max_rel_error(&[q, k, v], |_, x| project(x[0].attention(x[1], x[2], heads)?, seed))
    });
    trial("moving_average", &mut rng, &mut |rng, seed| {
        let (b, l, c) = (dim(rng, 1, 2), dim(rng, 1, 7), dim(rng, 1, 3));
        let window = 2 * dim(rng, 0, l - 1) + 1;
        let x = random_tensor(rng, &[b, l, c], 1.0);
        max_rel_error(&[x], |_, v| project(v[0].moving_average(window)?, seed))
    });
    trial("layer_norm", &mut rng, &mut |rng, seed| {
        let (r, c) = (dim(rng, 1, 4), dim(rng, 2, 6));
        let x = random_tensor(rng, &[r, c], 2.0);
        let g = random_tensor(rng, &[c], 1.0);
        let b = random_tensor(rng, &[c], 1.0);
        max_rel_error(&[x, g, b], |_, v| project(v[0].layer_norm(v[1], v[2])?, seed))
    });
    let kinds = [
        Unary::Sigmoid,
        Unary::Tanh,
        Unary::Gelu,
        Unary::Silu,
        Unary::Exp,
        Unary::Square,
        Unary::Abs,
        Unary::Softplus,
    ];
    trial("unary", &mut rng, &mut |rng, seed| {
        let kind = kinds[seed as usize % kinds.len()];
        let shape = [dim(rng, 1, 3), dim(rng, 1, 4)];
        let x = random_tensor(rng, &shape, 2.0);
        max_rel_error(&[x], |_, v| project(v[0].unary(kind), seed))
    });
    trial("softmax", &mut rng, &mut |rng, seed| {
        let shape = [dim(rng, 1, 3), dim(rng, 1, 5)];
        let x = random_tensor(rng, &shape, 3.0);
        max_rel_error(&[x], |_, v| project(v[0].softmax(), seed))
    });
    trial("log_softmax", &mut rng, &mut |rng, seed| {
        let shape = [dim(rng, 1, 4), dim(rng, 1, 6)];
        let x = random_tensor(rng, &shape, 2.0);
        max_rel_error(&[x], |_, v| project(v[0].log_softmax(), seed))
    });
    trial("transpose", &mut rng, &mut |rng, seed| {
        let (r, c, n) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 3));
        let x = random_tensor(rng, &[r, c], 1.0);
        let w = random_tensor(rng, &[r, n], 1.0);
        max_rel_error(&[x, w], |_, v| project(v[0].transpose()?.matmul(v[1])?, seed))
    });
    trial("elementwise", &mut rng, &mut |rng, seed| {
        let (b, l, c) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 3));
        let x = random_tensor(rng, &[b, l, c], 1.0);
        let y = random_tensor(rng, &[b, l, c], 1.0);
        let e = random_tensor(rng, &[b, c], 1.0);
        max_rel_error(&[x, y, e], |_, v| {
            let z = v[0].mul(v[1])?.sub(v[0].affine(0.5, 1.0))?.add(v[1])?;
            project(z.add_per_batch(v[2])?.scale(-1.5), seed)
        })
    });
    trial("time plumbing", &mut rng, &mut |rng, seed| {
        let (b, l, c) = (dim(rng, 1, 3), dim(rng, 2, 4), dim(rng, 2, 4));
        let x = random_tensor(rng, &[b, l, c], 1.0);
        max_rel_error(&[x], |_, v| {
            let steps: Vec<Var<'_>> = (0..l).map(|t| v[0].select_time(l - 1 - t)).collect::<Result<_>>()?;
            let rev = Var::stack_time(&steps)?;
            let joined = Var::concat_last(&[rev.slice_last(1, c - 1)?, rev.slice_last(0, 1)?])?;
            project(joined.reshape(&[b * l, c])?, seed)
        })
    });
    let prim = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let (prim_name, _) = worst.iter().copied().fold(("", -1.0), |a, w| if w.1 > a.1 { w } else { a });

    let mut model = VelocityModel::new(ModelConfig {
        features: 2,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        time_embed_dim: 8,
        ..Default::default()
    })
    .expect("model");
    model.randomize_parameters(7, 0.5);
    let x = Tensor::from_fn(&[1, 8, 2], |_| rng.random::<f64>());
    let params = model.params().values().to_vec();
    let full = max_rel_error(&params, |tape, vars| {
        let p = model.params().bind_with(vars.to_vec())?;
        Ok(model.forward(&p, tape.constant(x.clone()), &[0.4])?.square().mean())
    });
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        prim < 1e-4 && full < 1e-3 && secs < 60.0,
        format!(
            "primitives max rel err {prim:.2e} (worst {prim_name}) < 1e-4; full model (1x8x2, 1 layer, d_model 8, {} params) {full:.2e} < 1e-3; {secs:.1}s < 60s",
            model.parameter_count()
        ),
    )
}

// ---------------------------------------------------------------- 2

fn c2_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let variants = [Ablation::full(), Ablation::no_cross_attention(), Ablation::no_encoder()];
    let (mut e1, mut e2): (f64, f64) = (0.0, 0.0);
    let mut layers = 0;
    for pass in 0..100 {
        let mut model = VelocityModel::new(ModelConfig {
            features: 3,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            time_embed_dim: 8,
            ablation: variants[pass % 3],
            ..Default::default()
        })
        .expect("model");
        model.randomize_parameters(1000 + pass as u64, 0.5);
        let b = 1 + pass % 3;
        let x = Tensor::from_fn(&[b, 12, 3], |_| rng.random::<f64>());
        let times: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
        let tape = Tape::new();
        let p = model.params().bind(&tape, false);
        let (_, traces) = model.forward_traced(&p, tape.constant(x), &times).expect("forward");
        for tr in traces {
            let h = tr.encoded.value();
            let st = tr.seasonal.value().zip_map(&tr.trend.value(), |a, b| a + b).unwrap();
            e1 = e1.max(h.max_abs_diff(&st));
            let sum = tr
                .residual
                .value()
                .zip_map(&tr.refined_seasonal.value(), |a, b| a + b)
                .unwrap()
                .zip_map(&tr.modulated_trend.value(), |a, b| a + b)
                .unwrap();
            e2 = e2.max(h.max_abs_diff(&sum));
            layers += 1;
        }
    }
    Outcome::new(
        e1 <= 1e-12 && e2 <= 1e-10,
        format!("100 passes, {layers} layers: max|s+t-H| {e1:.1e} <= 1e-12, max|O+S+T-H| {e2:.1e} <= 1e-10"),
    )
}

// ---------------------------------------------------------------- 3

fn c3_loss_decomposition() -> Outcome {
    let mut model = VelocityModel::new(ModelConfig {
        features: 2,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        time_embed_dim: 8,
        ..Default::default()
    })
    .expect("model");
    model.randomize_parameters(3, 0.3);
    let data = generate_sines(1000, 8, 2, 3).expect("sines").values;
    let (l, d) = (8, 2);
    let mut parts = Vec::new();
    let mut pass = true;
    for sigma in [0.1, 0.5, 1.0] {
        let mut r = rng::stream(31, (sigma * 10.0) as u64);
        // 100 batches x 1000 windows = 1e5 paired draws, each scored with both losses
        let mut diffs = Vec::with_capacity(100_000);
        for _ in 0..100 {
            let draw = FlowDraw::sample(&mut r, data.shape(), sigma);
            let xt = interpolate_per_window(&draw.x0, &data, &draw.times).unwrap();
            let v = model.velocity(&xt, &draw.times).unwrap();
            for w in 0..1000 {
                let idx = [w];
                let sfm = FlowDraw {
                    times: vec![draw.times[w]],
                    x0: draw.x0.gather_leading(&idx),
                    noise: draw.noise.gather_leading(&idx),
                };
                let cfm = FlowDraw {
                    noise: Tensor::zeros(&[1, l, d]),
                    ..sfm.clone()
                };
                let x1 = data.gather_leading(&idx);
                let tape = Tape::new();
                let vw = tape.constant(v.gather_leading(&idx));
                let a = loss_from_velocity(vw, &x1, &sfm).unwrap().item();
                let b = loss_from_velocity(vw, &x1, &cfm).unwrap().item();
                diffs.push(a - b);
            }
        }
        let (mean, se) = se_of_mean(&diffs);
        let ok = (mean - sigma * sigma).abs() < 3.0 * se;
        pass &= ok;
        parts.push(format!("σ={sigma}: {mean:.5} vs {:.2} (3SE {:.5})", sigma * sigma, 3.0 * se));
    }
    Outcome::new(pass, format!("1e5 paired draws each; {}", parts.join("; ")))
}

// ---------------------------------------------------------------- 4

fn max_error(samples: &Tensor, x: &Tensor) -> f64 {
    samples
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| (v - x.data()[i % x.len()]).abs())
        .fold(0.0, f64::max)
}

/// Exact marginal field for N(m, s²) data; its ODE flow maps x0 to m + s·x0.
struct GaussianField {
    m: f64,
    s: f64,
}

impl VelocityField for GaussianField {
    fn velocity(&self, x: &Tensor, times: &[f64]) -> Result<Tensor> {
        let row = x.len() / times.len();
        let (m, s2) = (self.m, self.s * self.s);
        Ok(Tensor::from_fn(x.shape(), |i| {
            let t = times[i / row];
            let var = t * t * s2 + (1.0 - t) * (1.0 - t);
            m + (t * s2 - (1.0 - t)) / var * (x.data()[i] - t * m)
        }))
    }
}

fn c4_sampler_oracle() -> Outcome {
    let start = Instant::now();
    let target = Tensor::from_fn(&[6, 2], |i| 0.2 + 0.6 * ((i as f64) * 1.3).sin().abs());
    let field = OnePointField::new(target.clone());
    let ode = |n_steps| SampleConfig {
        n_steps,
        mode: Mode::Ode,
        clamp: (-1e6, 1e6),
        ..Default::default()
    };
    let shape = [64, 6, 2];
    let err_n = max_error(&sample_unconditional(&field, &shape, &ode(1000)).unwrap(), &target);
    let err_2n = max_error(&sample_unconditional(&field, &shape, &ode(2000)).unwrap(), &target);
    let ratio = err_n / err_2n;
    let ratio_ok = (1.7..=2.3).contains(&ratio);

    let sde = SampleConfig {
        n_steps: 100,
        sigma: 0.1,
        mode: Mode::Sde,
        clamp: (-1e6, 1e6),
        ..Default::default()
    };
    let n = 10_000;
    let out = sample_unconditional(&field, &[n, 6, 2], &sde).unwrap();
    let mut worst_z: f64 = 0.0;
    for c in 0..12 {
        let vals: Vec<f64> = out.data().iter().skip(c).step_by(12).copied().collect();
        let (mean, se) = se_of_mean(&vals);
        worst_z = worst_z.max((mean - target.data()[c]).abs() / se);
    }

    // supplementary: a field whose Euler error is not identically zero
    let g = GaussianField { m: 0.4, s: 0.3 };
    let gshape = [64, 4, 1];
    let z0 = sample_unconditional(&ZeroField, &gshape, &SampleConfig { sigma: 0.0, ..ode(1) }).unwrap();
    let exact = z0.map(|z| g.m + g.s * z);
    let ge = |n| sample_unconditional(&g, &gshape, &ode(n)).unwrap().max_abs_diff(&exact);
    let gratio = ge(1000) / ge(2000);
    let secs = start.elapsed().as_secs_f64();

    let pass = err_n < 1e-2 && ratio_ok && worst_z < 3.0 && secs < 120.0;
    let mut out = Outcome::new(
        pass,
        format!(
            "ODE err N=1000 {err_n:.2e} < 1e-2; ratio err(N)/err(2N) = {err_n:.2e}/{err_2n:.2e} = {ratio:.3} {} [1.7, 2.3]; \
             SDE mean max |z| {worst_z:.2} < 3 over 1e4; runtime {secs:.1}s < 120s; \
             (Euler is exact on the one-point field, errors are rounding only; Gaussian-target ratio {gratio:.3})",
            if ratio_ok { "in" } else { "NOT in" }
        ),
    );
    // The ratio criterion is ill-posed: with t_k = k/N the last Euler step has
    // weight dt/(1 - t_{N-1}) = 1 and lands exactly on x*. Everything else must hold.
    out.diagnosis_holds = !ratio_ok
        && err_n < 1e-12
        && err_2n < 1e-12
        && worst_z < 3.0
        && secs < 120.0
        && (1.7..=2.3).contains(&gratio);
    out
}

// ---------------------------------------------------------------- 5

fn c5_conditional() -> Outcome {
    let mut model = VelocityModel::new(ModelConfig {
        features: 2,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        time_embed_dim: 4,
        ..Default::default()
    })
    .expect("model");
    model.randomize_parameters(5, 0.5);
    let shape = [4, 48, 2];
    let modes = [
        MaskMode::Imputation { ratio: 0.1 },
        MaskMode::Imputation { ratio: 0.5 },
        MaskMode::Imputation { ratio: 0.9 },
        MaskMode::Forecast { horizon: 6 },
        MaskMode::Forecast { horizon: 12 },
        MaskMode::Forecast { horizon: 24 },
    ];
    let (mut cases, mut violations, mut checked) = (0, 0usize, 0usize);
    for seed in 0..5u64 {
        for mode in modes {
            let obs = make_condition_mask(&shape, mode, seed).unwrap();
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let reference = Tensor::from_fn(&shape, |_| r.random::<f64>() * 3.0 - 1.0);
            let mask = ConditionMask::new(obs.clone(), reference.clone()).unwrap();
            let cfg = SampleConfig {
                n_steps: 20,
                seed,
                ..Default::default()
            };
            let out = sample_conditional(&model, &mask, &cfg).unwrap();
            for i in 0..out.len() {
                if obs.is_observed(i) {
                    checked += 1;
                    violations += (out.data()[i].to_bits() != reference.data()[i].to_bits()) as usize;
                }
            }
            cases += 1;
        }
    }
    Outcome::new(
        violations == 0,
        format!("{cases} masks (r in 0.1/0.5/0.9, h in 6/12/24, L=48, 5 seeds): {violations} of {checked} observed cells differ bitwise"),
    )
}

// ---------------------------------------------------------------- 6

const SINES_STEPS: usize = 3000;
const SINES_REPEATS: usize = 3;

fn sines_config() -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSpec::sines(2000),
        model: ModelConfig {
            features: 5,
            d_model: 32,
            n_heads: 4,
            time_embed_dim: 16,
            ..Default::default()
        },
        train: TrainConfig {
            steps: SINES_STEPS,
            ..Default::default()
        },
        metrics: MetricConfig {
            repeats: SINES_REPEATS,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn c6_sines() -> Outcome {
    let start = Instant::now();
    let config = sines_config();
    let (model, data, report) = match commands::fit(&config) {
        Ok(v) => v,
        Err(e) => return Outcome::new(false, format!("training failed: {e}")),
    };
    let samples = sample_unconditional(&model, data.values.shape(), &config.sample).expect("sampling");
    let synth = SeriesBatch::new(samples, data.scaler.clone(), "synthetic").unwrap();
    let disc = metrics::evaluate(Metric::Discriminative, &data, &synth, &config.metrics).unwrap();
    let pred = metrics::evaluate(Metric::Predictive, &data, &synth, &config.metrics).unwrap();
    let floor = metrics::evaluate(Metric::Predictive, &data, &data, &config.metrics).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let last = report.losses();
    let tail = &last[last.len().saturating_sub(200)..];
    let tail_loss = tail.iter().sum::<f64>() / tail.len() as f64;
    Outcome::new(
        disc.mean <= 0.15 && pred.mean <= 0.12 && (floor.mean - 0.094).abs() <= 0.02 && secs <= 1800.0,
        format!(
            "2000 windows L=24 D=5, {SINES_STEPS} steps (final loss {tail_loss:.4}), {SINES_REPEATS} metric repeats: \
             discriminative {:.4}±{:.4} <= 0.15; predictive {:.4}±{:.4} <= 0.12; \
             real-vs-real predictive {:.4}±{:.4} within 0.094±0.02; runtime {secs:.0}s <= 1800s",
            disc.mean, disc.std, pred.mean, pred.std, floor.mean, floor.std
        ),
    )
}

// ---------------------------------------------------------------- 7

fn c7_metric_floors() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    // 123 rows -> 100 windows of length 24 at stride 1
    let csv = dir.path().join("fixture.csv");
    let mut text = String::from("load,temp,price\n");
    for i in 0..123 {
        let t = i as f64;
        text.push_str(&format!(
            "{:.6},{:.6},{:.6}\n",
            (t / 5.0).sin() + 0.01 * t,
            (t / 11.0).cos() * 2.0,
            ((t * 0.37).sin() * 3.0).exp()
        ));
    }
    std::fs::write(&csv, text).unwrap();
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, real, features) in [("sines", "sines:500".to_owned(), 5), ("csv", csv.display().to_string(), 3)] {
        let args = EvaluateArgs {
            synth: Some(real.clone().into()),
            real,
            metrics: vec!["correlational".into(), "context_fid".into(), "discriminative".into()],
            repeats: 3,
            seed: 0,
            window: 24,
            stride: 1,
            features,
            checkpoint: None,
            sigma_sweep: Vec::new(),
            steps: None,
            metric_steps: None,
            out: None,
        };
        let report = match commands::evaluate(&args) {
            Ok(r) => r,
            Err(e) => return Outcome::new(false, format!("{name}: {e}")),
        };
        let value = |m: &str| -> f64 {
            let row = report.lines().find(|l| l.starts_with(&format!("{m},"))).unwrap();
            row.split(',').nth(1).unwrap().parse().unwrap()
        };
        let (corr, fid, disc) = (value("correlational"), value("context_fid"), value("discriminative"));
        pass &= corr <= 1e-6 && fid <= 1e-6 && disc <= 0.1;
        parts.push(format!("{name}: corr {corr:.1e}, fid {fid:.1e}, disc {disc:.3}"));
    }
    Outcome::new(pass, format!("{} (bounds 1e-6 / 1e-6 / 0.1)", parts.join("; ")))
}

// ---------------------------------------------------------------- 8

fn c8_sde_vs_ode() -> Outcome {
    let real = generate_sines(300, 24, 5, 80).unwrap();
    let mcfg = MetricConfig::default();
    let mut rows = Vec::new();
    let mut finite = true;
    let mut wins = 0;
    for seed in 0..5u64 {
        let embedder = EmbedderModel::train(&real.values, &mcfg, seed).expect("embedder");
        let mut fid = [0.0; 2];
        for (k, (loss_kind, mode, sigma)) in [(LossKind::Sfm, Mode::Sde, 0.1), (LossKind::Cfm, Mode::Ode, 0.0)]
            .into_iter()
            .enumerate()
        {
            let mut model = VelocityModel::new(ModelConfig {
                features: 5,
                d_model: 16,
                n_heads: 2,
                n_layers: 1,
                time_embed_dim: 8,
                seed,
                ..Default::default()
            })
            .unwrap();
            let tcfg = TrainConfig {
                steps: 600,
                batch_size: 32,
                loss_kind,
                seed,
                ..Default::default()
            };
            let schedule = timeflow_core::flow_train::FlowSchedule::default();
            let result = timeflow_core::flow_train::train(&mut model, &real, &schedule, &tcfg).and_then(|_| {
                let scfg = SampleConfig {
                    mode,
                    sigma,
                    seed,
                    ..Default::default()
                };
                let s = sample_unconditional(&model, real.values.shape(), &scfg)?;
                metrics::context_fid(&real.values, &s, &embedder)
            });
            match result {
                Ok(v) if v.is_finite() => fid[k] = v,
                Ok(v) => {
                    finite = false;
                    fid[k] = v;
                }
                Err(e) => return Outcome::new(false, format!("seed {seed}: {e}")),
            }
        }
        wins += (fid[0] <= 1.5 * fid[1]) as usize;
        rows.push(format!("s{seed} {:.4}/{:.4}", fid[0], fid[1]));
    }
    Outcome::new(
        finite,
        format!(
            "Context-FID SDE/ODE (300 windows, 600 steps, d_model 16): {}; SDE <= 1.5x ODE on {wins}/5 seeds (reported, not gated)",
            rows.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 9 / 10

fn timeflow(args: &[&str]) -> std::result::Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_timeflow"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("timeflow {args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn write_small_config(dir: &Path, length: usize, steps: usize) -> String {
    let text = format!(
        r#"output_dir = "{}"

[dataset]
window_length = {length}
feature_count = 2

[dataset.source]
kind = "sines"
windows = 64

[model]
features = 2
d_model = 16
n_heads = 2
n_layers = 1
time_embed_dim = 8

[train]
steps = {steps}
batch_size = 16

[sample]
n_steps = 20

[metrics]
repeats = 2
steps = 20
embed_steps = 20
"#,
        dir.join("run").display()
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn write_reference(path: &Path, rows: usize) {
    let mut text = String::from("a,b\n");
    for i in 0..rows {
        let x = i as f64 / 6.0;
        text.push_str(&format!("{:.6},{:.6}\n", x.sin(), (0.4 * x).cos() + 2.0));
    }
    std::fs::write(path, text).unwrap();
}

/// Runs every verb once in `dir` and returns `(file, contents)` for all
/// non-timing outputs.
fn run_all_commands(dir: &Path) -> std::result::Result<Vec<(String, Vec<u8>)>, String> {
    let config = write_small_config(dir, 48, 40);
    let p = |n: &str| dir.join(n).display().to_string();
    let ck = p("run/checkpoint.tflw");
    write_reference(&dir.join("ref.csv"), 96);
    timeflow(&["train", "--config", &config])?;
    timeflow(&["generate", "--checkpoint", &ck, "--n", "8", "--mode", "sde", "--seed", "3", "--out", &p("sde.csv")])?;
    timeflow(&["generate", "--checkpoint", &ck, "--n", "8", "--mode", "ode", "--seed", "3", "--out", &p("ode.csv")])?;
    timeflow(&[
        "condition", "--checkpoint", &ck, "--reference", &p("ref.csv"), "--task", "impute:0.3", "--draws", "4",
        "--seed", "2", "--out", &p("impute.csv"),
    ])?;
    timeflow(&[
        "condition", "--checkpoint", &ck, "--reference", &p("ref.csv"), "--task", "forecast:12", "--draws", "4",
        "--seed", "2", "--out", &p("forecast.csv"),
    ])?;
    timeflow(&[
        "evaluate", "--real", "sines:16", "--window", "48", "--features", "2", "--synth", &p("sde.csv"),
        "--repeats", "2", "--metric-steps", "10", "--out", &p("eval.csv"),
    ])?;
    timeflow(&[
        "evaluate", "--real", "sines:16", "--window", "48", "--features", "2", "--checkpoint", &ck,
        "--sigma-sweep", "0,0.1", "--metrics", "correlational,context_fid", "--repeats", "1", "--metric-steps", "10",
        "--out", &p("sweep.csv"),
    ])?;
    let inspect = timeflow(&["inspect", "--checkpoint", &ck])?;
    timeflow(&[
        "ablate", "--config", &config, "--variants", "full,no_encoder", "--set", "train.steps=10",
        "--set", "dataset.source.windows=16",
    ])?;
    let mut files = Vec::new();
    for name in [
        "run/checkpoint.tflw",
        "sde.csv",
        "ode.csv",
        "impute.csv",
        "impute.mse.csv",
        "forecast.csv",
        "forecast.mse.csv",
        "eval.csv",
        "sweep.csv",
        "run/ablation.csv",
    ] {
        files.push((name.to_owned(), std::fs::read(dir.join(name)).map_err(|e| format!("{name}: {e}"))?));
    }
    // the training report's wall_ms column is timing
    let report = std::fs::read_to_string(dir.join("run/training_report.csv")).map_err(|e| e.to_string())?;
    let losses: String = report
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_owned() + "\n")
        .collect();
    files.push(("run/training_report.csv[step,loss]".into(), losses.into_bytes()));
    files.push(("inspect stdout (path line removed)".into(), strip_first_line(&inspect).into_bytes()));
    Ok(files)
}

fn strip_first_line(s: &str) -> String {
    s.split_once('\n').map_or("", |x| x.1).to_owned()
}

fn c9_determinism() -> Outcome {
    // identical config and seeds, run twice in the same location
    let dir = tempfile::tempdir().unwrap();
    let first = match run_all_commands(dir.path()) {
        Ok(f) => f,
        Err(e) => return Outcome::new(false, e),
    };
    for entry in std::fs::read_dir(dir.path()).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            std::fs::remove_dir_all(&path).unwrap();
        } else {
            std::fs::remove_file(&path).unwrap();
        }
    }
    let second = match run_all_commands(dir.path()) {
        Ok(f) => f,
        Err(e) => return Outcome::new(false, e),
    };
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(a, b)| a.1 != b.1)
        .map(|(a, _)| a.0.as_str())
        .collect();
    Outcome::new(
        differing.is_empty(),
        format!(
            "train/generate(sde,ode)/condition(impute,forecast)/evaluate(+sweep)/ablate/inspect twice: {} outputs compared, differing: {:?}",
            first.len(),
            differing
        ),
    )
}

fn c10_efficiency() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = write_small_config(dir.path(), 48, 30);
    let p = |n: &str| dir.path().join(n).display().to_string();
    let ck = p("run/checkpoint.tflw");
    write_reference(&dir.path().join("ref.csv"), 96);
    let steps = |n: &str, out: &str| {
        timeflow(&["generate", "--checkpoint", &ck, "--n", "64", "--steps", n, "--out", &p(out)])
    };
    let run = || -> std::result::Result<(), String> {
        timeflow(&["train", "--config", &config])?;
        steps("100", "g100.csv")?;
        steps("1000", "g1000.csv")?;
        timeflow(&["condition", "--checkpoint", &ck, "--reference", &p("ref.csv"), "--task", "forecast:12", "--draws", "2", "--out", &p("f.csv")])?;
        timeflow(&["condition", "--checkpoint", &ck, "--reference", &p("ref.csv"), "--task", "impute:0.5", "--draws", "2", "--out", &p("i.csv")])?;
        Ok(())
    };
    if let Err(e) = run() {
        return Outcome::new(false, e);
    }
    let timing = std::fs::read_to_string(dir.path().join("run/timing.csv")).unwrap();
    let rows: Vec<Vec<&str>> = timing.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let stages: Vec<&str> = ["train", "uncondition", "forecasting", "imputation"]
        .into_iter()
        .filter(|s| rows.iter().any(|r| r[0] == *s))
        .collect();
    let secs = |n: &str| -> f64 {
        rows.iter()
            .find(|r| r[0] == "uncondition" && r[2] == n)
            .map(|r| r[1].parse().unwrap())
            .unwrap_or(f64::NAN)
    };
    let (s100, s1000) = (secs("100"), secs("1000"));
    let speedup = s1000 / s100;
    Outcome::new(
        stages.len() == 4 && speedup >= 5.0,
        format!(
            "stages present {stages:?} (need train, uncondition, forecasting, imputation); \
             64 windows: 100 steps {s100:.3}s vs 1000 steps {s1000:.3}s, speedup {speedup:.1}x >= 5x"
        ),
    )
}
