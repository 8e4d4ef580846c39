use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use timeflow_core::datapipe::{make_condition_mask, MaskMode, ObservationMask};
use timeflow_core::samplers::*;
use timeflow_core::velocity_model::{ModelConfig, VelocityModel};
use timeflow_core::{Error, Result, Tensor};

fn target(l: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[l, d], |i| 0.2 + 0.6 * ((i as f64) * 1.3).sin().abs())
}

fn ode(n_steps: usize) -> SampleConfig {
    SampleConfig {
        n_steps,
        mode: Mode::Ode,
        clamp: (-1e6, 1e6),
        ..Default::default()
    }
}

fn max_error(samples: &Tensor, x: &Tensor) -> f64 {
    samples
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| (v - x.data()[i % x.len()]).abs())
        .fold(0.0, f64::max)
}

#[test]
fn ode_reaches_the_single_point() {
    let x = target(6, 2);
    let out = sample_unconditional(&OnePointField::new(x.clone()), &[20, 6, 2], &ode(1000)).unwrap();
    assert!(max_error(&out, &x) < 1e-2);
}

#[test]
fn sde_mean_matches_the_single_point() {
    let x = target(2, 2);
    let cfg = SampleConfig {
        n_steps: 100,
        sigma: 0.1,
        mode: Mode::Sde,
        clamp: (-1e6, 1e6),
        ..Default::default()
    };
    let n = 10_000;
    let out = sample_unconditional(&OnePointField::new(x.clone()), &[n, 2, 2], &cfg).unwrap();
    for c in 0..4 {
        let vals: Vec<f64> = out.data().iter().skip(c).step_by(4).copied().collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!(var > 0.0);
        let se = (var / n as f64).sqrt();
        assert!((mean - x.data()[c]).abs() < 3.0 * se, "coord {c}: {mean} vs {}", x.data()[c]);
    }
}

/// Exact marginal velocity when the data are N(m, s²) per coordinate:
/// `v(x, t) = m + (t·s² − (1 − t)) / (t²s² + (1 − t)²) · (x − t·m)`.
/// Its ODE flow maps `x0` to `m + s·x0`.
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

#[test]
fn euler_converges_at_first_order_on_a_gaussian_target() {
    let field = GaussianField { m: 0.4, s: 0.3 };
    let shape = [64, 4, 1];
    let start = sample_unconditional(&ZeroField, &shape, &SampleConfig { sigma: 0.0, ..ode(1) }).unwrap();
    let exact = start.map(|z| field.m + field.s * z);
    let errors: Vec<f64> = [125, 250, 500, 1000]
        .iter()
        .map(|&n| {
            let out = sample_unconditional(&field, &shape, &ode(n)).unwrap();
            out.max_abs_diff(&exact)
        })
        .collect();
    for w in errors.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.7..=2.3).contains(&ratio), "errors {errors:?}");
    }
}

#[test]
fn ode_is_deterministic_and_sde_with_zero_sigma_matches() {
    let mut model = VelocityModel::new(ModelConfig {
        features: 2,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        ..Default::default()
    })
    .unwrap();
    model.randomize_parameters(1, 0.2);
    let cfg = SampleConfig {
        n_steps: 10,
        seed: 4,
        ..ode(10)
    };
    let a = sample_unconditional(&model, &[3, 8, 2], &cfg).unwrap();
    let b = sample_unconditional(&model, &[3, 8, 2], &cfg).unwrap();
    assert_eq!(a, b);
    let sde0 = SampleConfig {
        mode: Mode::Sde,
        sigma: 0.0,
        ..cfg.clone()
    };
    assert_eq!(sample_unconditional(&model, &[3, 8, 2], &sde0).unwrap(), a);
    let sde = SampleConfig { sigma: 0.1, ..sde0 };
    assert!(sample_unconditional(&model, &[3, 8, 2], &sde).unwrap().max_abs_diff(&a) > 0.0);
    // per-sample streams: chunking does not change results
    let chunked = SampleConfig { chunk: 1, ..cfg };
    assert!(sample_unconditional(&model, &[3, 8, 2], &chunked).unwrap().max_abs_diff(&a) < 1e-12);
}

#[test]
fn outputs_respect_clamp_bounds() {
    let x = Tensor::full(&[4, 1], 5.0);
    let cfg = SampleConfig {
        sigma: 0.5,
        n_steps: 20,
        ..Default::default()
    };
    let out = sample_unconditional(&OnePointField::new(x), &[10, 4, 1], &cfg).unwrap();
    assert!(out.data().iter().all(|&v| (-1.0..=2.0).contains(&v)));
    assert!(out.data().iter().any(|&v| v == 2.0));
}

struct NanField;

impl VelocityField for NanField {
    fn velocity(&self, x: &Tensor, _: &[f64]) -> Result<Tensor> {
        Ok(Tensor::full(x.shape(), f64::NAN))
    }
}

#[test]
fn non_finite_state_reports_step() {
    let err = sample_unconditional(&NanField, &[1, 2, 1], &ode(3)).unwrap_err();
    assert!(matches!(&err, Error::Numeric(m) if m.contains("step 0")), "{err}");
}

fn condition(shape: &[usize], observed: Vec<bool>, seed: u64) -> ConditionMask {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let reference = Tensor::from_fn(shape, |_| r.random::<f64>());
    ConditionMask::new(ObservationMask::new(shape, observed).unwrap(), reference).unwrap()
}

#[test]
fn fully_observed_mask_returns_reference() {
    let mask = condition(&[2, 5, 3], vec![true; 30], 1);
    let out = sample_conditional(&ZeroField, &mask, &SampleConfig::default()).unwrap();
    assert_eq!(&out, mask.reference());
}

#[test]
fn one_step_is_the_endpoint_update() {
    let x = target(5, 2);
    let field = OnePointField::new(x);
    let shape = [3, 5, 2];
    let cfg = SampleConfig {
        n_steps: 1,
        power: 2.0,
        clamp: (-1e6, 1e6),
        ..Default::default()
    };
    let mask = condition(&shape, vec![false; 30], 2);
    let out = sample_conditional(&field, &mask, &cfg).unwrap();
    let x0 = sample_unconditional(&ZeroField, &shape, &SampleConfig { sigma: 0.0, ..cfg.clone() }).unwrap();
    let v = field.velocity(&x0, &[0.0; 3]).unwrap();
    assert_eq!(out, x0.zip_map(&v, |a, b| a + b).unwrap());
}

#[test]
fn hidden_cells_converge_with_half_observed_mask() {
    let (b, l, d) = (8, 6, 2);
    let x = target(l, d);
    let observed: Vec<bool> = (0..b * l * d).map(|i| i % 2 == 0).collect();
    let reference = Tensor::from_fn(&[b, l, d], |i| x.data()[i % x.len()]);
    let mask = ConditionMask::new(ObservationMask::new(&[b, l, d], observed.clone()).unwrap(), reference).unwrap();
    let cfg = SampleConfig {
        n_steps: 1000,
        clamp: (-1e6, 1e6),
        ..Default::default()
    };
    let out = sample_conditional(&OnePointField::new(x.clone()), &mask, &cfg).unwrap();
    for (i, v) in out.data().iter().enumerate() {
        if !observed[i] {
            assert!((v - x.data()[i % x.len()]).abs() < 2e-2);
        }
    }
}

#[test]
fn mask_shape_mismatch_is_a_dimension_error() {
    let obs = ObservationMask::all_observed(&[1, 4, 2]);
    assert!(matches!(
        ConditionMask::new(obs, Tensor::zeros(&[1, 4, 3])),
        Err(Error::Dimension { .. })
    ));
    let obs = ObservationMask::all_observed(&[1, 2, 1]);
    let nan = Tensor::new(&[1, 2, 1], vec![0.0, f64::NAN]).unwrap();
    assert!(ConditionMask::new(obs, nan).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]
    #[test]
    fn conditional_output_satisfies_observations(seed in 0u64..10_000, which in 0usize..6) {
        let modes = [
            MaskMode::Imputation { ratio: 0.1 },
            MaskMode::Imputation { ratio: 0.5 },
            MaskMode::Imputation { ratio: 0.9 },
            MaskMode::Forecast { horizon: 6 },
            MaskMode::Forecast { horizon: 12 },
            MaskMode::Forecast { horizon: 24 },
        ];
        let shape = [2, 48, 2];
        let obs = make_condition_mask(&shape, modes[which], seed).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let reference = Tensor::from_fn(&shape, |_| r.random::<f64>());
        let mask = ConditionMask::new(obs.clone(), reference.clone()).unwrap();
        let cfg = SampleConfig { n_steps: 5, seed, ..Default::default() };
        let out = sample_conditional(&OnePointField::new(target(48, 2)), &mask, &cfg).unwrap();
        for i in 0..out.len() {
            if obs.is_observed(i) {
                prop_assert_eq!(out.data()[i].to_bits(), reference.data()[i].to_bits());
            } else {
                prop_assert!((-1.0..=2.0).contains(&out.data()[i]));
            }
        }
    }

    #[test]
    fn power_schedule_is_monotone_and_pinned(n in 1usize..=5, p in 1.0f64..=8.0) {
        let s = power_schedule(n, p).unwrap();
        prop_assert_eq!(s.len(), n + 1);
        prop_assert_eq!(s[0], 0.0);
        prop_assert_eq!(s[n], 1.0);
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn empty_batches() {
    let out = sample_unconditional(&ZeroField, &[0, 4, 2], &SampleConfig::default()).unwrap();
    assert_eq!(out.shape(), &[0, 4, 2]);
    let mut buf = Vec::new();
    write_long_csv(&out, &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "sample_id,t_index,feature,value\n");
}
