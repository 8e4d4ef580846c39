use std::f64::consts::PI;
use std::io::Write;

use proptest::prelude::*;
use timeflow_core::datapipe::*;
use timeflow_core::Tensor;

/// Index of the largest DFT magnitude among bins `0..=n/2`, by direct summation.
fn dft_peak(x: &[f64]) -> usize {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (j, v) in x.iter().enumerate() {
                let a = -2.0 * PI * (k * j) as f64 / n as f64;
                re += (v - mean) * a.cos();
                im += (v - mean) * a.sin();
            }
            (k, re * re + im * im)
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
        .0
}

fn channel(batch: &SeriesBatch, w: usize, j: usize) -> Vec<f64> {
    let (l, d) = (batch.length(), batch.features());
    (0..l).map(|t| batch.values.data()[(w * l + t) * d + j]).collect()
}

#[test]
fn fft_peak_recovers_drawn_frequency() {
    // cycles per window in [0, 1] at the default length
    let (batch, draws) = generate_sines_with(50, 24, 3, 9, SinesParams::wide()).unwrap();
    for w in 0..50 {
        for j in 0..3 {
            let (eta, _) = draws[w * 3 + j];
            let peak = dft_peak(&channel(&batch, w, j)) as f64;
            assert!((peak - eta).abs() <= 1.0, "window {w} channel {j}: peak {peak}, eta {eta}");
        }
    }
    // a wider band on longer windows exercises bins away from DC
    let params = SinesParams {
        cycles: (2.0, 20.0),
        phase: (-PI, PI),
    };
    let (batch, draws) = generate_sines_with(50, 128, 2, 10, params).unwrap();
    for w in 0..50 {
        for j in 0..2 {
            let (eta, _) = draws[w * 2 + j];
            let peak = dft_peak(&channel(&batch, w, j)) as f64;
            assert!((peak - eta).abs() <= 1.0, "peak {peak}, eta {eta}");
        }
    }
}

#[test]
fn sines_default_ranges_are_narrow_band() {
    let (batch, draws) = generate_sines_with(200, 24, 5, 1, SinesParams::default()).unwrap();
    assert!(batch.values.data().iter().all(|v| (0.0..=1.0).contains(v)));
    for (eta, theta) in draws {
        // angular frequency in [0, 0.1] rad/step
        let omega = 2.0 * PI * eta / 24.0;
        assert!((0.0..=0.1 + 1e-12).contains(&omega) && (0.0..=0.1).contains(&theta));
    }
}

proptest! {
    #[test]
    fn scaling_round_trips(rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 2..40)) {
        let flat: Vec<f64> = rows.concat();
        let scaler = Scaler::fit(&flat, 3);
        let x = Tensor::new(&[1, rows.len(), 3], flat).unwrap();
        let scaled = scaler.scale(&x);
        prop_assert!(scaled.data().iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));
        prop_assert!(scaler.unscale(&scaled).max_abs_diff(&x) <= 1e-10 * 1e3);
        prop_assert!(scaler.scale(&scaler.unscale(&scaled)).max_abs_diff(&scaled) <= 1e-10);
    }

    #[test]
    fn csv_window_count_formula(rows in 2usize..60, length in 2usize..30, stride in 1usize..5) {
        prop_assume!(rows >= length);
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "a,b").unwrap();
        for r in 0..rows {
            writeln!(f, "{},{}", r, (r * r) % 7).unwrap();
        }
        f.flush().unwrap();
        let spec = DatasetSpec {
            source: DataSource::Csv { path: f.path().into() },
            window_length: length,
            stride,
            feature_count: 2,
            split_fraction: 0.8,
            seed: 0,
        };
        let batch = spec.load().unwrap();
        prop_assert_eq!(batch.windows(), (rows - length) / stride + 1);
        prop_assert_eq!(batch.windows(), window_count(rows, length, stride));
        // window w starts at row w·stride
        let raw = batch.unscaled();
        for w in 0..batch.windows() {
            let first = raw.data()[w * length * 2];
            prop_assert!((first - (w * stride) as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn split_is_a_partition(n in 2usize..60, fraction in 0.05f64..0.95, seed in 0u64..100) {
        let batch = generate_sines(n, 4, 1, seed).unwrap();
        let (a, b) = split(&batch, fraction, seed).unwrap();
        prop_assert_eq!(a.windows() + b.windows(), n);
        prop_assert_eq!(a.windows(), (fraction * n as f64).round() as usize);
        let mut rows: Vec<Vec<u64>> = a.values.data().chunks(4).chain(b.values.data().chunks(4))
            .map(|w| w.iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut orig: Vec<Vec<u64>> = batch.values.data().chunks(4)
            .map(|w| w.iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort();
        orig.sort();
        prop_assert_eq!(rows, orig);
        let (a2, _) = split(&batch, fraction, seed).unwrap();
        prop_assert_eq!(a.values, a2.values);
    }

    #[test]
    fn generators_are_pure(seed in 0u64..1000) {
        prop_assert_eq!(generate_sines(3, 6, 2, seed).unwrap(), generate_sines(3, 6, 2, seed).unwrap());
        let shape = [2, 8, 2];
        let m = MaskMode::Imputation { ratio: 0.4 };
        prop_assert_eq!(make_condition_mask(&shape, m, seed).unwrap(), make_condition_mask(&shape, m, seed).unwrap());
    }
}

#[test]
fn imputation_ratio_limits() {
    let mask = make_condition_mask(&[1, 100, 100], MaskMode::Imputation { ratio: 0.9 }, 3).unwrap();
    let frac = 1.0 - mask.hidden_count() as f64 / 1e4;
    assert!((frac - 0.1).abs() <= 0.01, "{frac}");
    let mask = make_condition_mask(&[1, 100, 100], MaskMode::Imputation { ratio: 1e-9 }, 3).unwrap();
    assert_eq!(mask.hidden_count(), 0);
}

#[test]
fn forecast_mask_on_48_steps() {
    let mask = make_condition_mask(&[1, 48, 1], MaskMode::Forecast { horizon: 12 }, 0).unwrap();
    assert!((0..36).all(|t| mask.is_observed(t)));
    assert!((36..48).all(|t| !mask.is_observed(t)));
}
