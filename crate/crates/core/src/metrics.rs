//! Synthetic-vs-real evaluation: discriminative, predictive, correlational and
//! Context-FID scores, conditional MSE, and PCA projections for plotting.
//!
//! All corpora are compared in the space they are given in; callers pass both
//! sides through the same scaler.

use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{ObservationMask, SeriesBatch};
use crate::error::{Error, Result};
use crate::nn::{Adam, Bound, Gru, Linear, ParamStore};
use crate::rng::{self, tags, StreamRng};
use crate::tensorgrad::{Tape, Tensor, Var};

/// Diagonal loading added to embedding covariances before the square root.
pub const COVARIANCE_SHRINKAGE: f64 = 1e-6;

const EVAL_CHUNK: usize = 512;
const JITTER: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub repeats: usize,
    /// Width of the recurrent discriminator / predictor.
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub embed_dim: usize,
    pub embed_hidden: usize,
    pub embed_steps: usize,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            repeats: 5,
            hidden: 24,
            steps: 500,
            batch_size: 128,
            learning_rate: 1e-3,
            embed_dim: 16,
            embed_hidden: 32,
            embed_steps: 500,
            seed: 0,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 || self.hidden == 0 || self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "metric repeats, hidden, steps and batch_size must be >= 1".into(),
            ));
        }
        if self.embed_dim == 0 || self.embed_hidden == 0 || self.embed_steps == 0 {
            return Err(Error::Config("embedder sizes and steps must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Discriminative,
    Predictive,
    Correlational,
    ContextFid,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::Discriminative,
        Metric::Predictive,
        Metric::Correlational,
        Metric::ContextFid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Discriminative => "discriminative",
            Metric::Predictive => "predictive",
            Metric::Correlational => "correlational",
            Metric::ContextFid => "context_fid",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Metric::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown metric {s:?}; valid metrics: {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub repeats: usize,
    pub fingerprint: String,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "metric,mean,std,repeats,fingerprint";

    /// Mean and sample standard deviation (0 for a single repeat).
    pub fn from_values(metric: impl Into<String>, values: &[f64], fingerprint: impl Into<String>) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() >= 2 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            metric: metric.into(),
            mean,
            std,
            repeats: values.len(),
            fingerprint: fingerprint.into(),
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8e},{:.8e},{},{}",
            self.metric, self.mean, self.std, self.repeats, self.fingerprint
        )
    }
}

pub fn reports_to_csv(reports: &[MetricReport]) -> String {
    let mut out = format!("{}\n", MetricReport::CSV_HEADER);
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Stable 64-bit FNV-1a digest, hex encoded.
pub fn fingerprint(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn check_pair(real: &Tensor, synth: &Tensor) -> Result<()> {
    if real.rank() != 3 || synth.rank() != 3 || real.shape()[1..] != synth.shape()[1..] {
        return Err(Error::dim("metric corpora", real.shape(), synth.shape()));
    }
    if real.is_empty() || synth.is_empty() {
        return Err(Error::Data("metric corpora must be nonempty".into()));
    }
    Ok(())
}

/// Minimizes `loss` with Adam, returning the last loss value.
fn fit(
    store: &mut ParamStore,
    steps: usize,
    lr: f64,
    mut loss: impl for<'t> FnMut(&Bound<'t>) -> Result<Var<'t>>,
) -> Result<f64> {
    let mut opt = Adam::with_lr(lr);
    let mut last = f64::NAN;
    for step in 0..steps {
        let tape = Tape::new();
        let p = store.bind(&tape, true);
        let l = loss(&p)?;
        last = l.item();
        if !last.is_finite() {
            return Err(Error::Numeric(format!("metric model loss became {last} at step {step}")));
        }
        tape.backward(l)?;
        let grads = p.grads();
        opt.step(store.values_mut(), &grads);
    }
    Ok(last)
}

/// Runs `f` over `x` in leading-axis chunks without tracking gradients and
/// concatenates the outputs.
fn infer(
    store: &ParamStore,
    x: &Tensor,
    f: impl for<'t> Fn(&Bound<'t>, Var<'t>) -> Result<Var<'t>>,
) -> Result<Tensor> {
    let n = x.shape()[0];
    let mut parts = Vec::new();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        parts.push(f(&p, tape.constant(x.gather_leading(&idx)))?.value());
    }
    Tensor::concat_leading(&parts)
}

fn random_indices(rng: &mut StreamRng, n: usize, count: usize) -> Vec<usize> {
    (0..count).map(|_| rng.random_range(0..n)).collect()
}

/// Two stacked GRU layers with a linear read-out.
#[derive(Clone, Copy, Debug)]
struct Recurrent {
    first: Gru,
    second: Gru,
    head: Linear,
}

impl Recurrent {
    fn new(store: &mut ParamStore, rng: &mut StreamRng, inp: usize, hidden: usize, out: usize) -> Self {
        Self {
            first: Gru::new(store, rng, "gru0", inp, hidden),
            second: Gru::new(store, rng, "gru1", hidden, hidden),
            head: Linear::new(store, rng, "head", hidden, out),
        }
    }

    fn states<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.second.forward(p, self.first.forward(p, x)?)
    }

    /// Per-step outputs `[B, L, out]`.
    fn sequence<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.head.forward(p, self.states(p, x)?)
    }

    /// Output read from the final state, `[B, out]`.
    fn last<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let l = x.shape()[1];
        self.head.forward(p, self.states(p, x)?.select_time(l - 1)?)
    }
}

fn train_count(n: usize) -> usize {
    ((0.8 * n as f64).round() as usize).clamp(1, n - 1)
}

/// One repeat of the post-hoc classifier score `|accuracy − 0.5|`.
pub fn discriminative_once(real: &Tensor, synth: &Tensor, config: &MetricConfig, seed: u64) -> Result<f64> {
    check_pair(real, synth)?;
    let (nr, ns) = (real.shape()[0], synth.shape()[0]);
    if nr < 4 || ns < 4 {
        return Err(Error::Data(format!(
            "discriminative score needs at least 4 windows per corpus, got {nr} real and {ns} synthetic"
        )));
    }
    let mut rng = rng::stream(seed, tags::METRIC);
    let pr = rng::permutation(&mut rng, nr);
    let ps = if ns == nr { pr.clone() } else { rng::permutation(&mut rng, ns) };
    let (tr, ts) = (train_count(nr), train_count(ns));
    let split = |lo: usize, hi: usize, hs: usize, ls: usize| -> Result<(Tensor, Vec<f64>)> {
        let x = Tensor::concat_leading(&[real.gather_leading(&pr[lo..hi]), synth.gather_leading(&ps[ls..hs])])?;
        let mut y = vec![1.0; hi - lo];
        y.extend(vec![0.0; hs - ls]);
        Ok((x, y))
    };
    let (x_train, y_train) = split(0, tr, ts, 0)?;
    let (x_test, y_test) = split(tr, nr, ns, ts)?;

    let mut store = ParamStore::new();
    let model = Recurrent::new(&mut store, &mut rng, real.shape()[2], config.hidden, 1);
    let n_train = y_train.len();
    fit(&mut store, config.steps, config.learning_rate, |p| {
        let idx = random_indices(&mut rng, n_train, config.batch_size);
        let tape = p.var_tape();
        let x = tape.constant(x_train.gather_leading(&idx));
        let y = tape.constant(Tensor::new(&[idx.len(), 1], idx.iter().map(|&i| y_train[i]).collect())?);
        let z = model.last(p, x)?;
        // binary cross-entropy on logits: softplus(z) − y·z
        Ok(z.softplus().sub(z.mul(y)?)?.mean())
    })?;
    let logits = infer(&store, &x_test, |p, x| model.last(p, x))?;
    let correct = logits
        .data()
        .iter()
        .zip(&y_test)
        .filter(|(z, y)| (**z > 0.0) == (**y > 0.5))
        .count();
    let acc = correct as f64 / y_test.len() as f64;
    Ok((acc - 0.5).abs())
}

/// `values[:, times, features]`.
fn slice_series(x: &Tensor, times: std::ops::Range<usize>, features: &[usize]) -> Tensor {
    let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut data = Vec::with_capacity(b * times.len() * features.len());
    for i in 0..b {
        for t in times.clone() {
            for &f in features {
                data.push(x.data()[(i * l + t) * d + f]);
            }
        }
    }
    let _ = d;
    Tensor::new(&[b, times.len(), features.len()], data).expect("slice shape")
}

/// One repeat of train-on-synthetic / test-on-real next-step MAE, rotating the
/// target over every feature and averaging.
pub fn predictive_once(real: &Tensor, synth: &Tensor, config: &MetricConfig, seed: u64) -> Result<f64> {
    check_pair(real, synth)?;
    let (l, d) = (real.shape()[1], real.shape()[2]);
    if l < 2 {
        return Err(Error::Data(format!("predictive score needs window length >= 2, got {l}")));
    }
    let mut rng = rng::stream(seed, tags::METRIC);
    let mut total = 0.0;
    for target in 0..d {
        let inputs: Vec<usize> = if d == 1 { vec![0] } else { (0..d).filter(|&f| f != target).collect() };
        let x_syn = slice_series(synth, 0..l - 1, &inputs);
        let y_syn = slice_series(synth, 1..l, &[target]);
        let x_real = slice_series(real, 0..l - 1, &inputs);
        let y_real = slice_series(real, 1..l, &[target]);
        let mut store = ParamStore::new();
        let model = Recurrent::new(&mut store, &mut rng, inputs.len(), config.hidden, 1);
        let n = x_syn.shape()[0];
        fit(&mut store, config.steps, config.learning_rate, |p| {
            let idx = random_indices(&mut rng, n, config.batch_size);
            let tape = p.var_tape();
            let pred = model.sequence(p, tape.constant(x_syn.gather_leading(&idx)))?;
            Ok(pred.sub(tape.constant(y_syn.gather_leading(&idx)))?.abs().mean())
        })?;
        let pred = infer(&store, &x_real, |p, x| model.sequence(p, x))?;
        total += pred.data().iter().zip(y_real.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64;
    }
    Ok(total / d as f64)
}

/// Feature means and population variances over all windows and timesteps.
fn feature_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let d = x.shape()[2];
    let n = (x.len() / d) as f64;
    let mut mean = vec![0.0; d];
    for row in x.data().chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for row in x.data().chunks(d) {
        for f in 0..d {
            var[f] += (row[f] - mean[f]).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

/// Variance indistinguishable from rounding noise around `mean`.
fn is_constant(mean: f64, var: f64) -> bool {
    var.sqrt() <= 1e-12 * mean.abs().max(1.0)
}

fn correlation(x: &Tensor, features: &[usize]) -> DMatrix<f64> {
    let d = x.shape()[2];
    let (mean, var) = feature_moments(x);
    let k = features.len();
    let n = (x.len() / d) as f64;
    let mut c = DMatrix::zeros(k, k);
    for row in x.data().chunks(d) {
        for (a, &fa) in features.iter().enumerate() {
            for (b, &fb) in features.iter().enumerate().skip(a) {
                c[(a, b)] += (row[fa] - mean[fa]) * (row[fb] - mean[fb]) / n;
            }
        }
    }
    for a in 0..k {
        for b in a..k {
            let r = c[(a, b)] / (var[features[a]] * var[features[b]]).sqrt();
            c[(a, b)] = r;
            c[(b, a)] = r;
        }
    }
    c
}

/// Mean absolute entrywise difference between feature correlation matrices.
/// Features with zero variance in either corpus are dropped with a warning.
pub fn correlational(real: &Tensor, synth: &Tensor) -> Result<f64> {
    check_pair(real, synth)?;
    let d = real.shape()[2];
    if d < 2 {
        return Err(Error::Contract(format!("correlational score needs >= 2 features, got {d}")));
    }
    let (mr, vr) = feature_moments(real);
    let (ms, vs) = feature_moments(synth);
    let kept: Vec<usize> = (0..d)
        .filter(|&f| !is_constant(mr[f], vr[f]) && !is_constant(ms[f], vs[f]))
        .collect();
    if kept.len() < d {
        log::warn!(
            "correlational score: dropping zero-variance features {:?}",
            (0..d).filter(|f| !kept.contains(f)).collect::<Vec<_>>()
        );
    }
    if kept.is_empty() {
        return Err(Error::Data("every feature has zero variance".into()));
    }
    let diff = correlation(real, &kept) - correlation(synth, &kept);
    Ok(diff.abs().mean())
}

/// Sequence autoencoder with a contrastive objective, used to embed windows
/// for Context-FID. Trained on real data only.
#[derive(Clone, Debug)]
pub struct EmbedderModel {
    store: ParamStore,
    encoder: Gru,
    project: Linear,
    decoder: Linear,
    length: usize,
    features: usize,
    dim: usize,
}

impl EmbedderModel {
    pub fn train(real: &Tensor, config: &MetricConfig, seed: u64) -> Result<Self> {
        if real.rank() != 3 || real.shape()[0] == 0 {
            return Err(Error::dim("embedder", real.shape(), &[0, 0, 0]));
        }
        let (n, l, d) = (real.shape()[0], real.shape()[1], real.shape()[2]);
        let mut rng = rng::stream(seed, tags::METRIC + 1);
        let mut store = ParamStore::new();
        let encoder = Gru::new(&mut store, &mut rng, "enc", d, config.embed_hidden);
        let project = Linear::new(&mut store, &mut rng, "proj", config.embed_hidden, config.embed_dim);
        let decoder = Linear::new(&mut store, &mut rng, "dec", config.embed_dim, l * d);
        let mut model = Self {
            store: ParamStore::new(),
            encoder,
            project,
            decoder,
            length: l,
            features: d,
            dim: config.embed_dim,
        };
        let batch = config.batch_size.min(64).min(n).max(2);
        let eye = Tensor::from_fn(&[batch, batch], |i| if i / batch == i % batch { 1.0 } else { 0.0 });
        let ones = Tensor::ones(&[config.embed_dim, 1]);
        let m = &model;
        fit(&mut store, config.embed_steps, config.learning_rate, |p| {
            let idx = random_indices(&mut rng, n, batch);
            let x = real.gather_leading(&idx);
            let view_a = x.zip_map(&rng::normal_tensor(&mut rng, x.shape()), |v, z| v + JITTER * z)?;
            let view_b = x.zip_map(&rng::normal_tensor(&mut rng, x.shape()), |v, z| v + JITTER * z)?;
            let tape = p.var_tape();
            let za = m.encode(p, tape.constant(view_a))?;
            let zb = m.encode(p, tape.constant(view_b))?;
            let recon = m.decoder.forward(p, za)?.reshape(&[batch, l, d])?;
            let rec = recon.sub(tape.constant(x))?.square().mean();
            // InfoNCE with negative squared distance logits; the |za_i|² term is
            // constant along each row and cancels in the softmax.
            let norms = zb.square().matmul(tape.constant(ones.clone()))?.reshape(&[batch])?;
            let logits = za.matmul(zb.transpose()?)?.scale(2.0).add_bias(norms.scale(-1.0))?;
            let nce = logits
                .log_softmax()
                .mul(tape.constant(eye.clone()))?
                .sum()
                .scale(-1.0 / batch as f64);
            Ok(rec.add(nce.scale(0.1))?)
        })?;
        model.store = store;
        Ok(model)
    }

    fn encode<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.encoder.forward(p, x)?.select_time(self.length - 1)?;
        self.project.forward(p, h)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `[N, L, D]` windows to `[N, dim]` embeddings; deterministic.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 3 || x.shape()[1..] != [self.length, self.features] {
            return Err(Error::dim("embed", x.shape(), &[0, self.length, self.features]));
        }
        if x.shape()[0] == 0 {
            return Ok(Tensor::zeros(&[0, self.dim]));
        }
        infer(&self.store, x, |p, v| self.encode(p, v))
    }
}

/// Sample mean and (unbiased) covariance of the rows of `points[N, k]`.
pub fn gaussian_fit(points: &Tensor) -> (DVector<f64>, DMatrix<f64>) {
    let (n, k) = (points.shape()[0], points.shape()[1]);
    let m = DMatrix::from_row_slice(n, k, points.data());
    let mean = DVector::from_iterator(k, (0..k).map(|j| m.column(j).mean()));
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let denom = (n.max(2) - 1) as f64;
    let cov = centered.transpose() * &centered / denom;
    (mean, cov)
}

/// Eigenvalue-clipped square root of a symmetric matrix.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2 (Σ₁Σ₂)^{1/2})`, with the trace of the square
/// root evaluated as `tr((Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})`.
pub fn frechet_distance(
    mu1: &DVector<f64>,
    cov1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    cov2: &DMatrix<f64>,
) -> Result<f64> {
    let k = mu1.len();
    if mu2.len() != k || cov1.shape() != (k, k) || cov2.shape() != (k, k) {
        return Err(Error::dim("frechet_distance", &[k], &[mu2.len()]));
    }
    let s1 = psd_sqrt(cov1);
    let inner = &s1 * cov2 * &s1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let fid = (mu1 - mu2).norm_squared() + cov1.trace() + cov2.trace() - 2.0 * cross;
    if !fid.is_finite() {
        return Err(Error::Numeric("Frechet distance is not finite".into()));
    }
    Ok(fid.max(0.0))
}

/// Fréchet distance between Gaussian fits of two embedding clouds, with
/// [`COVARIANCE_SHRINKAGE`] on both covariance diagonals.
pub fn embedding_distance(real: &Tensor, synth: &Tensor) -> Result<f64> {
    let k = real.shape()[1];
    for (name, e) in [("real", real), ("synthetic", synth)] {
        if e.shape()[0] <= k {
            log::warn!(
                "context-fid: {} {name} embeddings for dimension {k}; covariance is rank deficient, relying on shrinkage",
                e.shape()[0]
            );
        }
    }
    let (m1, c1) = gaussian_fit(real);
    let (m2, c2) = gaussian_fit(synth);
    let shrink = DMatrix::identity(k, k) * COVARIANCE_SHRINKAGE;
    frechet_distance(&m1, &(c1 + &shrink), &m2, &(c2 + &shrink))
}

pub fn context_fid(real: &Tensor, synth: &Tensor, embedder: &EmbedderModel) -> Result<f64> {
    check_pair(real, synth)?;
    embedding_distance(&embedder.embed(real)?, &embedder.embed(synth)?)
}

/// Mean squared error over cells the mask marks as hidden.
pub fn conditional_mse(output: &Tensor, reference: &Tensor, mask: &ObservationMask) -> Result<f64> {
    if output.shape() != reference.shape() {
        return Err(Error::dim("conditional_mse", output.shape(), reference.shape()));
    }
    if mask.shape() != output.shape() {
        return Err(Error::dim("conditional_mse (mask)", mask.shape(), output.shape()));
    }
    let hidden = mask.hidden_count();
    if hidden == 0 {
        return Err(Error::Contract("conditional MSE needs at least one hidden cell".into()));
    }
    let sse: f64 = output
        .data()
        .iter()
        .zip(reference.data())
        .zip(mask.observed())
        .filter(|(_, &o)| !o)
        .map(|((a, b), _)| (a - b).powi(2))
        .sum();
    Ok(sse / hidden as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionTable {
    /// Principal-axis variances of the real corpus, descending.
    pub variances: Vec<f64>,
    /// `(source, coordinates)` with source `real` or `synthetic`.
    pub rows: Vec<(String, Vec<f64>)>,
}

impl ProjectionTable {
    pub fn to_csv(&self) -> String {
        let k = self.variances.len();
        let mut out = String::from("source");
        for i in 1..=k {
            let _ = write!(out, ",pc{i}");
        }
        out.push('\n');
        for (source, coords) in &self.rows {
            out.push_str(source);
            for c in coords {
                let _ = write!(out, ",{c:.8e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn coords(&self, source: &str) -> Vec<&[f64]> {
        self.rows
            .iter()
            .filter(|(s, _)| s == source)
            .map(|(_, c)| c.as_slice())
            .collect()
    }
}

/// Fits `k` principal axes on flattened real windows and projects both corpora.
pub fn pca_project(real: &Tensor, synth: &Tensor, k: usize) -> Result<ProjectionTable> {
    check_pair(real, synth)?;
    let m = real.shape()[1] * real.shape()[2];
    if k == 0 || k > m {
        return Err(Error::Contract(format!("cannot project {m}-dimensional windows onto {k} components")));
    }
    let flat = real.clone().reshape(&[real.shape()[0], m])?;
    let (mean, cov) = gaussian_fit(&flat);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axes: Vec<DVector<f64>> = order[..k]
        .iter()
        .map(|&i| {
            let v = eig.eigenvectors.column(i).into_owned();
            // sign convention: largest-magnitude loading is positive
            let pivot = v.iter().cloned().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(1.0);
            if pivot < 0.0 { -v } else { v }
        })
        .collect();
    let mut rows = Vec::new();
    for (source, x) in [("real", real), ("synthetic", synth)] {
        for w in x.data().chunks(m) {
            let centered = DVector::from_row_slice(w) - &mean;
            rows.push((source.to_string(), axes.iter().map(|a| a.dot(&centered)).collect()));
        }
    }
    Ok(ProjectionTable {
        variances: order[..k].iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect(),
        rows,
    })
}

fn single_run(metric: Metric, real: &Tensor, synth: &Tensor, config: &MetricConfig, seed: u64) -> Result<f64> {
    match metric {
        Metric::Discriminative => discriminative_once(real, synth, config, seed),
        Metric::Predictive => predictive_once(real, synth, config, seed),
        Metric::Correlational => correlational(real, synth),
        Metric::ContextFid => {
            check_pair(real, synth)?;
            let embedder = EmbedderModel::train(real, config, seed)?;
            context_fid(real, synth, &embedder)
        }
    }
}

/// Runs `config.repeats` independent repeats (seeds `config.seed + r`) in
/// parallel and summarizes them.
pub fn evaluate(metric: Metric, real: &SeriesBatch, synth: &SeriesBatch, config: &MetricConfig) -> Result<MetricReport> {
    config.validate()?;
    let (r, s) = (&real.values, &synth.values);
    check_pair(r, s)?;
    let values: Vec<Result<f64>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..config.repeats)
            .map(|rep| scope.spawn(move || single_run(metric, r, s, config, config.seed.wrapping_add(rep as u64))))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Numeric("metric worker panicked".into()))))
            .collect()
    });
    let values = values.into_iter().collect::<Result<Vec<_>>>()?;
    let print = fingerprint(&format!("{}|{config:?}|{:?}|{:?}", metric.name(), r.shape(), s.shape()));
    Ok(MetricReport::from_values(metric.name(), &values, print))
}
