//! The velocity field `v(x_t, t)`.
//!
//! A convolutional token embedding (plus positional and time encodings) feeds
//! a stack of velocity-field-encoder layers. Each layer runs a pre-norm
//! self-attention encoder, splits the encoder output `H` into a moving-average
//! trend and a seasonal residual, refines the seasonal part with cross
//! attention against `H`, modulates the trend with a multi-scale convolutional
//! gate, and hands `H − S − T` to the next layer. The velocity is a linear
//! projection of the seasonal and trend terms summed over all layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{scaled_uniform, Bound, LayerNorm, Linear, ParamId, ParamStore};
use crate::rng::{self, tags};
use crate::tensorgrad::{Padding, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateActivation {
    Sigmoid,
    Identity,
}

/// What the output head predicts. `Endpoint` predicts the data endpoint `u ≈ x₁`
/// and returns `v = (u − x_t) / max(1 − t, endpoint_floor)`, so the per-cell
/// `−x_t / (1 − t)` part of the velocity is exact instead of learned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Velocity,
    Endpoint,
}

/// Component switches for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub use_cross_attention: bool,
    pub use_flow_decomposition: bool,
    pub use_self_attention_encoder: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::full()
    }
}

impl Ablation {
    pub fn full() -> Self {
        Self {
            use_cross_attention: true,
            use_flow_decomposition: true,
            use_self_attention_encoder: true,
        }
    }

    pub fn no_cross_attention() -> Self {
        Self {
            use_cross_attention: false,
            ..Self::full()
        }
    }

    pub fn no_flow_decomposition() -> Self {
        Self {
            use_flow_decomposition: false,
            ..Self::full()
        }
    }

    pub fn no_encoder() -> Self {
        Self {
            use_self_attention_encoder: false,
            ..Self::full()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input channels `D_f`.
    pub features: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub decomposition_window: usize,
    pub kernel_sizes: Vec<usize>,
    pub time_embed_dim: usize,
    /// Feed-forward width as a multiple of `d_model`.
    pub ff_multiplier: usize,
    pub gate_activation: GateActivation,
    pub output: OutputKind,
    /// Lower bound on `1 − t` in the endpoint form.
    pub endpoint_floor: f64,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            features: 5,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            decomposition_window: 5,
            kernel_sizes: vec![3, 5, 7],
            time_embed_dim: 32,
            ff_multiplier: 2,
            gate_activation: GateActivation::Sigmoid,
            output: OutputKind::Endpoint,
            endpoint_floor: 0.01,
            ablation: Ablation::full(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.features == 0 {
            return bad("features must be positive".into());
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 {
            return bad("n_layers must be >= 1".into());
        }
        if self.decomposition_window % 2 == 0 {
            return bad(format!(
                "decomposition_window {} must be odd",
                self.decomposition_window
            ));
        }
        if self.kernel_sizes.is_empty() || self.kernel_sizes.iter().any(|k| k % 2 == 0) {
            return bad(format!("kernel_sizes {:?} must be non-empty and odd", self.kernel_sizes));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return bad(format!("time_embed_dim {} must be even", self.time_embed_dim));
        }
        if self.ff_multiplier == 0 {
            return bad("ff_multiplier must be positive".into());
        }
        if !(self.endpoint_floor > 0.0 && self.endpoint_floor <= 1.0) {
            return bad(format!("endpoint_floor {} must lie in (0, 1]", self.endpoint_floor));
        }
        Ok(())
    }
}

const EMBED_KERNEL: usize = 3;

#[derive(Clone, Debug)]
struct Encoder {
    ln1: LayerNorm,
    qkv: Linear,
    out: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct CrossAttention {
    query: Linear,
    key_value: Linear,
    out: Linear,
}

#[derive(Clone, Debug)]
struct Layer {
    encoder: Option<Encoder>,
    cross: Option<CrossAttention>,
    gate_kernels: Vec<ParamId>,
    gate_bias: Option<ParamId>,
}

/// Per-layer intermediates of one forward pass.
pub struct LayerTrace<'t> {
    /// Encoder output `H_i`.
    pub encoded: Var<'t>,
    /// Moving-average trend `t_i`.
    pub trend: Var<'t>,
    /// Seasonal residual `s_i = H_i − t_i`.
    pub seasonal: Var<'t>,
    /// Refined seasonal term `S_i`.
    pub refined_seasonal: Var<'t>,
    /// Modulated trend `T_i`.
    pub modulated_trend: Var<'t>,
    /// Residual `O_{i+1} = H_i − S_i − T_i` handed to the next layer.
    pub residual: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct VelocityModel {
    config: ModelConfig,
    params: ParamStore,
    embed_kernel: ParamId,
    embed_bias: ParamId,
    time1: Linear,
    time2: Linear,
    layers: Vec<Layer>,
    proj: Linear,
}

impl VelocityModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, tags::INIT);
        let mut store = ParamStore::new();
        let (f, d) = (config.features, config.d_model);
        let embed_kernel = store.add(
            "embed.kernel",
            scaled_uniform(&mut rng, &[EMBED_KERNEL, f, d], EMBED_KERNEL * f),
        );
        let embed_bias = store.add("embed.bias", Tensor::zeros(&[d]));
        let time1 = Linear::new(&mut store, &mut rng, "time.fc1", config.time_embed_dim, d);
        let time2 = Linear::new(&mut store, &mut rng, "time.fc2", d, d);
        let ab = config.ablation;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = format!("layers.{i}");
            let encoder = ab.use_self_attention_encoder.then(|| {
                let hidden = config.ff_multiplier * d;
                Encoder {
                    ln1: LayerNorm::new(&mut store, &format!("{p}.enc.ln1"), d),
                    qkv: Linear::new(&mut store, &mut rng, &format!("{p}.enc.qkv"), d, 3 * d),
                    out: Linear::new(&mut store, &mut rng, &format!("{p}.enc.out"), d, d),
                    ln2: LayerNorm::new(&mut store, &format!("{p}.enc.ln2"), d),
                    ff1: Linear::new(&mut store, &mut rng, &format!("{p}.enc.ff1"), d, hidden),
                    ff2: Linear::new(&mut store, &mut rng, &format!("{p}.enc.ff2"), hidden, d),
                }
            });
            let decompose = ab.use_flow_decomposition;
            let cross = (decompose && ab.use_cross_attention).then(|| CrossAttention {
                query: Linear::new(&mut store, &mut rng, &format!("{p}.ca.query"), d, d),
                key_value: Linear::new(&mut store, &mut rng, &format!("{p}.ca.key_value"), d, 2 * d),
                out: Linear::zeros(&mut store, &format!("{p}.ca.out"), d, d),
            });
            let mut gate_kernels = Vec::new();
            let mut gate_bias = None;
            if decompose {
                for &k in &config.kernel_sizes {
                    gate_kernels.push(store.add(
                        format!("{p}.gate.conv{k}"),
                        scaled_uniform(&mut rng, &[k, d, d], k * d * config.kernel_sizes.len()),
                    ));
                }
                gate_bias = Some(store.add(format!("{p}.gate.bias"), Tensor::zeros(&[d])));
            }
            layers.push(Layer {
                encoder,
                cross,
                gate_kernels,
                gate_bias,
            });
        }
        let proj = Linear::zeros(&mut store, "proj", d, f);
        Ok(Self {
            config,
            params: store,
            embed_kernel,
            embed_bias,
            time1,
            time2,
            layers,
            proj,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Overwrites every parameter with `U(−scale, scale)` noise. Used to probe
    /// the network away from its zero-initialized output heads.
    pub fn randomize_parameters(&mut self, seed: u64, scale: f64) {
        let mut r = rng::stream(seed, tags::INIT);
        for p in self.params.values_mut() {
            for v in p.data_mut() {
                *v = scale * (2.0 * r.random::<f64>() - 1.0);
            }
        }
    }

    /// Token embedding `[B, L, D_f] → [B, L, d_model]` conditioned on one time per window.
    pub fn embed<'t>(&self, p: &Bound<'t>, x: Var<'t>, times: &[f64]) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.config.features {
            return Err(Error::dim("embed", &shape, &[0, 0, self.config.features]));
        }
        let (b, l) = (shape[0], shape[1]);
        if times.len() != b {
            return Err(Error::dim("embed (times)", &shape, &[times.len()]));
        }
        if !x.value().is_finite() {
            return Err(Error::Data("non-finite value in model input".into()));
        }
        let tape = x.tape();
        let d = self.config.d_model;
        let tokens = x
            .conv1d(p.var(self.embed_kernel), Padding::Replicate)?
            .add_bias(p.var(self.embed_bias))?;
        let pos = tape.constant(positional_encoding(b, l, d));
        let temb = tape.constant(time_features(times, self.config.time_embed_dim));
        let temb = self.time1.forward(p, temb)?.silu();
        let temb = self.time2.forward(p, temb)?;
        tokens.add(pos)?.add_per_batch(temb)
    }

    fn encode<'t>(&self, enc: &Encoder, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let normed = enc.ln1.forward(p, x)?;
        let qkv = enc.qkv.forward(p, normed)?;
        let (q, k, v) = (qkv.slice_last(0, d)?, qkv.slice_last(d, d)?, qkv.slice_last(2 * d, d)?);
        let attended = enc.out.forward(p, q.attention(k, v, heads)?)?;
        let a = x.add(attended)?;
        let hidden = enc.ff1.forward(p, enc.ln2.forward(p, a)?)?.gelu();
        a.add(enc.ff2.forward(p, hidden)?)
    }

    /// One velocity-field-encoder layer applied to its input `O_i`.
    pub fn vfe_layer<'t>(&self, index: usize, p: &Bound<'t>, input: Var<'t>) -> Result<LayerTrace<'t>> {
        let layer = &self.layers[index];
        let encoded = match &layer.encoder {
            Some(enc) => self.encode(enc, p, input)?,
            None => input,
        };
        if !self.config.ablation.use_flow_decomposition {
            let zero = encoded.tape().constant(Tensor::zeros(&encoded.shape()));
            return Ok(LayerTrace {
                encoded,
                trend: zero,
                seasonal: encoded,
                refined_seasonal: encoded,
                modulated_trend: zero,
                residual: encoded,
            });
        }
        let trend = encoded.moving_average(self.config.decomposition_window)?;
        let seasonal = encoded.sub(trend)?;
        let refined_seasonal = match &layer.cross {
            Some(ca) => {
                let d = self.config.d_model;
                let q = ca.query.forward(p, seasonal)?;
                let kv = ca.key_value.forward(p, encoded)?;
                let attended = q.attention(kv.slice_last(0, d)?, kv.slice_last(d, d)?, self.config.n_heads)?;
                ca.out.forward(p, attended)?.add(seasonal)?
            }
            None => seasonal,
        };
        let mut gate: Option<Var<'t>> = None;
        for &k in &layer.gate_kernels {
            let c = refined_seasonal.conv1d(p.var(k), Padding::Zero)?;
            gate = Some(match gate {
                None => c,
                Some(g) => g.add(c)?,
            });
        }
        let bias = layer.gate_bias.expect("gate bias exists with decomposition");
        let gate = gate.expect("at least one gate kernel").add_bias(p.var(bias))?;
        let gate = match self.config.gate_activation {
            GateActivation::Sigmoid => gate.sigmoid(),
            GateActivation::Identity => gate,
        };
        let modulated_trend = gate.mul(trend)?;
        let residual = encoded.sub(refined_seasonal)?.sub(modulated_trend)?;

        #[cfg(debug_assertions)]
        {
            let h = encoded.value();
            let recomposed = seasonal.value().zip_map(&trend.value(), |a, b| a + b)?;
            debug_assert!(h.max_abs_diff(&recomposed) <= 1e-12 * (1.0 + max_abs(&h)));
            let total = residual
                .value()
                .zip_map(&refined_seasonal.value(), |a, b| a + b)?
                .zip_map(&modulated_trend.value(), |a, b| a + b)?;
            debug_assert!(h.max_abs_diff(&total) <= 1e-10 * (1.0 + max_abs(&h)));
        }

        Ok(LayerTrace {
            encoded,
            trend,
            seasonal,
            refined_seasonal,
            modulated_trend,
            residual,
        })
    }

    /// Full forward pass with one flow time per window.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, times: &[f64]) -> Result<Var<'t>> {
        Ok(self.forward_traced(p, x, times)?.0)
    }

    /// Forward pass that also returns every layer's intermediates.
    pub fn forward_traced<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        times: &[f64],
    ) -> Result<(Var<'t>, Vec<LayerTrace<'t>>)> {
        if let Some(t) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Contract(format!("flow time {t} outside [0, 1]")));
        }
        let mut state = self.embed(p, x, times)?;
        let mut total: Option<Var<'t>> = None;
        let mut traces = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let trace = self.vfe_layer(i, p, state)?;
            if !trace.residual.value().is_finite() || !trace.refined_seasonal.value().is_finite() {
                return Err(Error::Numeric(format!("non-finite activation in layer {i}")));
            }
            let contribution = trace.refined_seasonal.add(trace.modulated_trend)?;
            total = Some(match total {
                None => contribution,
                Some(acc) => acc.add(contribution)?,
            });
            state = trace.residual;
            traces.push(trace);
        }
        let mut out = self.proj.forward(p, total.expect("n_layers >= 1"))?;
        if self.config.output == OutputKind::Endpoint {
            let shape = x.shape();
            let row = shape[1] * shape[2];
            let floor = self.config.endpoint_floor;
            let inv = Tensor::from_fn(&shape, |i| 1.0 / (1.0 - times[i / row]).max(floor));
            out = out.sub(x)?.mul(x.tape().constant(inv))?;
        }
        if !out.value().is_finite() {
            return Err(Error::Numeric("non-finite velocity at the output projection".into()));
        }
        Ok((out, traces))
    }

    /// Inference-only velocity evaluation.
    pub fn velocity(&self, x: &Tensor, times: &[f64]) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let xv = tape.constant(x.clone());
        Ok(self.forward(&p, xv, times)?.value())
    }
}

#[cfg(debug_assertions)]
fn max_abs(t: &Tensor) -> f64 {
    t.data().iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Fixed sinusoidal position code, repeated over the batch.
fn positional_encoding(b: usize, l: usize, d: usize) -> Tensor {
    let mut row = vec![0.0; l * d];
    for pos in 0..l {
        for i in 0..d {
            let freq = (-(10_000f64.ln()) * (2 * (i / 2)) as f64 / d as f64).exp();
            let angle = pos as f64 * freq;
            row[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    let data: Vec<f64> = std::iter::repeat_n(row, b).flatten().collect();
    Tensor::new(&[b, l, d], data).expect("positional shape")
}

/// Sinusoidal features of the flow time, `[B, dim]`.
pub fn time_features(times: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(times.len() * dim);
    for &t in times {
        let scaled = 1000.0 * t;
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((scaled * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((scaled * freq).cos());
        }
    }
    Tensor::new(&[times.len(), dim], data).expect("time feature shape")
}
