//! Parameter storage, small layers and the optimizer shared by the velocity
//! model and the metric networks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensorgrad::{Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered, named parameter table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Replaces every value from a `(name, tensor)` list. Names, order and
    /// shapes must match exactly.
    pub fn load(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.values.len() {
            return Err(Error::Data(format!(
                "parameter table has {} entries, model expects {}",
                entries.len(),
                self.values.len()
            )));
        }
        for (i, (name, value)) in entries.into_iter().enumerate() {
            if name != self.names[i] {
                return Err(Error::Data(format!(
                    "parameter {i} is named {name}, model expects {}",
                    self.names[i]
                )));
            }
            if value.shape() != self.values[i].shape() {
                return Err(Error::dim("parameter load", self.values[i].shape(), value.shape()));
            }
            self.values[i] = value;
        }
        Ok(())
    }

    /// Records every parameter on `tape`; tracked when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        Bound {
            vars: self
                .values
                .iter()
                .map(|v| tape.leaf(v.clone(), trainable))
                .collect(),
        }
    }
}

impl ParamStore {
    /// Uses caller-recorded variables in place of the stored values; shapes
    /// must match the store entry by entry.
    pub fn bind_with<'t>(&self, vars: Vec<Var<'t>>) -> Result<Bound<'t>> {
        if vars.len() != self.values.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter variables, got {}",
                self.values.len(),
                vars.len()
            )));
        }
        for (i, v) in vars.iter().enumerate() {
            if v.shape() != self.values[i].shape() {
                return Err(Error::Contract(format!(
                    "parameter {} has shape {:?}, got {:?}",
                    self.names[i],
                    self.values[i].shape(),
                    v.shape()
                )));
            }
        }
        Ok(Bound { vars })
    }
}

/// Parameters recorded on one tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Tape the parameters live on.
    pub fn var_tape(&self) -> &'t Tape {
        self.vars.first().expect("bound parameter set is empty").tape()
    }

    /// Gradients in store order; parameters the loss never reached get zeros.
    pub fn grads(&self) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect()
    }
}

/// Uniform initialization with variance `1 / fan_in`.
pub fn scaled_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (3.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| bound * (2.0 * rng.random::<f64>() - 1.0))
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, inp: usize, out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), scaled_uniform(rng, &[inp, out], inp));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out]));
        Self { weight, bias }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, inp: usize, out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[inp, out]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out]));
        Self { weight, bias }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(p.var(self.weight))?.add_bias(p.var(self.bias))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[width])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(p.var(self.gain), p.var(self.bias))
    }
}

/// Single GRU layer with PyTorch gate ordering (reset, update, new).
#[derive(Clone, Copy, Debug)]
pub struct Gru {
    input: Linear,
    hidden: Linear,
    width: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, inp: usize, width: usize) -> Self {
        Self {
            input: Linear::new(store, rng, &format!("{name}.ih"), inp, 3 * width),
            hidden: Linear::new(store, rng, &format!("{name}.hh"), width, 3 * width),
            width,
        }
    }

    /// Runs over `x[B, L, C]`, returning every hidden state as `[B, L, width]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let (b, l) = (shape[0], shape[1]);
        let w = self.width;
        let xg = self.input.forward(p, x)?;
        let mut h = x.tape().constant(Tensor::zeros(&[b, w]));
        let mut states = Vec::with_capacity(l);
        for t in 0..l {
            let xt = xg.select_time(t)?;
            let hg = self.hidden.forward(p, h)?;
            let r = xt.slice_last(0, w)?.add(hg.slice_last(0, w)?)?.sigmoid();
            let z = xt.slice_last(w, w)?.add(hg.slice_last(w, w)?)?.sigmoid();
            let n = xt
                .slice_last(2 * w, w)?
                .add(r.mul(hg.slice_last(2 * w, w)?)?)?
                .tanh();
            // h' = (1 - z) n + z h = n + z (h - n)
            h = n.add(z.mul(h.sub(n)?)?)?;
            states.push(h);
        }
        Var::stack_time(&states)
    }
}

/// Adaptive-moment optimizer with optional global gradient-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 clip; `<= 0` disables.
    pub clip: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, clip: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            clip,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_lr(lr: f64) -> Self {
        Self::new(lr, 0.9, 0.999, 1e-8, 0.0)
    }

    /// Applies one update and returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> f64 {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let factor = if self.clip > 0.0 && norm > self.clip {
            self.clip / norm
        } else {
            1.0
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gr)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gr = gr * factor;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gr;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gr * gr;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        norm
    }
}
