//! A small MLP encoder + projector with hand-written backpropagation and an
//! Adam optimizer with decoupled weight decay.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{rng, Error, Result};

/// Weight decay used in both pre-training phases.
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Layer widths from input to projector output. Every layer but the last is
/// followed by `activation`. The encoder output is the (activated) width at
/// index `encoder_cut`; layers after it form the projector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub encoder_cut: usize,
}

impl MlpSpec {
    /// Encoder `input -> hidden... -> encoder_dim`, then a two-layer projector
    /// of hidden width `4 * encoder_dim`.
    pub fn with_projector(encoder: &[usize], projector_out: usize) -> Self {
        let enc = *encoder.last().expect("non-empty encoder widths");
        let mut layer_widths = encoder.to_vec();
        layer_widths.extend([4 * enc, projector_out]);
        Self { encoder_cut: encoder.len() - 1, layer_widths, activation: Activation::Relu }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidArgument("an MLP needs at least 2 layer widths".into()));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        if self.encoder_cut == 0 || self.encoder_cut >= self.layer_widths.len() {
            return Err(Error::InvalidArgument(format!(
                "encoder_cut {} out of range 1..{}",
                self.encoder_cut,
                self.layer_widths.len()
            )));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn encoder_dim(&self) -> usize {
        self.layer_widths[self.encoder_cut]
    }

    fn activated(&self, layer: usize) -> bool {
        layer + 1 < self.num_layers()
    }
}

/// One affine layer, `y = x W + b`, with `W` stored `in x out`. Also used to
/// hold gradients and Adam moments of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros_like(other: &Layer) -> Self {
        Self { weight: Array2::zeros(other.weight.raw_dim()), bias: Array1::zeros(other.bias.raw_dim()) }
    }

    fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(spec: &MlpSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = rng::stream(&[seed, rng::tag::INIT]);
    let layers = spec
        .layer_widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Layer {
                weight: Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..limit)),
                bias: Array1::zeros(fan_out),
            }
        })
        .collect();
    Ok(ModelParams { spec: spec.clone(), layers })
}

/// Values kept from [`ModelParams::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array2<f64>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub embeddings: Array2<f64>,
    pub encoder_out: Array2<f64>,
    pub cache: ForwardCache,
}

impl ModelParams {
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Layer::is_finite)
    }

    fn check_input(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.spec.input_dim() {
            return Err(Error::shape(format!("{} input columns", self.spec.input_dim()), x.ncols()));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<ForwardOutput> {
        self.check_input(&x)?;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            let inp = if k == 0 { x } else { post[k - 1].view() };
            let z = inp.dot(&layer.weight) + &layer.bias;
            let a = if self.spec.activated(k) {
                z.mapv(|v| self.spec.activation.apply(v))
            } else {
                z.clone()
            };
            pre.push(z);
            post.push(a);
        }
        Ok(ForwardOutput {
            embeddings: post.last().unwrap().clone(),
            encoder_out: post[self.spec.encoder_cut - 1].clone(),
            cache: ForwardCache { input: x.to_owned(), pre, post },
        })
    }

    /// Encoder output only, skipping the projector.
    pub fn encode(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut h = x.to_owned();
        for k in 0..self.spec.encoder_cut {
            let layer = &self.layers[k];
            let z = h.dot(&layer.weight) + &layer.bias;
            h = if self.spec.activated(k) { z.mapv(|v| self.spec.activation.apply(v)) } else { z };
        }
        Ok(h)
    }

    /// Parameter gradients given `dL/d(embeddings)`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: ArrayView2<'_, f64>) -> Result<Vec<Layer>> {
        if cache.pre.len() != self.layers.len() || cache.input.ncols() != self.spec.input_dim() {
            return Err(Error::InvalidArgument("forward cache does not match this model".into()));
        }
        let last = cache.post.last().unwrap();
        if grad_out.dim() != last.dim() {
            return Err(Error::shape(format!("{:?}", last.dim()), format!("{:?}", grad_out.dim())));
        }
        let mut grads: Vec<Layer> = self.layers.iter().map(Layer::zeros_like).collect();
        let mut delta = grad_out.to_owned();
        for k in (0..self.layers.len()).rev() {
            if self.spec.activated(k) {
                let act = self.spec.activation;
                ndarray::Zip::from(&mut delta)
                    .and(&cache.pre[k])
                    .and(&cache.post[k])
                    .for_each(|g, &x, &y| *g *= act.derivative(x, y));
            }
            let inp = if k == 0 { cache.input.view() } else { cache.post[k - 1].view() };
            grads[k].weight = inp.t().dot(&delta);
            grads[k].bias = delta.sum_axis(Axis(0));
            if k > 0 {
                delta = delta.dot(&self.layers[k].weight.t());
            }
        }
        Ok(grads)
    }
}

/// Add `other` into `acc` layer by layer.
pub fn add_grads(acc: &mut [Layer], other: &[Layer]) {
    for (a, b) in acc.iter_mut().zip(other) {
        a.weight += &b.weight;
        a.bias += &b.bias;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Layer>,
    pub v: Vec<Layer>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Layer> = params.layers.iter().map(Layer::zeros_like).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// One Adam update on every layer.
pub fn adam_step(params: &mut ModelParams, grads: &[Layer], state: &mut AdamState) -> Result<()> {
    adam_step_from(params, grads, state, 0)
}

/// Adam update that leaves layers before `first_trainable` untouched
/// (neither moments nor weights change there).
pub fn adam_step_from(
    params: &mut ModelParams,
    grads: &[Layer],
    state: &mut AdamState,
    first_trainable: usize,
) -> Result<()> {
    if grads.len() != params.layers.len() || state.m.len() != params.layers.len() {
        return Err(Error::shape(params.layers.len(), grads.len()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps, wd) = (state.beta1, state.beta2, state.lr, state.eps, state.weight_decay);
    let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * (m_hat / (v_hat.sqrt() + eps)) + lr * wd * *p;
    };
    // Indexes four parallel per-layer arrays.
    #[allow(clippy::needless_range_loop)]
    for k in first_trainable..params.layers.len() {
        let (layer, grad) = (&mut params.layers[k], &grads[k]);
        if layer.weight.dim() != grad.weight.dim() || layer.bias.dim() != grad.bias.dim() {
            return Err(Error::shape(format!("{:?}", layer.weight.dim()), format!("{:?}", grad.weight.dim())));
        }
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        ndarray::Zip::from(&mut layer.weight)
            .and(&grad.weight)
            .and(&mut m.weight)
            .and(&mut v.weight)
            .for_each(|p, &g, m, v| update(p, g, m, v));
        ndarray::Zip::from(&mut layer.bias)
            .and(&grad.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .for_each(|p, &g, m, v| update(p, g, m, v));
    }
    Ok(())
}
