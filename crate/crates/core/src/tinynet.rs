//! Dense feed-forward networks with hand-written reverse mode, Adam and
//! soft target updates. Everything is `f64`.
//!
//! Batched tensors are `batch x features`; a layer stores its weight matrix
//! as `out x in` so that `y = x W^T + b`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod gradcheck;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum TinyNetError {
    #[error("a network needs at least two layer sizes")]
    TooFewLayers,
    #[error("expected {expected} activations, got {got}")]
    ActivationCount { expected: usize, got: usize },
    #[error("layer sizes must be positive")]
    ZeroWidth,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("forward cache does not belong to the current network parameters")]
    StaleCache,
    #[error("non-finite gradient in {block}")]
    NonFiniteGradient { block: String },
    #[error("network architectures differ")]
    ArchitectureMismatch,
    #[error("soft-update rate {0} outside [0, 1]")]
    BadTau(f64),
    #[error("model format: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Linear,
}

impl Activation {
    pub(crate) fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Linear => {}
        }
    }

    /// Multiplies `delta` in place by the derivative, expressed through the
    /// activation output `y`.
    pub(crate) fn backprop(self, delta: &mut Array2<f64>, y: &Array2<f64>) {
        match self {
            Activation::Tanh => Zip::from(delta).and(y).for_each(|d, &y| *d *= 1.0 - y * y),
            Activation::Relu => Zip::from(delta).and(y).for_each(|d, &y| {
                if y <= 0.0 {
                    *d = 0.0
                }
            }),
            Activation::Linear => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Layer>,
    /// Bumped on every parameter mutation; forward caches remember it.
    generation: u64,
}

/// Per-layer activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Array2<f64>>,
    generation: u64,
    sizes: Vec<usize>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("cache has an output")
    }

    pub fn input(&self) -> &Array2<f64> {
        &self.acts[0]
    }

    /// Post-activation output of layer `l`.
    pub fn layer_output(&self, l: usize) -> &Array2<f64> {
        &self.acts[l + 1]
    }
}

/// Parameter-shaped tensors (gradients, optimizer moments).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl ParamGrads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weights.raw_dim()), Array1::zeros(l.biases.len())))
                .collect(),
        }
    }

    fn first_non_finite(&self) -> Option<String> {
        for (k, (w, b)) in self.layers.iter().enumerate() {
            if w.iter().any(|v| !v.is_finite()) {
                return Some(format!("layer {k} weights"));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Some(format!("layer {k} biases"));
            }
        }
        None
    }

    pub fn iter_flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
    }
}

impl DenseNet {
    /// Glorot-uniform weights, zero biases, deterministic per seed.
    pub fn init(
        layer_sizes: &[usize],
        activations: &[Activation],
        seed: u64,
    ) -> Result<Self, TinyNetError> {
        if layer_sizes.len() < 2 {
            return Err(TinyNetError::TooFewLayers);
        }
        if activations.len() != layer_sizes.len() - 1 {
            return Err(TinyNetError::ActivationCount {
                expected: layer_sizes.len() - 1,
                got: activations.len(),
            });
        }
        if layer_sizes.contains(&0) {
            return Err(TinyNetError::ZeroWidth);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_sizes
            .windows(2)
            .zip(activations)
            .map(|(io, &activation)| {
                let (fan_in, fan_out) = (io[0], io[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                let weights = Array2::from_shape_fn((fan_out, fan_in), |_| dist.sample(&mut rng));
                Layer {
                    weights,
                    biases: Array1::zeros(fan_out),
                    activation,
                }
            })
            .collect();
        Ok(Self {
            layers,
            generation: 0,
        })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self, TinyNetError> {
        if layers.is_empty() {
            return Err(TinyNetError::TooFewLayers);
        }
        for pair in layers.windows(2) {
            if pair[0].weights.nrows() != pair[1].weights.ncols() {
                return Err(TinyNetError::DimensionMismatch {
                    expected: pair[0].weights.nrows(),
                    got: pair[1].weights.ncols(),
                });
            }
        }
        for l in &layers {
            if l.biases.len() != l.weights.nrows() {
                return Err(TinyNetError::DimensionMismatch {
                    expected: l.weights.nrows(),
                    got: l.biases.len(),
                });
            }
        }
        Ok(Self {
            layers,
            generation: 0,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Direct parameter access; invalidates outstanding forward caches.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].weights.ncols()];
        s.extend(self.layers.iter().map(|l| l.weights.nrows()));
        s
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weights.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn same_architecture(&self, other: &DenseNet) -> bool {
        self.layer_sizes() == other.layer_sizes() && self.activations() == other.activations()
    }

    /// Batched forward pass over rows of `x`.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<ForwardCache, TinyNetError> {
        if x.ncols() != self.input_dim() {
            return Err(TinyNetError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_owned());
        for layer in &self.layers {
            let mut z = acts.last().unwrap().dot(&layer.weights.t());
            z += &layer.biases;
            layer.activation.apply(&mut z);
            acts.push(z);
        }
        Ok(ForwardCache {
            acts,
            generation: self.generation,
            sizes: self.layer_sizes(),
        })
    }

    /// Output only, for inference.
    pub fn predict_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, TinyNetError> {
        Ok(self.forward_batch(x)?.acts.pop().unwrap())
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache), TinyNetError> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        let cache = self.forward_batch(view)?;
        Ok((cache.output().row(0).to_vec(), cache))
    }

    fn check_cache(&self, cache: &ForwardCache, rows: usize, cols: usize) -> Result<(), TinyNetError> {
        if cache.sizes != self.layer_sizes() || cache.generation != self.generation {
            return Err(TinyNetError::StaleCache);
        }
        if cols != self.output_dim() {
            return Err(TinyNetError::DimensionMismatch {
                expected: self.output_dim(),
                got: cols,
            });
        }
        if rows != cache.acts[0].nrows() {
            return Err(TinyNetError::DimensionMismatch {
                expected: cache.acts[0].nrows(),
                got: rows,
            });
        }
        Ok(())
    }

    fn backward_impl(
        &self,
        cache: &ForwardCache,
        dy: ArrayView2<f64>,
        want_params: bool,
        want_dx: bool,
    ) -> Result<(Option<ParamGrads>, Array2<f64>), TinyNetError> {
        self.check_cache(cache, dy.nrows(), dy.ncols())?;
        let n = self.layers.len();
        let mut grads = want_params.then(|| Vec::with_capacity(n));
        let mut delta = dy.to_owned();
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            layer.activation.backprop(&mut delta, &cache.acts[l + 1]);
            if let Some(g) = grads.as_mut() {
                let dw = delta.t().dot(&cache.acts[l]);
                let db = delta.sum_axis(Axis(0));
                g.push((dw, db));
            }
            if l > 0 || want_dx {
                delta = delta.dot(&layer.weights);
            }
        }
        let grads = grads.map(|mut g| {
            g.reverse();
            ParamGrads { layers: g }
        });
        Ok((grads, delta))
    }

    /// Reverse pass: parameter gradients and the input gradient, given
    /// `dL/dy` for each row of the cached batch. Gradients are summed over
    /// rows.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        dy: ArrayView2<f64>,
    ) -> Result<(ParamGrads, Array2<f64>), TinyNetError> {
        let (g, dx) = self.backward_impl(cache, dy, true, true)?;
        Ok((g.unwrap(), dx))
    }

    /// Parameter gradients only; skips the input gradient of the first layer.
    pub fn param_gradients(
        &self,
        cache: &ForwardCache,
        dy: ArrayView2<f64>,
    ) -> Result<ParamGrads, TinyNetError> {
        Ok(self.backward_impl(cache, dy, true, false)?.0.unwrap())
    }

    /// Input gradient only, skipping parameter gradients.
    pub fn input_gradient(
        &self,
        cache: &ForwardCache,
        dy: ArrayView2<f64>,
    ) -> Result<Array2<f64>, TinyNetError> {
        Ok(self.backward_impl(cache, dy, false, true)?.1)
    }

    pub fn backward(
        &self,
        cache: &ForwardCache,
        dl_dy: &[f64],
    ) -> Result<(ParamGrads, Vec<f64>), TinyNetError> {
        let view = ArrayView2::from_shape((1, dl_dy.len()), dl_dy).expect("row view");
        let (g, dx) = self.backward_batch(cache, view)?;
        Ok((g, dx.row(0).to_vec()))
    }

    /// `target <- tau * online + (1 - tau) * target` for every parameter.
    pub fn soft_update_from(&mut self, online: &DenseNet, tau: f64) -> Result<(), TinyNetError> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(TinyNetError::BadTau(tau));
        }
        if !self.same_architecture(online) {
            return Err(TinyNetError::ArchitectureMismatch);
        }
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            Zip::from(&mut t.weights)
                .and(&o.weights)
                .for_each(|t, &o| *t = tau * o + (1.0 - tau) * *t);
            Zip::from(&mut t.biases)
                .and(&o.biases)
                .for_each(|t, &o| *t = tau * o + (1.0 - tau) * *t);
        }
        self.generation += 1;
        Ok(())
    }

    pub fn to_file(&self) -> NetFile {
        NetFile {
            layer_sizes: self.layer_sizes(),
            activations: self.activations(),
            weights: self.layers.iter().map(|l| l.weights.iter().copied().collect()).collect(),
            biases: self.layers.iter().map(|l| l.biases.to_vec()).collect(),
        }
    }

    pub fn from_file(f: &NetFile) -> Result<Self, TinyNetError> {
        let n = f.layer_sizes.len();
        if n < 2 {
            return Err(TinyNetError::TooFewLayers);
        }
        if f.activations.len() != n - 1 || f.weights.len() != n - 1 || f.biases.len() != n - 1 {
            return Err(TinyNetError::Format("per-layer array counts disagree".into()));
        }
        let mut layers = Vec::with_capacity(n - 1);
        for k in 0..n - 1 {
            let (fan_in, fan_out) = (f.layer_sizes[k], f.layer_sizes[k + 1]);
            let weights = Array2::from_shape_vec((fan_out, fan_in), f.weights[k].clone())
                .map_err(|_| TinyNetError::Format(format!("layer {k} weight count")))?;
            if f.biases[k].len() != fan_out {
                return Err(TinyNetError::Format(format!("layer {k} bias count")));
            }
            if weights.iter().chain(&f.biases[k]).any(|v| !v.is_finite()) {
                return Err(TinyNetError::Format(format!("layer {k} has non-finite values")));
            }
            layers.push(Layer {
                weights,
                biases: Array1::from(f.biases[k].clone()),
                activation: f.activations[k],
            });
        }
        DenseNet::from_layers(layers)
    }
}

/// Serialized network: sizes, activations and row-major parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetFile {
    pub layer_sizes: Vec<usize>,
    pub activations: Vec<Activation>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Versioned single-network model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    pub net: NetFile,
}

pub fn save_net_json(net: &DenseNet) -> String {
    serde_json::to_string(&ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        net: net.to_file(),
    })
    .expect("model serializes")
}

pub fn load_net_json(text: &str) -> Result<DenseNet, TinyNetError> {
    let f: ModelFile =
        serde_json::from_str(text).map_err(|e| TinyNetError::Format(e.to_string()))?;
    if f.format_version != MODEL_FORMAT_VERSION {
        return Err(TinyNetError::Format(format!(
            "format_version {} (expected {MODEL_FORMAT_VERSION})",
            f.format_version
        )));
    }
    DenseNet::from_file(&f.net)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamGrads,
    pub v: ParamGrads,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(net: &DenseNet) -> Self {
        Self {
            m: ParamGrads::zeros_like(net),
            v: ParamGrads::zeros_like(net),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam step (descent on `grads`).
///
/// Nothing is modified when any gradient entry is non-finite.
pub fn adam_step(
    net: &mut DenseNet,
    grads: &ParamGrads,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TinyNetError> {
    let shapes_match = grads.layers.len() == net.layers.len()
        && grads
            .layers
            .iter()
            .zip(&net.layers)
            .all(|((w, b), l)| w.dim() == l.weights.dim() && b.len() == l.biases.len());
    if !shapes_match || state.m.layers.len() != net.layers.len() {
        return Err(TinyNetError::ArchitectureMismatch);
    }
    if let Some(block) = grads.first_non_finite() {
        return Err(TinyNetError::NonFiniteGradient { block });
    }
    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    // lr * m_hat / (sqrt(v_hat) + eps) with the bias corrections folded in.
    let step = lr / c1;
    let inv_sqrt_c2 = 1.0 / c2.sqrt();
    let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *p -= step * *m / (v.sqrt() * inv_sqrt_c2 + eps);
    };
    for (k, layer) in net.layers.iter_mut().enumerate() {
        let (gw, gb) = &grads.layers[k];
        let (mw, mb) = &mut state.m.layers[k];
        let (vw, vb) = &mut state.v.layers[k];
        Zip::from(&mut layer.weights)
            .and(gw)
            .and(mw)
            .and(vw)
            .for_each(|p, &g, m, v| update(p, g, m, v));
        Zip::from(&mut layer.biases)
            .and(gb)
            .and(mb)
            .and(vb)
            .for_each(|p, &g, m, v| update(p, g, m, v));
    }
    net.generation += 1;
    Ok(())
}
