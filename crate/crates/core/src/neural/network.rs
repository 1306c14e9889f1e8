use ndarray::{Array1, Array2, ArrayView2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::layers::{
    batch_norm_backward, batch_norm_forward, batch_norm_inference, block_activation_backward,
    block_activation_forward, block_max_pool_backward, block_max_pool_forward, dense_backward,
    dense_forward, relu_backward, relu_forward, BatchNormCache, Layer, LayerSpec,
};
use super::loss::Head;
use super::{featurize, Float};
use crate::error::{Error, Result};
use crate::recovery::top_n;
use crate::rng::{derived_rng, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Block activation in the residual body, block max-pool read-out.
    Brnn,
    /// ReLU in the residual body, dense read-out.
    Dnn,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Brnn => "BRNN",
            Architecture::Dnn => "DNN",
        }
    }
}

/// Depths and widths of the detector. `relu_width = None` means `2·K·L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub relu_layers: usize,
    pub relu_width: Option<usize>,
    pub residual_blocks: usize,
    pub head: Head,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig { relu_layers: 2, relu_width: None, residual_blocks: 3, head: Head::Softmax }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batch statistics, running statistics updated, caches kept.
    Train,
    /// Running statistics; per-sample deterministic.
    Infer,
}

#[derive(Debug, Clone)]
pub(crate) enum Cache<T> {
    Input(Array2<T>),
    BatchNorm(BatchNormCache<T>),
    Mask(Array2<bool>),
    Argmax(Array2<usize>),
    Empty,
}

/// Gradient (or momentum) buffers for one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamBuffers<T> {
    Dense { w: Array2<T>, b: Array1<T> },
    BatchNorm { gamma: Array1<T>, beta: Array1<T> },
    None,
}

impl<T: Float> ParamBuffers<T> {
    fn zeros_like(layer: &Layer<T>) -> Self {
        match layer {
            Layer::Dense(d) => ParamBuffers::Dense { w: Array2::zeros(d.w.dim()), b: Array1::zeros(d.b.len()) },
            Layer::BatchNorm(bn) => ParamBuffers::BatchNorm {
                gamma: Array1::zeros(bn.gamma.len()),
                beta: Array1::zeros(bn.beta.len()),
            },
            _ => ParamBuffers::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub arch: Architecture,
    pub users: usize,
    pub block: usize,
    pub input_width: usize,
    pub head: Head,
    pub layers: Vec<Layer<T>>,
    pub velocity: Vec<ParamBuffers<T>>,
    /// Optimizer steps taken so far, carried across resumed runs.
    pub batches_seen: u64,
}

/// The layer chain for an architecture.
pub fn layer_specs(arch: Architecture, users: usize, block: usize, input_width: usize, config: &ArchConfig) -> Result<Vec<LayerSpec>> {
    if users == 0 || block == 0 || input_width == 0 {
        return Err(Error::config("K, L and the input width must be positive"));
    }
    let kl = users * block;
    let width = config.relu_width.unwrap_or(2 * kl);
    if width == 0 {
        return Err(Error::config("relu_width must be positive"));
    }
    let mut specs = Vec::new();
    let mut current = input_width;
    for _ in 0..config.relu_layers {
        specs.push(LayerSpec::Dense { input: current, output: width });
        specs.push(LayerSpec::BatchNorm { width });
        specs.push(LayerSpec::Relu { width });
        current = width;
    }
    specs.push(LayerSpec::Dense { input: current, output: kl });
    for _ in 0..config.residual_blocks {
        specs.push(LayerSpec::ResidualBegin { width: kl });
        specs.push(LayerSpec::Dense { input: kl, output: kl });
        specs.push(LayerSpec::BatchNorm { width: kl });
        specs.push(LayerSpec::ResidualAdd { width: kl });
        specs.push(match arch {
            Architecture::Brnn => LayerSpec::BlockActivation { width: kl, block },
            Architecture::Dnn => LayerSpec::Relu { width: kl },
        });
    }
    specs.push(match arch {
        Architecture::Brnn => LayerSpec::BlockMaxPool { width: kl, block },
        Architecture::Dnn => LayerSpec::Dense { input: kl, output: users },
    });
    Ok(specs)
}

/// Checks that the chain is well formed and ends in `users` scores.
pub(crate) fn validate_chain(specs: &[LayerSpec], input_width: usize, users: usize) -> Result<()> {
    let mut width = input_width;
    let mut open = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        spec.validate()?;
        if spec.input_width() != width {
            return Err(Error::Shape(format!("layer {i} expects width {}, gets {width}", spec.input_width())));
        }
        match spec {
            LayerSpec::ResidualBegin { width } => open.push(*width),
            LayerSpec::ResidualAdd { width } => {
                if open.pop() != Some(*width) {
                    return Err(Error::Shape(format!("residual add at layer {i} has no matching begin")));
                }
            }
            _ => {}
        }
        width = spec.output_width();
    }
    if !open.is_empty() {
        return Err(Error::Shape("unclosed residual block".into()));
    }
    if width != users {
        return Err(Error::Shape(format!("network emits {width} scores for {users} users")));
    }
    Ok(())
}

impl<T: Float> Network<T> {
    /// Builds and He-initialises a network. The `i`-th dense layer draws
    /// from its own stream, so two architectures sharing a seed share
    /// every dense layer of matching position and shape.
    pub fn build(
        arch: Architecture,
        users: usize,
        block: usize,
        measurement_len: usize,
        config: &ArchConfig,
        seed: u64,
    ) -> Result<Self> {
        let input_width = 2 * measurement_len;
        let specs = layer_specs(arch, users, block, input_width, config)?;
        Self::from_specs(arch, users, block, input_width, config.head, &specs, seed)
    }

    pub fn from_specs(
        arch: Architecture,
        users: usize,
        block: usize,
        input_width: usize,
        head: Head,
        specs: &[LayerSpec],
        seed: u64,
    ) -> Result<Self> {
        validate_chain(specs, input_width, users)?;
        let mut dense_index = 0;
        let layers: Vec<Layer<T>> = specs
            .iter()
            .map(|&spec| {
                let mut rng = derived_rng(seed, stream::INIT, dense_index);
                if matches!(spec, LayerSpec::Dense { .. }) {
                    dense_index += 1;
                }
                Layer::from_spec(spec, &mut rng)
            })
            .collect();
        let velocity = layers.iter().map(ParamBuffers::zeros_like).collect();
        Ok(Network { arch, users, block, input_width, head, layers, velocity, batches_seen: 0 })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn param_count(&self) -> usize {
        self.specs().iter().map(LayerSpec::param_count).sum()
    }

    pub fn measurement_len(&self) -> usize {
        self.input_width / 2
    }

    pub(crate) fn forward_cached(&mut self, x: ArrayView2<T>, mode: ForwardMode) -> Result<(Array2<T>, Vec<Cache<T>>)> {
        if x.ncols() != self.input_width {
            return Err(Error::Shape(format!("network expects {} features, got {}", self.input_width, x.ncols())));
        }
        let training = mode == ForwardMode::Train;
        let mut act = x.to_owned();
        let mut caches = Vec::with_capacity(if training { self.layers.len() } else { 0 });
        let mut skips: Vec<Array2<T>> = Vec::new();
        for layer in &mut self.layers {
            let (next, cache) = match layer {
                Layer::Dense(d) => {
                    let out = dense_forward(d, act.view())?;
                    (out, if training { Cache::Input(act) } else { Cache::Empty })
                }
                Layer::BatchNorm(bn) => {
                    let (out, cache) = batch_norm_forward(bn, act.view(), training)?;
                    (out, cache.map_or(Cache::Empty, Cache::BatchNorm))
                }
                Layer::Relu { .. } => {
                    let (out, mask) = relu_forward(act.view());
                    (out, Cache::Mask(mask))
                }
                Layer::BlockActivation { block, .. } => {
                    let (out, mask) = block_activation_forward(act.view(), *block)?;
                    (out, Cache::Mask(mask))
                }
                Layer::ResidualBegin { .. } => {
                    skips.push(act.clone());
                    (act, Cache::Empty)
                }
                Layer::ResidualAdd { .. } => {
                    let skip = skips.pop().ok_or_else(|| Error::Shape("unbalanced residual".into()))?;
                    (act + &skip, Cache::Empty)
                }
                Layer::BlockMaxPool { block, .. } => {
                    let (out, arg) = block_max_pool_forward(act.view(), *block)?;
                    (out, Cache::Argmax(arg))
                }
            };
            if training {
                caches.push(cache);
            }
            act = next;
        }
        Ok((act, caches))
    }

    /// Forward pass in training mode (updates batch-norm running stats).
    pub fn forward_train(&mut self, x: ArrayView2<T>) -> Result<Array2<T>> {
        Ok(self.forward_cached(x, ForwardMode::Train)?.0)
    }

    /// Per-user scores in inference mode; rows are independent.
    pub fn predict_scores(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        if x.ncols() != self.input_width {
            return Err(Error::Shape(format!("network expects {} features, got {}", self.input_width, x.ncols())));
        }
        let mut act = x.to_owned();
        let mut skips: Vec<Array2<T>> = Vec::new();
        for layer in &self.layers {
            act = match layer {
                Layer::Dense(d) => dense_forward(d, act.view())?,
                Layer::BatchNorm(bn) => batch_norm_inference(bn, act.view())?,
                Layer::Relu { .. } => {
                    act.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
                    act
                }
                Layer::BlockActivation { block, .. } => block_activation_forward(act.view(), *block)?.0,
                Layer::ResidualBegin { .. } => {
                    skips.push(act.clone());
                    act
                }
                Layer::ResidualAdd { .. } => act + &skips.pop().ok_or_else(|| Error::Shape("unbalanced residual".into()))?,
                Layer::BlockMaxPool { block, .. } => block_max_pool_forward(act.view(), *block)?.0,
            };
        }
        Ok(act)
    }

    /// Parameter gradients for every layer given `∂loss/∂scores`.
    pub(crate) fn backward(&self, caches: &[Cache<T>], grad_scores: Array2<T>) -> Result<Vec<ParamBuffers<T>>> {
        if caches.len() != self.layers.len() {
            return Err(Error::Shape("backward needs a training-mode forward cache".into()));
        }
        let mut grads: Vec<ParamBuffers<T>> = vec![ParamBuffers::None; self.layers.len()];
        let mut g = grad_scores;
        let mut skip_grads: Vec<Array2<T>> = Vec::new();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            g = match (layer, &caches[i]) {
                (Layer::Dense(d), Cache::Input(x)) => {
                    let dg = dense_backward(d, x.view(), g.view());
                    grads[i] = ParamBuffers::Dense { w: dg.w, b: dg.b };
                    dg.input
                }
                (Layer::BatchNorm(bn), Cache::BatchNorm(cache)) => {
                    let (dx, dgamma, dbeta) = batch_norm_backward(bn, cache, g.view());
                    grads[i] = ParamBuffers::BatchNorm { gamma: dgamma, beta: dbeta };
                    dx
                }
                (Layer::Relu { .. }, Cache::Mask(mask)) => relu_backward(g.view(), mask),
                (Layer::BlockActivation { block, .. }, Cache::Mask(mask)) => block_activation_backward(g.view(), mask, *block),
                (Layer::ResidualAdd { .. }, _) => {
                    skip_grads.push(g.clone());
                    g
                }
                (Layer::ResidualBegin { .. }, _) => {
                    g + &skip_grads.pop().ok_or_else(|| Error::Shape("unbalanced residual".into()))?
                }
                (Layer::BlockMaxPool { width, .. }, Cache::Argmax(arg)) => block_max_pool_backward(g.view(), arg, *width),
                _ => return Err(Error::Shape(format!("layer {i} has a mismatched cache"))),
            };
        }
        Ok(grads)
    }

    /// Loss and parameter gradients for one batch (training mode).
    pub fn loss_and_grads(&mut self, x: ArrayView2<T>, targets: ArrayView2<T>) -> Result<(T, Vec<ParamBuffers<T>>)> {
        let (scores, caches) = self.forward_cached(x, ForwardMode::Train)?;
        let (loss, grad) = self.head.loss(scores.view(), targets)?;
        let grads = self.backward(&caches, grad)?;
        Ok((loss, grads))
    }

    /// Classical momentum: `v ← m·v − lr·g`, `θ ← θ + v`.
    pub fn apply_momentum_step(&mut self, grads: &[ParamBuffers<T>], learning_rate: f64, momentum: f64) {
        let lr = T::of(learning_rate);
        let m = T::of(momentum);
        for ((layer, vel), grad) in self.layers.iter_mut().zip(self.velocity.iter_mut()).zip(grads) {
            match (layer, vel, grad) {
                (Layer::Dense(d), ParamBuffers::Dense { w: vw, b: vb }, ParamBuffers::Dense { w: gw, b: gb }) => {
                    ndarray::Zip::from(&mut d.w).and(vw).and(gw).for_each(|p, v, &g| {
                        *v = m * *v - lr * g;
                        *p += *v;
                    });
                    ndarray::Zip::from(&mut d.b).and(vb).and(gb).for_each(|p, v, &g| {
                        *v = m * *v - lr * g;
                        *p += *v;
                    });
                }
                (
                    Layer::BatchNorm(bn),
                    ParamBuffers::BatchNorm { gamma: vg, beta: vbeta },
                    ParamBuffers::BatchNorm { gamma: gg, beta: gbeta },
                ) => {
                    ndarray::Zip::from(&mut bn.gamma).and(vg).and(gg).for_each(|p, v, &g| {
                        *v = m * *v - lr * g;
                        *p += *v;
                    });
                    ndarray::Zip::from(&mut bn.beta).and(vbeta).and(gbeta).for_each(|p, v, &g| {
                        *v = m * *v - lr * g;
                        *p += *v;
                    });
                }
                _ => {}
            }
        }
        self.batches_seen += 1;
    }

    /// Top-`n` users for one measurement, plus the raw scores.
    pub fn infer_active_users(&self, y: &[Complex64], n: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        if n > self.users {
            return Err(Error::config(format!("n = {n} exceeds K = {}", self.users)));
        }
        if y.len() * 2 != self.input_width {
            return Err(Error::Shape(format!("measurement of length {} for a network expecting {}", y.len(), self.input_width / 2)));
        }
        let x = featurize::<T>(y).insert_axis(ndarray::Axis(0));
        let scores = self.predict_scores(x.view())?;
        let scores: Vec<f64> = scores.row(0).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        Ok((top_n(&scores, n), scores))
    }

    /// Dense layers in declaration order.
    pub fn dense_layers(&self) -> impl Iterator<Item = &super::Dense<T>> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Dense(d) => Some(d),
            _ => None,
        })
    }
}

#[cfg(test)]
mod tests {
    use ndarray::Array2;

    use super::*;
    use crate::neural::{BatchNorm, Dense};

    #[test]
    fn default_brnn_layout_and_count() {
        let (k, l, m) = (20, 3, 18);
        let net = Network::<f64>::build(Architecture::Brnn, k, l, m, &ArchConfig::default(), 1).unwrap();
        let (kl, w, inp) = (60, 120, 36);
        let expected = (inp * w + w) + 2 * w + (w * w + w) + 2 * w + (w * kl + kl) + 3 * ((kl * kl + kl) + 2 * kl);
        assert_eq!(net.param_count(), expected);
        assert_eq!(net.specs().last(), Some(&LayerSpec::BlockMaxPool { width: 60, block: 3 }));

        let dnn = Network::<f64>::build(Architecture::Dnn, k, l, m, &ArchConfig::default(), 1).unwrap();
        assert_eq!(dnn.param_count(), expected + kl * k + k);
    }

    #[test]
    fn shared_seed_shares_dense_weights() {
        let brnn = Network::<f32>::build(Architecture::Brnn, 20, 3, 18, &ArchConfig::default(), 42).unwrap();
        let dnn = Network::<f32>::build(Architecture::Dnn, 20, 3, 18, &ArchConfig::default(), 42).unwrap();
        let a: Vec<_> = brnn.dense_layers().collect();
        let b: Vec<_> = dnn.dense_layers().collect();
        assert_eq!(a.len() + 1, b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y);
        }
        let other = Network::<f32>::build(Architecture::Brnn, 20, 3, 18, &ArchConfig::default(), 43).unwrap();
        assert_ne!(other.dense_layers().next(), brnn.dense_layers().next());
    }

    #[test]
    fn zero_input_gives_finite_scores() {
        for arch in [Architecture::Brnn, Architecture::Dnn] {
            let net = Network::<f32>::build(arch, 20, 3, 18, &ArchConfig::default(), 3).unwrap();
            let scores = net.predict_scores(Array2::zeros((4, 36)).view()).unwrap();
            assert_eq!(scores.dim(), (4, 20));
            assert!(scores.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn invalid_depths_are_rejected() {
        let bad = ArchConfig { relu_width: Some(0), ..ArchConfig::default() };
        assert!(Network::<f32>::build(Architecture::Brnn, 20, 3, 18, &bad, 0).is_err());
        assert!(Network::<f32>::build(Architecture::Brnn, 0, 3, 18, &ArchConfig::default(), 0).is_err());
        let specs = vec![LayerSpec::Dense { input: 4, output: 6 }, LayerSpec::ResidualAdd { width: 6 }, LayerSpec::BlockMaxPool { width: 6, block: 2 }];
        assert!(Network::<f32>::from_specs(Architecture::Brnn, 3, 2, 4, Head::Softmax, &specs, 0).is_err());
    }

    #[test]
    fn inference_examples() {
        // a network whose scores equal its input: one identity dense layer
        let specs = vec![LayerSpec::Dense { input: 4, output: 4 }];
        let mut net = Network::<f64>::from_specs(Architecture::Dnn, 4, 1, 4, Head::Softmax, &specs, 0).unwrap();
        net.layers[0] = Layer::Dense(Dense { w: Array2::eye(4), b: Array1::zeros(4) });
        // features are [re(y0), re(y1), im(y0), im(y1)]
        let y = [Complex64::new(0.1, 0.05), Complex64::new(0.9, 0.7)];
        let (set, scores) = net.infer_active_users(&y, 2).unwrap();
        assert_eq!(scores, vec![0.1, 0.9, 0.05, 0.7]);
        assert_eq!(set, vec![1, 3]);
        assert_eq!(net.infer_active_users(&y, 4).unwrap().0, vec![0, 1, 2, 3]);
        assert!(net.infer_active_users(&y, 5).is_err());
    }

    #[test]
    fn block_and_relu_bodies_agree_on_positive_signals() {
        let (k, l) = (4, 2);
        let config = ArchConfig { relu_layers: 1, relu_width: Some(10), residual_blocks: 2, head: Head::Softmax };
        let mut brnn = Network::<f64>::build(Architecture::Brnn, k, l, 3, &config, 5).unwrap();
        for layer in &mut brnn.layers {
            match layer {
                Layer::Dense(d) => {
                    d.w.mapv_inplace(f64::abs);
                    d.b.fill(0.1);
                }
                Layer::BatchNorm(bn) => *bn = BatchNorm::new(bn.gamma.len()),
                _ => {}
            }
        }
        let mut relu_body = brnn.clone();
        for layer in &mut relu_body.layers {
            if let Layer::BlockActivation { width, .. } = *layer {
                *layer = Layer::Relu { width };
            }
        }
        let x = Array2::from_shape_fn((3, 6), |(i, j)| 0.1 + (i * 6 + j) as f64 * 0.05);
        let a = brnn.predict_scores(x.view()).unwrap();
        let b = relu_body.predict_scores(x.view()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batched_and_single_inference_agree() {
        let net = Network::<f64>::build(Architecture::Brnn, 20, 3, 18, &ArchConfig::default(), 9).unwrap();
        let x = Array2::from_shape_fn((7, 36), |(i, j)| ((i * 31 + j * 7) % 13) as f64 / 6.0 - 1.0);
        let batched = net.predict_scores(x.view()).unwrap();
        for i in 0..7 {
            let single = net.predict_scores(x.slice(ndarray::s![i..i + 1, ..])).unwrap();
            for (a, b) in single.row(0).iter().zip(batched.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
