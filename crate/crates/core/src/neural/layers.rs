use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Float;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the previous running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Architecture entry; the serialized chain is the model header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { input: usize, output: usize },
    BatchNorm { width: usize },
    Relu { width: usize },
    BlockActivation { width: usize, block: usize },
    ResidualBegin { width: usize },
    ResidualAdd { width: usize },
    BlockMaxPool { width: usize, block: usize },
}

impl LayerSpec {
    pub fn input_width(&self) -> usize {
        match *self {
            LayerSpec::Dense { input, .. } => input,
            LayerSpec::BatchNorm { width }
            | LayerSpec::Relu { width }
            | LayerSpec::BlockActivation { width, .. }
            | LayerSpec::ResidualBegin { width }
            | LayerSpec::ResidualAdd { width }
            | LayerSpec::BlockMaxPool { width, .. } => width,
        }
    }

    pub fn output_width(&self) -> usize {
        match *self {
            LayerSpec::Dense { output, .. } => output,
            LayerSpec::BlockMaxPool { width, block } => width / block,
            other => other.input_width(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::BlockActivation { width, block } | LayerSpec::BlockMaxPool { width, block }
                if block == 0 || width % block != 0 =>
            {
                Err(Error::Shape(format!("width {width} is not a multiple of block size {block}")))
            }
            LayerSpec::Dense { input, output } if input == 0 || output == 0 => {
                Err(Error::Shape("dense layer with zero width".into()))
            }
            _ => Ok(()),
        }
    }

    /// Trainable parameter count.
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Dense { input, output } => input * output + output,
            LayerSpec::BatchNorm { width } => 2 * width,
            _ => 0,
        }
    }
}

/// Affine layer `x ↦ Wx + b`, `W` stored as `(output, input)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub w: Array2<T>,
    pub b: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads<T> {
    pub input: Array2<T>,
    pub w: Array2<T>,
    pub b: Array1<T>,
}

impl<T: Float> Dense<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Dense { w: Array2::zeros((output, input)), b: Array1::zeros(output) }
    }

    /// He-normal weights `N(0, 2/fan_in)`, zero bias.
    pub fn he(input: usize, output: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / input as f64).sqrt();
        let w = Array2::from_shape_simple_fn((output, input), || {
            T::of(std * rng.sample::<f64, _>(StandardNormal))
        });
        Dense { w, b: Array1::zeros(output) }
    }
}

pub fn dense_forward<T: Float>(layer: &Dense<T>, x: ArrayView2<T>) -> Result<Array2<T>> {
    if x.ncols() != layer.w.ncols() {
        return Err(Error::Shape(format!("dense expects width {}, got {}", layer.w.ncols(), x.ncols())));
    }
    if x.nrows() <= MATVEC_ROWS {
        if let Some(w) = layer.w.as_slice() {
            let mut out = Array2::zeros((x.nrows(), layer.w.nrows()));
            for (xr, mut or) in x.rows().into_iter().zip(out.rows_mut()) {
                let xr = xr.to_vec();
                for ((o, wr), &b) in or.iter_mut().zip(w.chunks_exact(xr.len())).zip(&layer.b) {
                    *o = dot_lanes(wr, &xr) + b;
                }
            }
            return Ok(out);
        }
    }
    let mut out = x.dot(&layer.w.t());
    out += &layer.b;
    Ok(out)
}

/// Batches up to this many rows go through row-wise dot products rather
/// than a matrix product.
const MATVEC_ROWS: usize = 1;

/// Dot product with eight independent accumulators so the loop vectorises.
fn dot_lanes<T: Float>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let split = a.len() - a.len() % 8;
    for (ca, cb) in a[..split].chunks_exact(8).zip(b[..split].chunks_exact(8)) {
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = T::zero();
    for (&p, &q) in a[split..].iter().zip(&b[split..]) {
        tail += p * q;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Gradients of a dense layer given the upstream gradient `g`.
pub fn dense_backward<T: Float>(layer: &Dense<T>, x: ArrayView2<T>, g: ArrayView2<T>) -> DenseGrads<T> {
    DenseGrads { input: g.dot(&layer.w), w: g.t().dot(&x), b: g.sum_axis(Axis(0)) }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormCache<T> {
    pub normalized: Array2<T>,
    pub inv_std: Array1<T>,
}

impl<T: Float> BatchNorm<T> {
    pub fn new(width: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
        }
    }

    fn width(&self) -> usize {
        self.gamma.len()
    }
}

/// Batch normalisation. In training mode the batch statistics are used and
/// the running statistics updated; otherwise the running statistics define
/// a fixed per-feature affine map and no cache is returned.
pub fn batch_norm_forward<T: Float>(
    layer: &mut BatchNorm<T>,
    x: ArrayView2<T>,
    training: bool,
) -> Result<(Array2<T>, Option<BatchNormCache<T>>)> {
    if x.ncols() != layer.width() {
        return Err(Error::Shape(format!("batch norm expects width {}, got {}", layer.width(), x.ncols())));
    }
    let eps = T::of(BN_EPSILON);
    if !training {
        return Ok((batch_norm_inference(layer, x)?, None));
    }
    let n = x.nrows();
    if n < 2 {
        return Err(Error::Shape(format!("training-mode batch norm needs at least 2 samples, got {n}")));
    }
    let nf = T::of(n as f64);
    let mean = x.sum_axis(Axis(0)) / nf;
    let centered = &x - &mean;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / nf;
    let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
    let normalized = &centered * &inv_std;
    let mut out = &normalized * &layer.gamma;
    out += &layer.beta;

    let m = T::of(BN_MOMENTUM);
    let unbiased = T::of(n as f64 / (n as f64 - 1.0));
    Zip::from(&mut layer.running_mean).and(&mean).for_each(|r, &b| *r = m * *r + (T::one() - m) * b);
    Zip::from(&mut layer.running_var).and(&var).for_each(|r, &b| *r = m * *r + (T::one() - m) * b * unbiased);
    Ok((out, Some(BatchNormCache { normalized, inv_std })))
}

/// Inference-mode batch norm: a per-feature affine map from the running
/// statistics, independent of the other rows in the batch.
pub fn batch_norm_inference<T: Float>(layer: &BatchNorm<T>, x: ArrayView2<T>) -> Result<Array2<T>> {
    if x.ncols() != layer.width() {
        return Err(Error::Shape(format!("batch norm expects width {}, got {}", layer.width(), x.ncols())));
    }
    let eps = T::of(BN_EPSILON);
    let scale = Zip::from(&layer.gamma)
        .and(&layer.running_var)
        .map_collect(|&g, &v| g / (v + eps).sqrt());
    let shift = &layer.beta - &(&layer.running_mean * &scale);
    let mut out = x.to_owned();
    out *= &scale;
    out += &shift;
    Ok(out)
}

/// Returns `(∂x, ∂γ, ∂β)`.
pub fn batch_norm_backward<T: Float>(
    layer: &BatchNorm<T>,
    cache: &BatchNormCache<T>,
    g: ArrayView2<T>,
) -> (Array2<T>, Array1<T>, Array1<T>) {
    let nf = T::of(g.nrows() as f64);
    let dgamma = (&g * &cache.normalized).sum_axis(Axis(0));
    let dbeta = g.sum_axis(Axis(0));
    let dnorm = &g * &layer.gamma;
    let sum_dnorm = dnorm.sum_axis(Axis(0));
    let sum_dnorm_xhat = (&dnorm * &cache.normalized).sum_axis(Axis(0));
    let mut dx = dnorm * nf;
    dx -= &sum_dnorm;
    dx -= &(&cache.normalized * &sum_dnorm_xhat);
    dx *= &(&cache.inv_std / nf);
    (dx, dgamma, dbeta)
}

pub fn relu_forward<T: Float>(x: ArrayView2<T>) -> (Array2<T>, Array2<bool>) {
    let mask = x.mapv(|v| v > T::zero());
    let out = x.mapv(|v| if v > T::zero() { v } else { T::zero() });
    (out, mask)
}

pub fn relu_backward<T: Float>(g: ArrayView2<T>, mask: &Array2<bool>) -> Array2<T> {
    Zip::from(g).and(mask).map_collect(|&g, &m| if m { g } else { T::zero() })
}

/// `sign(max{0, x_1..x_L}) · [x_1..x_L]` per block: a block passes
/// unchanged when any entry is strictly positive and is zeroed otherwise.
/// The mask has one entry per `(row, block)`.
pub fn block_activation_forward<T: Float>(x: ArrayView2<T>, block: usize) -> Result<(Array2<T>, Array2<bool>)> {
    if block == 0 || x.ncols() % block != 0 {
        return Err(Error::Shape(format!("width {} is not a multiple of block size {block}", x.ncols())));
    }
    let blocks = x.ncols() / block;
    let mut out = x.to_owned();
    let mut mask = Array2::from_elem((x.nrows(), blocks), false);
    for (mut row, mut mrow) in out.rows_mut().into_iter().zip(mask.rows_mut()) {
        let slice = row.as_slice_mut().expect("standard layout");
        for (chunk, m) in slice.chunks_mut(block).zip(mrow.iter_mut()) {
            *m = chunk.iter().any(|&v| v > T::zero());
            if !*m {
                chunk.fill(T::zero());
            }
        }
    }
    Ok((out, mask))
}

pub fn block_activation_backward<T: Float>(g: ArrayView2<T>, mask: &Array2<bool>, block: usize) -> Array2<T> {
    let mut out = g.to_owned();
    for (mut row, mrow) in out.rows_mut().into_iter().zip(mask.rows()) {
        let slice = row.as_slice_mut().expect("standard layout");
        for (chunk, &m) in slice.chunks_mut(block).zip(mrow.iter()) {
            if !m {
                chunk.fill(T::zero());
            }
        }
    }
    out
}

/// Per-block maximum; the cache holds the column of the first maximal
/// element of every block.
pub fn block_max_pool_forward<T: Float>(x: ArrayView2<T>, block: usize) -> Result<(Array2<T>, Array2<usize>)> {
    if block == 0 || x.ncols() % block != 0 {
        return Err(Error::Shape(format!("width {} is not a multiple of block size {block}", x.ncols())));
    }
    let blocks = x.ncols() / block;
    let mut out = Array2::zeros((x.nrows(), blocks));
    let mut argmax = Array2::zeros((x.nrows(), blocks));
    for (i, row) in x.rows().into_iter().enumerate() {
        for k in 0..blocks {
            let mut best = k * block;
            for j in k * block + 1..(k + 1) * block {
                if row[j] > row[best] {
                    best = j;
                }
            }
            out[(i, k)] = row[best];
            argmax[(i, k)] = best;
        }
    }
    Ok((out, argmax))
}

pub fn block_max_pool_backward<T: Float>(g: ArrayView2<T>, argmax: &Array2<usize>, width: usize) -> Array2<T> {
    let mut out = Array2::zeros((g.nrows(), width));
    for ((i, k), &j) in argmax.indexed_iter() {
        out[(i, j)] = g[(i, k)];
    }
    out
}

/// A layer together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Dense(Dense<T>),
    BatchNorm(BatchNorm<T>),
    Relu { width: usize },
    BlockActivation { width: usize, block: usize },
    ResidualBegin { width: usize },
    ResidualAdd { width: usize },
    BlockMaxPool { width: usize, block: usize },
}

impl<T: Float> Layer<T> {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Dense(d) => LayerSpec::Dense { input: d.w.ncols(), output: d.w.nrows() },
            Layer::BatchNorm(bn) => LayerSpec::BatchNorm { width: bn.gamma.len() },
            &Layer::Relu { width } => LayerSpec::Relu { width },
            &Layer::BlockActivation { width, block } => LayerSpec::BlockActivation { width, block },
            &Layer::ResidualBegin { width } => LayerSpec::ResidualBegin { width },
            &Layer::ResidualAdd { width } => LayerSpec::ResidualAdd { width },
            &Layer::BlockMaxPool { width, block } => LayerSpec::BlockMaxPool { width, block },
        }
    }

    /// Freshly initialised layer for `spec`; dense layers draw from `rng`.
    pub fn from_spec(spec: LayerSpec, rng: &mut Rng) -> Self {
        match spec {
            LayerSpec::Dense { input, output } => Layer::Dense(Dense::he(input, output, rng)),
            LayerSpec::BatchNorm { width } => Layer::BatchNorm(BatchNorm::new(width)),
            LayerSpec::Relu { width } => Layer::Relu { width },
            LayerSpec::BlockActivation { width, block } => Layer::BlockActivation { width, block },
            LayerSpec::ResidualBegin { width } => Layer::ResidualBegin { width },
            LayerSpec::ResidualAdd { width } => Layer::ResidualAdd { width },
            LayerSpec::BlockMaxPool { width, block } => Layer::BlockMaxPool { width, block },
        }
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn dense_identity_and_bias() {
        let layer = Dense { w: Array2::<f64>::eye(3), b: Array1::zeros(3) };
        let x = array![[1.0, -2.0, 0.5]];
        assert_eq!(dense_forward(&layer, x.view()).unwrap(), x);
        let layer = Dense { w: array![[1.0, 2.0], [3.0, 4.0]], b: array![0.5, -0.5] };
        assert_eq!(dense_forward(&layer, Array2::zeros((1, 2)).view()).unwrap(), array![[0.5, -0.5]]);
        assert!(dense_forward(&layer, Array2::zeros((1, 3)).view()).is_err());
    }

    #[test]
    fn he_init_scale() {
        let d = Dense::<f64>::he(200, 300, &mut rng_from(1));
        let var = d.w.mapv(|v| v * v).mean().unwrap();
        assert!((var - 0.01).abs() < 0.0005, "{var}");
        assert!(d.b.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn batch_norm_training_statistics() {
        let mut bn = BatchNorm::<f64>::new(3);
        let mut rng = rng_from(2);
        let x = Array2::from_shape_simple_fn((64, 3), || 5.0 + 10.0 * rng.sample::<f64, _>(StandardNormal));
        let (out, cache) = batch_norm_forward(&mut bn, x.view(), true).unwrap();
        assert!(cache.is_some());
        for (col, xcol) in out.columns().into_iter().zip(x.columns()) {
            let mean = col.mean().unwrap();
            let var = col.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6, "{var}");
            // ε shrinks the variance by v/(v+ε)
            let xm = xcol.mean().unwrap();
            let v = xcol.mapv(|t| (t - xm).powi(2)).mean().unwrap();
            assert!((var - v / (v + BN_EPSILON)).abs() < 1e-12);
        }
        assert!(bn.running_var.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn batch_norm_on_normalized_input_is_near_identity() {
        let mut bn = BatchNorm::<f64>::new(2);
        let x = array![[1.0, -1.0], [-1.0, 1.0], [1.0, 1.0], [-1.0, -1.0]];
        let (out, _) = batch_norm_forward(&mut bn, x.view(), true).unwrap();
        assert!((&out - &x).iter().all(|d| d.abs() < 1e-5));
    }

    #[test]
    fn batch_norm_rejects_single_sample_training() {
        let mut bn = BatchNorm::<f64>::new(2);
        assert!(batch_norm_forward(&mut bn, array![[1.0, 2.0]].view(), true).is_err());
        assert!(batch_norm_forward(&mut bn, array![[1.0, 2.0]].view(), false).is_ok());
    }

    #[test]
    fn batch_norm_running_update() {
        let mut bn = BatchNorm::<f64>::new(1);
        let x = array![[1.0], [3.0]];
        batch_norm_forward(&mut bn, x.view(), true).unwrap();
        assert!((bn.running_mean[0] - 0.2).abs() < 1e-15);
        // unbiased batch variance 2.0
        assert!((bn.running_var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn block_activation_examples() {
        let x = array![[-1.0, -2.0, 3.0, -1.0, 0.0, 0.0]];
        let (out, mask) = block_activation_forward(x.view(), 2).unwrap();
        assert_eq!(out, array![[0.0, 0.0, 3.0, -1.0, 0.0, 0.0]]);
        assert_eq!(mask, array![[false, true, false]]);
        let g = array![[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]];
        assert_eq!(block_activation_backward(g.view(), &mask, 2), array![[0.0, 0.0, 3.0, 4.0, 0.0, 0.0]]);
        assert!(block_activation_forward(x.view(), 4).is_err());
    }

    #[test]
    fn block_activation_truth_table() {
        // every sign pattern over {−1, 0, +1}^L for L ≤ 4
        for l in 1..=4usize {
            let patterns = 3usize.pow(l as u32);
            for p in 0..patterns {
                let block: Vec<f64> = (0..l).map(|i| ((p / 3usize.pow(i as u32)) % 3) as f64 - 1.0).map(|v| v * 1.5).collect();
                let x = Array2::from_shape_vec((1, l), block.clone()).unwrap();
                let (out, _) = block_activation_forward(x.view(), l).unwrap();
                let any_positive = block.iter().any(|&v| v > 0.0);
                let expected = if any_positive { block.clone() } else { vec![0.0; l] };
                assert_eq!(out.into_raw_vec_and_offset().0, expected);
            }
        }
    }

    #[test]
    fn pool_examples() {
        let x = array![[1.0, -2.0, 0.5, 3.0]];
        let (out, arg) = block_max_pool_forward(x.view(), 2).unwrap();
        assert_eq!(out, array![[1.0, 3.0]]);
        assert_eq!(arg, array![[0, 3]]);
        let flat = array![[2.0, 2.0, 2.0]];
        let (out, arg) = block_max_pool_forward(flat.view(), 3).unwrap();
        assert_eq!(out, array![[2.0]]);
        let g = block_max_pool_backward(array![[1.0]].view(), &arg, 3);
        assert_eq!(g, array![[1.0, 0.0, 0.0]]);
        let permuted = array![[0.5, 3.0, -2.0, 1.0]];
        let (out2, _) = block_max_pool_forward(array![[-2.0, 1.0, 3.0, 0.5]].view(), 2).unwrap();
        let (out3, _) = block_max_pool_forward(permuted.view(), 2).unwrap();
        assert_eq!(out2.column(0), out3.column(1));
        assert_eq!(out2.column(1), out3.column(0));
    }

    #[test]
    fn spec_validation_and_counts() {
        assert!(LayerSpec::BlockActivation { width: 7, block: 3 }.validate().is_err());
        assert!(LayerSpec::BlockMaxPool { width: 6, block: 3 }.validate().is_ok());
        assert_eq!(LayerSpec::Dense { input: 4, output: 3 }.param_count(), 15);
        assert_eq!(LayerSpec::BatchNorm { width: 5 }.param_count(), 10);
        assert_eq!(LayerSpec::BlockMaxPool { width: 6, block: 3 }.output_width(), 2);
    }
}
