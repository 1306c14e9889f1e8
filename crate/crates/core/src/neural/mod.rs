//! Feed-forward detector networks with exact backpropagation.
//!
//! Activations are row-major `(batch, width)` arrays. The block-restrictive
//! network (BRNN) passes a whole user block through when any of its entries
//! is positive and pools each block to one per-user score; the plain DNN
//! baseline uses ReLU and a dense read-out instead.

pub mod gradcheck;
mod io;
mod layers;
mod loss;
mod network;
mod train;

pub use io::{load_model, read_model, read_trace_csv, save_model, write_model, write_trace_csv, MODEL_MAGIC, MODEL_VERSION};
pub use layers::{
    batch_norm_backward, batch_norm_forward, batch_norm_inference, block_activation_backward, block_activation_forward,
    block_max_pool_backward, block_max_pool_forward, dense_backward, dense_forward, relu_backward,
    relu_forward, BatchNorm, BatchNormCache, Dense, DenseGrads, Layer, LayerSpec, BN_EPSILON,
    BN_MOMENTUM,
};
pub use loss::{
    multi_hot, sigmoid_cross_entropy, softmax, softmax_cross_entropy, uniform_target, Head,
};
pub use network::{layer_specs, ArchConfig, Architecture, ForwardMode, Network, ParamBuffers};
pub use train::{evaluate, train, Checkpoint, StopReason, TrainConfig, TrainOutcome, TrainingTrace};

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Scalar type a network computes in.
pub trait Float:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + 'static
{
    const PRECISION: Precision;
    const BYTES: usize;

    fn of(v: f64) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Float for f32 {
    const PRECISION: Precision = Precision::F32;
    const BYTES: usize = 4;

    fn of(v: f64) -> Self {
        v as f32
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Float for f64 {
    const PRECISION: Precision = Precision::F64;
    const BYTES: usize = 8;

    fn of(v: f64) -> Self {
        v
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// `[Re(y); Im(y)]`.
pub fn featurize<T: Float>(y: &[Complex64]) -> Array1<T> {
    y.iter().map(|v| T::of(v.re)).chain(y.iter().map(|v| T::of(v.im))).collect()
}

/// Featurizes many measurements into one `(batch, 2M)` matrix.
pub fn featurize_batch<'a, T: Float>(ys: impl ExactSizeIterator<Item = &'a [Complex64]>, m: usize) -> Array2<T> {
    let rows = ys.len();
    let mut out = Array2::zeros((rows, 2 * m));
    for (i, y) in ys.enumerate() {
        out.row_mut(i).assign(&featurize::<T>(y));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn featurize_examples() {
        let y = [Complex64::new(1.0, 2.0)];
        assert_eq!(featurize::<f64>(&y).to_vec(), vec![1.0, 2.0]);
        assert_eq!(featurize::<f64>(&[Complex64::new(0.0, 0.0); 3]).to_vec(), vec![0.0; 6]);
        let y = [Complex64::new(0.5, -1.5), Complex64::new(2.0, 0.25)];
        let a = -3.0;
        let scaled: Vec<Complex64> = y.iter().map(|v| v * a).collect();
        assert_eq!(featurize::<f64>(&scaled), featurize::<f64>(&y) * a);
        assert_eq!(featurize::<f64>(&y).to_vec(), vec![0.5, 2.0, -1.5, 0.25]);
    }
}
