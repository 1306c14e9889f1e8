use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::Float;
use crate::error::{Error, Result};

/// Output head of a detector network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Softmax over users against a target spreading `1/n` on each active
    /// user.
    #[default]
    Softmax,
    /// Independent per-user sigmoid against a 0/1 target.
    Sigmoid,
}

impl Head {
    pub fn target<T: Float>(&self, users: usize, active: &[usize]) -> Array1<T> {
        match self {
            Head::Softmax => uniform_target(users, active),
            Head::Sigmoid => multi_hot(users, active),
        }
    }

    /// Mean loss over the batch and its gradient w.r.t. the scores.
    pub fn loss<T: Float>(&self, scores: ArrayView2<T>, targets: ArrayView2<T>) -> Result<(T, Array2<T>)> {
        if scores.dim() != targets.dim() {
            return Err(Error::Shape(format!("scores {:?} vs targets {:?}", scores.dim(), targets.dim())));
        }
        let n = T::of(scores.nrows() as f64);
        let mut total = T::zero();
        let mut grad = Array2::zeros(scores.dim());
        for ((s, t), mut g) in scores.rows().into_iter().zip(targets.rows()).zip(grad.rows_mut()) {
            let (l, gr) = match self {
                Head::Softmax => softmax_cross_entropy(s, t)?,
                Head::Sigmoid => sigmoid_cross_entropy(s, t)?,
            };
            total += l;
            g.assign(&(gr / n));
        }
        Ok((total / n, grad))
    }
}

pub fn uniform_target<T: Float>(users: usize, active: &[usize]) -> Array1<T> {
    let mut t = Array1::zeros(users);
    if !active.is_empty() {
        let mass = T::of(1.0 / active.len() as f64);
        for &k in active {
            t[k] = mass;
        }
    }
    t
}

pub fn multi_hot<T: Float>(users: usize, active: &[usize]) -> Array1<T> {
    let mut t = Array1::zeros(users);
    for &k in active {
        t[k] = T::one();
    }
    t
}

/// Max-shifted softmax.
pub fn softmax<T: Float>(scores: ArrayView1<T>) -> Array1<T> {
    let max = scores.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exp = scores.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    exp / sum
}

/// `−Σ t·log softmax(s)` and its gradient `softmax(s) − t`.
pub fn softmax_cross_entropy<T: Float>(scores: ArrayView1<T>, target: ArrayView1<T>) -> Result<(T, Array1<T>)> {
    if scores.len() != target.len() {
        return Err(Error::Shape("score and target lengths differ".into()));
    }
    let sum = target.sum();
    if target.iter().any(|&t| t < T::zero() || !t.is_finite()) || (sum - T::one()).abs() > T::of(1e-6) {
        return Err(Error::config("target must be a probability distribution"));
    }
    let max = scores.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let log_sum = scores.iter().map(|&v| (v - max).exp()).fold(T::zero(), |a, b| a + b).ln();
    let mut loss = T::zero();
    for (&s, &t) in scores.iter().zip(target.iter()) {
        if t > T::zero() {
            loss -= t * (s - max - log_sum);
        }
    }
    Ok((loss, &softmax(scores) - &target))
}

/// Summed binary cross-entropy of `sigmoid(s)` against 0/1 targets.
pub fn sigmoid_cross_entropy<T: Float>(scores: ArrayView1<T>, target: ArrayView1<T>) -> Result<(T, Array1<T>)> {
    if scores.len() != target.len() {
        return Err(Error::Shape("score and target lengths differ".into()));
    }
    if target.iter().any(|&t| !(T::zero()..=T::one()).contains(&t)) {
        return Err(Error::config("sigmoid targets must lie in [0, 1]"));
    }
    let mut loss = T::zero();
    let mut grad = Array1::zeros(scores.len());
    for ((&s, &t), g) in scores.iter().zip(target.iter()).zip(grad.iter_mut()) {
        // log(1 + e^s) − t·s, computed stably
        loss += s.max(T::zero()) + (-s.abs()).exp().ln_1p() - t * s;
        *g = T::one() / (T::one() + (-s).exp()) - t;
    }
    Ok((loss, grad))
}
