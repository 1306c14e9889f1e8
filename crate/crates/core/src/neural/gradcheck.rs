//! Central finite-difference checks of every layer's backward pass.
//!
//! Each trial draws a random input and a random upstream gradient `r`,
//! differentiates `Σ r ⊙ f(x)` numerically in 64-bit arithmetic and compares
//! with the analytic gradient. Inputs closer than [`KINK_MARGIN`] to a
//! non-differentiable point are redrawn.

use ndarray::{Array1, Array2};
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::layers::{
    batch_norm_backward, batch_norm_forward, block_activation_backward, block_activation_forward,
    block_max_pool_backward, block_max_pool_forward, dense_backward, dense_forward, relu_backward,
    relu_forward, BatchNorm, Dense, Layer,
};
use super::loss::{softmax_cross_entropy, uniform_target, Head};
use super::network::{ArchConfig, Architecture, Network, ParamBuffers};
use crate::rng::{rng_from, Rng};

pub const STEP: f64 = 1e-6;
pub const KINK_MARGIN: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub layer: &'static str,
    pub trials: usize,
    /// Largest per-trial relative error `‖a − n‖ / (‖a‖ + ‖n‖)`.
    pub max_rel_error: f64,
    /// Inputs redrawn for lying near a kink.
    pub redrawn: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn normal(rng: &mut Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt() + n.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Numerical gradient of `f` with respect to every entry of `x`.
fn numeric(x: &Array2<f64>, mut f: impl FnMut(&Array2<f64>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for idx in 0..x.len() {
        let orig = probe.as_slice().unwrap()[idx];
        probe.as_slice_mut().unwrap()[idx] = orig + STEP;
        let plus = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig - STEP;
        let minus = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        out.push((plus - minus) / (2.0 * STEP));
    }
    out
}

fn numeric1(x: &Array1<f64>, mut f: impl FnMut(&Array1<f64>) -> f64) -> Vec<f64> {
    let as2 = x.clone().insert_axis(ndarray::Axis(0));
    numeric(&as2, |p| f(&p.row(0).to_owned()))
}

fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a * b).sum()
}

fn flat<'a>(parts: impl IntoIterator<Item = &'a [f64]>) -> Vec<f64> {
    parts.into_iter().flat_map(|p| p.iter().copied()).collect()
}

fn run(layer: &'static str, trials: usize, mut trial: impl FnMut() -> (f64, usize)) -> GradCheckReport {
    let mut max_rel_error: f64 = 0.0;
    let mut redrawn = 0;
    for _ in 0..trials {
        let (err, r) = trial();
        max_rel_error = max_rel_error.max(err);
        redrawn += r;
    }
    GradCheckReport { layer, trials, max_rel_error, redrawn }
}

pub fn check_dense(trials: usize, seed: u64) -> GradCheckReport {
    let mut rng = rng_from(seed);
    run("dense", trials, || {
        let (batch, input, output) = (3, 5, 4);
        let layer = Dense { w: normal(&mut rng, (output, input)), b: normal(&mut rng, (1, output)).row(0).to_owned() };
        let x = normal(&mut rng, (batch, input));
        let r = normal(&mut rng, (batch, output));
        let g = dense_backward(&layer, x.view(), r.view());
        let nx = numeric(&x, |p| dot(&dense_forward(&layer, p.view()).unwrap(), &r));
        let nw = numeric(&layer.w, |w| {
            let l = Dense { w: w.clone(), b: layer.b.clone() };
            dot(&dense_forward(&l, x.view()).unwrap(), &r)
        });
        let nb = numeric1(&layer.b, |b| {
            let l = Dense { w: layer.w.clone(), b: b.clone() };
            dot(&dense_forward(&l, x.view()).unwrap(), &r)
        });
        let a = flat([g.input.as_slice().unwrap(), g.w.as_slice().unwrap(), g.b.as_slice().unwrap()]);
        let n = flat([nx.as_slice(), nw.as_slice(), nb.as_slice()]);
        (rel_error(&a, &n), 0)
    })
}

pub fn check_batch_norm(trials: usize, seed: u64) -> GradCheckReport {
    let mut rng = rng_from(seed);
    run("batch_norm", trials, || {
        let (batch, width) = (6, 4);
        let mut layer = BatchNorm::<f64>::new(width);
        layer.gamma = normal(&mut rng, (1, width)).row(0).to_owned();
        layer.beta = normal(&mut rng, (1, width)).row(0).to_owned();
        let x = normal(&mut rng, (batch, width)) * 2.0 + 0.5;
        let r = normal(&mut rng, (batch, width));
        let eval = |l: &BatchNorm<f64>, x: &Array2<f64>| {
            let mut l = l.clone();
            dot(&batch_norm_forward(&mut l, x.view(), true).unwrap().0, &r)
        };
        let (_, cache) = batch_norm_forward(&mut layer.clone(), x.view(), true).unwrap();
        let (dx, dgamma, dbeta) = batch_norm_backward(&layer, &cache.unwrap(), r.view());
        let nx = numeric(&x, |p| eval(&layer, p));
        let ng = numeric1(&layer.gamma, |g| eval(&BatchNorm { gamma: g.clone(), ..layer.clone() }, &x));
        let nb = numeric1(&layer.beta, |b| eval(&BatchNorm { beta: b.clone(), ..layer.clone() }, &x));
        let a = flat([dx.as_slice().unwrap(), dgamma.as_slice().unwrap(), dbeta.as_slice().unwrap()]);
        let n = flat([nx.as_slice(), ng.as_slice(), nb.as_slice()]);
        (rel_error(&a, &n), 0)
    })
}

/// Draws until `ok` accepts the sample; returns it with the redraw count.
fn draw_until(rng: &mut Rng, shape: (usize, usize), ok: impl Fn(&Array2<f64>) -> bool) -> (Array2<f64>, usize) {
    let mut redrawn = 0;
    loop {
        let x = normal(rng, shape);
        if ok(&x) {
            return (x, redrawn);
        }
        redrawn += 1;
    }
}

pub fn check_relu(trials: usize, seed: u64) -> GradCheckReport {
    let mut rng = rng_from(seed);
    run("relu", trials, || {
        let (x, redrawn) = draw_until(&mut rng, (3, 6), |x| x.iter().all(|v| v.abs() > KINK_MARGIN + STEP));
        let r = normal(&mut rng, (3, 6));
        let (_, mask) = relu_forward(x.view());
        let a = relu_backward(r.view(), &mask);
        let n = numeric(&x, |p| dot(&relu_forward(p.view()).0, &r));
        (rel_error(a.as_slice().unwrap(), &n), redrawn)
    })
}

fn block_maxima(x: &Array2<f64>, block: usize) -> impl Iterator<Item = f64> + '_ {
    x.rows()
        .into_iter()
        .flat_map(move |row| row.to_vec().chunks(block).map(|c| c.iter().cloned().fold(f64::MIN, f64::max)).collect::<Vec<_>>())
}

pub fn check_block_activation(trials: usize, seed: u64) -> GradCheckReport {
    let mut rng = rng_from(seed);
    let block = 3;
    run("block_activation", trials, || {
        let (x, redrawn) = draw_until(&mut rng, (3, 4 * block), |x| {
            block_maxima(x, block).all(|m| m.abs() > KINK_MARGIN + STEP)
        });
        let r = normal(&mut rng, (3, 4 * block));
        let (_, mask) = block_activation_forward(x.view(), block).unwrap();
        let a = block_activation_backward(r.view(), &mask, block);
        let n = numeric(&x, |p| dot(&block_activation_forward(p.view(), block).unwrap().0, &r));
        (rel_error(a.as_slice().unwrap(), &n), redrawn)
    })
}

pub fn check_block_max_pool(trials: usize, seed: u64) -> GradCheckReport {
    let mut rng = rng_from(seed);
    let block = 3;
    let width = 4 * block;
    run("block_max_pool", trials, || {
        let separated = |x: &Array2<f64>| {
            x.rows().into_iter().all(|row| {
                row.to_vec().chunks(block).all(|c| {
                    let mut s = c.to_vec();
                    s.sort_by(|a, b| b.total_cmp(a));
                    s[0] - s[1] > 2.0 * (KINK_MARGIN + STEP)
                })
            })
        };
        let (x, redrawn) = draw_until(&mut rng, (3, width), separated);
        let r = normal(&mut rng, (3, width / block));
        let (_, arg) = block_max_pool_forward(x.view(), block).unwrap();
        let a = block_max_pool_backward(r.view(), &arg, width);
        let n = numeric(&x, |p| dot(&block_max_pool_forward(p.view(), block).unwrap().0, &r));
        (rel_error(a.as_slice().unwrap(), &n), redrawn)
    })
}

pub fn check_softmax_cross_entropy(trials: usize, seed: u64) -> GradCheckReport {
    let mut rng = rng_from(seed);
    run("softmax_cross_entropy", trials, || {
        let users = 7;
        let s = normal(&mut rng, (1, users)).row(0).to_owned() * 3.0;
        let n_active = rng.gen_range(1..=3);
        let mut active: Vec<usize> = rand::seq::index::sample(&mut rng, users, n_active).into_vec();
        active.sort_unstable();
        let t = uniform_target::<f64>(users, &active);
        let (_, a) = softmax_cross_entropy(s.view(), t.view()).unwrap();
        let n = numeric1(&s, |p| softmax_cross_entropy(p.view(), t.view()).unwrap().0);
        (rel_error(a.as_slice().unwrap(), &n), 0)
    })
}

/// End-to-end check of a small BRNN or DNN (residual wiring included),
/// on every parameter of every dense and batch-norm layer.
pub fn check_network(arch: Architecture, trials: usize, seed: u64) -> GradCheckReport {
    let mut rng = rng_from(seed);
    let name = match arch {
        Architecture::Brnn => "brnn_network",
        Architecture::Dnn => "dnn_network",
    };
    let config = ArchConfig { relu_layers: 1, relu_width: Some(8), residual_blocks: 2, head: Head::Softmax };
    run(name, trials, || {
        let (users, block, m) = (3, 2, 3);
        let net = Network::<f64>::build(arch, users, block, m, &config, rng.gen()).unwrap();
        let x = normal(&mut rng, (5, 2 * m));
        let t = Array2::from_shape_fn((5, users), |(i, k)| if k == i % users { 1.0 } else { 0.0 });
        let loss = |n: &Network<f64>| n.clone().loss_and_grads(x.view(), t.view()).unwrap().0;
        let (_, grads) = net.clone().loss_and_grads(x.view(), t.view()).unwrap();
        let mut a = Vec::new();
        let mut n = Vec::new();
        for (i, g) in grads.iter().enumerate() {
            match (g, &net.layers[i]) {
                (ParamBuffers::Dense { w, b }, Layer::Dense(d)) => {
                    a.extend(w.iter().chain(b.iter()));
                    n.extend(numeric(&d.w, |p| {
                        let mut probe = net.clone();
                        if let Layer::Dense(pd) = &mut probe.layers[i] {
                            pd.w.assign(p);
                        }
                        loss(&probe)
                    }));
                    n.extend(numeric1(&d.b, |p| {
                        let mut probe = net.clone();
                        if let Layer::Dense(pd) = &mut probe.layers[i] {
                            pd.b.assign(p);
                        }
                        loss(&probe)
                    }));
                }
                (ParamBuffers::BatchNorm { gamma, beta }, Layer::BatchNorm(bn)) => {
                    a.extend(gamma.iter().chain(beta.iter()));
                    n.extend(numeric1(&bn.gamma, |p| {
                        let mut probe = net.clone();
                        if let Layer::BatchNorm(pb) = &mut probe.layers[i] {
                            pb.gamma.assign(p);
                        }
                        loss(&probe)
                    }));
                    n.extend(numeric1(&bn.beta, |p| {
                        let mut probe = net.clone();
                        if let Layer::BatchNorm(pb) = &mut probe.layers[i] {
                            pb.beta.assign(p);
                        }
                        loss(&probe)
                    }));
                }
                _ => {}
            }
        }
        (rel_error(&a, &n), 0)
    })
}

/// Every single-layer check plus both end-to-end network checks.
pub fn check_all(trials: usize, seed: u64) -> Vec<GradCheckReport> {
    vec![
        check_dense(trials, seed),
        check_batch_norm(trials, seed + 1),
        check_relu(trials, seed + 2),
        check_block_activation(trials, seed + 3),
        check_block_max_pool(trials, seed + 4),
        check_softmax_cross_entropy(trials, seed + 5),
        check_network(Architecture::Brnn, trials.min(5), seed + 6),
        check_network(Architecture::Dnn, trials.min(5), seed + 7),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_passes() {
        for report in check_all(20, 99) {
            assert!(report.passed(), "{report:?}");
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let a = [1.0, 2.0, 3.0];
        assert!(rel_error(&a, &[1.0, 2.0, 3.0 + 1e-3]) > TOLERANCE);
        assert_eq!(rel_error(&[0.0; 3], &[0.0; 3]), 0.0);
    }
}
