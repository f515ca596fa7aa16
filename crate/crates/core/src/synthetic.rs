//! Seeded model generators, a synthetic 10-class image task and a small SGD
//! trainer used to build the bundled fixtures.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, StudentT};

use crate::error::Result;
use crate::netmodel::engine::{self, Params};
use crate::netmodel::{Conv2d, Layer, Linear, NetworkModel, Pool};
use crate::tensor::Tensor;

/// Side of the fixture input image.
pub const FIXTURE_SIDE: usize = 16;
pub const FIXTURE_CLASSES: usize = 10;

fn normal_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f32> {
    let d = Normal::new(0.0, std).unwrap();
    (0..n).map(|_| d.sample(rng) as f32).collect()
}

fn he(rng: &mut impl Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, normal_vec(rng, n, (2.0 / fan_in as f64).sqrt())).unwrap()
}

fn conv(rng: &mut impl Rng, k: usize, c: usize, ks: usize, pad: usize) -> Layer {
    Layer::Conv2d(Conv2d {
        weight: he(rng, vec![k, c, ks, ks], c * ks * ks),
        bias: Some(normal_vec(rng, k, 0.05)),
        stride: 1,
        padding: pad,
    })
}

fn linear(rng: &mut impl Rng, out: usize, inp: usize) -> Layer {
    Layer::Linear(Linear {
        weight: he(rng, vec![out, inp], inp),
        bias: Some(normal_vec(rng, out, 0.05)),
    })
}

/// The fixture topology with He-initialized weights: two 3×3 conv blocks
/// (16 and 32 kernels, relu, 2×2 max pooling) and a 512→64→10 classifier
/// head, on 1×16×16 inputs.
pub fn fixture_model(seed: u64) -> NetworkModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = Pool { window: 2, stride: 2 };
    let side = FIXTURE_SIDE / 4;
    NetworkModel::new(
        vec![1, FIXTURE_SIDE, FIXTURE_SIDE],
        vec![
            conv(&mut rng, 16, 1, 3, 1),
            Layer::Relu,
            Layer::MaxPool(pool),
            conv(&mut rng, 32, 16, 3, 1),
            Layer::Relu,
            Layer::MaxPool(pool),
            Layer::Flatten,
            linear(&mut rng, 64, 32 * side * side),
            Layer::Relu,
            linear(&mut rng, FIXTURE_CLASSES, 64),
        ],
    )
    .expect("fixture topology")
}

/// A small random conv net: conv, relu, optional pooling, a second conv,
/// and a linear head. Extents are drawn from `rng`.
pub fn random_conv_net(rng: &mut impl Rng) -> NetworkModel {
    let c = rng.random_range(1..=3);
    let side = rng.random_range(6..=9);
    let k1 = rng.random_range(2..=6);
    let k2 = rng.random_range(2..=6);
    let mut layers = vec![conv(rng, k1, c, 3, 1), Layer::Relu];
    let mut s = side;
    if rng.random_bool(0.5) {
        layers.push(Layer::MaxPool(Pool { window: 2, stride: 2 }));
        s /= 2;
    } else if rng.random_bool(0.5) {
        layers.push(Layer::AvgPool(Pool { window: 2, stride: 1 }));
        s -= 1;
    }
    let pad = rng.random_range(0..=1);
    layers.push(conv(rng, k2, k1, 3, pad));
    s = s + 2 * pad - 2;
    layers.push(Layer::Relu);
    layers.push(Layer::Flatten);
    let out = rng.random_range(2..=5);
    layers.push(linear(rng, out, k2 * s * s));
    NetworkModel::new(vec![c, side, side], layers).expect("random topology")
}

/// A linear-only net `dims[0] → dims[1] → …` without biases.
pub fn random_linear_net(rng: &mut impl Rng, dims: &[usize]) -> NetworkModel {
    let layers = dims
        .windows(2)
        .map(|d| {
            Layer::Linear(Linear {
                weight: he(rng, vec![d[1], d[0]], d[0]),
                bias: None,
            })
        })
        .collect();
    NetworkModel::new(vec![dims[0]], layers).expect("linear topology")
}

/// A 32-kernel 3×3 conv layer of unit Gaussian weights where kernel 0
/// also holds one weight of 100, so its dynamic range is 100× that of the
/// other kernels.
pub fn high_dynamic_range_layer(seed: u64) -> NetworkModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = random_tensor(&mut rng, vec![32, 4, 3, 3], Dist::Gaussian);
    w.data_mut()[0] = 100.0;
    NetworkModel::new(
        vec![4, 6, 6],
        vec![Layer::Conv2d(Conv2d {
            weight: w,
            bias: None,
            stride: 1,
            padding: 1,
        })],
    )
    .expect("layer shape")
}

/// Value distributions for random test tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dist {
    Gaussian,
    Uniform,
    Laplace,
    /// Student-t with 2 degrees of freedom.
    HeavyTail,
    LogNormal,
}

impl Dist {
    pub const ALL: [Dist; 5] = [
        Dist::Gaussian,
        Dist::Uniform,
        Dist::Laplace,
        Dist::HeavyTail,
        Dist::LogNormal,
    ];

    pub fn sample(&self, rng: &mut impl Rng) -> f32 {
        match self {
            Dist::Gaussian => Normal::new(0.0, 1.0).unwrap().sample(rng) as f32,
            Dist::Uniform => rng.random_range(-1.0..1.0),
            Dist::Laplace => {
                let u: f64 = rng.random_range(-0.5..0.5);
                (-u.signum() * (1.0 - 2.0 * u.abs()).ln()) as f32
            }
            Dist::HeavyTail => StudentT::new(2.0).unwrap().sample(rng) as f32,
            Dist::LogNormal => LogNormal::new(0.0, 1.0).unwrap().sample(rng) as f32,
        }
    }
}

pub fn random_tensor(rng: &mut impl Rng, shape: Vec<usize>, dist: Dist) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
}

/// Ten classes of smooth blob patterns on a 16×16 canvas. Samples are the
/// class pattern shifted by up to two pixels, rescaled, plus noise.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    prototypes: Vec<Vec<f32>>,
    pub noise: f32,
    pub max_shift: i32,
}

impl SyntheticTask {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = FIXTURE_SIDE as f32;
        let prototypes = (0..FIXTURE_CLASSES)
            .map(|_| {
                let blobs: Vec<(f32, f32, f32, f32)> = (0..4)
                    .map(|_| {
                        (
                            rng.random_range(2.0..side - 2.0),
                            rng.random_range(2.0..side - 2.0),
                            rng.random_range(1.0..3.0),
                            if rng.random_bool(0.7) { 1.0 } else { -0.6 },
                        )
                    })
                    .collect();
                let mut img = vec![0.0f32; FIXTURE_SIDE * FIXTURE_SIDE];
                for y in 0..FIXTURE_SIDE {
                    for x in 0..FIXTURE_SIDE {
                        img[y * FIXTURE_SIDE + x] = blobs
                            .iter()
                            .map(|&(cy, cx, r, a)| {
                                let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                                a * (-d2 / (2.0 * r * r)).exp()
                            })
                            .sum();
                    }
                }
                img
            })
            .collect();
        Self {
            prototypes,
            noise: 0.25,
            max_shift: 2,
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> (Tensor, usize) {
        let label = rng.random_range(0..FIXTURE_CLASSES);
        let (dy, dx) = (
            rng.random_range(-self.max_shift..=self.max_shift),
            rng.random_range(-self.max_shift..=self.max_shift),
        );
        let gain = rng.random_range(0.8f32..1.2);
        let noise = Normal::new(0.0, self.noise as f64).unwrap();
        let n = FIXTURE_SIDE as i32;
        let p = &self.prototypes[label];
        let mut img = vec![0.0f32; FIXTURE_SIDE * FIXTURE_SIDE];
        for y in 0..n {
            for x in 0..n {
                let (sy, sx) = (y - dy, x - dx);
                let base = if (0..n).contains(&sy) && (0..n).contains(&sx) {
                    p[(sy * n + sx) as usize]
                } else {
                    0.0
                };
                img[(y * n + x) as usize] = gain * base + noise.sample(rng) as f32;
            }
        }
        let t = Tensor::new(vec![1, FIXTURE_SIDE, FIXTURE_SIDE], img).unwrap();
        (t, label)
    }

    pub fn batch(&self, rng: &mut impl Rng, n: usize) -> (Vec<Tensor>, Vec<usize>) {
        (0..n).map(|_| self.sample(rng)).unzip()
    }
}

/// Index of the largest entry (first on ties).
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 32,
            learning_rate: 0.02,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// Softmax cross-entropy training with momentum SGD. Returns the trained
/// model and the mean training loss of every epoch.
pub fn train_classifier(
    model: &NetworkModel,
    inputs: &[Tensor],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(NetworkModel, Vec<f64>)> {
    let mut params = Params::from_model(model);
    let mut vel_w: Vec<Option<Vec<f64>>> = params
        .weights
        .iter()
        .map(|w| w.as_ref().map(|w| vec![0.0; w.len()]))
        .collect();
    let mut vel_b: Vec<Option<Vec<f64>>> = params
        .biases
        .iter()
        .map(|b| b.as_ref().map(|b| vec![0.0; b.len()]))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut gw: Vec<Option<Vec<f64>>> = vel_w.iter().map(|v| v.as_ref().map(|v| vec![0.0; v.len()])).collect();
            let mut gb: Vec<Option<Vec<f64>>> = vel_b.iter().map(|v| v.as_ref().map(|v| vec![0.0; v.len()])).collect();
            for &s in chunk {
                let x = inputs[s].data().iter().map(|&v| v as f64).collect();
                let (y, trace) = engine::forward(model, &params, x, &mut engine::no_hook, true)?;
                let m = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = y.iter().map(|v| (v - m).exp()).sum();
                total += z.ln() + m - y[labels[s]];
                let mut gy: Vec<f64> = y.iter().map(|v| (v - m).exp() / z).collect();
                gy[labels[s]] -= 1.0;
                let g = engine::backward(model, &params, &trace.unwrap(), gy);
                for (acc, g) in gw.iter_mut().zip(g.weights).chain(gb.iter_mut().zip(g.biases)) {
                    if let (Some(acc), Some(g)) = (acc.as_mut(), g) {
                        acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                    }
                }
            }
            let scale = cfg.learning_rate / chunk.len() as f64;
            let step = |p: &mut Vec<Option<Vec<f64>>>, v: &mut Vec<Option<Vec<f64>>>, g: Vec<Option<Vec<f64>>>| {
                for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                    if let (Some(p), Some(v), Some(g)) = (p.as_mut(), v.as_mut(), g) {
                        for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                            *v = cfg.momentum * *v - scale * g;
                            *p += *v;
                        }
                    }
                }
            };
            step(&mut params.weights, &mut vel_w, gw);
            step(&mut params.biases, &mut vel_b, gb);
        }
        losses.push(total / inputs.len() as f64);
    }
    let mut layers = model.layers().to_vec();
    for (i, layer) in layers.iter_mut().enumerate() {
        let to32 = |v: &Vec<f64>| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        match layer {
            Layer::Conv2d(c) => {
                c.weight = Tensor::new(c.weight.shape().to_vec(), to32(params.weights[i].as_ref().unwrap()))?;
                c.bias = params.biases[i].as_ref().map(to32);
            }
            Layer::Linear(l) => {
                l.weight = Tensor::new(l.weight.shape().to_vec(), to32(params.weights[i].as_ref().unwrap()))?;
                l.bias = params.biases[i].as_ref().map(to32);
            }
            _ => {}
        }
    }
    Ok((NetworkModel::new(model.input_shape().to_vec(), layers)?, losses))
}
