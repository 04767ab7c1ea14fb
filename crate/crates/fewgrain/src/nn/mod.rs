//! Minimal CPU neural-network stack: layers with explicit forward/backward
//! passes, a layer graph, and SGD with momentum.
//!
//! Convolutional activations and parameters are `f32`; embeddings and the
//! classification head run in `f64` (see `backbone`). Batch work is
//! parallelized in fixed-order chunks so results do not depend on thread
//! scheduling.

mod conv;
mod graph;
mod layers;

pub use conv::Conv2d;
pub use graph::{
    backward_nodes, for_each_param, forward_eval, forward_train, param_tensor_count, Node,
    NodeCache, ResidualBlock,
};
pub use layers::{BatchNorm2d, BnCache, Linear, MaxPool2d};

use ndarray::ArrayD;
use rand::RngCore;
use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;

/// Number of fixed batch chunks used for deterministic parallel reduction.
pub(crate) const GRAD_CHUNKS: usize = 8;

/// Derive an independent, reproducible random stream from a master seed
/// and a purpose tag.
pub fn seeded_stream(seed: u64, tag: &str) -> ChaCha12Rng {
    // FNV-1a over the tag, mixed with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha12Rng::seed_from_u64(seed ^ h)
}

/// Standard normal draw via Box-Muller; deterministic given the stream.
pub fn normal(rng: &mut impl RngCore) -> f64 {
    loop {
        let u1 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        let u2 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// Uniform draw in `[0, 1)`.
pub fn uniform(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

/// Deterministic Fisher-Yates shuffle.
pub fn shuffle<T>(items: &mut [T], rng: &mut impl RngCore) {
    for i in (1..items.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        items.swap(i, j);
    }
}

/// Sample `k` distinct indices from `0..n` without replacement.
pub fn sample_without_replacement(n: usize, k: usize, rng: &mut impl RngCore) -> Vec<usize> {
    assert!(k <= n);
    let mut idx: Vec<usize> = (0..n).collect();
    shuffle(&mut idx, rng);
    idx.truncate(k);
    idx
}

/// Gradient slots for the `f32` parameters of a node list, in the same
/// stable order as [`visit_params_f32`].
pub type GradStore = Vec<Option<ArrayD<f32>>>;

/// SGD with momentum and weight decay over flat `f32`/`f64` parameter lists.
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    vel_f32: Vec<Vec<f32>>,
    vel_f64: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            vel_f32: Vec::new(),
            vel_f64: Vec::new(),
        }
    }

    /// Update one f32 parameter tensor (identified by its stable slot index).
    pub fn step_f32(&mut self, slot: usize, param: &mut [f32], grad: &[f32]) {
        while self.vel_f32.len() <= slot {
            self.vel_f32.push(Vec::new());
        }
        let vel = &mut self.vel_f32[slot];
        if vel.len() != param.len() {
            *vel = vec![0.0; param.len()];
        }
        let lr = self.lr as f32;
        let mu = self.momentum as f32;
        let wd = self.weight_decay as f32;
        for ((p, &g), v) in param.iter_mut().zip(grad.iter()).zip(vel.iter_mut()) {
            *v = mu * *v - lr * (g + wd * *p);
            *p += *v;
        }
    }

    /// Update one f64 parameter tensor.
    pub fn step_f64(&mut self, slot: usize, param: &mut [f64], grad: &[f64]) {
        while self.vel_f64.len() <= slot {
            self.vel_f64.push(Vec::new());
        }
        let vel = &mut self.vel_f64[slot];
        if vel.len() != param.len() {
            *vel = vec![0.0; param.len()];
        }
        for ((p, &g), v) in param.iter_mut().zip(grad.iter()).zip(vel.iter_mut()) {
            *v = self.momentum * *v - self.lr * (g + self.weight_decay * *p);
            *p += *v;
        }
    }
}
