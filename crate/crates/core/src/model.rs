//! Small from-scratch classifiers: a 1-D CNN (conv, batch-norm, ReLU and
//! max-pool blocks, then a global max-pool and a dense head) and a plain MLP.
//! Attribution only ever sees class probabilities.
//!
//! Networks are generic over the scalar so the same code runs in f32 for
//! training and attribution and in f64 for gradient checking. Convolution and
//! dense dot products accumulate in the network scalar; batch-norm statistics,
//! the loss, softmax and weight-gradient reductions accumulate in f64.

use std::fmt::Debug;
use std::fs;
use std::io::{BufWriter, Write};
use std::ops::{Add, AddAssign, Mul, Sub};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::error::{invalid, Error, Result};

/// Scalar used for parameters and activations.
pub trait Real:
    Copy
    + Debug
    + Default
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + AddAssign
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn zero() -> Self {
        Self::default()
    }
    fn max(self, other: Self) -> Self;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn max(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn max(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Anything that maps a fixed-length signal to class probabilities.
pub trait Classifier: Sync {
    fn input_length(&self) -> usize;
    fn class_count(&self) -> usize;
    fn predict(&self, x: &[f64]) -> Vec<f64>;

    fn predict_batch(&self, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        xs.iter().map(|x| self.predict(x)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Cnn1d,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub input_length: usize,
    pub class_count: usize,
    /// Output channels per conv block (cnn only).
    #[serde(default)]
    pub channels: Vec<usize>,
    #[serde(default)]
    pub kernels: Vec<usize>,
    /// Max-pool size per conv block, 1 for none.
    #[serde(default)]
    pub pools: Vec<usize>,
    #[serde(default = "yes")]
    pub batch_norm: bool,
    /// Hidden dense widths before the output layer.
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    /// Four conv blocks, 8→16→32→64 channels, kernels 15/5/5/5, pools
    /// 4/4/2/2, a global max-pool and one 64-wide hidden layer.
    pub fn cnn(input_length: usize, class_count: usize, seed: u64) -> Self {
        Self {
            kind: ModelKind::Cnn1d,
            input_length,
            class_count,
            channels: vec![8, 16, 32, 64],
            kernels: vec![15, 5, 5, 5],
            pools: vec![4, 4, 2, 2],
            batch_norm: true,
            hidden: vec![64],
            seed,
        }
    }

    /// The full-size network: eight conv blocks up to 1024 channels (the last
    /// without pooling), global max-pool, then 256 and 64 wide hidden layers.
    pub fn reference_cnn(input_length: usize, class_count: usize, seed: u64) -> Self {
        Self {
            kind: ModelKind::Cnn1d,
            input_length,
            class_count,
            channels: vec![8, 16, 32, 64, 128, 256, 512, 1024],
            kernels: vec![7, 3, 3, 3, 3, 3, 3, 3],
            pools: vec![2, 2, 2, 2, 2, 2, 2, 1],
            batch_norm: true,
            hidden: vec![256, 64],
            seed,
        }
    }

    pub fn mlp(input_length: usize, class_count: usize, seed: u64) -> Self {
        Self {
            kind: ModelKind::Mlp,
            input_length,
            class_count,
            channels: vec![],
            kernels: vec![],
            pools: vec![],
            batch_norm: false,
            hidden: vec![128, 64],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.class_count < 2 {
            return cfg(format!("need at least 2 classes, got {}", self.class_count));
        }
        if self.input_length == 0 {
            return cfg("input length must be positive".into());
        }
        if self.hidden.contains(&0) {
            return cfg("hidden widths must be positive".into());
        }
        if self.kind == ModelKind::Cnn1d {
            let n = self.channels.len();
            if n == 0 || self.kernels.len() != n || self.pools.len() != n {
                return cfg("channels, kernels and pools must be non-empty and of equal length".into());
            }
            if self.channels.contains(&0) || self.kernels.contains(&0) || self.pools.contains(&0) {
                return cfg("channels, kernels and pools must be positive".into());
            }
            let mut len = self.input_length;
            for (b, (&k, &p)) in self.kernels.iter().zip(&self.pools).enumerate() {
                if len < k {
                    return cfg(format!("conv block {b}: input of length {len} is shorter than kernel {k}"));
                }
                len = (len - k + 1) / p;
                if len == 0 {
                    return cfg(format!("conv block {b}: pooling leaves no samples"));
                }
            }
        }
        Ok(())
    }

    /// Feature length after each conv block, before and after pooling.
    pub fn block_lengths(&self) -> Vec<(usize, usize)> {
        let mut len = self.input_length;
        self.kernels
            .iter()
            .zip(&self.pools)
            .map(|(&k, &p)| {
                let conv = len + 1 - k;
                len = conv / p;
                (conv, len)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Layer {
    Conv {
        in_c: usize,
        out_c: usize,
        k: usize,
        w: usize,
        bias: Option<usize>,
    },
    BatchNorm {
        c: usize,
        gamma: usize,
        beta: usize,
        stats: usize,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    GlobalMaxPool,
    Dense {
        inputs: usize,
        outputs: usize,
        w: usize,
        b: usize,
    },
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Batch activations laid out `[batch][channel][time]`.
#[derive(Debug, Clone)]
struct Act<T> {
    b: usize,
    c: usize,
    l: usize,
    data: Vec<T>,
}

impl<T: Real> Act<T> {
    fn zeros(b: usize, c: usize, l: usize) -> Self {
        Self {
            b,
            c,
            l,
            data: vec![T::zero(); b * c * l],
        }
    }

    fn plane(&self, b: usize, c: usize) -> &[T] {
        let s = (b * self.c + c) * self.l;
        &self.data[s..s + self.l]
    }
}

enum Cache<T> {
    Conv(Act<T>),
    BatchNorm { xhat: Act<T>, invstd: Vec<f64> },
    Relu(Act<T>),
    Pool { argmax: Vec<u32>, in_l: usize, out_l: usize },
    Dense(Act<T>),
}

/// Batch statistics observed by one batch-norm layer in a training pass.
#[derive(Debug, Clone)]
pub struct BatchStats {
    mean: Vec<f64>,
    var: Vec<f64>,
    count: usize,
}

/// Network structure, weights and batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    config: ModelConfig,
    layers: Vec<Layer>,
    params: Vec<T>,
    /// Running mean then running variance for each batch-norm layer.
    stats: Vec<T>,
}

impl<T: Real> Network<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        let mut n_params = 0usize;
        let mut n_stats = 0usize;
        let mut take = |n: usize| {
            n_params += n;
            n_params - n
        };
        let mut features = match config.kind {
            ModelKind::Cnn1d => {
                let mut in_c = 1;
                for ((&out_c, &k), &pool) in config.channels.iter().zip(&config.kernels).zip(&config.pools) {
                    let w = take(out_c * in_c * k);
                    // batch-norm's shift makes a conv bias redundant
                    let bias = (!config.batch_norm).then(|| take(out_c));
                    layers.push(Layer::Conv { in_c, out_c, k, w, bias });
                    if config.batch_norm {
                        let gamma = take(out_c);
                        let beta = take(out_c);
                        layers.push(Layer::BatchNorm {
                            c: out_c,
                            gamma,
                            beta,
                            stats: n_stats,
                        });
                        n_stats += 2 * out_c;
                    }
                    layers.push(Layer::Relu);
                    if pool > 1 {
                        layers.push(Layer::MaxPool { size: pool });
                    }
                    in_c = out_c;
                }
                layers.push(Layer::GlobalMaxPool);
                in_c
            }
            ModelKind::Mlp => config.input_length,
        };
        for &h in config.hidden.iter().chain(std::iter::once(&config.class_count)) {
            let w = take(h * features);
            let b = take(h);
            layers.push(Layer::Dense {
                inputs: features,
                outputs: h,
                w,
                b,
            });
            layers.push(Layer::Relu);
            features = h;
        }
        layers.pop(); // logits stay linear

        let mut params = vec![T::zero(); n_params];
        let mut stats = vec![T::zero(); n_stats];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for layer in &layers {
            match *layer {
                Layer::Conv { in_c, out_c, k, w, .. } => {
                    init_he(&mut params[w..w + out_c * in_c * k], in_c * k, &mut rng)
                }
                Layer::Dense { inputs, outputs, w, .. } => {
                    init_he(&mut params[w..w + inputs * outputs], inputs, &mut rng)
                }
                Layer::BatchNorm { c, gamma, stats: s, .. } => {
                    params[gamma..gamma + c].fill(T::from_f64(1.0));
                    stats[s + c..s + 2 * c].fill(T::from_f64(1.0));
                }
                _ => {}
            }
        }
        Ok(Self {
            config: config.clone(),
            layers,
            params,
            stats,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn state_count(&self) -> usize {
        self.stats.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[T] {
        &self.stats
    }

    /// Logits for one input, using running batch-norm statistics.
    pub fn logits(&self, x: &[T]) -> Vec<f64> {
        assert_eq!(x.len(), self.config.input_length, "input length mismatch");
        let mut cur: Vec<T> = x.to_vec();
        let mut next: Vec<T> = Vec::new();
        let (mut c, mut l) = match self.config.kind {
            ModelKind::Cnn1d => (1, x.len()),
            ModelKind::Mlp => (x.len(), 1),
        };
        let p = &self.params;
        for layer in &self.layers {
            match *layer {
                Layer::Conv { in_c, out_c, k, w, bias } => {
                    let out_l = l + 1 - k;
                    next.clear();
                    next.resize(out_c * out_l, T::zero());
                    conv_forward(&cur, in_c, l, &p[w..w + out_c * in_c * k], out_c, k, &mut next);
                    if let Some(b) = bias {
                        for o in 0..out_c {
                            let bv = p[b + o];
                            next[o * out_l..(o + 1) * out_l].iter_mut().for_each(|v| *v += bv);
                        }
                    }
                    std::mem::swap(&mut cur, &mut next);
                    c = out_c;
                    l = out_l;
                }
                Layer::BatchNorm { c: ch, gamma, beta, stats } => {
                    for o in 0..ch {
                        let mean = self.stats[stats + o].to_f64();
                        let var = self.stats[stats + ch + o].to_f64();
                        let scale = p[gamma + o].to_f64() / (var + BN_EPS).sqrt();
                        let shift = p[beta + o].to_f64() - mean * scale;
                        let (s, h) = (T::from_f64(scale), T::from_f64(shift));
                        cur[o * l..(o + 1) * l].iter_mut().for_each(|v| *v = *v * s + h);
                    }
                }
                Layer::Relu => relu(&mut cur),
                Layer::MaxPool { size } => {
                    let out_l = l / size;
                    next.clear();
                    for plane in cur.chunks_exact(l) {
                        next.extend(plane.chunks_exact(size).take(out_l).map(max_of));
                    }
                    std::mem::swap(&mut cur, &mut next);
                    l = out_l;
                }
                Layer::GlobalMaxPool => {
                    next.clear();
                    next.extend(cur.chunks_exact(l).map(max_of));
                    std::mem::swap(&mut cur, &mut next);
                    l = 1;
                }
                Layer::Dense { inputs, outputs, w, b } => {
                    debug_assert_eq!(inputs, c * l);
                    next.clear();
                    for j in 0..outputs {
                        next.push(dot(&p[w + j * inputs..w + (j + 1) * inputs], &cur) + p[b + j]);
                    }
                    std::mem::swap(&mut cur, &mut next);
                    c = outputs;
                    l = 1;
                }
            }
        }
        cur.iter().map(|v| v.to_f64()).collect()
    }

    pub fn probabilities(&self, x: &[T]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    fn input_act(&self, batch: &[&[T]]) -> Act<T> {
        let n = self.config.input_length;
        let (c, l) = match self.config.kind {
            ModelKind::Cnn1d => (1, n),
            ModelKind::Mlp => (n, 1),
        };
        let mut a = Act::zeros(batch.len(), c, l);
        for (i, x) in batch.iter().enumerate() {
            assert_eq!(x.len(), n, "input length mismatch");
            a.data[i * n..(i + 1) * n].copy_from_slice(x);
        }
        a
    }

    /// Training-mode forward pass (batch statistics), keeping what backward needs.
    fn forward_train(&self, batch: &[&[T]]) -> (Act<T>, Vec<Cache<T>>, Vec<BatchStats>) {
        let mut a = self.input_act(batch);
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut observed = Vec::new();
        let p = &self.params;
        for layer in &self.layers {
            match *layer {
                Layer::Conv { in_c, out_c, k, w, bias } => {
                    let out_l = a.l + 1 - k;
                    let mut out = Act::zeros(a.b, out_c, out_l);
                    let wt = &p[w..w + out_c * in_c * k];
                    let (src_n, dst_n) = (in_c * a.l, out_c * out_l);
                    for bi in 0..a.b {
                        let dst = &mut out.data[bi * dst_n..(bi + 1) * dst_n];
                        conv_forward(&a.data[bi * src_n..(bi + 1) * src_n], in_c, a.l, wt, out_c, k, dst);
                        if let Some(b) = bias {
                            for o in 0..out_c {
                                let bv = p[b + o];
                                dst[o * out_l..(o + 1) * out_l].iter_mut().for_each(|v| *v += bv);
                            }
                        }
                    }
                    caches.push(Cache::Conv(a));
                    a = out;
                }
                Layer::BatchNorm { c, gamma, beta, .. } => {
                    let count = a.b * a.l;
                    let n = count as f64;
                    let mut xhat = Act::zeros(a.b, c, a.l);
                    let mut invstd = vec![0.0; c];
                    let mut mean = vec![0.0; c];
                    let mut var = vec![0.0; c];
                    for ch in 0..c {
                        let m = (0..a.b)
                            .map(|bi| a.plane(bi, ch).iter().map(|v| v.to_f64()).sum::<f64>())
                            .sum::<f64>()
                            / n;
                        let v = (0..a.b)
                            .map(|bi| a.plane(bi, ch).iter().map(|v| (v.to_f64() - m).powi(2)).sum::<f64>())
                            .sum::<f64>()
                            / n;
                        let is = 1.0 / (v + BN_EPS).sqrt();
                        let (g, be) = (p[gamma + ch].to_f64(), p[beta + ch].to_f64());
                        for bi in 0..a.b {
                            let s = (bi * c + ch) * a.l;
                            for t in s..s + a.l {
                                let xh = (a.data[t].to_f64() - m) * is;
                                xhat.data[t] = T::from_f64(xh);
                                a.data[t] = T::from_f64(g * xh + be);
                            }
                        }
                        invstd[ch] = is;
                        mean[ch] = m;
                        var[ch] = v;
                    }
                    observed.push(BatchStats { mean, var, count });
                    caches.push(Cache::BatchNorm { xhat, invstd });
                }
                Layer::Relu => {
                    let input = a.clone();
                    relu(&mut a.data);
                    caches.push(Cache::Relu(input));
                }
                Layer::MaxPool { size } => {
                    let out_l = a.l / size;
                    let (out, argmax) = pool_forward(&a, size, out_l);
                    caches.push(Cache::Pool { argmax, in_l: a.l, out_l });
                    a = out;
                }
                Layer::GlobalMaxPool => {
                    let (out, argmax) = pool_forward(&a, a.l, 1);
                    caches.push(Cache::Pool { argmax, in_l: a.l, out_l: 1 });
                    a = out;
                }
                Layer::Dense { inputs, outputs, w, b } => {
                    let mut out = Act::zeros(a.b, outputs, 1);
                    for bi in 0..a.b {
                        let x = &a.data[bi * inputs..(bi + 1) * inputs];
                        for j in 0..outputs {
                            out.data[bi * outputs + j] = dot(&p[w + j * inputs..w + (j + 1) * inputs], x) + p[b + j];
                        }
                    }
                    caches.push(Cache::Dense(a));
                    a = out;
                }
            }
        }
        (a, caches, observed)
    }

    /// Parameter gradient given the gradient at the logits.
    fn backward(&self, caches: Vec<Cache<T>>, dlogits: Vec<f64>) -> Vec<f64> {
        let p = &self.params;
        let mut grads = vec![0.0; p.len()];
        let mut d = dlogits;
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            d = match (*layer, cache) {
                (Layer::Dense { inputs, outputs, w, b }, Cache::Dense(x)) => {
                    let mut dx = vec![0.0; x.b * inputs];
                    for bi in 0..x.b {
                        let xr = &x.data[bi * inputs..(bi + 1) * inputs];
                        let dxr = &mut dx[bi * inputs..(bi + 1) * inputs];
                        for j in 0..outputs {
                            let g = d[bi * outputs + j];
                            if g == 0.0 {
                                continue;
                            }
                            grads[b + j] += g;
                            let wrow = &p[w + j * inputs..w + (j + 1) * inputs];
                            let grow = &mut grads[w + j * inputs..w + (j + 1) * inputs];
                            for i in 0..inputs {
                                grow[i] += g * xr[i].to_f64();
                                dxr[i] += g * wrow[i].to_f64();
                            }
                        }
                    }
                    dx
                }
                (Layer::Relu, Cache::Relu(x)) => {
                    for (g, v) in d.iter_mut().zip(&x.data) {
                        if !(*v > T::zero()) {
                            *g = 0.0;
                        }
                    }
                    d
                }
                (Layer::MaxPool { .. } | Layer::GlobalMaxPool, Cache::Pool { argmax, in_l, out_l }) => {
                    let planes = argmax.len() / out_l;
                    let mut dx = vec![0.0; planes * in_l];
                    for (o, (&src, g)) in argmax.iter().zip(&d).enumerate() {
                        dx[(o / out_l) * in_l + src as usize] += g;
                    }
                    dx
                }
                (Layer::BatchNorm { c, gamma, beta, .. }, Cache::BatchNorm { xhat, invstd }) => {
                    let (bsz, len) = (xhat.b, xhat.l);
                    let n = (bsz * len) as f64;
                    let mut dx = vec![0.0; d.len()];
                    for ch in 0..c {
                        let mut sum_dy = 0.0;
                        let mut sum_dy_xh = 0.0;
                        for bi in 0..bsz {
                            let s = (bi * c + ch) * len;
                            for t in s..s + len {
                                sum_dy += d[t];
                                sum_dy_xh += d[t] * xhat.data[t].to_f64();
                            }
                        }
                        grads[gamma + ch] += sum_dy_xh;
                        grads[beta + ch] += sum_dy;
                        let k = p[gamma + ch].to_f64() * invstd[ch] / n;
                        for bi in 0..bsz {
                            let s = (bi * c + ch) * len;
                            for t in s..s + len {
                                dx[t] = k * (n * d[t] - sum_dy - xhat.data[t].to_f64() * sum_dy_xh);
                            }
                        }
                    }
                    dx
                }
                (Layer::Conv { in_c, out_c, k, w, bias }, Cache::Conv(x)) => {
                    let in_l = x.l;
                    let out_l = in_l + 1 - k;
                    let mut dx = vec![0.0; x.b * in_c * in_l];
                    let mut src64 = vec![0.0; in_l];
                    for bi in 0..x.b {
                        for i in 0..in_c {
                            for (s, v) in src64.iter_mut().zip(x.plane(bi, i)) {
                                *s = v.to_f64();
                            }
                            let dxp = &mut dx[(bi * in_c + i) * in_l..(bi * in_c + i + 1) * in_l];
                            for o in 0..out_c {
                                let dy = &d[(bi * out_c + o) * out_l..(bi * out_c + o + 1) * out_l];
                                for kk in 0..k {
                                    let widx = w + (o * in_c + i) * k + kk;
                                    grads[widx] += dy.iter().zip(&src64[kk..kk + out_l]).map(|(g, s)| g * s).sum::<f64>();
                                    let wv = p[widx].to_f64();
                                    for (e, g) in dxp[kk..kk + out_l].iter_mut().zip(dy) {
                                        *e += wv * g;
                                    }
                                }
                            }
                        }
                        if let Some(bo) = bias {
                            for o in 0..out_c {
                                grads[bo + o] += d[(bi * out_c + o) * out_l..(bi * out_c + o + 1) * out_l].iter().sum::<f64>();
                            }
                        }
                    }
                    dx
                }
                _ => unreachable!("cache does not match layer"),
            };
        }
        grads
    }

    /// Mean cross-entropy of a batch in training mode, its gradient with
    /// respect to every parameter, and the batch-norm statistics seen.
    pub fn loss_and_grad(&self, batch: &[&[T]], labels: &[usize]) -> (f64, Vec<f64>, Vec<BatchStats>) {
        assert_eq!(batch.len(), labels.len());
        let (logits, caches, observed) = self.forward_train(batch);
        let k = self.config.class_count;
        let bsz = batch.len() as f64;
        let mut loss = 0.0;
        let mut dlogits = vec![0.0; logits.data.len()];
        for (bi, &y) in labels.iter().enumerate() {
            let row: Vec<f64> = logits.data[bi * k..(bi + 1) * k].iter().map(|v| v.to_f64()).collect();
            let prob = softmax(&row);
            loss -= prob[y].max(f64::MIN_POSITIVE).ln();
            for j in 0..k {
                dlogits[bi * k + j] = (prob[j] - f64::from(u8::from(j == y))) / bsz;
            }
        }
        (loss / bsz, self.backward(caches, dlogits), observed)
    }

    /// ReLU signs and pooling winners for a training-mode pass; the loss is
    /// smooth in the parameters wherever this stays fixed.
    fn activation_pattern(&self, batch: &[&[T]]) -> Vec<u32> {
        let (_, caches, _) = self.forward_train(batch);
        let mut out = Vec::new();
        for c in caches {
            match c {
                Cache::Relu(x) => out.extend(x.data.iter().map(|v| u32::from(*v > T::zero()))),
                Cache::Pool { argmax, .. } => out.extend(argmax),
                _ => {}
            }
        }
        out
    }

    /// Fold one batch's statistics into the running estimates.
    pub fn update_running_stats(&mut self, observed: &[BatchStats]) {
        let mut it = observed.iter();
        for layer in &self.layers {
            if let Layer::BatchNorm { c, stats, .. } = *layer {
                let obs = it.next().expect("one statistics record per batch-norm layer");
                let unbias = if obs.count > 1 {
                    obs.count as f64 / (obs.count - 1) as f64
                } else {
                    1.0
                };
                for ch in 0..c {
                    let rm = &mut self.stats[stats + ch];
                    *rm = T::from_f64((1.0 - BN_MOMENTUM) * rm.to_f64() + BN_MOMENTUM * obs.mean[ch]);
                    let rv = &mut self.stats[stats + c + ch];
                    *rv = T::from_f64((1.0 - BN_MOMENTUM) * rv.to_f64() + BN_MOMENTUM * obs.var[ch] * unbias);
                }
            }
        }
    }
}

impl Classifier for Network<f32> {
    fn input_length(&self) -> usize {
        self.config.input_length
    }

    fn class_count(&self) -> usize {
        self.config.class_count
    }

    fn predict(&self, x: &[f64]) -> Vec<f64> {
        let x32: Vec<f32> = x.iter().map(|v| *v as f32).collect();
        self.probabilities(&x32)
    }
}

impl Classifier for Network<f64> {
    fn input_length(&self) -> usize {
        self.config.input_length
    }

    fn class_count(&self) -> usize {
        self.config.class_count
    }

    fn predict(&self, x: &[f64]) -> Vec<f64> {
        self.probabilities(x)
    }
}

fn relu<T: Real>(v: &mut [T]) {
    for e in v {
        *e = e.max(T::zero());
    }
}

fn max_of<T: Real>(s: &[T]) -> T {
    s[1..].iter().fold(s[0], |m, &v| m.max(v))
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

/// Valid (unpadded) stride-1 cross-correlation without bias.
fn conv_forward<T: Real>(input: &[T], in_c: usize, in_l: usize, w: &[T], out_c: usize, k: usize, out: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime
        unsafe { conv_avx2(input, in_c, in_l, w, out_c, k, out) };
        return;
    }
    conv_body(input, in_c, in_l, w, out_c, k, out)
}

// Same arithmetic as the portable path (no fused multiply-add), just wider
// vectors, so results are bitwise identical either way.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn conv_avx2<T: Real>(input: &[T], in_c: usize, in_l: usize, w: &[T], out_c: usize, k: usize, out: &mut [T]) {
    conv_body(input, in_c, in_l, w, out_c, k, out)
}

const TILE: usize = 32;

#[inline(always)]
fn conv_body<T: Real>(input: &[T], in_c: usize, in_l: usize, w: &[T], out_c: usize, k: usize, out: &mut [T]) {
    let out_l = in_l + 1 - k;
    let tiles = out_l.div_ceil(TILE);
    // zero padding lets the last partial tile take the vector path
    let pl = tiles * TILE + k - 1;
    let mut padded = vec![T::zero(); in_c * pl];
    for i in 0..in_c {
        padded[i * pl..i * pl + in_l].copy_from_slice(&input[i * in_l..(i + 1) * in_l]);
    }
    let ck = in_c * k;
    let mut o = 0;
    // two output channels per pass share every input load
    while o + 2 <= out_c {
        let (w0, w1) = (&w[o * ck..(o + 1) * ck], &w[(o + 1) * ck..(o + 2) * ck]);
        for t in 0..tiles {
            let t0 = t * TILE;
            let mut a0 = [T::zero(); TILE];
            let mut a1 = [T::zero(); TILE];
            for i in 0..in_c {
                let row = &padded[i * pl + t0..i * pl + t0 + TILE + k - 1];
                for kk in 0..k {
                    let (v0, v1) = (w0[i * k + kk], w1[i * k + kk]);
                    let s: &[T; TILE] = row[kk..kk + TILE].try_into().unwrap();
                    for j in 0..TILE {
                        a0[j] += v0 * s[j];
                        a1[j] += v1 * s[j];
                    }
                }
            }
            let n = TILE.min(out_l - t0);
            out[o * out_l + t0..o * out_l + t0 + n].copy_from_slice(&a0[..n]);
            out[(o + 1) * out_l + t0..(o + 1) * out_l + t0 + n].copy_from_slice(&a1[..n]);
        }
        o += 2;
    }
    if o < out_c {
        let w0 = &w[o * ck..(o + 1) * ck];
        for t in 0..tiles {
            let t0 = t * TILE;
            let mut a0 = [T::zero(); TILE];
            for i in 0..in_c {
                let row = &padded[i * pl + t0..i * pl + t0 + TILE + k - 1];
                for kk in 0..k {
                    let v0 = w0[i * k + kk];
                    let s: &[T; TILE] = row[kk..kk + TILE].try_into().unwrap();
                    for j in 0..TILE {
                        a0[j] += v0 * s[j];
                    }
                }
            }
            let n = TILE.min(out_l - t0);
            out[o * out_l + t0..o * out_l + t0 + n].copy_from_slice(&a0[..n]);
        }
    }
}

fn pool_forward<T: Real>(a: &Act<T>, size: usize, out_l: usize) -> (Act<T>, Vec<u32>) {
    let mut out = Act::zeros(a.b, a.c, out_l);
    let mut argmax = Vec::with_capacity(a.b * a.c * out_l);
    for plane in 0..a.b * a.c {
        let src = &a.data[plane * a.l..(plane + 1) * a.l];
        for j in 0..out_l {
            let mut best = j * size;
            for idx in j * size + 1..(j + 1) * size {
                if src[idx] > src[best] {
                    best = idx;
                }
            }
            out.data[plane * out_l + j] = src[best];
            argmax.push(best as u32);
        }
    }
    (out, argmax)
}

fn init_he<T: Real>(w: &mut [T], fan_in: usize, rng: &mut ChaCha8Rng) {
    let bound = (6.0 / fan_in as f64).sqrt();
    for v in w {
        *v = T::from_f64(rng.random_range(-bound..bound));
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-3,
            lr_decay: 0.99,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.learning_rate > 0.0
            && self.lr_decay > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training settings: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub class_names: Vec<String>,
    pub parameter_count: usize,
    pub epochs: Vec<EpochRecord>,
    pub final_train_accuracy: f64,
    pub final_test_accuracy: Option<f64>,
    /// Rows are true classes, columns predictions, over the test split.
    pub confusion: Vec<Vec<usize>>,
    pub wall_clock_s: f64,
}

impl TrainReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = BufWriter::new(fs::File::create(path)?);
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        writeln!(w, "epoch,learning_rate,loss,train_accuracy,test_accuracy")?;
        for e in &self.epochs {
            let test = e.test_accuracy.map(|a| a.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{},{}", e.epoch, e.learning_rate, e.loss, e.train_accuracy, test)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Accuracy and confusion matrix of a classifier over labelled inputs.
pub fn evaluate<C: Classifier + ?Sized>(net: &C, inputs: &[&[f64]], labels: &[usize]) -> (f64, Vec<Vec<usize>>) {
    let k = net.class_count();
    let mut confusion = vec![vec![0usize; k]; k];
    for (x, &y) in inputs.iter().zip(labels) {
        confusion[y][argmax(&net.predict(x))] += 1;
    }
    let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
    let acc = if inputs.is_empty() {
        0.0
    } else {
        correct as f64 / inputs.len() as f64
    };
    (acc, confusion)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Adam with per-epoch learning-rate decay over shuffled minibatches.
pub fn train_on(
    net: &mut Network<f32>,
    train: (&[&[f64]], &[usize]),
    test: Option<(&[&[f64]], &[usize])>,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<(Vec<EpochRecord>, Vec<Vec<usize>>)> {
    cfg.validate()?;
    let (xs, ys) = train;
    if xs.is_empty() {
        return invalid("training split is empty");
    }
    let k = net.config.class_count;
    if let Some(bad) = ys.iter().chain(test.iter().flat_map(|t| t.1)).find(|&&y| y >= k) {
        return invalid(format!("label {bad} out of range for {k} classes"));
    }
    let xs32: Vec<Vec<f32>> = xs.iter().map(|x| x.iter().map(|v| *v as f32).collect()).collect();
    let np = net.param_count();
    let mut m = vec![0.0f64; np];
    let mut v = vec![0.0f64; np];
    let mut step = 0i32;
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut lr = cfg.learning_rate;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&[f32]> = chunk.iter().map(|&i| xs32[i].as_slice()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| ys[i]).collect();
            let (loss, grads, observed) = net.loss_and_grad(&batch, &labels);
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training(format!("non-finite loss or gradient in epoch {}", epoch + 1)));
            }
            loss_sum += loss * chunk.len() as f64;
            step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(step);
            let bc2 = 1.0 - cfg.beta2.powi(step);
            for (i, g) in grads.iter().enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let upd = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.epsilon);
                net.params[i] = (net.params[i] as f64 - upd) as f32;
            }
            net.update_running_stats(&observed);
        }
        let (train_accuracy, _) = evaluate(&*net, xs, ys);
        let test_accuracy = test.map(|(tx, ty)| evaluate(&*net, tx, ty).0);
        let rec = EpochRecord {
            epoch: epoch + 1,
            learning_rate: lr,
            loss: loss_sum / xs.len() as f64,
            train_accuracy,
            test_accuracy,
        };
        progress(&rec);
        records.push(rec);
        lr *= cfg.lr_decay;
    }
    let confusion = match test {
        Some((tx, ty)) => evaluate(&*net, tx, ty).1,
        None => vec![vec![0; k]; k],
    };
    Ok((records, confusion))
}

/// Build and train a network on a dataset's train split, scoring the test split.
pub fn train(
    dataset: &Dataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
    progress: impl FnMut(&EpochRecord),
) -> Result<(TrainedModel, TrainReport)> {
    if model.input_length != dataset.sample_length || model.class_count != dataset.class_count() {
        return Err(Error::Config(format!(
            "model expects {} samples and {} classes, dataset has {} and {}",
            model.input_length,
            model.class_count,
            dataset.sample_length,
            dataset.class_count()
        )));
    }
    let start = Instant::now();
    let collect = |split| -> (Vec<&[f64]>, Vec<usize>) {
        dataset.split(split).map(|s| (s.series.samples(), s.label)).unzip()
    };
    let (trx, try_) = collect(Split::Train);
    let (tex, tey) = collect(Split::Test);
    let mut net = Network::<f32>::new(model)?;
    let test = (!tex.is_empty()).then_some((tex.as_slice(), tey.as_slice()));
    let (epochs, confusion) = train_on(&mut net, (&trx, &try_), test, cfg, progress)?;
    let last = epochs.last().expect("at least one epoch");
    let report = TrainReport {
        model: model.clone(),
        training: cfg.clone(),
        class_names: dataset.class_names.clone(),
        parameter_count: net.param_count(),
        final_train_accuracy: last.train_accuracy,
        final_test_accuracy: last.test_accuracy,
        epochs,
        confusion,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    let trained = TrainedModel {
        network: net,
        class_names: dataset.class_names.clone(),
        sample_rate_hz: dataset.sample_rate_hz,
    };
    Ok((trained, report))
}

/// Outcome of comparing backprop gradients against central differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradientCheck {
    pub checked: usize,
    /// Parameters whose perturbation flips a ReLU or max-pool choice.
    pub skipped: usize,
    pub worst_relative_error: f64,
}

/// Central-difference check of `loss_and_grad` in f64 on a random batch.
/// Parameters are jittered first so batch-norm affine terms are not at 1 and 0.
pub fn gradient_check(cfg: &ModelConfig, batch: usize, eps: f64, seed: u64) -> Result<GradientCheck> {
    let mut net = Network::<f64>::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in net.params_mut() {
        *p += rng.random_range(-0.2..0.2);
    }
    let xs: Vec<Vec<f64>> = (0..batch)
        .map(|_| (0..cfg.input_length).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let ys: Vec<usize> = (0..batch).map(|i| (i * 2 + i / 2) % cfg.class_count).collect();
    let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
    let (_, grads, _) = net.loss_and_grad(&refs, &ys);
    let base = net.activation_pattern(&refs);
    let mut out = GradientCheck {
        checked: 0,
        skipped: 0,
        worst_relative_error: 0.0,
    };
    for i in 0..net.param_count() {
        let orig = net.params[i];
        net.params[i] = orig + eps;
        let up = net.loss_and_grad(&refs, &ys).0;
        let up_pattern = net.activation_pattern(&refs);
        net.params[i] = orig - eps;
        let down = net.loss_and_grad(&refs, &ys).0;
        let down_pattern = net.activation_pattern(&refs);
        net.params[i] = orig;
        if up_pattern != base || down_pattern != base {
            out.skipped += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * eps);
        let rel = (numeric - grads[i]).abs() / (numeric.abs() + grads[i].abs()).max(1e-4);
        out.checked += 1;
        out.worst_relative_error = out.worst_relative_error.max(rel);
    }
    Ok(out)
}

const MODEL_MAGIC: &[u8; 8] = b"CSSHAPMD";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelHeader {
    config: ModelConfig,
    class_names: Vec<String>,
    sample_rate_hz: f64,
}

/// A trained network with the labels and sample rate it was trained for.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub network: Network<f32>,
    pub class_names: Vec<String>,
    pub sample_rate_hz: f64,
}

impl TrainedModel {
    /// Layout: magic, u32 version, u32 header length, JSON header, u64
    /// parameter count, u64 state count, then little-endian f32 parameters and
    /// running statistics.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&ModelHeader {
            config: self.network.config.clone(),
            class_names: self.class_names.clone(),
            sample_rate_hz: self.sample_rate_hz,
        })?;
        let net = &self.network;
        let mut out = Vec::with_capacity(32 + header.len() + 4 * (net.params.len() + net.stats.len()));
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(net.params.len() as u64).to_le_bytes());
        out.extend_from_slice(&(net.stats.len() as u64).to_le_bytes());
        for v in net.params.iter().chain(&net.stats) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("model file: {m}"));
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(bad("truncated"));
            }
            let (head, rest) = cur.split_at(n);
            cur = rest;
            Ok(head)
        };
        if take(8)? != MODEL_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != MODEL_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let header: ModelHeader =
            serde_json::from_slice(take(hlen)?).map_err(|e| bad(&format!("header: {e}")))?;
        let np = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let ns = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let mut network = Network::<f32>::new(&header.config)?;
        if np != network.params.len() || ns != network.stats.len() {
            return Err(bad("parameter counts do not match the architecture"));
        }
        if header.class_names.len() != header.config.class_count {
            return Err(bad("class names do not match the class count"));
        }
        let blob = take(4 * (np + ns))?;
        if cur.len() != 0 {
            return Err(bad("trailing bytes"));
        }
        let mut vals = blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        network.params.iter_mut().for_each(|p| *p = vals.next().unwrap());
        network.stats.iter_mut().for_each(|p| *p = vals.next().unwrap());
        Ok(Self {
            network,
            class_names: header.class_names,
            sample_rate_hz: header.sample_rate_hz,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

impl Classifier for TrainedModel {
    fn input_length(&self) -> usize {
        self.network.input_length()
    }

    fn class_count(&self) -> usize {
        self.network.class_count()
    }

    fn predict(&self, x: &[f64]) -> Vec<f64> {
        self.network.predict(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cnn() -> ModelConfig {
        ModelConfig {
            kind: ModelKind::Cnn1d,
            input_length: 24,
            class_count: 3,
            channels: vec![3, 4],
            kernels: vec![3, 3],
            pools: vec![2, 1],
            batch_norm: true,
            hidden: vec![5],
            seed: 7,
        }
    }

    fn random_inputs(n: usize, len: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn default_cnn_parameter_count() {
        // conv weights plus gamma and beta per channel, then the dense head
        let ch = [1usize, 8, 16, 32, 64];
        let ks = [15usize, 5, 5, 5];
        let conv: usize = (0..4).map(|i| ch[i + 1] * ch[i] * ks[i] + 2 * ch[i + 1]).sum();
        let head = 64 * 64 + 64 + 64 * 3 + 3;
        assert_eq!(conv + head, 18155);
        let net = Network::<f32>::new(&ModelConfig::cnn(2000, 3, 0)).unwrap();
        assert_eq!(net.param_count(), conv + head);
        assert_eq!(net.state_count(), 2 * (8 + 16 + 32 + 64));
    }

    #[test]
    fn reference_layer_lengths() {
        let cfg = ModelConfig::reference_cnn(2000, 3, 0);
        cfg.validate().unwrap();
        let lens = cfg.block_lengths();
        assert_eq!(lens[0], (1994, 997));
        assert_eq!(lens[1], (995, 497));
        assert_eq!(lens[6], (27, 13));
        assert_eq!(lens[7], (11, 11));
    }

    #[test]
    fn invalid_configs() {
        let mut c = ModelConfig::cnn(10, 3, 0);
        assert!(matches!(Network::<f32>::new(&c), Err(Error::Config(_))));
        c = ModelConfig::cnn(2000, 1, 0);
        assert!(c.validate().is_err());
        c = ModelConfig::cnn(2000, 3, 0);
        c.kernels.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn outputs_are_probabilities_and_deterministic() {
        let a = Network::<f32>::new(&ModelConfig::cnn(500, 3, 3)).unwrap();
        let b = Network::<f32>::new(&ModelConfig::cnn(500, 3, 3)).unwrap();
        assert_eq!(a, b);
        for x in random_inputs(5, 500, 1) {
            let p = a.predict(&x);
            assert_eq!(p.len(), 3);
            assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(p, b.predict(&x));
        }
        let m = Network::<f32>::new(&ModelConfig::mlp(40, 4, 0)).unwrap();
        let p = m.predict(&random_inputs(1, 40, 2)[0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    fn check_gradients(cfg: &ModelConfig) {
        let g = gradient_check(cfg, 4, 1e-3, 11).unwrap();
        assert!(g.skipped * 20 <= g.checked + g.skipped, "{} parameters cross a kink", g.skipped);
        assert!(g.worst_relative_error < 1e-4, "worst relative gradient error {}", g.worst_relative_error);
    }

    #[test]
    fn cnn_gradients_match_finite_differences() {
        check_gradients(&tiny_cnn());
    }

    #[test]
    fn cnn_without_batch_norm_gradients() {
        let mut cfg = tiny_cnn();
        cfg.batch_norm = false;
        check_gradients(&cfg);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut cfg = ModelConfig::mlp(12, 3, 4);
        cfg.hidden = vec![6, 5];
        check_gradients(&cfg);
    }

    #[test]
    fn overfits_a_small_set() {
        let cfg = ModelConfig::cnn(512, 2, 1);
        let mut net = Network::<f32>::new(&cfg).unwrap();
        let xs = random_inputs(32, 512, 9);
        let ys: Vec<usize> = (0..32).map(|i| i % 2).collect();
        let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let tc = TrainConfig {
            epochs: 150,
            batch_size: 32,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let (records, _) = train_on(&mut net, (&refs, &ys), None, &tc, |_| {}).unwrap();
        assert!(records.last().unwrap().loss < records[0].loss);
        assert_eq!(evaluate(&net, &refs, &ys).0, 1.0);
    }

    #[test]
    fn save_load_is_bitwise() {
        let mut net = Network::<f32>::new(&ModelConfig::cnn(300, 3, 2)).unwrap();
        let xs = random_inputs(8, 300, 3);
        let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let ys = vec![0, 1, 2, 0, 1, 2, 0, 1];
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        train_on(&mut net, (&refs, &ys), None, &tc, |_| {}).unwrap();
        let model = TrainedModel {
            network: net,
            class_names: vec!["a".into(), "b".into(), "c".into()],
            sample_rate_hz: 10_000.0,
        };
        let bytes = model.to_bytes().unwrap();
        let back = TrainedModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, model);
        for x in &xs {
            assert_eq!(back.predict(x), model.predict(x));
        }
        let n = model.network.param_count() + model.network.state_count();
        let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 8 + 4 + 4 + header_len + 16 + 4 * n);

        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert!(matches!(TrainedModel::from_bytes(&corrupt), Err(Error::Format(_))));
        assert!(matches!(TrainedModel::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut bad_version = bytes;
        bad_version[8] = 9;
        assert!(matches!(TrainedModel::from_bytes(&bad_version), Err(Error::Format(_))));
    }

    #[test]
    fn train_rejects_bad_labels() {
        let mut net = Network::<f32>::new(&ModelConfig::mlp(4, 2, 0)).unwrap();
        let xs = [vec![0.0; 4]];
        let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let err = train_on(&mut net, (&refs, &[5]), None, &TrainConfig::default(), |_| {});
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }
}
