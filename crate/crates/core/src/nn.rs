//! Dense-network numerics: layers, activations, pooling, loss and Adam.
//!
//! Everything runs in `f64` on row-major batches (`batch x features`).

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Deterministic generator used for init, dropout and shuffling.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// SplitMix64 finaliser over `(seed, stream)`; derives independent child seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Linear,
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    std_normal_cdf(x) + x * pdf
}

pub fn gelu_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| gelu(v)).collect()
}

/// A mutable view of one parameter tensor and its accumulated gradient.
pub struct ParamRef<'a> {
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
    /// `[rows, cols]` for matrices, `[len]` for vectors.
    pub shape: Vec<usize>,
}

/// Batches up to this size skip the general matrix product, whose packing
/// of the weight matrix dominates at a handful of rows.
const SMALL_BATCH: usize = 16;

#[cfg(target_arch = "x86_64")]
mod small {
    use std::arch::x86_64::*;

    /// `R x C` dot products of rows of `x` with rows of `w`, each summed in
    /// four lanes and then sequentially over the `k % 4` tail.
    #[inline]
    #[target_feature(enable = "avx2,fma")]
    fn block<const R: usize, const C: usize>(xs: [&[f64]; R], ws: [&[f64]; C]) -> [[f64; C]; R] {
        let k = xs[0].len();
        let k4 = k - k % 4;
        let mut acc = [[_mm256_setzero_pd(); C]; R];
        let mut i = 0;
        while i < k4 {
            // SAFETY: every row has length k and i + 4 <= k4 <= k.
            unsafe {
                let wv: [__m256d; C] = std::array::from_fn(|b| _mm256_loadu_pd(ws[b].as_ptr().add(i)));
                for a in 0..R {
                    let xv = _mm256_loadu_pd(xs[a].as_ptr().add(i));
                    for b in 0..C {
                        acc[a][b] = _mm256_fmadd_pd(xv, wv[b], acc[a][b]);
                    }
                }
            }
            i += 4;
        }
        let mut out = [[0.0; C]; R];
        for a in 0..R {
            for b in 0..C {
                let mut l = [0.0f64; 4];
                // SAFETY: `l` holds four f64.
                unsafe { _mm256_storeu_pd(l.as_mut_ptr(), acc[a][b]) };
                let mut s = (l[0] + l[1]) + (l[2] + l[3]);
                for j in k4..k {
                    s = xs[a][j].mul_add(ws[b][j], s);
                }
                out[a][b] = s;
            }
        }
        out
    }

    #[inline(always)]
    fn rows<const R: usize>(x: &[f64], k: usize, r: usize) -> [&[f64]; R] {
        std::array::from_fn(
            #[inline(always)]
            |a| &x[(r + a) * k..(r + a + 1) * k],
        )
    }

    #[inline]
    #[target_feature(enable = "avx2,fma")]
    #[allow(clippy::too_many_arguments)]
    fn tile<const R: usize>(x: &[f64], w: &[f64], k: usize, m: usize, r: usize, j: usize, cols: usize, out: &mut [f64]) {
        let xs = rows::<R>(x, k, r);
        if cols == 2 {
            put(out, m, r, j, block::<R, 2>(xs, rows::<2>(w, k, j)));
        } else {
            put(out, m, r, j, block::<R, 1>(xs, rows::<1>(w, k, j)));
        }
    }

    /// `out = x W^T` for row-major `x` (`n x k`) and `w` (`m x k`).
    #[target_feature(enable = "avx2,fma")]
    pub(super) fn dot_t(x: &[f64], w: &[f64], k: usize, out: &mut [f64]) {
        let n = x.len() / k;
        let m = w.len() / k;
        // Weight rows are the large operand: stream each pair once and
        // sweep every batch row against it.
        let mut j = 0;
        while j < m {
            let cols = (m - j).min(2);
            let mut r = 0;
            while r < n {
                let take = (n - r).min(4);
                match take {
                    4 => tile::<4>(x, w, k, m, r, j, cols, out),
                    3 => tile::<3>(x, w, k, m, r, j, cols, out),
                    2 => tile::<2>(x, w, k, m, r, j, cols, out),
                    _ => tile::<1>(x, w, k, m, r, j, cols, out),
                }
                r += take;
            }
            j += cols;
        }
    }

    #[inline(always)]
    fn put<const R: usize, const C: usize>(out: &mut [f64], m: usize, r: usize, j: usize, v: [[f64; C]; R]) {
        for (a, row) in v.iter().enumerate() {
            out[(r + a) * m + j..(r + a) * m + j + C].copy_from_slice(row);
        }
    }
}

/// `x W^T`, with a direct kernel for small batches where the CPU allows.
pub(crate) fn dot_t(x: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
    #[cfg(target_arch = "x86_64")]
    if let (Some(xs), Some(ws)) = (x.as_slice(), w.as_slice()) {
        if x.nrows() <= SMALL_BATCH
            && x.ncols() > 0
            && std::is_x86_feature_detected!("avx2")
            && std::is_x86_feature_detected!("fma")
        {
            let mut out = vec![0.0; x.nrows() * w.nrows()];
            // SAFETY: the required CPU features were just detected.
            unsafe { small::dot_t(xs, ws, x.ncols(), &mut out) };
            return Array2::from_shape_vec((x.nrows(), w.nrows()), out).expect("shape matches");
        }
    }
    x.dot(&w.t())
}

/// Fully connected layer `y = act(x W^T + b)` with optional inverted dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
    pub dropout: f64,
    grad_weight: Array2<f64>,
    grad_bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    mask: Option<Array2<f64>>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation, dropout: f64) -> Self {
        assert!((0.0..1.0).contains(&dropout), "dropout must lie in [0, 1)");
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
            activation,
            dropout,
            grad_weight: Array2::zeros((outputs, inputs)),
            grad_bias: Array1::zeros(outputs),
        }
    }

    /// Uniform Glorot weights, zero bias.
    pub fn glorot(inputs: usize, outputs: usize, activation: Activation, dropout: f64, rng: &mut Rng) -> Self {
        let mut layer = Self::zeros(inputs, outputs, activation, dropout);
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        layer.weight.mapv_inplace(|_| rng.gen_range(-limit..limit));
        layer
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: ArrayView2<f64>, mode: Mode, rng: &mut Rng) -> Result<(Array2<f64>, DenseCache)> {
        self.forward_owned(x.to_owned(), mode, rng)
    }

    /// [`Dense::forward`] that keeps `x` in the cache without copying it.
    pub fn forward_owned(&self, x: Array2<f64>, mode: Mode, rng: &mut Rng) -> Result<(Array2<f64>, DenseCache)> {
        if x.ncols() != self.inputs() {
            return Err(Error::Shape(format!(
                "dense layer expects {} inputs, got {}",
                self.inputs(),
                x.ncols()
            )));
        }
        let mut pre = dot_t(&x, &self.weight);
        pre += &self.bias;
        let mut out = match self.activation {
            Activation::Gelu => pre.mapv(gelu),
            Activation::Linear => pre.clone(),
        };
        let mask = if mode == Mode::Train && self.dropout > 0.0 {
            let keep = 1.0 / (1.0 - self.dropout);
            let p = self.dropout;
            let mask = Array2::from_shape_simple_fn(out.raw_dim(), || if rng.gen::<f64>() < p { 0.0 } else { keep });
            out *= &mask;
            Some(mask)
        } else {
            None
        };
        Ok((
            out,
            DenseCache {
                input: x,
                pre,
                mask,
            },
        ))
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the input.
    pub fn backward(&mut self, cache: &DenseCache, mut grad_out: Array2<f64>) -> Array2<f64> {
        if let Some(mask) = &cache.mask {
            grad_out *= mask;
        }
        if self.activation == Activation::Gelu {
            grad_out.zip_mut_with(&cache.pre, |g, &z| *g *= gelu_grad(z));
        }
        self.grad_weight += &grad_out.t().dot(&cache.input);
        self.grad_bias += &grad_out.sum_axis(Axis(0));
        grad_out.dot(&self.weight)
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(0.0);
        self.grad_bias.fill(0.0);
    }

    pub fn grad_weight(&self) -> &Array2<f64> {
        &self.grad_weight
    }

    pub fn grad_bias(&self) -> &Array1<f64> {
        &self.grad_bias
    }

    pub fn params_mut(&mut self) -> [ParamRef<'_>; 2] {
        [
            ParamRef {
                shape: self.weight.shape().to_vec(),
                value: self.weight.as_slice_mut().expect("standard layout"),
                grad: self.grad_weight.as_slice_mut().expect("standard layout"),
            },
            ParamRef {
                shape: self.bias.shape().to_vec(),
                value: self.bias.as_slice_mut().expect("standard layout"),
                grad: self.grad_bias.as_slice_mut().expect("standard layout"),
            },
        ]
    }
}

/// Row-wise softmax, shifted by the row max for stability.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Mean cross-entropy of `probs` against class indices.
pub fn cross_entropy(probs: &Array2<f64>, targets: &[usize]) -> f64 {
    let n = targets.len() as f64;
    targets
        .iter()
        .enumerate()
        .map(|(i, &t)| -probs[[i, t]].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / n
}

/// Gradient of mean cross-entropy w.r.t. the softmax logits.
pub fn softmax_cross_entropy_grad(probs: &Array2<f64>, targets: &[usize]) -> Array2<f64> {
    let n = targets.len() as f64;
    let mut g = probs.clone();
    for (i, &t) in targets.iter().enumerate() {
        g[[i, t]] -= 1.0;
    }
    g / n
}

/// Max over the `h x w` grid of each `(frame, channel)`: `frames x c x h x w` to `frames x c`.
pub fn spatial_max_pool(maps: &[f32], frames: usize, channels: usize, height: usize, width: usize) -> Result<Array2<f64>> {
    let cell = height * width;
    if maps.len() != frames * channels * cell || cell == 0 {
        return Err(Error::Shape(format!(
            "expected {frames}x{channels}x{height}x{width} maps, got {} values",
            maps.len()
        )));
    }
    let pooled: Vec<f64> = maps
        .chunks_exact(cell)
        .map(|grid| grid.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64)
        .collect();
    Ok(Array2::from_shape_vec((frames, channels), pooled).expect("shape checked"))
}

/// Mean over frames: `frames x c` to `c`.
pub fn temporal_avg_pool(x: ArrayView2<f64>) -> Result<Array1<f64>> {
    x.mean_axis(Axis(0))
        .ok_or_else(|| Error::Shape("temporal pooling needs at least one frame".into()))
}

/// Bias-corrected Adam over a fixed, ordered list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Fails without touching parameters if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [ParamRef<'_>]) -> Result<()> {
        for (k, p) in params.iter().enumerate() {
            if let Some(bad) = p.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in tensor {k} at element {bad} after {} steps",
                    self.step
                )));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.value.len()) {
            return Err(Error::Shape("optimizer state does not match parameter shapes".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.value[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
