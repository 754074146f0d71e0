//! Sinusoidal time-level embedding and the learned projections that inject
//! it into a network as a shift (`x + s`) or a scale-and-shift
//! (`(l + 1) * x + s`).
//!
//! Only three time levels exist, so a projection is evaluated once per level
//! and broadcast to the batch rows carrying that level; the weight gradient
//! is likewise a sum of three outer products.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::nn::ParamRef;

pub const DEFAULT_EMBED_DIM: usize = 512;
pub const DEFAULT_EMBED_BASE: f64 = 10_000.0;
pub const TIME_LEVELS: usize = 3;

/// `[cos(t w_1), sin(t w_1), ..., cos(t w_{D/2}), sin(t w_{D/2})]` with
/// `w_d = base^(-2d/D)`, `d = 1..=D/2`.
pub fn sinusoidal_embedding(t_level: f64, dim: usize, base: f64) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("embedding dimension must be even and positive, got {dim}")));
    }
    let mut out = Vec::with_capacity(dim);
    for d in 1..=dim / 2 {
        let freq = base.powf(-2.0 * d as f64 / dim as f64);
        out.push((t_level * freq).cos());
        out.push((t_level * freq).sin());
    }
    Ok(out)
}

/// The embeddings of time levels 1..=3, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeEmbedding {
    dim: usize,
    base: f64,
    table: Array2<f64>,
}

impl TimeEmbedding {
    pub fn new(dim: usize, base: f64) -> Result<Self> {
        let mut table = Array2::zeros((TIME_LEVELS, dim));
        for level in 1..=TIME_LEVELS {
            let row = sinusoidal_embedding(level as f64, dim, base)?;
            table.row_mut(level - 1).assign(&Array1::from(row));
        }
        Ok(Self { dim, base, table })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn level(&self, t_level: u8) -> ArrayView1<'_, f64> {
        self.table.row(t_level as usize - 1)
    }

    pub fn table(&self) -> &Array2<f64> {
        &self.table
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    /// Unconditioned.
    None,
    /// Shift the input of the last hidden layer.
    Sll,
    /// Scale and shift the input of the last hidden layer.
    Ssll,
    /// Scale and shift every one-dimensional activation.
    Ssal,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::None, Strategy::Sll, Strategy::Ssll, Strategy::Ssal];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Sll => "sll",
            Strategy::Ssll => "ssll",
            Strategy::Ssal => "ssal",
        }
    }

    /// Report label: `M_U`, `M_SLL`, `M_SSLL`, `M_SSAL`.
    pub fn model_label(self) -> &'static str {
        match self {
            Strategy::None => "M_U",
            Strategy::Sll => "M_SLL",
            Strategy::Ssll => "M_SSLL",
            Strategy::Ssal => "M_SSAL",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "u" | "m_u" => Ok(Strategy::None),
            "sll" | "m_sll" => Ok(Strategy::Sll),
            "ssll" | "m_ssll" => Ok(Strategy::Ssll),
            "ssal" | "m_ssal" => Ok(Strategy::Ssal),
            other => Err(Error::Config(format!("unknown conditioning `{other}` (none|sll|ssll|ssal)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionKind {
    Shift,
    ScaleShift,
}

/// `x + s`.
pub fn condition_sll(activation: &[f64], shift: &[f64]) -> Result<Vec<f64>> {
    if activation.len() != shift.len() {
        return Err(Error::Shape(format!("shift of {} for activation of {}", shift.len(), activation.len())));
    }
    Ok(activation.iter().zip(shift).map(|(o, s)| o + s).collect())
}

/// `(l + 1) * x + s`.
pub fn condition_ssll(activation: &[f64], scale: &[f64], shift: &[f64]) -> Result<Vec<f64>> {
    if activation.len() != shift.len() || activation.len() != scale.len() {
        return Err(Error::Shape(format!(
            "scale {} / shift {} for activation of {}",
            scale.len(),
            shift.len(),
            activation.len()
        )));
    }
    Ok(activation
        .iter()
        .zip(scale)
        .zip(shift)
        .map(|((o, l), s)| (l + 1.0) * o + s)
        .collect())
}

/// Learned linear map from the time embedding to a shift (`n` outputs) or a
/// scale followed by a shift (`2n` outputs) for an activation of width `n`.
///
/// Outputs are `W e / sqrt(D) + b`: the stored weight is the projection
/// matrix times `sqrt(D)`, so one optimiser step of size `lr` per weight
/// moves each output by about `lr` rather than `lr * D`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub kind: ProjectionKind,
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    width: usize,
    grad_weight: Array2<f64>,
    grad_bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct ProjectionCache {
    input: Array2<f64>,
    levels: Vec<u8>,
    outputs: Array2<f64>,
}

impl Projection {
    pub fn zeros(kind: ProjectionKind, width: usize, embed_dim: usize) -> Self {
        let rows = match kind {
            ProjectionKind::Shift => width,
            ProjectionKind::ScaleShift => 2 * width,
        };
        Self {
            kind,
            weight: Array2::zeros((rows, embed_dim)),
            bias: Array1::zeros(rows),
            width,
            grad_weight: Array2::zeros((rows, embed_dim)),
            grad_bias: Array1::zeros(rows),
        }
    }

    /// Width of the conditioned activation.
    pub fn width(&self) -> usize {
        self.width
    }

    fn input_scale(&self) -> f64 {
        1.0 / (self.weight.ncols() as f64).sqrt()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Projection output for each time level, `3 x rows`.
    pub fn level_outputs(&self, embedding: &TimeEmbedding) -> Array2<f64> {
        let mut out = crate::nn::dot_t(embedding.table(), &self.weight) * self.input_scale();
        out += &self.bias;
        out
    }

    /// `(scale, shift)` for one time level; scale is zero for a shift projection.
    pub fn scale_shift(&self, embedding: &TimeEmbedding, t_level: u8) -> (Vec<f64>, Vec<f64>) {
        let outputs = self.level_outputs(embedding);
        let row = outputs.row(t_level as usize - 1);
        match self.kind {
            ProjectionKind::Shift => (vec![0.0; self.width], row.to_vec()),
            ProjectionKind::ScaleShift => (row.slice(s![..self.width]).to_vec(), row.slice(s![self.width..]).to_vec()),
        }
    }

    pub fn forward(
        &self,
        x: ArrayView2<f64>,
        levels: &[u8],
        embedding: &TimeEmbedding,
    ) -> Result<(Array2<f64>, ProjectionCache)> {
        self.forward_owned(x.to_owned(), levels, embedding)
    }

    /// [`Projection::forward`] that keeps `x` in the cache without copying it.
    pub fn forward_owned(
        &self,
        x: Array2<f64>,
        levels: &[u8],
        embedding: &TimeEmbedding,
    ) -> Result<(Array2<f64>, ProjectionCache)> {
        if x.ncols() != self.width || x.nrows() != levels.len() {
            return Err(Error::Shape(format!(
                "projection for width {} got {}x{} activations with {} levels",
                self.width,
                x.nrows(),
                x.ncols(),
                levels.len()
            )));
        }
        if embedding.dim() != self.weight.ncols() {
            return Err(Error::Shape(format!(
                "projection expects a {}-d embedding, got {}",
                self.weight.ncols(),
                embedding.dim()
            )));
        }
        if let Some(bad) = levels.iter().find(|&&t| !(1..=TIME_LEVELS as u8).contains(&t)) {
            return Err(Error::Data(format!("time level {bad} outside 1..=3")));
        }
        let outputs = self.level_outputs(embedding);
        let n = self.width;
        let mut y = x.clone();
        for (mut row, &t) in y.rows_mut().into_iter().zip(levels) {
            let p = outputs.row(t as usize - 1);
            match self.kind {
                ProjectionKind::Shift => row += &p,
                ProjectionKind::ScaleShift => {
                    let (scale, shift) = (p.slice(s![..n]), p.slice(s![n..]));
                    row.zip_mut_with(&scale, |v, &l| *v *= l + 1.0);
                    row += &shift;
                }
            }
        }
        Ok((
            y,
            ProjectionCache {
                input: x,
                levels: levels.to_vec(),
                outputs,
            },
        ))
    }

    /// Accumulates projection gradients and returns the gradient w.r.t. the input.
    pub fn backward(&mut self, cache: &ProjectionCache, grad_out: Array2<f64>, embedding: &TimeEmbedding) -> Array2<f64> {
        let n = self.width;
        let mut grad_levels = Array2::<f64>::zeros(cache.outputs.raw_dim());
        let mut grad_in = grad_out.clone();
        for (i, &t) in cache.levels.iter().enumerate() {
            let level = t as usize - 1;
            let g = grad_out.row(i);
            match self.kind {
                ProjectionKind::Shift => {
                    let mut acc = grad_levels.row_mut(level);
                    acc += &g;
                }
                ProjectionKind::ScaleShift => {
                    let scale = cache.outputs.slice(s![level, ..n]);
                    let x = cache.input.row(i);
                    let mut acc = grad_levels.row_mut(level);
                    for j in 0..n {
                        acc[j] += g[j] * x[j];
                        acc[n + j] += g[j];
                    }
                    grad_in.row_mut(i).zip_mut_with(&scale, |v, &l| *v *= l + 1.0);
                }
            }
        }
        let scale = self.input_scale();
        self.grad_weight.scaled_add(scale, &grad_levels.t().dot(embedding.table()));
        self.grad_bias += &grad_levels.sum_axis(Axis(0));
        grad_in
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(0.0);
        self.grad_bias.fill(0.0);
    }

    pub fn grad_weight(&self) -> &Array2<f64> {
        &self.grad_weight
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
