//! The gamepad, frames and late-fusion classifiers, each available with
//! any conditioning strategy.
//!
//! ```text
//! gamepad  31 -> 30 (gelu) -> 2 (softmax)
//! frames   pool -> 512 -> 128 (gelu, drop) -> 30 (gelu, drop) -> 2 (softmax)
//! fusion   [gamepad 31 -> 30] ++ [frames 512 -> 128 -> 30] = 60 -> 32 (gelu) -> 2 (softmax)
//! ```
//!
//! A network is a set of [`Chain`]s. Each chain stage may condition its
//! input before the dense layer, and the chain may condition its output.
//! Shift-last-layer strategies condition the input of the last hidden
//! layer: the 31 input features (gamepad), the 128 vector (frames) or the
//! 60 concatenation (fusion). Scale-and-shift-all conditions every
//! one-dimensional activation once, logits included; in the fusion model
//! the two 30 latents are conditioned as the 60 concatenation.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::nn::{
    self, cross_entropy, softmax_cross_entropy_grad, softmax_rows, spatial_max_pool, temporal_avg_pool, Activation,
    Dense, DenseCache, Mode, ParamRef, Rng,
};
use crate::preprocess::GAMEPAD_FEATURES;
use crate::timecond::{
    Projection, ProjectionCache, ProjectionKind, Strategy, TimeEmbedding, DEFAULT_EMBED_BASE, DEFAULT_EMBED_DIM,
};

pub const FRAME_CHANNELS: usize = 512;
pub const LATENT_WIDTH: usize = 30;
const FRAMES_HIDDEN: usize = 128;
const FUSION_HIDDEN: usize = 32;
const CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Gamepad,
    Frames,
    Fusion,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Gamepad, Modality::Frames, Modality::Fusion];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Gamepad => "gamepad",
            Modality::Frames => "frames",
            Modality::Fusion => "fusion",
        }
    }

    fn tag(self) -> u32 {
        self as u32
    }

    fn from_tag(tag: u32) -> Result<Self> {
        Modality::ALL
            .get(tag as usize)
            .copied()
            .ok_or_else(|| Error::Data(format!("unknown modality tag {tag}")))
    }

    pub fn uses_gamepad(self) -> bool {
        self != Modality::Frames
    }

    pub fn uses_frames(self) -> bool {
        self != Modality::Gamepad
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gamepad" => Ok(Modality::Gamepad),
            "frames" => Ok(Modality::Frames),
            "fusion" => Ok(Modality::Fusion),
            other => Err(Error::Config(format!("unknown modality `{other}` (gamepad|frames|fusion)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub modality: Modality,
    pub conditioning: Strategy,
    pub seed: u64,
    pub dropout: f64,
    pub embed_dim: usize,
    pub embed_base: f64,
}

impl ModelConfig {
    pub fn new(modality: Modality, conditioning: Strategy, seed: u64) -> Self {
        Self {
            modality,
            conditioning,
            seed,
            dropout: 0.1,
            embed_dim: DEFAULT_EMBED_DIM,
            embed_base: DEFAULT_EMBED_BASE,
        }
    }

    /// `gamepad/M_SSAL` style label.
    pub fn label(&self) -> String {
        format!("{}/{}", self.modality, self.conditioning.model_label())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Stage {
    cond: Option<Projection>,
    dense: Dense,
}

/// A run of dense layers with optional conditioning on each layer input
/// and on the chain output.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    stages: Vec<Stage>,
    out_cond: Option<Projection>,
}

#[derive(Debug, Clone)]
struct ChainCache {
    stages: Vec<(Option<ProjectionCache>, DenseCache)>,
    out: Option<ProjectionCache>,
}

impl Chain {
    fn forward(
        &self,
        x: Array2<f64>,
        levels: &[u8],
        embedding: &TimeEmbedding,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(Array2<f64>, ChainCache)> {
        let mut cache = ChainCache {
            stages: Vec::with_capacity(self.stages.len()),
            out: None,
        };
        let mut h = x;
        for stage in &self.stages {
            let cond_cache = match &stage.cond {
                Some(p) => {
                    let (y, c) = p.forward_owned(h, levels, embedding)?;
                    h = y;
                    Some(c)
                }
                None => None,
            };
            let (y, c) = stage.dense.forward_owned(h, mode, rng)?;
            h = y;
            cache.stages.push((cond_cache, c));
        }
        if let Some(p) = &self.out_cond {
            let (y, c) = p.forward_owned(h, levels, embedding)?;
            h = y;
            cache.out = Some(c);
        }
        Ok((h, cache))
    }

    fn backward(&mut self, cache: &ChainCache, grad: Array2<f64>, embedding: &TimeEmbedding) -> Array2<f64> {
        let mut g = grad;
        if let (Some(p), Some(c)) = (&mut self.out_cond, &cache.out) {
            g = p.backward(c, g, embedding);
        }
        for (stage, (cond_cache, dense_cache)) in self.stages.iter_mut().zip(&cache.stages).rev() {
            g = stage.dense.backward(dense_cache, g);
            if let (Some(p), Some(c)) = (&mut stage.cond, cond_cache) {
                g = p.backward(c, g, embedding);
            }
        }
        g
    }

    fn zero_grad(&mut self) {
        for stage in &mut self.stages {
            stage.dense.zero_grad();
            if let Some(p) = &mut stage.cond {
                p.zero_grad();
            }
        }
        if let Some(p) = &mut self.out_cond {
            p.zero_grad();
        }
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<ParamRef<'a>>) {
        for stage in &mut self.stages {
            if let Some(p) = &mut stage.cond {
                out.extend(p.params_mut());
            }
            out.extend(stage.dense.params_mut());
        }
        if let Some(p) = &mut self.out_cond {
            out.extend(p.params_mut());
        }
    }

    fn projections(&self) -> impl Iterator<Item = &Projection> {
        self.stages
            .iter()
            .filter_map(|s| s.cond.as_ref())
            .chain(self.out_cond.as_ref())
    }

    fn dense_layers(&self) -> impl Iterator<Item = &Dense> {
        self.stages.iter().map(|s| &s.dense)
    }

    fn projections_mut(&mut self) -> impl Iterator<Item = &mut Projection> {
        self.stages
            .iter_mut()
            .filter_map(|s| s.cond.as_mut())
            .chain(self.out_cond.as_mut())
    }
}

/// Builds a chain. `layers` are `(inputs, outputs, activation, dropout)`;
/// `conditioned[i]` selects the input of layer `i`, and `out` the output.
fn chain(
    layers: &[(usize, usize, Activation, f64)],
    conditioned: &[Option<ProjectionKind>],
    out: Option<ProjectionKind>,
    embed_dim: usize,
    rng: &mut Rng,
) -> Chain {
    let stages = layers
        .iter()
        .zip(conditioned)
        .map(|(&(i, o, act, p), kind)| Stage {
            cond: kind.map(|k| Projection::zeros(k, i, embed_dim)),
            dense: Dense::glorot(i, o, act, p, rng),
        })
        .collect();
    let width = layers.last().map(|l| l.1).unwrap_or(0);
    Chain {
        stages,
        out_cond: out.map(|k| Projection::zeros(k, width, embed_dim)),
    }
}

/// Removes one branch's information from the fusion head input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    ZeroGamepadLatent,
    ZeroFramesLatent,
}

/// One batch of model inputs. Frames are the pooled 512-vectors.
#[derive(Debug, Clone, Copy)]
pub struct Inputs<'a> {
    pub gamepad: Option<ArrayView2<'a, f64>>,
    pub frames: Option<ArrayView2<'a, f64>>,
    pub levels: &'a [u8],
    pub ablation: Option<Ablation>,
}

impl<'a> Inputs<'a> {
    pub fn new(gamepad: Option<ArrayView2<'a, f64>>, frames: Option<ArrayView2<'a, f64>>, levels: &'a [u8]) -> Self {
        Self {
            gamepad,
            frames,
            levels,
            ablation: None,
        }
    }

    fn batch_size(&self) -> usize {
        self.levels.len()
    }
}

#[derive(Debug, Clone)]
struct ModelCache {
    version: u64,
    batch: usize,
    gamepad: Option<ChainCache>,
    frames: Option<ChainCache>,
    head: Option<ChainCache>,
    ablation: Option<Ablation>,
}

/// Class probabilities plus everything backward needs.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub probs: Array2<f64>,
    cache: ModelCache,
}

impl ForwardPass {
    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(&self.probs)
    }
}

pub fn argmax_rows(probs: &Array2<f64>) -> Vec<usize> {
    // Ties go to the higher class.
    probs.rows().into_iter().map(|r| usize::from(r[1] >= r[0])).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    embedding: TimeEmbedding,
    gamepad: Option<Chain>,
    frames: Option<Chain>,
    head: Option<Chain>,
    version: u64,
}

pub fn build_gamepad_model(config: &ModelConfig) -> Result<Model> {
    Model::new(&ModelConfig {
        modality: Modality::Gamepad,
        ..*config
    })
}

pub fn build_frames_model(config: &ModelConfig) -> Result<Model> {
    Model::new(&ModelConfig {
        modality: Modality::Frames,
        ..*config
    })
}

pub fn build_fusion_model(config: &ModelConfig) -> Result<Model> {
    Model::new(&ModelConfig {
        modality: Modality::Fusion,
        ..*config
    })
}

impl Model {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", config.dropout)));
        }
        let embedding = TimeEmbedding::new(config.embed_dim, config.embed_base)?;
        let mut rng = nn::seeded_rng(config.seed);
        let d = config.embed_dim;
        let p = config.dropout;
        let (last, all) = match config.conditioning {
            Strategy::None => (None, false),
            Strategy::Sll => (Some(ProjectionKind::Shift), false),
            Strategy::Ssll => (Some(ProjectionKind::ScaleShift), false),
            Strategy::Ssal => (None, true),
        };
        let every = all.then_some(ProjectionKind::ScaleShift);

        let gelu = Activation::Gelu;
        let linear = Activation::Linear;
        let (mut gamepad, mut frames, mut head) = (None, None, None);
        match config.modality {
            Modality::Gamepad => {
                gamepad = Some(chain(
                    &[(GAMEPAD_FEATURES, LATENT_WIDTH, gelu, 0.0), (LATENT_WIDTH, CLASSES, linear, 0.0)],
                    &[last.or(every), every],
                    every,
                    d,
                    &mut rng,
                ));
            }
            Modality::Frames => {
                frames = Some(chain(
                    &[
                        (FRAME_CHANNELS, FRAMES_HIDDEN, gelu, p),
                        (FRAMES_HIDDEN, LATENT_WIDTH, gelu, p),
                        (LATENT_WIDTH, CLASSES, linear, 0.0),
                    ],
                    &[every, last.or(every), every],
                    every,
                    d,
                    &mut rng,
                ));
            }
            Modality::Fusion => {
                // Branch latents are conditioned once, as the head's 60 input.
                gamepad = Some(chain(&[(GAMEPAD_FEATURES, LATENT_WIDTH, gelu, 0.0)], &[every], None, d, &mut rng));
                frames = Some(chain(
                    &[(FRAME_CHANNELS, FRAMES_HIDDEN, gelu, p), (FRAMES_HIDDEN, LATENT_WIDTH, gelu, p)],
                    &[every, every],
                    None,
                    d,
                    &mut rng,
                ));
                head = Some(chain(
                    &[(2 * LATENT_WIDTH, FUSION_HIDDEN, gelu, 0.0), (FUSION_HIDDEN, CLASSES, linear, 0.0)],
                    &[last.or(every), every],
                    every,
                    d,
                    &mut rng,
                ));
            }
        }
        Ok(Self {
            config: *config,
            embedding,
            gamepad,
            frames,
            head,
            version: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedding(&self) -> &TimeEmbedding {
        &self.embedding
    }

    fn chains(&self) -> impl Iterator<Item = &Chain> {
        self.gamepad.iter().chain(&self.frames).chain(&self.head)
    }

    fn chains_mut(&mut self) -> impl Iterator<Item = &mut Chain> {
        self.gamepad.iter_mut().chain(&mut self.frames).chain(&mut self.head)
    }

    pub fn projections(&self) -> Vec<&Projection> {
        self.chains().flat_map(|c| c.projections()).collect()
    }

    pub fn projections_mut(&mut self) -> Vec<&mut Projection> {
        self.chains_mut().flat_map(|c| c.projections_mut()).collect()
    }

    pub fn dense_param_count(&self) -> usize {
        self.chains().flat_map(|c| c.dense_layers()).map(Dense::param_count).sum()
    }

    pub fn projection_param_count(&self) -> usize {
        self.projections().iter().map(|p| p.param_count()).sum()
    }

    pub fn param_count(&self) -> usize {
        self.dense_param_count() + self.projection_param_count()
    }

    /// Parameters in a fixed order: gamepad chain, frames chain, head; within
    /// a stage the conditioning projection precedes the dense layer.
    pub fn params_mut(&mut self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for chain in self.gamepad.iter_mut().chain(&mut self.frames).chain(&mut self.head) {
            chain.params_mut(&mut out);
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for c in self.chains_mut() {
            c.zero_grad();
        }
    }

    /// Marks parameters as changed; caches from earlier passes become stale.
    pub fn touch(&mut self) {
        self.version += 1;
    }

    pub fn forward(&self, inputs: &Inputs<'_>, mode: Mode, rng: &mut Rng) -> Result<ForwardPass> {
        let batch = inputs.batch_size();
        let levels = inputs.levels;
        let emb = &self.embedding;
        let take = |x: Option<ArrayView2<'_, f64>>, width: usize, what: &str| -> Result<Array2<f64>> {
            let x = x.ok_or_else(|| Error::Shape(format!("{} model needs {what} input", self.config.modality)))?;
            if x.nrows() != batch || x.ncols() != width {
                return Err(Error::Shape(format!(
                    "{what} input is {}x{}, expected {batch}x{width}",
                    x.nrows(),
                    x.ncols()
                )));
            }
            Ok(x.to_owned())
        };

        let mut cache = ModelCache {
            version: self.version,
            batch,
            gamepad: None,
            frames: None,
            head: None,
            ablation: inputs.ablation,
        };
        let logits = match self.config.modality {
            Modality::Gamepad => {
                let x = take(inputs.gamepad, GAMEPAD_FEATURES, "gamepad")?;
                let (y, c) = self.gamepad.as_ref().unwrap().forward(x, levels, emb, mode, rng)?;
                cache.gamepad = Some(c);
                y
            }
            Modality::Frames => {
                let x = take(inputs.frames, FRAME_CHANNELS, "frames")?;
                let (y, c) = self.frames.as_ref().unwrap().forward(x, levels, emb, mode, rng)?;
                cache.frames = Some(c);
                y
            }
            Modality::Fusion => {
                let xg = take(inputs.gamepad, GAMEPAD_FEATURES, "gamepad")?;
                let xf = take(inputs.frames, FRAME_CHANNELS, "frames")?;
                let (mut lg, cg) = self.gamepad.as_ref().unwrap().forward(xg, levels, emb, mode, rng)?;
                let (mut lf, cf) = self.frames.as_ref().unwrap().forward(xf, levels, emb, mode, rng)?;
                match inputs.ablation {
                    Some(Ablation::ZeroGamepadLatent) => lg.fill(0.0),
                    Some(Ablation::ZeroFramesLatent) => lf.fill(0.0),
                    None => {}
                }
                let joint = concatenate(Axis(1), &[lg.view(), lf.view()]).expect("equal batch");
                let (y, ch) = self.head.as_ref().unwrap().forward(joint, levels, emb, mode, rng)?;
                cache.gamepad = Some(cg);
                cache.frames = Some(cf);
                cache.head = Some(ch);
                y
            }
        };
        Ok(ForwardPass {
            probs: softmax_rows(&logits),
            cache,
        })
    }

    /// Sets every parameter gradient to that of the mean cross-entropy of
    /// `pass` against `targets`, and returns the loss.
    pub fn backward(&mut self, pass: &ForwardPass, targets: &[usize]) -> Result<f64> {
        if pass.cache.version != self.version {
            return Err(Error::StaleCache);
        }
        if targets.len() != pass.cache.batch || targets.iter().any(|&t| t >= CLASSES) {
            return Err(Error::Shape(format!(
                "{} targets for a batch of {}",
                targets.len(),
                pass.cache.batch
            )));
        }
        self.zero_grad();
        let loss = cross_entropy(&pass.probs, targets);
        let grad = softmax_cross_entropy_grad(&pass.probs, targets);
        let emb = self.embedding.clone();
        let c = &pass.cache;
        match self.config.modality {
            Modality::Gamepad => {
                self.gamepad.as_mut().unwrap().backward(c.gamepad.as_ref().unwrap(), grad, &emb);
            }
            Modality::Frames => {
                self.frames.as_mut().unwrap().backward(c.frames.as_ref().unwrap(), grad, &emb);
            }
            Modality::Fusion => {
                let g = self.head.as_mut().unwrap().backward(c.head.as_ref().unwrap(), grad, &emb);
                let mut gg = g.slice(s![.., ..LATENT_WIDTH]).to_owned();
                let mut gf = g.slice(s![.., LATENT_WIDTH..]).to_owned();
                match c.ablation {
                    Some(Ablation::ZeroGamepadLatent) => gg.fill(0.0),
                    Some(Ablation::ZeroFramesLatent) => gf.fill(0.0),
                    None => {}
                }
                self.gamepad.as_mut().unwrap().backward(c.gamepad.as_ref().unwrap(), gg, &emb);
                self.frames.as_mut().unwrap().backward(c.frames.as_ref().unwrap(), gf, &emb);
            }
        }
        Ok(loss)
    }

    /// Mean cross-entropy without touching gradients.
    pub fn loss(&self, inputs: &Inputs<'_>, targets: &[usize], mode: Mode, rng: &mut Rng) -> Result<f64> {
        let pass = self.forward(inputs, mode, rng)?;
        Ok(cross_entropy(&pass.probs, targets))
    }

    pub fn predict(&self, inputs: &Inputs<'_>) -> Result<Vec<usize>> {
        let mut rng = nn::seeded_rng(0);
        Ok(self.forward(inputs, Mode::Eval, &mut rng)?.predictions())
    }

    /// Copies parameter values from `other`, which must share the architecture.
    pub fn load_params_from(&mut self, other: &Model) -> Result<()> {
        if self.config.modality != other.config.modality || self.config.conditioning != other.config.conditioning {
            return Err(Error::Shape("cannot copy parameters across architectures".into()));
        }
        let mut src = other.clone();
        let src_params = src.params_mut();
        let dst_params = self.params_mut();
        for (d, s) in dst_params.into_iter().zip(src_params) {
            if d.shape != s.shape {
                return Err(Error::Shape("parameter shapes differ".into()));
            }
            d.value.copy_from_slice(s.value);
        }
        self.touch();
        Ok(())
    }
}

/// Pools one window of frame records to the 512-vector the frames branch
/// consumes: spatial max over `h x w` (maps only), then mean over frames.
pub fn pool_frame_window(records: &[f32], frames: usize, channels: usize, height: usize, width: usize) -> Result<Array1<f64>> {
    if channels != FRAME_CHANNELS {
        return Err(Error::Shape(format!("frames model expects {FRAME_CHANNELS} channels, got {channels}")));
    }
    if frames == 0 {
        return Err(Error::Shape("frame window is empty".into()));
    }
    let per_frame = spatial_max_pool(records, frames, channels, height, width)?;
    temporal_avg_pool(per_frame.view())
}

// Checkpoint layout (little-endian):
//   magic "ENGCKPT1", u32 format version (1),
//   u32 modality tag, u32 strategy tag, u32 embed dim, f64 embed base,
//   f64 dropout, u64 seed, u32 tensor count,
//   per tensor in `params_mut` order: u32 rank, rank x u32 dims, f64 values.
const CHECKPOINT_MAGIC: &[u8; 8] = b"ENGCKPT1";
const CHECKPOINT_VERSION: u32 = 1;

impl Model {
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.config.modality.tag().to_le_bytes());
        let strategy = Strategy::ALL.iter().position(|&s| s == self.config.conditioning).unwrap() as u32;
        buf.extend_from_slice(&strategy.to_le_bytes());
        buf.extend_from_slice(&(self.config.embed_dim as u32).to_le_bytes());
        buf.extend_from_slice(&self.config.embed_base.to_le_bytes());
        buf.extend_from_slice(&self.config.dropout.to_le_bytes());
        buf.extend_from_slice(&self.config.seed.to_le_bytes());
        let mut copy = self.clone();
        let params = copy.params_mut();
        buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for p in params {
            buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.value.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let modality = Modality::from_tag(r.u32()?)?;
        let strategy = *Strategy::ALL
            .get(r.u32()? as usize)
            .ok_or_else(|| Error::Data("unknown strategy tag".into()))?;
        let embed_dim = r.u32()? as usize;
        let embed_base = r.f64()?;
        let dropout = r.f64()?;
        let seed = r.u64()?;
        let config = ModelConfig {
            modality,
            conditioning: strategy,
            seed,
            dropout,
            embed_dim,
            embed_base,
        };
        let mut model = Model::new(&config)?;
        let count = r.u32()? as usize;
        {
            let params = model.params_mut();
            if params.len() != count {
                return Err(Error::Shape(format!("checkpoint holds {count} tensors, model has {}", params.len())));
            }
            for p in params {
                let rank = r.u32()? as usize;
                let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                if dims != p.shape {
                    return Err(Error::Shape(format!("tensor shape {dims:?} != expected {:?}", p.shape)));
                }
                for v in p.value.iter_mut() {
                    *v = r.f64()?;
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Data("trailing bytes after checkpoint tensors".into()));
        }
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Data("checkpoint truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;
    use rand::Rng as _;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = seeded_rng(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
    }

    fn zero_weights(model: &mut Model) {
        for p in model.params_mut() {
            p.value.fill(0.0);
        }
    }

    #[test]
    fn parameter_counts() {
        let cfg = |m, s| ModelConfig::new(m, s, 1);
        let g = Model::new(&cfg(Modality::Gamepad, Strategy::None)).unwrap();
        assert_eq!(g.param_count(), 1_022);
        let g = Model::new(&cfg(Modality::Gamepad, Strategy::Sll)).unwrap();
        assert_eq!(g.projection_param_count(), 15_903);
        let f = Model::new(&cfg(Modality::Frames, Strategy::None)).unwrap();
        assert_eq!(f.param_count(), 512 * 128 + 128 + 128 * 30 + 30 + 30 * 2 + 2);
        assert_eq!(f.param_count(), 69_596);
        let u = Model::new(&cfg(Modality::Fusion, Strategy::None)).unwrap();
        let head: usize = u.head.as_ref().unwrap().dense_layers().map(Dense::param_count).sum();
        assert_eq!(head, 2_018);

        let d = DEFAULT_EMBED_DIM;
        let expect = |widths: &[usize], scale: usize| -> usize { widths.iter().map(|&n| scale * n * d + scale * n).sum() };
        let f = Model::new(&cfg(Modality::Frames, Strategy::Sll)).unwrap();
        assert_eq!(f.projection_param_count(), expect(&[128], 1));
        let f = Model::new(&cfg(Modality::Frames, Strategy::Ssll)).unwrap();
        assert_eq!(f.projection_param_count(), expect(&[128], 2));
        let f = Model::new(&cfg(Modality::Frames, Strategy::Ssal)).unwrap();
        assert_eq!(f.projection_param_count(), expect(&[512, 128, 30, 2], 2));
        let g = Model::new(&cfg(Modality::Gamepad, Strategy::Ssal)).unwrap();
        assert_eq!(g.projection_param_count(), expect(&[31, 30, 2], 2));
        let u = Model::new(&cfg(Modality::Fusion, Strategy::Sll)).unwrap();
        assert_eq!(u.projection_param_count(), expect(&[60], 1));
        let u = Model::new(&cfg(Modality::Fusion, Strategy::Ssal)).unwrap();
        assert_eq!(u.projection_param_count(), expect(&[31, 512, 128, 60, 32, 2], 2));
        assert_eq!(Model::new(&cfg(Modality::Fusion, Strategy::None)).unwrap().projections().len(), 0);
    }

    #[test]
    fn zero_network_is_uniform() {
        for modality in Modality::ALL {
            let mut m = Model::new(&ModelConfig::new(modality, Strategy::Ssal, 3)).unwrap();
            zero_weights(&mut m);
            let g = random(4, 31, 1);
            let f = random(4, 512, 2);
            let levels = [1, 2, 3, 1];
            let pass = m
                .forward(&Inputs::new(Some(g.view()), Some(f.view()), &levels), Mode::Eval, &mut seeded_rng(0))
                .unwrap();
            assert!(pass.probs.iter().all(|&p| p == 0.5));
        }
    }

    #[test]
    fn fusion_with_zero_head_ignores_branches() {
        let mut m = Model::new(&ModelConfig::new(Modality::Fusion, Strategy::None, 3)).unwrap();
        for layer in &mut m.head.as_mut().unwrap().stages {
            layer.dense.weight.fill(0.0);
        }
        let g = random(5, 31, 1);
        let f = random(5, 512, 2);
        let pass = m.forward(&Inputs::new(Some(g.view()), Some(f.view()), &[1; 5]), Mode::Eval, &mut seeded_rng(0)).unwrap();
        assert!(pass.probs.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn ablation_matches_head_on_zeroed_latent() {
        let m = Model::new(&ModelConfig::new(Modality::Fusion, Strategy::None, 5)).unwrap();
        let g = random(3, 31, 1);
        let f = random(3, 512, 2);
        let levels = [1, 1, 2];
        let mut rng = seeded_rng(0);
        let (lg, _) = m.gamepad.as_ref().unwrap().forward(g.clone(), &levels, &m.embedding, Mode::Eval, &mut rng).unwrap();
        let joint = concatenate(Axis(1), &[lg.view(), Array2::zeros((3, 30)).view()]).unwrap();
        let (logits, _) = m.head.as_ref().unwrap().forward(joint, &levels, &m.embedding, Mode::Eval, &mut rng).unwrap();
        let mut inputs = Inputs::new(Some(g.view()), Some(f.view()), &levels);
        inputs.ablation = Some(Ablation::ZeroFramesLatent);
        let pass = m.forward(&inputs, Mode::Eval, &mut rng).unwrap();
        assert_eq!(pass.probs, softmax_rows(&logits));
        // Changing the frames input has no effect once its latent is zeroed.
        let f2 = random(3, 512, 9);
        inputs.frames = Some(f2.view());
        assert_eq!(m.forward(&inputs, Mode::Eval, &mut rng).unwrap().probs, pass.probs);
    }

    #[test]
    fn maps_and_vectors_agree_after_pooling() {
        let m = Model::new(&ModelConfig::new(Modality::Frames, Strategy::None, 2)).unwrap();
        let mut rng = seeded_rng(4);
        let maps: Vec<f32> = (0..30 * 512 * 49).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let vectors: Vec<f32> = maps.chunks(49).map(|g| g.iter().cloned().fold(f32::MIN, f32::max)).collect();
        let a = pool_frame_window(&maps, 30, 512, 7, 7).unwrap();
        let b = pool_frame_window(&vectors, 30, 512, 1, 1).unwrap();
        assert_eq!(a, b);
        let xa = a.insert_axis(Axis(0));
        let xb = b.insert_axis(Axis(0));
        let pa = m.predict(&Inputs::new(None, Some(xa.view()), &[1])).unwrap();
        let pb = m.predict(&Inputs::new(None, Some(xb.view()), &[1])).unwrap();
        assert_eq!(pa, pb);
        assert!(pool_frame_window(&vectors, 30, 256, 2, 1).is_err());
    }

    #[test]
    fn constant_frames_give_deterministic_eval_output() {
        let m = Model::new(&ModelConfig::new(Modality::Frames, Strategy::None, 2)).unwrap();
        let x = Array2::from_elem((2, 512), 0.3);
        let a = m.forward(&Inputs::new(None, Some(x.view()), &[1, 1]), Mode::Eval, &mut seeded_rng(1)).unwrap();
        let b = m.forward(&Inputs::new(None, Some(x.view()), &[1, 1]), Mode::Eval, &mut seeded_rng(2)).unwrap();
        assert_eq!(a.probs, b.probs);
        assert_eq!(a.probs.row(0), a.probs.row(1));
    }

    #[test]
    fn missing_modality_and_bad_shape_fail() {
        let m = Model::new(&ModelConfig::new(Modality::Fusion, Strategy::None, 2)).unwrap();
        let g = random(2, 31, 1);
        assert!(m.forward(&Inputs::new(Some(g.view()), None, &[1, 1]), Mode::Eval, &mut seeded_rng(0)).is_err());
        let bad = random(2, 30, 1);
        let f = random(2, 512, 1);
        assert!(m.forward(&Inputs::new(Some(bad.view()), Some(f.view()), &[1, 1]), Mode::Eval, &mut seeded_rng(0)).is_err());
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut m = Model::new(&ModelConfig::new(Modality::Gamepad, Strategy::None, 2)).unwrap();
        let g = random(2, 31, 1);
        let pass = m.forward(&Inputs::new(Some(g.view()), None, &[1, 1]), Mode::Train, &mut seeded_rng(0)).unwrap();
        m.touch();
        assert!(matches!(m.backward(&pass, &[0, 1]), Err(Error::StaleCache)));
    }

    #[test]
    fn duplicated_sample_doubles_its_contribution() {
        let mut m = Model::new(&ModelConfig::new(Modality::Frames, Strategy::Ssll, 7)).unwrap();
        for p in m.projections_mut() {
            p.weight.mapv_inplace(|_| 0.01);
        }
        let x = random(2, 512, 3);
        let grads = |m: &mut Model, rows: &[usize], levels: &[u8], targets: &[usize]| -> Vec<f64> {
            let xb = x.select(Axis(0), rows);
            let pass = m.forward(&Inputs::new(None, Some(xb.view()), levels), Mode::Eval, &mut seeded_rng(0)).unwrap();
            m.backward(&pass, targets).unwrap();
            m.params_mut().into_iter().flat_map(|p| p.grad.to_vec()).collect()
        };
        let a = grads(&mut m, &[0], &[2], &[1]);
        let b = grads(&mut m, &[1], &[3], &[0]);
        let aab = grads(&mut m, &[0, 0, 1], &[2, 2, 3], &[1, 1, 0]);
        for ((x, y), z) in a.iter().zip(&b).zip(&aab) {
            let expected = (2.0 * x + y) / 3.0;
            assert!((z - expected).abs() <= 1e-12 * (1.0 + expected.abs()), "{z} vs {expected}");
        }
    }

    #[test]
    fn certain_correct_prediction_zeroes_output_grad() {
        let mut m = Model::new(&ModelConfig::new(Modality::Gamepad, Strategy::None, 2)).unwrap();
        {
            let out = &mut m.gamepad.as_mut().unwrap().stages[1].dense;
            out.weight.fill(0.0);
            out.bias[0] = -800.0;
            out.bias[1] = 800.0;
        }
        let g = random(3, 31, 1);
        let pass = m.forward(&Inputs::new(Some(g.view()), None, &[1, 2, 3]), Mode::Eval, &mut seeded_rng(0)).unwrap();
        assert!(pass.probs.column(1).iter().all(|&p| p == 1.0));
        m.backward(&pass, &[1, 1, 1]).unwrap();
        let out = &m.gamepad.as_ref().unwrap().stages[1].dense;
        assert!(out.grad_weight().iter().all(|&v| v == 0.0));
        assert!(out.grad_bias().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = Model::new(&ModelConfig::new(Modality::Fusion, Strategy::Ssal, 11)).unwrap();
        for (k, p) in m.projections_mut().into_iter().enumerate() {
            p.bias.fill(k as f64 * 0.5);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save_checkpoint(&path).unwrap();
        let back = Model::load_checkpoint(&path).unwrap();
        assert_eq!(back.param_count(), m.param_count());
        let mut a = m.clone();
        let mut b = back.clone();
        for (x, y) in a.params_mut().into_iter().zip(b.params_mut()) {
            assert!(x.value.iter().zip(y.value.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, bytes).unwrap();
        assert!(Model::load_checkpoint(&path).is_err());
    }
}
