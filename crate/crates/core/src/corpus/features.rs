//! `ENGFEAT1` frame-feature container.
//!
//! Little-endian layout:
//!
//! ```text
//! offset  size  field
//! 0       8     magic "ENGFEAT1"
//! 8       4     layout tag (u32): 0 = VECTORS, 1 = MAPS
//! 12      4     frame count (u32)
//! 16      4     C (u32)
//! 20      4     H (u32)   1 for VECTORS
//! 24      4     W (u32)   1 for VECTORS
//! 28      8     fps (f64)
//! 36      ...   payload: frame count x C x H x W f32, row-major
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"ENGFEAT1";
const HEADER_LEN: usize = 36;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameLayout {
    /// One C-vector per frame.
    Vectors,
    /// One C x H x W map stack per frame.
    Maps,
}

impl FrameLayout {
    fn tag(self) -> u32 {
        match self {
            FrameLayout::Vectors => 0,
            FrameLayout::Maps => 1,
        }
    }

    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(FrameLayout::Vectors),
            1 => Ok(FrameLayout::Maps),
            other => Err(Error::Data(format!("unknown feature layout tag {other}"))),
        }
    }
}

/// Time-ordered per-frame backbone features. Frame `i` is stamped `i / fps`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatureStream {
    pub layout: FrameLayout,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
    pub data: Vec<f32>,
}

impl FrameFeatureStream {
    pub fn vectors(channels: usize, fps: f64, data: Vec<f32>) -> Result<Self> {
        let stream = Self {
            layout: FrameLayout::Vectors,
            channels,
            height: 1,
            width: 1,
            fps,
            data,
        };
        stream.validate()?;
        Ok(stream)
    }

    pub fn maps(channels: usize, height: usize, width: usize, fps: f64, data: Vec<f32>) -> Result<Self> {
        let stream = Self {
            layout: FrameLayout::Maps,
            channels,
            height,
            width,
            fps,
            data,
        };
        stream.validate()?;
        Ok(stream)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Shape("feature dimensions must be positive".into()));
        }
        if self.layout == FrameLayout::Vectors && (self.height != 1 || self.width != 1) {
            return Err(Error::Shape("VECTORS layout requires H = W = 1".into()));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::Data(format!("fps {} must be positive", self.fps)));
        }
        if !self.data.len().is_multiple_of(self.record_len()) {
            return Err(Error::Shape(format!(
                "payload of {} values is not a whole number of {}-value records",
                self.data.len(),
                self.record_len()
            )));
        }
        Ok(())
    }

    /// Values per frame record.
    pub fn record_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn frame_count(&self) -> usize {
        self.data.len() / self.record_len()
    }

    pub fn frame(&self, index: usize) -> &[f32] {
        let len = self.record_len();
        &self.data[index * len..(index + 1) * len]
    }

    pub fn timestamp(&self, index: usize) -> f64 {
        index as f64 / self.fps
    }
}

pub fn write_feature_file(stream: &FrameFeatureStream, path: &Path) -> Result<()> {
    stream.validate()?;
    let dim = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::DimensionOverflow(format!("{what} = {v} exceeds u32")))
    };
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(FEATURE_MAGIC);
    header.extend_from_slice(&stream.layout.tag().to_le_bytes());
    header.extend_from_slice(&dim(stream.frame_count(), "frame count")?.to_le_bytes());
    header.extend_from_slice(&dim(stream.channels, "C")?.to_le_bytes());
    header.extend_from_slice(&dim(stream.height, "H")?.to_le_bytes());
    header.extend_from_slice(&dim(stream.width, "W")?.to_le_bytes());
    header.extend_from_slice(&stream.fps.to_le_bytes());
    out.write_all(&header).map_err(|e| Error::io(path, e))?;

    let mut buf = Vec::with_capacity(stream.record_len() * 4);
    for record in stream.data.chunks(stream.record_len()) {
        buf.clear();
        for v in record {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<FrameFeatureStream> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<FrameFeatureStream> {
    if bytes.len() < FEATURE_MAGIC.len() || &bytes[..8] != FEATURE_MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Data("feature file header truncated".into()));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let layout = FrameLayout::from_tag(u32_at(8) as u32)?;
    let frames = u32_at(12);
    let (c, h, w) = (u32_at(16), u32_at(20), u32_at(24));
    let fps = f64::from_le_bytes(bytes[28..36].try_into().unwrap());

    let record_len = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::DimensionOverflow(format!("{c} x {h} x {w}")))?;
    let record_bytes = record_len
        .checked_mul(4)
        .ok_or_else(|| Error::DimensionOverflow(format!("record of {record_len} values")))?;
    if record_bytes == 0 {
        return Err(Error::Shape("feature dimensions must be positive".into()));
    }
    let payload_bytes = frames
        .checked_mul(record_bytes)
        .ok_or_else(|| Error::DimensionOverflow(format!("{frames} frames of {record_len} values")))?;

    let payload = &bytes[HEADER_LEN..];
    if payload.len() < payload_bytes {
        return Err(Error::Truncated {
            expected: frames,
            found: payload.len() / record_bytes,
        });
    }
    if payload.len() > payload_bytes {
        return Err(Error::Data(format!(
            "feature file has {} trailing bytes after {frames} frames",
            payload.len() - payload_bytes
        )));
    }

    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let stream = FrameFeatureStream {
        layout,
        channels: c,
        height: h,
        width: w,
        fps,
        data,
    };
    stream.validate()?;
    Ok(stream)
}
