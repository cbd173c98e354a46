//! Per-frame feature sequences from a frozen, seeded random-projection encoder.
//!
//! Each image is area-averaged down to a 16×16 grid, flattened, and projected
//! to `dim` features by a fixed Gaussian matrix with entries `N(0, 1/256)`.
//! Frames and MHI maps use independent projection streams. Standardization
//! statistics are fitted on the training split and applied everywhere.
//!
//! `TFF1` layout (little endian): magic, `u32` modality (0 frame, 1 mhi),
//! `u32` T, `u32` D, then `T·D` `f32` values row-major.

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mhi::{GrayFrame, MhiMap};
use crate::rng::rng_for;
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::videodata::VideoRecord;

pub const FEATURE_MAGIC: &[u8; 4] = b"TFF1";
const GRID: usize = 16;
const MIN_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Frame,
    Mhi,
}

impl Modality {
    fn code(self) -> u32 {
        match self {
            Modality::Frame => 0,
            Modality::Mhi => 1,
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(Modality::Frame),
            1 => Some(Modality::Mhi),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Frame => "frame",
            Modality::Mhi => "mhi",
        }
    }

    fn stream(self) -> &'static str {
        match self {
            Modality::Frame => "encoder-frame",
            Modality::Mhi => "encoder-mhi",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub modality: Modality,
    len: usize,
    dim: usize,
    values: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(modality: Modality, len: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != len * dim {
            return Err(Error::Shape(format!("{} values for {len}x{dim}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
        Ok(Self {
            modality,
            len,
            dim,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    /// First `len` frames.
    pub fn truncated(&self, len: usize) -> Self {
        let len = len.min(self.len);
        Self {
            modality: self.modality,
            len,
            dim: self.dim,
            values: self.values[..len * self.dim].to_vec(),
        }
    }

    pub fn to_matrix<S: Scalar>(&self) -> Matrix<S> {
        Matrix::from_vec(
            self.len,
            self.dim,
            self.values.iter().map(|&v| S::lit(v as f64)).collect(),
        )
        .expect("shape checked at construction")
    }

    pub fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim != expected {
            return Err(Error::Dimension {
                expected,
                found: self.dim,
            });
        }
        Ok(())
    }
}

/// Fixed projection for one modality.
#[derive(Debug, Clone)]
pub struct Encoder {
    modality: Modality,
    dim: usize,
    /// `dim × 256`, row-major.
    weights: Vec<f64>,
}

impl Encoder {
    pub fn new(modality: Modality, seed: u64, dim: usize) -> Result<Self> {
        if dim < MIN_DIM {
            return Err(Error::Config(format!("feature dim {dim} < {MIN_DIM}")));
        }
        let mut rng = rng_for(seed, modality.stream());
        let normal = Normal::new(0.0, 1.0 / GRID as f64).expect("valid sigma");
        let weights = (0..dim * GRID * GRID).map(|_| normal.sample(&mut rng)).collect();
        Ok(Self {
            modality,
            dim,
            weights,
        })
    }

    fn project(&self, pooled: &[f64]) -> impl Iterator<Item = f32> + '_ {
        let pooled = pooled.to_vec();
        self.weights
            .chunks_exact(GRID * GRID)
            .map(move |w| w.iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>() as f32)
    }

    fn encode_images<'a>(
        &self,
        images: impl Iterator<Item = (usize, usize, Vec<f64>)> + 'a,
    ) -> Result<FeatureSequence> {
        let mut values = Vec::new();
        let mut len = 0;
        for (w, h, px) in images {
            let pooled = pool(w, h, &px)?;
            values.extend(self.project(&pooled));
            len += 1;
        }
        FeatureSequence::new(self.modality, len, self.dim, values)
    }
}

/// Area-average to a 16×16 grid.
fn pool(width: usize, height: usize, px: &[f64]) -> Result<Vec<f64>> {
    if width < GRID || height < GRID {
        return Err(Error::Shape(format!(
            "image {width}x{height} smaller than the {GRID}x{GRID} pooling grid"
        )));
    }
    let mut out = vec![0.0; GRID * GRID];
    for gy in 0..GRID {
        let (y0, y1) = (gy * height / GRID, (gy + 1) * height / GRID);
        for gx in 0..GRID {
            let (x0, x1) = (gx * width / GRID, (gx + 1) * width / GRID);
            let mut s = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    s += px[y * width + x];
                }
            }
            out[gy * GRID + gx] = s / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    Ok(out)
}

fn frame_pixels(f: &GrayFrame) -> (usize, usize, Vec<f64>) {
    (
        f.width(),
        f.height(),
        f.values().iter().map(|&v| v as f64 / 255.0).collect(),
    )
}

fn mhi_pixels(m: &MhiMap) -> (usize, usize, Vec<f64>) {
    let tau = m.tau() as f64;
    (
        m.width(),
        m.height(),
        m.values().iter().map(|&v| v as f64 / tau).collect(),
    )
}

/// Raw (unstandardized) frame features.
pub fn encode_frames(video: &VideoRecord, encoder_seed: u64, dim: usize) -> Result<FeatureSequence> {
    let enc = Encoder::new(Modality::Frame, encoder_seed, dim)?;
    enc.encode_images(video.frames.iter().map(frame_pixels))
}

/// Raw (unstandardized) MHI features.
pub fn encode_mhi(maps: &[MhiMap], encoder_seed: u64, dim: usize) -> Result<FeatureSequence> {
    let enc = Encoder::new(Modality::Mhi, encoder_seed, dim)?;
    enc.encode_images(maps.iter().map(mhi_pixels))
}

/// Per-feature mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub modality: Modality,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    /// Two-pass fit in a fixed accumulation order.
    pub fn fit(seqs: &[FeatureSequence]) -> Result<Self> {
        let first = seqs
            .first()
            .ok_or_else(|| Error::InsufficientInput("no sequences to fit statistics".into()))?;
        let dim = first.dim;
        let mut n = 0usize;
        let mut mean = vec![0.0f64; dim];
        for s in seqs {
            s.check_dim(dim)?;
            for t in 0..s.len {
                for (m, &v) in mean.iter_mut().zip(s.row(t)) {
                    *m += v as f64;
                }
            }
            n += s.len;
        }
        if n == 0 {
            return Err(Error::InsufficientInput("empty sequences".into()));
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0f64; dim];
        for s in seqs {
            for t in 0..s.len {
                for ((acc, &v), m) in var.iter_mut().zip(s.row(t)).zip(&mean) {
                    *acc += (v as f64 - m).powi(2);
                }
            }
        }
        let std = var.iter().map(|v| (v / n as f64).sqrt().max(1e-6)).collect();
        Ok(Self {
            modality: first.modality,
            mean,
            std,
        })
    }

    pub fn apply(&self, seq: &FeatureSequence) -> Result<FeatureSequence> {
        seq.check_dim(self.mean.len())?;
        let values = seq
            .values
            .chunks_exact(seq.dim)
            .flat_map(|row| {
                row.iter()
                    .zip(self.mean.iter().zip(&self.std))
                    .map(|(&v, (m, s))| ((v as f64 - m) / s) as f32)
            })
            .collect();
        FeatureSequence::new(seq.modality, seq.len, seq.dim, values)
    }
}

pub fn write_features(seq: &FeatureSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * seq.values.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&seq.modality.code().to_le_bytes());
    out.extend_from_slice(&(seq.len as u32).to_le_bytes());
    out.extend_from_slice(&(seq.dim as u32).to_le_bytes());
    for v in &seq.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_features(buf: &[u8]) -> Result<FeatureSequence> {
    if buf.len() < 16 {
        return Err(Error::parse(buf.len() as u64, "truncated feature header"));
    }
    if &buf[..4] != FEATURE_MAGIC {
        if buf.starts_with(b"TFF") {
            return Err(Error::Version("feature format is not TFF1".into()));
        }
        return Err(Error::parse(0, "bad magic, not a TFF feature file"));
    }
    let word = |i: usize| u32::from_le_bytes([buf[i], buf[i + 1], buf[i + 2], buf[i + 3]]);
    let modality = Modality::from_code(word(4))
        .ok_or_else(|| Error::parse(4, format!("unknown modality code {}", word(4))))?;
    let (len, dim) = (word(8) as usize, word(12) as usize);
    let expected = len
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::parse(8, "size overflows"))?;
    if buf.len() - 16 != expected {
        return Err(Error::parse(
            16 + (buf.len() - 16).min(expected) as u64,
            format!("payload is {} bytes, header implies {expected}", buf.len() - 16),
        ));
    }
    let values = buf[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    FeatureSequence::new(modality, len, dim, values)
}

pub fn save_features(path: &Path, seq: &FeatureSequence) -> Result<()> {
    std::fs::write(path, write_features(seq)).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<FeatureSequence> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_features(&bytes)
}

/// Loads a feature file and checks it against the dimension a model expects.
pub fn load_features_checked(path: &Path, modality: Modality, dim: usize) -> Result<FeatureSequence> {
    let seq = load_features(path)?;
    if seq.modality != modality {
        return Err(Error::Input(format!(
            "{}: expected {} features, found {}",
            path.display(),
            modality.as_str(),
            seq.modality.as_str()
        )));
    }
    seq.check_dim(dim)?;
    Ok(seq)
}
