//! Turning videos into model-ready examples.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{encode_frames, encode_mhi, FeatureSequence, FeatureStats};
use crate::losses::VideoTargets;
use crate::mhi::{compute_mhi_sequence, DEFAULT_TAU, DEFAULT_THETA};
use crate::model::ModelConfig;
use crate::rng::derive_indexed;
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::trainer::Sample;
use crate::videodata::{
    generate_synthetic_video, split_dataset, DatasetManifest, GenConfig, ManifestEntry, Split,
    StageLabel, TransferLabel, VideoRecord,
};

/// Which feature streams feed the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputModality {
    #[serde(rename = "frames")]
    Frames,
    #[serde(rename = "mhi")]
    Mhi,
    #[serde(rename = "frames+mhi")]
    FramesMhi,
}

impl InputModality {
    pub fn as_str(self) -> &'static str {
        match self {
            InputModality::Frames => "frames",
            InputModality::Mhi => "mhi",
            InputModality::FramesMhi => "frames+mhi",
        }
    }

    pub fn needs_frames(self) -> bool {
        self != InputModality::Mhi
    }

    pub fn needs_mhi(self) -> bool {
        self != InputModality::Frames
    }

    /// Sets the model's input widths and MHI switch for this modality.
    pub fn configure(self, model: &mut ModelConfig, dim: usize) {
        model.frame_dim = dim;
        model.mhi_dim = dim;
        model.use_mhi = self == InputModality::FramesMhi;
    }
}

impl fmt::Display for InputModality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InputModality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frames" | "frame" => Ok(InputModality::Frames),
            "mhi" => Ok(InputModality::Mhi),
            "frames+mhi" => Ok(InputModality::FramesMhi),
            _ => Err(Error::Config(format!(
                "unknown modality {s:?} (frames, mhi, frames+mhi)"
            ))),
        }
    }
}

/// Settings of the frozen feature extraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub dim: usize,
    pub encoder_seed: u64,
    pub tau: u16,
    pub theta: u8,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            dim: 32,
            encoder_seed: 0,
            tau: DEFAULT_TAU,
            theta: DEFAULT_THETA,
        }
    }
}

/// Raw per-video features with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedVideo {
    pub id: String,
    pub frames: Option<FeatureSequence>,
    pub mhi: Option<FeatureSequence>,
    pub labels: Vec<StageLabel>,
    pub transfer: TransferLabel,
}

pub fn encode_video(
    video: &VideoRecord,
    modality: InputModality,
    cfg: &FeatureConfig,
) -> Result<EncodedVideo> {
    let frames = if modality.needs_frames() {
        Some(encode_frames(video, cfg.encoder_seed, cfg.dim)?)
    } else {
        None
    };
    let mhi = if modality.needs_mhi() {
        let maps = compute_mhi_sequence(&video.frames, cfg.tau, cfg.theta)?;
        Some(encode_mhi(&maps, cfg.encoder_seed, cfg.dim)?)
    } else {
        None
    };
    Ok(EncodedVideo {
        id: video.id.clone(),
        frames,
        mhi,
        labels: video.stage_labels.clone(),
        transfer: video.transfer,
    })
}

/// Standardization statistics per modality, fitted on training videos.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub frames: Option<FeatureStats>,
    pub mhi: Option<FeatureStats>,
}

impl Standardizer {
    pub fn fit(train: &[EncodedVideo]) -> Result<Self> {
        let fit = |pick: fn(&EncodedVideo) -> Option<&FeatureSequence>| -> Result<Option<FeatureStats>> {
            let seqs: Vec<FeatureSequence> = train.iter().filter_map(|v| pick(v).cloned()).collect();
            if seqs.is_empty() {
                Ok(None)
            } else {
                FeatureStats::fit(&seqs).map(Some)
            }
        };
        Ok(Standardizer {
            frames: fit(|v| v.frames.as_ref())?,
            mhi: fit(|v| v.mhi.as_ref())?,
        })
    }

    /// Standardized example for the model. With the MHI modality alone the
    /// MHI features take the place of the frame stream.
    pub fn sample<S: Scalar>(&self, v: &EncodedVideo, modality: InputModality) -> Result<Sample<S>> {
        let apply = |seq: Option<&FeatureSequence>, stats: Option<&FeatureStats>, what: &str| {
            let seq = seq.ok_or_else(|| Error::Input(format!("{}: missing {what} features", v.id)))?;
            let stats =
                stats.ok_or_else(|| Error::Input(format!("no {what} statistics fitted")))?;
            Ok::<Matrix<S>, Error>(stats.apply(seq)?.to_matrix())
        };
        let (frames, mhi) = match modality {
            InputModality::Frames => (apply(v.frames.as_ref(), self.frames.as_ref(), "frame")?, None),
            InputModality::Mhi => (apply(v.mhi.as_ref(), self.mhi.as_ref(), "mhi")?, None),
            InputModality::FramesMhi => (
                apply(v.frames.as_ref(), self.frames.as_ref(), "frame")?,
                Some(apply(v.mhi.as_ref(), self.mhi.as_ref(), "mhi")?),
            ),
        };
        Ok(Sample {
            id: v.id.clone(),
            frames,
            mhi,
            targets: VideoTargets::new(v.labels.clone(), v.transfer)?,
        })
    }

    pub fn samples<S: Scalar>(&self, vs: &[EncodedVideo], modality: InputModality) -> Result<Vec<Sample<S>>> {
        vs.iter().map(|v| self.sample(v, modality)).collect()
    }
}

/// Seed of the `index`-th generated video of a dataset.
pub fn video_seed(seed: u64, index: usize) -> u64 {
    derive_indexed(seed, "video", index as u64)
}

/// Generated videos grouped by split.
#[derive(Debug, Clone)]
pub struct SyntheticSplits {
    pub train: Vec<VideoRecord>,
    pub val: Vec<VideoRecord>,
    pub test: Vec<VideoRecord>,
}

/// Ratios reproducing the requested split sizes exactly.
pub fn count_ratios(counts: [usize; 3]) -> Result<[f64; 3]> {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(Error::Config("empty dataset".into()));
    }
    let mut r = counts.map(|c| c as f64 / n as f64);
    r[2] = 1.0 - r[0] - r[1];
    Ok(r)
}

/// Generates `sum(counts)` videos and splits them with stratification.
pub fn synthetic_splits(gen: &GenConfig, counts: [usize; 3], seed: u64) -> Result<SyntheticSplits> {
    let n: usize = counts.iter().sum();
    let videos: Vec<VideoRecord> = (0..n)
        .map(|i| generate_synthetic_video(video_seed(seed, i), gen))
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest::new(
        videos
            .iter()
            .map(|v| ManifestEntry {
                id: v.id.clone(),
                path: format!("{}.tfv", v.id).into(),
                transfer: v.transfer,
                num_frames: v.num_frames(),
                split: None,
            })
            .collect(),
    )?;
    let split = split_dataset(&manifest, count_ratios(counts)?, seed)?;
    let mut out = SyntheticSplits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (v, e) in videos.into_iter().zip(&split.entries) {
        match e.split {
            Some(Split::Train) => out.train.push(v),
            Some(Split::Val) => out.val.push(v),
            _ => out.test.push(v),
        }
    }
    Ok(out)
}

/// Examples for the three splits, standardized with training statistics.
pub struct PreparedData<S> {
    pub train: Vec<Sample<S>>,
    pub val: Vec<Sample<S>>,
    pub test: Vec<Sample<S>>,
    pub standardizer: Standardizer,
}

pub fn prepare<S: Scalar>(
    splits: &SyntheticSplits,
    modality: InputModality,
    cfg: &FeatureConfig,
) -> Result<PreparedData<S>> {
    let enc = |vs: &[VideoRecord]| -> Result<Vec<EncodedVideo>> {
        vs.iter().map(|v| encode_video(v, modality, cfg)).collect()
    };
    let (train, val, test) = (enc(&splits.train)?, enc(&splits.val)?, enc(&splits.test)?);
    let standardizer = Standardizer::fit(&train)?;
    Ok(PreparedData {
        train: standardizer.samples(&train, modality)?,
        val: standardizer.samples(&val, modality)?,
        test: standardizer.samples(&test, modality)?,
        standardizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gen() -> GenConfig {
        GenConfig {
            frames: 20,
            size: 32,
            ..GenConfig::default()
        }
    }

    #[test]
    fn modality_parsing() {
        for m in [InputModality::Frames, InputModality::Mhi, InputModality::FramesMhi] {
            assert_eq!(m.as_str().parse::<InputModality>().unwrap(), m);
        }
        assert!("rgb".parse::<InputModality>().is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let a = synthetic_splits(&gen(), [8, 2, 3], 4).unwrap();
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (8, 2, 3));
        let b = synthetic_splits(&gen(), [8, 2, 3], 4).unwrap();
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn standardized_training_features() {
        let s = synthetic_splits(&gen(), [6, 1, 1], 1).unwrap();
        let cfg = FeatureConfig {
            dim: 8,
            ..FeatureConfig::default()
        };
        let data = prepare::<f64>(&s, InputModality::FramesMhi, &cfg).unwrap();
        for pick in [0, 1] {
            let mut sum = vec![0.0; 8];
            let mut sq = vec![0.0; 8];
            let mut n = 0.0;
            for x in &data.train {
                let m = if pick == 0 { &x.frames } else { x.mhi.as_ref().unwrap() };
                for r in 0..m.rows() {
                    for c in 0..8 {
                        sum[c] += m[(r, c)];
                        sq[c] += m[(r, c)] * m[(r, c)];
                    }
                    n += 1.0;
                }
            }
            for c in 0..8 {
                let mean = sum[c] / n;
                assert!(mean.abs() < 1e-5);
                let std = (sq[c] / n - mean * mean).sqrt();
                assert!((0.99..=1.01).contains(&std), "std {std}");
            }
        }
        let mhi_only = prepare::<f64>(&s, InputModality::Mhi, &cfg).unwrap();
        assert!(mhi_only.train[0].mhi.is_none());
        assert_eq!(mhi_only.train[0].frames, data.train[0].mhi.clone().unwrap());
    }
}
