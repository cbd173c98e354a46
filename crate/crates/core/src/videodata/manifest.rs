//! JSON-lines dataset manifests and stratified splits.
//!
//! The first line is a header `{"format":"tf-manifest","version":1}`; every
//! following line is one [`ManifestEntry`].

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::TransferLabel;
use crate::error::{Error, Result};
use crate::rng::rng_for;

pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST_FORMAT: &str = "tf-manifest";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub transfer: TransferLabel,
    pub num_frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self { entries };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Validation(format!("duplicate video id {}", e.id)));
            }
        }
        let tagged = self.entries.iter().filter(|e| e.split.is_some()).count();
        if tagged != 0 && tagged != self.entries.len() {
            return Err(Error::Validation("split tags cover only part of the manifest".into()));
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == Some(split))
    }

    pub fn to_jsonl(&self) -> Result<String> {
        self.validate()?;
        let mut out = serde_json::to_string(&Header {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
        })
        .expect("header serializes");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut offset = 0u64;
        let mut lines = text.split_inclusive('\n');
        let first = lines
            .next()
            .ok_or_else(|| Error::parse(0, "empty manifest"))?;
        let header: Header = serde_json::from_str(first.trim_end())
            .map_err(|e| Error::parse(e.column().saturating_sub(1) as u64, e.to_string()))?;
        if header.format != MANIFEST_FORMAT {
            return Err(Error::parse(0, format!("unknown format {}", header.format)));
        }
        if header.version != MANIFEST_VERSION {
            return Err(Error::Version(format!(
                "manifest version {}, expected {MANIFEST_VERSION}",
                header.version
            )));
        }
        offset += first.len() as u64;
        let mut entries = Vec::new();
        for line in lines {
            let body = line.trim_end();
            if !body.is_empty() {
                let e: ManifestEntry = serde_json::from_str(body).map_err(|err| {
                    Error::parse(offset + err.column().saturating_sub(1) as u64, err.to_string())
                })?;
                entries.push(e);
            }
            offset += line.len() as u64;
        }
        Self::new(entries)
    }
}

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    std::fs::write(path, manifest.to_jsonl()?).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DatasetManifest::from_jsonl(&text)
}

/// Sizes from rounding cumulative boundaries `round(n·Σ_{j≤i} rᵢ)`.
fn cumulative_sizes(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let mut sizes = [0; 3];
    let mut acc = 0.0;
    let mut prev = 0usize;
    for (i, r) in ratios.iter().enumerate() {
        acc += r;
        let bound = if i == 2 {
            n
        } else {
            ((n as f64 * acc).round() as usize).min(n)
        };
        sizes[i] = bound.saturating_sub(prev);
        prev = bound.max(prev);
    }
    sizes
}

/// Stratified train/val/test assignment.
///
/// Split sizes come from rounding cumulative ratio boundaries; the NT videos
/// are distributed across splits the same way in proportion to split size, so
/// each split's NT fraction tracks the global one.
pub fn split_dataset(
    manifest: &DatasetManifest,
    ratios: [f64; 3],
    seed: u64,
) -> Result<DatasetManifest> {
    manifest.validate()?;
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must sum to 1")));
    }
    let n = manifest.entries.len();
    let needed = ratios.iter().filter(|&&r| r > 0.0).count();
    if n < needed {
        return Err(Error::Stratification(format!(
            "{n} videos for {needed} non-empty splits"
        )));
    }
    let sizes = cumulative_sizes(n, &ratios);
    let mut nt: Vec<usize> = Vec::new();
    let mut t: Vec<usize> = Vec::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        match e.transfer {
            TransferLabel::NotTransferable => nt.push(i),
            TransferLabel::Transferable => t.push(i),
        }
    }
    let size_ratios = sizes.map(|s| s as f64 / n as f64);
    let mut nt_sizes = cumulative_sizes(nt.len(), &size_ratios);
    // Keep every split feasible for both classes.
    for i in 0..3 {
        while nt_sizes[i] > sizes[i] {
            nt_sizes[i] -= 1;
            let j = (0..3).find(|&j| nt_sizes[j] < sizes[j]).ok_or_else(|| {
                Error::Stratification("class counts do not fit split sizes".into())
            })?;
            nt_sizes[j] += 1;
        }
    }
    let mut rng = rng_for(seed, "split");
    nt.shuffle(&mut rng);
    t.shuffle(&mut rng);
    let mut out = manifest.clone();
    let (mut ni, mut ti) = (0, 0);
    for (s, split) in Split::ALL.iter().enumerate() {
        for _ in 0..nt_sizes[s] {
            out.entries[nt[ni]].split = Some(*split);
            ni += 1;
        }
        for _ in 0..sizes[s] - nt_sizes[s] {
            out.entries[t[ti]].split = Some(*split);
            ti += 1;
        }
    }
    Ok(out)
}
