//! Annotated video records, segments, dataset manifests and splits.

mod io;
mod manifest;
mod synth;

pub use io::{load_video, read_video, save_video, write_video, VIDEO_MAGIC};
pub use manifest::{
    load_manifest, save_manifest, split_dataset, DatasetManifest, ManifestEntry, Split,
    MANIFEST_VERSION,
};
pub use synth::{generate_synthetic_video, AnomalyKind, GenConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mhi::GrayFrame;

/// Number of developmental stage classes.
pub const NUM_STAGES: usize = 11;
/// Label of a cleavage (division) event.
pub const CLEAVAGE: StageLabel = StageLabel(9);
/// Label of developmental arrest.
pub const ARREST: StageLabel = StageLabel(10);

/// Developmental stage: `0..=8` are visible cell counts 1..=9+, `9` is a
/// cleavage event and `10` is developmental arrest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StageLabel(u8);

impl StageLabel {
    pub fn new(id: u8) -> Result<Self> {
        if (id as usize) < NUM_STAGES {
            Ok(Self(id))
        } else {
            Err(Error::Label(format!("stage id {id} not in 0..{NUM_STAGES}")))
        }
    }

    /// Stage for a visible cell count (counts above nine collapse to 9+).
    pub fn from_cell_count(count: usize) -> Self {
        Self((count.clamp(1, 9) - 1) as u8)
    }

    pub fn id(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Cell count for count stages (9 means "9 or more").
    pub fn cell_count(self) -> Option<usize> {
        (self.0 <= 8).then_some(self.0 as usize + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransferLabel {
    /// Not transferable, encoded 0.
    #[serde(rename = "NT")]
    NotTransferable,
    /// Transferable, encoded 1.
    #[serde(rename = "T")]
    Transferable,
}

impl TransferLabel {
    pub fn encode(self) -> u8 {
        match self {
            TransferLabel::NotTransferable => 0,
            TransferLabel::Transferable => 1,
        }
    }

    pub fn decode(v: u8) -> Result<Self> {
        match v {
            0 => Ok(TransferLabel::NotTransferable),
            1 => Ok(TransferLabel::Transferable),
            _ => Err(Error::Label(format!("transfer label {v}"))),
        }
    }

    pub fn index(self) -> usize {
        self.encode() as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TransferLabel::NotTransferable => "NT",
            TransferLabel::Transferable => "T",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoRecord {
    pub id: String,
    pub frames: Vec<GrayFrame>,
    pub stage_labels: Vec<StageLabel>,
    pub transfer: TransferLabel,
}

impl VideoRecord {
    pub fn new(
        id: impl Into<String>,
        frames: Vec<GrayFrame>,
        stage_labels: Vec<StageLabel>,
        transfer: TransferLabel,
    ) -> Result<Self> {
        let v = Self {
            id: id.into(),
            frames,
            stage_labels,
            transfer,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.stage_labels.len() {
            return Err(Error::Validation(format!(
                "{} frames but {} labels",
                self.frames.len(),
                self.stage_labels.len()
            )));
        }
        if let Some(f0) = self.frames.first() {
            if self
                .frames
                .iter()
                .any(|f| f.width() != f0.width() || f.height() != f0.height())
            {
                return Err(Error::Validation("frames differ in size".into()));
            }
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }
}

/// Maximal run of identically labeled frames over `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub label: StageLabel,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn frames(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

pub fn segments_from_framewise(labels: &[StageLabel]) -> Result<Vec<Segment>> {
    if labels.is_empty() {
        return Err(Error::InsufficientInput("empty label sequence".into()));
    }
    let mut segs = Vec::new();
    let mut start = 0;
    for t in 1..=labels.len() {
        if t == labels.len() || labels[t] != labels[start] {
            segs.push(Segment {
                start,
                end: t,
                label: labels[start],
            });
            start = t;
        }
    }
    Ok(segs)
}

pub fn expand_segments(segments: &[Segment]) -> Vec<StageLabel> {
    segments
        .iter()
        .flat_map(|s| std::iter::repeat(s.label).take(s.len()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(ids: &[u8]) -> Vec<StageLabel> {
        ids.iter().map(|&i| StageLabel::new(i).unwrap()).collect()
    }

    #[test]
    fn two_runs() {
        let segs = segments_from_framewise(&labels(&[1, 1, 2, 2, 2])).unwrap();
        let got: Vec<_> = segs.iter().map(|s| (s.start, s.end, s.label.id())).collect();
        assert_eq!(got, vec![(0, 2, 1), (2, 5, 2)]);
    }

    #[test]
    fn singleton() {
        let segs = segments_from_framewise(&labels(&[7])).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!((segs[0].start, segs[0].end, segs[0].label.id()), (0, 1, 7));
    }

    #[test]
    fn empty_is_error() {
        assert!(matches!(
            segments_from_framewise(&[]),
            Err(Error::InsufficientInput(_))
        ));
    }

    #[test]
    fn stage_label_range() {
        assert!(StageLabel::new(10).is_ok());
        assert!(matches!(StageLabel::new(11), Err(Error::Label(_))));
        assert_eq!(StageLabel::from_cell_count(12).id(), 8);
        assert_eq!(StageLabel::from_cell_count(1).cell_count(), Some(1));
        assert_eq!(CLEAVAGE.cell_count(), None);
    }

    #[test]
    fn mismatched_record_rejected() {
        let f = GrayFrame::filled(2, 2, 0).unwrap();
        let r = VideoRecord::new("x", vec![f], vec![], TransferLabel::Transferable);
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    proptest! {
        #[test]
        fn labels_round_trip_through_segments(ids in prop::collection::vec(0u8..4, 1..50)) {
            let ls = labels(&ids);
            let segs = segments_from_framewise(&ls).unwrap();
            prop_assert_eq!(expand_segments(&segs), ls);
            for w in segs.windows(2) {
                prop_assert!(w[0].label != w[1].label);
                prop_assert_eq!(w[0].end, w[1].start);
            }
            prop_assert_eq!(segs.first().unwrap().start, 0);
            prop_assert_eq!(segs.last().unwrap().end, ids.len());
        }

        #[test]
        fn segments_round_trip_through_labels(runs in prop::collection::vec((0u8..11, 1usize..6), 1..12)) {
            let mut segs: Vec<Segment> = Vec::new();
            let mut t = 0;
            for (id, len) in runs {
                let label = StageLabel::new(id).unwrap();
                if let Some(last) = segs.last_mut() {
                    if last.label == label { last.end += len; t += len; continue; }
                }
                segs.push(Segment { start: t, end: t + len, label });
                t += len;
            }
            prop_assert_eq!(segments_from_framewise(&expand_segments(&segs)).unwrap(), segs);
        }
    }
}
