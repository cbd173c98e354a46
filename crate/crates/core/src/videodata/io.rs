//! `TFV1` video files.
//!
//! Layout (little endian):
//!
//! ```text
//! 0   magic  "TFV1"
//! 4   u32    width
//! 8   u32    height
//! 12  u32    frame count T
//! 16  u8[T·width·height]  frames, row-major, frame after frame
//!     u8[T]  stage label ids
//!     u8     transfer label (1 = T, 0 = NT)
//!     u16    id length, then the id bytes (UTF-8)
//! ```

use std::path::Path;

use super::{StageLabel, TransferLabel, VideoRecord};
use crate::error::{Error, Result};
use crate::mhi::GrayFrame;

pub const VIDEO_MAGIC: &[u8; 4] = b"TFV1";

pub fn write_video(video: &VideoRecord) -> Result<Vec<u8>> {
    video.validate()?;
    let (w, h) = video
        .frames
        .first()
        .map(|f| (f.width(), f.height()))
        .ok_or_else(|| Error::InsufficientInput("video without frames".into()))?;
    let id = video.id.as_bytes();
    if id.len() > u16::MAX as usize {
        return Err(Error::Validation("video id too long".into()));
    }
    let mut out = Vec::with_capacity(16 + video.frames.len() * (w * h + 1) + 3 + id.len());
    out.extend_from_slice(VIDEO_MAGIC);
    for v in [w, h, video.frames.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for f in &video.frames {
        out.extend_from_slice(f.values());
    }
    out.extend(video.stage_labels.iter().map(|l| l.id()));
    out.push(video.transfer.encode());
    out.extend_from_slice(&(id.len() as u16).to_le_bytes());
    out.extend_from_slice(id);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::parse(
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_video(buf: &[u8]) -> Result<VideoRecord> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != VIDEO_MAGIC {
        if magic.starts_with(b"TFV") {
            return Err(Error::Version(format!(
                "video format {:?}, expected TFV1",
                String::from_utf8_lossy(magic)
            )));
        }
        return Err(Error::parse(0, "bad magic, not a TFV video"));
    }
    let w = r.u32("width")? as usize;
    let h = r.u32("height")? as usize;
    let t = r.u32("frame count")? as usize;
    if w == 0 || h == 0 {
        return Err(Error::parse(4, "zero frame dimension"));
    }
    let need = t
        .checked_mul(w * h)
        .ok_or_else(|| Error::parse(12, "frame block size overflows"))?;
    if need > buf.len() {
        return Err(Error::parse(16, "truncated frame block"));
    }
    let mut frames = Vec::with_capacity(t);
    for _ in 0..t {
        let px = r.take(w * h, "frame")?;
        frames.push(GrayFrame::new(w, h, px.to_vec())?);
    }
    let label_off = r.pos as u64;
    let labels = r
        .take(t, "stage labels")?
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            StageLabel::new(v).map_err(|_| Error::parse(label_off + i as u64, format!("stage id {v}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let tpos = r.pos as u64;
    let transfer = TransferLabel::decode(r.take(1, "transfer label")?[0])
        .map_err(|e| Error::parse(tpos, e.to_string()))?;
    let lb = r.take(2, "id length")?;
    let id_len = u16::from_le_bytes([lb[0], lb[1]]) as usize;
    let id_pos = r.pos as u64;
    let id = std::str::from_utf8(r.take(id_len, "id")?)
        .map_err(|_| Error::parse(id_pos, "id is not UTF-8"))?
        .to_string();
    if r.pos != buf.len() {
        return Err(Error::parse(r.pos as u64, "trailing bytes after video"));
    }
    VideoRecord::new(id, frames, labels, transfer)
}

pub fn save_video(path: &Path, video: &VideoRecord) -> Result<()> {
    let bytes = write_video(video)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_video(path: &Path) -> Result<VideoRecord> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_video(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::videodata::{generate_synthetic_video, GenConfig};

    fn small() -> VideoRecord {
        let cfg = GenConfig {
            frames: 16,
            size: 32,
            ..GenConfig::default()
        };
        generate_synthetic_video(3, &cfg).unwrap()
    }

    #[test]
    fn round_trip() {
        let v = small();
        let back = read_video(&write_video(&v).unwrap()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn truncation_is_parse_error() {
        let bytes = write_video(&small()).unwrap();
        for cut in [0, 3, 10, 16, 100, bytes.len() - 1] {
            assert!(
                matches!(read_video(&bytes[..cut]), Err(Error::Parse { .. })),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn version_and_magic() {
        let mut bytes = write_video(&small()).unwrap();
        bytes[3] = b'2';
        assert!(matches!(read_video(&bytes), Err(Error::Version(_))));
        bytes[0] = b'X';
        assert!(matches!(read_video(&bytes), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn bad_label_reports_offset() {
        let v = small();
        let mut bytes = write_video(&v).unwrap();
        let off = 16 + 16 * 32 * 32 + 2;
        bytes[off] = 42;
        match read_video(&bytes) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, off as u64),
            other => panic!("{other:?}"),
        }
    }
}
