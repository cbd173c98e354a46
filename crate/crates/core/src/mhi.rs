//! Motion History Images over grayscale frame sequences.
//!
//! A pixel's motion mask is set when its intensity changes by strictly more
//! than `theta` between consecutive frames; the history counter jumps to
//! `tau` on motion and otherwise decays by one per frame, floored at zero.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_TAU: u16 = 15;
pub const DEFAULT_THETA: u8 = 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayFrame {
    width: usize,
    height: usize,
    values: Vec<u8>,
}

impl GrayFrame {
    pub fn new(width: usize, height: usize, values: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape("frame dimensions must be positive".into()));
        }
        if values.len() != width * height {
            return Err(Error::Shape(format!(
                "{} pixels for a {width}x{height} frame",
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, v: u8) -> Result<Self> {
        Self::new(width, height, vec![v; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.values[y * self.width + x]
    }

    fn same_dims(&self, w: usize, h: usize) -> Result<()> {
        if self.width != w || self.height != h {
            return Err(Error::Shape(format!(
                "{}x{} vs {w}x{h}",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Per-pixel binary motion mask (row-major, values 0/1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MotionMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MhiMap {
    width: usize,
    height: usize,
    values: Vec<u16>,
    tau: u16,
    theta: u8,
}

impl MhiMap {
    pub fn zeros(width: usize, height: usize, tau: u16, theta: u8) -> Result<Self> {
        if tau == 0 {
            return Err(Error::Config("tau must be at least 1".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::Shape("map dimensions must be positive".into()));
        }
        Ok(Self {
            width,
            height,
            values: vec![0; width * height],
            tau,
            theta,
        })
    }

    pub fn from_values(
        width: usize,
        height: usize,
        values: Vec<u16>,
        tau: u16,
        theta: u8,
    ) -> Result<Self> {
        let mut m = Self::zeros(width, height, tau, theta)?;
        if values.len() != width * height {
            return Err(Error::Shape("value count".into()));
        }
        if values.iter().any(|&v| v > tau) {
            return Err(Error::Validation("history value exceeds tau".into()));
        }
        m.values = values;
        Ok(m)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[u16] {
        &self.values
    }

    pub fn tau(&self) -> u16 {
        self.tau
    }

    pub fn theta(&self) -> u8 {
        self.theta
    }

    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.values[y * self.width + x]
    }

    /// 8-bit binary PGM with values scaled by `255/tau`.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        let tau = self.tau as u32;
        out.extend(
            self.values
                .iter()
                .map(|&v| ((v as u32 * 255 + tau / 2) / tau) as u8),
        );
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| Error::io(path, e))
    }
}

pub fn motion_mask(prev: &GrayFrame, curr: &GrayFrame, theta: u8) -> Result<MotionMask> {
    prev.same_dims(curr.width, curr.height)?;
    let bits = prev
        .values
        .iter()
        .zip(&curr.values)
        .map(|(&p, &c)| u8::from((c as i16 - p as i16).abs() > theta as i16))
        .collect();
    Ok(MotionMask {
        width: curr.width,
        height: curr.height,
        bits,
    })
}

pub fn update_mhi(prev: &MhiMap, mask: &MotionMask) -> Result<MhiMap> {
    if prev.width != mask.width || prev.height != mask.height {
        return Err(Error::Shape(format!(
            "history {}x{} vs mask {}x{}",
            prev.width, prev.height, mask.width, mask.height
        )));
    }
    let values = prev
        .values
        .iter()
        .zip(&mask.bits)
        .map(|(&h, &m)| if m == 1 { prev.tau } else { h.saturating_sub(1) })
        .collect();
    Ok(MhiMap {
        values,
        ..prev.clone()
    })
}

/// Streaming MHI over a whole clip.
///
/// The result has one map per frame: index 0 is the all-zero map (no
/// predecessor frame), index `t ≥ 1` folds masks `1..=t`.
pub fn compute_mhi_sequence(frames: &[GrayFrame], tau: u16, theta: u8) -> Result<Vec<MhiMap>> {
    if frames.len() < 2 {
        return Err(Error::InsufficientInput(format!(
            "MHI needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    let (w, h) = (frames[0].width, frames[0].height);
    let mut maps = Vec::with_capacity(frames.len());
    maps.push(MhiMap::zeros(w, h, tau, theta)?);
    for pair in frames.windows(2) {
        let mask = motion_mask(&pair[0], &pair[1], theta)?;
        let next = update_mhi(maps.last().expect("non-empty"), &mask)?;
        maps.push(next);
    }
    Ok(maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame(vals: &[u8], w: usize) -> GrayFrame {
        GrayFrame::new(w, vals.len() / w, vals.to_vec()).unwrap()
    }

    #[test]
    fn mask_threshold_is_strict() {
        let a = frame(&[100, 100, 100], 3);
        let b = frame(&[121, 120, 79], 3);
        let m = motion_mask(&a, &b, 20).unwrap();
        assert_eq!(m.bits, vec![1, 0, 1]);
        let same = motion_mask(&a, &a, 0).unwrap();
        assert!(same.bits.iter().all(|&v| v == 0));
    }

    #[test]
    fn mask_handles_full_range_without_underflow() {
        let a = frame(&[0, 255], 2);
        let b = frame(&[255, 0], 2);
        assert_eq!(motion_mask(&a, &b, 254).unwrap().bits, vec![1, 1]);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let a = frame(&[0; 4], 2);
        let b = frame(&[0; 6], 3);
        assert!(matches!(motion_mask(&a, &b, 20), Err(Error::Shape(_))));
        let h = MhiMap::zeros(3, 2, 15, 20).unwrap();
        let m = motion_mask(&a, &a, 20).unwrap();
        assert!(matches!(update_mhi(&h, &m), Err(Error::Shape(_))));
    }

    #[test]
    fn update_branches() {
        let h = MhiMap::from_values(3, 1, vec![0, 5, 15], 15, 20).unwrap();
        let none = MotionMask {
            width: 3,
            height: 1,
            bits: vec![0, 0, 0],
        };
        assert_eq!(update_mhi(&h, &none).unwrap().values(), &[0, 4, 14]);
        let all = MotionMask {
            bits: vec![1, 1, 1],
            ..none
        };
        assert_eq!(update_mhi(&h, &all).unwrap().values(), &[15, 15, 15]);
    }

    #[test]
    fn single_pixel_trace() {
        let frames: Vec<_> = [0u8, 30, 30, 30].iter().map(|&v| frame(&[v], 1)).collect();
        let maps = compute_mhi_sequence(&frames, 3, 20).unwrap();
        let trace: Vec<u16> = maps.iter().map(|m| m.get(0, 0)).collect();
        assert_eq!(trace, vec![0, 3, 2, 1]);
    }

    #[test]
    fn static_video_has_no_history() {
        let frames = vec![frame(&[42; 16], 4); 10];
        let maps = compute_mhi_sequence(&frames, 15, 20).unwrap();
        assert_eq!(maps.len(), 10);
        assert!(maps.iter().all(|m| m.values().iter().all(|&v| v == 0)));
    }

    #[test]
    fn needs_two_frames() {
        let frames = vec![frame(&[1; 4], 2)];
        assert!(matches!(
            compute_mhi_sequence(&frames, 15, 20),
            Err(Error::InsufficientInput(_))
        ));
    }

    #[test]
    fn zero_tau_rejected() {
        assert!(MhiMap::zeros(2, 2, 0, 20).is_err());
    }

    fn clip() -> impl Strategy<Value = Vec<GrayFrame>> {
        prop::collection::vec(prop::collection::vec(any::<u8>(), 16), 2..12)
            .prop_map(|fs| fs.into_iter().map(|v| frame(&v, 4)).collect())
    }

    proptest! {
        #[test]
        fn values_stay_within_tau(frames in clip(), tau in 1u16..20, theta in any::<u8>()) {
            for m in compute_mhi_sequence(&frames, tau, theta).unwrap() {
                prop_assert!(m.values().iter().all(|&v| v <= tau));
            }
        }

        #[test]
        fn decays_to_zero_after_tau_still_frames(frames in clip(), tau in 1u16..8) {
            let mut frames = frames;
            let last = frames.last().unwrap().clone();
            frames.extend(std::iter::repeat(last).take(tau as usize));
            let maps = compute_mhi_sequence(&frames, tau, 20).unwrap();
            prop_assert!(maps.last().unwrap().values().iter().all(|&v| v == 0));
        }

        #[test]
        fn mask_is_antitone_in_theta(a in prop::collection::vec(any::<u8>(), 16),
                                     b in prop::collection::vec(any::<u8>(), 16),
                                     t1 in any::<u8>(), t2 in any::<u8>()) {
            let (lo, hi) = (t1.min(t2), t1.max(t2));
            let (fa, fb) = (frame(&a, 4), frame(&b, 4));
            let m_lo = motion_mask(&fa, &fb, lo).unwrap();
            let m_hi = motion_mask(&fa, &fb, hi).unwrap();
            for (l, h) in m_lo.bits.iter().zip(&m_hi.bits) {
                prop_assert!(h <= l);
            }
        }
    }
}
