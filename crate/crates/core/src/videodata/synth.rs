//! Procedural embryo videos with known stage sequences.
//!
//! An embryo starts as one cell and alternates stable stages with cleavage
//! events, each cleavage adding one cell. Cells are drawn as shaded disks at
//! canonical positions inside a zona ring; during a cleavage the mother cell
//! visibly splits and the other cells glide to their next positions.
//!
//! Anomalies, each making the video non-transferable:
//! * arrest: development stops, cells freeze and darken, stage 10 until the end;
//! * direct cleavage: one division produces 3 or 4 daughters (count jumps ≥ 2);
//! * slow development: stage durations stretch so the clip ends before 8 cells.
//!
//! The transfer label is NT iff an anomaly occurred or the final count stage is
//! below 8 cells.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{StageLabel, TransferLabel, VideoRecord, ARREST, CLEAVAGE};
use crate::error::{Error, Result};
use crate::mhi::GrayFrame;
use crate::rng::{rng_for, ChaCha8Rng};

const MAX_CELLS: usize = 10;
/// Minimum number of arrested frames at the end of a clip.
const ARREST_MIN_FRAMES: usize = 4;
/// Frames over which arrested cells darken to full strength.
const ARREST_RAMP: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub frames: usize,
    pub size: usize,
    /// Probability of injecting arrest or direct cleavage.
    pub p_anomaly: f64,
    /// Probability that an otherwise normal embryo develops slowly.
    pub p_slow: f64,
    pub slow_factor: f64,
    /// Inclusive frame range for stable-stage durations.
    pub stable_frames: (usize, usize),
    /// Inclusive frame range for cleavage durations.
    pub cleavage_frames: (usize, usize),
    pub noise_sigma: f64,
    /// Restricts anomaly onsets to this fraction of the clip, e.g. `(2/3, 1)`.
    pub anomaly_window: Option<(f64, f64)>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            frames: 60,
            size: 64,
            p_anomaly: 0.5,
            p_slow: 0.06,
            slow_factor: 2.0,
            stable_frames: (4, 6),
            cleavage_frames: (1, 2),
            noise_sigma: 6.0,
            anomaly_window: None,
        }
    }
}

impl GenConfig {
    /// Variant whose anomalies all start in the last third of the clip and
    /// without slow developers, so early frames carry no label information.
    pub fn late_anomaly(mut self) -> Self {
        self.anomaly_window = Some((2.0 / 3.0, 1.0));
        self.p_slow = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.frames < 15 {
            return bad("frames must be at least 15");
        }
        if self.size < 32 {
            return bad("size must be at least 32");
        }
        for p in [self.p_anomaly, self.p_slow] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if !(self.slow_factor >= 1.0) {
            return bad("slow_factor must be >= 1");
        }
        for (lo, hi) in [self.stable_frames, self.cleavage_frames] {
            if lo == 0 || lo > hi {
                return bad("duration ranges must satisfy 1 <= min <= max");
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        if let Some((a, b)) = self.anomaly_window {
            if !(0.0..1.0).contains(&a) || b <= a || b > 1.0 {
                return bad("anomaly_window must satisfy 0 <= start < end <= 1");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnomalyKind {
    Arrest,
    DirectCleavage,
}

/// Per-frame rendering state.
#[derive(Debug, Clone, Copy)]
enum Phase {
    Stable { count: usize },
    Cleaving { from: usize, to: usize, progress: f64 },
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    x: f64,
    y: f64,
    r: f64,
}

struct Timeline {
    labels: Vec<StageLabel>,
    phases: Vec<Phase>,
    /// Frame where arrest begins, if any.
    arrest_at: Option<usize>,
    anomalous: bool,
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize), factor: f64) -> usize {
    let d = rng.gen_range(lo..=hi) as f64 * factor;
    (d.round() as usize).max(1)
}

fn build_timeline(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Timeline {
    let t_total = cfg.frames;
    let anomaly = if rng.gen_bool(cfg.p_anomaly) {
        Some(if rng.gen_bool(0.5) {
            AnomalyKind::Arrest
        } else {
            AnomalyKind::DirectCleavage
        })
    } else {
        None
    };
    let slow = rng.gen_bool(cfg.p_slow);
    let pace = if anomaly.is_none() && slow {
        cfg.slow_factor
    } else {
        1.0
    };
    let window_start = cfg
        .anomaly_window
        .map(|(a, _)| (a * t_total as f64).ceil() as usize);
    let window_end = cfg
        .anomaly_window
        .map_or(t_total, |(_, b)| ((b * t_total as f64).floor() as usize).min(t_total));

    // Which division jumps (counted from the first), when not windowed.
    let direct_index = rng.gen_range(0..6usize);
    let direct_jump = if rng.gen_bool(0.7) { 2 } else { 3 };

    let mut labels = Vec::with_capacity(t_total);
    let mut phases = Vec::with_capacity(t_total);
    let mut count = 1usize;
    let mut division = 0usize;
    let mut jumped = false;
    while labels.len() < t_total {
        let stable = sample_range(rng, cfg.stable_frames, pace);
        let n = if count >= 9 { t_total } else { stable };
        for _ in 0..n {
            if labels.len() == t_total {
                break;
            }
            labels.push(StageLabel::from_cell_count(count));
            phases.push(Phase::Stable { count });
        }
        if labels.len() == t_total {
            break;
        }
        let start = labels.len();
        let mut to = count + 1;
        if anomaly == Some(AnomalyKind::DirectCleavage) && !jumped && count <= 7 {
            let hit = match window_start {
                Some(ws) => start >= ws && start < window_end,
                None => division == direct_index,
            };
            if hit {
                to = (count + direct_jump).min(9);
                jumped = true;
            }
        }
        let dur = sample_range(rng, cfg.cleavage_frames, pace);
        for i in 0..dur {
            if labels.len() == t_total {
                break;
            }
            labels.push(CLEAVAGE);
            phases.push(Phase::Cleaving {
                from: count,
                to,
                progress: (i + 1) as f64 / (dur + 1) as f64,
            });
        }
        count = to;
        division += 1;
    }

    let mut arrest_at = None;
    let mut anomalous = jumped;
    let wants_arrest = anomaly == Some(AnomalyKind::Arrest)
        || (anomaly == Some(AnomalyKind::DirectCleavage) && !jumped);
    if wants_arrest {
        // Leave room for the darkening ramp to complete on screen.
        let last = t_total - ARREST_MIN_FRAMES;
        let (lo, hi) = match window_start {
            Some(ws) => (ws.min(last), window_end.saturating_sub(ARREST_MIN_FRAMES).max(ws.min(last))),
            None => (t_total / 6, last),
        };
        let at = rng.gen_range(lo..=hi);
        for l in &mut labels[at..] {
            *l = ARREST;
        }
        arrest_at = Some(at);
        anomalous = true;
    }
    Timeline {
        labels,
        phases,
        arrest_at,
        anomalous,
    }
}

/// Canonical cell layout for `k` cells in a unit embryo centred at the origin.
fn layout(k: usize) -> Vec<Cell> {
    let k = k.clamp(1, MAX_CELLS);
    let r = 0.55 / (k as f64).sqrt().max(1.0);
    if k == 1 {
        return vec![Cell { x: 0.0, y: 0.0, r }];
    }
    let ring = 0.98 - r;
    let phase = 0.37 * k as f64;
    (0..k)
        .map(|i| {
            let a = phase + std::f64::consts::TAU * i as f64 / k as f64;
            Cell {
                x: ring * a.cos(),
                y: ring * a.sin(),
                r,
            }
        })
        .collect()
}

fn lerp(a: f64, b: f64, s: f64) -> f64 {
    a + (b - a) * s
}

fn cells_for(phase: Phase) -> Vec<Cell> {
    match phase {
        Phase::Stable { count } => layout(count),
        Phase::Cleaving { from, to, progress } => {
            let src = layout(from);
            let dst = layout(to);
            let mother = src[src.len() - 1];
            dst.iter()
                .enumerate()
                .map(|(j, d)| {
                    let s = if j < src.len() - 1 { src[j] } else { mother };
                    Cell {
                        x: lerp(s.x, d.x, progress),
                        y: lerp(s.y, d.y, progress),
                        r: lerp(s.r, d.r, progress),
                    }
                })
                .collect()
        }
    }
}

struct Look {
    cx: f64,
    cy: f64,
    radius: f64,
    rotation: f64,
    background: f64,
    zona: f64,
    cell: f64,
}

fn render(
    size: usize,
    look: &Look,
    cells: &[Cell],
    darkening: f64,
    speckle: &[f64],
    noise: &mut impl FnMut() -> f64,
) -> Vec<u8> {
    let (s, c) = look.rotation.sin_cos();
    let placed: Vec<(f64, f64, f64)> = cells
        .iter()
        .map(|cell| {
            let x = cell.x * c - cell.y * s;
            let y = cell.x * s + cell.y * c;
            (
                look.cx + x * look.radius,
                look.cy + y * look.radius,
                cell.r * look.radius,
            )
        })
        .collect();
    let mut px = Vec::with_capacity(size * size);
    for yi in 0..size {
        for xi in 0..size {
            let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
            let dz = ((x - look.cx).powi(2) + (y - look.cy).powi(2)).sqrt() / look.radius;
            let mut v = look.background;
            if (dz - 1.08).abs() < 0.06 {
                v = look.zona;
            }
            let mut best: f64 = 0.0;
            for &(px_, py_, r) in &placed {
                let d2 = ((x - px_).powi(2) + (y - py_).powi(2)) / (r * r);
                if d2 < 1.0 {
                    best = best.max(1.0 - 0.4 * d2);
                }
            }
            if best > 0.0 {
                let idx = yi * size + xi;
                v = look.cell * best * (1.0 - darkening) + darkening * speckle[idx];
            }
            px.push((v + noise()).round().clamp(0.0, 255.0) as u8);
        }
    }
    px
}

/// Deterministic synthetic video for `seed`.
pub fn generate_synthetic_video(seed: u64, cfg: &GenConfig) -> Result<VideoRecord> {
    cfg.validate()?;
    let mut rng = rng_for(seed, "synthetic-video");
    let timeline = build_timeline(cfg, &mut rng);
    let size = cfg.size as f64;
    let look = Look {
        cx: size / 2.0 + rng.gen_range(-2.0..=2.0),
        cy: size / 2.0 + rng.gen_range(-2.0..=2.0),
        radius: size * rng.gen_range(0.33..=0.37),
        rotation: rng.gen_range(-0.15..=0.15),
        background: rng.gen_range(40.0..=60.0),
        zona: rng.gen_range(85.0..=100.0),
        cell: rng.gen_range(160.0..=190.0),
    };
    let speckle: Vec<f64> = (0..cfg.size * cfg.size)
        .map(|_| rng.gen_range(40.0..=110.0))
        .collect();
    let normal = Normal::new(0.0, cfg.noise_sigma.max(1e-12)).expect("valid sigma");
    let sigma = cfg.noise_sigma;
    let mut noise = move || {
        if sigma == 0.0 {
            0.0
        } else {
            normal.sample(&mut rng)
        }
    };

    let mut frames = Vec::with_capacity(cfg.frames);
    for (t, &phase) in timeline.phases.iter().enumerate() {
        let (cells, darkening) = match timeline.arrest_at {
            Some(a) if t >= a => {
                let frozen = cells_for(timeline.phases[a]);
                let k = ((t - a + 1) as f64 / ARREST_RAMP).min(1.0);
                (frozen, 0.55 * k)
            }
            _ => (cells_for(phase), 0.0),
        };
        let px = render(cfg.size, &look, &cells, darkening, &speckle, &mut noise);
        frames.push(GrayFrame::new(cfg.size, cfg.size, px)?);
    }

    let final_count = timeline
        .labels
        .iter()
        .rev()
        .find_map(|l| l.cell_count())
        .unwrap_or(1);
    let transfer = if timeline.anomalous || final_count < 8 {
        TransferLabel::NotTransferable
    } else {
        TransferLabel::Transferable
    };
    VideoRecord::new(
        format!("syn-{seed:016x}"),
        frames,
        timeline.labels,
        transfer,
    )
}
