//! Metrics, multi-run statistics and the truncation sweep.

mod plot;
mod stats;

pub use plot::{sweep_svg, write_sweep_svg};
pub use stats::{
    aggregate_runs, cohens_d, wilcoxon_signed_rank_exact, RunAggregate, WilcoxonResult,
    WILCOXON_MAX_N,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig, Parameters};
use crate::scalar::Scalar;
use crate::trainer::Sample;
use crate::videodata::{StageLabel, TransferLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total().max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when any ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

pub fn confusion<T: PartialEq + Copy>(preds: &[T], labels: &[T], positive: T) -> Result<ConfusionCounts> {
    if preds.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InsufficientInput("no predictions".into()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &l) in preds.iter().zip(labels) {
        match (p == positive, l == positive) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn ratio(num: usize, den: usize, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics_from_counts(c: &ConfusionCounts) -> ClassMetrics {
    let mut degenerate = false;
    let precision = ratio(c.tp, c.tp + c.fp, &mut degenerate);
    let recall = ratio(c.tp, c.tp + c.fn_, &mut degenerate);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        degenerate = true;
        0.0
    };
    ClassMetrics {
        precision,
        recall,
        f1,
        degenerate,
    }
}

/// Precision, recall and F1 of `positive`.
pub fn prf1<T: PartialEq + Copy>(preds: &[T], labels: &[T], positive: T) -> Result<ClassMetrics> {
    Ok(metrics_from_counts(&confusion(preds, labels, positive)?))
}

/// Per-video model output from the final block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub transfer: TransferLabel,
    /// Probability of the transferable class.
    pub p_transferable: f64,
    pub stages: Vec<StageLabel>,
}

fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict<S: Scalar>(
    params: &Parameters<S>,
    cfg: &ModelConfig,
    samples: &[Sample<S>],
) -> Result<Vec<Prediction>> {
    samples
        .iter()
        .map(|s| {
            let g = forward(params, cfg, &s.frames, s.mhi.as_ref())?;
            let last = g.last();
            let trans = g.tape.value(last.trans_probs);
            let p = trans[(0, TransferLabel::Transferable.index())].widen();
            let fp = g.tape.value(last.frame_probs);
            let stages = (0..fp.rows())
                .map(|t| StageLabel::new(argmax(fp.row(t)) as u8))
                .collect::<Result<_>>()?;
            Ok(Prediction {
                id: s.id.clone(),
                transfer: if argmax(trans.row(0)) == TransferLabel::Transferable.index() {
                    TransferLabel::Transferable
                } else {
                    TransferLabel::NotTransferable
                },
                p_transferable: p,
                stages,
            })
        })
        .collect()
}

/// Transferability and frame-level metrics of a prediction set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub videos: usize,
    pub accuracy: f64,
    pub transferable: ClassMetrics,
    pub not_transferable: ClassMetrics,
    /// Counts with the transferable class as positive.
    pub confusion: ConfusionCounts,
    pub frame_accuracy: f64,
}

pub fn metrics_report<S: Scalar>(preds: &[Prediction], samples: &[Sample<S>]) -> Result<MetricsReport> {
    if preds.len() != samples.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} videos",
            preds.len(),
            samples.len()
        )));
    }
    let p: Vec<TransferLabel> = preds.iter().map(|p| p.transfer).collect();
    let l: Vec<TransferLabel> = samples.iter().map(|s| s.targets.transfer).collect();
    let c = confusion(&p, &l, TransferLabel::Transferable)?;
    let mut hits = 0usize;
    let mut frames = 0usize;
    for (pr, s) in preds.iter().zip(samples) {
        hits += pr
            .stages
            .iter()
            .zip(&s.targets.labels)
            .filter(|(a, b)| a == b)
            .count();
        frames += s.targets.labels.len();
    }
    Ok(MetricsReport {
        videos: preds.len(),
        accuracy: c.accuracy(),
        transferable: metrics_from_counts(&c),
        not_transferable: prf1(&p, &l, TransferLabel::NotTransferable)?,
        confusion: c,
        frame_accuracy: hits as f64 / frames.max(1) as f64,
    })
}

/// Accuracy at one truncation length across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub length: usize,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Shortest clip the model and objective accept.
pub const MIN_SWEEP_LENGTH: usize = 2;

pub fn check_sweep_lengths(lengths: &[usize], full: usize) -> Result<()> {
    if lengths.is_empty() {
        return Err(Error::Config("no sweep lengths".into()));
    }
    if lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("sweep lengths {lengths:?} must increase")));
    }
    if lengths[0] < MIN_SWEEP_LENGTH {
        return Err(Error::Config(format!(
            "sweep length {} below minimum {MIN_SWEEP_LENGTH}",
            lengths[0]
        )));
    }
    if let Some(&l) = lengths.iter().find(|&&l| l > full) {
        return Err(Error::Config(format!("sweep length {l} exceeds clip length {full}")));
    }
    Ok(())
}

/// Runs `run(length, seed)` (train on clips truncated to `length`, return
/// test accuracy) for every length and seed.
pub fn truncation_sweep(
    lengths: &[usize],
    full: usize,
    seeds: &[u64],
    mut run: impl FnMut(usize, u64) -> Result<f64>,
) -> Result<Vec<SweepPoint>> {
    check_sweep_lengths(lengths, full)?;
    lengths
        .iter()
        .map(|&length| {
            let accuracies = seeds
                .iter()
                .map(|&seed| run(length, seed))
                .collect::<Result<Vec<f64>>>()?;
            let agg = aggregate_runs("accuracy", &accuracies)?;
            Ok(SweepPoint {
                length,
                accuracies,
                mean: agg.mean,
                std: agg.std,
            })
        })
        .collect()
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("length,mean_acc,std_acc\n");
    for p in points {
        out.push_str(&format!("{},{:.6},{:.6}\n", p.length, p.mean, p.std));
    }
    out
}
