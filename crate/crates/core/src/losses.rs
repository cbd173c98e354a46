//! Training objective: transferability, frame, stage, cross-attention and
//! smoothing terms.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::matching::{cost_matrix, match_segments, Assignment, PROB_FLOOR};
use crate::model::ForwardGraph;
use crate::scalar::Scalar;
use crate::videodata::{segments_from_framewise, Segment, StageLabel, TransferLabel};

/// Clamp on absolute log-probability differences in the smoothing term.
pub const SMOOTH_CLAMP: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub trans: f64,
    pub frame: f64,
    pub stage: f64,
    pub cross: f64,
    pub smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            trans: 1.0,
            frame: 1.0,
            stage: 1.0,
            cross: 1.0,
            smooth: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.named() {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} = {w}")));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("trans", self.trans),
            ("frame", self.frame),
            ("stage", self.stage),
            ("cross", self.cross),
            ("smooth", self.smooth),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub trans: f64,
    pub frame: f64,
    pub stage: f64,
    pub cross_att: f64,
    pub smooth: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_terms(terms: [f64; 5], w: &LossWeights) -> Self {
        let [trans, frame, stage, cross_att, smooth] = terms;
        LossBreakdown {
            trans,
            frame,
            stage,
            cross_att,
            smooth,
            total: w.trans * trans
                + w.frame * frame
                + w.stage * stage
                + w.cross * cross_att
                + w.smooth * smooth,
        }
    }

    pub fn terms(&self) -> [f64; 5] {
        [self.trans, self.frame, self.stage, self.cross_att, self.smooth]
    }

    /// Element-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let k = items.len().max(1) as f64;
        let mut out = LossBreakdown::default();
        for b in items {
            out.trans += b.trans / k;
            out.frame += b.frame / k;
            out.stage += b.stage / k;
            out.cross_att += b.cross_att / k;
            out.smooth += b.smooth / k;
            out.total += b.total / k;
        }
        out
    }
}

/// Tape nodes of the five terms for one video.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub trans: Var,
    pub frame: Var,
    pub stage: Var,
    pub cross: Var,
    pub smooth: Var,
}

impl LossTerms {
    pub fn as_array(&self) -> [Var; 5] {
        [self.trans, self.frame, self.stage, self.cross, self.smooth]
    }
}

fn floor<S: Scalar>() -> S {
    S::lit(PROB_FLOOR)
}

/// `−Σ_b ln p_b(label)` over the per-block `1×2` transferability outputs.
pub fn loss_trans<S: Scalar>(tape: &mut Tape<S>, probs: &[Var], label: TransferLabel) -> Var {
    let parts: Vec<Var> = probs
        .iter()
        .map(|&p| tape.log_gather_sum(p, vec![(0, label.index())], floor()))
        .collect();
    let terms: Vec<(Var, S)> = parts.iter().map(|&v| (v, -S::one())).collect();
    tape.weighted_sum(&terms)
}

/// `−(1/T) Σ_b Σ_t ln p_b(t, label_t)` over per-block `T×S` outputs.
pub fn loss_frame<S: Scalar>(
    tape: &mut Tape<S>,
    probs: &[Var],
    labels: &[StageLabel],
) -> Result<Var> {
    let t_len = labels.len();
    let mut terms = Vec::with_capacity(probs.len());
    for &p in probs {
        let (rows, classes) = tape.value(p).shape();
        if rows != t_len {
            return Err(Error::Shape(format!("{rows} frame rows for {t_len} labels")));
        }
        if let Some(l) = labels.iter().find(|l| l.index() >= classes) {
            return Err(Error::Label(format!("stage {} with {classes} classes", l.id())));
        }
        let idx = labels.iter().enumerate().map(|(t, l)| (t, l.index())).collect();
        let v = tape.log_gather_sum(p, idx, floor());
        terms.push((v, -S::one() / S::of_usize(t_len)));
    }
    Ok(tape.weighted_sum(&terms))
}

/// `−(1/M) Σ_b [Σ_n ln p_b(π(n), s_n) + Σ_{m unmatched} ln p_b(m, null)]`
/// over per-block `M×(S+1)` token outputs; the null class is the last column.
pub fn loss_stage<S: Scalar>(
    tape: &mut Tape<S>,
    probs: &[Var],
    assignment: &Assignment,
    segments: &[Segment],
) -> Result<Var> {
    let mut terms = Vec::with_capacity(probs.len());
    for &p in probs {
        let (m, classes) = tape.value(p).shape();
        let null = classes - 1;
        let mut idx = Vec::with_capacity(m);
        for &(n, tok) in &assignment.pairs {
            let seg = segments
                .get(n)
                .ok_or_else(|| Error::Index(format!("segment {n} of {}", segments.len())))?;
            if tok >= m {
                return Err(Error::Index(format!("token {tok} of {m}")));
            }
            if seg.label.index() >= null {
                return Err(Error::Label(format!("stage {} with {null} classes", seg.label.id())));
            }
            idx.push((tok, seg.label.index()));
        }
        for &tok in &assignment.unmatched_tokens {
            if tok >= m {
                return Err(Error::Index(format!("token {tok} of {m}")));
            }
            idx.push((tok, null));
        }
        let v = tape.log_gather_sum(p, idx, floor());
        terms.push((v, -S::one() / S::of_usize(m)));
    }
    Ok(tape.weighted_sum(&terms))
}

/// `−(1/T) Σ_{b≥2} Σ_n Σ_{t∈T_n} [ln Λs_b(t, π(n)) + ln Λf_b(t, π(n))]`.
///
/// The first block is excluded; with a single block the term is zero.
pub fn loss_cross_att<S: Scalar>(
    tape: &mut Tape<S>,
    attn_f2s: &[Var],
    attn_s2f: &[Var],
    assignment: &Assignment,
    segments: &[Segment],
) -> Result<Var> {
    if attn_f2s.len() != attn_s2f.len() {
        return Err(Error::Shape("attention map lists differ in length".into()));
    }
    if attn_f2s.len() < 2 {
        log::warn!("cross-attention loss needs at least two blocks; using 0");
        return Ok(tape.constant(crate::tensor::Matrix::scalar(S::zero())));
    }
    let mut idx = Vec::new();
    let mut t_len = 0;
    for &(n, tok) in &assignment.pairs {
        let seg = segments
            .get(n)
            .ok_or_else(|| Error::Index(format!("segment {n} of {}", segments.len())))?;
        idx.extend((seg.start..seg.end).map(|t| (t, tok)));
    }
    let mut terms = Vec::new();
    for (&f, &s) in attn_f2s.iter().zip(attn_s2f).skip(1) {
        for a in [s, f] {
            let (rows, cols) = tape.value(a).shape();
            t_len = rows;
            if let Some(&(t, m)) = idx.iter().find(|&&(t, m)| t >= rows || m >= cols) {
                return Err(Error::Index(format!("({t},{m}) in {rows}x{cols} attention")));
            }
            let v = tape.log_gather_sum(a, idx.clone(), floor());
            terms.push(v);
        }
    }
    let k = -S::one() / S::of_usize(t_len.max(1));
    let weighted: Vec<(Var, S)> = terms.into_iter().map(|v| (v, k)).collect();
    Ok(tape.weighted_sum(&weighted))
}

/// Truncated mean squared difference of consecutive frame log-probabilities,
/// averaged over blocks, transitions and classes. With `detach` the earlier
/// frame of each pair acts as a fixed target.
pub fn loss_smooth<S: Scalar>(tape: &mut Tape<S>, probs: &[Var], detach: bool) -> Result<Var> {
    let mut terms = Vec::with_capacity(probs.len());
    for &p in probs {
        let (t_len, classes) = tape.value(p).shape();
        if t_len < 2 {
            return Err(Error::InsufficientInput(format!(
                "smoothing needs 2 frames, got {t_len}"
            )));
        }
        let lp = tape.log_clamp(p, floor());
        let v = tape.tmse(lp, S::lit(SMOOTH_CLAMP), detach);
        let norm = S::of_usize(probs.len() * (t_len - 1) * classes);
        terms.push((v, S::one() / norm));
    }
    Ok(tape.weighted_sum(&terms))
}

/// Weighted total of the five terms and its plain-valued breakdown.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    terms: &LossTerms,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    weights.validate()?;
    let w = weights.named().map(|(_, w)| S::lit(w));
    let vars = terms.as_array();
    let pairs: Vec<(Var, S)> = vars.iter().copied().zip(w).collect();
    let total = tape.weighted_sum(&pairs);
    let values = vars.map(|v| tape.scalar_value(v).widen());
    Ok((total, LossBreakdown::from_terms(values, weights)))
}

/// Ground truth of one video in the form the objective consumes.
#[derive(Debug, Clone)]
pub struct VideoTargets {
    pub labels: Vec<StageLabel>,
    pub segments: Vec<Segment>,
    pub transfer: TransferLabel,
}

impl VideoTargets {
    pub fn new(labels: Vec<StageLabel>, transfer: TransferLabel) -> Result<Self> {
        let segments = segments_from_framewise(&labels)?;
        Ok(VideoTargets {
            labels,
            segments,
            transfer,
        })
    }
}

/// Assignment computed from the final block of a forward pass.
pub fn assign<S: Scalar>(graph: &ForwardGraph<S>, targets: &VideoTargets) -> Result<Assignment> {
    let last = graph.last();
    let probs = graph.tape.value(last.token_probs);
    let attn = graph.tape.value(last.attn_s2f);
    let cost = cost_matrix(probs, attn, &targets.segments)?;
    match_segments(&cost, probs.rows())
}

/// Records all five terms on the graph's tape for a given assignment.
pub fn video_terms<S: Scalar>(
    graph: &mut ForwardGraph<S>,
    targets: &VideoTargets,
    assignment: &Assignment,
) -> Result<LossTerms> {
    let blocks = graph.blocks.clone();
    let tape = &mut graph.tape;
    let trans: Vec<Var> = blocks.iter().map(|b| b.trans_probs).collect();
    let frame: Vec<Var> = blocks.iter().map(|b| b.frame_probs).collect();
    let token: Vec<Var> = blocks.iter().map(|b| b.token_probs).collect();
    let f2s: Vec<Var> = blocks.iter().map(|b| b.attn_f2s).collect();
    let s2f: Vec<Var> = blocks.iter().map(|b| b.attn_s2f).collect();
    Ok(LossTerms {
        trans: loss_trans(tape, &trans, targets.transfer),
        frame: loss_frame(tape, &frame, &targets.labels)?,
        stage: loss_stage(tape, &token, assignment, &targets.segments)?,
        cross: loss_cross_att(tape, &f2s, &s2f, assignment, &targets.segments)?,
        smooth: loss_smooth(tape, &frame, true)?,
    })
}

/// Matches, then records the weighted objective for one video.
pub fn video_loss<S: Scalar>(
    graph: &mut ForwardGraph<S>,
    targets: &VideoTargets,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown, Assignment)> {
    let assignment = assign(graph, targets)?;
    let terms = video_terms(graph, targets, &assignment)?;
    let (total, breakdown) = total_loss(&mut graph.tape, &terms, weights)?;
    Ok((total, breakdown, assignment))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    fn c(t: &mut Tape<f64>, rows: &[Vec<f64>]) -> Var {
        t.constant(Matrix::from_rows(rows).unwrap())
    }

    fn stage(i: u8) -> StageLabel {
        StageLabel::new(i).unwrap()
    }

    #[test]
    fn trans_values() {
        let mut t = Tape::new();
        let ones: Vec<Var> = (0..3).map(|_| c(&mut t, &[vec![0.0, 1.0]])).collect();
        let v = loss_trans(&mut t, &ones, TransferLabel::Transferable);
        assert_eq!(t.scalar_value(v), 0.0);
        let halves: Vec<Var> = (0..3).map(|_| c(&mut t, &[vec![0.5, 0.5]])).collect();
        let v = loss_trans(&mut t, &halves, TransferLabel::NotTransferable);
        assert!((t.scalar_value(v) - 2.0794415416798357).abs() < 1e-12);
        let mixed: Vec<Var> = [0.9, 0.8, 0.7]
            .iter()
            .map(|&p| c(&mut t, &[vec![p, 1.0 - p]]))
            .collect();
        let v = loss_trans(&mut t, &mixed, TransferLabel::NotTransferable);
        assert!((t.scalar_value(v) - 0.6851790109107685).abs() < 1e-12);
    }

    #[test]
    fn frame_values() {
        let mut t = Tape::new();
        let p = c(&mut t, &[vec![0.5, 0.5], vec![0.75, 0.25]]);
        let v = loss_frame(&mut t, &[p], &[stage(0), stage(1)]).unwrap();
        assert!((t.scalar_value(v) - 1.0397207708399179).abs() < 1e-12);

        let uni: Vec<Var> = (0..3)
            .map(|_| t.constant(Matrix::filled(7, 11, 1.0 / 11.0)))
            .collect();
        let labels: Vec<StageLabel> = (0..7).map(|i| stage(i as u8)).collect();
        let v = loss_frame(&mut t, &uni, &labels).unwrap();
        assert!((t.scalar_value(v) - 3.0 * 11f64.ln()).abs() < 1e-12);

        let narrow = c(&mut t, &[vec![0.5, 0.5]]);
        assert!(matches!(
            loss_frame(&mut t, &[narrow], &[stage(4)]),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn stage_values() {
        let mut t = Tape::new();
        let seg = [Segment {
            start: 0,
            end: 2,
            label: stage(0),
        }];
        let a = Assignment::from_pairs(vec![(0, 0)], 2).unwrap();
        // Columns: stage 0, stage 1, null.
        let p = c(&mut t, &[vec![0.5, 0.5, 0.0], vec![0.25, 0.25, 0.5]]);
        let v = loss_stage(&mut t, &[p], &a, &seg).unwrap();
        assert!((t.scalar_value(v) - 2f64.ln()).abs() < 1e-12);

        for m in [2, 5, 40] {
            let perfect = t.constant(Matrix::from_fn(m, 3, |r, col| {
                f64::from(u8::from((r == 0 && col == 0) || (r > 0 && col == 2)))
            }));
            let a = Assignment::from_pairs(vec![(0, 0)], m).unwrap();
            let v = loss_stage(&mut t, &[perfect], &a, &seg).unwrap();
            assert_eq!(t.scalar_value(v), 0.0);
        }

        let bad = Assignment {
            pairs: vec![(0, 9)],
            unmatched_tokens: vec![1],
        };
        assert!(matches!(
            loss_stage(&mut t, &[p], &bad, &seg),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn cross_values() {
        let mut t = Tape::new();
        let seg = [Segment {
            start: 0,
            end: 2,
            label: stage(0),
        }];
        let a = Assignment::from_pairs(vec![(0, 0)], 2).unwrap();
        let half = || Matrix::filled(2, 2, 0.5);
        let maps: Vec<Var> = (0..4).map(|_| t.constant(half())).collect();
        let v = loss_cross_att(&mut t, &maps[..2], &maps[2..], &a, &seg).unwrap();
        assert!((t.scalar_value(v) - 4.0 * 2f64.ln() / 2.0).abs() < 1e-12);

        let v = loss_cross_att(&mut t, &maps[..1], &maps[2..3], &a, &seg).unwrap();
        assert_eq!(t.scalar_value(v), 0.0);

        let one = t.constant(Matrix::from_fn(2, 2, |_, col| f64::from(u8::from(col == 0))));
        let v = loss_cross_att(&mut t, &[one, one, one], &[one, one, one], &a, &seg).unwrap();
        assert_eq!(t.scalar_value(v), 0.0);
    }

    #[test]
    fn smooth_values() {
        let mut t = Tape::new();
        let flat = t.constant(Matrix::filled(6, 3, 1.0 / 3.0));
        let v = loss_smooth(&mut t, &[flat, flat], true).unwrap();
        assert_eq!(t.scalar_value(v), 0.0);

        let t_len = 7;
        let step = t.constant(Matrix::from_fn(t_len, 1, |r, _| if r < 3 { 1.0 } else { (-1f64).exp() }));
        let v = loss_smooth(&mut t, &[step], true).unwrap();
        assert!((t.scalar_value(v) - 1.0 / (t_len - 1) as f64).abs() < 1e-12);

        let wild = t.constant(Matrix::from_fn(4, 2, |r, col| if (r + col) % 2 == 0 { 1.0 } else { 0.0 }));
        let v = loss_smooth(&mut t, &[wild], true).unwrap();
        assert!(t.scalar_value(v) <= 16.0);

        let short = t.constant(Matrix::filled(1, 2, 0.5));
        assert!(matches!(
            loss_smooth(&mut t, &[short], true),
            Err(Error::InsufficientInput(_))
        ));
    }

    #[test]
    fn totals() {
        let mut t = Tape::new();
        let one = t.constant(Matrix::scalar(1.0));
        let zero = t.constant(Matrix::scalar(0.0));
        let ones = LossTerms {
            trans: one,
            frame: one,
            stage: one,
            cross: one,
            smooth: one,
        };
        let (v, b) = total_loss(&mut t, &ones, &LossWeights::default()).unwrap();
        assert_eq!(t.scalar_value(v), 9.0);
        assert_eq!(b.total, 9.0);
        let zeros = LossTerms {
            trans: zero,
            frame: zero,
            stage: zero,
            cross: zero,
            smooth: zero,
        };
        let (v, _) = total_loss(&mut t, &zeros, &LossWeights::default()).unwrap();
        assert_eq!(t.scalar_value(v), 0.0);
        let neg = LossWeights {
            cross: -1.0,
            ..LossWeights::default()
        };
        assert!(matches!(total_loss(&mut t, &ones, &neg), Err(Error::Config(_))));
    }
}
