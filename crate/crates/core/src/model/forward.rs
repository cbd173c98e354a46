use super::{AttnParams, ModelConfig, Parameters};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

use super::attention::{cross_attention, transposed_renormalized};

/// Tape nodes of one block's predictions.
#[derive(Debug, Clone, Copy)]
pub struct BlockOutput {
    /// `T × S`, frame stage probabilities.
    pub frame_probs: Var,
    /// `M × (S+1)`, token class probabilities (last column is the null class).
    pub token_probs: Var,
    /// `T × M`, frame→token attention (frame-branch queries).
    pub attn_f2s: Var,
    /// `T × M`, token→frame attention, transposed and renormalized over tokens.
    pub attn_s2f: Var,
    /// `1 × 2`, transferability probabilities `[NT, T]`.
    pub trans_probs: Var,
}

/// A recorded forward pass: the tape, the parameter leaves in
/// [`Parameters`] order and the per-block outputs.
pub struct ForwardGraph<S> {
    pub tape: Tape<S>,
    pub param_vars: Vec<Var>,
    pub blocks: Vec<BlockOutput>,
    pub frame_tokens: Vec<Var>,
    pub stage_tokens: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockValues<S> {
    pub frame_probs: Matrix<S>,
    pub token_probs: Matrix<S>,
    pub attn_f2s: Matrix<S>,
    pub attn_s2f: Matrix<S>,
    pub trans_probs: Matrix<S>,
}

/// Plain values of every block's predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<S> {
    pub blocks: Vec<BlockValues<S>>,
}

impl<S: Scalar> ForwardGraph<S> {
    pub fn output(&self) -> ForwardOutput<S> {
        ForwardOutput {
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockValues {
                    frame_probs: self.tape.value(b.frame_probs).clone(),
                    token_probs: self.tape.value(b.token_probs).clone(),
                    attn_f2s: self.tape.value(b.attn_f2s).clone(),
                    attn_s2f: self.tape.value(b.attn_s2f).clone(),
                    trans_probs: self.tape.value(b.trans_probs).clone(),
                })
                .collect(),
        }
    }

    pub fn last(&self) -> &BlockOutput {
        self.blocks.last().expect("at least one block")
    }
}

struct Lookup<'a, S> {
    params: &'a Parameters<S>,
    vars: &'a [Var],
}

impl<S: Scalar> Lookup<'_, S> {
    fn var(&self, name: &str) -> Var {
        let i = self
            .params
            .position(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        self.vars[i]
    }

    fn attn(&self, prefix: &str) -> AttnParams {
        AttnParams {
            wq: self.var(&format!("{prefix}.wq")),
            bq: self.var(&format!("{prefix}.bq")),
            wk: self.var(&format!("{prefix}.wk")),
            bk: self.var(&format!("{prefix}.bk")),
            wv: self.var(&format!("{prefix}.wv")),
            bv: self.var(&format!("{prefix}.bv")),
            wo: self.var(&format!("{prefix}.wo")),
            bo: self.var(&format!("{prefix}.bo")),
        }
    }

    fn linear(&self, tape: &mut Tape<S>, prefix: &str, x: Var) -> Var {
        let w = self.var(&format!("{prefix}.w"));
        let b = self.var(&format!("{prefix}.b"));
        tape.linear(x, w, b)
    }

    fn norm(&self, tape: &mut Tape<S>, prefix: &str, x: Var) -> Var {
        let g = self.var(&format!("{prefix}.g"));
        let b = self.var(&format!("{prefix}.b"));
        tape.layer_norm(x, g, b)
    }
}

fn positional_encoding<S: Scalar>(len: usize, dim: usize) -> Matrix<S> {
    Matrix::from_fn(len, dim, |t, c| {
        let i = (c / 2) as f64;
        let angle = t as f64 / 10000f64.powf(2.0 * i / dim as f64);
        S::lit(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Residual dilated convolutions (kernel 3, zero padding, ReLU) of one block.
pub fn frame_branch<S: Scalar>(
    tape: &mut Tape<S>,
    params: &Parameters<S>,
    vars: &[Var],
    cfg: &ModelConfig,
    block: usize,
    frames: Var,
) -> Var {
    let lk = Lookup { params, vars };
    let mut x = frames;
    for (l, &dil) in cfg.dilations.iter().enumerate() {
        let cols = tape.im2col(x, dil);
        let y = lk.linear(tape, &format!("block{block}.conv{l}"), cols);
        let y = tape.relu(y);
        x = tape.add(x, y);
    }
    x
}

/// Runs the network on one video, recording everything on a fresh tape.
pub fn forward<S: Scalar>(
    params: &Parameters<S>,
    cfg: &ModelConfig,
    frame_feats: &Matrix<S>,
    mhi_feats: Option<&Matrix<S>>,
) -> Result<ForwardGraph<S>> {
    let t_len = frame_feats.rows();
    if t_len == 0 {
        return Err(Error::Input("empty frame feature sequence".into()));
    }
    if frame_feats.cols() != cfg.frame_dim {
        return Err(Error::Dimension {
            expected: cfg.frame_dim,
            found: frame_feats.cols(),
        });
    }
    let mhi = match (cfg.use_mhi, mhi_feats) {
        (true, None) => return Err(Error::Input("model expects MHI features".into())),
        (true, Some(m)) => {
            if m.rows() != t_len {
                return Err(Error::Input(format!(
                    "{} MHI rows for {t_len} frames",
                    m.rows()
                )));
            }
            if m.cols() != cfg.mhi_dim {
                return Err(Error::Dimension {
                    expected: cfg.mhi_dim,
                    found: m.cols(),
                });
            }
            Some(m)
        }
        (false, _) => None,
    };

    let mut tape = Tape::new();
    let param_vars: Vec<Var> = params.values().iter().map(|m| tape.param(m.clone())).collect();
    let lk = Lookup {
        params,
        vars: &param_vars,
    };
    let d = cfg.hidden_dim;
    let heads = cfg.heads;
    let pe = tape.constant(positional_encoding(t_len, d));

    let x = tape.constant(frame_feats.clone());
    let f = lk.linear(&mut tape, "input.frame", x);
    let mut frames = tape.add(f, pe);
    let mhi_tokens = match mhi {
        Some(m) => {
            let xm = tape.constant(m.clone());
            let hm = lk.linear(&mut tape, "input.mhi", xm);
            Some(tape.add(hm, pe))
        }
        None => None,
    };
    if let (Some(mt), true) = (mhi_tokens, cfg.fuses_input()) {
        let fused = cross_attention(&mut tape, frames, mt, mt, &lk.attn("input.mhi_attn"), heads)?;
        frames = tape.add(frames, fused.out);
    }
    let mut stages = lk.var("input.tokens");

    let mut blocks = Vec::with_capacity(cfg.num_blocks);
    let mut frame_tokens = Vec::with_capacity(cfg.num_blocks);
    let mut stage_tokens = Vec::with_capacity(cfg.num_blocks);
    for b in 0..cfg.num_blocks {
        let p = format!("block{b}");
        frames = frame_branch(&mut tape, params, &param_vars, cfg, b, frames);
        if let (Some(mt), true) = (mhi_tokens, cfg.fuses_blocks()) {
            let fused =
                cross_attention(&mut tape, frames, mt, mt, &lk.attn(&format!("{p}.mhi_attn")), heads)?;
            frames = tape.add(frames, fused.out);
        }

        let sa = cross_attention(
            &mut tape,
            stages,
            stages,
            stages,
            &lk.attn(&format!("{p}.stage_self")),
            heads,
        )?;
        let s = tape.add(stages, sa.out);
        stages = lk.norm(&mut tape, &format!("{p}.stage_self_norm"), s);

        let sc = cross_attention(
            &mut tape,
            stages,
            frames,
            frames,
            &lk.attn(&format!("{p}.stage_cross")),
            heads,
        )?;
        let s = tape.add(stages, sc.out);
        stages = lk.norm(&mut tape, &format!("{p}.stage_cross_norm"), s);
        let h = lk.linear(&mut tape, &format!("{p}.ffn1"), stages);
        let h = tape.relu(h);
        let h = lk.linear(&mut tape, &format!("{p}.ffn2"), h);
        let s = tape.add(stages, h);
        stages = lk.norm(&mut tape, &format!("{p}.ffn_norm"), s);

        let fc = cross_attention(
            &mut tape,
            frames,
            stages,
            stages,
            &lk.attn(&format!("{p}.frame_cross")),
            heads,
        )?;
        let f = tape.add(frames, fc.out);
        frames = lk.norm(&mut tape, &format!("{p}.frame_cross_norm"), f);

        let fl = lk.linear(&mut tape, &format!("{p}.head_frame"), frames);
        let frame_probs = tape.softmax_rows(fl);
        let tl = lk.linear(&mut tape, &format!("{p}.head_token"), stages);
        let token_probs = tape.softmax_rows(tl);
        let attn_s2f = transposed_renormalized(&mut tape, &sc.scores);
        let fm = tape.mean_rows(frames);
        let sm = tape.mean_rows(stages);
        let pooled = tape.concat_cols(&[fm, sm]);
        let zl = lk.linear(&mut tape, &format!("{p}.head_trans"), pooled);
        let trans_probs = tape.softmax_rows(zl);
        blocks.push(BlockOutput {
            frame_probs,
            token_probs,
            attn_f2s: fc.weights,
            attn_s2f,
            trans_probs,
        });
        frame_tokens.push(frames);
        stage_tokens.push(stages);
    }
    Ok(ForwardGraph {
        tape,
        param_vars,
        blocks,
        frame_tokens,
        stage_tokens,
    })
}
