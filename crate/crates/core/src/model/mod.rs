//! The dual-branch network: configuration, parameters and initialization.
//!
//! An input block projects frame features (plus a sinusoidal position code)
//! and instantiates the stage tokens from their learned embeddings. Each of
//! the `num_blocks` update blocks then runs a residual dilated-convolution
//! stack over the frame tokens, optionally fuses MHI features by
//! cross-attention, updates the stage tokens with self-attention and
//! cross-attention to the frames, updates the frames by cross-attention to
//! the tokens, and emits frame-stage, token-class and transferability
//! predictions.

mod attention;
mod forward;

pub use attention::{cross_attention, transposed_renormalized, Attention, AttnParams};
pub use forward::{forward, frame_branch, BlockOutput, BlockValues, ForwardGraph, ForwardOutput};

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Where MHI cross-attention fusion is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MhiFusion {
    Input,
    Blocks,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub num_tokens: usize,
    pub num_stages: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub dilations: Vec<usize>,
    pub ffn_mult: usize,
    pub use_mhi: bool,
    pub mhi_fusion: MhiFusion,
    pub frame_dim: usize,
    pub mhi_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_blocks: 3,
            num_tokens: 60,
            num_stages: 11,
            hidden_dim: 64,
            heads: 4,
            dilations: vec![1, 2, 4, 8],
            ffn_mult: 2,
            use_mhi: false,
            mhi_fusion: MhiFusion::All,
            frame_dim: 32,
            mhi_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_blocks == 0 {
            return bad("num_blocks must be at least 1".into());
        }
        if self.num_tokens == 0 || self.num_stages == 0 {
            return bad("num_tokens and num_stages must be positive".into());
        }
        if self.hidden_dim == 0 || self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return bad(format!(
                "hidden_dim {} must be a positive multiple of heads {}",
                self.hidden_dim, self.heads
            ));
        }
        if self.dilations.iter().any(|&d| d == 0) {
            return bad("dilations must be positive".into());
        }
        if self.ffn_mult == 0 || self.frame_dim == 0 || (self.use_mhi && self.mhi_dim == 0) {
            return bad("ffn_mult and feature dims must be positive".into());
        }
        Ok(())
    }

    fn fuses_input(&self) -> bool {
        self.use_mhi && matches!(self.mhi_fusion, MhiFusion::Input | MhiFusion::All)
    }

    fn fuses_blocks(&self) -> bool {
        self.use_mhi && matches!(self.mhi_fusion, MhiFusion::Blocks | MhiFusion::All)
    }

    /// Closed-form number of scalar parameters.
    ///
    /// With `D` hidden, `A = 4D² + 4D` per attention module, `F = ffn_mult·D`,
    /// `L` conv layers, `S` stages, `M` tokens and `B` blocks:
    ///
    /// ```text
    /// input  = frame_dim·D + D + M·D  [+ mhi_dim·D + D]  [+ A if input fusion]
    /// block  = L·(3D² + D) + 3A + 8D + (2DF + F + D)
    ///          + (D·S + S) + (D·(S+1) + S + 1) + (4D + 2)  [+ A if block fusion]
    /// total  = input + B·block
    /// ```
    pub fn param_count(&self) -> usize {
        let d = self.hidden_dim;
        let a = 4 * d * d + 4 * d;
        let f = self.ffn_mult * d;
        let s = self.num_stages;
        let l = self.dilations.len();
        let mut input = self.frame_dim * d + d + self.num_tokens * d;
        if self.use_mhi {
            input += self.mhi_dim * d + d;
        }
        if self.fuses_input() {
            input += a;
        }
        let mut block = l * (3 * d * d + d)
            + 3 * a
            + 8 * d
            + (2 * d * f + f + d)
            + (d * s + s)
            + (d * (s + 1) + s + 1)
            + (4 * d + 2);
        if self.fuses_blocks() {
            block += a;
        }
        input + self.num_blocks * block
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// `U(−1/√fan_in, 1/√fan_in)`
    Uniform(usize),
    Zeros,
    Ones,
    /// `N(0, 0.02)`
    Token,
}

struct Spec {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

fn attn_specs(prefix: &str, d: usize, out: &mut Vec<Spec>) {
    for p in ["q", "k", "v", "o"] {
        out.push(Spec {
            name: format!("{prefix}.w{p}"),
            rows: d,
            cols: d,
            init: Init::Uniform(d),
        });
        out.push(Spec {
            name: format!("{prefix}.b{p}"),
            rows: 1,
            cols: d,
            init: Init::Zeros,
        });
    }
}

fn linear_specs(prefix: &str, fan_in: usize, fan_out: usize, out: &mut Vec<Spec>) {
    out.push(Spec {
        name: format!("{prefix}.w"),
        rows: fan_in,
        cols: fan_out,
        init: Init::Uniform(fan_in),
    });
    out.push(Spec {
        name: format!("{prefix}.b"),
        rows: 1,
        cols: fan_out,
        init: Init::Zeros,
    });
}

fn norm_specs(prefix: &str, d: usize, out: &mut Vec<Spec>) {
    out.push(Spec {
        name: format!("{prefix}.g"),
        rows: 1,
        cols: d,
        init: Init::Ones,
    });
    out.push(Spec {
        name: format!("{prefix}.b"),
        rows: 1,
        cols: d,
        init: Init::Zeros,
    });
}

fn specs(cfg: &ModelConfig) -> Vec<Spec> {
    let d = cfg.hidden_dim;
    let mut out = Vec::new();
    linear_specs("input.frame", cfg.frame_dim, d, &mut out);
    out.push(Spec {
        name: "input.tokens".into(),
        rows: cfg.num_tokens,
        cols: d,
        init: Init::Token,
    });
    if cfg.use_mhi {
        linear_specs("input.mhi", cfg.mhi_dim, d, &mut out);
    }
    if cfg.fuses_input() {
        attn_specs("input.mhi_attn", d, &mut out);
    }
    for b in 0..cfg.num_blocks {
        let p = format!("block{b}");
        for l in 0..cfg.dilations.len() {
            linear_specs(&format!("{p}.conv{l}"), 3 * d, d, &mut out);
        }
        if cfg.fuses_blocks() {
            attn_specs(&format!("{p}.mhi_attn"), d, &mut out);
        }
        attn_specs(&format!("{p}.stage_self"), d, &mut out);
        norm_specs(&format!("{p}.stage_self_norm"), d, &mut out);
        attn_specs(&format!("{p}.stage_cross"), d, &mut out);
        norm_specs(&format!("{p}.stage_cross_norm"), d, &mut out);
        linear_specs(&format!("{p}.ffn1"), d, cfg.ffn_mult * d, &mut out);
        linear_specs(&format!("{p}.ffn2"), cfg.ffn_mult * d, d, &mut out);
        norm_specs(&format!("{p}.ffn_norm"), d, &mut out);
        attn_specs(&format!("{p}.frame_cross"), d, &mut out);
        norm_specs(&format!("{p}.frame_cross_norm"), d, &mut out);
        linear_specs(&format!("{p}.head_frame"), d, cfg.num_stages, &mut out);
        linear_specs(&format!("{p}.head_token"), d, cfg.num_stages + 1, &mut out);
        linear_specs(&format!("{p}.head_trans"), 2 * d, 2, &mut out);
    }
    out
}

/// Named learnable tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<S> {
    names: Vec<String>,
    values: Vec<Matrix<S>>,
    index: BTreeMap<String, usize>,
}

impl<S: Scalar> Parameters<S> {
    pub fn from_named(named: Vec<(String, Matrix<S>)>) -> Result<Self> {
        let mut names = Vec::with_capacity(named.len());
        let mut values = Vec::with_capacity(named.len());
        let mut index = BTreeMap::new();
        for (i, (n, m)) in named.into_iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate parameter {n}")));
            }
            names.push(n);
            values.push(m);
        }
        Ok(Self {
            names,
            values,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix<S>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix<S>] {
        &mut self.values
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<S>> {
        self.position(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix<S>> {
        self.position(name).map(move |i| &mut self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<S>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Matrix::all_finite)
    }

    pub fn cast<T: Scalar>(&self) -> Parameters<T> {
        Parameters {
            names: self.names.clone(),
            values: self.values.iter().map(Matrix::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Checks names and shapes against what `cfg` requires.
    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        let want = specs(cfg);
        if want.len() != self.len() {
            return Err(Error::Validation(format!(
                "{} parameter tensors, config needs {}",
                self.len(),
                want.len()
            )));
        }
        for (s, (n, m)) in want.iter().zip(self.iter()) {
            if s.name != n || (s.rows, s.cols) != m.shape() {
                return Err(Error::Validation(format!(
                    "parameter {n} {:?} does not match {} ({}x{})",
                    m.shape(),
                    s.name,
                    s.rows,
                    s.cols
                )));
            }
        }
        Ok(())
    }
}

const TOKEN_INIT_VARIANCE: f64 = 0.02;

/// Deterministic initialization for `cfg`.
pub fn init_model<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Parameters<S>> {
    cfg.validate()?;
    let mut rng = rng_for(seed, "model-init");
    // Token embeddings are N(0, 0.02) with 0.02 the variance.
    let token = Normal::new(0.0, TOKEN_INIT_VARIANCE.sqrt()).expect("valid sigma");
    let named = specs(cfg)
        .into_iter()
        .map(|s| {
            let m = match s.init {
                Init::Zeros => Matrix::zeros(s.rows, s.cols),
                Init::Ones => Matrix::filled(s.rows, s.cols, S::one()),
                Init::Uniform(fan_in) => {
                    let lim = 1.0 / (fan_in as f64).sqrt();
                    Matrix::from_fn(s.rows, s.cols, |_, _| S::lit(rng.gen_range(-lim..lim)))
                }
                Init::Token => {
                    Matrix::from_fn(s.rows, s.cols, |_, _| S::lit(token.sample(&mut rng)))
                }
            };
            (s.name, m)
        })
        .collect();
    Parameters::from_named(named)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_parameters() {
        let cfg = ModelConfig::default();
        let a: Parameters<f64> = init_model(&cfg, 5).unwrap();
        let b: Parameters<f64> = init_model(&cfg, 5).unwrap();
        assert_eq!(a, b);
        let c: Parameters<f64> = init_model(&cfg, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn count_matches_formula() {
        for cfg in [
            ModelConfig::default(),
            ModelConfig {
                use_mhi: true,
                ..ModelConfig::default()
            },
            ModelConfig {
                use_mhi: true,
                mhi_fusion: MhiFusion::Input,
                num_blocks: 2,
                hidden_dim: 8,
                heads: 2,
                num_tokens: 3,
                num_stages: 4,
                ..ModelConfig::default()
            },
            ModelConfig {
                use_mhi: true,
                mhi_fusion: MhiFusion::Blocks,
                dilations: vec![1, 3],
                ..ModelConfig::default()
            },
        ] {
            let p: Parameters<f32> = init_model(&cfg, 0).unwrap();
            assert_eq!(p.scalar_count(), cfg.param_count());
            p.check_config(&cfg).unwrap();
        }
    }

    #[test]
    fn heads_must_divide_hidden() {
        let cfg = ModelConfig {
            hidden_dim: 10,
            heads: 4,
            ..ModelConfig::default()
        };
        assert!(matches!(init_model::<f64>(&cfg, 0), Err(Error::Config(_))));
        let zero_blocks = ModelConfig {
            num_blocks: 0,
            ..ModelConfig::default()
        };
        assert!(init_model::<f64>(&zero_blocks, 0).is_err());
    }
}
