use super::TrainConfig;
use crate::model::Parameters;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Linear warm-up to the base rate, constant afterwards.
pub fn warmup_lr(step: u64, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps == 0 {
        return cfg.learning_rate;
    }
    cfg.learning_rate * (step as f64 / cfg.warmup_steps as f64).min(1.0)
}

/// Adam with decoupled weight decay.
///
/// Each update first shrinks parameters by `lr·wd`, then applies the
/// bias-corrected moment step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<S> {
    pub weight_decay: f64,
    /// Number of updates applied.
    pub step: u64,
    pub m: Vec<Matrix<S>>,
    pub v: Vec<Matrix<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(params: &Parameters<S>, weight_decay: f64) -> Self {
        let zeros: Vec<Matrix<S>> = params
            .values()
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        AdamW {
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut Parameters<S>, grads: &[Matrix<S>], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = S::lit(BETA1);
        let b2 = S::lit(BETA2);
        let c1 = S::one() - S::lit(BETA1.powi(t));
        let c2 = S::one() - S::lit(BETA2.powi(t));
        let lr_s = S::lit(lr);
        let decay = S::one() - S::lit(lr * self.weight_decay);
        let eps = S::lit(EPSILON);
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *p = *p * decay;
                *m = b1 * *m + (S::one() - b1) * g;
                *v = b2 * *v + (S::one() - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p = *p - lr_s * mh / (vh.sqrt() + eps);
            }
        }
    }

    pub fn cast<T: Scalar>(&self) -> AdamW<T> {
        AdamW {
            weight_decay: self.weight_decay,
            step: self.step,
            m: self.m.iter().map(Matrix::cast).collect(),
            v: self.v.iter().map(Matrix::cast).collect(),
        }
    }
}
