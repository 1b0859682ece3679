//! AdaGrad for embedding tables, Adam for dense weights.

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub embedding_lr: f64,
    pub dense_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub adagrad_init: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            embedding_lr: 0.05,
            dense_lr: 5.0e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            adagrad_init: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaGrad<S> {
    pub lr: S,
    eps: S,
    acc: Vec<Vec<S>>,
}

impl<S: Real> AdaGrad<S> {
    pub fn new(lr: f64, init: f64, sizes: &[usize]) -> Self {
        Self {
            lr: S::lit(lr),
            eps: S::lit(1e-10),
            acc: sizes.iter().map(|&n| vec![S::lit(init); n]).collect(),
        }
    }

    pub fn accumulators(&self) -> &[Vec<S>] {
        &self.acc
    }

    pub fn step(&mut self, params: Vec<&mut [S]>, grads: Vec<&[S]>) {
        for ((p, g), acc) in params.into_iter().zip(grads).zip(&mut self.acc) {
            for ((w, &gi), a) in p.iter_mut().zip(g).zip(acc.iter_mut()) {
                if gi == S::zero() {
                    continue;
                }
                *a += gi * gi;
                *w -= self.lr * gi / (a.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<S> {
    pub lr: S,
    beta1: S,
    beta2: S,
    eps: S,
    t: i32,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Real> Adam<S> {
    pub fn new(cfg: &OptimConfig, sizes: &[usize]) -> Self {
        Self {
            lr: S::lit(cfg.dense_lr),
            beta1: S::lit(cfg.beta1),
            beta2: S::lit(cfg.beta2),
            eps: S::lit(cfg.eps),
            t: 0,
            m: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [S]>, grads: Vec<&[S]>) {
        self.t += 1;
        let c1 = S::one() - self.beta1.powi(self.t);
        let c2 = S::one() - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (S::one() - self.beta1) * gi;
                *vi = self.beta2 * *vi + (S::one() - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
