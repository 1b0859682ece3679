//! Multi-head target attention with split behavior features.
//!
//! Relevance of behavior `i` to the target under one head:
//!
//! ```text
//! alpha_i = (k_h,i W^h) . (q W^q) / sqrt(d_k)  +  sum_j (k_c,i,j . w^c_j) * beta_j
//! ```
//!
//! The inherent term only needs `K_h W^h`, which depends on the video and not
//! on the user, so it can be precomputed and cached. The cross term compresses
//! each 8-wide cross feature to a single scalar and enters as a bias.
//!
//! [`DenseMhtaParams`] is the conventional formulation with unconstrained
//! projections over the full `K = [K_h K_c]`; [`build_equivalent_dense`] embeds
//! any split parameterization into it exactly.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::CROSS_DIM;
use crate::numerics::{dot, matmul, softmax_in_place, vecmat, Matrix};
use crate::scalar::Real;
use crate::snapshot::NamedTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// H, width of `K_h` and of the target query.
    pub inherent_dim: usize,
    /// C = 8 J, width of `K_c`.
    pub cross_dim: usize,
    /// J.
    pub n_cross: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub n_heads: usize,
    /// Key width of the conventional dense projection (cost model only).
    pub d_out: usize,
    /// Columns of `W^o`.
    pub output_dim: usize,
}

impl AttentionConfig {
    pub fn new(inherent_dim: usize, n_cross: usize, d_k: usize, d_v: usize, n_heads: usize) -> Self {
        Self {
            inherent_dim,
            cross_dim: CROSS_DIM * n_cross,
            n_cross,
            d_k,
            d_v,
            n_heads,
            d_out: d_k,
            output_dim: n_heads * d_v,
        }
    }

    /// H = 144, J = 5, d_k = d_v = 32, 4 heads.
    pub fn standard() -> Self {
        Self::new(144, 5, 32, 32, 4)
    }

    pub fn with_output_dim(mut self, output_dim: usize) -> Self {
        self.output_dim = output_dim;
        self
    }

    pub fn behavior_dim(&self) -> usize {
        self.inherent_dim + self.cross_dim
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if self.cross_dim != CROSS_DIM * self.n_cross {
            errors.push(format!(
                "cross_dim {} must equal {CROSS_DIM} * n_cross ({})",
                self.cross_dim, self.n_cross
            ));
        }
        for (name, v) in [
            ("inherent_dim", self.inherent_dim),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("n_heads", self.n_heads),
            ("d_out", self.d_out),
            ("output_dim", self.output_dim),
        ] {
            if v == 0 {
                errors.push(format!("{name} must be at least 1"));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }
}

/// Parameters of one attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<S> {
    /// `W^q`, H x d_k.
    pub w_query: Matrix<S>,
    /// `W^h`, H x d_k.
    pub w_key: Matrix<S>,
    /// Row `j` is `w^c_j` (J x 8).
    pub w_cross: Matrix<S>,
    /// `beta`, length J.
    pub beta: Vec<S>,
    /// `W^v`, (H + C) x d_v.
    pub w_value: Matrix<S>,
}

impl<S: Real> HeadParams<S> {
    pub fn zeros(cfg: &AttentionConfig) -> Self {
        Self {
            w_query: Matrix::zeros(cfg.inherent_dim, cfg.d_k),
            w_key: Matrix::zeros(cfg.inherent_dim, cfg.d_k),
            w_cross: Matrix::zeros(cfg.n_cross, CROSS_DIM),
            beta: vec![S::zero(); cfg.n_cross],
            w_value: Matrix::zeros(cfg.behavior_dim(), cfg.d_v),
        }
    }

    pub fn check(&self, cfg: &AttentionConfig) -> Result<()> {
        let want = [
            ("W^q", self.w_query.shape(), (cfg.inherent_dim, cfg.d_k)),
            ("W^h", self.w_key.shape(), (cfg.inherent_dim, cfg.d_k)),
            ("w^c", self.w_cross.shape(), (cfg.n_cross, CROSS_DIM)),
            ("beta", (self.beta.len(), 1), (cfg.n_cross, 1)),
            ("W^v", self.w_value.shape(), (cfg.behavior_dim(), cfg.d_v)),
        ];
        for (name, got, expected) in want {
            if got != expected {
                return Err(Error::shape("HeadParams", format!("{name} {expected:?}"), format!("{got:?}")));
            }
        }
        Ok(())
    }
}

/// All heads plus the output projection `W^o`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinParams<S> {
    pub config: AttentionConfig,
    pub heads: Vec<HeadParams<S>>,
    /// (n_heads * d_v) x output_dim.
    pub w_out: Matrix<S>,
}

fn gaussian<S: Real, R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix<S> {
    let normal = Normal::new(0.0, std).expect("valid std");
    Matrix::from_fn(rows, cols, |_, _| S::lit(normal.sample(rng)))
}

impl<S: Real> TwinParams<S> {
    pub fn zeros(config: AttentionConfig) -> Self {
        Self {
            heads: (0..config.n_heads).map(|_| HeadParams::zeros(&config)).collect(),
            w_out: Matrix::zeros(config.n_heads * config.d_v, config.output_dim),
            config,
        }
    }

    /// Gaussian init with fan-in scaling.
    pub fn random<R: Rng>(config: AttentionConfig, rng: &mut R) -> Self {
        let h = config.inherent_dim as f64;
        let heads = (0..config.n_heads)
            .map(|_| HeadParams {
                w_query: gaussian(config.inherent_dim, config.d_k, h.powf(-0.5), rng),
                w_key: gaussian(config.inherent_dim, config.d_k, h.powf(-0.5), rng),
                w_cross: gaussian(config.n_cross, CROSS_DIM, (CROSS_DIM as f64).powf(-0.5), rng),
                beta: (0..config.n_cross)
                    .map(|_| S::lit(Normal::new(0.0, 0.1).unwrap().sample(rng)))
                    .collect(),
                w_value: gaussian(
                    config.behavior_dim(),
                    config.d_v,
                    (config.behavior_dim() as f64).powf(-0.5),
                    rng,
                ),
            })
            .collect();
        let fan_in = (config.n_heads * config.d_v) as f64;
        Self {
            heads,
            w_out: gaussian(config.n_heads * config.d_v, config.output_dim, fan_in.powf(-0.5), rng),
            config,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.heads.len() != self.config.n_heads {
            return Err(Error::shape("TwinParams", self.config.n_heads, self.heads.len()));
        }
        for h in &self.heads {
            h.check(&self.config)?;
        }
        let want = (self.config.n_heads * self.config.d_v, self.config.output_dim);
        if self.w_out.shape() != want {
            return Err(Error::shape("TwinParams W^o", format!("{want:?}"), format!("{:?}", self.w_out.shape())));
        }
        Ok(())
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (a, h) in self.heads.iter().enumerate() {
            out.push(NamedTensor::from_matrix(format!("head{a}.w_query"), &h.w_query));
            out.push(NamedTensor::from_matrix(format!("head{a}.w_key"), &h.w_key));
            out.push(NamedTensor::from_matrix(format!("head{a}.w_cross"), &h.w_cross));
            out.push(NamedTensor {
                name: format!("head{a}.beta"),
                rows: 1,
                cols: h.beta.len(),
                data: h.beta.iter().map(|b| b.as_f64()).collect(),
            });
            out.push(NamedTensor::from_matrix(format!("head{a}.w_value"), &h.w_value));
        }
        out.push(NamedTensor::from_matrix("w_out", &self.w_out));
        out
    }

    pub fn from_tensors(config: AttentionConfig, tensors: &[NamedTensor]) -> Result<Self> {
        let find = |name: String| -> Result<Matrix<S>> {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::invalid(format!("snapshot lacks tensor '{name}'")))?
                .to_matrix()
        };
        let heads = (0..config.n_heads)
            .map(|a| {
                Ok(HeadParams {
                    w_query: find(format!("head{a}.w_query"))?,
                    w_key: find(format!("head{a}.w_key"))?,
                    w_cross: find(format!("head{a}.w_cross"))?,
                    beta: find(format!("head{a}.beta"))?.into_data(),
                    w_value: find(format!("head{a}.w_value"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let p = Self {
            config,
            heads,
            w_out: find("w_out".into())?,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Relevance scores `alpha`, one vector per head.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceScores<S> {
    pub per_head: Vec<Vec<S>>,
}

impl<S: Real> RelevanceScores<S> {
    pub fn len(&self) -> usize {
        self.per_head.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_cols<S: Real>(op: &'static str, m: &Matrix<S>, cols: usize) -> Result<()> {
    if m.cols() != cols {
        return Err(Error::shape(op, format!("{cols} columns"), format!("{} columns", m.cols())));
    }
    Ok(())
}

/// `K_h W^h`, L x d_k. Row `i` depends only on behavior `i`.
pub fn project_inherent<S: Real>(kh: &Matrix<S>, head: &HeadParams<S>) -> Result<Matrix<S>> {
    check_cols("project_inherent", kh, head.w_key.rows())?;
    matmul(kh, &head.w_key)
}

/// `q W^q`, length d_k.
pub fn project_query<S: Real>(q: &[S], head: &HeadParams<S>) -> Result<Vec<S>> {
    vecmat(q, &head.w_query)
}

/// `K_c W^c` with block-diagonal `W^c`: column `j` is `K_c,j w^c_j`. L x J.
pub fn compress_cross<S: Real>(kc: &Matrix<S>, head: &HeadParams<S>) -> Result<Matrix<S>> {
    let j = head.w_cross.rows();
    check_cols("compress_cross", kc, CROSS_DIM * j)?;
    let mut out = Matrix::zeros(kc.rows(), j);
    for r in 0..kc.rows() {
        let row = kc.row(r);
        for f in 0..j {
            let v = dot(&row[f * CROSS_DIM..(f + 1) * CROSS_DIM], head.w_cross.row(f));
            out.set(r, f, v);
        }
    }
    Ok(out)
}

/// `(K_h W^h)(q W^q)^T / sqrt(d_k)`.
pub fn key_query_scores<S: Real>(projected_keys: &Matrix<S>, projected_query: &[S]) -> Result<Vec<S>> {
    check_cols("key_query_scores", projected_keys, projected_query.len())?;
    let scale = S::from_count(projected_query.len()).sqrt().recip();
    Ok(projected_keys
        .iter_rows()
        .map(|k| dot(k, projected_query) * scale)
        .collect())
}

/// `(K_c W^c) beta`.
pub fn cross_bias<S: Real>(compressed: &Matrix<S>, beta: &[S]) -> Result<Vec<S>> {
    check_cols("cross_bias", compressed, beta.len())?;
    Ok(compressed.iter_rows().map(|c| dot(c, beta)).collect())
}

/// Where the inherent keys of a relevance computation come from.
#[derive(Debug, Clone, Copy)]
pub enum Keys<'a, S> {
    /// Raw `K_h`; projected on the fly.
    Inherent(&'a Matrix<S>),
    /// Precomputed `K_h W^h` (e.g. gathered from a projection cache).
    Projected(&'a Matrix<S>),
}

/// One head's relevance `alpha` over every behavior.
pub fn relevance_scores<S: Real>(
    q: &[S],
    keys: Keys<'_, S>,
    kc: &Matrix<S>,
    head: &HeadParams<S>,
) -> Result<Vec<S>> {
    let owned;
    let projected = match keys {
        Keys::Inherent(kh) => {
            owned = project_inherent(kh, head)?;
            &owned
        }
        Keys::Projected(p) => p,
    };
    if projected.rows() != kc.rows() {
        return Err(Error::shape("relevance_scores", format!("{} cross rows", projected.rows()), kc.rows()));
    }
    let qp = project_query(q, head)?;
    let mut alpha = key_query_scores(projected, &qp)?;
    let bias = cross_bias(&compress_cross(kc, head)?, &head.beta)?;
    for (a, b) in alpha.iter_mut().zip(bias) {
        *a += b;
    }
    Ok(alpha)
}

/// Relevance under every head, keys projected from `K_h`.
pub fn twin_relevance<S: Real>(
    q: &[S],
    kh: &Matrix<S>,
    kc: &Matrix<S>,
    params: &TwinParams<S>,
) -> Result<RelevanceScores<S>> {
    let per_head = params
        .heads
        .iter()
        .map(|h| relevance_scores(q, Keys::Inherent(kh), kc, h))
        .collect::<Result<_>>()?;
    Ok(RelevanceScores { per_head })
}

/// `Softmax(alpha)^T (K W^v)` for precomputed `alpha`.
pub fn pool_values<S: Real>(alpha: &[S], k: &Matrix<S>, w_value: &Matrix<S>) -> Result<Vec<S>> {
    if alpha.len() != k.rows() {
        return Err(Error::shape("pool_values", k.rows(), alpha.len()));
    }
    check_cols("pool_values", k, w_value.rows())?;
    let mut weights = alpha.to_vec();
    softmax_in_place(&mut weights)?;
    let mut pooled = vec![S::zero(); k.cols()];
    for (row, &w) in k.iter_rows().zip(&weights) {
        for (p, &x) in pooled.iter_mut().zip(row) {
            *p += w * x;
        }
    }
    vecmat(&pooled, w_value)
}

/// One head of the exact-search attention over the retrieved behaviors.
pub fn head_attention<S: Real>(
    q: &[S],
    kh: &Matrix<S>,
    kc: &Matrix<S>,
    head: &HeadParams<S>,
) -> Result<Vec<S>> {
    let alpha = relevance_scores(q, Keys::Inherent(kh), kc, head)?;
    let k = kh.hconcat(kc)?;
    pool_values(&alpha, &k, &head.w_value)
}

/// `Concat(head_1, ..., head_n) W^o`.
pub fn twin_forward<S: Real>(
    q: &[S],
    kh: &Matrix<S>,
    kc: &Matrix<S>,
    params: &TwinParams<S>,
) -> Result<Vec<S>> {
    if kh.rows() == 0 {
        return Err(Error::invalid("twin_forward needs at least one behavior"));
    }
    let mut concat = Vec::with_capacity(params.heads.len() * params.config.d_v);
    for h in &params.heads {
        concat.extend(head_attention(q, kh, kc, h)?);
    }
    vecmat(&concat, &params.w_out)
}

/// One head of conventional target attention over the full `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseHead<S> {
    /// (H + C) x d_key; the target's cross block is zero-padded.
    pub w_query: Matrix<S>,
    /// Added to the projected query, length d_key.
    pub query_bias: Vec<S>,
    /// (H + C) x d_key.
    pub w_key: Matrix<S>,
    /// (H + C) x d_v.
    pub w_value: Matrix<S>,
    pub scale: S,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMhtaParams<S> {
    pub heads: Vec<DenseHead<S>>,
    pub w_out: Matrix<S>,
}

impl<S: Real> DenseMhtaParams<S> {
    /// Unconstrained weights with key width `config.d_out` and no query bias.
    pub fn random<R: Rng>(config: &AttentionConfig, rng: &mut R) -> Self {
        let width = config.behavior_dim();
        let fan = (width as f64).powf(-0.5);
        let heads = (0..config.n_heads)
            .map(|_| DenseHead {
                w_query: gaussian(width, config.d_out, fan, rng),
                query_bias: vec![S::zero(); config.d_out],
                w_key: gaussian(width, config.d_out, fan, rng),
                w_value: gaussian(width, config.d_v, fan, rng),
                scale: S::from_count(config.d_out).sqrt().recip(),
            })
            .collect();
        let fan_in = ((config.n_heads * config.d_v) as f64).powf(-0.5);
        Self {
            heads,
            w_out: gaussian(config.n_heads * config.d_v, config.output_dim, fan_in, rng),
        }
    }
}

/// Zero-pads an H-wide target to the (H + C) width of `K`.
pub fn pad_query<S: Real>(q: &[S], behavior_dim: usize) -> Vec<S> {
    let mut out = q.to_vec();
    out.resize(behavior_dim, S::zero());
    out
}

/// `(q_pad W_q + b) W_k^T K^T * scale` for one dense head.
pub fn dense_relevance<S: Real>(q_pad: &[S], k: &Matrix<S>, head: &DenseHead<S>) -> Result<Vec<S>> {
    check_cols("dense_relevance", k, head.w_key.rows())?;
    let mut qp = vecmat(q_pad, &head.w_query)?;
    for (x, &b) in qp.iter_mut().zip(&head.query_bias) {
        *x += b;
    }
    let keys = matmul(k, &head.w_key)?;
    Ok(keys.iter_rows().map(|r| dot(r, &qp) * head.scale).collect())
}

/// Conventional multi-head target attention. `q` is the H-wide target; its
/// absent cross block is zero-padded.
pub fn raw_mhta_forward<S: Real>(q: &[S], k: &Matrix<S>, params: &DenseMhtaParams<S>) -> Result<Vec<S>> {
    if k.rows() == 0 {
        return Err(Error::invalid("raw_mhta_forward needs at least one behavior"));
    }
    let q_pad = pad_query(q, k.cols());
    let mut concat = Vec::new();
    for h in &params.heads {
        let alpha = dense_relevance(&q_pad, k, h)?;
        concat.extend(pool_values(&alpha, k, &h.w_value)?);
    }
    vecmat(&concat, &params.w_out)
}

/// Dense weights reproducing the split scores exactly. Per head the key
/// projection is `[[W^h, 0], [0, blockdiag(w^c_1..w^c_J)]]` ((H + C) x (d_k + J)),
/// the query projection routes `q W^q` into the first d_k slots and `beta`
/// enters through the query bias in the last J slots.
pub fn build_equivalent_dense<S: Real>(params: &TwinParams<S>) -> DenseMhtaParams<S> {
    let cfg = &params.config;
    let (h, c, j, dk) = (cfg.inherent_dim, cfg.cross_dim, cfg.n_cross, cfg.d_k);
    let width = h + c;
    let d_key = dk + j;
    let sqrt_dk = S::from_count(dk).sqrt();
    let heads = params
        .heads
        .iter()
        .map(|hp| {
            let mut w_key = Matrix::zeros(width, d_key);
            let mut w_query = Matrix::zeros(width, d_key);
            for r in 0..h {
                for col in 0..dk {
                    w_key.set(r, col, hp.w_key.get(r, col));
                    w_query.set(r, col, hp.w_query.get(r, col));
                }
            }
            for f in 0..j {
                for e in 0..CROSS_DIM {
                    w_key.set(h + f * CROSS_DIM + e, dk + f, hp.w_cross.get(f, e));
                }
            }
            let mut query_bias = vec![S::zero(); d_key];
            for f in 0..j {
                query_bias[dk + f] = hp.beta[f] * sqrt_dk;
            }
            DenseHead {
                w_query,
                query_bias,
                w_key,
                w_value: hp.w_value.clone(),
                scale: sqrt_dk.recip(),
            }
        })
        .collect();
    DenseMhtaParams {
        heads,
        w_out: params.w_out.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn instance(seed: u64, l: usize, cfg: AttentionConfig) -> (Vec<f64>, Matrix<f64>, Matrix<f64>, TwinParams<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = TwinParams::random(cfg, &mut rng);
        let q = (0..cfg.inherent_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kh = random_matrix(&mut rng, l, cfg.inherent_dim);
        let kc = random_matrix(&mut rng, l, cfg.cross_dim);
        (q, kh, kc, params)
    }

    /// Naive per-row oracle for one head, written directly from the formula.
    fn alpha_oracle(q: &[f64], kh: &Matrix<f64>, kc: &Matrix<f64>, h: &HeadParams<f64>) -> Vec<f64> {
        let dk = h.w_key.cols();
        let mut qp = vec![0.0; dk];
        for (c, slot) in qp.iter_mut().enumerate() {
            for r in 0..q.len() {
                *slot += q[r] * h.w_query.get(r, c);
            }
        }
        (0..kh.rows())
            .map(|i| {
                let mut s = 0.0;
                for c in 0..dk {
                    let mut kp = 0.0;
                    for r in 0..kh.cols() {
                        kp += kh.get(i, r) * h.w_key.get(r, c);
                    }
                    s += kp * qp[c];
                }
                s /= (dk as f64).sqrt();
                for j in 0..h.beta.len() {
                    let mut cc = 0.0;
                    for e in 0..CROSS_DIM {
                        cc += kc.get(i, j * CROSS_DIM + e) * h.w_cross.get(j, e);
                    }
                    s += cc * h.beta[j];
                }
                s
            })
            .collect()
    }

    #[test]
    fn identity_projection_returns_kh() {
        let cfg = AttentionConfig::new(3, 1, 3, 2, 1);
        let mut head = HeadParams::<f64>::zeros(&cfg);
        head.w_key = Matrix::identity(3);
        let kh = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]]).unwrap();
        assert_eq!(project_inherent(&kh, &head).unwrap(), kh);
        let wrong = Matrix::<f64>::zeros(2, 4);
        assert!(project_inherent(&wrong, &head).is_err());
    }

    #[test]
    fn selector_cross_weights_pick_first_coordinate() {
        let cfg = AttentionConfig::new(2, 5, 2, 2, 1);
        let mut head = HeadParams::<f64>::zeros(&cfg);
        for j in 0..5 {
            head.w_cross.set(j, 0, 1.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let kc = random_matrix(&mut rng, 4, 40);
        let out = compress_cross(&kc, &head).unwrap();
        assert_eq!(out.shape(), (4, 5));
        for i in 0..4 {
            for j in 0..5 {
                assert_eq!(out.get(i, j), kc.get(i, j * 8));
            }
        }
    }

    #[test]
    fn compression_equals_block_diagonal_product() {
        let cfg = AttentionConfig::new(2, 5, 2, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = TwinParams::<f64>::random(cfg, &mut rng);
        let head = &params.heads[0];
        let kc = random_matrix(&mut rng, 7, 40);
        let mut block = Matrix::zeros(40, 5);
        for j in 0..5 {
            for e in 0..8 {
                block.set(j * 8 + e, j, head.w_cross.get(j, e));
            }
        }
        let dense = matmul(&kc, &block).unwrap();
        assert!(compress_cross(&kc, head).unwrap().max_abs_diff(&dense) < 1e-14);
    }

    #[test]
    fn scalar_relevance_case() {
        let cfg = AttentionConfig::new(1, 1, 1, 1, 1);
        let mut head = HeadParams::<f64>::zeros(&cfg);
        head.w_key = Matrix::identity(1);
        head.w_query = Matrix::identity(1);
        let kh = Matrix::from_rows(&[vec![2.0], vec![3.0]]).unwrap();
        let kc = Matrix::zeros(2, 8);
        let alpha = relevance_scores(&[1.0], Keys::Inherent(&kh), &kc, &head).unwrap();
        assert_eq!(alpha, vec![2.0, 3.0]);

        // compressed cross column [[0.5], [-0.5]] with beta = 1 shifts alpha
        head.beta = vec![1.0];
        head.w_cross.set(0, 0, 1.0);
        let kc = Matrix::from_fn(2, 8, |r, c| if c == 0 { [0.5, -0.5][r] } else { 0.0 });
        assert_eq!(compress_cross(&kc, &head).unwrap().data(), &[0.5, -0.5]);
        let shifted = relevance_scores(&[1.0], Keys::Inherent(&kh), &kc, &head).unwrap();
        assert_eq!(shifted, vec![2.5, 2.5]);
    }

    #[test]
    fn relevance_matches_naive_oracle() {
        let cfg = AttentionConfig::new(12, 3, 4, 3, 2);
        let (q, kh, kc, params) = instance(7, 9, cfg);
        for h in &params.heads {
            let alpha = relevance_scores(&q, Keys::Inherent(&kh), &kc, h).unwrap();
            let oracle = alpha_oracle(&q, &kh, &kc, h);
            for (a, b) in alpha.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cached_keys_give_identical_scores() {
        let cfg = AttentionConfig::new(12, 3, 4, 3, 1);
        let (q, kh, kc, params) = instance(8, 9, cfg);
        let h = &params.heads[0];
        let fresh = relevance_scores(&q, Keys::Inherent(&kh), &kc, h).unwrap();
        let projected = project_inherent(&kh, h).unwrap();
        let cached = relevance_scores(&q, Keys::Projected(&projected), &kc, h).unwrap();
        assert_eq!(fresh, cached);
    }

    #[test]
    fn uniform_scores_average_the_values() {
        let cfg = AttentionConfig::new(2, 1, 1, 2, 1);
        let mut head = HeadParams::<f64>::zeros(&cfg);
        head.w_value = Matrix::from_fn(10, 2, |r, c| (r * 2 + c) as f64 * 0.1);
        let kh = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]]).unwrap();
        let kc = Matrix::zeros(3, 8);
        let out = head_attention(&[1.0, 1.0], &kh, &kc, &head).unwrap();
        let k = kh.hconcat(&kc).unwrap();
        let values = matmul(&k, &head.w_value).unwrap();
        for d in 0..2 {
            let mean = (values.get(0, d) + values.get(1, d) + values.get(2, d)) / 3.0;
            assert!((out[d] - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn dominant_score_selects_one_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = random_matrix(&mut rng, 4, 6);
        let w = random_matrix(&mut rng, 6, 3);
        let out = pool_values(&[0.0, 55.0, 1.0, -3.0], &k, &w).unwrap();
        let row = vecmat(k.row(1), &w).unwrap();
        for d in 0..3 {
            assert!((out[d] - row[d]).abs() < 1e-12);
        }
        let single = pool_values(&[123.0], &k.select_rows(&[2]), &w).unwrap();
        let row = vecmat(k.row(2), &w).unwrap();
        for d in 0..3 {
            assert!((single[d] - row[d]).abs() < 1e-15);
        }
    }

    #[test]
    fn single_head_identity_output_is_head_attention() {
        let cfg = AttentionConfig::new(6, 2, 3, 4, 1);
        let (q, kh, kc, mut params) = instance(10, 5, cfg);
        params.w_out = Matrix::identity(4);
        let out = twin_forward(&q, &kh, &kc, &params).unwrap();
        let head = head_attention(&q, &kh, &kc, &params.heads[0]).unwrap();
        assert_eq!(out, head);
    }

    #[test]
    fn output_width_follows_w_out() {
        let cfg = AttentionConfig::new(6, 2, 3, 4, 3).with_output_dim(7);
        let (q, kh, kc, params) = instance(11, 5, cfg);
        assert_eq!(twin_forward(&q, &kh, &kc, &params).unwrap().len(), 7);
        assert!(twin_forward(&q, &Matrix::zeros(0, 6), &Matrix::zeros(0, 16), &params).is_err());
    }

    #[test]
    fn equivalent_dense_has_block_structure() {
        let cfg = AttentionConfig::new(10, 3, 4, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let params = TwinParams::<f64>::random(cfg, &mut rng);
        let dense = build_equivalent_dense(&params);
        for h in &dense.heads {
            assert_eq!(h.w_key.shape(), (34, 7));
            assert_eq!(h.w_key.count_nonzero(), 10 * 4 + 8 * 3);
        }
        let zero = build_equivalent_dense(&TwinParams::<f64>::zeros(cfg));
        for h in &zero.heads {
            assert_eq!(h.w_key.count_nonzero(), 0);
            assert_eq!(h.w_query.count_nonzero(), 0);
            assert!(h.query_bias.iter().all(|&b| b == 0.0));
            assert_eq!(h.w_value.count_nonzero(), 0);
        }
        assert_eq!(zero.w_out.count_nonzero(), 0);
    }

    #[test]
    fn dense_parity_on_random_instances() {
        let cfg = AttentionConfig::new(16, 2, 4, 3, 2);
        for seed in 0..100 {
            let (q, kh, kc, params) = instance(seed, 13, cfg);
            let dense = build_equivalent_dense(&params);
            let k = kh.hconcat(&kc).unwrap();
            let q_pad = pad_query(&q, k.cols());
            for (h, dh) in params.heads.iter().zip(&dense.heads) {
                let split = relevance_scores(&q, Keys::Inherent(&kh), &kc, h).unwrap();
                let raw = dense_relevance(&q_pad, &k, dh).unwrap();
                for (a, b) in split.iter().zip(&raw) {
                    assert!((a - b).abs() <= 1e-10);
                }
            }
            let t = twin_forward(&q, &kh, &kc, &params).unwrap();
            let r = raw_mhta_forward(&q, &k, &dense).unwrap();
            for (a, b) in t.iter().zip(&r) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn uniform_keys_attend_uniformly() {
        let cfg = AttentionConfig::new(4, 1, 3, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let dense = DenseMhtaParams::<f64>::random(&cfg, &mut rng);
        let row: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k = Matrix::from_rows(&[row.clone(), row.clone(), row.clone()]).unwrap();
        let alpha = dense_relevance(&pad_query(&[0.3, -0.2, 0.9, 0.1], 12), &k, &dense.heads[0]).unwrap();
        assert!(alpha.iter().all(|&a| a == alpha[0]));
    }

    #[test]
    fn snapshot_round_trip() {
        let cfg = AttentionConfig::new(6, 2, 3, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let params = TwinParams::<f64>::random(cfg, &mut rng);
        let back = TwinParams::<f64>::from_tensors(cfg, &params.to_tensors()).unwrap();
        assert_eq!(back, params);
    }

    proptest! {
        #[test]
        fn permutation_equivariance(seed in any::<u64>(), perm_seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let cfg = AttentionConfig::new(8, 2, 3, 3, 2);
            let (q, kh, kc, params) = instance(seed, 7, cfg);
            let mut order: Vec<usize> = (0..7).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            let (ph, pc) = (kh.select_rows(&order), kc.select_rows(&order));
            let a = twin_relevance(&q, &kh, &kc, &params).unwrap();
            let b = twin_relevance(&q, &ph, &pc, &params).unwrap();
            for (ha, hb) in a.per_head.iter().zip(&b.per_head) {
                for (pos, &i) in order.iter().enumerate() {
                    prop_assert!((hb[pos] - ha[i]).abs() < 1e-12);
                }
            }
            let out = twin_forward(&q, &kh, &kc, &params).unwrap();
            let out_p = twin_forward(&q, &ph, &pc, &params).unwrap();
            for (x, y) in out.iter().zip(&out_p) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn score_shift_leaves_pooling_unchanged(seed in any::<u64>(), c in -30.0f64..30.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = random_matrix(&mut rng, 6, 5);
            let w = random_matrix(&mut rng, 5, 3);
            let alpha: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let shifted: Vec<f64> = alpha.iter().map(|a| a + c).collect();
            let a = pool_values(&alpha, &k, &w).unwrap();
            let b = pool_values(&shifted, &k, &w).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn linear_in_output_and_value_weights(seed in any::<u64>(), s in -3.0f64..3.0) {
            let cfg = AttentionConfig::new(6, 1, 2, 3, 2);
            let (q, kh, kc, params) = instance(seed, 5, cfg);
            let base = twin_forward(&q, &kh, &kc, &params).unwrap();
            let mut scaled = params.clone();
            scaled.w_out.scale(s);
            let out = twin_forward(&q, &kh, &kc, &scaled).unwrap();
            for (x, y) in base.iter().zip(&out) {
                prop_assert!((s * x - y).abs() < 1e-10);
            }
            let mut scaled = params.clone();
            for h in &mut scaled.heads {
                h.w_value.scale(s);
            }
            let out = twin_forward(&q, &kh, &kc, &scaled).unwrap();
            for (x, y) in base.iter().zip(&out) {
                prop_assert!((s * x - y).abs() < 1e-10);
            }
        }
    }
}
