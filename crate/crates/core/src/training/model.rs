//! CTR model: embeddings, two-stage target attention over the long sequence,
//! a mean-pooled short-term summary and a ReLU predictor, with hand-written
//! gradients. Retrieval is a hard choice; gradients flow through the exact
//! search over the retrieved behaviors only.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{
    build_equivalent_dense, compress_cross, pad_query, project_inherent, project_query, relevance_scores, AttentionConfig,
    DenseMhtaParams, Keys, TwinParams,
};
use crate::error::{Error, Result};
use crate::features::{assemble_k, embed_target, BehaviorRecord, EmbeddingTable, EmbeddingTables, FeatureSchema, FeatureValue, TargetItem, CROSS_DIM};
use crate::numerics::{dot, softmax_in_place, topk_indices, vecmat, Matrix};
use crate::retrieval::{hard_gsu_ranking, select_indices, soft_gsu_scores, GsuKind};
use crate::scalar::Real;
use crate::serving::{CoveragePolicy, ProjectionCache, VideoPool};
use crate::snapshot::NamedTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Twin,
    /// Cross features enter only through the values; `beta` is frozen at 0.
    TwinNoBias,
    /// Conventional attention with unconstrained `(H + C) x d` key projections.
    RawMhta,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Twin => "twin",
            Variant::TwinNoBias => "twin-no-bias",
            Variant::RawMhta => "raw-mhta",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub id_dim: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub n_heads: usize,
    pub output_dim: usize,
    pub hidden: Vec<usize>,
    /// Number of most recent behaviors mean-pooled into the predictor input; 0 disables.
    pub short_term: usize,
    pub embedding_std: f64,
    /// Start every head with `W^q = W^h`, so initial relevance is an embedding similarity.
    pub symmetric_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Twin,
            id_dim: 64,
            d_k: 32,
            d_v: 32,
            n_heads: 4,
            output_dim: 32,
            hidden: vec![64, 32],
            short_term: 50,
            embedding_std: 0.05,
            symmetric_init: true,
        }
    }
}

impl ModelConfig {
    pub fn attention(&self, schema: &FeatureSchema) -> AttentionConfig {
        AttentionConfig::new(schema.inherent_dim(), schema.n_cross(), self.d_k, self.d_v, self.n_heads)
            .with_output_dim(self.output_dim)
    }

    pub fn predictor_input(&self, schema: &FeatureSchema, context_dim: usize) -> usize {
        let st = if self.short_term > 0 {
            schema.inherent_dim() + schema.cross_dim()
        } else {
            0
        };
        self.output_dim + schema.inherent_dim() + context_dim + st
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<S> {
    /// in x out.
    pub w: Matrix<S>,
    pub b: Vec<S>,
}

/// ReLU hidden layers followed by one linear output unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<S> {
    pub layers: Vec<Layer<S>>,
}

impl<S: Real> Mlp<S> {
    pub fn random<R: Rng>(input: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let normal = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).unwrap();
                Layer {
                    w: Matrix::from_fn(w[0], w[1], |_, _| S::lit(normal.sample(rng))),
                    b: vec![S::zero(); w[1]],
                }
            })
            .collect();
        Self { layers }
    }

    fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    w: Matrix::zeros(l.w.rows(), l.w.cols()),
                    b: vec![S::zero(); l.b.len()],
                })
                .collect(),
        }
    }
}

/// Every trainable tensor of the CTR model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S> {
    pub variant: Variant,
    pub tables: EmbeddingTables<S>,
    pub twin: TwinParams<S>,
    /// Scoring and value weights of the raw-attention variant.
    pub dense: Option<DenseMhtaParams<S>>,
    pub mlp: Mlp<S>,
}

impl<S: Real> ModelParams<S> {
    pub fn init<R: Rng>(schema: FeatureSchema, cfg: &ModelConfig, context_dim: usize, rng: &mut R) -> Result<Self> {
        let att = cfg.attention(&schema);
        att.validate()?;
        let input = cfg.predictor_input(&schema, context_dim);
        let tables = EmbeddingTables::random(schema, cfg.embedding_std, rng)?;
        let mut twin = TwinParams::random(att, rng);
        if cfg.symmetric_init {
            for h in &mut twin.heads {
                h.w_query = h.w_key.clone();
            }
        }
        if cfg.variant == Variant::TwinNoBias {
            for h in &mut twin.heads {
                h.beta.iter_mut().for_each(|b| *b = S::zero());
            }
        }
        let dense = (cfg.variant == Variant::RawMhta).then(|| build_equivalent_dense(&twin));
        Ok(Self {
            variant: cfg.variant,
            tables,
            twin,
            dense,
            mlp: Mlp::random(input, &cfg.hidden, rng),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let zero = |m: &Matrix<S>| Matrix::zeros(m.rows(), m.cols());
        let mut twin = TwinParams::zeros(self.twin.config);
        for (g, h) in twin.heads.iter_mut().zip(&self.twin.heads) {
            g.beta = vec![S::zero(); h.beta.len()];
        }
        Self {
            variant: self.variant,
            tables: EmbeddingTables::zeros(self.tables.schema.clone()).expect("validated schema"),
            twin,
            dense: self.dense.as_ref().map(|d| DenseMhtaParams {
                heads: d
                    .heads
                    .iter()
                    .map(|h| crate::attention::DenseHead {
                        w_query: zero(&h.w_query),
                        query_bias: vec![S::zero(); h.query_bias.len()],
                        w_key: zero(&h.w_key),
                        w_value: zero(&h.w_value),
                        scale: h.scale,
                    })
                    .collect(),
                w_out: zero(&d.w_out),
            }),
            mlp: self.mlp.zeros_like(),
        }
    }

    pub fn embedding_slices(&self) -> Vec<&[S]> {
        self.tables.tables().iter().map(|t| t.storage().data()).collect()
    }

    pub fn embedding_slices_mut(&mut self) -> Vec<&mut [S]> {
        self.tables.tables_mut().iter_mut().map(|t| t.storage_mut().data_mut()).collect()
    }

    pub fn dense_slices(&self) -> Vec<&[S]> {
        let mut out: Vec<&[S]> = Vec::new();
        for h in &self.twin.heads {
            out.extend([h.w_query.data(), h.w_key.data(), h.w_cross.data(), &h.beta[..], h.w_value.data()]);
        }
        out.push(self.twin.w_out.data());
        if let Some(d) = &self.dense {
            for h in &d.heads {
                out.extend([h.w_query.data(), &h.query_bias[..], h.w_key.data(), h.w_value.data()]);
            }
            out.push(d.w_out.data());
        }
        for l in &self.mlp.layers {
            out.extend([l.w.data(), &l.b[..]]);
        }
        out
    }

    pub fn dense_slices_mut(&mut self) -> Vec<&mut [S]> {
        let mut out: Vec<&mut [S]> = Vec::new();
        for h in &mut self.twin.heads {
            out.push(h.w_query.data_mut());
            out.push(h.w_key.data_mut());
            out.push(h.w_cross.data_mut());
            out.push(&mut h.beta[..]);
            out.push(h.w_value.data_mut());
        }
        out.push(self.twin.w_out.data_mut());
        if let Some(d) = &mut self.dense {
            for h in &mut d.heads {
                out.push(h.w_query.data_mut());
                out.push(&mut h.query_bias[..]);
                out.push(h.w_key.data_mut());
                out.push(h.w_value.data_mut());
            }
            out.push(d.w_out.data_mut());
        }
        for l in &mut self.mlp.layers {
            out.push(l.w.data_mut());
            out.push(&mut l.b[..]);
        }
        out
    }

    /// Parallel to [`dense_slices`](Self::dense_slices): tensors the variant keeps fixed.
    pub fn frozen_dense(&self) -> Vec<bool> {
        let no_bias = self.variant == Variant::TwinNoBias;
        let mut out = Vec::new();
        for _ in &self.twin.heads {
            out.extend([false, false, no_bias, no_bias, false]);
        }
        out.push(false);
        if let Some(d) = &self.dense {
            out.extend(std::iter::repeat_n(false, 4 * d.heads.len() + 1));
        }
        out.extend(std::iter::repeat_n(false, 2 * self.mlp.layers.len()));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.embedding_slices()
            .into_iter()
            .chain(self.dense_slices())
            .all(|s| s.iter().all(|x| x.is_finite()))
    }

    fn value_weights(&self, a: usize) -> &Matrix<S> {
        match &self.dense {
            Some(d) => &d.heads[a].w_value,
            None => &self.twin.heads[a].w_value,
        }
    }

    fn out_weights(&self) -> &Matrix<S> {
        match &self.dense {
            Some(d) => &d.w_out,
            None => &self.twin.w_out,
        }
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut out = self.tables.to_tensors();
        out.extend(self.twin.to_tensors());
        if let Some(d) = &self.dense {
            for (a, h) in d.heads.iter().enumerate() {
                out.push(NamedTensor::from_matrix(format!("dense{a}.w_query"), &h.w_query));
                out.push(NamedTensor::from_matrix(
                    format!("dense{a}.query_bias"),
                    &Matrix::new(1, h.query_bias.len(), h.query_bias.clone()).expect("finite"),
                ));
                out.push(NamedTensor::from_matrix(format!("dense{a}.w_key"), &h.w_key));
                out.push(NamedTensor::from_matrix(format!("dense{a}.w_value"), &h.w_value));
            }
            out.push(NamedTensor::from_matrix("dense.w_out", &d.w_out));
        }
        for (i, l) in self.mlp.layers.iter().enumerate() {
            out.push(NamedTensor::from_matrix(format!("mlp{i}.w"), &l.w));
            out.push(NamedTensor::from_matrix(
                format!("mlp{i}.b"),
                &Matrix::new(1, l.b.len(), l.b.clone()).expect("finite"),
            ));
        }
        out
    }
}

/// Videos whose projected keys are precomputed per batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Catalog {
    pub ids: Vec<u64>,
    pub inherent: Vec<Vec<FeatureValue>>,
}

impl Catalog {
    pub fn from_items<'a>(items: impl IntoIterator<Item = (u64, &'a [FeatureValue])>) -> Self {
        let mut map = std::collections::BTreeMap::new();
        for (id, v) in items {
            map.entry(id).or_insert_with(|| v.to_vec());
        }
        let (ids, inherent) = map.into_iter().unzip();
        Self { ids, inherent }
    }
}

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<'a> {
    pub history: &'a [BehaviorRecord],
    pub target: &'a TargetItem,
    pub context: &'a [f64],
    pub label: u8,
}

/// Retrieval settings used for both training and evaluation.
#[derive(Debug, Clone, Copy)]
pub struct GsuSetup<'a, S> {
    pub kind: GsuKind,
    pub k: usize,
    /// Only the most recent `n` behaviors are searched.
    pub input_len: Option<usize>,
    /// Frozen video embeddings for SIM Soft.
    pub pretrained: Option<&'a EmbeddingTable<S>>,
}

enum Scorer<S> {
    Twin {
        cache: ProjectionCache<S>,
        /// [head][cross feature][value] -> `K_c,j w^c_j` for a single hot value.
        cross: Vec<Vec<Vec<S>>>,
    },
    Raw {
        index: HashMap<u64, usize>,
        /// [head] -> catalog x d_key inherent part of `K W_k`.
        inherent: Vec<Matrix<S>>,
        /// [head][cross feature] -> vocab x d_key.
        cross: Vec<Vec<Matrix<S>>>,
    },
}

/// Everything derived from the parameters once per batch.
pub struct BatchContext<S> {
    scorer: Scorer<S>,
    category_pos: Option<usize>,
}

fn cross_values(v: &FeatureValue) -> &[u32] {
    v.as_slice()
}

impl<S: Real> BatchContext<S> {
    pub fn build(params: &ModelParams<S>, catalog: &Catalog, version: u64) -> Result<Self> {
        let tables = &params.tables;
        let mut kh = Matrix::zeros(catalog.ids.len(), tables.inherent_dim());
        for (r, v) in catalog.inherent.iter().enumerate() {
            tables.inherent_row(v, kh.row_mut(r))?;
        }
        let n_cross = tables.schema.n_cross();
        let cross_table = |j: usize| &tables.tables()[tables.cross_table_index(j)];
        let scorer = match &params.dense {
            None => {
                let cache = ProjectionCache::new(CoveragePolicy::Strict);
                cache.refresh(&params.twin, version, &VideoPool::new(catalog.ids.clone(), kh)?, 1.0, 0.0)?;
                let cross = params
                    .twin
                    .heads
                    .iter()
                    .map(|h| {
                        (0..n_cross)
                            .map(|j| {
                                let t = cross_table(j);
                                (0..t.vocab()).map(|v| dot(t.column(v), h.w_cross.row(j))).collect()
                            })
                            .collect()
                    })
                    .collect();
                Scorer::Twin { cache, cross }
            }
            Some(dense) => {
                let h_dim = tables.inherent_dim();
                let mut inherent = Vec::new();
                let mut cross = Vec::new();
                for head in &dense.heads {
                    let d_key = head.w_key.cols();
                    let top = Matrix::new(h_dim, d_key, head.w_key.data()[..h_dim * d_key].to_vec())?;
                    inherent.push(crate::numerics::matmul(&kh, &top)?);
                    cross.push(
                        (0..n_cross)
                            .map(|j| {
                                let t = cross_table(j);
                                let start = h_dim + j * CROSS_DIM;
                                let block = Matrix::new(
                                    CROSS_DIM,
                                    d_key,
                                    head.w_key.data()[start * d_key..(start + CROSS_DIM) * d_key].to_vec(),
                                )?;
                                let mut m = Matrix::zeros(t.vocab(), d_key);
                                for v in 0..t.vocab() {
                                    m.row_mut(v).copy_from_slice(&vecmat(t.column(v), &block)?);
                                }
                                Ok(m)
                            })
                            .collect::<Result<Vec<_>>>()?,
                    );
                }
                let index = catalog.ids.iter().enumerate().map(|(r, &id)| (id, r)).collect();
                Scorer::Raw { index, inherent, cross }
            }
        };
        Ok(Self {
            scorer,
            category_pos: tables.schema.inherent_position("category"),
        })
    }

    /// Positions (into `window`) of the retrieved behaviors.
    pub fn retrieve(
        &self,
        params: &ModelParams<S>,
        q: &[S],
        window: &[BehaviorRecord],
        target: &TargetItem,
        gsu: &GsuSetup<'_, S>,
    ) -> Result<Vec<usize>> {
        let k = gsu.k;
        match gsu.kind {
            GsuKind::SimHard => {
                let pos = self
                    .category_pos
                    .ok_or_else(|| Error::invalid("sim-hard needs a `category` feature"))?;
                let cat = |v: &[FeatureValue]| v[pos].as_slice().first().copied().unwrap_or(u32::MAX);
                let cats: Vec<u32> = window.iter().map(|b| cat(&b.inherent)).collect();
                let times: Vec<f64> = window.iter().map(|b| b.event_time).collect();
                let mut r = hard_gsu_ranking(cat(&target.inherent), &cats, &times);
                r.truncate(k);
                Ok(r)
            }
            GsuKind::SimSoft => {
                let table = gsu
                    .pretrained
                    .ok_or_else(|| Error::invalid("sim-soft needs pre-trained video embeddings"))?;
                let ids: Vec<u64> = window.iter().map(|b| b.video_id).collect();
                let scores = soft_gsu_scores(target.video_id, &ids, table)?;
                Ok(topk_indices(&scores, k.max(1)))
            }
            GsuKind::TwinCp | GsuKind::Oracle => {
                let per_head = self.scores(params, q, window, gsu.kind == GsuKind::Oracle)?;
                Ok(select_indices(&per_head, k).0)
            }
        }
    }

    /// Relevance of every behavior in `window` under every head. `fresh`
    /// projects keys from the current embeddings instead of gathering them.
    fn scores(&self, params: &ModelParams<S>, q: &[S], window: &[BehaviorRecord], fresh: bool) -> Result<Vec<Vec<S>>> {
        let ids: Vec<u64> = window.iter().map(|b| b.video_id).collect();
        match &self.scorer {
            Scorer::Twin { cache, cross } => {
                let projected = if fresh {
                    let (kh, _) = assemble_k(window, &params.tables)?;
                    params
                        .twin
                        .heads
                        .iter()
                        .map(|h| project_inherent(&kh, h))
                        .collect::<Result<Vec<_>>>()?
                } else {
                    cache.lookup(&ids, None)?.per_head
                };
                let scale = S::from_count(params.twin.config.d_k).sqrt().recip();
                params
                    .twin
                    .heads
                    .iter()
                    .enumerate()
                    .map(|(a, h)| {
                        let s = project_query(q, h)?;
                        Ok(window
                            .iter()
                            .enumerate()
                            .map(|(i, b)| {
                                let mut bias = S::zero();
                                for (j, v) in b.cross.iter().enumerate() {
                                    let c: S = cross_values(v).iter().map(|&x| cross[a][j][x as usize]).sum();
                                    bias += h.beta[j] * c;
                                }
                                dot(projected[a].row(i), &s) * scale + bias
                            })
                            .collect())
                    })
                    .collect()
            }
            Scorer::Raw { index, inherent, cross } => {
                let dense = params.dense.as_ref().expect("raw scorer has dense params");
                let q_pad = pad_query(q, params.tables.inherent_dim() + params.tables.cross_dim());
                let (fresh_kh, h_dim) = if fresh {
                    (Some(assemble_k(window, &params.tables)?.0), params.tables.inherent_dim())
                } else {
                    (None, 0)
                };
                dense
                    .heads
                    .iter()
                    .enumerate()
                    .map(|(a, h)| {
                        let mut s = vecmat(&q_pad, &h.w_query)?;
                        for (x, &b) in s.iter_mut().zip(&h.query_bias) {
                            *x += b;
                        }
                        let e: Vec<Vec<S>> = cross[a]
                            .iter()
                            .map(|m| m.iter_rows().map(|r| dot(r, &s)).collect())
                            .collect();
                        let fresh_keys = match &fresh_kh {
                            Some(kh) => {
                                let d_key = h.w_key.cols();
                                let top = Matrix::new(h_dim, d_key, h.w_key.data()[..h_dim * d_key].to_vec())?;
                                Some(crate::numerics::matmul(kh, &top)?)
                            }
                            None => None,
                        };
                        window
                            .iter()
                            .enumerate()
                            .map(|(i, b)| {
                                let row = match &fresh_keys {
                                    Some(m) => m.row(i),
                                    None => {
                                        let r = *index
                                            .get(&b.video_id)
                                            .ok_or_else(|| Error::CacheMiss { ids: vec![b.video_id] })?;
                                        inherent[a].row(r)
                                    }
                                };
                                let mut acc = dot(row, &s);
                                for (j, v) in b.cross.iter().enumerate() {
                                    for &x in cross_values(v) {
                                        acc += e[j][x as usize];
                                    }
                                }
                                Ok(acc * h.scale)
                            })
                            .collect()
                    })
                    .collect()
            }
        }
    }

    /// Projected keys of the retrieved behaviors for the exact search (split variants).
    fn selected_keys(&self, ids: &[u64], kh: &Matrix<S>, params: &ModelParams<S>) -> Result<Vec<Matrix<S>>> {
        match &self.scorer {
            Scorer::Twin { cache, .. } => Ok(cache.lookup(ids, None)?.per_head),
            Scorer::Raw { .. } => params.twin.heads.iter().map(|h| project_inherent(kh, h)).collect(),
        }
    }
}

enum HeadAux<S> {
    /// Projected keys of the selected behaviors and `q W^q`.
    Twin { keys: Matrix<S>, s: Vec<S> },
    /// `s = q_pad W_q + b` and `W_k s`.
    Raw { s: Vec<S>, w: Vec<S> },
}

struct HeadTape<S> {
    aux: HeadAux<S>,
    probs: Vec<S>,
    u: Vec<S>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
pub struct Tape<S> {
    selected: Vec<BehaviorRecord>,
    recent: Vec<BehaviorRecord>,
    q: Vec<S>,
    kh: Matrix<S>,
    kc: Matrix<S>,
    k: Matrix<S>,
    heads: Vec<HeadTape<S>>,
    concat: Vec<S>,
    x: Vec<S>,
    /// Post-activation output of every hidden layer.
    acts: Vec<Vec<S>>,
    pub logit: S,
    pub prob: S,
}

fn relu<S: Real>(x: S) -> S {
    if x > S::zero() {
        x
    } else {
        S::zero()
    }
}

fn sigmoid<S: Real>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// `m v` for a row-major `m` (rows x cols) and `v` of length cols.
fn matvec<S: Real>(m: &Matrix<S>, v: &[S]) -> Vec<S> {
    m.iter_rows().map(|r| dot(r, v)).collect()
}

fn add_outer<S: Real>(m: &mut Matrix<S>, a: &[S], b: &[S]) {
    let cols = m.cols();
    for (r, &x) in a.iter().enumerate() {
        if x == S::zero() {
            continue;
        }
        for (o, &y) in m.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(b) {
            *o += x * y;
        }
    }
}

fn axpy<S: Real>(out: &mut [S], a: S, x: &[S]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Forward pass for one example.
pub fn forward<S: Real>(
    params: &ModelParams<S>,
    ctx: &BatchContext<S>,
    ex: &Example<'_>,
    gsu: &GsuSetup<'_, S>,
    short_term: usize,
) -> Result<Tape<S>> {
    if ex.history.is_empty() {
        return Err(Error::invalid("example has an empty behavior history"));
    }
    if ex.label > 1 {
        return Err(Error::invalid(format!("label {} is not binary", ex.label)));
    }
    let q = embed_target(ex.target, &params.tables)?;
    let start = gsu.input_len.map_or(0, |n| ex.history.len().saturating_sub(n));
    let window = &ex.history[start..];
    let positions = ctx.retrieve(params, &q, window, ex.target, gsu)?;
    let selected: Vec<BehaviorRecord> = positions.iter().map(|&i| window[i].clone()).collect();
    let (kh, kc) = assemble_k(&selected, &params.tables)?;
    let k = kh.hconcat(&kc)?;
    let ids: Vec<u64> = selected.iter().map(|b| b.video_id).collect();

    let mut heads = Vec::with_capacity(params.twin.config.n_heads);
    let mut concat = Vec::new();
    match &params.dense {
        None => {
            let keys = ctx.selected_keys(&ids, &kh, params)?;
            for (a, (h, keys)) in params.twin.heads.iter().zip(keys).enumerate() {
                let alpha = relevance_scores(&q, Keys::Projected(&keys), &kc, h)?;
                let (probs, u, o) = pool(alpha, &k, params.value_weights(a))?;
                concat.extend(o);
                heads.push(HeadTape {
                    aux: HeadAux::Twin {
                        keys,
                        s: project_query(&q, h)?,
                    },
                    probs,
                    u,
                });
            }
        }
        Some(dense) => {
            let q_pad = pad_query(&q, k.cols());
            for (a, h) in dense.heads.iter().enumerate() {
                let mut s = vecmat(&q_pad, &h.w_query)?;
                for (x, &b) in s.iter_mut().zip(&h.query_bias) {
                    *x += b;
                }
                let w = matvec(&h.w_key, &s);
                let alpha: Vec<S> = k.iter_rows().map(|r| dot(r, &w) * h.scale).collect();
                let (probs, u, o) = pool(alpha, &k, params.value_weights(a))?;
                concat.extend(o);
                heads.push(HeadTape {
                    aux: HeadAux::Raw { s, w },
                    probs,
                    u,
                });
            }
        }
    }
    let z = vecmat(&concat, params.out_weights())?;

    let mut x = z;
    x.extend_from_slice(&q);
    x.extend(ex.context.iter().map(|&c| S::lit(c)));
    let recent: Vec<BehaviorRecord> = if short_term > 0 {
        ex.history[ex.history.len().saturating_sub(short_term)..].to_vec()
    } else {
        Vec::new()
    };
    if short_term > 0 {
        let (rh, rc) = assemble_k(&recent, &params.tables)?;
        let n = S::from_count(recent.len());
        let mut st = vec![S::zero(); rh.cols() + rc.cols()];
        for i in 0..recent.len() {
            axpy(&mut st[..rh.cols()], n.recip(), rh.row(i));
            axpy(&mut st[rh.cols()..], n.recip(), rc.row(i));
        }
        x.extend(st);
    }
    let first = &params.mlp.layers[0];
    if x.len() != first.w.rows() {
        return Err(Error::shape("predictor input", first.w.rows(), x.len()));
    }

    let mut acts = Vec::new();
    let mut h = x.clone();
    let last = params.mlp.layers.len() - 1;
    for (i, layer) in params.mlp.layers.iter().enumerate() {
        let mut y = vecmat(&h, &layer.w)?;
        for (v, &b) in y.iter_mut().zip(&layer.b) {
            *v += b;
        }
        if i < last {
            y.iter_mut().for_each(|v| *v = relu(*v));
            acts.push(y.clone());
        }
        h = y;
    }
    let logit = h[0];
    Ok(Tape {
        selected,
        recent,
        q,
        kh,
        kc,
        k,
        heads,
        concat,
        x,
        acts,
        logit,
        prob: sigmoid(logit),
    })
}

/// Softmax weights, the weighted mean behavior `u` and the head output `u W^v`.
fn pool<S: Real>(mut alpha: Vec<S>, k: &Matrix<S>, w_value: &Matrix<S>) -> Result<(Vec<S>, Vec<S>, Vec<S>)> {
    softmax_in_place(&mut alpha)?;
    let mut u = vec![S::zero(); k.cols()];
    for (row, &p) in k.iter_rows().zip(&alpha) {
        axpy(&mut u, p, row);
    }
    let o = vecmat(&u, w_value)?;
    Ok((alpha, u, o))
}

fn scatter<S: Real>(grads: &mut EmbeddingTables<S>, cross: bool, values: &[FeatureValue], g: &[S]) {
    let n = if cross {
        grads.schema.n_cross()
    } else {
        grads.schema.n_inherent()
    };
    let mut offset = 0;
    for (j, value) in values.iter().enumerate().take(n) {
        let ti = if cross {
            grads.cross_table_index(j)
        } else {
            grads.inherent_table_index(j)
        };
        let table = &mut grads.tables_mut()[ti];
        let d = table.dim();
        for &v in value.as_slice() {
            for (o, &x) in table.column_mut(v as usize).iter_mut().zip(&g[offset..offset + d]) {
                *o += x;
            }
        }
        offset += d;
    }
}

/// Accumulates `d loss / d params` for one example into `grads`, given
/// `d loss / d logit`.
pub fn backward<S: Real>(
    params: &ModelParams<S>,
    ex: &Example<'_>,
    tape: &Tape<S>,
    g_logit: S,
    grads: &mut ModelParams<S>,
) -> Result<()> {
    // predictor
    let n_layers = params.mlp.layers.len();
    let mut g = vec![g_logit];
    for i in (0..n_layers).rev() {
        let input = if i == 0 { &tape.x } else { &tape.acts[i - 1] };
        let layer = &params.mlp.layers[i];
        let gl = &mut grads.mlp.layers[i];
        add_outer(&mut gl.w, input, &g);
        axpy(&mut gl.b, S::one(), &g);
        let mut g_in = matvec(&layer.w, &g);
        if i > 0 {
            for (gi, &a) in g_in.iter_mut().zip(&tape.acts[i - 1]) {
                if a <= S::zero() {
                    *gi = S::zero();
                }
            }
        }
        g = g_in;
    }
    let g_x = g;
    let out_dim = params.twin.config.output_dim;
    let h_dim = params.tables.inherent_dim();
    let c_dim = params.tables.cross_dim();
    let g_z = &g_x[..out_dim];
    let mut g_q = g_x[out_dim..out_dim + h_dim].to_vec();
    let st_start = out_dim + h_dim + ex.context.len();
    if !tape.recent.is_empty() {
        let n = S::from_count(tape.recent.len()).recip();
        let g_st: Vec<S> = g_x[st_start..].iter().map(|&v| v * n).collect();
        for b in &tape.recent {
            scatter(&mut grads.tables, false, &b.inherent, &g_st[..h_dim]);
            scatter(&mut grads.tables, true, &b.cross, &g_st[h_dim..]);
        }
    }

    // output projection
    let w_out = params.out_weights();
    let g_concat = matvec(w_out, g_z);
    match &mut grads.dense {
        Some(d) => add_outer(&mut d.w_out, &tape.concat, g_z),
        None => add_outer(&mut grads.twin.w_out, &tape.concat, g_z),
    }

    let m = tape.k.rows();
    let mut g_k = Matrix::<S>::zeros(m, h_dim + c_dim);
    let d_v = params.twin.config.d_v;
    for (a, ht) in tape.heads.iter().enumerate() {
        let g_o = &g_concat[a * d_v..(a + 1) * d_v];
        let w_value = params.value_weights(a);
        match &mut grads.dense {
            Some(d) => add_outer(&mut d.heads[a].w_value, &ht.u, g_o),
            None => add_outer(&mut grads.twin.heads[a].w_value, &ht.u, g_o),
        }
        let g_u = matvec(w_value, g_o);
        let g_p: Vec<S> = tape.k.iter_rows().map(|r| dot(r, &g_u)).collect();
        let mean: S = ht.probs.iter().zip(&g_p).map(|(&p, &gp)| p * gp).sum();
        let g_alpha: Vec<S> = ht.probs.iter().zip(&g_p).map(|(&p, &gp)| p * (gp - mean)).collect();
        for (i, &p) in ht.probs.iter().enumerate() {
            axpy(g_k.row_mut(i), p, &g_u);
        }

        match &ht.aux {
            HeadAux::Twin { keys, s } => {
                let head = &params.twin.heads[a];
                let gh = &mut grads.twin.heads[a];
                let scale = S::from_count(s.len()).sqrt().recip();
                let mut g_s = vec![S::zero(); s.len()];
                let mut g_kh_sum = vec![S::zero(); h_dim];
                for i in 0..m {
                    axpy(&mut g_s, g_alpha[i] * scale, keys.row(i));
                    axpy(&mut g_kh_sum, g_alpha[i], tape.kh.row(i));
                }
                let scaled_s: Vec<S> = s.iter().map(|&v| v * scale).collect();
                add_outer(&mut gh.w_key, &g_kh_sum, &scaled_s);
                let w_s = matvec(&head.w_key, &scaled_s);
                for i in 0..m {
                    axpy(&mut g_k.row_mut(i)[..h_dim], g_alpha[i], &w_s);
                }
                add_outer(&mut gh.w_query, &tape.q, &g_s);
                let g_q_head = matvec(&head.w_query, &g_s);
                axpy(&mut g_q, S::one(), &g_q_head);

                let compressed = compress_cross(&tape.kc, head)?;
                for j in 0..head.beta.len() {
                    let block = j * CROSS_DIM..(j + 1) * CROSS_DIM;
                    let mut g_beta = S::zero();
                    let mut g_block = [S::zero(); CROSS_DIM];
                    for i in 0..m {
                        g_beta += g_alpha[i] * compressed.get(i, j);
                        axpy(&mut g_block, g_alpha[i], &tape.kc.row(i)[block.clone()]);
                        let coef = g_alpha[i] * head.beta[j];
                        axpy(&mut g_k.row_mut(i)[h_dim + block.start..h_dim + block.end], coef, head.w_cross.row(j));
                    }
                    gh.beta[j] += g_beta;
                    axpy(gh.w_cross.row_mut(j), head.beta[j], &g_block);
                }
            }
            HeadAux::Raw { s, w } => {
                let head = &params.dense.as_ref().expect("raw tape").heads[a];
                let gh = &mut grads.dense.as_mut().expect("raw grads").heads[a];
                let mut g_ksum = vec![S::zero(); h_dim + c_dim];
                for i in 0..m {
                    axpy(&mut g_ksum, g_alpha[i] * head.scale, tape.k.row(i));
                    axpy(g_k.row_mut(i), g_alpha[i] * head.scale, w);
                }
                add_outer(&mut gh.w_key, &g_ksum, s);
                let g_s = vecmat(&g_ksum, &head.w_key)?;
                let q_pad = pad_query(&tape.q, h_dim + c_dim);
                add_outer(&mut gh.w_query, &q_pad, &g_s);
                axpy(&mut gh.query_bias, S::one(), &g_s);
                let g_qpad = matvec(&head.w_query, &g_s);
                axpy(&mut g_q, S::one(), &g_qpad[..h_dim]);
            }
        }
    }

    for (i, b) in tape.selected.iter().enumerate() {
        scatter(&mut grads.tables, false, &b.inherent, &g_k.row(i)[..h_dim]);
        scatter(&mut grads.tables, true, &b.cross, &g_k.row(i)[h_dim..]);
    }
    scatter(&mut grads.tables, false, &ex.target.inherent, &g_q);
    if params.variant == Variant::TwinNoBias {
        for h in &mut grads.twin.heads {
            h.beta.iter_mut().for_each(|b| *b = S::zero());
            h.w_cross.data_mut().iter_mut().for_each(|w| *w = S::zero());
        }
    }
    Ok(())
}

/// Mean log loss over `examples` and, optionally, its gradient.
pub fn batch_loss<S: Real>(
    params: &ModelParams<S>,
    ctx: &BatchContext<S>,
    examples: &[Example<'_>],
    gsu: &GsuSetup<'_, S>,
    short_term: usize,
    mut grads: Option<&mut ModelParams<S>>,
) -> Result<(S, Vec<S>, usize)> {
    let n = S::from_count(examples.len());
    let eps = S::lit(crate::training::metrics::PROB_CLAMP);
    let mut total = S::zero();
    let mut probs = Vec::with_capacity(examples.len());
    let mut clamped = 0;
    for ex in examples {
        let tape = forward(params, ctx, ex, gsu, short_term)?;
        let p = tape.prob;
        let c = p.max(eps).min(S::one() - eps);
        if c != p {
            clamped += 1;
        }
        total += if ex.label == 1 { -c.ln() } else { -(S::one() - c).ln() };
        if let Some(g) = grads.as_deref_mut() {
            let y = if ex.label == 1 { S::one() } else { S::zero() };
            backward(params, ex, &tape, (p - y) / n, g)?;
        }
        probs.push(p);
    }
    Ok((total / n, probs, clamped))
}
