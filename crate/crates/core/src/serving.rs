//! Deployment simulation: a versioned projection cache fed by a periodic
//! projector, a parameter-sync cadence with drifting parameters, and an
//! analytic plus measured multiply-add model of online scoring.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{dense_relevance, pad_query, project_inherent, AttentionConfig, TwinParams};
use crate::datagen::{generate_world, sub_rng, World, WorldConfig};
use crate::error::{Error, Result};
use crate::features::{assemble_k, embed_target, BehaviorRecord, EmbeddingTable, EmbeddingTables, FeatureSchema, FeatureValue, CROSS_DIM};
use crate::numerics::flops::{self, Tally};
use crate::numerics::{vecmat, Matrix};
use crate::attention::RelevanceScores;
use crate::numerics::topk_indices;
use crate::retrieval::{
    cp_gsu_retrieve, hard_gsu, hard_gsu_ranking, hit_rate, hit_rate_curve, mean_stderr, round_robin_union, soft_gsu, CurveCase,
    CurvePoint, GsuKind, KeySource, RetrievalResult,
};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VirtualClock {
    now: f64,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn advance_to(&mut self, t: f64) -> Result<()> {
        if !(t >= self.now) {
            return Err(Error::invalid(format!("clock cannot move back from {} to {t}", self.now)));
        }
        self.now = t;
        Ok(())
    }
}

/// Virtual-minute cadence of parameter syncs and cache refreshes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyncSchedule {
    pub param_sync_period: f64,
    /// 0 refreshes the cache before every request.
    pub cache_refresh_period: f64,
    pub coverage_fraction: f64,
}

impl Default for SyncSchedule {
    fn default() -> Self {
        Self {
            param_sync_period: 5.0,
            cache_refresh_period: 15.0,
            coverage_fraction: 0.97,
        }
    }
}

impl SyncSchedule {
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if !(self.param_sync_period > 0.0) {
            errors.push("param_sync_period must be positive".to_string());
        }
        if !(self.cache_refresh_period >= 0.0) {
            errors.push("cache_refresh_period must be non-negative".to_string());
        }
        if !(self.coverage_fraction > 0.0 && self.coverage_fraction <= 1.0) {
            errors.push("coverage_fraction must lie in (0, 1]".to_string());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoveragePolicy {
    Strict,
    #[default]
    ComputeOnMiss,
}

/// Candidate videos with their inherent rows, most popular first.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoPool<S> {
    pub ids: Vec<u64>,
    pub kh: Matrix<S>,
}

impl<S: Real> VideoPool<S> {
    pub fn new(ids: Vec<u64>, kh: Matrix<S>) -> Result<Self> {
        if ids.len() != kh.rows() {
            return Err(Error::shape("VideoPool", ids.len(), kh.rows()));
        }
        Ok(Self { ids, kh })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of ids a cache with `coverage` holds.
    pub fn covered(&self, coverage: f64) -> usize {
        ((coverage * self.len() as f64).ceil() as usize).min(self.len())
    }
}

/// One immutable published cache version.
#[derive(Debug)]
pub struct CacheVersion<S> {
    pub version: u64,
    pub built_at: f64,
    /// Identifies the (parameters, pool) snapshot the rows were computed from.
    pub params_version: u64,
    pub n_heads: usize,
    pub d_k: usize,
    index: HashMap<u64, usize>,
    /// Per id: the concatenated per-head `K_h W^h` rows, `n_heads * d_k` wide.
    rows: Arc<Matrix<S>>,
}

impl<S: Real> CacheVersion<S> {
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.index.contains_key(&id)
    }

    pub fn get(&self, id: u64) -> Option<&[S]> {
        self.index.get(&id).map(|&r| self.rows.row(r))
    }
}

/// Raw rows used to project missed ids under [`CoveragePolicy::ComputeOnMiss`].
#[derive(Debug, Clone, Copy)]
pub struct Fallback<'a, S> {
    /// Row `i` belongs to the `i`-th looked-up id.
    pub kh: &'a Matrix<S>,
    pub params: &'a TwinParams<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lookup<S> {
    /// One L x d_k matrix per head.
    pub per_head: Vec<Matrix<S>>,
    pub miss_count: usize,
    pub version: u64,
    pub built_at: f64,
    /// Multiply-adds spent projecting missed ids.
    pub miss_macs: u64,
}

/// Key-value store of projected inherent features. One writer publishes whole
/// versions; readers take one version handle per lookup.
#[derive(Debug)]
pub struct ProjectionCache<S> {
    pub policy: CoveragePolicy,
    published: RwLock<Option<Arc<CacheVersion<S>>>>,
}

impl<S: Real> ProjectionCache<S> {
    pub fn new(policy: CoveragePolicy) -> Self {
        Self {
            policy,
            published: RwLock::new(None),
        }
    }

    /// The newest published version.
    pub fn snapshot(&self) -> Result<Arc<CacheVersion<S>>> {
        self.published
            .read()
            .expect("cache lock poisoned")
            .clone()
            .ok_or_else(|| Error::invalid("projection cache has no published version"))
    }

    pub fn version(&self) -> u64 {
        self.published
            .read()
            .expect("cache lock poisoned")
            .as_ref()
            .map_or(0, |v| v.version)
    }

    /// Projects the `coverage` most popular ids of `pool` and publishes them as
    /// the next version. If the previous version was built from the same
    /// `params_version` and coverage, its rows are republished unchanged.
    pub fn refresh(
        &self,
        params: &TwinParams<S>,
        params_version: u64,
        pool: &VideoPool<S>,
        coverage: f64,
        now: f64,
    ) -> Result<u64> {
        let previous = self.published.read().expect("cache lock poisoned").clone();
        let n = pool.covered(coverage);
        let (n_heads, d_k) = (params.config.n_heads, params.config.d_k);
        let rows = match &previous {
            Some(p) if p.params_version == params_version && p.len() == n => Arc::clone(&p.rows),
            _ => {
                let covered = pool.kh.select_rows(&(0..n).collect::<Vec<_>>());
                let mut rows = Matrix::zeros(n, n_heads * d_k);
                for (a, head) in params.heads.iter().enumerate() {
                    let projected = project_inherent(&covered, head)?;
                    for r in 0..n {
                        rows.row_mut(r)[a * d_k..(a + 1) * d_k].copy_from_slice(projected.row(r));
                    }
                }
                Arc::new(rows)
            }
        };
        let index = pool.ids[..n].iter().enumerate().map(|(r, &id)| (id, r)).collect();
        let version = previous.map_or(1, |p| p.version + 1);
        let built = Arc::new(CacheVersion {
            version,
            built_at: now,
            params_version,
            n_heads,
            d_k,
            index,
            rows,
        });
        *self.published.write().expect("cache lock poisoned") = Some(built);
        Ok(version)
    }

    /// Gathers per-head projected keys for `ids`. Gathering is recorded as one
    /// read per id, independent of the number of heads.
    pub fn lookup(&self, ids: &[u64], fallback: Option<Fallback<'_, S>>) -> Result<Lookup<S>> {
        let v = self.snapshot()?;
        flops::add_reads(ids.len());
        let missed: Vec<usize> = (0..ids.len()).filter(|&i| !v.contains(ids[i])).collect();
        if !missed.is_empty() && self.policy == CoveragePolicy::Strict {
            return Err(Error::CacheMiss {
                ids: missed.iter().map(|&i| ids[i]).collect(),
            });
        }
        let mut per_head = vec![Matrix::zeros(ids.len(), v.d_k); v.n_heads];
        for (i, &id) in ids.iter().enumerate() {
            if let Some(row) = v.get(id) {
                for (a, m) in per_head.iter_mut().enumerate() {
                    m.row_mut(i).copy_from_slice(&row[a * v.d_k..(a + 1) * v.d_k]);
                }
            }
        }
        let mut miss_macs = 0;
        if !missed.is_empty() {
            let fb = fallback.ok_or_else(|| Error::invalid("compute-on-miss lookup needs fallback rows"))?;
            if fb.kh.rows() != ids.len() {
                return Err(Error::shape("lookup fallback", ids.len(), fb.kh.rows()));
            }
            let (res, tally) = flops::measure(|| -> Result<()> {
                for &i in &missed {
                    for (a, head) in fb.params.heads.iter().enumerate() {
                        let p = vecmat(fb.kh.row(i), &head.w_key)?;
                        per_head[a].row_mut(i).copy_from_slice(&p);
                    }
                }
                Ok(())
            });
            res?;
            miss_macs = tally.macs;
        }
        Ok(Lookup {
            per_head,
            miss_count: missed.len(),
            version: v.version,
            built_at: v.built_at,
            miss_macs,
        })
    }
}

/// Sizes entering the multiply-add model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopModel {
    pub l: usize,
    pub h: usize,
    pub c: usize,
    pub j: usize,
    pub d_k: usize,
    pub d_out: usize,
    pub n_heads: usize,
}

/// Itemized cost of scoring one request (all heads).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FlopBreakdown {
    pub key_projection: u64,
    pub score_dot: u64,
    pub cross_compression: u64,
    pub bias: u64,
    pub query_projection: u64,
    /// Memory reads, not multiply-adds.
    pub gather_reads: u64,
}

impl FlopBreakdown {
    /// Every multiply-add; what the instrumented kernels report.
    pub fn macs(&self) -> u64 {
        self.key_projection + self.score_dot + self.cross_compression + self.bias + self.query_projection
    }
}

impl FlopModel {
    pub fn new(l: usize, h: usize, j: usize, d_k: usize, d_out: usize, n_heads: usize) -> Self {
        Self {
            l,
            h,
            c: CROSS_DIM * j,
            j,
            d_k,
            d_out,
            n_heads,
        }
    }

    pub fn from_attention(cfg: &AttentionConfig, l: usize) -> Self {
        Self::new(l, cfg.inherent_dim, cfg.n_cross, cfg.d_k, cfg.d_out, cfg.n_heads)
    }

    pub fn standard(l: usize) -> Self {
        Self::from_attention(&AttentionConfig::standard(), l)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        for (name, v) in [("h", self.h), ("d_k", self.d_k), ("d_out", self.d_out), ("n_heads", self.n_heads)] {
            if v == 0 {
                errors.push(format!("{name} must be positive"));
            }
        }
        if self.c != CROSS_DIM * self.j {
            errors.push(format!("c must equal {CROSS_DIM} * j"));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    fn n(&self) -> u64 {
        self.n_heads as u64
    }

    /// Conventional attention: project every `[K_h K_c]` row per head.
    pub fn raw_breakdown(&self) -> FlopBreakdown {
        let (l, w, d) = (self.l as u64, (self.h + self.c) as u64, self.d_out as u64);
        FlopBreakdown {
            key_projection: self.n() * l * w * d,
            score_dot: self.n() * l * d,
            query_projection: self.n() * w * d,
            ..FlopBreakdown::default()
        }
    }

    /// Split scoring with gathered `K_h W^h`.
    pub fn twin_breakdown(&self) -> FlopBreakdown {
        let l = self.l as u64;
        FlopBreakdown {
            score_dot: self.n() * l * self.d_k as u64,
            cross_compression: self.n() * l * self.c as u64,
            bias: self.n() * l * self.j as u64,
            query_projection: self.n() * (self.h * self.d_k) as u64,
            gather_reads: l,
            ..FlopBreakdown::default()
        }
    }
}

/// `n_heads * L * (H + C) * d_out`; the `L * d_out` dot term is itemized in
/// [`FlopModel::raw_breakdown`].
pub fn flops_raw(model: &FlopModel) -> u64 {
    model.raw_breakdown().key_projection
}

/// `n_heads * (L*d_k + L*C + L*J)`; gathering costs no multiply-adds.
pub fn flops_twin_online(model: &FlopModel) -> u64 {
    let b = model.twin_breakdown();
    b.score_dot + b.cross_compression + b.bias
}

/// `1 - twin / raw` over the sequence-length-dependent terms.
pub fn reduction_ratio(model: &FlopModel) -> f64 {
    1.0 - flops_twin_online(model) as f64 / flops_raw(model) as f64
}

/// Online relevance under every head from cached projections.
pub fn twin_online_scores<S: Real>(
    cache: &ProjectionCache<S>,
    ids: &[u64],
    q: &[S],
    kc: &Matrix<S>,
    params: &TwinParams<S>,
    fallback: Option<Fallback<'_, S>>,
) -> Result<(RelevanceScores<S>, Lookup<S>)> {
    let lookup = cache.lookup(ids, fallback)?;
    let scores = crate::retrieval::score_all_heads(q, KeySource::Projected(&lookup.per_head), kc, params)?;
    Ok((scores, lookup))
}

/// Runs the split path on a random instance of `model` and returns its tally.
pub fn measure_twin<R: Rng>(model: &FlopModel, rng: &mut R) -> Result<Tally> {
    let cfg = AttentionConfig::new(model.h, model.j, model.d_k, model.d_k, model.n_heads);
    let params = TwinParams::<f64>::random(cfg, rng);
    let ids: Vec<u64> = (0..model.l as u64).collect();
    let kh = Matrix::from_fn(model.l, model.h, |_, _| rng.random_range(-1.0..1.0));
    let kc = Matrix::from_fn(model.l, model.c, |_, _| rng.random_range(-1.0..1.0));
    let q: Vec<f64> = (0..model.h).map(|_| rng.random_range(-1.0..1.0)).collect();
    let cache = ProjectionCache::new(CoveragePolicy::Strict);
    cache.refresh(&params, 0, &VideoPool::new(ids.clone(), kh)?, 1.0, 0.0)?;
    if model.l == 0 {
        return Ok(Tally::default());
    }
    let (res, tally) = flops::measure(|| twin_online_scores(&cache, &ids, &q, &kc, &params, None));
    res?;
    Ok(tally)
}

/// Runs conventional dense scoring (key width `d_out`) on a random instance.
pub fn measure_raw<R: Rng>(model: &FlopModel, rng: &mut R) -> Result<Tally> {
    let cfg = AttentionConfig::new(model.h, model.j, model.d_out, model.d_out, model.n_heads);
    let dense = crate::attention::DenseMhtaParams::<f64>::random(&cfg, rng);
    let k = Matrix::from_fn(model.l, model.h + model.c, |_, _| rng.random_range(-1.0..1.0));
    let q: Vec<f64> = (0..model.h).map(|_| rng.random_range(-1.0..1.0)).collect();
    let q_pad = pad_query(&q, model.h + model.c);
    let (res, tally) = flops::measure(|| {
        dense
            .heads
            .iter()
            .map(|h| dense_relevance(&q_pad, &k, h))
            .collect::<Result<Vec<_>>>()
    });
    res?;
    Ok(tally)
}

/// A full serving scenario: synthetic world, drifting parameters and a request stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub schedule: SyncSchedule,
    /// Per-element random-walk scale per sqrt(virtual minute).
    pub drift_rate: f64,
    pub n_requests: usize,
    pub duration_minutes: f64,
    pub k: usize,
    pub policy: CoveragePolicy,
    pub id_dim: usize,
    pub d_k: usize,
    pub n_heads: usize,
    /// Weight of the topic centroid in id and author embeddings.
    pub topic_weight: f64,
    /// Per-video noise added to the centroid.
    pub id_noise: f64,
    pub world: WorldConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            schedule: SyncSchedule::default(),
            drift_rate: 0.004,
            n_requests: 1_000,
            duration_minutes: 120.0,
            k: crate::retrieval::DEFAULT_K,
            policy: CoveragePolicy::ComputeOnMiss,
            id_dim: 64,
            d_k: 32,
            n_heads: 4,
            topic_weight: 1.0,
            id_noise: 0.5,
            world: WorldConfig {
                n_users: 40,
                n_videos: 2_000,
                n_latent_topics: 74,
                n_authors: 296,
                mean_behaviors: 1_000,
                min_behaviors: 500,
                max_behaviors: 2_000,
                ..WorldConfig::default()
            },
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        for r in [self.schedule.validate(), self.world.validate()] {
            if let Err(Error::Config(e)) = r {
                errors.extend(e);
            }
        }
        if !(self.drift_rate >= 0.0) {
            errors.push("drift_rate must be non-negative".into());
        }
        if !(self.duration_minutes > 0.0) {
            errors.push("duration_minutes must be positive".into());
        }
        for (name, v) in [("k", self.k), ("id_dim", self.id_dim), ("d_k", self.d_k), ("n_heads", self.n_heads)] {
            if v == 0 {
                errors.push(format!("{name} must be positive"));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub request: usize,
    pub user: u32,
    pub target: u64,
    pub time: f64,
    pub param_version: u64,
    pub cache_version: u64,
    pub staleness: f64,
    pub seq_len: usize,
    pub misses: usize,
    pub hit_twin: f64,
    pub hit_soft: f64,
    pub hit_hard: f64,
    pub twin_macs: u64,
    pub gather_reads: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStderr {
    pub mean: f64,
    pub stderr: f64,
}

impl MeanStderr {
    pub fn of(xs: &[f64]) -> Self {
        let (mean, stderr) = mean_stderr(xs);
        Self { mean, stderr }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub seed: u64,
    pub requests: usize,
    pub hit_twin: MeanStderr,
    pub hit_soft: MeanStderr,
    pub hit_hard: MeanStderr,
    pub mean_staleness: f64,
    pub max_staleness: f64,
    pub total_misses: usize,
    pub refreshes: u64,
    pub param_syncs: u64,
    pub twin_macs: u64,
    pub raw_macs_analytic: u64,
    pub gather_reads: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioReport {
    pub records: Vec<RequestRecord>,
    pub summary: ScenarioSummary,
}

fn perturb<R: Rng>(data: &mut [f64], noise: &Normal<f64>, rng: &mut R) {
    for x in data {
        *x += noise.sample(rng);
    }
}

fn drift_step<R: Rng>(tables: &mut EmbeddingTables<f64>, params: &mut TwinParams<f64>, sigma: f64, rng: &mut R) {
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    for t in tables.tables_mut() {
        perturb(t.storage_mut().data_mut(), &noise, rng);
    }
    for h in &mut params.heads {
        perturb(h.w_query.data_mut(), &noise, rng);
        perturb(h.w_key.data_mut(), &noise, rng);
        perturb(h.w_cross.data_mut(), &noise, rng);
        perturb(&mut h.beta, &noise, rng);
        perturb(h.w_value.data_mut(), &noise, rng);
    }
    perturb(params.w_out.data_mut(), &noise, rng);
}

/// Embeddings where videos and authors sit near a per-topic centroid, so that
/// attention relevance reflects topical similarity.
fn structured_tables<R: Rng>(world: &World, schema: FeatureSchema, cfg: &ScenarioConfig, rng: &mut R) -> Result<EmbeddingTables<f64>> {
    let mut tables = EmbeddingTables::<f64>::random(schema, 0.3, rng)?;
    let n_topics = world.config.n_latent_topics;
    for (name, topic_of) in [
        ("video_id", world.videos.iter().map(|v| v.topic as usize).collect::<Vec<_>>()),
        (
            "author_id",
            (0..world.config.n_authors).map(|a| a % n_topics).collect::<Vec<_>>(),
        ),
    ] {
        let idx = tables
            .tables()
            .iter()
            .position(|t| t.name == name)
            .expect("standard schema");
        let dim = tables.tables()[idx].dim();
        let scale = (dim as f64).powf(-0.5);
        let centroids = Normal::new(0.0, scale * cfg.topic_weight).unwrap();
        let centroid: Vec<Vec<f64>> = (0..n_topics)
            .map(|_| (0..dim).map(|_| centroids.sample(rng)).collect())
            .collect();
        let noise = Normal::new(0.0, scale * cfg.id_noise).unwrap();
        let table = &mut tables.tables_mut()[idx];
        for (v, &t) in topic_of.iter().enumerate() {
            for (x, &c) in table.column_mut(v).iter_mut().zip(&centroid[t]) {
                *x = c + noise.sample(rng);
            }
        }
    }
    Ok(tables)
}

fn pool_from(world: &World, order: &[u64], tables: &EmbeddingTables<f64>) -> Result<VideoPool<f64>> {
    let mut kh = Matrix::zeros(order.len(), tables.inherent_dim());
    for (r, &id) in order.iter().enumerate() {
        tables.inherent_row(&world.videos[id as usize].inherent(), kh.row_mut(r))?;
    }
    VideoPool::new(order.to_vec(), kh)
}

fn category(b: &BehaviorRecord) -> u32 {
    match b.inherent[2] {
        FeatureValue::One(c) => c,
        FeatureValue::Multi(_) => unreachable!("category is one-hot"),
    }
}

/// What every GSU retrieved for one simulated request.
pub struct RequestView<'a> {
    pub twin: &'a RetrievalResult<f64>,
    pub oracle: &'a RetrievalResult<f64>,
    pub soft: &'a RetrievalResult<f64>,
    pub target_category: u32,
    pub categories: &'a [u32],
    pub event_times: &'a [f64],
}

impl RequestView<'_> {
    /// Full ranking of the sequence by `kind`; its first `n` entries are that GSU's top-`n`.
    pub fn ranking(&self, kind: GsuKind) -> Vec<usize> {
        let l = self.categories.len();
        match kind {
            GsuKind::TwinCp => round_robin_union(&self.twin.per_head_scores.per_head, l).0,
            GsuKind::Oracle => round_robin_union(&self.oracle.per_head_scores.per_head, l).0,
            GsuKind::SimSoft => topk_indices(&self.soft.per_head_scores.per_head[0], l),
            GsuKind::SimHard => hard_gsu_ranking(self.target_category, self.categories, self.event_times),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodCurve {
    pub method: GsuKind,
    pub points: Vec<CurvePoint>,
}

/// Hit rate of each GSU's top-`n` against the oracle top-`k`, over the
/// scenario's requests.
pub fn consistency_curves(cfg: &ScenarioConfig, seed: u64, n_values: &[usize]) -> Result<Vec<MethodCurve>> {
    let kinds = [GsuKind::TwinCp, GsuKind::SimSoft, GsuKind::SimHard, GsuKind::Oracle];
    let mut cases: Vec<Vec<CurveCase>> = vec![Vec::new(); kinds.len()];
    simulate(cfg, seed, &mut |view| {
        for (kind, out) in kinds.iter().zip(&mut cases) {
            out.push(CurveCase {
                ranking: view.ranking(*kind),
                oracle: view.oracle.indices.clone(),
            });
        }
        Ok(())
    })?;
    kinds
        .iter()
        .zip(&cases)
        .map(|(&method, c)| {
            Ok(MethodCurve {
                method,
                points: hit_rate_curve(n_values, c)?,
            })
        })
        .collect()
}

/// Simulates the request stream. CP-GSU scores with cached (possibly stale)
/// projections; the oracle uses the latest synced parameters with freshly
/// projected keys; SIM Soft uses video embeddings frozen at time 0.
pub fn run_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<ScenarioReport> {
    simulate(cfg, seed, &mut |_| Ok(()))
}

fn simulate(
    cfg: &ScenarioConfig,
    seed: u64,
    on_request: &mut dyn FnMut(&RequestView<'_>) -> Result<()>,
) -> Result<ScenarioReport> {
    cfg.validate()?;
    let world_cfg = WorldConfig {
        seed,
        ..cfg.world.clone()
    };
    let world = generate_world(&world_cfg)?;
    let mut rng = sub_rng(seed, 0x5e, 0);
    let schema = FeatureSchema::standard_with_id_dim(world_cfg.vocab(), cfg.id_dim);
    let mut tables = structured_tables(&world, schema.clone(), cfg, &mut rng)?;
    let att = AttentionConfig::new(schema.inherent_dim(), schema.n_cross(), cfg.d_k, cfg.d_k, cfg.n_heads);
    let mut params = TwinParams::<f64>::random(att, &mut rng);
    for h in &mut params.heads {
        h.w_query = h.w_key.clone();
    }
    let frozen: EmbeddingTable<f64> = tables.table("video_id").expect("standard schema").clone();

    let mut order: Vec<u64> = (0..world.videos.len() as u64).collect();
    order.sort_by_key(|&id| world.videos[id as usize].popularity_rank);
    let mut pool_row = vec![0usize; world.videos.len()];
    for (r, &id) in order.iter().enumerate() {
        pool_row[id as usize] = r;
    }
    let histories: Vec<Vec<BehaviorRecord>> = world
        .users
        .iter()
        .map(|u| world.generate_behaviors(u, u.length))
        .collect();

    let mut times: Vec<f64> = (0..cfg.n_requests)
        .map(|_| rng.random_range(0.0..cfg.duration_minutes))
        .collect();
    times.sort_by(f64::total_cmp);

    let schedule = cfg.schedule;
    let sigma = cfg.drift_rate * schedule.param_sync_period.sqrt();
    let cache = ProjectionCache::new(cfg.policy);
    let mut pool = pool_from(&world, &order, &tables)?;
    let mut param_version = 0u64;
    let mut refreshes = 1u64;
    cache.refresh(&params, param_version, &pool, schedule.coverage_fraction, 0.0)?;
    let mut clock = VirtualClock::new();
    let mut next_sync = schedule.param_sync_period;
    let mut next_refresh = if schedule.cache_refresh_period > 0.0 {
        schedule.cache_refresh_period
    } else {
        f64::INFINITY
    };
    let mut oracle_keys: Option<(u64, Vec<Matrix<f64>>)> = None;
    let mut records = Vec::with_capacity(cfg.n_requests);

    for (request, &t) in times.iter().enumerate() {
        clock.advance_to(t)?;
        while next_sync.min(next_refresh) <= t {
            if next_sync <= next_refresh {
                if cfg.drift_rate > 0.0 {
                    drift_step(&mut tables, &mut params, sigma, &mut rng);
                    pool = pool_from(&world, &order, &tables)?;
                }
                param_version += 1;
                next_sync += schedule.param_sync_period;
            } else {
                cache.refresh(&params, param_version, &pool, schedule.coverage_fraction, next_refresh)?;
                refreshes += 1;
                next_refresh += schedule.cache_refresh_period;
            }
        }
        if schedule.cache_refresh_period == 0.0 {
            cache.refresh(&params, param_version, &pool, schedule.coverage_fraction, t)?;
            refreshes += 1;
        }

        let user = &world.users[rng.random_range(0..world.users.len())];
        let history = &histories[user.id as usize];
        let target = if rng.random_bool(world.config.on_interest_targets) {
            let (topic, _) = user.enjoyment[rng.random_range(0..user.enjoyment.len())];
            world.sample_video(topic, &mut rng)
        } else {
            rng.random_range(0..world.videos.len() as u32)
        };
        let target = &world.videos[target as usize];
        let ids: Vec<u64> = history.iter().map(|b| b.video_id).collect();
        let (_, kc) = assemble_k(history, &tables)?;
        let rows: Vec<usize> = ids.iter().map(|&id| pool_row[id as usize]).collect();
        let kh = pool.kh.select_rows(&rows);
        let q = embed_target(&target.as_target(), &tables)?;

        let (online, tally) = flops::measure(|| {
            twin_online_scores(&cache, &ids, &q, &kc, &params, Some(Fallback { kh: &kh, params: &params }))
        });
        let (scores, lookup) = online?;
        let twin = cp_gsu_retrieve(&q, KeySource::Projected(&lookup.per_head), &kc, &params, cfg.k)?;
        debug_assert_eq!(twin.per_head_scores, scores);

        if oracle_keys.as_ref().is_none_or(|(v, _)| *v != param_version) {
            let fresh = params
                .heads
                .iter()
                .map(|h| project_inherent(&pool.kh, h))
                .collect::<Result<Vec<_>>>()?;
            oracle_keys = Some((param_version, fresh));
        }
        let fresh: Vec<Matrix<f64>> = oracle_keys.as_ref().unwrap().1.iter().map(|m| m.select_rows(&rows)).collect();
        let oracle = cp_gsu_retrieve(&q, KeySource::Projected(&fresh), &kc, &params, cfg.k)?;

        let soft = soft_gsu::<f64>(u64::from(target.id), &ids, &frozen, cfg.k)?;
        let cats: Vec<u32> = history.iter().map(category).collect();
        let event_times: Vec<f64> = history.iter().map(|b| b.event_time).collect();
        let hard = hard_gsu::<f64>(target.category, &cats, &event_times, cfg.k)?;
        on_request(&RequestView {
            twin: &twin,
            oracle: &oracle,
            soft: &soft,
            target_category: target.category,
            categories: &cats,
            event_times: &event_times,
        })?;

        records.push(RequestRecord {
            request,
            user: user.id,
            target: u64::from(target.id),
            time: t,
            param_version,
            cache_version: lookup.version,
            staleness: t - lookup.built_at,
            seq_len: ids.len(),
            misses: lookup.miss_count,
            hit_twin: hit_rate(&twin.indices, &oracle.indices),
            hit_soft: hit_rate(&soft.indices, &oracle.indices),
            hit_hard: hit_rate(&hard.indices, &oracle.indices),
            twin_macs: tally.macs,
            gather_reads: tally.reads,
        });
    }

    let col = |f: fn(&RequestRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
    let summary = ScenarioSummary {
        seed,
        requests: records.len(),
        hit_twin: MeanStderr::of(&col(|r| r.hit_twin)),
        hit_soft: MeanStderr::of(&col(|r| r.hit_soft)),
        hit_hard: MeanStderr::of(&col(|r| r.hit_hard)),
        mean_staleness: MeanStderr::of(&col(|r| r.staleness)).mean,
        max_staleness: records.iter().map(|r| r.staleness).fold(0.0, f64::max),
        total_misses: records.iter().map(|r| r.misses).sum(),
        refreshes,
        param_syncs: param_version,
        twin_macs: records.iter().map(|r| r.twin_macs).sum(),
        raw_macs_analytic: records
            .iter()
            .map(|r| {
                let b = FlopModel::from_attention(&params.config, r.seq_len).raw_breakdown();
                b.macs()
            })
            .sum(),
        gather_reads: records.iter().map(|r| r.gather_reads).sum(),
    };
    Ok(ScenarioReport { records, summary })
}
