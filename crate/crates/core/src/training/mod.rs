//! Desk-scale CTR training around the two-stage attention.

pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::{sub_rng, SyntheticLog};
use crate::error::{Error, Result};
use crate::features::{BehaviorRecord, EmbeddingTable, FeatureSchema, TargetItem};
use crate::retrieval::GsuKind;
use crate::scalar::Real;

pub use metrics::{auc, gauc, log_loss, Gauc};
pub use model::{Catalog, Example, GsuSetup, ModelConfig, ModelParams, Variant};
pub use optim::{AdaGrad, Adam, OptimConfig};

use model::{batch_loss, BatchContext};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Index into [`Dataset::histories`].
    pub user: usize,
    pub target: TargetItem,
    pub context: Vec<f64>,
    pub label: u8,
}

/// Behavior histories plus a per-user train/test split of labeled targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub user_ids: Vec<u32>,
    pub histories: Vec<Vec<BehaviorRecord>>,
    pub catalog: Catalog,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    /// The last `test_per_user` samples of every user go to the test split.
    pub fn from_log(log: &SyntheticLog, schema: FeatureSchema, test_per_user: usize) -> Result<Self> {
        let user_ids: Vec<u32> = log.users.iter().map(|u| u.user_id).collect();
        let histories: Vec<Vec<BehaviorRecord>> = log.users.iter().map(|u| u.behaviors.clone()).collect();
        let slot: std::collections::HashMap<u32, usize> = user_ids.iter().enumerate().map(|(i, &u)| (u, i)).collect();
        let mut per_user: Vec<Vec<Sample>> = vec![Vec::new(); user_ids.len()];
        for s in &log.samples {
            let &user = slot
                .get(&s.user_id)
                .ok_or_else(|| Error::invalid(format!("sample for unknown user {}", s.user_id)))?;
            if histories[user].is_empty() {
                return Err(Error::invalid(format!("user {} has no behaviors", s.user_id)));
            }
            per_user[user].push(Sample {
                user,
                target: s.target.clone(),
                context: s.context.clone(),
                label: s.label,
            });
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for samples in per_user {
            let cut = samples.len().saturating_sub(test_per_user);
            for (i, s) in samples.into_iter().enumerate() {
                if i < cut {
                    train.push(s)
                } else {
                    test.push(s)
                }
            }
        }
        let catalog = Catalog::from_items(
            histories
                .iter()
                .flatten()
                .map(|b| (b.video_id, &b.inherent[..]))
                .chain(train.iter().chain(&test).map(|s| (s.target.video_id, &s.target.inherent[..]))),
        );
        Ok(Self {
            schema,
            user_ids,
            histories,
            catalog,
            train,
            test,
        })
    }

    pub fn context_dim(&self) -> usize {
        self.train.first().or(self.test.first()).map_or(0, |s| s.context.len())
    }

    pub fn example<'a>(&'a self, s: &'a Sample) -> Example<'a> {
        Example {
            history: &self.histories[s.user],
            target: &s.target,
            context: &s.context,
            label: s.label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub gsu: GsuKind,
    pub k: usize,
    /// Search only the most recent `n` behaviors.
    pub gsu_input_len: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            gsu: GsuKind::TwinCp,
            k: crate::retrieval::DEFAULT_K,
            gsu_input_len: None,
            epochs: 1,
            batch_size: 256,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        for (name, v) in [
            ("k", self.k),
            ("batch_size", self.batch_size),
            ("model.id_dim", self.model.id_dim),
            ("model.d_k", self.model.d_k),
            ("model.d_v", self.model.d_v),
            ("model.n_heads", self.model.n_heads),
            ("model.output_dim", self.model.output_dim),
        ] {
            if v == 0 {
                errors.push(format!("{name} must be positive"));
            }
        }
        if self.gsu_input_len == Some(0) {
            errors.push("gsu_input_len must be positive".into());
        }
        if self.model.hidden.contains(&0) {
            errors.push("model.hidden sizes must be positive".into());
        }
        for (name, v) in [("optim.embedding_lr", self.optim.embedding_lr), ("optim.dense_lr", self.optim.dense_lr)] {
            if !(v >= 0.0) {
                errors.push(format!("{name} must be non-negative"));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn gsu_setup<'a, S>(&self, pretrained: Option<&'a EmbeddingTable<S>>) -> GsuSetup<'a, S> {
        GsuSetup {
            kind: self.gsu,
            k: self.k,
            input_len: self.gsu_input_len,
            pretrained,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub auc: f64,
    pub gauc: f64,
    pub users_used: usize,
    pub users_excluded: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub auc: f64,
    pub gauc: Gauc,
    pub predictions: Vec<f64>,
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput<S> {
    pub params: ModelParams<S>,
    pub trace: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// Video embeddings after the first epoch, usable as SIM Soft's frozen table.
    pub warmup_video_table: Option<EmbeddingTable<S>>,
    pub clamp_warnings: usize,
}

const STREAM_INIT: u64 = 11;
const STREAM_SHUFFLE: u64 = 12;

pub fn init_params<S: Real>(data: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<ModelParams<S>> {
    let mut rng = sub_rng(seed, STREAM_INIT, 0);
    ModelParams::init(data.schema.clone(), &cfg.model, data.context_dim(), &mut rng)
}

pub fn evaluate<S: Real>(
    params: &ModelParams<S>,
    data: &Dataset,
    samples: &[Sample],
    cfg: &TrainConfig,
    pretrained: Option<&EmbeddingTable<S>>,
) -> Result<Evaluation> {
    let ctx = BatchContext::build(params, &data.catalog, u64::MAX)?;
    let examples: Vec<Example<'_>> = samples.iter().map(|s| data.example(s)).collect();
    let (loss, probs, clamped) = batch_loss(params, &ctx, &examples, &cfg.gsu_setup(pretrained), cfg.model.short_term, None)?;
    let predictions: Vec<f64> = probs.iter().map(|p| p.as_f64()).collect();
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let users: Vec<u32> = samples.iter().map(|s| data.user_ids[s.user]).collect();
    Ok(Evaluation {
        loss: loss.as_f64(),
        auc: auc(&predictions, &labels)?,
        gauc: gauc(&users, &predictions, &labels)?,
        predictions,
        clamped,
    })
}

/// Mini-batch training: AdaGrad on embeddings, Adam on dense weights, shuffled
/// per epoch from `seed`. Evaluates on the test split after every epoch.
pub fn train<S: Real>(
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    pretrained: Option<&EmbeddingTable<S>>,
) -> Result<TrainOutput<S>> {
    let params = init_params(data, cfg, seed)?;
    train_from(params, data, cfg, seed, pretrained)
}

pub fn train_from<S: Real>(
    mut params: ModelParams<S>,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    pretrained: Option<&EmbeddingTable<S>>,
) -> Result<TrainOutput<S>> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::invalid("empty training split"));
    }
    let gsu = cfg.gsu_setup(pretrained);
    let sizes = |s: Vec<&[S]>| s.iter().map(|x| x.len()).collect::<Vec<_>>();
    let mut adagrad = AdaGrad::new(cfg.optim.embedding_lr, cfg.optim.adagrad_init, &sizes(params.embedding_slices()));
    let mut adam = Adam::new(&cfg.optim, &sizes(params.dense_slices()));
    let mut trace = Vec::new();
    let mut evals = Vec::new();
    let mut warmup_video_table = None;
    let mut clamp_warnings = 0;
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut sub_rng(seed, STREAM_SHUFFLE, epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let ctx = BatchContext::build(&params, &data.catalog, step as u64)?;
            let examples: Vec<Example<'_>> = chunk.iter().map(|&i| data.example(&data.train[i])).collect();
            let mut grads = params.zeros_like();
            let (loss, _, clamped) = batch_loss(&params, &ctx, &examples, &gsu, cfg.model.short_term, Some(&mut grads))?;
            clamp_warnings += clamped;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("loss {loss} on a batch of {}", examples.len()),
                });
            }
            adagrad.step(params.embedding_slices_mut(), grads.embedding_slices());
            adam.step(params.dense_slices_mut(), grads.dense_slices());
            if !params.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: "non-finite parameters after update".into(),
                });
            }
            trace.push(StepRecord {
                step,
                epoch,
                loss: loss.as_f64(),
            });
            step += 1;
        }
        if epoch == 0 {
            warmup_video_table = params.tables.table("video_id").cloned();
        }
        if !data.test.is_empty() {
            let e = evaluate(&params, data, &data.test, cfg, pretrained)?;
            evals.push(EvalRecord {
                epoch,
                step,
                loss: e.loss,
                auc: e.auc,
                gauc: e.gauc.value,
                users_used: e.gauc.users_used,
                users_excluded: e.gauc.users_excluded,
            });
        }
    }
    if warmup_video_table.is_none() {
        warmup_video_table = params.tables.table("video_id").cloned();
    }
    Ok(TrainOutput {
        params,
        trace,
        evals,
        warmup_video_table,
        clamp_warnings,
    })
}

/// Generates a world from `world` and splits its log into a dataset.
pub fn synthetic_dataset(world: &crate::datagen::WorldConfig, id_dim: usize, test_per_user: usize) -> Result<Dataset> {
    let w = crate::datagen::generate_world(world)?;
    let log = w.build_log();
    Dataset::from_log(&log, FeatureSchema::standard_with_id_dim(world.vocab(), id_dim), test_per_user)
}
