//! Central finite-difference check of the analytic gradients on tiny models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{batch_loss, BatchContext, Catalog, Example, GsuSetup, ModelConfig, ModelParams, Variant};
use crate::error::Result;
use crate::features::{BehaviorRecord, Encoding, FeatureKind, FeatureSchema, FeatureSpec, FeatureValue, TargetItem};
use crate::retrieval::GsuKind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckCase {
    pub variant: Variant,
    pub gsu: GsuKind,
    pub seq_len: usize,
    pub k: usize,
    pub n_heads: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub case: GradCheckCase,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

pub const FD_EPS: f64 = 1e-5;
/// Gradients below this magnitude are compared against it instead of themselves.
pub const REL_FLOOR: f64 = 1e-6;

/// H = 8 (video id 4 + category 4), one 8-wide cross feature (C = 8).
pub fn tiny_schema() -> FeatureSchema {
    FeatureSchema::new(vec![
        FeatureSpec::new("video_id", FeatureKind::Inherent, Encoding::OneHot, 12).with_dim(4),
        FeatureSpec::new("category", FeatureKind::Inherent, Encoding::OneHot, 3).with_dim(4),
        FeatureSpec::new("playtime_bucket", FeatureKind::Cross, Encoding::OneHot, 5),
    ])
    .expect("valid tiny schema")
}

fn item<R: Rng>(rng: &mut R) -> (u64, Vec<FeatureValue>) {
    let v = rng.random_range(0..12u32);
    (u64::from(v), vec![FeatureValue::One(v), FeatureValue::One(v % 3)])
}

/// The standard tiny case set: every variant, cached and hard retrieval, with
/// and without truncation, one and two heads.
pub fn standard_cases(n: usize) -> Vec<GradCheckCase> {
    let variants = [Variant::Twin, Variant::TwinNoBias, Variant::RawMhta];
    (0..n)
        .map(|i| GradCheckCase {
            variant: variants[i % 3],
            gsu: if i % 4 == 3 { GsuKind::SimHard } else { GsuKind::TwinCp },
            seq_len: 8,
            k: if i % 2 == 0 { 8 } else { 5 },
            n_heads: 1 + (i / 6) % 2,
            seed: 1000 + i as u64,
        })
        .collect()
}

pub fn gradient_check(case: GradCheckCase) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed);
    let schema = tiny_schema();
    let cfg = ModelConfig {
        variant: case.variant,
        id_dim: 4,
        d_k: 2,
        d_v: 2,
        n_heads: case.n_heads,
        output_dim: 3,
        hidden: vec![5, 4],
        short_term: 3,
        embedding_std: 0.5,
        symmetric_init: false,
    };
    let mut params = ModelParams::<f64>::init(schema, &cfg, 2, &mut rng)?;
    for l in &mut params.mlp.layers {
        l.b.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    }
    for h in &mut params.twin.heads {
        if case.variant != Variant::TwinNoBias {
            h.beta.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
        }
    }

    let mut histories = Vec::new();
    let mut targets = Vec::new();
    let mut contexts = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..3 {
        let history: Vec<BehaviorRecord> = (0..case.seq_len)
            .map(|t| {
                let (id, inherent) = item(&mut rng);
                BehaviorRecord {
                    video_id: id,
                    inherent,
                    cross: vec![FeatureValue::One(rng.random_range(0..5))],
                    event_time: t as f64,
                }
            })
            .collect();
        let (id, inherent) = item(&mut rng);
        histories.push(history);
        targets.push(TargetItem { video_id: id, inherent });
        contexts.push(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
        labels.push(rng.random_range(0..2u8));
    }
    let items: Vec<(u64, Vec<FeatureValue>)> = (0..12u32)
        .map(|v| (u64::from(v), vec![FeatureValue::One(v), FeatureValue::One(v % 3)]))
        .collect();
    let catalog = Catalog::from_items(items.iter().map(|(id, f)| (*id, &f[..])));
    let examples: Vec<Example<'_>> = (0..3)
        .map(|i| Example {
            history: &histories[i],
            target: &targets[i],
            context: &contexts[i],
            label: labels[i],
        })
        .collect();
    let gsu = GsuSetup {
        kind: case.gsu,
        k: case.k,
        input_len: None,
        pretrained: None,
    };
    let loss_of = |p: &ModelParams<f64>| -> Result<f64> {
        let ctx = BatchContext::build(p, &catalog, 0)?;
        Ok(batch_loss(p, &ctx, &examples, &gsu, cfg.short_term, None)?.0)
    };

    let ctx = BatchContext::build(&params, &catalog, 0)?;
    let mut grads = params.zeros_like();
    batch_loss(&params, &ctx, &examples, &gsu, cfg.short_term, Some(&mut grads))?;

    let analytic: Vec<Vec<f64>> = grads
        .embedding_slices()
        .into_iter()
        .chain(grads.dense_slices())
        .map(<[f64]>::to_vec)
        .collect();
    let n_emb = params.embedding_slices().len();
    let frozen = params.frozen_dense();
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut coordinates = 0;
    for (si, g) in analytic.iter().enumerate() {
        if si >= n_emb && frozen[si - n_emb] {
            assert!(g.iter().all(|&x| x == 0.0), "frozen tensor {si} has a gradient");
            continue;
        }
        for (e, &a) in g.iter().enumerate() {
            let bumped = |delta: f64| -> Result<f64> {
                let mut p = params.clone();
                if si < n_emb {
                    p.embedding_slices_mut()[si][e] += delta;
                } else {
                    p.dense_slices_mut()[si - n_emb][e] += delta;
                }
                loss_of(&p)
            };
            let numeric = (bumped(FD_EPS)? - bumped(-FD_EPS)?) / (2.0 * FD_EPS);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            coordinates += 1;
            if rel > max_rel {
                max_rel = rel;
                worst = format!("tensor {si} entry {e}: analytic {a:e}, numeric {numeric:e}");
            }
        }
    }
    Ok(GradCheckReport {
        case,
        coordinates,
        max_rel_error: max_rel,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_matches_finite_differences() {
        for case in standard_cases(12) {
            let r = gradient_check(case).unwrap();
            assert!(r.coordinates > 200);
            assert!(r.max_rel_error <= 1e-4, "{case:?}: {} ({})", r.max_rel_error, r.worst);
        }
    }
}
