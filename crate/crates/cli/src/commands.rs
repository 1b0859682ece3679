//! The experiment commands. Each runs one seed at a time; `run` fans seeds
//! out over workers and assembles the report.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use clap::ValueEnum;
use rand::Rng;
use twin::attention::{
    build_equivalent_dense, dense_relevance, pad_query, raw_mhta_forward, twin_forward, twin_relevance, AttentionConfig,
    TwinParams,
};
use twin::datagen::sub_rng;
use twin::numerics::Matrix;
use twin::retrieval::GsuKind;
use twin::serving::{
    consistency_curves, flops_raw, flops_twin_online, measure_raw, measure_twin, run_scenario, FlopModel, ScenarioConfig,
};
use twin::snapshot::write_checkpoint;
use twin::training::{evaluate, synthetic_dataset, train, Dataset, TrainConfig, TrainOutput, Variant};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::report::{aggregate, metrics_table, write_json, Metric, Report, SeedResult, Table};
use crate::workers::map_seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Equivalence,
    Consistency,
    Train,
    Bench,
    ServeSim,
    LengthSweep,
    Ablation,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Equivalence => "equivalence",
            Command::Consistency => "consistency",
            Command::Train => "train",
            Command::Bench => "bench",
            Command::ServeSim => "serve-sim",
            Command::LengthSweep => "length-sweep",
            Command::Ablation => "ablation",
        }
    }

    fn header(self) -> Vec<String> {
        let cols: &[&str] = match self {
            Command::Equivalence => &["seed", "instances", "max_alpha_diff", "max_output_diff", "within_tolerance"],
            Command::Consistency => {
                let mut h = vec!["n".to_string()];
                h.extend(CURVE_ORDER.iter().map(|k| k.name().to_string()));
                return h;
            }
            Command::Train => &["seed", "gsu", "auc", "gauc", "test_loss", "users_used", "users_excluded", "steps"],
            Command::Bench => &[
                "seed",
                "inherent_dim",
                "seq_len",
                "raw_formula",
                "raw_itemized",
                "raw_measured",
                "twin_formula",
                "twin_itemized",
                "twin_measured",
                "gather_reads",
                "reduction_pct",
            ],
            Command::ServeSim => &[
                "seed",
                "refresh_period",
                "hit_twin",
                "hit_soft",
                "hit_hard",
                "mean_staleness",
                "max_staleness",
                "misses",
                "refreshes",
            ],
            Command::LengthSweep => &["seed", "input_len", "auc", "gauc", "test_loss"],
            Command::Ablation => &["seed", "variant", "auc", "gauc", "test_loss", "scoring_macs"],
        };
        cols.iter().map(|s| s.to_string()).collect()
    }
}

const CURVE_ORDER: [GsuKind; 4] = [GsuKind::TwinCp, GsuKind::SimSoft, GsuKind::SimHard, GsuKind::Oracle];

pub const ALPHA_TOLERANCE: f64 = 1e-10;
pub const OUTPUT_TOLERANCE: f64 = 1e-9;

/// What one seed contributes to a report.
#[derive(Debug, Default)]
pub struct SeedOutput {
    pub metrics: Vec<Metric>,
    pub rows: Vec<Vec<String>>,
    /// Additional CSV files by name; rows are concatenated across seeds.
    pub extra: Vec<(String, Table)>,
    pub timings: Vec<(String, f64)>,
    pub counters: Vec<(String, u64)>,
}

fn row(cells: impl IntoIterator<Item = String>) -> Vec<String> {
    cells.into_iter().collect()
}

fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn equivalence(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutput> {
    let e = &cfg.equivalence;
    let att = AttentionConfig::new(e.inherent_dim, e.n_cross, e.d_k, e.d_k, e.n_heads);
    let mut rng = sub_rng(seed, 0xE9, 0);
    let (mut alpha_diff, mut out_diff) = (0.0f64, 0.0f64);
    for _ in 0..e.instances {
        let params = TwinParams::<f64>::random(att, &mut rng);
        let q: Vec<f64> = (0..e.inherent_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kh = random_matrix(&mut rng, e.seq_len, att.inherent_dim);
        let kc = random_matrix(&mut rng, e.seq_len, att.cross_dim);
        let split = twin_relevance(&q, &kh, &kc, &params)?;
        let dense = build_equivalent_dense(&params);
        let k = kh.hconcat(&kc)?;
        let q_pad = pad_query(&q, k.cols());
        for (head, scores) in dense.heads.iter().zip(&split.per_head) {
            alpha_diff = alpha_diff.max(max_abs_diff(&dense_relevance(&q_pad, &k, head)?, scores));
        }
        let a = twin_forward(&q, &kh, &kc, &params)?;
        let b = raw_mhta_forward(&q, &k, &dense)?;
        out_diff = out_diff.max(max_abs_diff(&a, &b));
    }
    let ok = alpha_diff <= ALPHA_TOLERANCE && out_diff <= OUTPUT_TOLERANCE;
    Ok(SeedOutput {
        metrics: vec![
            Metric::new("split-vs-dense", "max_alpha_diff", alpha_diff),
            Metric::new("split-vs-dense", "max_output_diff", out_diff),
            Metric::new("split-vs-dense", "within_tolerance", f64::from(u8::from(ok))),
        ],
        rows: vec![row([
            seed.to_string(),
            e.instances.to_string(),
            alpha_diff.to_string(),
            out_diff.to_string(),
            ok.to_string(),
        ])],
        counters: vec![("instances".into(), e.instances as u64)],
        ..SeedOutput::default()
    })
}

fn consistency(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutput> {
    let curves = consistency_curves(&cfg.serving, seed, &cfg.consistency.n_values)?;
    let mut metrics = Vec::new();
    for kind in CURVE_ORDER {
        let c = curves.iter().find(|c| c.method == kind).expect("every kind has a curve");
        for p in &c.points {
            metrics.push(Metric::new(kind.name(), format!("hit@{}", p.n), p.hit_rate));
        }
    }
    Ok(SeedOutput {
        metrics,
        counters: vec![("requests".into(), cfg.serving.n_requests as u64)],
        ..SeedOutput::default()
    })
}

fn dataset(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    Ok(synthetic_dataset(&cfg.world_for(seed), cfg.train.model.id_dim, cfg.test_per_user)?)
}

fn eval_metrics(method: &str, out: &TrainOutput<f64>) -> Result<(Vec<Metric>, [String; 5])> {
    let e = out
        .evals
        .last()
        .ok_or_else(|| HarnessError::Runtime(format!("{method}: training produced no evaluation")))?;
    Ok((
        vec![
            Metric::new(method, "auc", e.auc),
            Metric::new(method, "gauc", e.gauc),
            Metric::new(method, "test_loss", e.loss),
        ],
        [
            e.auc.to_string(),
            e.gauc.to_string(),
            e.loss.to_string(),
            e.users_used.to_string(),
            e.users_excluded.to_string(),
        ],
    ))
}

fn log_table() -> Table {
    Table::new(["seed", "method", "step", "epoch", "loss", "auc", "gauc"])
}

/// Step losses, plus the evaluation after each epoch on its last step's row.
fn append_log(t: &mut Table, seed: u64, method: &str, out: &TrainOutput<f64>) {
    for s in &out.trace {
        let eval = out.evals.iter().find(|e| e.step == s.step + 1);
        t.push([
            seed.to_string(),
            method.to_string(),
            s.step.to_string(),
            s.epoch.to_string(),
            s.loss.to_string(),
            eval.map_or(String::new(), |e| e.auc.to_string()),
            eval.map_or(String::new(), |e| e.gauc.to_string()),
        ]);
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed().as_secs_f64())
}

fn train_table(cfg: &ExperimentConfig, seed: u64, out_dir: &Path) -> Result<SeedOutput> {
    let data = dataset(cfg, seed)?;
    let mut order = cfg.table.gsu.clone();
    order.sort_by_key(|&g| g != GsuKind::TwinCp);
    let mut warm = None;
    let mut results = BTreeMap::new();
    let mut out = SeedOutput::default();
    let mut log = log_table();
    for gsu in order {
        let tc = TrainConfig { gsu, ..cfg.train.clone() };
        let (res, secs) = timed(|| train::<f64>(&data, &tc, seed, warm.as_ref()));
        let run = res?;
        if gsu == GsuKind::TwinCp && warm.is_none() {
            warm = run.warmup_video_table.clone();
        }
        append_log(&mut log, seed, gsu.name(), &run);
        let dir = out_dir.join("checkpoints").join(format!("seed{seed}-{}", gsu.name()));
        write_checkpoint(&dir, run.trace.len() as u64, &run.params.to_tensors())?;
        out.timings.push((format!("seed{seed}/{}/train_seconds", gsu.name()), secs));
        out.counters.push(("train_steps".into(), run.trace.len() as u64));
        out.counters.push(("clamp_warnings".into(), run.clamp_warnings as u64));
        results.insert(gsu, run);
    }
    for &gsu in &cfg.table.gsu {
        let run = &results[&gsu];
        let (metrics, cells) = eval_metrics(gsu.name(), run)?;
        out.metrics.extend(metrics);
        let mut r = vec![seed.to_string(), gsu.name().to_string()];
        r.extend(cells);
        r.push(run.trace.len().to_string());
        out.rows.push(r);
    }
    out.extra.push(("train_log".into(), log));
    Ok(out)
}

fn bench(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutput> {
    let b = &cfg.bench;
    let mut rng = sub_rng(seed, 0xBE, 0);
    let mut out = SeedOutput::default();
    for &h in &b.inherent_dims {
        for &l in &b.seq_lens {
            let model = FlopModel::new(l, h, b.n_cross, b.d_k, b.d_out, b.n_heads);
            let (raw, raw_secs) = timed(|| measure_raw(&model, &mut rng));
            let (tw, twin_secs) = timed(|| measure_twin(&model, &mut rng));
            let (raw, tw) = (raw?, tw?);
            let (ra, ta) = (flops_raw(&model), flops_twin_online(&model));
            let (ri, ti) = (model.raw_breakdown().macs(), model.twin_breakdown().macs());
            let reduction = 100.0 * (1.0 - ta as f64 / ra as f64);
            let method = format!("H={h}/L={l}");
            out.metrics.extend([
                Metric::new(&method, "raw_macs", ra as f64),
                Metric::new(&method, "twin_macs", ta as f64),
                Metric::new(&method, "reduction_pct", reduction),
                Metric::new(&method, "measured_matches", f64::from(u8::from(raw.macs == ri && tw.macs == ti))),
            ]);
            out.rows.push(row([
                seed.to_string(),
                h.to_string(),
                l.to_string(),
                ra.to_string(),
                ri.to_string(),
                raw.macs.to_string(),
                ta.to_string(),
                ti.to_string(),
                tw.macs.to_string(),
                tw.reads.to_string(),
                reduction.to_string(),
            ]));
            out.timings.push((format!("seed{seed}/{method}/raw_seconds"), raw_secs));
            out.timings.push((format!("seed{seed}/{method}/twin_seconds"), twin_secs));
        }
    }
    Ok(out)
}

fn serve_sim(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutput> {
    let mut out = SeedOutput::default();
    for &period in &cfg.serve_sim.refresh_periods {
        let mut sc: ScenarioConfig = cfg.serving.clone();
        sc.schedule.cache_refresh_period = period;
        let s = run_scenario(&sc, seed)?.summary;
        let method = format!("refresh={period}");
        out.metrics.extend([
            Metric::new(&method, "hit_twin", s.hit_twin.mean),
            Metric::new(&method, "hit_soft", s.hit_soft.mean),
            Metric::new(&method, "hit_hard", s.hit_hard.mean),
            Metric::new(&method, "mean_staleness", s.mean_staleness),
        ]);
        out.rows.push(row([
            seed.to_string(),
            period.to_string(),
            s.hit_twin.mean.to_string(),
            s.hit_soft.mean.to_string(),
            s.hit_hard.mean.to_string(),
            s.mean_staleness.to_string(),
            s.max_staleness.to_string(),
            s.total_misses.to_string(),
            s.refreshes.to_string(),
        ]));
        out.counters.extend([
            ("requests".into(), s.requests as u64),
            ("cache_misses".into(), s.total_misses as u64),
            ("twin_macs".into(), s.twin_macs),
            ("raw_macs_analytic".into(), s.raw_macs_analytic),
            ("gather_reads".into(), s.gather_reads),
        ]);
    }
    Ok(out)
}

fn length_sweep(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutput> {
    let data = dataset(cfg, seed)?;
    let mut out = SeedOutput::default();
    let mut log = log_table();
    for &len in &cfg.length_sweep.input_lengths {
        let tc = TrainConfig {
            gsu: GsuKind::TwinCp,
            gsu_input_len: Some(len),
            ..cfg.train.clone()
        };
        let (res, secs) = timed(|| train::<f64>(&data, &tc, seed, None));
        let run = res?;
        let method = format!("input={len}");
        append_log(&mut log, seed, &method, &run);
        let (metrics, cells) = eval_metrics(&method, &run)?;
        out.metrics.extend(metrics);
        out.rows.push(row([
            seed.to_string(),
            len.to_string(),
            cells[0].clone(),
            cells[1].clone(),
            cells[2].clone(),
        ]));
        out.timings.push((format!("seed{seed}/{method}/train_seconds"), secs));
        out.counters.push(("train_steps".into(), run.trace.len() as u64));
    }
    out.extra.push(("train_log".into(), log));
    Ok(out)
}

fn ablation(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutput> {
    let data = dataset(cfg, seed)?;
    let mut out = SeedOutput::default();
    let mut log = log_table();
    for &variant in &cfg.ablation.variants {
        let mut tc = TrainConfig {
            gsu: GsuKind::TwinCp,
            ..cfg.train.clone()
        };
        tc.model.variant = variant;
        let (res, secs) = timed(|| train::<f64>(&data, &tc, seed, None));
        let run = res?;
        let (eval, eval_secs) = timed(|| evaluate(&run.params, &data, &data.test, &tc, None));
        eval?;
        let att = tc.model.attention(&data.schema);
        let model = FlopModel::from_attention(&att, cfg.ablation.flop_seq_len);
        let macs = match variant {
            Variant::RawMhta => flops_raw(&model),
            Variant::Twin | Variant::TwinNoBias => flops_twin_online(&model),
        };
        append_log(&mut log, seed, variant.name(), &run);
        let (mut metrics, cells) = eval_metrics(variant.name(), &run)?;
        metrics.push(Metric::new(variant.name(), "scoring_macs", macs as f64));
        out.metrics.extend(metrics);
        out.rows.push(row([
            seed.to_string(),
            variant.name().to_string(),
            cells[0].clone(),
            cells[1].clone(),
            cells[2].clone(),
            macs.to_string(),
        ]));
        out.timings.push((format!("seed{seed}/{}/train_seconds", variant.name()), secs));
        out.timings.push((format!("seed{seed}/{}/eval_seconds", variant.name()), eval_secs));
        out.counters.push(("train_steps".into(), run.trace.len() as u64));
    }
    out.extra.push(("train_log".into(), log));
    Ok(out)
}

fn run_seed(command: Command, cfg: &ExperimentConfig, seed: u64, out_dir: &Path) -> Result<SeedOutput> {
    match command {
        Command::Equivalence => equivalence(cfg, seed),
        Command::Consistency => consistency(cfg, seed),
        Command::Train => train_table(cfg, seed, out_dir),
        Command::Bench => bench(cfg, seed),
        Command::ServeSim => serve_sim(cfg, seed),
        Command::LengthSweep => length_sweep(cfg, seed),
        Command::Ablation => ablation(cfg, seed),
    }
}

/// Mean hit rate across seeds per cut-off, one column per GSU.
fn curve_table(cfg: &ExperimentConfig, results: &[SeedResult]) -> Table {
    let agg = aggregate(results);
    let mut t = Table::new(Command::Consistency.header());
    for n in &cfg.consistency.n_values {
        let mut r = vec![n.to_string()];
        for kind in CURVE_ORDER {
            let metric = format!("hit@{n}");
            let a = agg
                .iter()
                .find(|a| a.method == kind.name() && a.metric == metric)
                .expect("metric recorded for every seed");
            r.push(a.mean.to_string());
        }
        t.push(r);
    }
    t
}

/// Validates, runs every seed, writes `<command>.csv`, `metrics.csv`,
/// `report.json` (plus any per-command extras) into `out_dir`.
pub fn run(command: Command, cfg: &ExperimentConfig, config_path: &Path, out_dir: &Path, workers: usize) -> Result<Report> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let start = Instant::now();
    let mut seeds = cfg.seeds.clone();
    seeds.sort_unstable();
    let outputs = map_seeds(&seeds, workers, |seed| run_seed(command, cfg, seed, out_dir))?;
    let wall = start.elapsed().as_secs_f64();

    let mut table = Table::new(command.header());
    let mut extras: Vec<(String, Table)> = Vec::new();
    let mut per_seed = Vec::with_capacity(seeds.len());
    let mut timings = BTreeMap::new();
    let mut counters: BTreeMap<String, u64> = BTreeMap::new();
    for (&seed, o) in seeds.iter().zip(outputs) {
        table.rows.extend(o.rows);
        for (name, t) in o.extra {
            match extras.iter_mut().find(|(n, _)| *n == name) {
                Some((_, acc)) => acc.rows.extend(t.rows),
                None => extras.push((name, t)),
            }
        }
        timings.extend(o.timings);
        for (k, v) in o.counters {
            *counters.entry(k).or_default() += v;
        }
        per_seed.push(SeedResult { seed, metrics: o.metrics });
    }
    if command == Command::Consistency {
        table = curve_table(cfg, &per_seed);
    }
    table.write_csv(&out_dir.join(format!("{}.csv", command.name())))?;
    metrics_table(&per_seed).write_csv(&out_dir.join("metrics.csv"))?;
    for (name, t) in &extras {
        t.write_csv(&out_dir.join(format!("{name}.csv")))?;
    }
    let report = Report {
        command: command.name().to_string(),
        config_path: config_path.display().to_string(),
        config_hash: cfg.hash(),
        seeds,
        aggregate: aggregate(&per_seed),
        per_seed,
        wall_clock_seconds: wall,
        timings,
        counters,
    };
    write_json(&out_dir.join("report.json"), &report)?;
    Ok(report)
}
