//! Experiment configuration: one TOML file with a section per concern.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use twin::datagen::WorldConfig;
use twin::retrieval::GsuKind;
use twin::serving::ScenarioConfig;
use twin::training::{TrainConfig, Variant};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EquivalenceConfig {
    pub instances: usize,
    pub seq_len: usize,
    pub inherent_dim: usize,
    pub n_cross: usize,
    pub d_k: usize,
    pub n_heads: usize,
}

impl Default for EquivalenceConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            seq_len: 1024,
            inherent_dim: 144,
            n_cross: 5,
            d_k: 32,
            n_heads: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsistencyConfig {
    /// Ascending cut-offs of the hit-rate curve.
    pub n_values: Vec<usize>,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            n_values: vec![1, 2, 5, 10, 20, 50, 100, 200, 500, 1_000, 2_000],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub seq_lens: Vec<usize>,
    pub inherent_dims: Vec<usize>,
    pub n_cross: usize,
    pub d_k: usize,
    pub d_out: usize,
    pub n_heads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seq_lens: vec![1_000, 10_000],
            inherent_dims: vec![144, 208],
            n_cross: 5,
            d_k: 32,
            d_out: 32,
            n_heads: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeSimConfig {
    /// Virtual minutes; 0 refreshes before every request.
    pub refresh_periods: Vec<f64>,
}

impl Default for ServeSimConfig {
    fn default() -> Self {
        Self {
            refresh_periods: vec![0.0, 5.0, 15.0, 30.0, 60.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TableConfig {
    /// GSU kinds compared by `train`; SIM Soft reuses the first TWIN run's embeddings.
    pub gsu: Vec<GsuKind>,
}

impl Default for TableConfig {
    fn default() -> Self {
        Self {
            gsu: vec![GsuKind::TwinCp, GsuKind::SimHard, GsuKind::SimSoft],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LengthSweepConfig {
    pub input_lengths: Vec<usize>,
}

impl Default for LengthSweepConfig {
    fn default() -> Self {
        Self {
            input_lengths: vec![1_000, 2_000, 5_000, 10_000],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub variants: Vec<Variant>,
    /// Sequence length of the analytic scoring-cost column.
    pub flop_seq_len: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: vec![Variant::Twin, Variant::RawMhta, Variant::TwinNoBias],
            flop_seq_len: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    /// TOML file holding the world section, relative to this file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub world_file: Option<PathBuf>,
    pub world: WorldConfig,
    /// Held-out samples per user.
    pub test_per_user: usize,
    pub train: TrainConfig,
    pub table: TableConfig,
    pub serving: ScenarioConfig,
    pub equivalence: EquivalenceConfig,
    pub consistency: ConsistencyConfig,
    pub bench: BenchConfig,
    pub serve_sim: ServeSimConfig,
    pub length_sweep: LengthSweepConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: Vec::new(),
            world_file: None,
            world: WorldConfig::default(),
            test_per_user: 10,
            train: TrainConfig::default(),
            table: TableConfig::default(),
            serving: ScenarioConfig::default(),
            equivalence: EquivalenceConfig::default(),
            consistency: ConsistencyConfig::default(),
            bench: BenchConfig::default(),
            serve_sim: ServeSimConfig::default(),
            length_sweep: LengthSweepConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

fn nested(errors: &mut Vec<String>, section: &str, r: twin::Result<()>) {
    match r {
        Ok(()) => {}
        Err(twin::Error::Config(list)) => errors.extend(list.into_iter().map(|e| format!("{section}: {e}"))),
        Err(e) => errors.push(format!("{section}: {e}")),
    }
}

fn positive(errors: &mut Vec<String>, name: &str, v: usize) {
    if v == 0 {
        errors.push(format!("{name} must be positive"));
    }
}

fn ascending(errors: &mut Vec<String>, name: &str, v: &[usize]) {
    if v.is_empty() {
        errors.push(format!("{name} must not be empty"));
    }
    if v.contains(&0) {
        errors.push(format!("{name} entries must be positive"));
    }
    if v.windows(2).any(|w| w[0] >= w[1]) {
        errors.push(format!("{name} must be strictly ascending"));
    }
}

impl ExperimentConfig {
    /// Reads and resolves a config file. Parse failures and a missing
    /// `world_file` are validation errors.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Validation(vec![format!("{}: {e}", path.display())]))?;
        let mut cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| HarnessError::Validation(vec![format!("{}: {}", path.display(), e.message())]))?;
        if let Some(rel) = cfg.world_file.take() {
            let base = path.parent().unwrap_or(Path::new("."));
            let world_path = base.join(&rel);
            let text = std::fs::read_to_string(&world_path).map_err(|e| {
                HarnessError::Validation(vec![format!("world_file: {}: {e}", world_path.display())])
            })?;
            cfg.world = toml::from_str(&text).map_err(|e| {
                HarnessError::Validation(vec![format!("world_file: {}: {}", world_path.display(), e.message())])
            })?;
        }
        Ok(cfg)
    }

    /// Every problem found, by name. Never touches outputs.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if self.seeds.is_empty() {
            errors.push("seeds: missing seed list".to_string());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            errors.push("seeds: duplicate seed".to_string());
        }
        nested(&mut errors, "world", self.world.validate());
        nested(&mut errors, "train", self.train.validate());
        nested(&mut errors, "serving", self.serving.validate());
        positive(&mut errors, "test_per_user", self.test_per_user);

        let eq = &self.equivalence;
        for (name, v) in [
            ("equivalence.instances", eq.instances),
            ("equivalence.seq_len", eq.seq_len),
            ("equivalence.inherent_dim", eq.inherent_dim),
            ("equivalence.n_cross", eq.n_cross),
            ("equivalence.d_k", eq.d_k),
            ("equivalence.n_heads", eq.n_heads),
        ] {
            positive(&mut errors, name, v);
        }
        ascending(&mut errors, "consistency.n_values", &self.consistency.n_values);
        ascending(&mut errors, "bench.seq_lens", &self.bench.seq_lens);
        if self.bench.inherent_dims.is_empty() || self.bench.inherent_dims.contains(&0) {
            errors.push("bench.inherent_dims must be non-empty and positive".into());
        }
        for (name, v) in [
            ("bench.n_cross", self.bench.n_cross),
            ("bench.d_k", self.bench.d_k),
            ("bench.d_out", self.bench.d_out),
            ("bench.n_heads", self.bench.n_heads),
        ] {
            positive(&mut errors, name, v);
        }
        if self.serve_sim.refresh_periods.is_empty() {
            errors.push("serve_sim.refresh_periods must not be empty".into());
        }
        for p in &self.serve_sim.refresh_periods {
            if !(*p >= 0.0) {
                errors.push(format!("serve_sim.refresh_periods: refresh period {p} must be non-negative"));
            }
        }
        if self.table.gsu.is_empty() {
            errors.push("table.gsu must not be empty".into());
        }
        if self.table.gsu.contains(&GsuKind::SimSoft) && !self.table.gsu.contains(&GsuKind::TwinCp) {
            errors.push("table.gsu: sim-soft needs a twin-cp run for its pre-trained embeddings".into());
        }
        ascending(&mut errors, "length_sweep.input_lengths", &self.length_sweep.input_lengths);
        if self.ablation.variants.is_empty() {
            errors.push("ablation.variants must not be empty".into());
        }
        positive(&mut errors, "ablation.flop_seq_len", self.ablation.flop_seq_len);
        if errors.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::Validation(errors))
        }
    }

    /// SHA-256 of the canonical JSON form, seeds excluded, so that reports
    /// from separate seed runs of one config can be combined.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("seeds");
        }
        let canonical = serde_json::to_string(&value).expect("value serializes");
        Sha256::digest(canonical.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// The world of one seed: the configured world with its seed offset.
    pub fn world_for(&self, seed: u64) -> WorldConfig {
        WorldConfig {
            seed: self.world.seed.wrapping_add(seed),
            ..self.world.clone()
        }
    }
}
