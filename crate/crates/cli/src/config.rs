//! Run configuration: a TOML file with dotted sections, patched by
//! `--set key=value` overrides, plus the provenance stamp derived from it.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use remind_core::attention::AttentionMode;
use remind_core::curriculum::{CurriculumConfig, Regime};
use remind_core::diagnostics::DiagnosticsConfig;
use remind_core::frame_graph::{InterruptionKind, Scenario, WorldConfig};
use remind_core::trainer::{ModelConfig, OptimizerConfig, RolloutMode};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub curriculum: CurriculumSection,
    pub optimizer: OptimizerConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub rollout: RolloutSection,
    pub diagnostics: DiagnosticsSection,
    pub ablate: AblateSection,
}

/// Relative weights of the scenarios drawn by `gen-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioMix {
    pub filling_bar: f64,
    pub moving_dot: f64,
    pub pan_loop_scene: f64,
}

impl Default for ScenarioMix {
    fn default() -> Self {
        Self {
            filling_bar: 1.0,
            moving_dot: 0.0,
            pan_loop_scene: 0.0,
        }
    }
}

impl ScenarioMix {
    pub fn weights(&self) -> [(Scenario, f64); 3] {
        [
            (Scenario::FillingBar, self.filling_bar),
            (Scenario::MovingDot, self.moving_dot),
            (Scenario::PanLoopScene, self.pan_loop_scene),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterruptionSection {
    /// Chance that a clip receives the interruption; clips with an intrinsic
    /// one (the panning loop) keep theirs instead.
    pub probability: f64,
    pub kind: InterruptionKind,
    pub first_chunk: usize,
    pub last_chunk: usize,
    pub magnitude: f64,
}

impl Default for InterruptionSection {
    fn default() -> Self {
        Self {
            probability: 1.0,
            kind: InterruptionKind::Occluder,
            first_chunk: 2,
            last_chunk: 4,
            magnitude: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub clips: usize,
    /// Clip length in chunks.
    pub chunks: usize,
    pub scenarios: ScenarioMix,
    pub rate_min: f64,
    pub rate_max: f64,
    pub dot_speed_max: f64,
    pub interruption: InterruptionSection,
}

impl Default for DataConfig {
    fn default() -> Self {
        let w = WorldConfig::default();
        Self {
            clips: 64,
            chunks: 7,
            scenarios: ScenarioMix::default(),
            rate_min: w.rate_min,
            rate_max: w.rate_max,
            dot_speed_max: w.dot_speed_max,
            interruption: InterruptionSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegimeWeights {
    pub all_history: f64,
    pub noisy_memory: f64,
    pub node_drop: f64,
    pub v2v_frontier: f64,
    pub reference_cache: f64,
}

impl Default for RegimeWeights {
    fn default() -> Self {
        Self {
            all_history: 0.0,
            noisy_memory: 0.0,
            node_drop: 1.0,
            v2v_frontier: 1.0,
            reference_cache: 1.0,
        }
    }
}

impl RegimeWeights {
    pub fn pairs(&self) -> Vec<(Regime, f64)> {
        vec![
            (Regime::AllHistory, self.all_history),
            (Regime::NoisyMemory, self.noisy_memory),
            (Regime::NodeDrop, self.node_drop),
            (Regime::V2vFrontier, self.v2v_frontier),
            (Regime::ReferenceCache, self.reference_cache),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumSection {
    pub weights: RegimeWeights,
    pub alpha: f64,
    pub gamma: f64,
    pub warmup: usize,
    pub gap_min: usize,
    pub gap_max: usize,
}

impl Default for CurriculumSection {
    fn default() -> Self {
        let c = CurriculumConfig::default();
        Self {
            weights: RegimeWeights::default(),
            alpha: c.alpha,
            gamma: c.gamma,
            warmup: c.warmup,
            gap_min: c.gap_min,
            gap_max: c.gap_max,
        }
    }
}

impl CurriculumSection {
    pub fn curriculum(&self) -> CurriculumConfig {
        CurriculumConfig {
            alpha: self.alpha,
            gamma: self.gamma,
            warmup: self.warmup,
            gap_min: self.gap_min,
            gap_max: self.gap_max,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub iterations: usize,
    pub batch_size: usize,
    /// Writes an intermediate checkpoint every this many iterations; 0 never.
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 4,
            checkpoint_every: 0,
        }
    }
}

/// Held-out clips used by `ablate`, generated like the training set but from
/// their own seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub clips: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            clips: 16,
            seed: 9001,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutSection {
    pub mode: RolloutMode,
    pub clip: usize,
    /// Conditioning chunks for `v2v`; defaults to everything before the
    /// recovery chunk.
    pub prefix_chunks: Option<usize>,
    /// Chunks to generate; defaults to the rest of the clip.
    pub num_chunks: Option<usize>,
    /// Chunk gap for `refcache`.
    pub gap: usize,
    pub noise_seed: u64,
}

impl Default for RolloutSection {
    fn default() -> Self {
        Self {
            mode: RolloutMode::V2v,
            clip: 0,
            prefix_chunks: None,
            num_chunks: None,
            gap: 4,
            noise_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSection {
    pub sigma: f64,
    pub noise_seed: u64,
    pub layer_range: Option<[usize; 2]>,
    pub identifiability_trials: usize,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        let d = DiagnosticsConfig::default();
        Self {
            sigma: d.sigma,
            noise_seed: d.noise_seed,
            layer_range: d.layer_range,
            identifiability_trials: 100,
        }
    }
}

impl DiagnosticsSection {
    pub fn options(&self) -> DiagnosticsConfig {
        DiagnosticsConfig {
            sigma: self.sigma,
            noise_seed: self.noise_seed,
            layer_range: self.layer_range,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub modes: Vec<AttentionMode>,
    /// Train the modes on separate threads.
    pub parallel: bool,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            modes: vec![
                AttentionMode::Full,
                AttentionMode::QkOnly,
                AttentionMode::VoOnly,
                AttentionMode::Dual,
            ],
            parallel: false,
        }
    }
}

impl RunConfig {
    pub fn world(&self) -> WorldConfig {
        WorldConfig {
            grid: self.model.grid,
            latent_dim: self.model.latent_dim,
            frames_per_chunk: self.model.frames_per_chunk,
            rate_min: self.data.rate_min,
            rate_max: self.data.rate_max,
            dot_speed_max: self.data.dot_speed_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.world().validate()?;
        if self.data.chunks == 0 {
            bail!("data.chunks must be at least 1");
        }
        let mix = self.data.scenarios.weights();
        if mix.iter().any(|(_, w)| !w.is_finite() || *w < 0.0) || mix.iter().all(|(_, w)| *w == 0.0)
        {
            bail!("data.scenarios needs non-negative weights with a positive total");
        }
        let p = self.data.interruption.probability;
        if !(0.0..=1.0).contains(&p) {
            bail!("data.interruption.probability {p} outside [0, 1]");
        }
        let w = self.curriculum.weights.pairs();
        if w.iter().any(|(_, v)| !v.is_finite() || *v < 0.0) || w.iter().all(|(_, v)| *v == 0.0) {
            bail!("curriculum.weights needs non-negative weights with a positive total");
        }
        if self.train.batch_size == 0 {
            bail!("train.batch_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.diagnostics.sigma) {
            bail!("diagnostics.sigma outside [0, 1]");
        }
        Ok(())
    }

    /// Reads `path` (or starts from defaults) and applies `key=value`
    /// overrides; values are parsed as TOML and fall back to strings.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let text = toml::to_string(&table)?;
        let cfg: RunConfig = toml::from_str(&text).context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex(&Sha256::digest(&json))
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            config_hash: self.hash(),
            seed: self.seed,
            version: VERSION.to_string(),
        }
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .with_context(|| format!("override '{spec}' is not key=value"))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key '{key}' is malformed");
    }
    let value = parse_value(raw.trim());
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .with_context(|| format!("override '{key}': '{part}' is not a section"))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Stamp carried by every artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl Provenance {
    pub fn comment(&self) -> String {
        format!(
            "config_hash={} seed={} version={}",
            self.config_hash, self.seed, self.version
        )
    }
}
