//! Experiment configuration: one TOML file drives every subcommand. The
//! master seed fully determines all downstream randomness; per-stage seeds
//! are derived from it with fixed stream tags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use uvcloak_core::fr::{ArchitectureId, FrTrainSpec, LossId};
use uvcloak_core::ppt::PptTrainSpec;
use uvcloak_core::retrieval::Scenario;
use uvcloak_core::robustness::AttackSpec;
use uvcloak_core::world::WorldConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RosterEntry {
    pub arch: ArchitectureId,
    pub loss: LossId,
    pub training_seed: u64,
    /// Override of the per-loss default learning rate.
    pub learning_rate: Option<f64>,
}

impl RosterEntry {
    pub fn train_spec(&self, fr: &FrConfig) -> FrTrainSpec {
        let mut spec = FrTrainSpec::recommended(self.arch, self.loss, self.training_seed);
        spec.epochs = fr.epochs;
        spec.batch_size = fr.batch_size;
        spec.momentum = fr.momentum;
        spec.feature_dim = fr.feature_dim;
        spec.holdout_per_identity = fr.holdout_per_identity;
        spec.accuracy_floor = fr.accuracy_floor;
        spec.margin = fr.margin;
        spec.scale = fr.scale;
        if let Some(lr) = self.learning_rate {
            spec.learning_rate = lr;
        }
        spec
    }
}

fn default_feature_dim() -> usize {
    32
}
fn default_epochs() -> usize {
    40
}
fn default_batch() -> usize {
    16
}
fn default_momentum() -> f64 {
    0.9
}
fn default_holdout() -> usize {
    2
}
fn default_floor() -> f64 {
    0.9
}
fn default_margin() -> f64 {
    0.3
}
fn default_scale() -> f64 {
    16.0
}
fn default_bank_identities() -> usize {
    10
}
fn default_bank_per_identity() -> usize {
    12
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrConfig {
    /// Disjoint identities rendered per roster member for training.
    #[serde(default = "default_bank_identities")]
    pub bank_identities: usize,
    #[serde(default = "default_bank_per_identity")]
    pub bank_per_identity: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_holdout")]
    pub holdout_per_identity: usize,
    #[serde(default = "default_floor")]
    pub accuracy_floor: f64,
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Surrogate ensemble members.
    pub roster: Vec<RosterEntry>,
    /// The held-out intruder model.
    pub intruder: RosterEntry,
}

fn default_fractions() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0]
}

fn default_scenarios() -> Vec<Scenario> {
    vec![
        Scenario::Baseline,
        Scenario::UnprotQueryProtDb,
        Scenario::ProtQueryUnprotDb,
        Scenario::ProtQueryProtDb,
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(default = "default_scenarios")]
    pub scenarios: Vec<Scenario>,
    #[serde(default = "default_fractions")]
    pub protected_fractions: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { scenarios: default_scenarios(), protected_fractions: default_fractions() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub world: WorldConfig,
    pub fr: FrConfig,
    pub ppt: PptTrainSpec,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "AttackSpec::default_grid")]
    pub attacks: Vec<AttackSpec>,
}

impl ExperimentConfig {
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("reading config {}: {e}", path.display()))?;
        let mut config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| format!("parsing config {}: {e}", path.display()))?;
        if let Some(seed) = seed_override {
            config.master_seed = seed;
        }
        config.apply_master_seed();
        config.world.validate().map_err(|e| e.to_string())?;
        if config.fr.roster.is_empty() {
            return Err("config needs at least one roster entry".into());
        }
        Ok(config)
    }

    /// Derive all per-stage seeds from the master seed.
    fn apply_master_seed(&mut self) {
        self.world.seed = mix(self.master_seed, 0x1);
        self.ppt.seed = mix(self.master_seed, 0x2);
    }

    pub fn eval_seed(&self) -> u64 {
        mix(self.master_seed, 0x3)
    }

    pub fn bank_seed(&self, member_index: usize) -> u64 {
        mix(self.master_seed, 0x100 + member_index as u64)
    }

    /// Identity-id offset for a member's training bank, keeping banks
    /// disjoint from the world population and from each other.
    pub fn bank_id_offset(&self, member_index: usize) -> u32 {
        let world_ids = (self.world.n_users + self.world.n_noise) as u32;
        world_ids + 1000 + (member_index as u32) * self.fr.bank_identities as u32
    }

    /// Hash of the effective configuration (after seed override), for
    /// provenance sidecars.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn world_dir(&self) -> PathBuf {
        self.output_dir.join("world")
    }
    pub fn models_dir(&self) -> PathBuf {
        self.output_dir.join("models")
    }
    pub fn ppts_dir(&self) -> PathBuf {
        self.output_dir.join("ppts")
    }
    pub fn reports_dir(&self) -> PathBuf {
        self.output_dir.join("reports")
    }
    pub fn plots_dir(&self) -> PathBuf {
        self.output_dir.join("plots")
    }
}

fn mix(master: u64, stream: u64) -> u64 {
    master
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Provenance sidecar written next to every artifact directory.
#[derive(Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub format_version: u32,
}

pub fn write_provenance(dir: &Path, command: &str, config: &ExperimentConfig) -> Result<(), String> {
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let p = Provenance {
        command: command.to_string(),
        config_hash: config.config_hash(),
        master_seed: config.master_seed,
        format_version: 1,
    };
    let json = serde_json::to_string_pretty(&p).map_err(|e| e.to_string())?;
    std::fs::write(dir.join("provenance.json"), json).map_err(|e| e.to_string())
}
