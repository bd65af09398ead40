use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lesionforge_core::cluster::ClusterTrainConfig;
use lesionforge_core::dqn::AgentConfig;
use lesionforge_core::env::EnvConfig;
use lesionforge_core::superpixel::SlicConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { count: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerSettings {
    pub port: u16,
    pub static_dir: Option<PathBuf>,
}

impl Default for ServerSettings {
    fn default() -> Self {
        Self { port: lesionforge_server::DEFAULT_PORT, static_dir: None }
    }
}

/// Whole-pipeline configuration. Module `seed` fields are overwritten with
/// values derived from the global `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub run_id: String,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub synth: SynthConfig,
    pub superpixel: SlicConfig,
    pub cluster: ClusterTrainConfig,
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub server: ServerSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            seed: 42,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            synth: SynthConfig::default(),
            superpixel: SlicConfig::default(),
            cluster: ClusterTrainConfig::default(),
            env: EnvConfig::default(),
            agent: AgentConfig::default(),
            server: ServerSettings::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        anyhow::ensure!(!self.run_id.is_empty(), "run_id must not be empty");
        anyhow::ensure!(
            !self.run_id.contains(['/', '\\']) && self.run_id != "." && self.run_id != "..",
            "run_id must be a plain directory name"
        );
        anyhow::ensure!(self.agent.horizon == self.env.horizon, "agent.horizon and env.horizon must agree");
        self.env.validate()?;
        self.agent.validate()?;
        Ok(())
    }

    /// Clustering config for one image, seeded from the global seed and the id.
    pub fn cluster_for(&self, image_id: &str) -> ClusterTrainConfig {
        ClusterTrainConfig { seed: derive_seed(self.seed, image_id), ..self.cluster.clone() }
    }

    pub fn slic(&self) -> SlicConfig {
        SlicConfig { seed: self.seed, ..self.superpixel.clone() }
    }

    pub fn agent(&self) -> AgentConfig {
        AgentConfig { seed: derive_seed(self.seed, "dqn"), ..self.agent.clone() }
    }
}

/// Stable 64-bit seed from the global seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
