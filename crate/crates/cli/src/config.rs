//! JSON config schemas for the experiment commands. Unknown keys are
//! rejected everywhere so typos fail loudly before any computation runs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use aligngeom_core::adversary::AdversaryMode;
use aligngeom_core::toyworld::{
    build_world, world_from_json, ConceptId, PromptId, ToyWorld, WorldConfig,
};
use aligngeom_core::DistanceKind;

/// Where the experiment world comes from: a snapshot file or an inline
/// build section. Exactly one must be present.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub build: Option<WorldBuildSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldBuildSection {
    pub config: WorldConfig,
    pub seed: u64,
}

impl WorldSource {
    /// `base_dir` anchors relative snapshot paths at the config file.
    pub fn load(&self, base_dir: &Path) -> anyhow::Result<ToyWorld> {
        match (&self.path, &self.build) {
            (Some(path), None) => {
                let full = if path.is_absolute() {
                    path.clone()
                } else {
                    base_dir.join(path)
                };
                let text = std::fs::read_to_string(&full)
                    .with_context(|| format!("reading world snapshot {}", full.display()))?;
                Ok(world_from_json(&text)?)
            }
            (None, Some(section)) => Ok(build_world(&section.config, section.seed)?),
            _ => bail!("world source needs exactly one of `path` or `build`"),
        }
    }
}

fn default_dist() -> DistanceKind {
    DistanceKind::L1
}

fn default_mode() -> AdversaryMode {
    AdversaryMode::Geometric
}

/// `jailbreak-sim` config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JailbreakSimConfig {
    pub world: WorldSource,
    pub concept: ConceptId,
    /// Dirichlet concentrations over the concept's restricted set.
    pub posterior: Vec<f64>,
    pub p: f64,
    pub eps: f64,
    #[serde(default = "default_dist")]
    pub dist: DistanceKind,
    #[serde(default = "default_mode")]
    pub mode: AdversaryMode,
    pub draws: u64,
}

/// Reward specification: per-label constants or a full table.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub safe: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub harmful: Option<f64>,
    #[serde(default)]
    pub filler: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<Vec<Vec<f64>>>,
}

/// Which prompts enter the training objective.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", untagged)]
pub enum PromptSelector {
    Named(NamedPromptSet),
    Explicit(Vec<PromptId>),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedPromptSet {
    /// Direct prompts of every harmful concept.
    HarmfulDirect,
    /// Every direct prompt.
    AllDirect,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TrainMode {
    /// Exact Bradley–Terry expectation over explanation pairs.
    Expected,
    /// Sampled preference triples.
    Sampled { count: usize, sample_seed: u64 },
}

/// `train dpo|edpo` config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub world: WorldSource,
    /// Harmful→safe concept pairs for the safety transformation.
    pub mapping: Vec<(ConceptId, ConceptId)>,
    pub reward: RewardSpec,
    pub beta: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub mode: TrainMode,
    pub prompts: PromptSelector,
    /// Reference-model seed (Gaussian logits).
    pub reference_seed: u64,
    /// When set, the run exits nonzero if the final max TV to the
    /// closed-form optimum exceeds this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tv_tolerance: Option<f64>,
}

/// `sweep` config: a base command config plus a numeric parameter grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SweepConfig {
    Zone {
        base: ZoneParams,
        grid: Vec<GridAxis>,
    },
    Jailbreak {
        base: JailbreakSimConfig,
        grid: Vec<GridAxis>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZoneParams {
    pub n: usize,
    pub n0: usize,
    pub p: f64,
    #[serde(default)]
    pub eps: f64,
    #[serde(default = "default_dist")]
    pub dist: DistanceKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxis {
    pub param: String,
    pub values: Vec<f64>,
}

pub fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}
