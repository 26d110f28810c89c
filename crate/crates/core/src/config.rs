//! Run configuration: one structured file covering every stage, validated
//! with field paths, serialized back beside each run's outputs so a run can
//! be reproduced from its artifacts alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{
    Backbone, ContextConfig, SurgeryConfig, ToyBackbone, ToyConfig, VVAttentionConfig, VitBackbone,
    VitConfig,
};
use crate::data::PreprocessConfig;
use crate::error::{Error, Result};
use crate::masking::DiscrepancyConfig;
use crate::objective::TrainConfig;
use crate::scoring::UnknownMode;
use crate::synthesis::LambdaPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    #[default]
    Toy,
    Vit,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct BackboneConfig {
    #[serde(default)]
    pub kind: BackboneKind,
    #[serde(default)]
    pub toy: Option<ToyConfig>,
    #[serde(default)]
    pub vit: Option<VitConfig>,
}

impl BackboneConfig {
    pub fn build(&self) -> Result<Backbone> {
        match self.kind {
            BackboneKind::Toy => {
                let cfg = self.toy.clone().unwrap_or_default();
                Ok(Backbone::Toy(ToyBackbone::new(cfg)?))
            }
            BackboneKind::Vit => {
                let cfg = self.vit.clone().ok_or_else(|| {
                    Error::config("backbone.vit: section required when kind = \"vit\"")
                })?;
                Ok(Backbone::Vit(VitBackbone::load(&cfg)?))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptConfig {
    pub token_len: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            token_len: crate::textbank::DEFAULT_TOKEN_LEN,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub shots: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig { shots: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct SynthesisConfig {
    #[serde(default)]
    pub lambda: LambdaPolicy,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ScoringConfig {
    #[serde(default)]
    pub unknown: UnknownMode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub name: String,
    pub root: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataConfig {
    pub id: DatasetEntry,
    #[serde(default)]
    pub ood: Vec<DatasetEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct AblationConfig {
    /// K for the rank-based masking baseline; defaults to ceil(M/5).
    #[serde(default)]
    pub topk_k: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub run_id: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub context: ContextConfig,
    /// Value-value attention scale; omitted means the backbone's native
    /// 1/sqrt(head dim).
    #[serde(default)]
    pub vv_attention: Option<VVAttentionConfig>,
    #[serde(default)]
    pub masking: DiscrepancyConfig,
    #[serde(default)]
    pub prompts: PromptConfig,
    #[serde(default)]
    pub episode: EpisodeConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub synthesis: SynthesisConfig,
    #[serde(default)]
    pub scoring: ScoringConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
    pub data: DataConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Resolution {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.normalize();
        cfg.validate()?;
        Ok(cfg)
    }

    /// The run seed drives every random draw: episode sampling, context
    /// initialization, lambda draws, batch shuffling.
    pub fn normalize(&mut self) {
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.trim().is_empty() {
            return Err(Error::config("run_id: must not be empty"));
        }
        if self
            .run_id
            .chars()
            .any(|c| !(c.is_ascii_alphanumeric() || c == '-' || c == '_'))
        {
            return Err(Error::config(format!(
                "run_id: {:?} may only contain alphanumerics, '-' and '_'",
                self.run_id
            )));
        }
        if let Some(toy) = &self.backbone.toy {
            toy.validate()?;
        }
        self.preprocess.validate()?;
        self.context.validate()?;
        if let Some(vv) = &self.vv_attention {
            vv.validate()?;
        }
        self.masking.validate()?;
        if self.prompts.token_len == 0 {
            return Err(Error::config("prompts.token_len: must be >= 1"));
        }
        if self.episode.shots == 0 {
            return Err(Error::config("episode.shots: must be >= 1"));
        }
        self.train.validate()?;
        self.synthesis.lambda.validate()?;
        if let Some(k) = self.ablation.topk_k {
            if k == 0 {
                return Err(Error::config("ablation.topk_k: must be >= 1"));
            }
        }
        Ok(())
    }

    pub fn surgery(&self, backbone: &Backbone) -> SurgeryConfig {
        SurgeryConfig {
            context: self.context,
            attention: self
                .vv_attention
                .unwrap_or_else(|| VVAttentionConfig::native(backbone.head_dim())),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_toml() -> String {
        r#"
run_id = "demo"

[data.id]
name = "synthetic-id"
root = "/tmp/does-not-matter"
"#
        .to_string()
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let mut cfg: RunConfig = toml::from_str(&minimal_toml()).unwrap();
        cfg.normalize();
        cfg.validate().unwrap();
        assert_eq!(cfg.train.epochs, 10);
        assert_eq!(cfg.train.learning_rate, 0.002);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.prompts.token_len, 16);
        assert_eq!(cfg.context.beta_ctx, 0.1);
        assert_eq!(cfg.episode.shots, 1);
        assert!(matches!(cfg.backbone.kind, BackboneKind::Toy));
    }

    #[test]
    fn invalid_beta_ctx_names_the_field() {
        let text = format!("{}\n[context]\nbeta_ctx = -0.5\n", minimal_toml());
        let mut cfg: RunConfig = toml::from_str(&text).unwrap();
        cfg.normalize();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("beta_ctx"), "{err}");
    }

    #[test]
    fn vit_kind_without_section_is_config_error() {
        let text = format!("{}\n[backbone]\nkind = \"vit\"\n", minimal_toml());
        let cfg: RunConfig = toml::from_str(&text).unwrap();
        assert!(matches!(cfg.backbone.build(), Err(Error::Config(_))));
    }

    #[test]
    fn roundtrips_through_toml() {
        let mut cfg: RunConfig = toml::from_str(&minimal_toml()).unwrap();
        cfg.seed = 7;
        cfg.normalize();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.seed, 7);
        assert_eq!(back.train.seed, 7);
        assert_eq!(back.run_id, cfg.run_id);
    }
}
