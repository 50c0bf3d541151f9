//! Run configuration: every hyperparameter of a pretraining or finetuning
//! run, serialized as TOML with one flat table per section.
//!
//! `RunConfig::default()` carries the published defaults where they exist;
//! `RunConfig::desk()` shrinks the model and schedule to laptop scale.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::DownsampleMethod;
use crate::error::{Error, Result};
use crate::grouping::{FeatureSelection, FpsStart, GroupingConfig, SearchSpace};
use crate::mae::ModelConfig;
use crate::seed;
use crate::splat::ParamKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturesSection {
    /// Grouping feature G.
    pub grouping: Vec<ParamKind>,
    /// Embedding feature E (tokenized and reconstructed).
    pub embedding: Vec<ParamKind>,
    /// Per-block grouping weights; missing blocks weigh 1.
    pub weights: BTreeMap<ParamKind, f64>,
}

impl Default for FeaturesSection {
    fn default() -> Self {
        FeaturesSection {
            grouping: vec![ParamKind::Centroid],
            embedding: vec![ParamKind::Centroid],
            weights: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartMode {
    /// First FPS center drawn from the per-object data seed.
    Seeded,
    /// First FPS center derived from the splats themselves.
    Content,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupingSection {
    /// Splats per object after downsampling.
    pub splats: usize,
    pub downsample: DownsampleMethod,
    pub num_groups: usize,
    pub group_size: usize,
    /// Potential neighbors P handed to the pooling layer.
    pub pool_size: usize,
    pub fps_space: SearchSpace,
    pub pool_space: SearchSpace,
    pub fps_start: StartMode,
}

impl Default for GroupingSection {
    fn default() -> Self {
        GroupingSection {
            splats: 1024,
            downsample: DownsampleMethod::Fps,
            num_groups: 64,
            group_size: 32,
            pool_size: 64,
            fps_space: SearchSpace::Grouping,
            pool_space: SearchSpace::Centroid,
            fps_start: StartMode::Seeded,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Pooling-layer width D.
    pub hidden_dim: usize,
    /// Pooling aggregation slots k.
    pub slots: usize,
    pub token_dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub drop_path: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden_dim: 128,
            slots: 32,
            token_dim: 384,
            encoder_depth: 12,
            decoder_depth: 4,
            heads: 6,
            drop_path: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub mask_ratio: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// A numbered checkpoint is kept every this many epochs (the latest is
    /// always written).
    pub checkpoint_every: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            mask_ratio: 0.6,
            epochs: 300,
            warmup_epochs: 10,
            lr: 1e-3,
            weight_decay: 0.05,
            batch_size: 128,
            checkpoint_every: 25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Backbone and head trained together.
    Full,
    /// Single affine layer on the frozen backbone.
    #[serde(alias = "linear")]
    MlpLinear,
    /// Three-layer head on the frozen backbone.
    #[serde(alias = "mlp3")]
    Mlp3,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Full => "full",
            Protocol::MlpLinear => "mlp-linear",
            Protocol::Mlp3 => "mlp-3",
        }
    }

    pub fn freezes_backbone(self) -> bool {
        self != Protocol::Full
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Protocol::Full),
            "linear" | "mlp-linear" => Ok(Protocol::MlpLinear),
            "mlp3" | "mlp-3" => Ok(Protocol::Mlp3),
            other => Err(Error::Config(format!("unknown protocol '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub protocol: Protocol,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Hidden widths of the three-layer head (and the segmentation head).
    pub hidden: Vec<usize>,
    pub dropout: f64,
    /// Neighbors used by the segmentation feature interpolation.
    pub interp_k: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            protocol: Protocol::Full,
            epochs: 300,
            warmup_epochs: 10,
            lr: 5e-4,
            weight_decay: 0.05,
            batch_size: 32,
            hidden: vec![512, 256],
            dropout: 0.5,
            interp_k: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedSection {
    /// Downsampling, FPS starts and epoch shuffles.
    pub data: u64,
    pub mask: u64,
    /// Weight initialization, drop path and dropout.
    pub init: u64,
}

impl Default for SeedSection {
    fn default() -> Self {
        SeedSection { data: 0, mask: 1, init: 2 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub features: FeaturesSection,
    pub grouping: GroupingSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub seeds: SeedSection,
}

impl RunConfig {
    /// Laptop-scale preset: dim 96, depth 3 + 1, 4 heads, 50 epochs.
    pub fn desk() -> Self {
        RunConfig {
            model: ModelSection {
                token_dim: 96,
                encoder_depth: 3,
                decoder_depth: 1,
                heads: 4,
                ..Default::default()
            },
            pretrain: PretrainSection {
                epochs: 50,
                warmup_epochs: 2,
                batch_size: 16,
                checkpoint_every: 10,
                ..Default::default()
            },
            finetune: FinetuneSection {
                epochs: 40,
                warmup_epochs: 2,
                batch_size: 16,
                hidden: vec![128, 64],
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(RunConfig::default()),
            "desk" => Ok(RunConfig::desk()),
            other => Err(Error::Config(format!("unknown preset '{other}' (paper | desk)"))),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {}", e.message())))?;
        cfg.canonicalize();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Sorts and dedups the parameter sets.
    pub fn canonicalize(&mut self) {
        for set in [&mut self.features.grouping, &mut self.features.embedding] {
            set.sort();
            set.dedup();
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.selection()?;
        let g = &self.grouping;
        let positive = [
            ("grouping.splats", g.splats),
            ("grouping.num_groups", g.num_groups),
            ("grouping.group_size", g.group_size),
            ("grouping.pool_size", g.pool_size),
            ("pretrain.batch_size", self.pretrain.batch_size),
            ("pretrain.checkpoint_every", self.pretrain.checkpoint_every),
            ("finetune.batch_size", self.finetune.batch_size),
            ("finetune.interp_k", self.finetune.interp_k),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if g.num_groups > g.splats || g.group_size > g.splats || g.pool_size > g.splats {
            return Err(Error::Config(format!(
                "groups ({} x {}, pool {}) need at most {} splats each",
                g.num_groups, g.group_size, g.pool_size, g.splats
            )));
        }
        if !(0.0..1.0).contains(&self.pretrain.mask_ratio) {
            return Err(Error::Config(format!(
                "pretrain.mask_ratio {} outside [0, 1)",
                self.pretrain.mask_ratio
            )));
        }
        if !(0.0..1.0).contains(&self.finetune.dropout) {
            return Err(Error::Config("finetune.dropout outside [0, 1)".into()));
        }
        for (name, v) in [
            ("pretrain.lr", self.pretrain.lr),
            ("pretrain.weight_decay", self.pretrain.weight_decay),
            ("finetune.lr", self.finetune.lr),
            ("finetune.weight_decay", self.finetune.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative")));
            }
        }
        if self.finetune.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("finetune.hidden widths must be positive".into()));
        }
        self.model_config()?.validate()
    }

    pub fn selection(&self) -> Result<FeatureSelection> {
        let mut sel = FeatureSelection::new(&self.features.grouping, &self.features.embedding)?;
        for (&kind, &w) in &self.features.weights {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("grouping weight for {kind:?} must be >= 0")));
            }
            sel.weights.insert(kind, w);
        }
        Ok(sel)
    }

    /// Grouping settings for the object at `index` in its dataset.
    pub fn grouping_config(&self, index: usize) -> GroupingConfig {
        let g = &self.grouping;
        let mut cfg = GroupingConfig::new(
            g.num_groups,
            g.group_size,
            g.pool_size,
            seed::derive(self.seeds.data, &[0x6A, index as u64]),
        );
        cfg.fps_space = g.fps_space;
        cfg.pool_space = g.pool_space;
        if g.fps_start == StartMode::Content {
            cfg.start = FpsStart::Content;
        }
        cfg
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let sel = FeatureSelection::new(&self.features.grouping, &self.features.embedding)?;
        let m = &self.model;
        Ok(ModelConfig {
            embedding: sel.embedding.clone(),
            center_dim: sel.grouping_dim(),
            group_size: self.grouping.group_size,
            hidden_dim: m.hidden_dim,
            slots: m.slots,
            token_dim: m.token_dim,
            encoder_depth: m.encoder_depth,
            decoder_depth: m.decoder_depth,
            heads: m.heads,
            drop_path: m.drop_path,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_published_values() {
        let c = RunConfig::default();
        assert_eq!(c.pretrain.mask_ratio, 0.6);
        assert_eq!((c.model.token_dim, c.model.encoder_depth, c.model.heads), (384, 12, 6));
        assert_eq!(c.model.decoder_depth, 4);
        assert_eq!(c.model.drop_path, 0.1);
        assert_eq!((c.pretrain.lr, c.finetune.lr), (1e-3, 5e-4));
        assert_eq!(c.pretrain.weight_decay, 0.05);
        assert_eq!((c.pretrain.warmup_epochs, c.pretrain.epochs), (10, 300));
        assert_eq!(c.pretrain.batch_size, 128);
        c.validate().unwrap();
        RunConfig::desk().validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::desk();
        c.features.embedding = vec![ParamKind::Centroid, ParamKind::Opacity];
        c.features.weights.insert(ParamKind::Opacity, 2.0);
        c.finetune.protocol = Protocol::Mlp3;
        let text = c.to_toml();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = RunConfig::from_toml_str("[pretrain]\nmask_ratio = 0.4\n[features]\nembedding = [\"O\", \"C\"]\n")
            .unwrap();
        assert_eq!(c.pretrain.mask_ratio, 0.4);
        assert_eq!(c.features.embedding, [ParamKind::Centroid, ParamKind::Opacity]);
        assert_eq!(c.model, ModelSection::default());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml_str("[pretrain]\nmask_ratio = 1.0\n").is_err());
        assert!(RunConfig::from_toml_str("[model]\ntoken_dim = 10\nheads = 3\n").is_err());
        assert!(RunConfig::from_toml_str("[model]\nunknown = 1\n").is_err());
        assert!(RunConfig::from_toml_str("[features]\ngrouping = []\n").is_err());
    }

    #[test]
    fn protocol_aliases() {
        assert_eq!("linear".parse::<Protocol>().unwrap(), Protocol::MlpLinear);
        assert_eq!("mlp3".parse::<Protocol>().unwrap(), Protocol::Mlp3);
        assert!("probe".parse::<Protocol>().is_err());
    }
}
