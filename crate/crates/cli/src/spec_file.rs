//! TOML model spec files.
//!
//! A file either names a preset and overrides some of its fields, or spells
//! out the whole stage table:
//!
//! ```toml
//! schema_version = 1
//! variant = "nano"
//! classes = 10
//!
//! [reparam]
//! extras = 2
//! extra_groups = [2, 4]
//! scale_mode = "scaled_by_sqrt_d"
//! ```
//!
//! Unknown keys are rejected with their line and column.

use fmvit_core::blocks::{Ablation, BlockKind, ReparamConfig, ScaleMode, StageSpec, VariantSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpecFile {
    pub schema_version: u32,
    /// Preset to start from. Required unless `stages` is given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub in_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stem: Option<[usize; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mlp_ratio: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mlp_mid_dw: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reparam: Option<ReparamSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stages: Option<Vec<StageEntry>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReparamSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extras: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extra_groups: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale_mode: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub fmb: bool,
    pub gmlp: bool,
    pub rlmhsa: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Cfb,
    Fmb,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageEntry {
    pub kind: StageKind,
    pub embed: usize,
    pub downsample: bool,
    /// `[input, intermediate, output]`.
    pub channels: [usize; 3],
    #[serde(default)]
    pub fm: usize,
    pub blocks: usize,
}

impl ModelSpecFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let spec: Self = toml::from_str(text).map_err(|e| CliError::Parse(e.to_string()))?;
        if spec.schema_version != SCHEMA_VERSION {
            return Err(CliError::Parse(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                spec.schema_version
            )));
        }
        if spec.variant.is_none() && spec.stages.is_none() {
            return Err(CliError::Parse("a spec needs `variant` or a `stages` table".into()));
        }
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec files always serialize")
    }

    /// A file naming only a preset.
    pub fn preset(name: &str) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            variant: Some(name.to_string()),
            name: None,
            classes: None,
            in_channels: None,
            stem: None,
            head_dim: None,
            mlp_ratio: None,
            mlp_mid_dw: None,
            reparam: None,
            ablation: None,
            stages: None,
        }
    }

    /// A fully explicit file describing `v`.
    pub fn from_variant(v: &VariantSpec) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            variant: None,
            name: Some(v.name.clone()),
            classes: Some(v.classes),
            in_channels: Some(v.in_channels),
            stem: Some(v.stem),
            head_dim: Some(v.head_dim),
            mlp_ratio: Some(v.mlp_ratio),
            mlp_mid_dw: Some(v.mlp_mid_dw),
            reparam: Some(ReparamSection {
                extras: Some(v.reparam.extras),
                extra_groups: v.reparam.extra_groups.clone(),
                scale_mode: Some(v.reparam.scale_mode.name().to_string()),
            }),
            ablation: Some(AblationSection {
                fmb: v.ablation.fmb,
                gmlp: v.ablation.gmlp,
                rlmhsa: v.ablation.rlmhsa,
            }),
            stages: Some(
                v.stages
                    .iter()
                    .map(|s| StageEntry {
                        kind: match s.kind {
                            BlockKind::Cfb => StageKind::Cfb,
                            BlockKind::Fmb => StageKind::Fmb,
                        },
                        embed: s.embed,
                        downsample: s.downsample,
                        channels: s.channels,
                        fm: s.fm,
                        blocks: s.blocks,
                    })
                    .collect(),
            ),
        }
    }

    /// Resolves the file into a validated model configuration.
    pub fn to_variant(&self) -> Result<VariantSpec, CliError> {
        let mut v = match &self.variant {
            Some(name) => VariantSpec::preset(name)?,
            None => VariantSpec {
                name: "custom".into(),
                in_channels: 3,
                stem: [32, 32, 32],
                stages: Vec::new(),
                classes: 1000,
                head_dim: 32,
                mlp_ratio: 2,
                mlp_mid_dw: true,
                reparam: ReparamConfig::default(),
                ablation: Ablation::default(),
            },
        };
        if let Some(n) = &self.name {
            v.name = n.clone();
        }
        macro_rules! take {
            ($($f:ident),*) => {$( if let Some(x) = self.$f { v.$f = x; } )*};
        }
        take!(classes, in_channels, stem, head_dim, mlp_ratio, mlp_mid_dw);
        if let Some(r) = &self.reparam {
            if let Some(n) = r.extras {
                v.reparam.extras = n;
            }
            if r.extra_groups.is_some() {
                v.reparam.extra_groups = r.extra_groups.clone();
            }
            if let Some(m) = &r.scale_mode {
                v.reparam.scale_mode = ScaleMode::parse(m)?;
            }
        }
        if let Some(a) = self.ablation {
            v.ablation = Ablation {
                fmb: a.fmb,
                gmlp: a.gmlp,
                rlmhsa: a.rlmhsa,
            };
        }
        if let Some(stages) = &self.stages {
            v.stages = stages
                .iter()
                .map(|s| StageSpec {
                    embed: s.embed,
                    downsample: s.downsample,
                    kind: match s.kind {
                        StageKind::Cfb => BlockKind::Cfb,
                        StageKind::Fmb => BlockKind::Fmb,
                    },
                    channels: s.channels,
                    fm: s.fm,
                    blocks: s.blocks,
                })
                .collect();
        }
        v.validate()?;
        Ok(v)
    }
}
