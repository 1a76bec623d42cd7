use crate::error::{Error, Result};

/// Softmax temperature used inside attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScaleMode {
    /// `Softmax(X (XW)ᵀ)` with no temperature.
    #[default]
    PaperLiteral,
    /// Scores multiplied by `1/√head_dim`.
    ScaledBySqrtD,
}

impl ScaleMode {
    pub fn factor(self, head_dim: usize) -> f64 {
        match self {
            ScaleMode::PaperLiteral => 1.0,
            ScaleMode::ScaledBySqrtD => 1.0 / (head_dim as f64).sqrt(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScaleMode::PaperLiteral => "paper_literal",
            ScaleMode::ScaledBySqrtD => "scaled_by_sqrt_d",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper_literal" => Ok(ScaleMode::PaperLiteral),
            "scaled_by_sqrt_d" => Ok(ScaleMode::ScaledBySqrtD),
            other => Err(Error::Config(format!(
                "unknown scale mode `{other}` (expected paper_literal or scaled_by_sqrt_d)"
            ))),
        }
    }
}

/// How training-time branch bundles are laid out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReparamConfig {
    /// Number of extra grouped branches per bundle.
    pub extras: usize,
    /// Explicit group counts for the extras. `None` picks per layer.
    pub extra_groups: Option<Vec<usize>>,
    pub scale_mode: ScaleMode,
}

impl Default for ReparamConfig {
    fn default() -> Self {
        Self {
            extras: 2,
            extra_groups: None,
            scale_mode: ScaleMode::PaperLiteral,
        }
    }
}

impl ReparamConfig {
    /// Extra-branch groups for a 1×1 bundle with base groups `base` mapping
    /// `cin -> cout`.
    pub fn groups_for(&self, base: usize, cin: usize, cout: usize) -> Result<Vec<usize>> {
        match &self.extra_groups {
            None => Ok(super::layers::default_extra_groups(base, cin, cout, self.extras)),
            Some(list) => {
                if list.len() != self.extras {
                    return Err(Error::Config(format!(
                        "{} extra groups listed but extras = {}",
                        list.len(),
                        self.extras
                    )));
                }
                for &g in list {
                    if g < base || g % base != 0 || cin % g != 0 || cout % g != 0 {
                        return Err(Error::Config(format!(
                            "extra group count {g} is invalid for a {cin}->{cout} layer with base groups {base}"
                        )));
                    }
                }
                Ok(list.clone())
            }
        }
    }
}

/// Module toggles used by the ablation lattice. All on is the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    /// Multi-frequency concat inside attention stages.
    pub fmb: bool,
    /// Grouped 1×1 extra branches inside MLPs.
    pub gmlp: bool,
    /// Shared-projection attention instead of separate q/k/v.
    pub rlmhsa: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            fmb: true,
            gmlp: true,
            rlmhsa: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Cfb,
    Fmb,
}

impl BlockKind {
    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Cfb => "cfb",
            BlockKind::Fmb => "fmb",
        }
    }
}

/// One stage: patch embedding followed by `blocks` blocks.
///
/// `channels` is `(input, intermediate, output)`. For CFB stages the
/// intermediate width is the block width and must equal the output. For FMB
/// stages it is the attention width.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub embed: usize,
    pub downsample: bool,
    pub kind: BlockKind,
    pub channels: [usize; 3],
    pub fm: usize,
    pub blocks: usize,
}

/// A complete model configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VariantSpec {
    pub name: String,
    pub in_channels: usize,
    /// Widths after the 3×3, the depthwise 3×3 and the 1×1 stem convs.
    pub stem: [usize; 3],
    pub stages: Vec<StageSpec>,
    pub classes: usize,
    pub head_dim: usize,
    pub mlp_ratio: usize,
    /// Depthwise 3×3 between the two MLP 1×1s.
    pub mlp_mid_dw: bool,
    pub reparam: ReparamConfig,
    pub ablation: Ablation,
}

fn cfb(embed: usize, downsample: bool, ch: [usize; 3], blocks: usize) -> StageSpec {
    StageSpec {
        embed,
        downsample,
        kind: BlockKind::Cfb,
        channels: ch,
        fm: 0,
        blocks,
    }
}

fn fmb(embed: usize, ch: [usize; 3], fm: usize, blocks: usize) -> StageSpec {
    StageSpec {
        embed,
        downsample: true,
        kind: BlockKind::Fmb,
        channels: ch,
        fm,
        blocks,
    }
}

impl VariantSpec {
    pub const NAMES: [&'static str; 6] = ["T", "S", "M", "B", "L", "nano"];

    fn with_stages(name: &str, stem: [usize; 3], stages: Vec<StageSpec>, classes: usize) -> Self {
        Self {
            name: name.to_string(),
            in_channels: 3,
            stem,
            stages,
            classes,
            head_dim: 32,
            mlp_ratio: 2,
            mlp_mid_dw: true,
            reparam: ReparamConfig::default(),
            ablation: Ablation::default(),
        }
    }

    /// Built-in configurations: `T`, `S`, `M`, `B`, `L` (1000 classes) and
    /// the toy `nano` (8 classes).
    pub fn preset(name: &str) -> Result<Self> {
        let spec = match name {
            "T" => Self::with_stages(
                "T",
                [32, 32, 32],
                vec![
                    cfb(32, false, [32, 32, 32], 3),
                    fmb(32, [32, 64, 80], 16, 1),
                    fmb(80, [80, 128, 160], 32, 1),
                    fmb(160, [160, 192, 320], 64, 1),
                ],
                1000,
            ),
            "S" => Self::with_stages(
                "S",
                [48, 48, 48],
                vec![
                    cfb(48, false, [48, 48, 48], 3),
                    fmb(48, [48, 96, 160], 32, 1),
                    fmb(160, [160, 192, 320], 64, 1),
                    fmb(320, [320, 384, 640], 128, 1),
                ],
                1000,
            ),
            "M" => Self::with_stages(
                "M",
                [64, 64, 64],
                vec![
                    cfb(64, false, [64, 96, 96], 3),
                    fmb(96, [96, 128, 160], 32, 1),
                    fmb(160, [160, 320, 480], 96, 1),
                    fmb(480, [480, 512, 960], 192, 1),
                ],
                1000,
            ),
            "B" | "L" => {
                let (s1, s3) = if name == "B" { (3, 2) } else { (6, 5) };
                Self::with_stages(
                    name,
                    [64, 64, 64],
                    vec![
                        cfb(64, false, [64, 96, 96], s1),
                        fmb(96, [96, 256, 320], 64, 1),
                        fmb(320, [320, 384, 480], 96, s3),
                        fmb(480, [480, 640, 1280], 256, 1),
                    ],
                    1000,
                )
            }
            "nano" => Self::with_stages(
                "nano",
                [16, 16, 16],
                vec![
                    cfb(16, false, [16, 16, 16], 1),
                    fmb(16, [16, 32, 32], 8, 1),
                    fmb(32, [32, 32, 64], 8, 1),
                    fmb(64, [64, 64, 128], 16, 1),
                ],
                8,
            ),
            other => {
                return Err(Error::Config(format!(
                    "unknown variant `{other}` (known: {})",
                    Self::NAMES.join(", ")
                )))
            }
        };
        Ok(spec)
    }

    /// Total spatial reduction from input to the last stage.
    pub fn reduction(&self) -> usize {
        4 << self.stages.iter().filter(|s| s.downsample).count()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("variant {}: {m}", self.name)));
        if self.in_channels == 0 || self.classes == 0 {
            return bad("input channels and classes must be positive".into());
        }
        if self.stem.contains(&0) {
            return bad("stem widths must be positive".into());
        }
        if self.stem[0] != self.stem[1] {
            return bad(format!(
                "the depthwise stem conv keeps width, got {} then {}",
                self.stem[0], self.stem[1]
            ));
        }
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        if self.head_dim == 0 || self.mlp_ratio == 0 {
            return bad("head_dim and mlp_ratio must be positive".into());
        }
        if let Some(list) = &self.reparam.extra_groups {
            if list.len() != self.reparam.extras {
                return bad(format!(
                    "{} extra groups listed but extras = {}",
                    list.len(),
                    self.reparam.extras
                ));
            }
        }
        for (i, s) in self.stages.iter().enumerate() {
            let [cin, mid, cout] = s.channels;
            if s.embed == 0 || s.blocks == 0 || s.channels.contains(&0) {
                return bad(format!("stage {i}: widths and block count must be positive"));
            }
            if s.embed != cin {
                return bad(format!(
                    "stage {i}: patch embedding emits {} but the first block expects {cin}",
                    s.embed
                ));
            }
            match s.kind {
                BlockKind::Cfb => {
                    if mid != cout {
                        return bad(format!("stage {i}: CFB width {mid} must equal output {cout}"));
                    }
                }
                BlockKind::Fmb => {
                    if s.fm == 0 {
                        return bad(format!("stage {i}: FMB needs fm channels"));
                    }
                    if mid % self.head_dim != 0 {
                        return bad(format!(
                            "stage {i}: attention width {mid} is not a multiple of head_dim {}",
                            self.head_dim
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in VariantSpec::NAMES {
            let v = VariantSpec::preset(name).unwrap();
            v.validate().unwrap();
            assert_eq!(v.reduction(), 32);
        }
        assert!(VariantSpec::preset("XL").is_err());
    }

    #[test]
    fn chained_embed_mismatch_is_rejected() {
        let mut v = VariantSpec::preset("T").unwrap();
        v.stages[2].embed = 96;
        assert!(v.validate().is_err());
        let mut v = VariantSpec::preset("T").unwrap();
        v.head_dim = 48;
        assert!(v.validate().is_err());
    }

    #[test]
    fn explicit_groups_are_checked() {
        let cfg = ReparamConfig {
            extras: 1,
            extra_groups: Some(vec![4]),
            scale_mode: ScaleMode::PaperLiteral,
        };
        assert_eq!(cfg.groups_for(1, 8, 16).unwrap(), vec![4]);
        assert!(cfg.groups_for(1, 6, 16).is_err());
    }
}
