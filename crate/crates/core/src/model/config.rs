use serde::{Deserialize, Serialize};

use crate::blocks::{AttnSpec, FfnSpec, SplitRatio};
use crate::error::{Error, Result};
use crate::store::InitScheme;

fn default_img_channels() -> usize {
    3
}

/// One stage: an optional stride-2 embedding followed by `repeats` identical blocks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub channels: usize,
    pub repeats: usize,
    pub lsa: AttnSpec,
    #[serde(default)]
    pub gsa: Option<AttnSpec>,
    pub downsample_in: bool,
}

impl StageConfig {
    pub fn ratio(&self) -> Result<SplitRatio> {
        SplitRatio::from_heads(self.lsa.heads, self.gsa.map(|g| g.heads))
    }

    pub fn local_channels(&self) -> Result<usize> {
        self.ratio()?.local_channels(self.channels)
    }

    /// Channels per attention head, shared by both branches.
    pub fn head_dim(&self) -> Result<usize> {
        let cl = self.local_channels()?;
        if self.lsa.heads == 0 || cl % self.lsa.heads != 0 {
            return Err(Error::Config(format!("{cl} local channels not divisible by {} heads", self.lsa.heads)));
        }
        Ok(cl / self.lsa.heads)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub stem_channels: usize,
    pub stages: Vec<StageConfig>,
    pub expansion_channels: usize,
    pub num_classes: usize,
    #[serde(default = "default_img_channels")]
    pub img_channels: usize,
    #[serde(default)]
    pub ffn: FfnSpec,
    #[serde(default)]
    pub attn_out_proj: bool,
    #[serde(default)]
    pub init: InitScheme,
}

fn stage(channels: usize, repeats: usize, lsa: (usize, usize), gsa: Option<(usize, usize)>, down: bool) -> StageConfig {
    StageConfig {
        channels,
        repeats,
        lsa: AttnSpec::new(lsa.0, lsa.1),
        gsa: gsa.map(|(w, h)| AttnSpec::new(w, h)),
        downsample_in: down,
    }
}

/// The published variants, `"A"` and `"R"`, with a 1000-class head.
pub fn variant_config(name: &str) -> Result<ModelConfig> {
    let cfg = match name {
        "A" | "a" => ModelConfig {
            name: "A".into(),
            stem_channels: 64,
            stages: vec![
                stage(64, 3, (7, 1), Some((7, 1)), false),
                stage(96, 4, (7, 1), Some((14, 2)), true),
                stage(128, 12, (7, 2), Some((14, 2)), true),
                stage(192, 4, (7, 3), Some((7, 3)), true),
            ],
            expansion_channels: 576,
            num_classes: 1000,
            img_channels: 3,
            ffn: FfnSpec::default(),
            attn_out_proj: false,
            init: InitScheme::TruncNormal,
        },
        "R" | "r" => ModelConfig {
            name: "R".into(),
            stem_channels: 48,
            stages: vec![
                stage(48, 1, (7, 1), None, false),
                stage(96, 1, (7, 1), Some((14, 1)), true),
                stage(240, 3, (7, 2), Some((14, 3)), true),
                stage(384, 1, (7, 4), Some((7, 4)), true),
            ],
            expansion_channels: 960,
            num_classes: 1000,
            img_channels: 3,
            ffn: FfnSpec::default(),
            attn_out_proj: false,
            init: InitScheme::TruncNormal,
        },
        other => return Err(Error::Config(format!("unknown variant `{other}` (expected A or R)"))),
    };
    Ok(cfg)
}

/// Scaled-down configuration for 32×32 toy images.
pub fn micro_config(num_classes: usize) -> ModelConfig {
    ModelConfig {
        name: "micro".into(),
        stem_channels: 16,
        stages: vec![
            stage(16, 1, (4, 1), Some((4, 1)), false),
            stage(24, 1, (4, 1), Some((4, 2)), true),
            stage(32, 1, (2, 2), Some((2, 2)), true),
            stage(48, 1, (1, 3), Some((1, 3)), true),
        ],
        expansion_channels: 144,
        num_classes,
        img_channels: 3,
        ffn: FfnSpec::default(),
        attn_out_proj: false,
        init: InitScheme::FanIn,
    }
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.stages.len() != 4 {
            return bad(format!("expected 4 stages, got {}", self.stages.len()));
        }
        if self.stem_channels == 0 || !self.stem_channels.is_multiple_of(2) {
            return bad(format!("stem_channels {} must be even and positive", self.stem_channels));
        }
        if self.expansion_channels == 0 || self.num_classes == 0 || self.img_channels == 0 {
            return bad("expansion_channels, num_classes and img_channels must be positive".into());
        }
        if self.ffn.alpha == 0 {
            return bad("ffn.alpha must be positive".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            let at = |msg: &str| Error::Config(format!("stage {}: {msg}", i + 1));
            if s.repeats == 0 {
                return Err(at("repeats must be at least 1"));
            }
            if s.channels == 0 {
                return Err(at("channels must be positive"));
            }
            if i == 0 && s.downsample_in {
                return Err(at("first stage cannot downsample (the stem covers it)"));
            }
            if i > 0 && !s.downsample_in {
                return Err(at("stages after the first must downsample"));
            }
            if i == 0 && s.channels != self.stem_channels {
                return Err(at(&format!("channels {} differ from stem_channels {}", s.channels, self.stem_channels)));
            }
            if s.lsa.window == 0 || s.lsa.heads == 0 {
                return Err(at("lsa window and heads must be positive"));
            }
            if let Some(g) = s.gsa {
                if g.window == 0 || g.heads == 0 {
                    return Err(at("gsa window and heads must be positive"));
                }
            }
            let cl = s.local_channels().map_err(|e| at(&e.to_string()))?;
            let dim = s.head_dim().map_err(|e| at(&e.to_string()))?;
            if let Some(g) = s.gsa {
                if (s.channels - cl) != dim * g.heads {
                    return Err(at("global branch channels not divisible by its heads"));
                }
            }
        }
        Ok(())
    }

    pub fn final_channels(&self) -> usize {
        self.stages.last().map_or(self.stem_channels, |s| s.channels)
    }
}
