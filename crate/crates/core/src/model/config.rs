use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::SceneCaps;
use crate::vocabulary::Segmentation;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionScope {
    /// Tokens attend only to tokens of the same anchor.
    #[default]
    WithinAnchor,
    /// Tokens attend to every anchor of the same scene.
    SceneWide,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaLnMode {
    /// One modulation per macro-group from that group's time.
    #[default]
    Decoupled,
    /// One modulation from the mean time of the sample, through the
    /// stacked group weights.
    Monolithic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub groups: usize,
    pub segments: usize,
    pub anchors: usize,
    pub horizon: usize,
    pub time_features: usize,
    pub ffn_mult: usize,
    pub max_context_tokens: usize,
    pub attention: AttentionScope,
    pub adaln: AdaLnMode,
    pub caps: SceneCaps,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            blocks: 3,
            heads: 4,
            groups: 2,
            segments: 4,
            anchors: 20,
            horizon: 80,
            time_features: 128,
            ffn_mult: 2,
            max_context_tokens: 64,
            attention: AttentionScope::WithinAnchor,
            adaln: AdaLnMode::Decoupled,
            caps: SceneCaps::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.blocks == 0 || self.anchors == 0 {
            return fail("dim, blocks and anchors must be positive".into());
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!("{} heads do not divide width {}", self.heads, self.dim));
        }
        if self.groups == 0 || !self.dim.is_multiple_of(self.groups) {
            return fail(format!("{} groups do not divide width {}", self.groups, self.dim));
        }
        Segmentation::new(self.horizon, self.segments, self.groups)?;
        if self.context_tokens() > self.max_context_tokens {
            return fail(format!(
                "{} context tokens exceed the budget of {}",
                self.context_tokens(),
                self.max_context_tokens
            ));
        }
        if self.time_features < 2 || self.ffn_mult == 0 || self.caps.points < 2 {
            return fail("time features, ffn multiplier or polyline points too small".into());
        }
        Ok(())
    }

    pub fn segmentation(&self) -> Segmentation {
        Segmentation {
            horizon: self.horizon,
            segments: self.segments,
            groups: self.groups,
        }
    }

    /// Width of one group's channel slice.
    pub fn group_width(&self) -> usize {
        self.dim / self.groups
    }

    /// Token rows per anchor.
    pub fn rows_per_anchor(&self) -> usize {
        self.segments / self.groups
    }

    /// Values per segment, `3·(L+1)`.
    pub fn segment_values(&self) -> usize {
        3 * (self.horizon / self.segments + 1)
    }

    /// Ego, agents, obstacles, map lanes and the null token.
    pub fn context_tokens(&self) -> usize {
        2 + self.caps.agents + self.caps.obstacles + self.caps.map_lanes
    }

    /// Config for unit tests and gradient checks.
    pub fn micro() -> Self {
        Self {
            dim: 8,
            blocks: 1,
            heads: 2,
            groups: 2,
            segments: 2,
            anchors: 2,
            horizon: 4,
            time_features: 8,
            ffn_mult: 2,
            max_context_tokens: 64,
            attention: AttentionScope::WithinAnchor,
            adaln: AdaLnMode::Decoupled,
            caps: SceneCaps {
                history: 3,
                agents: 2,
                obstacles: 1,
                map_lanes: 2,
                route_lanes: 1,
                points: 3,
                point_spacing: 3.0,
            },
        }
    }
}
