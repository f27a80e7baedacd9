//! Architecture hyperparameters and ablation switches.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::AttentionAxis;

/// What stands in for the shift convolutions of the local branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    /// Eight-direction channel shift followed by a 1x1 convolution.
    #[default]
    Shift,
    /// Plain 1x1 convolution.
    Conv1,
    /// Plain 3x3 convolution.
    Conv3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub scale: usize,
    pub channels: usize,
    pub n_glcm: usize,
    pub n_gldeb: usize,
    /// 1-based GLCM indices whose input receives the semantic prior.
    pub prior_injection_indices: Vec<usize>,
    pub prior_channels: usize,
    pub fab_enabled: bool,
    pub local_branch: bool,
    pub global_branch: bool,
    /// Depthwise kernels 1, 3 and 5 in the local branch (only 1 when off).
    pub multipath: bool,
    pub shift_mode: ShiftMode,
    /// Share of local-branch channels left unshifted.
    pub kept_fraction: f64,
    /// Average-pool window (and stride) of the high-frequency split.
    pub pool_window: usize,
    pub spatial_attention: bool,
    pub channel_attention: bool,
    /// Side of the square attention windows; `None` attends globally.
    pub attention_window: Option<usize>,
    pub cca_reduction: usize,
    pub esa_reduction: usize,
    pub fab_reduction: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scale: 2,
            channels: 48,
            n_glcm: 6,
            n_gldeb: 3,
            prior_injection_indices: vec![3, 5],
            prior_channels: 512,
            fab_enabled: true,
            local_branch: true,
            global_branch: true,
            multipath: true,
            shift_mode: ShiftMode::Shift,
            kept_fraction: 1.0 / 3.0,
            pool_window: 2,
            spatial_attention: true,
            channel_attention: true,
            attention_window: Some(8),
            cca_reduction: 16,
            esa_reduction: 4,
            fab_reduction: 4,
            ln_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    /// The base network at scale `r`.
    pub fn base(scale: usize) -> Self {
        ModelConfig {
            scale,
            ..Default::default()
        }
    }

    /// The 64-channel variant.
    pub fn large(scale: usize) -> Self {
        ModelConfig {
            scale,
            channels: 64,
            ..Default::default()
        }
    }

    /// Smallest configuration that still exercises every block; used by
    /// gradient checks and smoke training.
    pub fn tiny(scale: usize) -> Self {
        ModelConfig {
            scale,
            channels: 8,
            n_glcm: 2,
            n_gldeb: 2,
            prior_injection_indices: vec![2],
            prior_channels: 4,
            attention_window: Some(4),
            ..Default::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(2..=4).contains(&self.scale) {
            return bad(format!("scale {} is not one of 2, 3, 4", self.scale));
        }
        if self.channels == 0 || self.n_glcm == 0 || self.n_gldeb == 0 {
            return bad("channels, n_glcm and n_gldeb must be positive".into());
        }
        if !self.channels.is_multiple_of(2) {
            return bad(format!("channels {} must be even", self.channels));
        }
        if !self.local_branch && !self.global_branch {
            return bad("at least one GLDEB branch must be enabled".into());
        }
        if self.global_branch && !self.global_channels().is_multiple_of(2) {
            return bad(format!(
                "global branch width {} must be even to split",
                self.global_channels()
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &i in &self.prior_injection_indices {
            if i == 0 || i > self.n_glcm {
                return bad(format!("injection index {i} outside 1..={}", self.n_glcm));
            }
            if !seen.insert(i) {
                return bad(format!("injection index {i} repeated"));
            }
        }
        if !self.prior_injection_indices.is_empty() && self.prior_channels == 0 {
            return bad("prior_channels must be positive when priors are injected".into());
        }
        if !(0.0..=1.0).contains(&self.kept_fraction) {
            return bad(format!("kept_fraction {} outside [0, 1]", self.kept_fraction));
        }
        if self.pool_window == 0 || self.attention_window == Some(0) {
            return bad("window sizes must be positive".into());
        }
        if self.cca_reduction == 0 || self.esa_reduction == 0 || self.fab_reduction == 0 {
            return bad("reductions must be positive".into());
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive".into());
        }
        Ok(())
    }

    pub fn local_channels(&self) -> usize {
        match (self.local_branch, self.global_branch) {
            (true, true) => self.channels / 2,
            (true, false) => self.channels,
            _ => 0,
        }
    }

    pub fn global_channels(&self) -> usize {
        self.channels - self.local_channels()
    }

    /// Unshifted channels for a shift convolution over `c` channels: the
    /// kept share rounded up, then raised until the rest splits into eight
    /// equal groups.
    pub fn shift_kept(&self, c: usize) -> usize {
        let kept = (self.kept_fraction * c as f64).ceil() as usize;
        let kept = kept.min(c);
        c - (c - kept) / 8 * 8
    }

    pub fn injects_before(&self, glcm: usize) -> bool {
        self.prior_injection_indices.contains(&glcm)
    }

    pub fn uses_prior(&self) -> bool {
        !self.prior_injection_indices.is_empty()
    }

    pub(crate) fn cca_hidden(&self) -> usize {
        (self.channels / self.cca_reduction).max(1)
    }

    pub(crate) fn esa_hidden(&self) -> usize {
        (self.channels / self.esa_reduction).max(1)
    }

    pub(crate) fn fab_hidden(&self) -> usize {
        (self.channels / self.fab_reduction).max(1)
    }

    pub(crate) fn attention_axes(&self) -> Vec<AttentionAxis> {
        let mut axes = Vec::new();
        if self.spatial_attention {
            axes.push(AttentionAxis::Spatial);
        }
        if self.channel_attention {
            axes.push(AttentionAxis::Channel);
        }
        axes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        for r in 2..=4 {
            ModelConfig::base(r).validate().unwrap();
            ModelConfig::large(r).validate().unwrap();
            ModelConfig::tiny(r).validate().unwrap();
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let odd = ModelConfig {
            channels: 47,
            ..Default::default()
        };
        assert!(matches!(odd.validate(), Err(Error::Config(_))));
        let idx = ModelConfig {
            prior_injection_indices: vec![7],
            ..Default::default()
        };
        assert!(idx.validate().is_err());
        let none = ModelConfig {
            local_branch: false,
            global_branch: false,
            ..Default::default()
        };
        assert!(none.validate().is_err());
        assert!(ModelConfig::base(5).validate().is_err());
        let empty = ModelConfig {
            n_glcm: 0,
            prior_injection_indices: vec![],
            ..Default::default()
        };
        assert!(empty.validate().is_err());
    }

    #[test]
    fn shift_kept_rounding() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.shift_kept(24), 8);
        assert_eq!(cfg.shift_kept(32), 16);
        assert_eq!(cfg.shift_kept(4), 4);
        let all = ModelConfig {
            kept_fraction: 0.0,
            ..Default::default()
        };
        assert_eq!(all.shift_kept(8), 0);
        for c in 0..80 {
            assert_eq!((c - cfg.shift_kept(c)) % 8, 0);
        }
    }

    #[test]
    fn json_round_trip_and_partial_fields() {
        let cfg = ModelConfig::tiny(3);
        assert_eq!(ModelConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let partial = ModelConfig::from_json(r#"{"scale": 4, "shift_mode": "conv3"}"#).unwrap();
        assert_eq!(partial.scale, 4);
        assert_eq!(partial.shift_mode, ShiftMode::Conv3);
        assert_eq!(partial.channels, 48);
        assert!(ModelConfig::from_json(r#"{"scael": 4}"#).is_err());
    }
}
