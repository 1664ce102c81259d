use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which packed channels feed the guidance branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuideSource {
    #[default]
    Green,
    RedBlue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageLayout {
    /// Joint denoising and demosaicking.
    #[default]
    OneStage,
    /// Denoise the packed reference first, then demosaic it.
    DeDm,
    /// Demosaic every noisy frame first, then denoise in RGB.
    DmDe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub frames: usize,
    pub base_width: usize,
    pub gg_units: usize,
    pub gca_blocks: usize,
    pub pyramid_levels: usize,
    pub use_lstm: bool,
    pub use_multiscale_offset: bool,
    pub use_gcp_offset: bool,
    pub use_gcp_upsample: bool,
    pub use_interf: bool,
    pub guide_source: GuideSource,
    pub stage_layout: StageLayout,
    pub unet_scales: usize,
    pub unet_width: usize,
    pub lstm_hidden: usize,
    pub deform_groups: usize,
    pub deform_kernel: usize,
    pub attention_reduction: usize,
    pub lrelu_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frames: 5,
            base_width: 48,
            gg_units: 4,
            gca_blocks: 4,
            pyramid_levels: 3,
            use_lstm: true,
            use_multiscale_offset: true,
            use_gcp_offset: true,
            use_gcp_upsample: true,
            use_interf: true,
            guide_source: GuideSource::Green,
            stage_layout: StageLayout::OneStage,
            unet_scales: 3,
            unet_width: 96,
            lstm_hidden: 24,
            deform_groups: 8,
            deform_kernel: 3,
            attention_reduction: 4,
            lrelu_slope: 0.1,
        }
    }
}

impl ModelConfig {
    /// Narrow network for tests and CPU sanity runs.
    pub fn tiny() -> Self {
        ModelConfig {
            frames: 3,
            base_width: 8,
            unet_width: 8,
            lstm_hidden: 4,
            deform_groups: 2,
            ..ModelConfig::default()
        }
    }

    pub fn reference_index(&self) -> usize {
        self.frames / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames == 0 || self.frames.is_multiple_of(2) {
            return bad(format!("frames must be odd, got {}", self.frames));
        }
        if self.gg_units > self.gca_blocks {
            return bad(format!(
                "gg_units ({}) exceeds gca_blocks ({})",
                self.gg_units, self.gca_blocks
            ));
        }
        if self.pyramid_levels == 0 {
            return bad("pyramid_levels must be at least 1".into());
        }
        if self.unet_scales == 0 {
            return bad("unet_scales must be at least 1".into());
        }
        for (name, v) in [
            ("base_width", self.base_width),
            ("unet_width", self.unet_width),
            ("lstm_hidden", self.lstm_hidden),
            ("deform_groups", self.deform_groups),
            ("attention_reduction", self.attention_reduction),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.base_width.is_multiple_of(self.deform_groups) {
            return bad(format!(
                "base_width {} is not divisible by deform_groups {}",
                self.base_width, self.deform_groups
            ));
        }
        if self.deform_kernel.is_multiple_of(2) {
            return bad(format!("deform_kernel must be odd, got {}", self.deform_kernel));
        }
        if !(self.lrelu_slope >= 0.0 && self.lrelu_slope < 1.0) {
            return bad(format!("lrelu_slope must lie in [0, 1), got {}", self.lrelu_slope));
        }
        Ok(())
    }

    /// Raw height and width must be multiples of this; inputs are padded up
    /// to it internally.
    pub fn size_multiple(&self) -> usize {
        let pyr = self.pyramid_levels - 1;
        // the U-Net runs at twice the raw resolution
        let unet = self.unet_scales.saturating_sub(2);
        1 << pyr.max(unet)
    }

    /// Whether the guidance branch is needed at all.
    pub fn has_gcp_branch(&self) -> bool {
        self.gg_units > 0 || self.use_gcp_upsample || (self.use_interf && self.use_gcp_offset)
    }
}
