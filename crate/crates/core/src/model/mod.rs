//! The enhancement network: a speaker-specific masking (SSM) network and a
//! causal transformer masking enhancer, with a switch selecting where the
//! speaker mask enters the enhancer.

mod check;
mod forward;
mod params;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::speaker::EMBEDDING_DIM;

pub use forward::{
    apply_mask, enhance_magnitude, ossem_forward, ossem_forward_tape, se_forward, ssm_forward, ssm_forward_tape, Forward, Mask,
};
pub use check::model_grad_check;
pub use params::{Bound, Param, ParamSet, Partition};

/// Where the speaker mask multiplies the signal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    /// Noisy spectrogram, before the encoder.
    Pre,
    /// Encoder output, before the first attention block.
    Mid1,
    /// Last attention block output, before the decoder.
    Mid2,
    /// Decoder output.
    Last,
    /// No mask network at all.
    Non,
}

/// A position in the enhancer where a mask may be applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Site {
    EncoderIn,
    AttentionIn,
    DecoderIn,
    DecoderOut,
}

impl Site {
    pub const ALL: [Site; 4] = [Site::EncoderIn, Site::AttentionIn, Site::DecoderIn, Site::DecoderOut];
}

impl Placement {
    pub fn site(self) -> Option<Site> {
        match self {
            Placement::Pre => Some(Site::EncoderIn),
            Placement::Mid1 => Some(Site::AttentionIn),
            Placement::Mid2 => Some(Site::DecoderIn),
            Placement::Last => Some(Site::DecoderOut),
            Placement::Non => None,
        }
    }

    pub fn is_active(self, site: Site) -> bool {
        self.site() == Some(site)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Placement::Pre => "pre",
            Placement::Mid1 => "mid1",
            Placement::Mid2 => "mid2",
            Placement::Last => "last",
            Placement::Non => "non",
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Placement::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown placement {s:?}; expected pre, mid1, mid2, last or non")))
    }
}

/// Network hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Spectrogram bins `F`.
    pub freq_bins: usize,
    pub emb_dim: usize,
    pub ssm_hidden: [usize; 2],
    /// Transformer width `D`.
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub blocks: usize,
    pub conv_layers: usize,
    pub conv_kernel: usize,
    pub causal: bool,
    pub placement: Placement,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    /// 512-sample frames, eight 64-dimensional heads, four blocks.
    fn default() -> Self {
        Self {
            freq_bins: 257,
            emb_dim: EMBEDDING_DIM,
            ssm_hidden: [256, 256],
            d_model: 512,
            heads: 8,
            ff_dim: 1024,
            blocks: 4,
            conv_layers: 4,
            conv_kernel: 3,
            causal: true,
            placement: Placement::Pre,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Single-core scale: 256-sample frames, width 64, one block.
    pub fn desk() -> Self {
        Self {
            freq_bins: 129,
            ssm_hidden: [64, 64],
            d_model: 64,
            heads: 4,
            ff_dim: 128,
            blocks: 1,
            ..Self::default()
        }
    }

    /// Unit-test scale.
    pub fn tiny() -> Self {
        Self {
            freq_bins: 33,
            ssm_hidden: [16, 16],
            d_model: 32,
            heads: 4,
            ff_dim: 32,
            blocks: 1,
            ..Self::default()
        }
    }

    /// Width of the signal at the active mask site.
    pub fn mask_width(&self) -> Option<usize> {
        self.placement.site().map(|s| self.site_width(s))
    }

    pub fn site_width(&self, site: Site) -> usize {
        match site {
            Site::EncoderIn | Site::DecoderOut => self.freq_bins,
            Site::AttentionIn | Site::DecoderIn => self.d_model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("freq_bins", self.freq_bins),
            ("emb_dim", self.emb_dim),
            ("ssm_hidden[0]", self.ssm_hidden[0]),
            ("ssm_hidden[1]", self.ssm_hidden[1]),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("conv_layers", self.conv_layers),
            ("conv_kernel", self.conv_kernel),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Hyperparameter(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Hyperparameter(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            return Err(Error::Hyperparameter("ln_eps must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placement_parsing() {
        for p in Placement::ALL {
            assert_eq!(p.to_string().parse::<Placement>().unwrap(), p);
        }
        assert!("middle".parse::<Placement>().is_err());
        assert_eq!(serde_json::to_string(&Placement::Mid2).unwrap(), "\"mid2\"");
    }

    #[test]
    fn site_table() {
        let active = |p: Placement| Site::ALL.map(|s| p.is_active(s));
        assert_eq!(active(Placement::Mid2), [false, false, true, false]);
        assert_eq!(active(Placement::Pre), [true, false, false, false]);
        assert_eq!(active(Placement::Non), [false; 4]);
    }

    #[test]
    fn widths_follow_placement() {
        let mut cfg = ModelConfig::desk();
        for (p, w) in [
            (Placement::Pre, Some(129)),
            (Placement::Mid1, Some(64)),
            (Placement::Mid2, Some(64)),
            (Placement::Last, Some(129)),
            (Placement::Non, None),
        ] {
            cfg.placement = p;
            assert_eq!(cfg.mask_width(), w);
        }
    }

    #[test]
    fn full_scale_attention_width() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.d_model / cfg.heads, 64);
        assert_eq!(cfg.heads, 8);
        assert_eq!(cfg.conv_layers, 4);
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = ModelConfig {
            heads: 5,
            ..ModelConfig::tiny()
        };
        assert!(matches!(cfg.validate(), Err(Error::Hyperparameter(_))));
        let cfg: std::result::Result<ModelConfig, _> = serde_json::from_str(r#"{"bogus": 1}"#);
        assert!(cfg.is_err());
    }
}
