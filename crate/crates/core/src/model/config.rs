use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Architecture wiring. `Full` is the complete network; the others are the
/// ablations: without channel compensation, and the three single-domain
/// extractors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoCc,
    TransformerOnly,
    LstmOnly,
    CnnOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoCc,
        Variant::TransformerOnly,
        Variant::LstmOnly,
        Variant::CnnOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCc => "no_cc",
            Variant::TransformerOnly => "transformer_only",
            Variant::LstmOnly => "lstm_only",
            Variant::CnnOnly => "cnn_only",
        }
    }

    pub fn has_cc(self) -> bool {
        self == Variant::Full
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| ModelError::Config(format!("unknown variant {s:?}")))
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub nt: usize,
    pub nr: usize,
    /// Samples per frame.
    pub len: usize,
    /// Extractor width `C`.
    pub width: usize,
    /// Compensation-predictor width.
    pub cc_width: usize,
    pub conv_layers: usize,
    pub transformer_blocks: usize,
    pub lstm_layers: usize,
    pub heads: usize,
    pub cc_heads: usize,
    /// FFN inner width as a multiple of the block width.
    pub ffn_mult: usize,
    pub kernel: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    /// The published 2×2 configuration with a 30-class output.
    fn default() -> Self {
        Self {
            num_classes: 30,
            nt: 2,
            nr: 2,
            len: 256,
            width: 64,
            cc_width: 32,
            conv_layers: 2,
            transformer_blocks: 2,
            lstm_layers: 2,
            heads: 4,
            cc_heads: 2,
            ffn_mult: 2,
            kernel: 3,
            variant: Variant::Full,
        }
    }
}

/// Stride-2 convolutions halve the length; later layers keep it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub stride: usize,
}

impl ModelConfig {
    /// Small network used for end-to-end gradient checks.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            num_classes,
            len: 16,
            width: 8,
            cc_width: 4,
            heads: 2,
            cc_heads: 2,
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.nt == 0 || self.nr < self.nt {
            return fail(format!(
                "need 1 <= Nt <= Nr, got Nt={} Nr={}",
                self.nt, self.nr
            ));
        }
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return fail(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            ));
        }
        if self.variant.has_cc()
            && (self.cc_width == 0
                || self.cc_heads == 0
                || !self.cc_width.is_multiple_of(self.cc_heads))
        {
            return fail(format!(
                "compensation width {} not divisible by {} heads",
                self.cc_width, self.cc_heads
            ));
        }
        if self.kernel.is_multiple_of(2) {
            return fail(format!("kernel {} must be odd", self.kernel));
        }
        if self.ffn_mult == 0 {
            return fail("ffn_mult must be positive".into());
        }
        let shrink = 1usize << self.conv_layers;
        if self.len < shrink * self.kernel {
            return fail(format!(
                "length {} too short for {} stride-2 layers of kernel {}",
                self.len, self.conv_layers, self.kernel
            ));
        }
        if !self.len.is_multiple_of(shrink) {
            return fail(format!(
                "length {} must be divisible by 2^{}",
                self.len, self.conv_layers
            ));
        }
        Ok(())
    }

    /// Token sequence length after embedding, `⌊L / 2^{K_c}⌋`.
    pub fn embedded_len(&self) -> usize {
        self.len >> self.conv_layers
    }

    /// Antennas seen by the extractor.
    pub fn extractor_antennas(&self) -> usize {
        if self.variant.has_cc() {
            self.nt
        } else {
            self.nr
        }
    }

    /// Convolution stack of the extractor. The CNN-only ablation appends
    /// stride-1 layers to approach the full model's parameter budget.
    pub fn conv_stack(&self) -> Vec<ConvLayer> {
        let mut layers = vec![ConvLayer { stride: 2 }; self.conv_layers];
        if self.variant == Variant::CnnOnly {
            let extra = 3 * (self.transformer_blocks + self.lstm_layers);
            layers.extend(std::iter::repeat_n(ConvLayer { stride: 1 }, extra));
        }
        layers
    }

    pub fn cc_conv_stack(&self) -> Vec<ConvLayer> {
        vec![ConvLayer { stride: 2 }; self.conv_layers]
    }

    /// Transformer blocks used by the extractor for this variant.
    pub fn effective_blocks(&self) -> usize {
        match self.variant {
            Variant::Full | Variant::NoCc => self.transformer_blocks,
            Variant::TransformerOnly => self.transformer_blocks + self.lstm_layers,
            Variant::LstmOnly | Variant::CnnOnly => 0,
        }
    }

    /// LSTM layers used by the extractor for this variant.
    pub fn effective_lstm_layers(&self) -> usize {
        match self.variant {
            Variant::Full | Variant::NoCc => self.lstm_layers,
            Variant::LstmOnly => self.transformer_blocks + self.lstm_layers,
            Variant::TransformerOnly | Variant::CnnOnly => 0,
        }
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny(3).validate().unwrap();
        assert_eq!(ModelConfig::default().embedded_len(), 64);
    }

    #[test]
    fn invalid_configs() {
        let base = ModelConfig::default();
        for bad in [
            ModelConfig {
                heads: 5,
                ..base.clone()
            },
            ModelConfig {
                num_classes: 1,
                ..base.clone()
            },
            ModelConfig {
                kernel: 4,
                ..base.clone()
            },
            ModelConfig {
                nt: 3,
                ..base.clone()
            },
            ModelConfig {
                len: 8,
                ..base.clone()
            },
            ModelConfig {
                len: 258,
                ..base.clone()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn variant_names_parse() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("resnet".parse::<Variant>().is_err());
    }

    #[test]
    fn single_domain_depths() {
        let c = ModelConfig::default();
        let t = c.clone().with_variant(Variant::TransformerOnly);
        assert_eq!((t.effective_blocks(), t.effective_lstm_layers()), (4, 0));
        let l = c.clone().with_variant(Variant::LstmOnly);
        assert_eq!((l.effective_blocks(), l.effective_lstm_layers()), (0, 4));
        let n = c.with_variant(Variant::CnnOnly);
        assert_eq!(n.conv_stack().len(), 14);
    }
}
