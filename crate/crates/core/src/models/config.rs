use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which refiner sits between embedding and post-processing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Transformer backbone.
    Llm,
    /// Two wide dense layers over the flattened sequence.
    Small,
    /// No backbone at all.
    Identical,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Llm, Variant::Small, Variant::Identical];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Llm => "llm",
            Variant::Small => "small",
            Variant::Identical => "identical",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "llm" => Ok(Variant::Llm),
            "small" => Ok(Variant::Small),
            "identical" => Ok(Variant::Identical),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected llm, small or identical)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_em: usize,
    pub d_ff: usize,
    /// Sequence length `Nc / P`.
    pub l_tokens: usize,
    pub variant: Variant,
    pub freeze: bool,
    pub causal: bool,
    /// Width of the two hidden layers of the small variant.
    pub small_hidden: usize,
    pub leaky_slope: f64,
}

impl BackboneConfig {
    /// Desk-scale defaults: 4 layers, 4 heads, width 128, feed-forward 512.
    pub fn new(variant: Variant, l_tokens: usize) -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_em: 128,
            d_ff: 512,
            l_tokens,
            variant,
            freeze: variant == Variant::Llm,
            causal: false,
            small_hidden: 2048,
            leaky_slope: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_em == 0 || self.l_tokens == 0 {
            return bad("d_em and l_tokens must be positive".into());
        }
        if !self.d_em.is_multiple_of(2) {
            return bad(format!("d_em must be even, got {}", self.d_em));
        }
        if self.variant == Variant::Llm {
            if self.n_heads == 0 || !self.d_em.is_multiple_of(self.n_heads) {
                return bad(format!(
                    "d_em {} is not divisible by n_heads {}",
                    self.d_em, self.n_heads
                ));
            }
            if self.d_ff == 0 {
                return bad("d_ff must be positive".into());
            }
        }
        if self.variant == Variant::Small && self.small_hidden == 0 {
            return bad("small_hidden must be positive".into());
        }
        if !self.leaky_slope.is_finite() {
            return bad("leaky_slope must be finite".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_em / self.n_heads.max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("gpt".parse::<Variant>().is_err());
    }

    #[test]
    fn validation() {
        let ok = BackboneConfig::new(Variant::Llm, 32);
        ok.validate().unwrap();
        assert_eq!(ok.head_dim(), 32);
        let mut c = ok.clone();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.d_em = 7;
        c.n_heads = 7;
        assert!(c.validate().is_err());
        let mut c = ok;
        c.variant = Variant::Identical;
        c.n_heads = 3;
        c.validate().unwrap();
    }
}
