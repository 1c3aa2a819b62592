//! Inference cost in floating-point operations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCostSpec {
    pub model_id: String,
    /// Parameters touched per token (all of them for dense models).
    pub active_params: f64,
    pub prompt_tokens: i64,
    pub generated_tokens: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Decoder,
    Encoder,
}

impl ModelCostSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.active_params.is_finite() && self.active_params >= 0.0) {
            return Err(Error::Config(format!("active_params must be >= 0, got {}", self.active_params)));
        }
        if self.prompt_tokens < 0 || self.generated_tokens < 0 {
            return Err(Error::Config(format!(
                "token counts must be >= 0, got prompt={} generated={}",
                self.prompt_tokens, self.generated_tokens
            )));
        }
        Ok(())
    }

    pub fn total_tokens(&self) -> i64 {
        self.prompt_tokens + self.generated_tokens
    }
}

/// `2 * active_params * tokens`, assuming a KV cache so each token passes
/// through the network once. Encoders use the same count over the tokens
/// they process.
pub fn estimate_flops(spec: &ModelCostSpec, _arch: Arch) -> Result<f64> {
    spec.validate()?;
    Ok(2.0 * spec.active_params * spec.total_tokens() as f64)
}

/// Reference point for one model: 1000 prompt tokens plus 1000 generated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PublishedCost {
    pub model_id: &'static str,
    pub arch: Arch,
    pub active_params: f64,
    pub total_tokens: i64,
    pub flops: f64,
}

pub const PUBLISHED: [PublishedCost; 5] = [
    PublishedCost {
        model_id: "gpt-oss-20b",
        arch: Arch::Decoder,
        active_params: 3.6e9,
        total_tokens: 2000,
        flops: 1.44e13,
    },
    PublishedCost {
        model_id: "Qwen3-8B",
        arch: Arch::Decoder,
        active_params: 8.19e9,
        total_tokens: 2000,
        flops: 3.28e13,
    },
    PublishedCost {
        model_id: "DeepSeek-R1",
        arch: Arch::Decoder,
        active_params: 37e9,
        total_tokens: 2000,
        flops: 1.5e14,
    },
    PublishedCost {
        model_id: "DeBERTa",
        arch: Arch::Encoder,
        active_params: 184e6,
        total_tokens: 2000,
        flops: 4.9e11,
    },
    PublishedCost {
        model_id: "RoBERTa",
        arch: Arch::Encoder,
        active_params: 356e6,
        total_tokens: 2000,
        flops: 1.6e12,
    },
];

/// Published cost for a known model, matched case-insensitively on the id.
pub fn published_flops(model_id: &str) -> Option<PublishedCost> {
    PUBLISHED
        .iter()
        .find(|p| p.model_id.eq_ignore_ascii_case(model_id))
        .copied()
}

/// Rounds to `digits` significant figures.
pub fn round_sig(x: f64, digits: u32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let prec = digits.max(1) as usize - 1;
    format!("{x:.prec$e}").parse().expect("formatted float parses")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(params: f64, prompt: i64, generated: i64) -> ModelCostSpec {
        ModelCostSpec {
            model_id: "m".into(),
            active_params: params,
            prompt_tokens: prompt,
            generated_tokens: generated,
        }
    }

    #[test]
    fn decoder_formula() {
        assert_eq!(estimate_flops(&spec(3.6e9, 1000, 1000), Arch::Decoder).unwrap(), 1.44e13);
        let q = estimate_flops(&spec(8.19e9, 1000, 1000), Arch::Decoder).unwrap();
        assert_eq!(round_sig(q, 3), 3.28e13);
        assert_eq!(estimate_flops(&spec(3.6e9, 0, 0), Arch::Decoder).unwrap(), 0.0);
    }

    #[test]
    fn negative_counts_rejected() {
        assert!(estimate_flops(&spec(1e9, -1, 0), Arch::Decoder).is_err());
        assert!(estimate_flops(&spec(-1.0, 0, 0), Arch::Encoder).is_err());
    }

    #[test]
    fn lookup() {
        assert_eq!(published_flops("deberta").unwrap().flops, 4.9e11);
        assert_eq!(published_flops("RoBERTa").unwrap().flops, 1.6e12);
        assert!(published_flops("unknown").is_none());
    }

    #[test]
    fn sig_figs() {
        assert_eq!(round_sig(3.276e13, 2), 3.3e13);
        assert_eq!(round_sig(1.48e14, 2), 1.5e14);
        assert_eq!(round_sig(0.0, 2), 0.0);
    }
}
