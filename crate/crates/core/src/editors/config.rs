use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_EPOCHS: usize = 10;
/// Size of the fixed regularization sample drawn from R per run.
pub const REG_SAMPLE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Full,
    Lora,
    Senses,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::Lora => "lora",
            Method::Senses => "senses",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditConfig {
    pub method: Method,
    pub learning_rate: f64,
    /// Weight λ of the KL term.
    pub kl_weight: f64,
    pub epochs: usize,
    /// Canonical examples per optimizer step.
    #[serde(default = "one")]
    pub batch_size: usize,
    #[serde(default)]
    pub lora_rank: Option<usize>,
    /// Number of consecutive layers adapted, centred on the middle layer.
    #[serde(default)]
    pub lora_layers: Option<usize>,
    /// Senses selected per canonical example.
    #[serde(default)]
    pub sense_k_sel: Option<usize>,
    /// Weight λ_sel of the regularization term in sense importance.
    #[serde(default)]
    pub sense_reg: Option<f64>,
    #[serde(default = "clip")]
    pub clip_norm: f64,
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn clip() -> f64 {
    1.0
}

impl EditConfig {
    fn base(method: Method, learning_rate: f64, kl_weight: f64, seed: u64) -> Self {
        EditConfig {
            method,
            learning_rate,
            kl_weight,
            epochs: MAX_EPOCHS,
            batch_size: 1,
            lora_rank: None,
            lora_layers: None,
            sense_k_sel: None,
            sense_reg: None,
            clip_norm: 1.0,
            seed,
        }
    }

    pub fn full(learning_rate: f64, kl_weight: f64, seed: u64) -> Self {
        EditConfig::base(Method::Full, learning_rate, kl_weight, seed)
    }

    pub fn lora(learning_rate: f64, kl_weight: f64, rank: usize, layers: usize, seed: u64) -> Self {
        EditConfig {
            lora_rank: Some(rank),
            lora_layers: Some(layers),
            ..EditConfig::base(Method::Lora, learning_rate, kl_weight, seed)
        }
    }

    pub fn senses(learning_rate: f64, kl_weight: f64, k_sel: usize, sense_reg: f64, seed: u64) -> Self {
        EditConfig {
            sense_k_sel: Some(k_sel),
            sense_reg: Some(sense_reg),
            ..EditConfig::base(Method::Senses, learning_rate, kl_weight, seed)
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: EditConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.epochs > MAX_EPOCHS {
            return fail("epochs must be in 1..=10");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return fail("learning_rate must be finite and non-negative");
        }
        if !(self.kl_weight > 0.0) || !self.kl_weight.is_finite() {
            return fail("kl_weight must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return fail("clip_norm must be positive");
        }
        let lora = self.lora_rank.is_some() || self.lora_layers.is_some();
        let senses = self.sense_k_sel.is_some() || self.sense_reg.is_some();
        match self.method {
            Method::Lora => {
                if self.lora_rank.unwrap_or(0) == 0 || self.lora_layers.unwrap_or(0) == 0 {
                    return fail("lora needs lora_rank >= 1 and lora_layers >= 1");
                }
            }
            _ if lora => return fail("lora fields are only valid for method lora"),
            _ => {}
        }
        match self.method {
            Method::Senses => {
                if self.sense_k_sel.unwrap_or(0) == 0 {
                    return fail("senses needs sense_k_sel >= 1");
                }
                if !self.sense_reg.is_some_and(|r| r >= 0.0 && r.is_finite()) {
                    return fail("senses needs a finite, non-negative sense_reg");
                }
            }
            _ if senses => return fail("sense fields are only valid for method senses"),
            _ => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructors_validate() {
        EditConfig::full(1e-4, 0.5, 0).validate().unwrap();
        EditConfig::lora(1e-3, 0.5, 4, 2, 0).validate().unwrap();
        EditConfig::senses(1e-2, 0.5, 8, 1000.0, 0).validate().unwrap();
    }

    #[test]
    fn invariants_are_enforced() {
        let bad = [
            EditConfig { epochs: 11, ..EditConfig::full(1e-4, 0.5, 0) },
            EditConfig { kl_weight: 0.0, ..EditConfig::full(1e-4, 0.5, 0) },
            EditConfig { lora_rank: Some(0), ..EditConfig::lora(1e-3, 0.5, 4, 1, 0) },
            EditConfig { sense_k_sel: Some(3), ..EditConfig::full(1e-4, 0.5, 0) },
            EditConfig { lora_rank: Some(3), ..EditConfig::senses(1e-2, 0.5, 8, 1000.0, 0) },
            EditConfig { sense_reg: None, ..EditConfig::senses(1e-2, 0.5, 8, 1000.0, 0) },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn json_round_trip() {
        let c = EditConfig::senses(0.01, 0.3, 6, 1000.0, 9);
        let text = serde_json::to_string(&c).unwrap();
        assert!(text.contains("\"senses\""));
        assert_eq!(EditConfig::from_json(&text).unwrap(), c);
        assert!(EditConfig::from_json(r#"{"method":"full"}"#).is_err());
    }
}
