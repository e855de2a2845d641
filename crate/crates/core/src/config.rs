//! Resolved settings of one compiler run.

use serde::{Deserialize, Serialize};

use crate::cost::Calibration;
use crate::lowering::QuantConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub merge_enabled: bool,
    /// Minimum scale (bits) a ciphertext keeps after a rescale.
    pub waterline_bits: u32,
    #[serde(flatten)]
    pub quant: QuantConfig,
    pub calibration: Calibration,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let quant = QuantConfig::default();
        PipelineConfig {
            merge_enabled: true,
            waterline_bits: quant.input_scale_bits,
            quant,
            calibration: Calibration::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let q = &self.quant;
        for (name, v) in [
            ("waterline_bits", self.waterline_bits),
            ("input_scale_bits", q.input_scale_bits),
            ("weight_scale_bits", q.weight_scale_bits),
            ("mask_scale_bits", q.mask_scale_bits),
            ("coeff_scale_bits", q.coeff_scale_bits),
            ("prime_bits", q.prime_bits),
        ] {
            if v == 0 {
                return Err(ConfigError(format!("{name} must be positive")));
            }
        }
        let c = &self.calibration;
        let ok = |k: f64| k >= 0.0 && k.is_finite();
        if !(ok(c.k1) && ok(c.k2)) || c.k1 + c.k2 == 0.0 {
            return Err(ConfigError(
                "calibration constants must be non-negative and not both zero".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_flat() {
        let c = PipelineConfig::default();
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains("\"input_scale_bits\":25"));
        assert!(json.contains("\"waterline_bits\":25"));
        let back: PipelineConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
        c.validate().unwrap();
    }

    #[test]
    fn zero_scales_are_rejected() {
        let mut c = PipelineConfig::default();
        c.quant.prime_bits = 0;
        assert!(c.validate().is_err());
    }
}
