use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyper-parameters and ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub stage_channels: [usize; 4],
    pub num_classes: usize,
    pub dropout: f64,
    pub groups: usize,
    pub d_state: usize,
    pub se_ratio: usize,
    pub dpfr_dilation: usize,
    /// Loss weights of `(aux from D3, aux from D2, aux from D1, final)`.
    pub ds_weights: [f64; 4],
    pub dpfr: bool,
    pub pfa: bool,
    pub deep_supervision: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            stage_channels: [16, 32, 64, 128],
            num_classes: 3,
            dropout: 0.05,
            groups: 4,
            d_state: 32,
            se_ratio: 8,
            dpfr_dilation: 2,
            ds_weights: [0.2, 0.3, 0.3, 0.2],
            dpfr: true,
            pfa: true,
            deep_supervision: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.stage_channels;
        if s[0] == 0 || s.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!("stage_channels must be strictly increasing, got {s:?}")));
        }
        if s[1] != 2 * s[0] || s[2] != 2 * s[1] {
            return Err(Error::invalid(format!(
                "aggregation upsampling halves channels, so the first three stages must double: {s:?}"
            )));
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.d_state == 0 || self.dpfr_dilation == 0 {
            return Err(Error::invalid("in_channels, num_classes, d_state and dpfr_dilation must be positive"));
        }
        if self.groups == 0 || !s[3].is_multiple_of(self.groups) {
            return Err(Error::invalid(format!(
                "{} bottleneck channels are not divisible into {} groups",
                s[3], self.groups
            )));
        }
        if self.se_ratio == 0 || self.se_ratio > s[3] {
            return Err(Error::invalid(format!("se_ratio {} out of range", self.se_ratio)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        let sum: f64 = self.ds_weights.iter().sum();
        if sum != 1.0 || self.ds_weights.iter().any(|&w| w < 0.0) {
            return Err(Error::invalid(format!(
                "deep supervision weights must be non-negative and sum to 1, got {:?}",
                self.ds_weights
            )));
        }
        Ok(())
    }

    /// Spatial extents must be divisible by the total encoder stride.
    pub fn check_input(&self, shape: &[usize]) -> Result<[usize; 3]> {
        if shape.len() != 4 || shape[0] != self.in_channels {
            return Err(Error::shape(
                "model_forward",
                format!("expected ({}, D, H, W) input, got {shape:?}", self.in_channels),
            ));
        }
        let dims = [shape[1], shape[2], shape[3]];
        for (axis, &e) in ["D", "H", "W"].iter().zip(&dims) {
            if e == 0 || e % 8 != 0 {
                return Err(Error::shape(
                    "model_forward",
                    format!("axis {axis} extent {e} is not a positive multiple of 8"),
                ));
            }
        }
        Ok(dims)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
        assert_eq!(ModelConfig::default().ds_weights.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            ModelConfig {
                stage_channels: [16, 32, 32, 128],
                ..Default::default()
            },
            ModelConfig {
                groups: 3,
                ..Default::default()
            },
            ModelConfig {
                ds_weights: [0.25, 0.25, 0.25, 0.3],
                ..Default::default()
            },
            ModelConfig {
                dropout: 1.0,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn input_extents_must_divide_by_eight() {
        let c = ModelConfig::default();
        assert_eq!(c.check_input(&[4, 16, 8, 24]).unwrap(), [16, 8, 24]);
        let e = c.check_input(&[4, 16, 12, 8]).unwrap_err().to_string();
        assert!(e.contains("axis H"), "{e}");
        assert!(c.check_input(&[3, 8, 8, 8]).is_err());
    }
}
