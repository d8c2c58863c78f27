use serde::Serialize;

use crate::error::Result;
use crate::nn::ParamStore;
use crate::scalar::Scalar;

use super::config::ModelConfig;
use super::net::MmriNet;

/// Trainable scalars per submodule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub encoder: usize,
    pub bottleneck: usize,
    /// Decoder stages without their refinement modules.
    pub decoder: usize,
    pub dpfr: usize,
    pub pfa: usize,
    pub head: usize,
    pub aux_heads: usize,
    /// Everything, including the deep-supervision heads.
    pub total: usize,
    /// Parameters used at inference: `total - aux_heads`.
    pub inference: usize,
}

impl ParamBreakdown {
    pub fn of<T: Scalar>(store: &ParamStore<T>) -> Self {
        let mut b = Self::default();
        for p in store.params() {
            let n = p.value.numel();
            let name = p.name.as_str();
            let slot = if name.starts_with("encoder.") {
                &mut b.encoder
            } else if name.starts_with("bottleneck.") {
                &mut b.bottleneck
            } else if name.starts_with("decoder.") && name.contains(".dpfr.") {
                &mut b.dpfr
            } else if name.starts_with("decoder.") {
                &mut b.decoder
            } else if name.starts_with("pfa.") {
                &mut b.pfa
            } else if name.starts_with("aux.") {
                &mut b.aux_heads
            } else {
                &mut b.head
            };
            *slot += n;
            b.total += n;
        }
        b.inference = b.total - b.aux_heads;
        b
    }

    /// `(label, count)` rows in display order.
    pub fn rows(&self) -> [(&'static str, usize); 9] {
        [
            ("encoder", self.encoder),
            ("bottleneck", self.bottleneck),
            ("decoder", self.decoder),
            ("dpfr", self.dpfr),
            ("pfa", self.pfa),
            ("head", self.head),
            ("aux_heads", self.aux_heads),
            ("total", self.total),
            ("inference", self.inference),
        ]
    }
}

/// Exact trainable parameter count of a configuration.
pub fn param_count(config: &ModelConfig) -> Result<ParamBreakdown> {
    let (_, store) = MmriNet::new::<f32>(config.clone(), 0)?;
    Ok(ParamBreakdown::of(&store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Builder, Conv3d, Init};
    use crate::ops::ConvSpec;
    use crate::Rng;

    #[test]
    fn pointwise_projection_count() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = Rng::new(0);
        Conv3d::new(&mut Builder::new(&mut store, &mut rng), ConvSpec::new(16, 3, 1), Init::FanIn);
        assert_eq!(store.num_scalars(), 51);
    }

    #[test]
    fn default_budget() {
        let full = param_count(&ModelConfig::default()).unwrap();
        assert_eq!(full.rows().iter().take(7).map(|r| r.1).sum::<usize>(), full.total);
        assert!((2_100_000..=2_900_000).contains(&full.total), "{full:?}");
        let no_aux = param_count(&ModelConfig {
            deep_supervision: false,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(no_aux.total, full.inference);
        assert_eq!(no_aux.aux_heads, 0);
    }
}
