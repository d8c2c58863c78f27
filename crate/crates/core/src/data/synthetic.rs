use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::volume::Volume;

/// Modality contrast per region: `(brain, whole tumor, tumor core, enhancing)`
/// offsets for T1, T1ce, T2 and FLAIR.
const CONTRAST: [[f64; 4]; 4] = [
    [1.0, -0.3, -0.2, 0.5],
    [1.0, 0.1, 0.2, 1.0],
    [1.0, 0.8, -0.2, 0.1],
    [1.0, 1.0, -0.4, 0.0],
];

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [usize; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] as f64 - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    fn scaled(&self, f: f64) -> Self {
        Self {
            center: self.center,
            radii: self.radii.map(|r| r * f),
        }
    }
}

/// A four-modality image and its `(WT, TC, ET)` label volume built from
/// nested ellipsoids inside a brain-shaped support, with additive noise.
/// Voxels outside the support are exactly zero in every modality.
pub fn synthetic_case(dims: [usize; 3], seed: u64) -> Result<(Volume, Volume)> {
    let mut rng = Rng::new(seed);
    let half = dims.map(|n| n as f64 / 2.0);
    let brain = Ellipsoid {
        center: half.map(|c| c - 0.5),
        radii: half.map(|c| c * 0.92),
    };
    let wt = Ellipsoid {
        center: std::array::from_fn(|a| half[a] - 0.5 + rng.uniform_in(-0.15, 0.15) * half[a]),
        radii: std::array::from_fn(|a| half[a] * rng.uniform_in(0.5, 0.62)),
    };
    let tc = wt.scaled(rng.uniform_in(0.62, 0.72));
    let et = tc.scaled(rng.uniform_in(0.62, 0.72));
    let [d, h, w] = dims;
    let n = d * h * w;
    let mut label = vec![0.0f32; 3 * n];
    let mut region = vec![0u8; n];
    let mut inside = vec![false; n];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z, y, x];
                let i = (z * h + y) * w + x;
                inside[i] = brain.contains(p) || wt.contains(p);
                let r = [wt.contains(p), tc.contains(p), et.contains(p)];
                for (k, &on) in r.iter().enumerate() {
                    if on {
                        label[k * n + i] = 1.0;
                        region[i] = k as u8 + 1;
                    }
                }
            }
        }
    }
    let mut image = vec![0.0f32; 4 * n];
    for m in 0..4 {
        for i in 0..n {
            let noise = 0.05 * rng.normal();
            if !inside[i] {
                continue;
            }
            let c = &CONTRAST[m];
            let level = c[0] + c[1..=region[i] as usize].iter().sum::<f64>();
            image[m * n + i] = (level + noise) as f32;
        }
    }
    Ok((
        Volume::new(Tensor::new([4, d, h, w], image)?, [1.0; 3])?,
        Volume::new(Tensor::new([3, d, h, w], label)?, [1.0; 3])?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regions_are_nested_and_non_empty() {
        let (img, lab) = synthetic_case([24, 24, 24], 3).unwrap();
        let n = 24 * 24 * 24;
        let l = lab.data.data();
        for i in 0..n {
            assert!(l[i] >= l[n + i] && l[n + i] >= l[2 * n + i]);
        }
        for k in 0..3 {
            assert!(l[k * n..(k + 1) * n].contains(&1.0));
        }
        assert!(img.data.all_finite());
        assert_eq!(img.data.data()[0], 0.0);
    }

    #[test]
    fn seeded() {
        assert_eq!(synthetic_case([8, 8, 8], 5).unwrap(), synthetic_case([8, 8, 8], 5).unwrap());
        assert_ne!(synthetic_case([8, 8, 8], 5).unwrap(), synthetic_case([8, 8, 8], 6).unwrap());
    }
}
