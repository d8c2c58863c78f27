//! Overlap and surface-distance metrics on binary region masks.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Evaluation regions, in model channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Region {
    /// Whole tumor.
    Wt,
    /// Tumor core.
    Tc,
    /// Enhancing tumor.
    Et,
}

impl Region {
    pub const CHANNEL_ORDER: [Region; 3] = [Region::Wt, Region::Tc, Region::Et];

    pub fn key(self) -> &'static str {
        match self {
            Region::Wt => "wt",
            Region::Tc => "tc",
            Region::Et => "et",
        }
    }
}

/// A binary volume in row-major `(D, H, W)` order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    dims: [usize; 3],
    voxels: Vec<bool>,
}

impl Mask {
    pub fn new(dims: [usize; 3], voxels: Vec<bool>) -> Result<Self> {
        if voxels.len() != dims.iter().product::<usize>() {
            return Err(Error::shape(
                "mask",
                format!("{} voxels for extents {dims:?}", voxels.len()),
            ));
        }
        Ok(Self { dims, voxels })
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        Self {
            dims,
            voxels: vec![false; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: [usize; 3], f: impl Fn([usize; 3]) -> bool) -> Self {
        let mut voxels = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    voxels.push(f([z, y, x]));
                }
            }
        }
        Self { dims, voxels }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> &[bool] {
        &self.voxels
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.voxels.iter().any(|&v| v)
    }

    fn index(&self, p: [usize; 3]) -> usize {
        (p[0] * self.dims[1] + p[1]) * self.dims[2] + p[2]
    }

    pub fn get(&self, p: [usize; 3]) -> bool {
        self.voxels[self.index(p)]
    }

    /// Foreground voxels with at least one face neighbour outside the mask
    /// (voxels beyond the volume border count as outside).
    pub fn surface(&self) -> Mask {
        let [d, h, w] = self.dims;
        Mask::from_fn(self.dims, |[z, y, x]| {
            if !self.get([z, y, x]) {
                return false;
            }
            let outside = |dz: isize, dy: isize, dx: isize| {
                let (nz, ny, nx) = (z as isize + dz, y as isize + dy, x as isize + dx);
                if nz < 0 || ny < 0 || nx < 0 || nz >= d as isize || ny >= h as isize || nx >= w as isize {
                    return true;
                }
                !self.get([nz as usize, ny as usize, nx as usize])
            };
            outside(-1, 0, 0)
                || outside(1, 0, 0)
                || outside(0, -1, 0)
                || outside(0, 1, 0)
                || outside(0, 0, -1)
                || outside(0, 0, 1)
        })
    }

    /// Coordinates of foreground voxels.
    pub fn points(&self) -> Vec<[usize; 3]> {
        let mut out = Vec::new();
        for z in 0..self.dims[0] {
            for y in 0..self.dims[1] {
                for x in 0..self.dims[2] {
                    if self.get([z, y, x]) {
                        out.push([z, y, x]);
                    }
                }
            }
        }
        out
    }
}

/// `2|P ∩ T| / (|P| + |T|)`; two empty masks score 1.
pub fn dice_metric(pred: &Mask, target: &Mask) -> Result<f64> {
    if pred.dims != target.dims {
        return Err(Error::shape("dice_metric", format!("{:?} vs {:?}", pred.dims, target.dims)));
    }
    let inter = pred.voxels.iter().zip(&target.voxels).filter(|(a, b)| **a && **b).count();
    let total = pred.count() + target.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Squared Euclidean distance from `v` to the nearest finite sample of `f`
/// along one line with voxel pitch `s` (lower envelope of parabolas).
fn edt_line(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, zb: &mut Vec<f64>) {
    v.clear();
    zb.clear();
    let pos = |q: usize| q as f64 * s;
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    zb.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let x = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
                    if x <= *zb.last().expect("paired with v") {
                        v.pop();
                        zb.pop();
                    } else {
                        v.push(q);
                        zb.push(x);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && zb[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Squared distance in millimetres from every voxel to the nearest foreground
/// voxel of `seeds` (infinite when `seeds` is empty).
pub fn squared_distance_transform(seeds: &Mask, spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = seeds.dims;
    let mut g: Vec<f64> = seeds
        .voxels
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();
    let n_max = d.max(h).max(w);
    let (mut line, mut out) = (vec![0.0; n_max], vec![0.0; n_max]);
    let (mut v, mut zb) = (Vec::new(), Vec::new());
    let strides = [h * w, w, 1];
    let extents = [d, h, w];
    for axis in [2, 1, 0] {
        let n = extents[axis];
        let stride = strides[axis];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let c = [z, y, x];
                    if c[axis] != 0 {
                        continue;
                    }
                    let base = z * strides[0] + y * strides[1] + x;
                    for i in 0..n {
                        line[i] = g[base + i * stride];
                    }
                    edt_line(&line[..n], spacing[axis], &mut out[..n], &mut v, &mut zb);
                    for i in 0..n {
                        g[base + i * stride] = out[i];
                    }
                }
            }
        }
    }
    g
}

/// Linear-interpolated percentile of an unsorted sample, `q` in `[0, 100]`.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(values.len() - 1);
    values[lo] + (pos - lo as f64) * (values[hi] - values[lo])
}

/// Length of the volume diagonal in millimetres.
pub fn volume_diagonal(dims: [usize; 3], spacing: [f64; 3]) -> f64 {
    dims.iter()
        .zip(spacing)
        .map(|(&n, s)| (n as f64 * s).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// 95th percentile of the pooled surface distances from each mask to the
/// other. Both empty gives 0; one empty gives `empty_penalty`, defaulting to
/// the volume diagonal.
pub fn hd95_metric(pred: &Mask, target: &Mask, spacing: [f64; 3], empty_penalty: Option<f64>) -> Result<f64> {
    if pred.dims != target.dims {
        return Err(Error::shape("hd95_metric", format!("{:?} vs {:?}", pred.dims, target.dims)));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::invalid(format!("voxel spacing must be positive, got {spacing:?}")));
    }
    match (pred.is_empty(), target.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => {
            return Ok(empty_penalty.unwrap_or_else(|| volume_diagonal(pred.dims, spacing)))
        }
        _ => {}
    }
    let sp = pred.surface();
    let st = target.surface();
    let to_t = squared_distance_transform(&st, spacing);
    let to_p = squared_distance_transform(&sp, spacing);
    let mut dists: Vec<f64> = sp
        .voxels
        .iter()
        .zip(&to_t)
        .filter(|(b, _)| **b)
        .map(|(_, d)| d.sqrt())
        .chain(st.voxels.iter().zip(&to_p).filter(|(b, _)| **b).map(|(_, d)| d.sqrt()))
        .collect();
    Ok(percentile(&mut dists, 95.0))
}

/// Binarize each channel of `(3, D, H, W)` probabilities at `p >= threshold`.
pub fn region_extract<T: Scalar>(probs: &Tensor<T>, threshold: f64) -> Result<[Mask; 3]> {
    let dims = probs.dims3("region_extract")?;
    if probs.channels() != 3 {
        return Err(Error::shape(
            "region_extract",
            format!("expected 3 region channels, got {}", probs.channels()),
        ));
    }
    Ok(std::array::from_fn(|c| Mask {
        dims,
        voxels: probs.channel(c).iter().map(|&p| p.as_f64() >= threshold).collect(),
    }))
}

/// Per-region Dice and HD95 with their averages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub dice_et: f64,
    pub dice_tc: f64,
    pub dice_wt: f64,
    pub dice_avg: f64,
    pub hd95_et: f64,
    pub hd95_tc: f64,
    pub hd95_wt: f64,
    pub hd95_avg: f64,
}

impl MetricsReport {
    /// Evaluate masks given in channel order `(WT, TC, ET)`.
    pub fn evaluate(pred: &[Mask; 3], target: &[Mask; 3], spacing: [f64; 3], empty_penalty: Option<f64>) -> Result<Self> {
        let mut dice = [0.0; 3];
        let mut hd = [0.0; 3];
        for c in 0..3 {
            dice[c] = dice_metric(&pred[c], &target[c])?;
            hd[c] = hd95_metric(&pred[c], &target[c], spacing, empty_penalty)?;
        }
        let [wt, tc, et] = [0, 1, 2];
        Ok(Self {
            dice_et: dice[et],
            dice_tc: dice[tc],
            dice_wt: dice[wt],
            dice_avg: (dice[et] + dice[tc] + dice[wt]) / 3.0,
            hd95_et: hd[et],
            hd95_tc: hd[tc],
            hd95_wt: hd[wt],
            hd95_avg: (hd[et] + hd[tc] + hd[wt]) / 3.0,
        })
    }

    pub fn entries(&self) -> [(&'static str, f64); 8] {
        [
            ("dice_et", self.dice_et),
            ("dice_tc", self.dice_tc),
            ("dice_wt", self.dice_wt),
            ("dice_avg", self.dice_avg),
            ("hd95_et", self.hd95_et),
            ("hd95_tc", self.hd95_tc),
            ("hd95_wt", self.hd95_wt),
            ("hd95_avg", self.hd95_avg),
        ]
    }

    /// One `key=value` line per metric.
    pub fn to_key_value(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "region    dice      hd95 (mm)")?;
        for (name, d, h) in [
            ("ET", self.dice_et, self.hd95_et),
            ("TC", self.dice_tc, self.hd95_tc),
            ("WT", self.dice_wt, self.hd95_wt),
            ("mean", self.dice_avg, self.hd95_avg),
        ] {
            writeln!(f, "{name:<8}  {d:<8.4}  {h:.4}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(dims: [usize; 3], lo: [usize; 3], size: usize) -> Mask {
        Mask::from_fn(dims, |p| (0..3).all(|a| p[a] >= lo[a] && p[a] < lo[a] + size))
    }

    #[test]
    fn dice_conventions() {
        let a = cube([6, 6, 6], [1, 1, 1], 2);
        assert_eq!(dice_metric(&a, &a).unwrap(), 1.0);
        assert_eq!(dice_metric(&Mask::empty([6; 3]), &Mask::empty([6; 3])).unwrap(), 1.0);
        assert_eq!(dice_metric(&a, &cube([6, 6, 6], [4, 4, 4], 2)).unwrap(), 0.0);
        assert_eq!(dice_metric(&a, &cube([6, 6, 6], [1, 1, 2], 2)).unwrap(), 0.5);
    }

    #[test]
    fn hd95_of_two_points() {
        let a = Mask::from_fn([1, 1, 9], |p| p[2] == 1);
        let b = Mask::from_fn([1, 1, 9], |p| p[2] == 6);
        assert_eq!(hd95_metric(&a, &b, [1.0; 3], None).unwrap(), 5.0);
        assert_eq!(hd95_metric(&a, &a, [1.0; 3], None).unwrap(), 0.0);
    }

    #[test]
    fn hd95_empty_conventions() {
        let a = cube([4, 4, 4], [0, 0, 0], 2);
        let e = Mask::empty([4, 4, 4]);
        assert_eq!(hd95_metric(&e, &e, [1.0; 3], None).unwrap(), 0.0);
        let diag = hd95_metric(&a, &e, [1.0, 2.0, 2.0], None).unwrap();
        assert!((diag - (16.0f64 + 64.0 + 64.0).sqrt()).abs() < 1e-12);
        assert_eq!(hd95_metric(&e, &a, [1.0; 3], Some(373.0)).unwrap(), 373.0);
    }

    #[test]
    fn surface_of_solid_cube_excludes_interior() {
        let c = cube([5, 5, 5], [1, 1, 1], 3);
        assert_eq!(c.surface().count(), 27 - 1);
        let full = Mask::from_fn([3, 3, 3], |_| true);
        assert_eq!(full.surface().count(), 26);
    }

    #[test]
    fn distance_transform_is_anisotropic() {
        let seeds = Mask::from_fn([3, 4, 5], |p| p == [0, 0, 0]);
        let g = squared_distance_transform(&seeds, [2.0, 1.0, 0.5]);
        let idx = (2 * 4 + 3) * 5 + 4;
        assert!((g[idx] - (16.0 + 9.0 + 4.0)).abs() < 1e-12);
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![3.0, 1.0, 2.0, 4.0, 5.0];
        assert_eq!(percentile(&mut v, 50.0), 3.0);
        assert!((percentile(&mut v, 95.0) - 4.8).abs() < 1e-12);
    }

    #[test]
    fn threshold_is_inclusive() {
        let p = Tensor::<f64>::from_fn([3, 1, 1, 3], |i| [0.6, 0.5, 0.4][i % 3]);
        let m = region_extract(&p, 0.5).unwrap();
        assert_eq!(m[0].voxels(), &[true, true, false]);
    }

    #[test]
    fn report_keys() {
        let a = [cube([4; 3], [0; 3], 2), cube([4; 3], [0; 3], 2), cube([4; 3], [0; 3], 2)];
        let r = MetricsReport::evaluate(&a, &a, [1.0; 3], None).unwrap();
        assert_eq!(r.dice_avg, 1.0);
        assert_eq!(r.hd95_avg, 0.0);
        assert!(r.to_key_value().starts_with("dice_et=1\n"));
    }
}
