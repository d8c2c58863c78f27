//! Wall-time scaling of the selective scan against pairwise attention.

use std::time::Instant;

use serde::Serialize;

use crate::error::Result;
use crate::rng::Rng;
use crate::ssm::selective_scan;
use crate::tensor::Tensor;

/// Softmax attention `softmax(Q K^T / sqrt(d)) V` over `(L, d)` inputs,
/// evaluated pair by pair in `O(L^2 d)`.
pub fn naive_attention(q: &Tensor<f32>, k: &Tensor<f32>, v: &Tensor<f32>) -> Result<Tensor<f32>> {
    q.expect_same_shape(k, "naive_attention")?;
    q.expect_same_shape(v, "naive_attention")?;
    let (l, d) = (q.shape()[0], q.inner_len());
    let scale = 1.0 / (d as f32).sqrt();
    let mut out = vec![0.0f32; l * d];
    let mut scores = vec![0.0f32; l];
    for i in 0..l {
        let qi = &q.data()[i * d..(i + 1) * d];
        let mut max = f32::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            let kj = &k.data()[j * d..(j + 1) * d];
            *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
            max = max.max(*s);
        }
        let mut z = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            z += *s;
        }
        let oi = &mut out[i * d..(i + 1) * d];
        for (j, &s) in scores.iter().enumerate() {
            let w = s / z;
            for (o, &vv) in oi.iter_mut().zip(&v.data()[j * d..(j + 1) * d]) {
                *o += w * vv;
            }
        }
    }
    Tensor::new([l, d], out)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct BenchConfig {
    pub runs: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub head_dim: usize,
    pub seed: u64,
    pub attention: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            runs: 5,
            d_inner: 32,
            d_state: 32,
            head_dim: 16,
            seed: 0,
            attention: true,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub length: usize,
    pub scan_seconds: f64,
    pub attention_seconds: Option<f64>,
    pub scan_output_shape: Vec<usize>,
    pub attention_output_shape: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
    /// Coefficient of determination of a least-squares line through
    /// `(length, scan_seconds)`.
    pub scan_r2: f64,
    pub attention_r2: Option<f64>,
}

impl BenchReport {
    /// `time(rows[i + 1]) / time(rows[i])` for the scan.
    pub fn scan_ratios(&self) -> Vec<f64> {
        self.rows.windows(2).map(|w| w[1].scan_seconds / w[0].scan_seconds).collect()
    }

    pub fn attention_ratios(&self) -> Vec<f64> {
        self.rows
            .windows(2)
            .filter_map(|w| Some(w[1].attention_seconds? / w[0].attention_seconds?))
            .collect()
    }
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// `R^2` of the least-squares line through `(x, y)`.
pub fn linear_r2(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return 1.0;
    }
    sxy * sxy / (sxx * syy)
}

/// Shortest wall time of one timed sample; fast calls are repeated to reach it.
const MIN_SAMPLE_SECONDS: f64 = 0.02;

struct Timed<'a> {
    f: Box<dyn FnMut() -> Result<Vec<usize>> + 'a>,
    reps: usize,
    times: Vec<f64>,
    shape: Vec<usize>,
}

impl<'a> Timed<'a> {
    /// Warm up once and pick the repetition count.
    fn new(mut f: impl FnMut() -> Result<Vec<usize>> + 'a) -> Result<Self> {
        let t = Instant::now();
        let shape = f()?;
        let once = t.elapsed().as_secs_f64().max(1e-9);
        Ok(Self {
            f: Box::new(f),
            reps: ((MIN_SAMPLE_SECONDS / once).ceil() as usize).max(1),
            times: Vec::new(),
            shape,
        })
    }

    fn sample(&mut self) -> Result<()> {
        let t = Instant::now();
        for _ in 0..self.reps {
            (self.f)()?;
        }
        self.times.push(t.elapsed().as_secs_f64() / self.reps as f64);
        Ok(())
    }
}

/// Median wall time of the scan (and optionally the attention baseline) per
/// sequence length. Runs are interleaved across lengths so that slow drift of
/// the machine affects every length alike.
pub fn bench_scan(lengths: &[usize], cfg: &BenchConfig) -> Result<BenchReport> {
    struct Inputs {
        scan: [Tensor<f32>; 6],
        qkv: Option<[Tensor<f32>; 3]>,
    }
    let (d, n) = (cfg.d_inner, cfg.d_state);
    let inputs: Vec<Inputs> = lengths
        .iter()
        .map(|&l| {
            let mut rng = Rng::new(cfg.seed ^ l as u64);
            let mut t = |shape: [usize; 2], lo: f64, hi: f64| Tensor::from_fn(shape, |_| rng.uniform_in(lo, hi) as f32);
            let scan = [
                t([d, l], -1.0, 1.0),
                t([d, l], 0.01, 0.5),
                t([d, n], -2.0, -0.1),
                t([n, l], -1.0, 1.0),
                t([n, l], -1.0, 1.0),
                Tensor::from_fn([d], |_| 1.0f32),
            ];
            let hd = cfg.head_dim;
            let qkv = cfg
                .attention
                .then(|| [t([l, hd], -1.0, 1.0), t([l, hd], -1.0, 1.0), t([l, hd], -1.0, 1.0)]);
            Inputs { scan, qkv }
        })
        .collect();
    let mut scans = Vec::with_capacity(lengths.len());
    let mut attns = Vec::with_capacity(lengths.len());
    for inp in &inputs {
        let [x, delta, a, b, c, skip] = &inp.scan;
        scans.push(Timed::new(move || Ok(selective_scan(x, delta, a, b, c, skip)?.shape().to_vec()))?);
        attns.push(match &inp.qkv {
            Some([q, k, v]) => Some(Timed::new(move || Ok(naive_attention(q, k, v)?.shape().to_vec()))?),
            None => None,
        });
    }
    for _ in 0..cfg.runs.max(1) {
        for (s, a) in scans.iter_mut().zip(attns.iter_mut()) {
            s.sample()?;
            if let Some(a) = a {
                a.sample()?;
            }
        }
    }
    let rows: Vec<BenchRow> = lengths
        .iter()
        .zip(scans.into_iter().zip(attns))
        .map(|(&length, (s, a))| BenchRow {
            length,
            scan_seconds: median(s.times),
            scan_output_shape: s.shape,
            attention_output_shape: a.as_ref().map(|a| a.shape.clone()),
            attention_seconds: a.map(|a| median(a.times)),
        })
        .collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.length as f64).collect();
    let scan: Vec<f64> = rows.iter().map(|r| r.scan_seconds).collect();
    let attention_r2 = cfg.attention.then(|| {
        let ys: Vec<f64> = rows.iter().filter_map(|r| r.attention_seconds).collect();
        linear_r2(&xs, &ys)
    });
    Ok(BenchReport {
        config: *cfg,
        scan_r2: linear_r2(&xs, &scan),
        attention_r2,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_of_identical_keys_averages_values() {
        let q = Tensor::from_fn([3, 2], |i| i as f32);
        let k = Tensor::from_fn([3, 2], |_| 1.0);
        let v = Tensor::from_fn([3, 2], |i| (i / 2) as f32);
        let o = naive_attention(&q, &k, &v).unwrap();
        assert!(o.data().iter().all(|&x| (x - 1.0).abs() < 1e-6));
    }

    #[test]
    fn length_one_runs_both() {
        let r = bench_scan(&[1], &BenchConfig { runs: 1, ..Default::default() }).unwrap();
        assert_eq!(r.rows[0].scan_output_shape, vec![32, 1]);
        assert_eq!(r.rows[0].attention_output_shape.as_deref(), Some(&[1, 16][..]));
    }

    #[test]
    fn r2_of_a_line_is_one() {
        assert!((linear_r2(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
    }
}
