use std::path::Path;

use mmrinet::data::{augment, decode_volume, encode_volume, normalize_nonzero, random_crop, AugmentParams, Volume};
use mmrinet::loss::{dice_loss, focal_loss};
use mmrinet::metrics::{dice_metric, hd95_metric, Mask};
use mmrinet::ops::{conv3d, conv_transpose3d, dropout, ConvSpec};
use mmrinet::ssm::{flatten_volume, selective_scan, unflatten_volume, ScanOrder};
use mmrinet::{Rng, Tensor};
use proptest::prelude::*;

fn rand(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform_in(-1.0, 1.0))
}

fn dims() -> impl Strategy<Value = [usize; 3]> {
    [1usize..6, 1usize..6, 1usize..6]
}

fn mask(dims: [usize; 3], seed: u64, density: f64) -> Mask {
    let mut rng = Rng::new(seed);
    let n = dims.iter().product();
    Mask::new(dims, (0..n).map(|_| rng.bernoulli(density)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flatten_round_trips(d in dims(), c in 1usize..4, seed in any::<u64>(), k in 0usize..8) {
        let order = ScanOrder::all()[k];
        let x = rand(&[c, d[0], d[1], d[2]], &mut Rng::new(seed));
        let seq = flatten_volume(&x, order).unwrap();
        prop_assert_eq!(seq.shape(), &[c, d[0] * d[1] * d[2]]);
        let back = unflatten_volume(&seq, order, d).unwrap();
        prop_assert_eq!(back.data(), x.data());
        let (mut a, mut b) = (x.data().to_vec(), seq.data().to_vec());
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn transposed_conv_is_the_adjoint(
        cin in 1usize..4,
        cout in 1usize..4,
        kernel in 1usize..4,
        stride in 1usize..3,
        padding in 0usize..2,
        dilation in 1usize..3,
        extent in 4usize..8,
        seed in any::<u64>(),
    ) {
        let fwd = ConvSpec::new(cin, cout, kernel).stride(stride).padding(padding).dilation(dilation).bias(false);
        let adj = ConvSpec::new(cout, cin, kernel).stride(stride).padding(padding).dilation(dilation).bias(false);
        prop_assume!(fwd.output_dims([extent; 3]).is_ok());
        let out = fwd.output_dims([extent; 3]).unwrap();
        // the adjoint only reaches the input extent when no trailing rows are skipped
        prop_assume!(adj.transposed_output_dims(out).ok() == Some([extent; 3]));
        let mut rng = Rng::new(seed);
        let x = rand(&[cin, extent, extent, extent], &mut rng);
        let w = rand(&fwd.weight_shape(), &mut rng);
        let y = conv3d(&x, &fwd, &w, None).unwrap();
        let g = rand(y.shape(), &mut rng);
        let back = conv_transpose3d(&g, &adj, &w, None).unwrap();
        let (lhs, rhs) = (y.dot(&g), back.dot(&x));
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn dice_is_bounded_and_symmetric(d in dims(), s1 in any::<u64>(), s2 in any::<u64>(), p in 0.0f64..1.0) {
        let (a, b) = (mask(d, s1, p), mask(d, s2, p));
        let ab = dice_metric(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, dice_metric(&b, &a).unwrap());
        prop_assert_eq!(dice_metric(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn hd95_is_symmetric_and_zero_on_itself(d in dims(), s1 in any::<u64>(), s2 in any::<u64>()) {
        let (a, b) = (mask(d, s1, 0.4), mask(d, s2, 0.4));
        let sp = [1.0, 1.5, 0.5];
        let ab = hd95_metric(&a, &b, sp, None).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, hd95_metric(&b, &a, sp, None).unwrap());
        prop_assert_eq!(hd95_metric(&a, &a, sp, None).unwrap(), 0.0);
    }

    #[test]
    fn losses_stay_in_range(d in dims(), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let shape = [3, d[0], d[1], d[2]];
        let probs = Tensor::<f64>::from_fn(shape, |_| rng.uniform());
        let target = Tensor::<f64>::from_fn(shape, |_| f64::from(rng.bernoulli(0.5) as u8));
        let dl = dice_loss(&probs, &target).unwrap();
        prop_assert!((0.0..=1.0).contains(&dl), "{}", dl);
        prop_assert!(dice_loss(&target, &target).unwrap() < 1e-6);
        let logits = rand(&shape, &mut rng);
        prop_assert!(focal_loss(&logits, &target, 2.0).unwrap() >= 0.0);
    }

    #[test]
    fn scan_is_causal(len in 2usize..12, t in 0usize..12, seed in any::<u64>()) {
        let t = t % len;
        let (d, n) = (3, 4);
        let mut rng = Rng::new(seed);
        let x = rand(&[d, len], &mut rng);
        let delta = Tensor::from_fn([d, len], |_| rng.uniform_in(0.01, 0.5));
        let a = Tensor::from_fn([d, n], |_| rng.uniform_in(-2.0, -0.1));
        let (b, c) = (rand(&[n, len], &mut rng), rand(&[n, len], &mut rng));
        let skip = rand(&[d], &mut rng);
        let y = selective_scan(&x, &delta, &a, &b, &c, &skip).unwrap();
        let mut x2 = x.clone();
        for ch in 0..d {
            x2.data_mut()[ch * len + t] += 1.0;
        }
        let y2 = selective_scan(&x2, &delta, &a, &b, &c, &skip).unwrap();
        for ch in 0..d {
            let row = ch * len;
            prop_assert_eq!(&y.data()[row..row + t], &y2.data()[row..row + t]);
            prop_assert_ne!(y.data()[row + t], y2.data()[row + t]);
        }
    }

    #[test]
    fn crops_are_deterministic_sub_volumes(d in dims(), s in dims(), seed in any::<u64>()) {
        let size = [s[0].min(d[0]), s[1].min(d[1]), s[2].min(d[2])];
        let n: usize = d.iter().product();
        let img = Volume::new(Tensor::from_fn([2, d[0], d[1], d[2]], |i| i as f32), [1.0; 3]).unwrap();
        let lab = Volume::new(Tensor::from_fn([3, d[0], d[1], d[2]], |i| (i % n) as f32), [1.0; 3]).unwrap();
        let (a, la) = random_crop(&img, &lab, size, &mut Rng::new(seed)).unwrap();
        let (b, _) = random_crop(&img, &lab, size, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(a.data.data(), b.data.data());
        prop_assert_eq!(a.dims(), size);
        // image voxel values encode their source offset; the label crop must come from the same window
        for (i, &v) in la.data.channel(0).iter().enumerate() {
            prop_assert_eq!(a.data.channel(0)[i], v);
        }
        let oversized = [d[0] + 1, d[1], d[2]];
        prop_assert!(random_crop(&img, &lab, oversized, &mut Rng::new(seed)).is_err());
    }

    #[test]
    fn flips_are_involutions(d in dims(), flips in any::<[bool; 3]>()) {
        let img = Volume::new(Tensor::from_fn([4, d[0], d[1], d[2]], |i| i as f32), [1.0; 3]).unwrap();
        let lab = Volume::new(Tensor::from_fn([3, d[0], d[1], d[2]], |i| (i % 2) as f32), [1.0; 3]).unwrap();
        let p = AugmentParams { flips, ..AugmentParams::identity(4) };
        let (i1, l1) = augment(&img, &lab, &p).unwrap();
        let (i2, l2) = augment(&i1, &l1, &p).unwrap();
        prop_assert_eq!(i2.data.data(), img.data.data());
        prop_assert_eq!(l2.data.data(), lab.data.data());
    }

    #[test]
    fn mvol_round_trips_any_bits(d in dims(), c in 1usize..4, bits in prop::collection::vec(any::<u32>(), 1..400), sp in any::<[u32; 3]>()) {
        let n = c * d.iter().product::<usize>();
        let data: Vec<f32> = (0..n).map(|i| f32::from_bits(bits[i % bits.len()])).collect();
        let spacing = sp.map(|b| f32::from_bits(b % 0x7F00_0000).abs().max(1e-3));
        let v = Volume::new(Tensor::new([c, d[0], d[1], d[2]], data).unwrap(), spacing).unwrap();
        let bytes = encode_volume(&v);
        let back = decode_volume(Path::new("mem"), &bytes).unwrap();
        prop_assert_eq!(back.data.shape(), v.data.shape());
        let same = back.data.data().iter().zip(v.data.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
        prop_assert_eq!(back.spacing.map(f32::to_bits), v.spacing.map(f32::to_bits));
        prop_assert!(decode_volume(Path::new("mem"), &bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn normalization_keeps_background(d in dims(), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let v = Volume::new(
            Tensor::from_fn([2, d[0], d[1], d[2]], |_| if rng.bernoulli(0.5) { 0.0 } else { rng.uniform_in(1.0, 5.0) as f32 }),
            [1.0; 3],
        ).unwrap();
        let out = normalize_nonzero(&v);
        for (a, b) in v.data.data().iter().zip(out.data.data()) {
            if *a == 0.0 {
                prop_assert_eq!(*b, 0.0);
            }
        }
    }
}

#[test]
fn dropout_keeps_the_expected_fraction() {
    let x = Tensor::<f64>::from_fn([100_000], |_| 1.0);
    for (seed, p) in [(0, 0.05), (1, 0.3), (2, 0.5)] {
        let y = dropout(&x, p, seed, true).unwrap();
        let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e5;
        let sd = (p * (1.0 - p) / 1e5).sqrt();
        assert!((kept - (1.0 - p)).abs() < 5.0 * sd, "p {p}: kept {kept}");
        let mean = y.data().iter().sum::<f64>() / 1e5;
        assert!((mean - 1.0).abs() < 0.02, "p {p}: mean {mean}");
        assert_eq!(dropout(&x, p, seed, false).unwrap().data(), x.data());
        assert_eq!(y.data(), dropout(&x, p, seed, true).unwrap().data());
    }
    assert!(dropout(&x, 1.0, 0, true).is_err());
}
