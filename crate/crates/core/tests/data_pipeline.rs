use firesense::data::{
    augment_flip, decode, encode, flip_in_place, gaussian_smooth, generate_synthetic, read_file, soft_labels, split,
    write_file, DataError, Dataset, Direction, NormStats, Sample, Smoothing, SyntheticConfig, CHANNEL_NAMES, N_CHANNELS,
    PREV_FIRE_MASK,
};
use firesense::prepared::Preprocessing;
use firesense::Pcg32;
use rand::Rng;

fn random_dataset(rng: &mut Pcg32, n: usize, h: usize, w: usize) -> Dataset {
    let mut ds = Dataset::new(h, w);
    for i in 0..n {
        ds.samples.push(Sample {
            id: rng.random::<u64>() ^ i as u64,
            x: (0..N_CHANNELS * h * w).map(|_| rng.random_range(-1e3f32..1e3)).collect(),
            y: (0..h * w).map(|_| rng.random_range(-1i8..=1)).collect(),
        });
    }
    ds
}

#[test]
fn container_round_trips_bitwise() {
    let mut rng = Pcg32::new(1);
    for n in [0, 1, 4] {
        let ds = random_dataset(&mut rng, n, 5, 7);
        let bytes = encode(&ds).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(encode(&back).unwrap(), bytes);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.fsnw");
    let ds = random_dataset(&mut rng, 2, 8, 8);
    write_file(&ds, &path).unwrap();
    assert_eq!(read_file(&path).unwrap(), ds);
}

#[test]
fn container_header_layout() {
    let ds = random_dataset(&mut Pcg32::new(2), 1, 3, 2);
    let bytes = encode(&ds).unwrap();
    assert_eq!(&bytes[..4], b"FSNW");
    assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
    assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 1);
    assert_eq!(u16::from_le_bytes([bytes[10], bytes[11]]), 3);
    assert_eq!(u16::from_le_bytes([bytes[12], bytes[13]]), 2);
    assert_eq!(u16::from_le_bytes([bytes[14], bytes[15]]), 12);
    let names: usize = CHANNEL_NAMES.iter().map(|n| 2 + n.len()).sum();
    assert_eq!(bytes.len(), 16 + names + 8 + 12 * 6 * 4 + 6);
}

#[test]
fn truncated_and_corrupt_containers_fail() {
    let ds = random_dataset(&mut Pcg32::new(3), 2, 4, 4);
    let bytes = encode(&ds).unwrap();
    let cut = bytes.len() - 30;
    match decode(&bytes[..cut]) {
        Err(DataError::Truncated { expected, actual, .. }) => assert!(actual < expected),
        other => panic!("expected truncation error, got {other:?}"),
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode(&bad), Err(DataError::Format { offset: 0, .. })));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(decode(&bad), Err(DataError::Format { offset: 4, .. })));
    let mut bad = bytes.clone();
    let last = bad.len() - 1;
    bad[last] = 5;
    assert!(matches!(decode(&bad), Err(DataError::Format { .. })));
    let mut long = bytes;
    long.push(0);
    assert!(decode(&long).is_err());
}

/// Direct 2-D evaluation of the normalized, truncated Gaussian.
fn kernel_oracle(sigma: f64, di: i64, dj: i64) -> f64 {
    let r = (3.0 * sigma).ceil() as i64;
    let one_d: f64 = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).sum();
    let g = |i: i64| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp() / one_d;
    g(di) * g(dj)
}

#[test]
fn impulse_response_matches_direct_kernel() {
    for sigma in [0.4, 0.8, 1.7] {
        let (h, w) = (21, 21);
        let mut x = vec![0.0f64; h * w];
        x[10 * w + 10] = 1.0;
        let y = gaussian_smooth(&x, h, w, sigma).unwrap();
        for i in 0..h {
            for j in 0..w {
                let want = kernel_oracle(sigma, i as i64 - 10, j as i64 - 10);
                let r = (3.0 * sigma).ceil() as i64;
                let inside = (i as i64 - 10).abs() <= r && (j as i64 - 10).abs() <= r;
                let want = if inside { want } else { 0.0 };
                assert!((y[i * w + j] - want).abs() < 1e-9, "sigma {sigma} at ({i},{j})");
            }
        }
        assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    assert!(gaussian_smooth(&[1.0f64; 4], 2, 2, 0.0).is_err());
}

#[test]
fn smoothing_is_linear_and_preserves_constants_inside() {
    let mut rng = Pcg32::new(4);
    let (h, w) = (16, 12);
    let a: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 2.5 * x - 0.7 * y).collect();
    let (sa, sb, sm) = (
        gaussian_smooth(&a, h, w, 0.8).unwrap(),
        gaussian_smooth(&b, h, w, 0.8).unwrap(),
        gaussian_smooth(&mix, h, w, 0.8).unwrap(),
    );
    for i in 0..h * w {
        assert!((sm[i] - (2.5 * sa[i] - 0.7 * sb[i])).abs() < 1e-6);
    }
    let c = gaussian_smooth(&vec![3.0f32; h * w], h, w, 0.8).unwrap();
    for i in 3..h - 3 {
        for j in 3..w - 3 {
            assert!((c[i * w + j] - 3.0).abs() < 1e-5);
        }
    }
}

#[test]
fn normalization_examples_and_idempotence() {
    let mut ds = generate_synthetic(6, 5, &SyntheticConfig { h: 16, w: 16, ..SyntheticConfig::default() });
    let hw = ds.hw();
    ds.samples.iter_mut().for_each(|s| s.channel_mut(0, hw).fill(7.0));
    let stats = NormStats::compute(&ds).unwrap();
    let stats5 = NormStats { mean: vec![5.0; 12], std: vec![2.0; 12] };
    assert_eq!(stats5.normalize_value(1, 9.0), 2.0);
    assert_eq!(stats5.normalize_value(PREV_FIRE_MASK, 1.0), 1.0);
    let mut normed = ds.clone();
    stats.normalize(&mut normed).unwrap();
    assert!(normed.samples.iter().all(|s| s.channel(0, hw).iter().all(|&v| v == 0.0)));
    let again = NormStats::compute(&normed).unwrap();
    for c in 1..N_CHANNELS {
        if c == PREV_FIRE_MASK {
            assert_eq!(again.mean[c], stats.mean[c]);
            continue;
        }
        assert!(again.mean[c].abs() < 1e-4, "channel {c} mean {}", again.mean[c]);
        assert!((again.std[c] - 1.0).abs() < 1e-4, "channel {c} std {}", again.std[c]);
    }
    assert_eq!(NormStats::from_text(&stats.to_text()).unwrap(), stats);
}

#[test]
fn preprocessing_depends_on_training_split_only() {
    let cfg = SyntheticConfig { h: 16, w: 16, ..SyntheticConfig::default() };
    let train = generate_synthetic(5, 1, &cfg);
    let a = Preprocessing::fit(&train, Smoothing::default()).unwrap();
    let b = Preprocessing::fit(&train, Smoothing::default()).unwrap();
    assert_eq!(a, b);
    let val1 = generate_synthetic(3, 2, &cfg);
    let val2 = generate_synthetic(3, 3, &cfg);
    let p1 = a.apply(&val1).unwrap();
    let _ = a.apply(&val2).unwrap();
    assert_eq!(a, b);
    let x1 = a.apply(&train).unwrap();
    assert_eq!(x1.len(), 5);
    assert_eq!(p1.y, val1.samples.iter().flat_map(|s| s.y.clone()).collect::<Vec<_>>());
}

#[test]
fn soft_labels_stay_in_range_over_a_million_draws() {
    let mut rng = Pcg32::new(6);
    let y: Vec<i8> = (0..1_000_000).map(|i| [0i8, 1, -1][i % 3]).collect();
    let t = soft_labels(&y, &mut rng);
    for (&l, &v) in y.iter().zip(&t) {
        match l {
            0 => assert!((0.01..=0.03).contains(&v), "{v}"),
            1 => assert!((0.80..=0.99).contains(&v), "{v}"),
            _ => assert_eq!(v, -1.0),
        }
    }
}

#[test]
fn synthetic_generator_properties() {
    let cfg = SyntheticConfig::default();
    let ds = generate_synthetic(1000, 11, &cfg);
    ds.validate().unwrap();
    let (mut fire, mut total) = (0usize, 0usize);
    for s in &ds.samples {
        fire += s.y.iter().filter(|&&v| v == 1).count();
        total += s.y.len();
        assert!(s.y.iter().all(|v| (-1..=1).contains(v)));
    }
    let frac = fire as f64 / total as f64;
    assert!(frac < 0.05, "{frac}");
    assert!(fire > 0);
    let unknown = ds.samples.iter().filter(|s| s.y.contains(&-1)).count();
    assert!((10..=100).contains(&unknown), "{unknown} patches with unknown pixels");
    assert_eq!(generate_synthetic(20, 11, &cfg), generate_synthetic(20, 11, &cfg));
    assert_ne!(generate_synthetic(3, 11, &cfg), generate_synthetic(3, 12, &cfg));
}

#[test]
fn new_fire_is_biased_toward_the_spread_direction() {
    let cfg = SyntheticConfig { spread_bias: Direction::E, ..SyntheticConfig::default() };
    let ds = generate_synthetic(50, 13, &cfg);
    let hw = ds.hw();
    let (mut east, mut west) = (0, 0);
    for s in &ds.samples {
        let prev = s.channel(PREV_FIRE_MASK, hw);
        for i in 0..ds.h {
            for j in 1..ds.w - 1 {
                if s.y[i * ds.w + j] == 1 {
                    east += usize::from(prev[i * ds.w + j - 1] >= 0.5);
                    west += usize::from(prev[i * ds.w + j + 1] >= 0.5);
                }
            }
        }
    }
    assert!(east > west, "east {east} west {west}");
}

#[test]
fn flips_are_involutions_and_joint() {
    let mut rng = Pcg32::new(7);
    let (h, w) = (5, 6);
    let x: Vec<f32> = (0..3 * h * w).map(|i| i as f32).collect();
    for (fh, fw) in [(true, false), (false, true), (true, true)] {
        let mut d = x.clone();
        flip_in_place(&mut d, h, w, fh, fw);
        assert_ne!(d, x);
        flip_in_place(&mut d, h, w, fh, fw);
        assert_eq!(d, x);
    }
    for _ in 0..20 {
        let mut xs: Vec<f32> = (0..2 * h * w).map(|i| (i % (h * w)) as f32).collect();
        let mut ys: Vec<i8> = (0..h * w).map(|i| i as i8).collect();
        augment_flip(&mut xs, &mut ys, h, w, &mut rng);
        for p in 0..h * w {
            assert_eq!(xs[p], f32::from(ys[p]));
            assert_eq!(xs[h * w + p], f32::from(ys[p]));
        }
    }
    let seq = |seed| {
        let mut r = Pcg32::new(seed);
        (0..10)
            .map(|_| augment_flip(&mut [0.0f32; 4], &mut [0i8; 4], 2, 2, &mut r))
            .collect::<Vec<_>>()
    };
    assert_eq!(seq(3), seq(3));
}

#[test]
fn splits_are_disjoint_exhaustive_and_seeded() {
    let s = split(100, 5).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
    let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..100).collect::<Vec<_>>());
    assert_eq!(split(100, 5).unwrap(), s);
    assert_ne!(split(100, 6).unwrap(), s);
    assert!(split(9, 0).is_err());
}
