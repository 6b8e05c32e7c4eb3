use firesense::data::{
    decode, encode, flip_in_place, gaussian_smooth, soft_labels, split, Dataset, NormStats, Sample, N_CHANNELS,
};
use firesense::eval::{average_precision, confusion, prf1, Protocol};
use firesense::train::cosine_lr;
use firesense::{Graph, Mode, ModelConfig, ModelInstance, Pcg32, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn dataset(h: usize, w: usize, seeds: &[u64]) -> Dataset {
    let mut ds = Dataset::new(h, w);
    for (i, &s) in seeds.iter().enumerate() {
        let mut r = Pcg32::new(s);
        ds.samples.push(Sample {
            id: s.wrapping_add(i as u64),
            x: (0..N_CHANNELS * h * w).map(|_| r.random_range(-50.0f32..50.0)).collect(),
            y: (0..h * w).map(|_| r.random_range(-1i8..=1)).collect(),
        });
    }
    ds
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dataset_round_trip(h in 1usize..6, w in 1usize..6, seeds in prop::collection::vec(any::<u64>(), 0..4)) {
        let ds = dataset(h, w, &seeds);
        prop_assert_eq!(decode(&encode(&ds).unwrap()).unwrap(), ds);
    }

    #[test]
    fn average_precision_is_a_probability(
        pairs in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..60),
    ) {
        let (scores, labels): (Vec<f64>, Vec<bool>) = pairs.into_iter().unzip();
        match average_precision(&scores, &labels) {
            None => prop_assert!(labels.iter().all(|&l| !l)),
            Some(ap) => {
                prop_assert!((0.0..=1.0).contains(&ap));
                let shifted: Vec<f64> = scores.iter().map(|s| 3.0 * s + 1.0).collect();
                prop_assert_eq!(average_precision(&shifted, &labels), Some(ap));
            }
        }
    }

    #[test]
    fn protocols_count_the_right_pixels(
        cells in prop::collection::vec((0.0f32..1.0, any::<bool>(), -1i8..=1), 1..80),
        thr in 0.05f64..0.95,
    ) {
        let probs: Vec<f32> = cells.iter().map(|c| c.0).collect();
        let prev: Vec<bool> = cells.iter().map(|c| c.1).collect();
        let y: Vec<i8> = cells.iter().map(|c| c.2).collect();
        let clean = confusion(&probs, &prev, &y, Protocol::Clean, thr).unwrap();
        prop_assert_eq!(clean.total(), cells.iter().filter(|c| c.2 >= 0).count() as u64);
        let inflated = confusion(&probs, &prev, &y, Protocol::Inflated, thr).unwrap();
        prop_assert_eq!(inflated.total(), cells.len() as u64);
        // Scores at unknown pixels cannot move the clean counts.
        let flipped: Vec<f32> = cells.iter().map(|c| if c.2 < 0 { 1.0 - c.0 } else { c.0 }).collect();
        prop_assert_eq!(confusion(&flipped, &prev, &y, Protocol::Clean, thr).unwrap(), clean);
        for c in [clean, inflated] {
            let (p, r, f) = prf1(&c);
            for v in [p, r, f] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(f <= p.max(r) + 1e-12);
        }
    }

    #[test]
    fn soft_labels_stay_in_their_bands(y in prop::collection::vec(-1i8..=1, 0..200), seed in any::<u64>()) {
        let t = soft_labels(&y, &mut Pcg32::new(seed));
        for (&v, &l) in t.iter().zip(&y) {
            match l {
                1 => prop_assert!((0.80..=0.99).contains(&v)),
                0 => prop_assert!((0.01..=0.03).contains(&v)),
                _ => prop_assert_eq!(v, -1.0),
            }
        }
    }

    #[test]
    fn smoothing_is_linear(
        h in 1usize..10, w in 1usize..10, sigma in 0.3f64..3.0,
        a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>(),
    ) {
        let mut r = Pcg32::new(seed);
        let u: Vec<f64> = (0..h * w).map(|_| r.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..h * w).map(|_| r.random_range(-1.0..1.0)).collect();
        let mix: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
        let (su, sv) = (gaussian_smooth(&u, h, w, sigma).unwrap(), gaussian_smooth(&v, h, w, sigma).unwrap());
        let sm = gaussian_smooth(&mix, h, w, sigma).unwrap();
        for i in 0..h * w {
            prop_assert!((sm[i] - (a * su[i] + b * sv[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn double_flip_is_identity(h in 1usize..7, w in 1usize..7, planes in 1usize..4, fh: bool, fw: bool) {
        let orig: Vec<u32> = (0..(planes * h * w) as u32).collect();
        let mut d = orig.clone();
        flip_in_place(&mut d, h, w, fh, fw);
        if fw && !fh {
            prop_assert_eq!(d[w - 1], orig[0]);
        }
        flip_in_place(&mut d, h, w, fh, fw);
        prop_assert_eq!(d, orig);
    }

    #[test]
    fn split_partitions_indices(n in 10usize..300, seed in any::<u64>()) {
        let s = split(n, seed).unwrap();
        prop_assert_eq!(s.val.len(), n / 10);
        prop_assert_eq!(s.test.len(), n / 10);
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn cosine_schedule_is_bounded_and_nonincreasing(max in 1usize..400, lr in 1e-5f64..1.0, frac in 0.0f64..1.0) {
        let eta = lr * frac;
        let mut prev = f64::INFINITY;
        for e in 0..=max {
            let v = cosine_lr(e, max, lr, eta).unwrap();
            prop_assert!(v >= eta - 1e-15 && v <= lr + 1e-15 && v <= prev + 1e-15);
            prev = v;
        }
    }

    #[test]
    fn norm_stats_text_round_trip(vals in prop::collection::vec((-1e6f64..1e6, 1e-6f64..1e6), N_CHANNELS)) {
        let stats = NormStats {
            mean: vals.iter().map(|v| v.0).collect(),
            std: vals.iter().map(|v| v.1).collect(),
        };
        prop_assert_eq!(NormStats::from_text(&stats.to_text()).unwrap(), stats);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn attention_gates_are_open_interval(seed in any::<u64>(), scale in 0.1f64..3.0) {
        // f64 so the sigmoid cannot round to an endpoint at normalized scales.
        let m = ModelInstance::<f64>::build(ModelConfig::default().with_width(0.25), seed).unwrap();
        let mut r = Pcg32::new(seed ^ 1);
        let x: Vec<f64> = (0..N_CHANNELS * 64).map(|_| scale * r.random_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(vec![1, N_CHANNELS, 8, 8], x).unwrap());
        let out = m.forward(&mut g, xv, Mode::Eval, &mut Pcg32::new(0)).unwrap();
        prop_assert_eq!(out.alphas.len(), 3);
        for &a in &out.alphas {
            prop_assert!(g.value(a).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
