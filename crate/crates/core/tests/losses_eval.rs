mod common;

use common::{inflation_fixture, random_tensor};
use firesense::eval::{
    auc_pr, average_precision, confusion, evaluate, inflation_audit, prf1, sweep_thresholds, threshold_sweep, Confusion,
    MetricsReport, Protocol,
};
use firesense::losses::{composite_loss, dice_loss, focal_loss, wbce, LossConfig};
use firesense::tensor::gradcheck::gradient_check;
use firesense::{Graph, Pcg32, Tensor};
use rand::Rng;

const LN2: f64 = std::f64::consts::LN_2;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Per-sample masked means, averaged over the batch, computed pixel by
/// pixel: `(wbce, dice, focal)`.
fn loss_oracle(z: &[f64], t: &[f64], batch: usize, cfg: &LossConfig) -> (f64, f64, f64) {
    let per = z.len() / batch;
    let (mut wb, mut di, mut fo) = (0.0, 0.0, 0.0);
    for n in 0..batch {
        let (mut s_wb, mut s_fo, mut valid) = (0.0, 0.0, 0usize);
        let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
        for i in n * per..(n + 1) * per {
            if t[i] < 0.0 {
                continue;
            }
            valid += 1;
            let p = sigmoid(z[i]);
            let bce = -(t[i] * p.ln() + (1.0 - t[i]) * (1.0 - p).ln());
            s_wb += -(cfg.pos_weight * t[i] * p.ln() + (1.0 - t[i]) * (1.0 - p).ln());
            let p_t = if t[i] >= 0.5 { p } else { 1.0 - p };
            s_fo += (1.0 - p_t).powf(cfg.gamma) * bce;
            inter += p * t[i];
            sp += p;
            st += t[i];
        }
        if valid > 0 {
            wb += s_wb / valid as f64;
            fo += s_fo / valid as f64;
        }
        di += 1.0 - (2.0 * inter + cfg.dice_eps) / (sp + st + cfg.dice_eps);
    }
    let b = batch as f64;
    (wb / b, di / b, fo / b)
}

fn losses(z: &Tensor<f64>, t: &Tensor<f64>, cfg: &LossConfig) -> (f64, f64, f64, f64, bool) {
    let mut g = Graph::new();
    let zv = g.param(z.clone());
    let l = composite_loss(&mut g, zv, t, cfg).unwrap();
    let v = l.values(&g);
    (v.total, v.wbce, v.dice, v.focal, l.empty_mask)
}

fn single(z: f64, t: f64) -> (Tensor<f64>, Tensor<f64>) {
    (
        Tensor::new(vec![1, 1, 1, 1], vec![z]).unwrap(),
        Tensor::new(vec![1, 1, 1, 1], vec![t]).unwrap(),
    )
}

fn random_targets(rng: &mut Pcg32, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| match rng.random_range(0..6) {
            0 => -1.0,
            1 => 1.0,
            2 => rng.random_range(0.8..0.99),
            3 => rng.random_range(0.01..0.03),
            _ => 0.0,
        })
        .collect()
}

#[test]
fn losses_match_pixelwise_oracle() {
    let mut rng = Pcg32::new(1);
    let cfg = LossConfig::default();
    for _ in 0..50 {
        let batch = rng.random_range(1..=3);
        let shape = [batch, 1, 4, 5];
        let z = random_tensor(&mut rng, &shape, -6.0, 6.0);
        let t = Tensor::new(shape.to_vec(), random_targets(&mut rng, 20 * batch)).unwrap();
        let (total, w, d, f, _) = losses(&z, &t, &cfg);
        let (ow, od, of) = loss_oracle(z.data(), t.data(), batch, &cfg);
        for (a, b) in [(w, ow), (d, od), (f, of)] {
            assert!((a - b).abs() < 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        }
        assert!((total - (0.4 * ow + 0.3 * od + 0.3 * of)).abs() < 1e-9);
    }
}

#[test]
fn closed_form_values() {
    let term = |z: f64, t: f64, which: u8| {
        let (zt, tt) = single(z, t);
        let mut g = Graph::new();
        let zv = g.param(zt);
        let l = match which {
            0 => wbce(&mut g, zv, &tt, 3.0),
            1 => dice_loss(&mut g, zv, &tt, 1.0),
            _ => focal_loss(&mut g, zv, &tt, 2.0),
        }
        .unwrap();
        g.value(l.value).data()[0]
    };
    assert!((term(0.0, 1.0, 0) - 3.0 * LN2).abs() < 1e-12);
    assert!((term(0.0, 0.0, 0) - LN2).abs() < 1e-12);
    assert!((term(0.0, 1.0, 2) - 0.25 * LN2).abs() < 1e-12);

    let n = 16;
    let z = Tensor::full(&[1, 1, 4, 4], 40.0);
    let t = Tensor::zeros(&[1, 1, 4, 4]);
    let mut g = Graph::new();
    let zv = g.param(z);
    let d = dice_loss(&mut g, zv, &t, 1.0).unwrap();
    assert!((g.value(d.value).data()[0] - (1.0 - 1.0 / (n as f64 + 1.0))).abs() < 1e-12);
}

#[test]
fn focal_with_zero_gamma_is_bce_and_easy_pixels_fade() {
    let mut rng = Pcg32::new(2);
    let z = random_tensor(&mut rng, &[2, 1, 4, 4], -4.0, 4.0);
    let t = Tensor::new(vec![2, 1, 4, 4], random_targets(&mut rng, 32)).unwrap();
    let mut g = Graph::new();
    let zv = g.param(z.clone());
    let f = focal_loss(&mut g, zv, &t, 0.0).unwrap();
    let b = wbce(&mut g, zv, &t, 1.0).unwrap();
    assert!((g.value(f.value).data()[0] - g.value(b.value).data()[0]).abs() < 1e-6);

    let focal = |z: f64| {
        let (zt, tt) = single(z, 1.0);
        let mut g = Graph::new();
        let zv = g.param(zt);
        let l = focal_loss(&mut g, zv, &tt, 2.0).unwrap();
        g.value(l.value).data()[0]
    };
    let easy = focal((0.99f64 / 0.01).ln());
    assert!(easy / focal(0.0) < 1e-3);
}

#[test]
fn masked_pixels_affect_neither_value_nor_gradient() {
    let mut rng = Pcg32::new(3);
    let cfg = LossConfig::default();
    for _ in 0..20 {
        let z = random_tensor(&mut rng, &[2, 1, 6, 6], -5.0, 5.0);
        let t = Tensor::new(vec![2, 1, 6, 6], random_targets(&mut rng, 72)).unwrap();
        let mut z2 = z.clone();
        for (v, &tv) in z2.data_mut().iter_mut().zip(t.data()) {
            if tv < 0.0 {
                *v = rng.random_range(-30.0..30.0);
            }
        }
        let run = |z: &Tensor<f64>| {
            let mut g = Graph::new();
            let zv = g.param(z.clone());
            let l = composite_loss(&mut g, zv, &t, &cfg).unwrap();
            let parts = [l.total, l.wbce, l.dice, l.focal].map(|v| g.value(v).data()[0].to_bits());
            let grad = g.backward(l.total).unwrap().get(zv).unwrap().clone();
            (parts, grad)
        };
        let (va, ga) = run(&z);
        let (vb, gb) = run(&z2);
        assert_eq!(va, vb);
        for ((a, b), &tv) in ga.data().iter().zip(gb.data()).zip(t.data()) {
            assert!((a - b).abs() < 1e-9);
            if tv < 0.0 {
                assert!(a.abs() < 1e-9);
            }
        }
    }
}

#[test]
fn fully_masked_batch_gives_zero_and_flag() {
    let z = Tensor::full(&[1, 1, 3, 3], 2.0);
    let t = Tensor::full(&[1, 1, 3, 3], -1.0);
    let (total, w, d, f, empty) = losses(&z, &t, &LossConfig::default());
    assert_eq!((total, w, d, f), (0.0, 0.0, 0.0, 0.0));
    assert!(empty);
    let t = Tensor::full(&[1, 1, 3, 3], 0.0);
    assert!(!losses(&z, &t, &LossConfig::default()).4);
}

#[test]
fn wbce_strictly_decreasing_for_positive_target() {
    let mut last = f64::INFINITY;
    for i in 0..200 {
        let z = -10.0 + i as f64 * 0.1;
        let (zt, tt) = single(z, 1.0);
        let mut g = Graph::new();
        let zv = g.param(zt);
        let l = wbce(&mut g, zv, &tt, 3.0).unwrap();
        let v = g.value(l.value).data()[0];
        assert!(v < last);
        last = v;
    }
}

#[test]
fn perfect_predictions_drive_composite_to_zero() {
    let mut rng = Pcg32::new(4);
    let hard: Vec<f64> = (0..128).map(|_| if rng.random_bool(0.2) { 1.0 } else { 0.0 }).collect();
    let z: Vec<f64> = hard.iter().map(|&t| if t > 0.5 { 20.0 } else { -20.0 }).collect();
    let (total, w, d, f, _) = losses(
        &Tensor::new(vec![2, 1, 8, 8], z).unwrap(),
        &Tensor::new(vec![2, 1, 8, 8], hard).unwrap(),
        &LossConfig::default(),
    );
    assert!(total < 1e-3, "{total}");
    assert!((total - (0.4 * w + 0.3 * d + 0.3 * f)).abs() < 1e-7);
}

#[test]
fn terms_are_nonnegative_and_recombine() {
    let mut rng = Pcg32::new(5);
    for _ in 0..100 {
        let z = random_tensor(&mut rng, &[3, 1, 4, 4], -15.0, 15.0);
        let t = Tensor::new(vec![3, 1, 4, 4], random_targets(&mut rng, 48)).unwrap();
        let (total, w, d, f, _) = losses(&z, &t, &LossConfig::default());
        assert!(w >= 0.0 && d >= 0.0 && f >= 0.0);
        assert!((total - (0.4 * w + 0.3 * d + 0.3 * f)).abs() < 1e-7);
    }
}

#[test]
fn composite_gradient_is_weighted_sum_and_matches_differences() {
    let mut rng = Pcg32::new(6);
    let z = random_tensor(&mut rng, &[12, 1, 8, 8], -3.0, 3.0);
    let t = Tensor::new(vec![12, 1, 8, 8], random_targets(&mut rng, 12 * 64)).unwrap();
    let cfg = LossConfig::default();
    let mut g = Graph::new();
    let zv = g.param(z.clone());
    let l = composite_loss(&mut g, zv, &t, &cfg).unwrap();
    let total = g.backward(l.total).unwrap().get(zv).unwrap().clone();
    let parts: Vec<Tensor<f64>> = [l.wbce, l.dice, l.focal]
        .iter()
        .map(|&v| g.backward(v).unwrap().get(zv).unwrap().clone())
        .collect();
    for i in 0..total.len() {
        let want = 0.4 * parts[0].data()[i] + 0.3 * parts[1].data()[i] + 0.3 * parts[2].data()[i];
        assert!((total.data()[i] - want).abs() < 1e-12);
    }
    let r = gradient_check(|g, zv| Ok(composite_loss(g, zv, &t, &cfg)?.total), &z, 1e-3).unwrap();
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

#[test]
fn prf1_examples() {
    let c = |tp, fp, fn_| Confusion { tp, fp, fn_, tn: 0 };
    let (p, r, f) = prf1(&c(2, 1, 1));
    assert_eq!((p, r, f), (2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0));
    assert_eq!(prf1(&c(0, 0, 0)), (0.0, 0.0, 0.0));
    assert_eq!(prf1(&c(7, 0, 0)), (1.0, 1.0, 1.0));
}

#[test]
fn confusion_examples() {
    let (prev, target) = inflation_fixture();
    let copy: Vec<f32> = prev.iter().map(|&p| f32::from(u8::from(p))).collect();
    let clean = confusion(&copy, &prev, &target, Protocol::Clean, 0.5).unwrap();
    assert_eq!((clean.tp, clean.fp, clean.fn_), (0, 4, 2));
    let inflated = confusion(&copy, &prev, &target, Protocol::Inflated, 0.5).unwrap();
    assert_eq!((inflated.tp, inflated.fp, inflated.fn_), (4, 0, 2));
    assert_eq!(prf1(&inflated).2, 0.8);

    let mut target = vec![0i8, 1, -1, 0];
    let probs = [0.2f32, 0.9, 0.99, 0.1];
    let c = confusion(&probs, &[false; 4], &target, Protocol::Clean, 0.5).unwrap();
    assert_eq!((c.tp, c.fp, c.fn_, c.tn), (1, 0, 0, 2));
    assert_eq!(confusion(&probs, &[false; 4], &target, Protocol::Inflated, 0.5).unwrap().total(), 4);
    target.pop();
    assert!(confusion(&probs, &[false; 4], &target, Protocol::Clean, 0.5).is_err());
}

#[test]
fn sweep_examples() {
    let th = sweep_thresholds();
    assert_eq!(th.len(), 19);
    assert_eq!(th[0], 0.05);
    assert_eq!(th[18], 0.95);
    let s = threshold_sweep(&[0.1, 0.6, 0.9], &[false; 3], &[0, 1, 1], Protocol::Clean).unwrap();
    assert_eq!(s.rows.len(), 19);
    assert_eq!(s.best_row().f1, 1.0);
    assert_eq!(s.best_row().threshold, 0.15);
    let perfect: Vec<f64> = s.rows.iter().filter(|r| r.f1 == 1.0).map(|r| r.threshold).collect();
    assert_eq!(perfect.first(), Some(&0.15));
    assert_eq!(perfect.last(), Some(&0.6));
    let none = threshold_sweep(&[0.3, 0.7], &[false; 2], &[0, 0], Protocol::Clean).unwrap();
    assert!(none.rows.iter().all(|r| r.f1 == 0.0));
    assert_eq!(none.best_row().threshold, 0.05);
}

#[test]
fn average_precision_fixtures_and_bounds() {
    assert_eq!(average_precision(&[0.9, 0.1, 0.2], &[true, false, false]), Some(1.0));
    assert_eq!(average_precision(&[0.5, 0.4], &[false, false]), None);
    let ap = average_precision(&[0.9, 0.8, 0.7, 0.1], &[true, false, true, false]).unwrap();
    assert!((ap - 0.8333333333333334).abs() < 1e-9);
    let mut rng = Pcg32::new(7);
    for _ in 0..200 {
        let scores: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels: Vec<bool> = (0..30).map(|_| rng.random_bool(0.3)).collect();
        if let Some(ap) = average_precision(&scores, &labels) {
            assert!((0.0..=1.0).contains(&ap));
            let min_pos = scores.iter().zip(&labels).filter(|p| *p.1).map(|p| *p.0).fold(f64::INFINITY, f64::min);
            let max_neg = scores.iter().zip(&labels).filter(|p| !*p.1).map(|p| *p.0).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(ap == 1.0, min_pos > max_neg);
        }
    }
    assert_eq!(auc_pr(&[0.3], &[false], &[-1], Protocol::Clean).unwrap(), None);
}

#[test]
fn clean_metrics_ignore_unknown_pixels() {
    let mut rng = Pcg32::new(8);
    for _ in 0..100 {
        let probs: Vec<f32> = (0..64).map(|_| rng.random()).collect();
        let prev: Vec<bool> = (0..64).map(|_| rng.random_bool(0.2)).collect();
        let target: Vec<i8> = (0..64).map(|_| rng.random_range(-1..=1)).collect();
        let mut perturbed = probs.clone();
        for (p, &t) in perturbed.iter_mut().zip(&target) {
            if t < 0 {
                *p = rng.random();
            }
        }
        let (a, sa) = evaluate(&probs, &prev, &target, Protocol::Clean).unwrap();
        let (b, sb) = evaluate(&perturbed, &prev, &target, Protocol::Clean).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        let valid = target.iter().filter(|&&t| t >= 0).count() as u64;
        assert_eq!(a.confusion.total(), valid);
    }
}

#[test]
fn inflation_audit_examples() {
    let (prev, target) = inflation_fixture();
    let copy: Vec<f32> = prev.iter().map(|&p| f32::from(u8::from(p))).collect();
    let row = inflation_audit("dummy-copy-prev", &copy, &prev, &target).unwrap();
    assert_eq!(row.clean.f1, 0.0);
    assert_eq!(row.inflated.f1, 0.8);
    assert_eq!(row.inflation_pct, None);

    let mut rng = Pcg32::new(9);
    let probs: Vec<f32> = (0..256).map(|_| rng.random()).collect();
    let prev: Vec<bool> = (0..256).map(|_| rng.random_bool(0.1)).collect();
    let target: Vec<i8> = (0..256).map(|_| i8::from(rng.random_bool(0.1))).collect();
    let (a, _) = evaluate(&probs, &prev, &target, Protocol::Clean).unwrap();
    let (b, _) = evaluate(&probs, &prev, &target, Protocol::Clean).unwrap();
    assert_eq!(firesense::eval::inflation_pct(a.f1, b.f1), Some(0.0));

    let fixed = MetricsReport::at_threshold(&probs, &prev, &target, Protocol::Inflated, 0.5).unwrap();
    assert_eq!(fixed.threshold, 0.5);
    assert_eq!(fixed.confusion.total(), 256);
}
