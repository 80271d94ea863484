mod common;

use augsearch::autodiff::{sigmoid, Tape};
use augsearch::relaxations::{
    draw_logistic, gumbel_from_uniform, gumbel_sigmoid_hard, gumbel_sinkhorn_sample, gumbel_softmax_hard,
    pad_logits, repetition_rate, sample_gumbel, sample_magnitude, sample_magnitude_gaussian, sinkhorn_normalize,
    AssignmentSampler, Temperature, PAD_VALUE,
};
use augsearch::rng::stream;
use common::{gradient_pairs, max_rel_err};
use proptest::prelude::*;
use rand::Rng;

fn temperature() -> impl Strategy<Value = f64> {
    prop_oneof![Just(1.0), Just(0.5), Just(0.1), 0.05..2.0f64]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hard_depth_index_is_temperature_invariant(delta in proptest::collection::vec(-3.0..3.0f64, 2..9), seed in any::<u64>(), t in temperature()) {
        let mut rng = stream(seed, "prop-depth", &[]);
        let g: Vec<f64> = (0..delta.len()).map(|_| gumbel_from_uniform(rng.random())).collect();
        let expect = delta.iter().zip(&g).enumerate().fold((0, f64::NEG_INFINITY), |b, (i, (d, gi))| if d + gi > b.1 { (i, d + gi) } else { b }).0;
        let mut tape = Tape::new();
        let d = tape.leaf(delta.clone(), &[delta.len()]).unwrap();
        let draw = gumbel_softmax_hard(&mut tape, d, Temperature::new(t).unwrap(), &g).unwrap();
        prop_assert_eq!(draw.index, expect);
        let hard = tape.value(draw.hard);
        prop_assert_eq!(hard.iter().filter(|v| **v == 1.0).count(), 1);
        prop_assert_eq!(hard[expect], 1.0);
    }

    #[test]
    fn sinkhorn_output_is_doubly_stochastic(n in 2usize..10, seed in any::<u64>()) {
        let mut rng = stream(seed, "prop-sinkhorn", &[]);
        let v: Vec<f64> = (0..n * n).map(|_| rng.random_range(-3.0..3.0f64).exp()).collect();
        let mut tape = Tape::new();
        let m = tape.constant(v, &[n, n]).unwrap();
        let s = sinkhorn_normalize(&mut tape, m, 300).unwrap();
        let x = tape.value(s);
        for i in 0..n {
            let col: f64 = (0..n).map(|r| x[r * n + i]).sum();
            let row: f64 = x[i * n..(i + 1) * n].iter().sum();
            prop_assert!((col - 1.0).abs() < 1e-9);
            prop_assert!((row - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn permutation_columns_are_one_hot(n in 1usize..15, k_frac in 0.0..1.0f64, seed in any::<u64>(), t in temperature(), iters in 1usize..25) {
        let k = ((n as f64 * k_frac).ceil() as usize).clamp(1, n);
        let mut rng = stream(seed, "prop-perm", &[]);
        let pi: Vec<f64> = (0..n * k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g = sample_gumbel(&[n, n], &mut rng);
        let mut tape = Tape::new();
        let p = tape.leaf(pi, &[n, k]).unwrap();
        let draw = gumbel_sinkhorn_sample(&mut tape, p, Temperature::new(t).unwrap(), iters, &g.values).unwrap();
        let hard = tape.value(draw.hard);
        for c in 0..k {
            let col: Vec<f64> = (0..n).map(|r| hard[r * k + c]).collect();
            prop_assert_eq!(col.iter().filter(|v| **v == 1.0).count(), 1);
            prop_assert!(col.iter().all(|v| *v == 0.0 || *v == 1.0));
            prop_assert_eq!(col[draw.rows[c]], 1.0);
        }
        prop_assert!(tape.value(draw.soft).iter().all(|v| (0.0..=1.0 + 1e-12).contains(v)));
    }

    #[test]
    fn uniform_magnitude_stays_in_interval(l in -8.0..8.0f64, u in -8.0..8.0f64, eps in 0.0..1.0f64) {
        let mut tape = Tape::new();
        let lt = tape.leaf(vec![l], &[1]).unwrap();
        let ut = tape.leaf(vec![u], &[1]).unwrap();
        let m = sample_magnitude(&mut tape, lt, ut, &[eps]).unwrap();
        let m = tape.scalar(m);
        let (a, b) = (sigmoid(l), sigmoid(u));
        prop_assert!(m >= a.min(b) - 1e-15 && m <= a.max(b) + 1e-15);
    }

    #[test]
    fn magnitude_gradients_match_central_differences(seed in any::<u64>()) {
        let mut rng = stream(seed, "prop-magnitude", &[]);
        let eps: Vec<f64> = (0..4).map(|_| rng.random()).collect();
        let z: Vec<f64> = (0..4).map(|_| rng.random_range(-2.5..2.5)).collect();
        let lo: Vec<f64> = (0..4).map(|_| rng.random_range(-4.0..4.0)).collect();
        let hi: Vec<f64> = (0..4).map(|_| rng.random_range(-4.0..4.0)).collect();
        let uniform = gradient_pairs(|t, v| sample_magnitude(t, v[0], v[1], &eps), &vec![(lo, vec![4]), (hi, vec![4])], 1e-6).unwrap();
        prop_assert!(max_rel_err(&uniform, 1e-6) < 1e-4);
        // Keep the gaussian draw inside the clamp so the map is smooth.
        let mean: Vec<f64> = (0..4).map(|_| rng.random_range(0.45..0.55)).collect();
        let std: Vec<f64> = (0..4).map(|_| rng.random_range(0.01..0.15)).collect();
        let gauss = gradient_pairs(|t, v| sample_magnitude_gaussian(t, v[0], v[1], &z), &vec![(mean, vec![4]), (std, vec![4])], 1e-6).unwrap();
        prop_assert!(max_rel_err(&gauss, 1e-6) < 1e-4);
    }

    #[test]
    fn gaussian_magnitude_is_clamped(mean in -1.0..2.0f64, std in 0.001..3.0f64, z in -5.0..5.0f64) {
        let mut tape = Tape::new();
        let m = tape.leaf(vec![mean], &[1]).unwrap();
        let s = tape.leaf(vec![std], &[1]).unwrap();
        let v = sample_magnitude_gaussian(&mut tape, m, s, &[z]).unwrap();
        let v = tape.scalar(v);
        prop_assert!(v > 0.0 && v < 1.0);
    }

    #[test]
    fn padding_keeps_logits(n in 1usize..10, k_frac in 0.0..1.0f64) {
        let k = ((n as f64 * k_frac).ceil() as usize).clamp(1, n);
        let pi: Vec<f64> = (0..n * k).map(|i| i as f64).collect();
        let mut tape = Tape::new();
        let p = tape.constant(pi.clone(), &[n, k]).unwrap();
        let padded = pad_logits(&mut tape, p, PAD_VALUE).unwrap();
        prop_assert_eq!(tape.shape(padded), &[n, n]);
        let v = tape.value(padded);
        for r in 0..n {
            for c in 0..n {
                let expect = if c < k { pi[r * k + c] } else { PAD_VALUE };
                prop_assert_eq!(v[r * n + c], expect);
            }
        }
    }
}

#[test]
fn gumbel_moments() {
    let mut rng = stream(3, "gumbel-moments", &[]);
    let g = sample_gumbel(&[200_000], &mut rng).values;
    let mean = g.iter().sum::<f64>() / g.len() as f64;
    let var = g.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / g.len() as f64;
    // Euler-Mascheroni constant and pi^2 / 6.
    assert!((mean - 0.577_215_664_9).abs() < 0.01, "mean {mean}");
    assert!((var - std::f64::consts::PI.powi(2) / 6.0).abs() < 0.03, "var {var}");
}

#[test]
fn gate_frequencies_match_sigmoid() {
    let logits = [-1.5, 0.0, 0.8, 2.0];
    let t = Temperature::new(0.5).unwrap();
    let mut rng = stream(4, "gate-freq", &[]);
    let draws = 40_000;
    let mut on = [0usize; 4];
    for _ in 0..draws {
        let noise = draw_logistic(4, &mut rng);
        let mut tape = Tape::new();
        let a = tape.constant(logits.to_vec(), &[4]).unwrap();
        let (_, hard) = gumbel_sigmoid_hard(&mut tape, a, t, &noise).unwrap();
        for (c, v) in on.iter_mut().zip(tape.value(hard)) {
            *c += (*v == 1.0) as usize;
        }
    }
    for (c, a) in on.iter().zip(logits) {
        let f = *c as f64 / draws as f64;
        assert!((f - sigmoid(a)).abs() < 0.01, "logit {a}: {f} vs {}", sigmoid(a));
    }
}

#[test]
fn dominating_permutation_is_recovered() {
    let (n, k) = (5, 3);
    let target = [3usize, 0, 4];
    let mut pi = vec![0.0; n * k];
    for (c, r) in target.iter().enumerate() {
        pi[r * k + c] = 20.0;
    }
    let t = Temperature::new(0.5).unwrap();
    let mut hits = 0;
    for s in 0..2000u64 {
        let mut rng = stream(5, "dominating", &[s]);
        let g = sample_gumbel(&[n, n], &mut rng);
        let mut tape = Tape::new();
        let p = tape.constant(pi.clone(), &[n, k]).unwrap();
        let d = gumbel_sinkhorn_sample(&mut tape, p, t, 20, &g.values).unwrap();
        hits += (d.rows == target) as usize;
    }
    assert!(hits as f64 / 2000.0 > 0.99, "{hits}");
}

#[test]
fn padded_columns_absorb_leftover_mass() {
    let (n, k) = (6, 2);
    let mut rng = stream(6, "pad-mass", &[]);
    let pi: Vec<f64> = (0..n * k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g = sample_gumbel(&[n, n], &mut rng);
    let mut tape = Tape::new();
    let p = tape.constant(pi, &[n, k]).unwrap();
    let padded = pad_logits(&mut tape, p, PAD_VALUE).unwrap();
    let gt = tape.constant(g.values, &[n, n]).unwrap();
    let x = tape.add(padded, gt).unwrap();
    let x = tape.scale(x, 2.0).unwrap();
    let e = tape.exp(x).unwrap();
    let e = tape.clamp(e, 1e-30, f64::MAX).unwrap();
    let s = sinkhorn_normalize(&mut tape, e, 20).unwrap();
    let v = tape.value(s);
    for c in k..n {
        let mass: f64 = (0..n).map(|r| v[r * n + c]).sum();
        assert!((mass - 1.0).abs() < 1e-6, "column {c}: {mass}");
    }
}

#[test]
fn independent_sampler_matches_birthday_bound() {
    let t = Temperature::new(0.1).unwrap();
    let s = repetition_rate(&[0.0; 4 * 3], 4, 3, t, 1, AssignmentSampler::Independent, 20_000, 9).unwrap();
    // 1 - (4 * 3 * 2) / 4^3
    assert!((s.rate - 0.625).abs() < 0.015, "{}", s.rate);
    assert_eq!(s.one_hot_columns, 1.0);
}

#[test]
fn repetition_rate_rejects_bad_shapes() {
    let t = Temperature::new(0.1).unwrap();
    assert!(repetition_rate(&[0.0; 6], 2, 3, t, 1, AssignmentSampler::Sinkhorn, 10, 0).is_err());
    assert!(repetition_rate(&[0.0; 6], 3, 2, t, 1, AssignmentSampler::Sinkhorn, 0, 0).is_err());
}
