mod common;

use augsearch::autodiff::{DiffTensor, Tape};
use augsearch::Result;
use common::{gradient_pairs, max_rel_err, Inputs};
use proptest::prelude::*;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;
const FLOOR: f64 = 1e-4;

fn values(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(lo..hi, n)
}

fn matrix(max: usize) -> impl Strategy<Value = (usize, usize)> {
    (1..=max, 1..=max)
}

fn check(build: impl Fn(&mut Tape, &[DiffTensor]) -> Result<DiffTensor>, inputs: Inputs) -> f64 {
    max_rel_err(&gradient_pairs(build, &inputs, H).unwrap(), FLOOR)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn unary_ops_match_central_differences(x in values(6, -3.0, 3.0), op in 0usize..9) {
        let build = move |t: &mut Tape, v: &[DiffTensor]| match op {
            0 => t.exp(v[0]),
            1 => t.sin(v[0]),
            2 => t.cos(v[0]),
            3 => t.sigmoid(v[0]),
            4 => t.silu(v[0]),
            5 => t.neg(v[0]),
            6 => t.scale(v[0], -1.7),
            7 => t.offset(v[0], 0.3),
            _ => {
                let sq = t.mul(v[0], v[0])?;
                let p = t.offset(sq, 0.5)?;
                t.log(p)
            }
        };
        prop_assert!(check(build, vec![(x, vec![2, 3])]) < TOL);
    }

    #[test]
    fn binary_ops_match_central_differences(
        (r, c) in matrix(4),
        seed in any::<u64>(),
        op in 0usize..4,
    ) {
        let n = r * c;
        let a: Vec<f64> = (0..n).map(|i| ((seed.rotate_left(i as u32) % 1000) as f64 / 250.0) - 2.0).collect();
        let b: Vec<f64> = (0..n).map(|i| ((seed.rotate_right(i as u32 + 3) % 1000) as f64 / 500.0) + 0.5).collect();
        let build = move |t: &mut Tape, v: &[DiffTensor]| match op {
            0 => t.add(v[0], v[1]),
            1 => t.sub(v[0], v[1]),
            2 => t.mul(v[0], v[1]),
            _ => t.div(v[0], v[1]),
        };
        prop_assert!(check(build, vec![(a, vec![r, c]), (b, vec![r, c])]) < TOL);
    }

    #[test]
    fn matmul_matches_central_differences(m in 1usize..4, k in 1usize..4, n in 1usize..4, a in values(9, -2.0, 2.0), b in values(9, -2.0, 2.0)) {
        let inputs = vec![(a[..m * k].to_vec(), vec![m, k]), (b[..k * n].to_vec(), vec![k, n])];
        prop_assert!(check(|t, v| t.matmul(v[0], v[1]), inputs) < TOL);
    }

    #[test]
    fn row_softmaxes_match_central_differences((r, c) in matrix(4), x in values(16, -4.0, 4.0), log in any::<bool>()) {
        let inputs = vec![(x[..r * c].to_vec(), vec![r, c])];
        let err = if log {
            check(|t, v| t.log_softmax_rows(v[0]), inputs)
        } else {
            check(|t, v| t.softmax_rows(v[0]), inputs)
        };
        prop_assert!(err < TOL);
    }

    #[test]
    fn softmax_rows_are_distributions((r, c) in matrix(5), x in values(25, -30.0, 30.0)) {
        let mut t = Tape::new();
        let v = t.constant(x[..r * c].to_vec(), &[r, c]).unwrap();
        let s = t.softmax_rows(v).unwrap();
        let l = t.log_softmax_rows(v).unwrap();
        for row in 0..r {
            let p = &t.value(s)[row * c..(row + 1) * c];
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (pi, li) in p.iter().zip(&t.value(l)[row * c..(row + 1) * c]) {
                prop_assert!((pi.ln() - li).abs() < 1e-9 || *pi < 1e-300);
            }
        }
    }

    #[test]
    fn reductions_and_reshapes_match_central_differences((r, c) in matrix(4), x in values(16, -2.0, 2.0), op in 0usize..6) {
        let build = move |t: &mut Tape, v: &[DiffTensor]| match op {
            0 => t.sum(v[0]),
            1 => t.mean(v[0]),
            2 => t.sum_axis(v[0], 0),
            3 => t.sum_axis(v[0], 1),
            4 => t.reshape(v[0], &[c, r]),
            _ => {
                let s = t.sum_axis(v[0], 0)?;
                let s = t.reshape(s, &[1, c])?;
                t.broadcast_to(s, &[r + 1, c])
            }
        };
        prop_assert!(check(build, vec![(x[..r * c].to_vec(), vec![r, c])]) < TOL);
    }

    #[test]
    fn slicing_and_concat_match_central_differences(c in 2usize..5, x in values(20, -2.0, 2.0), start in 0usize..4) {
        let start = start % c;
        let len = c - start;
        let inputs = vec![(x[..2 * c].to_vec(), vec![2, c]), (x[10..10 + 2 * c].to_vec(), vec![2, c])];
        let build = move |t: &mut Tape, v: &[DiffTensor]| {
            let both = t.concat(&[v[0], v[1]], 1)?;
            let s = t.slice(both, 1, start, len + 1)?;
            let e = t.element(v[1], start)?;
            let e = t.reshape(e, &[1, 1])?;
            let e = t.broadcast_to(e, &[2, len + 1])?;
            t.mul(s, e)
        };
        prop_assert!(check(build, inputs) < TOL);
    }

    #[test]
    fn conv2d_matches_central_differences(
        c in 1usize..3,
        o in 1usize..3,
        h in 3usize..6,
        w in 3usize..6,
        stride in 1usize..3,
        padding in 0usize..2,
        x in values(2 * 5 * 5, -1.0, 1.0),
        k in values(2 * 2 * 9, -1.0, 1.0),
        b in values(2, -1.0, 1.0),
    ) {
        let inputs = vec![
            (x[..c * h * w].to_vec(), vec![c, h, w]),
            (k[..o * c * 9].to_vec(), vec![o, c, 3, 3]),
            (b[..o].to_vec(), vec![o]),
        ];
        prop_assert!(check(move |t, v| t.conv2d(v[0], v[1], v[2], stride, padding), inputs) < TOL);
    }

    #[test]
    fn weighted_sum_reaches_zero_weights(w0 in -2.0..2.0f64, a in values(4, -1.0, 1.0), b in values(4, -1.0, 1.0)) {
        // The item behind a zero weight gets no gradient, but the weight itself does.
        let mut t = Tape::new();
        let wts = t.leaf(vec![w0, 0.0], &[2]).unwrap();
        let ia = t.leaf(a.clone(), &[4]).unwrap();
        let ib = t.leaf(b.clone(), &[4]).unwrap();
        let y = t.weighted_sum(wts, &[ia, ib]).unwrap();
        let l = t.sum(y).unwrap();
        let g = t.backward(l).unwrap();
        let gw = g.get(wts).unwrap();
        prop_assert!((gw[0] - a.iter().sum::<f64>()).abs() < 1e-12);
        prop_assert!((gw[1] - b.iter().sum::<f64>()).abs() < 1e-12);
        prop_assert!(g.get_or_zeros(ib, 4).iter().all(|v| *v == 0.0));
        prop_assert!(g.get(ia).unwrap().iter().all(|v| (v - w0).abs() < 1e-12));
    }

    #[test]
    fn clamp_and_relu_away_from_kinks(x in values(6, 0.01, 0.49), sign in proptest::collection::vec(any::<bool>(), 6)) {
        let x: Vec<f64> = x.iter().zip(&sign).map(|(v, s)| if *s { *v } else { -v - 0.5 }).collect();
        prop_assert!(check(|t, v| t.relu(v[0]), vec![(x.clone(), vec![6])]) < TOL);
        prop_assert!(check(|t, v| t.clamp(v[0], -0.5, 0.25), vec![(x, vec![6])]) < 1e-4);
    }

    #[test]
    fn straight_through_forwards_hard_exactly(soft in values(5, -3.0, 3.0), hard in values(5, -1.0, 1.0)) {
        let mut t = Tape::new();
        let s = t.leaf(soft, &[5]).unwrap();
        let h = t.constant(hard.clone(), &[5]).unwrap();
        let y = t.straight_through(h, s).unwrap();
        prop_assert_eq!(t.value(y), hard.as_slice());
        let sq = t.mul(y, y).unwrap();
        let l = t.sum(sq).unwrap();
        let g = t.backward(l).unwrap();
        // d/dsoft of sum(y^2) evaluated at the forward value y = hard.
        for (gi, hi) in g.get(s).unwrap().iter().zip(&hard) {
            prop_assert!((gi - 2.0 * hi).abs() < 1e-12);
        }
    }
}

#[test]
fn constants_receive_no_gradient() {
    let mut t = Tape::new();
    let a = t.leaf(vec![1.0, 2.0], &[2]).unwrap();
    let c = t.constant(vec![3.0, 4.0], &[2]).unwrap();
    let y = t.mul(a, c).unwrap();
    let l = t.sum(y).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(a).unwrap(), &[3.0, 4.0]);
    assert!(g.get(c).is_none());
}

#[test]
fn custom_op_gradients_are_used() {
    let build = |t: &mut Tape, v: &[DiffTensor]| {
        let value: Vec<f64> = t.value(v[0]).iter().map(|x| x.sinh()).collect();
        let shape = t.shape(v[0]).to_vec();
        t.custom(
            "sinh",
            &[v[0]],
            &shape,
            value,
            Box::new(|ctx| vec![Some(ctx.inputs[0].iter().zip(ctx.grad).map(|(x, g)| x.cosh() * g).collect())]),
        )
    };
    assert!(check(build, vec![(vec![-1.0, 0.2, 1.5], vec![3])]) < TOL);
}
