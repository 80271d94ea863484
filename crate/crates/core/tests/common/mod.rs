#![allow(dead_code)]

use augsearch::autodiff::{DiffTensor, Tape};
use augsearch::Result;

pub type Inputs = Vec<(Vec<f64>, Vec<usize>)>;

/// `sum(w * y)` so that any output can be checked through a scalar.
pub fn project(tape: &mut Tape, y: DiffTensor, w: &[f64]) -> Result<DiffTensor> {
    let shape = tape.shape(y).to_vec();
    let wt = tape.constant(w.to_vec(), &shape)?;
    let p = tape.mul(y, wt)?;
    tape.sum(p)
}

pub fn weights(len: usize) -> Vec<f64> {
    (0..len).map(|i| ((i * 7919 % 23) as f64 - 11.0) / 11.0).collect()
}

fn loss_at<F>(build: &F, inputs: &Inputs, w: &[f64]) -> Result<f64>
where
    F: Fn(&mut Tape, &[DiffTensor]) -> Result<DiffTensor>,
{
    let mut tape = Tape::new();
    let leaves = inputs.iter().map(|(v, s)| tape.constant(v.clone(), s)).collect::<Result<Vec<_>>>()?;
    let y = build(&mut tape, &leaves)?;
    let l = project(&mut tape, y, w)?;
    Ok(tape.scalar(l))
}

/// Reverse-mode gradients and their central-difference estimates, one pair
/// per input coordinate.
pub fn gradient_pairs<F>(build: F, inputs: &Inputs, h: f64) -> Result<Vec<(f64, f64)>>
where
    F: Fn(&mut Tape, &[DiffTensor]) -> Result<DiffTensor>,
{
    let mut tape = Tape::new();
    let leaves = inputs.iter().map(|(v, s)| tape.leaf(v.clone(), s)).collect::<Result<Vec<_>>>()?;
    let y = build(&mut tape, &leaves)?;
    let w = weights(tape.value(y).len());
    let l = project(&mut tape, y, &w)?;
    let grads = tape.backward(l)?;
    let mut out = Vec::new();
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get_or_zeros(*leaf, inputs[li].0.len());
        for (j, a) in analytic.iter().enumerate() {
            let shift = |d: f64| {
                let mut s = inputs.clone();
                s[li].0[j] += d;
                loss_at(&build, &s, &w)
            };
            out.push((*a, (shift(h)? - shift(-h)?) / (2.0 * h)));
        }
    }
    Ok(out)
}

/// Largest `|a - n| / max(|a|, |n|, floor)`.
pub fn max_rel_err(pairs: &[(f64, f64)], floor: f64) -> f64 {
    pairs.iter().map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor)).fold(0.0, f64::max)
}
