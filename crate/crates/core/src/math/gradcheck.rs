//! Central-difference gradient checking used across the test suites.

use super::tensor::{Arr, Tape, Tensor};

/// Maximum relative error between analytic and central-difference gradients
/// of a scalar-valued function, over every element of every input.
///
/// Relative error is `|a - n| / max(|a| + |n|, 1e-6)` so that tiny gradients
/// are compared absolutely.
pub fn gradcheck_eps(f: impl Fn(&[Tensor]) -> Tensor, inputs: &[Arr], eps: f64) -> f64 {
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let loss = f(&leaves);
    assert_eq!(loss.value().len(), 1, "gradcheck expects a scalar loss");
    let keep: Vec<&Tensor> = leaves.iter().collect();
    let grads = tape.backward(&loss, &keep);

    let eval = |xs: &[Arr]| -> f64 {
        let consts: Vec<Tensor> = xs.iter().map(|a| Tensor::constant(a.clone())).collect();
        let out = f(&consts);
        out.value().iter().copied().next().unwrap()
    };

    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(&leaves[k])
            .cloned()
            .unwrap_or_else(|| Arr::zeros(input.raw_dim()));
        for (idx, _) in input.indexed_iter() {
            let mut plus: Vec<Arr> = inputs.to_vec();
            let mut minus: Vec<Arr> = inputs.to_vec();
            plus[k][&idx] += eps;
            minus[k][&idx] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic[&idx];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

pub fn gradcheck(f: impl Fn(&[Tensor]) -> Tensor, inputs: &[Arr]) -> f64 {
    gradcheck_eps(f, inputs, 1e-6)
}
