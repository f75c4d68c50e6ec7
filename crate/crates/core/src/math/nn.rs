//! Named parameter storage and functional layers.
//!
//! Parameters live in a [`ParamSet`] keyed by hierarchical names
//! (`"encoder.stem.conv.w"`). A forward pass binds them to a tape as leaves
//! (trainable) or constants (frozen / inference) via [`ParamVars`]; layer
//! functions look weights up by prefix so the same code serves training and
//! evaluation.

use std::collections::BTreeMap;

use ndarray::IxDyn;
use rand::Rng;

use super::conv::conv2d;
use super::tensor::{Arr, Tape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Named dense arrays: model weights, optimizer moments or batch-norm buffers.
#[derive(Clone, Default)]
pub struct ParamSet {
    pub map: BTreeMap<String, Arr>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Arr) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> &Arr {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Arr {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    /// Bind every parameter as a tracked leaf on `tape`.
    pub fn leaves(&self, tape: &Tape) -> ParamVars {
        self.bind(|_| true, Some(tape))
    }

    /// Bind every parameter as a constant (inference).
    pub fn constants(&self) -> ParamVars {
        self.bind(|_| false, None)
    }

    /// Bind parameters, tracking only those whose name passes `trainable`.
    pub fn bind(&self, trainable: impl Fn(&str) -> bool, tape: Option<&Tape>) -> ParamVars {
        let mut map = BTreeMap::new();
        for (name, value) in &self.map {
            let t = match (tape, trainable(name)) {
                (Some(tape), true) => tape.leaf(value.clone()),
                _ => Tensor::constant(value.clone()),
            };
            map.insert(name.clone(), t);
        }
        ParamVars { map }
    }
}

/// Parameters bound for one forward pass.
pub struct ParamVars {
    pub map: BTreeMap<String, Tensor>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing bound parameter `{name}`"))
    }

    pub fn tracked(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter().filter(|(_, t)| t.is_tracked())
    }
}

// ---- initializers (Kaiming-uniform, PyTorch defaults) ----

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Arr {
    Arr::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-bound..bound))
}

/// Linear layer weights `(in, out)` plus bias `(out,)`.
pub fn init_linear(set: &mut ParamSet, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    set.insert(format!("{prefix}.w"), uniform(&[fan_in, fan_out], bound, rng));
    set.insert(format!("{prefix}.b"), uniform(&[fan_out], bound, rng));
}

/// Conv weights `(cout, cin, k, k)` plus bias `(cout,)`.
pub fn init_conv(set: &mut ParamSet, prefix: &str, cout: usize, cin: usize, k: usize, rng: &mut impl Rng) {
    let bound = 1.0 / ((cin * k * k) as f64).sqrt();
    set.insert(format!("{prefix}.w"), uniform(&[cout, cin, k, k], bound, rng));
    set.insert(format!("{prefix}.b"), uniform(&[cout], bound, rng));
}

/// Batch-norm scale/shift parameters plus running-stat buffers.
pub fn init_batchnorm(weights: &mut ParamSet, buffers: &mut ParamSet, prefix: &str, c: usize) {
    weights.insert(format!("{prefix}.gamma"), Arr::ones(IxDyn(&[c])));
    weights.insert(format!("{prefix}.beta"), Arr::zeros(IxDyn(&[c])));
    buffers.insert(format!("{prefix}.rm"), Arr::zeros(IxDyn(&[c])));
    buffers.insert(format!("{prefix}.rv"), Arr::ones(IxDyn(&[c])));
}

// ---- functional layers ----

/// `x (M, in) -> (M, out)`.
pub fn linear(p: &ParamVars, prefix: &str, x: &Tensor) -> Tensor {
    x.matmul(p.get(&format!("{prefix}.w")))
        .add(p.get(&format!("{prefix}.b")))
}

/// Convolution with weights looked up under `prefix`.
pub fn conv(p: &ParamVars, prefix: &str, x: &Tensor, stride: usize, pad: usize) -> Tensor {
    conv2d(
        x,
        p.get(&format!("{prefix}.w")),
        p.get(&format!("{prefix}.b")),
        stride,
        pad,
    )
}

/// Batch-norm execution state: batch statistics during training (updating the
/// running buffers in place), stored statistics during inference.
pub struct BnState<'a> {
    pub buffers: &'a mut ParamSet,
    pub training: bool,
}

pub fn batchnorm2d(p: &ParamVars, prefix: &str, x: &Tensor, bn: &mut BnState) -> Tensor {
    let c = x.shape()[1];
    let gamma = p.get(&format!("{prefix}.gamma")).reshape(&[1, c, 1, 1]);
    let beta = p.get(&format!("{prefix}.beta")).reshape(&[1, c, 1, 1]);
    let rm_name = format!("{prefix}.rm");
    let rv_name = format!("{prefix}.rv");
    if bn.training {
        let n = (x.shape()[0] * x.shape()[2] * x.shape()[3]) as f64;
        let mean = x.mean_axis(3, true).mean_axis(2, true).mean_axis(0, true);
        let centered = x.sub(&mean);
        let var = centered
            .square()
            .mean_axis(3, true)
            .mean_axis(2, true)
            .mean_axis(0, true);
        let y = centered.div(&var.shift(BN_EPS).sqrt());

        // running stats: unbiased variance, flattened back to (C,)
        let mean_c = mean.value().iter().cloned().collect::<Vec<_>>();
        let var_c = var.value().iter().cloned().collect::<Vec<_>>();
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        {
            let rm = bn.buffers.get_mut(&rm_name);
            for (r, m) in rm.iter_mut().zip(&mean_c) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
        }
        {
            let rv = bn.buffers.get_mut(&rv_name);
            for (r, v) in rv.iter_mut().zip(&var_c) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
        }
        y.mul(&gamma).add(&beta)
    } else {
        let rm = Tensor::constant(bn.buffers.get(&rm_name).clone()).reshape(&[1, c, 1, 1]);
        let rv = Tensor::constant(bn.buffers.get(&rv_name).clone()).reshape(&[1, c, 1, 1]);
        x.sub(&rm).div(&rv.shift(BN_EPS).sqrt()).mul(&gamma).add(&beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::gradcheck::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_shapes_and_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut set = ParamSet::new();
        init_linear(&mut set, "fc", 5, 3, &mut rng);
        let x = Arr::from_shape_fn(IxDyn(&[4, 5]), |_| 0.3);
        let err = gradcheck(
            |xs| {
                let tape_params = ParamVars {
                    map: [
                        ("fc.w".to_string(), xs[1].clone()),
                        ("fc.b".to_string(), xs[2].clone()),
                    ]
                    .into_iter()
                    .collect(),
                };
                linear(&tape_params, "fc", &xs[0]).square().sum_all()
            },
            &[x, set.get("fc.w").clone(), set.get("fc.b").clone()],
        );
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn batchnorm_train_normalizes_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut weights = ParamSet::new();
        let mut buffers = ParamSet::new();
        init_batchnorm(&mut weights, &mut buffers, "bn", 3);
        let x = Arr::from_shape_fn(IxDyn(&[2, 3, 4, 4]), |_| rng.gen_range(-2.0..5.0));
        let p = weights.constants();
        let mut bn = BnState {
            buffers: &mut buffers,
            training: true,
        };
        let y = batchnorm2d(&p, "bn", &Tensor::constant(x), &mut bn);
        // per-channel mean ~0, var ~1
        for c in 0..3 {
            let ch = y.value().index_axis(ndarray::Axis(1), c).to_owned();
            let m = ch.mean().unwrap();
            let v = ch.mapv(|e| (e - m) * (e - m)).mean().unwrap();
            assert!(m.abs() < 1e-9, "mean {m}");
            assert!((v - 1.0).abs() < 1e-3, "var {v}");
        }
        // buffers moved off their init values
        assert!(buffers.get("bn.rm").iter().any(|&v| v.abs() > 1e-6));
    }

    #[test]
    fn batchnorm_eval_is_deterministic_affine() {
        let mut weights = ParamSet::new();
        let mut buffers = ParamSet::new();
        init_batchnorm(&mut weights, &mut buffers, "bn", 2);
        buffers.get_mut("bn.rm").fill(0.5);
        buffers.get_mut("bn.rv").fill(4.0);
        let x = Arr::from_elem(IxDyn(&[1, 2, 2, 2]), 2.5);
        let p = weights.constants();
        let mut bn = BnState {
            buffers: &mut buffers,
            training: false,
        };
        let y1 = batchnorm2d(&p, "bn", &Tensor::constant(x.clone()), &mut bn);
        let y2 = batchnorm2d(&p, "bn", &Tensor::constant(x), &mut bn);
        assert_eq!(y1.value(), y2.value());
        // (2.5 - 0.5) / sqrt(4 + eps) ~= 1.0
        assert!((y1.value()[[0, 0, 0, 0]] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn batchnorm_train_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Arr::from_shape_fn(IxDyn(&[2, 2, 3, 3]), |_| rng.gen_range(-1.0..1.0));
        let g = Arr::from_shape_fn(IxDyn(&[2]), |_| rng.gen_range(0.5..1.5));
        let b = Arr::from_shape_fn(IxDyn(&[2]), |_| rng.gen_range(-0.5..0.5));
        let err = gradcheck(
            |xs| {
                let p = ParamVars {
                    map: [
                        ("bn.gamma".to_string(), xs[1].clone()),
                        ("bn.beta".to_string(), xs[2].clone()),
                    ]
                    .into_iter()
                    .collect(),
                };
                let mut buffers = ParamSet::new();
                buffers.insert("bn.rm", Arr::zeros(IxDyn(&[2])));
                buffers.insert("bn.rv", Arr::ones(IxDyn(&[2])));
                let mut bn = BnState {
                    buffers: &mut buffers,
                    training: true,
                };
                let w = Tensor::constant(Arr::from_shape_fn(IxDyn(&[2, 2, 3, 3]), |d| {
                    0.1 + 0.05 * (d[1] + d[2]) as f64
                }));
                batchnorm2d(&p, "bn", &xs[0], &mut bn).mul(&w).sum_all()
            },
            &[x, g, b],
        );
        assert!(err < 1e-6, "rel err {err}");
    }
}
