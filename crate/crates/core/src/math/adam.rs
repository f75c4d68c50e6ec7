//! Adaptive-moment gradient descent.

use std::collections::BTreeMap;

use super::nn::ParamSet;
use super::tensor::Arr;

pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: BTreeMap<String, Arr>,
    pub v: BTreeMap<String, Arr>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over every parameter that received a gradient.
    pub fn step(&mut self, lr: f64, params: &mut ParamSet, grads: &BTreeMap<String, Arr>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + self.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn descends_quadratic() {
        // minimize sum((x - 3)^2)
        let mut params = ParamSet::new();
        params.insert("x", Arr::zeros(IxDyn(&[4])));
        let mut opt = Adam::new();
        for _ in 0..2000 {
            let g = params.get("x").mapv(|x| 2.0 * (x - 3.0));
            let grads = [("x".to_string(), g)].into_iter().collect();
            opt.step(0.05, &mut params, &grads);
        }
        for &x in params.get("x").iter() {
            assert!((x - 3.0).abs() < 1e-3, "converged to {x}");
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        // with bias correction the very first Adam step is ~lr * sign(g)
        let mut params = ParamSet::new();
        params.insert("x", Arr::zeros(IxDyn(&[1])));
        let mut opt = Adam::new();
        let grads = [(
            "x".to_string(),
            Arr::from_elem(IxDyn(&[1]), 0.7),
        )]
        .into_iter()
        .collect();
        opt.step(0.01, &mut params, &grads);
        assert!((params.get("x")[[0]] + 0.01).abs() < 1e-6);
    }
}
