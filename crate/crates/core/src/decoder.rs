//! Near and far rendering MLPs.
//!
//! Each decoder is a 7-layer trunk (hidden width configurable) taking the
//! per-view conditioning (positionally encoded position, triplane features,
//! residual features). The conditioning re-enters as a skip at the third
//! layer; after the fourth layer the per-view activations are mean-pooled
//! (validity-weighted) across views. A linear head plus softplus yields the
//! density; a two-layer head conditioned on the encoded viewing direction
//! yields the color through a sigmoid.

use nalgebra::Vector3;
use ndarray::IxDyn;
use rand::Rng;

use crate::error::{Error, Result};
use crate::math::nn::{init_linear, linear, ParamSet, ParamVars};
use crate::math::{Arr, Tensor};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Near,
    Far,
}

impl Branch {
    pub fn prefix(&self) -> &'static str {
        match self {
            Branch::Near => "decoder_near",
            Branch::Far => "decoder_far",
        }
    }

    /// Conditioning position length: raw xyz near, contracted 4-vector far.
    pub fn pos_len(&self) -> usize {
        match self {
            Branch::Near => 3,
            Branch::Far => 4,
        }
    }
}

/// Points strictly inside the unit sphere decode near; the boundary and
/// beyond decode far.
pub fn route(x: &Vector3<f64>) -> Branch {
    if x.norm_squared() < 1.0 {
        Branch::Near
    } else {
        Branch::Far
    }
}

/// Frequency encoding: `[v, sin(2^0 pi v), cos(2^0 pi v), ...,
/// sin(2^{n-1} pi v), cos(2^{n-1} pi v)]` per coordinate.
pub fn positional_encode(v: &Tensor, n_freq: usize, include_input: bool) -> Tensor {
    let mut parts: Vec<Tensor> = Vec::with_capacity(2 * n_freq + 1);
    if include_input {
        parts.push(v.clone());
    }
    for l in 0..n_freq {
        let scaled = v.scale(std::f64::consts::PI * (1u64 << l) as f64);
        parts.push(scaled.sin());
        parts.push(scaled.cos());
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::concat(&refs, 1)
}

fn init_one(weights: &mut ParamSet, cfg: &ModelConfig, branch: Branch, rng: &mut impl Rng) {
    let h = cfg.decoder_hidden;
    let cond = cfg.cond_dim(branch.pos_len());
    let pe_dir = cfg.pe_dim(3, cfg.n_freq_dir);
    let p = branch.prefix();
    init_linear(weights, &format!("{p}.l0"), cond, h, rng);
    init_linear(weights, &format!("{p}.l1"), h, h, rng);
    init_linear(weights, &format!("{p}.l2"), h + cond, h, rng); // skip layer
    init_linear(weights, &format!("{p}.l3"), h, h, rng);
    init_linear(weights, &format!("{p}.l4"), h, h, rng);
    init_linear(weights, &format!("{p}.l5"), h, h, rng);
    init_linear(weights, &format!("{p}.l6"), h, h, rng);
    init_linear(weights, &format!("{p}.sigma"), h, 1, rng);
    init_linear(weights, &format!("{p}.c0"), h + pe_dir, h, rng);
    init_linear(weights, &format!("{p}.c1"), h, 3, rng);
}

pub fn init_decoders(weights: &mut ParamSet, cfg: &ModelConfig, rng: &mut impl Rng) {
    init_one(weights, cfg, Branch::Near, rng);
    init_one(weights, cfg, Branch::Far, rng);
}

/// Per-view conditioning for decoding a batch of points.
pub struct DecodeInputs<'a> {
    /// (N, 3) near or (N, 4) far.
    pub x_cond: &'a Tensor,
    /// (N, 3) unit viewing directions.
    pub dirs: &'a Tensor,
    /// Per-view triplane samples (N, 3G); absent in the no-triplane ablation.
    pub f_tp: Option<&'a [Tensor]>,
    /// Per-view residual features and their validity flags.
    pub f_r: &'a [(Tensor, Vec<bool>)],
}

/// Decode density and color: returns `(sigma (N, 1), color (N, 3))`.
pub fn decode(
    p: &ParamVars,
    cfg: &ModelConfig,
    branch: Branch,
    inp: &DecodeInputs,
) -> Result<(Tensor, Tensor)> {
    let n_views = inp.f_r.len();
    if n_views == 0 {
        return Err(Error::invalid("decode requires at least one source view"));
    }
    if let Some(tp) = inp.f_tp {
        if tp.len() != n_views {
            return Err(Error::invalid("decode: per-view feature counts differ"));
        }
    }
    let n = inp.x_cond.shape()[0];
    let h = cfg.decoder_hidden;
    let prefix = branch.prefix();

    let pe_x = positional_encode(inp.x_cond, cfg.n_freq_pos, cfg.pe_include_input);

    // (V*N, cond): per-view conditioning stacked view-major
    let conds: Vec<Tensor> = (0..n_views)
        .map(|v| {
            let mut parts = vec![&pe_x];
            if let Some(tp) = inp.f_tp {
                parts.push(&tp[v]);
            }
            parts.push(&inp.f_r[v].0);
            Tensor::concat(&parts, 1)
        })
        .collect();
    let cond_refs: Vec<&Tensor> = conds.iter().collect();
    let cond = Tensor::concat(&cond_refs, 0);

    let x1 = linear(p, &format!("{prefix}.l0"), &cond).relu();
    let x2 = linear(p, &format!("{prefix}.l1"), &x1).relu();
    let x3 = linear(p, &format!("{prefix}.l2"), &Tensor::concat(&[&x2, &cond], 1)).relu();
    let x4 = linear(p, &format!("{prefix}.l3"), &x3).relu();

    // validity-weighted mean pooling across views
    let mut weights = Arr::zeros(IxDyn(&[n_views, n, 1]));
    for pt in 0..n {
        let n_valid = (0..n_views).filter(|&v| inp.f_r[v].1[pt]).count();
        for v in 0..n_views {
            weights[[v, pt, 0]] = if n_valid > 0 {
                if inp.f_r[v].1[pt] {
                    1.0 / n_valid as f64
                } else {
                    0.0
                }
            } else {
                1.0 / n_views as f64
            };
        }
    }
    let pooled = x4
        .reshape(&[n_views, n, h])
        .mul(&Tensor::constant(weights))
        .sum_axis(0, false);

    let x5 = linear(p, &format!("{prefix}.l4"), &pooled).relu();
    let x6 = linear(p, &format!("{prefix}.l5"), &x5).relu();
    let x7 = linear(p, &format!("{prefix}.l6"), &x6).relu();

    let sigma = linear(p, &format!("{prefix}.sigma"), &x7).softplus();
    let pe_d = positional_encode(inp.dirs, cfg.n_freq_dir, cfg.pe_include_input);
    let c = linear(p, &format!("{prefix}.c0"), &Tensor::concat(&[&x7, &pe_d], 1)).relu();
    let color = linear(p, &format!("{prefix}.c1"), &c).sigmoid();
    Ok((sigma, color))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::gradcheck::gradcheck_eps;
    use crate::model::ModelParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn micro_cfg() -> ModelConfig {
        ModelConfig {
            feature_channels: 16,
            volume_res: 4,
            depth_mlp_hidden: 8,
            aggregator_hidden: 8,
            decoder_hidden: 16,
            encoder_blocks_per_stage: 1,
            ..ModelConfig::default()
        }
    }

    fn randn(shape: &[usize], seed: u64) -> Arr {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Arr::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn positional_encode_zero_and_dims() {
        let v = Tensor::constant(Arr::zeros(IxDyn(&[2, 3])));
        let out = positional_encode(&v, 10, true);
        assert_eq!(out.shape(), &[2, 63]);
        // layout: [input | sin l0 | cos l0 | ...]; sines 0, cosines 1
        for l in 0..10 {
            for k in 0..3 {
                assert_eq!(out.value()[[0, 3 + 6 * l + k]], 0.0);
                assert_eq!(out.value()[[0, 6 + 6 * l + k]], 1.0);
            }
        }
    }

    #[test]
    fn positional_encode_frequency_spot_check() {
        let v = Tensor::constant(Arr::from_elem(IxDyn(&[1, 1]), 0.1));
        let out = positional_encode(&v, 5, false);
        // frequency l=3 term: sin/cos of 2^3 * pi * 0.1
        let arg = 8.0 * std::f64::consts::PI * 0.1;
        assert!((out.value()[[0, 6]] - arg.sin()).abs() < 1e-12);
        assert!((out.value()[[0, 7]] - arg.cos()).abs() < 1e-12);
    }

    #[test]
    fn routing_boundary_goes_far() {
        assert_eq!(route(&Vector3::new(0.5, 0.0, 0.0)), Branch::Near);
        assert_eq!(route(&Vector3::new(1.5, 0.0, 0.0)), Branch::Far);
        assert_eq!(route(&Vector3::new(1.0, 0.0, 0.0)), Branch::Far);
    }

    struct Fixture {
        params: ModelParams,
        x: Arr,
        dirs: Arr,
        tp: Vec<Arr>,
        fr: Vec<Arr>,
        validity: Vec<Vec<bool>>,
    }

    fn fixture(n_views: usize, n: usize, seed: u64) -> Fixture {
        let cfg = micro_cfg();
        let params = ModelParams::init(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let g3 = 3 * cfg.plane_channels();
        let c = cfg.feature_channels;
        let validity: Vec<Vec<bool>> = (0..n_views)
            .map(|_| (0..n).map(|_| rng.gen_bool(0.8)).collect())
            .collect();
        Fixture {
            params,
            x: randn(&[n, 3], seed + 1).mapv(|v| v * 0.5),
            dirs: randn(&[n, 3], seed + 2),
            tp: (0..n_views).map(|v| randn(&[n, g3], seed + 3 + v as u64)).collect(),
            fr: (0..n_views).map(|v| randn(&[n, c], seed + 30 + v as u64)).collect(),
            validity,
        }
    }

    fn run(f: &Fixture, view_order: &[usize]) -> (Arr, Arr) {
        let cfg = micro_cfg();
        let p = f.params.weights.constants();
        let tp: Vec<Tensor> = view_order
            .iter()
            .map(|&v| Tensor::constant(f.tp[v].clone()))
            .collect();
        let fr: Vec<(Tensor, Vec<bool>)> = view_order
            .iter()
            .map(|&v| (Tensor::constant(f.fr[v].clone()), f.validity[v].clone()))
            .collect();
        let (sigma, color) = decode(
            &p,
            &cfg,
            Branch::Near,
            &DecodeInputs {
                x_cond: &Tensor::constant(f.x.clone()),
                dirs: &Tensor::constant(f.dirs.clone()),
                f_tp: Some(&tp),
                f_r: &fr,
            },
        )
        .unwrap();
        (sigma.value().clone(), color.value().clone())
    }

    #[test]
    fn outputs_respect_activation_ranges() {
        let f = fixture(3, 12, 1);
        let (sigma, color) = run(&f, &[0, 1, 2]);
        assert!(sigma.iter().all(|&s| s >= 0.0));
        assert!(color.iter().all(|&c| (0.0..=1.0).contains(&c)));
    }

    #[test]
    fn duplicated_view_equals_single_view() {
        let f = fixture(1, 6, 2);
        let (s1, c1) = run(&f, &[0]);
        let (s2, c2) = run(&f, &[0, 0]);
        let ds = (&s1 - &s2).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
        let dc = (&c1 - &c2).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
        assert!(ds < 1e-12 && dc < 1e-12);
    }

    #[test]
    fn view_permutation_invariance() {
        let f = fixture(3, 8, 3);
        let (s1, c1) = run(&f, &[0, 1, 2]);
        let (s2, c2) = run(&f, &[2, 0, 1]);
        let ds = (&s1 - &s2).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
        let dc = (&c1 - &c2).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
        assert!(ds <= 1e-6 && dc <= 1e-6, "ds {ds} dc {dc}");
    }

    #[test]
    fn zero_views_is_input_error() {
        let f = fixture(1, 4, 4);
        let cfg = micro_cfg();
        let p = f.params.weights.constants();
        let err = decode(
            &p,
            &cfg,
            Branch::Near,
            &DecodeInputs {
                x_cond: &Tensor::constant(f.x.clone()),
                dirs: &Tensor::constant(f.dirs.clone()),
                f_tp: Some(&[]),
                f_r: &[],
            },
        );
        assert!(err.is_err());
    }

    #[test]
    fn near_and_far_share_no_parameters() {
        let f = fixture(2, 5, 5);
        let cfg = micro_cfg();
        // far decode with perturbed near params must be identical
        let far_inputs = |params: &ModelParams| {
            let p = params.weights.constants();
            let x4 = randn(&[5, 4], 60).mapv(|v| v * 0.5 + 1.2);
            let tp: Vec<Tensor> = vec![Tensor::constant(f.tp[0].clone())];
            let fr = vec![(Tensor::constant(f.fr[0].clone()), f.validity[0].clone())];
            let (s, c) = decode(
                &p,
                &cfg,
                Branch::Far,
                &DecodeInputs {
                    x_cond: &Tensor::constant(x4),
                    dirs: &Tensor::constant(f.dirs.clone()),
                    f_tp: Some(&tp),
                    f_r: &fr,
                },
            )
            .unwrap();
            (s.value().clone(), c.value().clone())
        };
        let (s1, c1) = far_inputs(&f.params);
        let mut perturbed = f.params.clone();
        for (name, v) in perturbed.weights.map.iter_mut() {
            if name.starts_with("decoder_near") {
                v.mapv_inplace(|x| x + 0.37);
            }
        }
        let (s2, c2) = far_inputs(&perturbed);
        assert_eq!(s1, s2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let f = fixture(2, 3, 6);
        let cfg = micro_cfg();
        let params = f.params.clone();
        let validity = f.validity.clone();
        let probe_s = randn(&[3, 1], 70).mapv(f64::abs);
        let probe_c = randn(&[3, 3], 71);
        let err = gradcheck_eps(
            move |xs| {
                let p = params.weights.constants();
                let tp = vec![xs[1].clone(), xs[2].clone()];
                let fr = vec![
                    (xs[3].clone(), validity[0].clone()),
                    (xs[4].clone(), validity[1].clone()),
                ];
                let (sigma, color) = decode(
                    &p,
                    &cfg,
                    Branch::Near,
                    &DecodeInputs {
                        x_cond: &xs[0],
                        dirs: &xs[5],
                        f_tp: Some(&tp),
                        f_r: &fr,
                    },
                )
                .unwrap();
                sigma
                    .mul(&Tensor::constant(probe_s.clone()))
                    .sum_all()
                    .add(&color.mul(&Tensor::constant(probe_c.clone())).sum_all())
            },
            &[
                f.x.clone(),
                f.tp[0].clone(),
                f.tp[1].clone(),
                f.fr[0].clone(),
                f.fr[1].clone(),
                f.dirs.clone(),
            ],
            1e-6,
        );
        assert!(err < 1e-4, "rel err {err}");
    }
}
