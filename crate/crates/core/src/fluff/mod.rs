//! The latticed fusion block: `R` parallel branches, each a chain of `L`
//! 3x3 cells, with every cell output concatenated, fused by a 1x1 conv and
//! added to a shortcut projection.
//!
//! ```text
//! for r in branches:   u = entry_r(x)
//!   for l in levels:   X[l][r] = cell[l][r](l == 0 ? u : act(X[l-1][r]))
//! out = relu(output(relu(concat_level_major(X))) + shortcut(x))
//! ```
//!
//! `act` is ReLU when `inter_level_relu` is set and identity otherwise.

mod block;
mod config;

pub use block::{
    fluff_backward, fluff_backward_cached, fluff_forward, fluff_forward_cached, FluffCache,
    FluffGrads, FluffParams,
};
pub use config::{make_variant, rate_schedule, AblationRow, FluffConfig, FusionKind, INIT_RATES};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_case, FluffCase, Tolerance};
    use crate::nn::{self, ConvGeometry, ConvParams, Parameters};
    use crate::rng::{seeded_rng, uniform_tensor};
    use crate::{Shape, Tensor};

    fn small_cfg() -> FluffConfig {
        FluffConfig {
            levels: 2,
            branches: 2,
            c_pre: 8,
            c_out: None,
            rates: vec![vec![1, 2], vec![2, 3]],
            fusion: FusionKind::DilatedConv,
            inter_level_relu: true,
            identity_shortcut: false,
        }
    }

    #[test]
    fn full_size_shapes() {
        let cfg = FluffConfig::new(256).with_c_out(128);
        let mut rng = seeded_rng(0);
        let params = FluffParams::init(&cfg, &mut rng).unwrap();
        let x: Tensor<f32> = uniform_tensor(&mut rng, (2, 256, 38, 38), -1.0, 1.0);
        let cache = fluff_forward_cached(&x, &cfg, &params).unwrap();
        assert_eq!(cache.lattice().unwrap().shape().channels, 768);
        assert_eq!(cache.output().shape(), Shape::new(2, 128, 38, 38));
    }

    #[test]
    fn zero_network_outputs_zero() {
        let cfg = FluffConfig::new(16);
        let params = FluffParams::zeros(&cfg).unwrap();
        let mut rng = seeded_rng(1);
        let x: Tensor<f32> = uniform_tensor(&mut rng, (1, 16, 7, 7), -3.0, 3.0);
        let y = fluff_forward(&x, &cfg, &params).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    fn identity_1x1(c: usize) -> ConvParams<f32> {
        let mut p = ConvParams::zeros(c, c, 1, ConvGeometry::pointwise());
        for i in 0..c {
            let j = p.weight.index(i, i, 0, 0);
            p.weight.data_mut()[j] = 1.0;
        }
        p
    }

    #[test]
    fn single_cell_collapses_to_relu_conv() {
        let c = 5;
        let cfg = FluffConfig {
            levels: 1,
            branches: 1,
            c_pre: c,
            c_out: None,
            rates: vec![vec![1]],
            fusion: FusionKind::DilatedConv,
            inter_level_relu: true,
            identity_shortcut: false,
        };
        let mut rng = seeded_rng(2);
        let mut params = FluffParams::init(&cfg, &mut rng).unwrap();
        params.entry[0] = identity_1x1(c);
        params.output = identity_1x1(c);
        params.shortcut = Some(ConvParams::zeros(c, c, 1, ConvGeometry::pointwise()));
        let cell = params.cells[0][0].clone().unwrap();
        let x: Tensor<f32> = uniform_tensor(&mut rng, (2, c, 6, 8), -1.0, 1.0);
        let y = fluff_forward(&x, &cfg, &params).unwrap();
        let direct = nn::relu_forward(&nn::conv2d_forward(&x, &cell).unwrap());
        assert_eq!(y.data(), direct.data());
    }

    #[test]
    fn shortcut_path_matches_plain_pointwise_relu() {
        let cfg = small_cfg();
        let mut rng = seeded_rng(3);
        let mut params = FluffParams::init(&cfg, &mut rng).unwrap();
        // freeze the main path
        params.output.weight = Tensor::zeros(params.output.weight.shape());
        let x: Tensor<f32> = uniform_tensor(&mut rng, (1, 8, 6, 6), -1.0, 1.0);
        let go: Tensor<f32> = uniform_tensor(&mut rng, (1, 8, 6, 6), -1.0, 1.0);
        let g = fluff_backward(&x, &cfg, &params, &go).unwrap();

        let sc = params.shortcut.clone().unwrap();
        let pre = nn::conv2d_forward(&x, &sc).unwrap();
        let g_pre = nn::relu_backward(&pre, &go).unwrap();
        let plain = nn::conv2d_backward(&x, &sc, &g_pre).unwrap();

        let gs = g.params.shortcut.as_ref().unwrap();
        assert!(gs.weight.max_abs_diff(&plain.weight) < 1e-6);
        assert!(gs.bias.max_abs_diff(&plain.bias) < 1e-6);
        assert!(g.x.max_abs_diff(&plain.x) < 1e-6);
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let cfg = small_cfg();
        let mut rng = seeded_rng(4);
        let params = FluffParams::init(&cfg, &mut rng).unwrap();
        let x: Tensor<f32> = uniform_tensor(&mut rng, (1, 8, 6, 6), -1.0, 1.0);
        let g = fluff_backward(&x, &cfg, &params, &Tensor::zeros((1, 8, 6, 6))).unwrap();
        assert!(g.x.data().iter().all(|&v| v == 0.0));
        for (_, t) in g.params.named_tensors() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn finite_differences_small_block() {
        for (i, fusion) in [FusionKind::DilatedConv, FusionKind::AvgPool].into_iter().enumerate() {
            let cfg = FluffConfig { fusion, ..small_cfg() };
            let case = FluffCase::<f64>::new(cfg.clone(), Shape::new(1, 8, 6, 6), 10 + i as u64);
            let rep = check_case(&case, Tolerance::f64_default(), 0).unwrap();
            assert!(rep.passed, "{rep:?}");
            let case = FluffCase::<f32>::new(cfg, Shape::new(1, 8, 6, 6), 10 + i as u64);
            let rep = check_case(&case, Tolerance::f32_default(), 0).unwrap();
            assert!(rep.passed, "{rep:?}");
        }
    }

    #[test]
    fn dilation_one_dnet_equals_cnet() {
        let base = FluffConfig::new(8);
        let cnet = make_variant(&base, AblationRow::CNet).unwrap();
        let mut dnet = make_variant(&base, AblationRow::DNet).unwrap();
        dnet.rates = vec![vec![1; 4]; 3];
        let mut rng = seeded_rng(5);
        let params = FluffParams::init(&cnet, &mut rng).unwrap();
        params.check(&dnet).unwrap();
        let x: Tensor<f32> = uniform_tensor(&mut rng, (2, 8, 9, 9), -1.0, 1.0);
        let a = fluff_forward(&x, &cnet, &params).unwrap();
        let b = fluff_forward(&x, &dnet, &params).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn forward_is_deterministic_and_parallel_safe() {
        let cfg = FluffConfig::new(16);
        let mut rng = seeded_rng(6);
        let params = FluffParams::init(&cfg, &mut rng).unwrap();
        let x: Tensor<f32> = uniform_tensor(&mut rng, (2, 16, 11, 11), -1.0, 1.0);
        let a = fluff_forward(&x, &cfg, &params).unwrap();
        let b = fluff_forward(&x, &cfg, &params).unwrap();
        let _g = nn::ParallelGuard::enable();
        let c = fluff_forward(&x, &cfg, &params).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.data(), c.data());
    }

    #[test]
    fn branch_permutation_is_equivariant() {
        let cfg = FluffConfig::new(8).with_rates(vec![vec![1, 2, 3, 6], vec![1, 3, 4, 8], vec![2, 3, 5, 9]]);
        let mut rng = seeded_rng(7);
        let params = FluffParams::init(&cfg, &mut rng).unwrap();
        let x: Tensor<f32> = uniform_tensor(&mut rng, (1, 8, 10, 10), -1.0, 1.0);
        let y = fluff_forward(&x, &cfg, &params).unwrap();

        let perm = [2usize, 0, 3, 1];
        let mut pcfg = cfg.clone();
        let mut pp = params.clone();
        for l in 0..cfg.levels {
            for (new_r, &old_r) in perm.iter().enumerate() {
                pcfg.rates[l][new_r] = cfg.rates[l][old_r];
                pp.cells[l][new_r] = params.cells[l][old_r].clone();
            }
        }
        for (new_r, &old_r) in perm.iter().enumerate() {
            pp.entry[new_r] = params.entry[old_r].clone();
        }
        let cb = cfg.branch_channels();
        let ws = params.output.weight.shape();
        for o in 0..ws.batch {
            for l in 0..cfg.levels {
                for (new_r, &old_r) in perm.iter().enumerate() {
                    for c in 0..cb {
                        let src = params.output.weight.index(o, (l * 4 + old_r) * cb + c, 0, 0);
                        let dst = pp.output.weight.index(o, (l * 4 + new_r) * cb + c, 0, 0);
                        pp.output.weight.data_mut()[dst] = params.output.weight.data()[src];
                    }
                }
            }
        }
        let yp = fluff_forward(&x, &pcfg, &pp).unwrap();
        assert!(y.max_abs_diff(&yp) < 1e-5);
    }

    #[test]
    fn wrong_input_channels() {
        let cfg = small_cfg();
        let params = FluffParams::<f32>::zeros(&cfg).unwrap();
        let x = Tensor::<f32>::zeros((1, 6, 5, 5));
        assert!(fluff_forward(&x, &cfg, &params).is_err());
    }

    #[test]
    fn params_checked_against_config() {
        let cfg = small_cfg();
        let params = FluffParams::<f32>::zeros(&cfg).unwrap();
        params.check(&cfg).unwrap();
        let other = FluffConfig { rates: vec![vec![1, 1], vec![1, 1]], ..small_cfg() };
        assert!(params.check(&other).is_err());
        let wider = FluffConfig { c_pre: 12, ..small_cfg() };
        assert!(params.check(&wider).is_err());
    }

    #[test]
    fn identity_shortcut_has_no_projection() {
        let cfg = FluffConfig { identity_shortcut: true, ..small_cfg() };
        let params = FluffParams::<f32>::zeros(&cfg).unwrap();
        assert!(params.shortcut.is_none());
        let x = Tensor::new((1, 8, 4, 4), 0.5f32).unwrap();
        let y = fluff_forward(&x, &cfg, &params).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn empty_batch() {
        let cfg = small_cfg();
        let params = FluffParams::<f32>::zeros(&cfg).unwrap();
        let x = Tensor::<f32>::zeros((0, 8, 4, 4));
        let y = fluff_forward(&x, &cfg, &params).unwrap();
        assert_eq!(y.shape(), Shape::new(0, 8, 4, 4));
    }
}
