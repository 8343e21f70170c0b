//! Windowed-attention building blocks with longitude-periodic geometry:
//! window partition/merge, shifted-window attention blocks, cube and patch
//! embeddings.

pub mod block;
pub mod embed;
pub mod window;

pub use block::{zero_residual_branches, BlockConfig};
pub use embed::{CubeEmbed, PatchEmbed, PatchUnembed};
pub use window::{
    check_window, lat_pad_mask, padded_rows, relative_position_index, window_merge,
    window_partition, FeatureMap, Windows,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_params, rel_err};
    use crate::tensor::graph::Graph;
    use crate::tensor::params::{randn, Ctx, ParamStore};
    use ndarray::{Array3, ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0..1.0))
    }

    fn run_block(cfg: &BlockConfig, store: &ParamStore, x: &Array3<f64>) -> Array3<f64> {
        let mut g = Graph::new();
        let binding = store.bind(&mut g);
        let xid = g.leaf(x.clone().into_dyn(), false);
        let mut ctx = Ctx::new(&mut g, store, &binding);
        let out = cfg.forward(&mut ctx, "blk", xid).unwrap();
        g.value(out).clone().into_dimensionality().unwrap()
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = BlockConfig::new(8, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        cfg.init(&mut store, "blk", &mut rng);
        let x = random_map(8, 6, 8, 5); // h=6 forces lat padding
        let mut g = Graph::new();
        let binding = store.bind(&mut g);
        let xid = g.leaf(x.into_dyn(), false);
        let mut ctx = Ctx::new(&mut g, &store, &binding);
        let (_, probs) = cfg.forward_with_probs(&mut ctx, "blk", xid).unwrap();
        let pv = g.value(probs);
        for row in pv.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_residual_branches_make_identity() {
        let cfg = BlockConfig::new(8, 4, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        cfg.init(&mut store, "blk", &mut rng);
        zero_residual_branches(&mut store, "blk");
        let x = random_map(8, 8, 16, 11);
        let y = run_block(&cfg, &store, &x);
        let max = x
            .iter()
            .zip(y.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max < 1e-14, "block with zero residual branches not identity: {max}");
    }

    #[test]
    fn block_commutes_with_window_width_rotation() {
        // no shift, no latitude padding in play
        let cfg = BlockConfig::new(8, 4, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut store = ParamStore::new();
        cfg.init(&mut store, "blk", &mut rng);
        let x = random_map(8, 8, 16, 17);
        let rotate = |f: &Array3<f64>, cells: usize| {
            let (c, h, w) = f.dim();
            Array3::from_shape_fn((c, h, w), |(ch, j, i)| f[[ch, j, (i + cells) % w]])
        };
        let y_then_rot = rotate(&run_block(&cfg, &store, &x), 4);
        let rot_then_y = run_block(&cfg, &store, &rotate(&x, 4));
        let max = y_then_rot
            .iter()
            .zip(rot_then_y.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max < 1e-5, "rotation equivariance violated: {max}");
    }

    #[test]
    fn block_output_finite_for_large_inputs() {
        let cfg = BlockConfig::new(8, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut store = ParamStore::new();
        cfg.init(&mut store, "blk", &mut rng);
        let x = random_map(8, 8, 16, 23).mapv(|v| v * 1e3);
        let y = run_block(&cfg, &store, &x);
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn block_rejects_wrong_dim() {
        let cfg = BlockConfig::new(8, 4, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut store = ParamStore::new();
        cfg.init(&mut store, "blk", &mut rng);
        let x = random_map(4, 8, 16, 31); // dim 4 != 8
        let mut g = Graph::new();
        let binding = store.bind(&mut g);
        let xid = g.leaf(x.into_dyn(), false);
        let mut ctx = Ctx::new(&mut g, &store, &binding);
        assert!(cfg.forward(&mut ctx, "blk", xid).is_err());
    }

    #[test]
    fn block_param_count_matches_store() {
        let cfg = BlockConfig::new(16, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mut store = ParamStore::new();
        cfg.init(&mut store, "blk", &mut rng);
        assert_eq!(store.n_params(), cfg.param_count());
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        // micro shape in 64-bit: dim 4, 4x8 grid, window 2, shifted
        let cfg = BlockConfig { dim: 4, heads: 2, window: 2, shift: 1, mlp_ratio: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut store = ParamStore::new();
        cfg.init(&mut store, "blk", &mut rng);
        let x = random_map(4, 4, 8, 43);
        let weights = randn(&mut rng, &[4, 4, 8], 1.0);

        let loss_of = |store: &ParamStore| -> f64 {
            let mut g = Graph::new();
            let binding = store.bind(&mut g);
            let xid = g.leaf(x.clone().into_dyn(), false);
            let wid = g.constant(weights.clone());
            let mut ctx = Ctx::new(&mut g, store, &binding);
            let y = cfg.forward(&mut ctx, "blk", xid).unwrap();
            let prod = g.mul(y, wid);
            let l = g.sum_all(prod);
            g.scalar_value(l)
        };

        // analytic grads
        let mut g = Graph::new();
        let binding = store.bind(&mut g);
        let xid = g.leaf(x.clone().into_dyn(), true);
        let wid = g.constant(weights.clone());
        let analytic = {
            let mut ctx = Ctx::new(&mut g, &store, &binding);
            let y = cfg.forward(&mut ctx, "blk", xid).unwrap();
            let prod = g.mul(y, wid);
            let l = g.sum_all(prod);
            let mut grads = g.backward(l);
            let params = store.collect_grads(&binding, &mut grads);
            (params, grads.take(xid).unwrap())
        };

        let mut lossf = |s: &ParamStore| loss_of(s);
        let report = check_params(
            &mut lossf,
            &mut store,
            &analytic.0,
            1e-5,
            24,
            &mut ChaCha8Rng::seed_from_u64(47),
        );
        assert!(
            report.max_rel_err < 1e-3,
            "parameter gradients: {:?}",
            report.worst
        );

        // input gradient
        let mut xmut: ArrayD<f64> = x.clone().into_dyn();
        let mut input_loss = |xi: &ArrayD<f64>| -> f64 {
            let mut g = Graph::new();
            let binding = store.bind(&mut g);
            let xid = g.leaf(xi.clone(), false);
            let wid = g.constant(weights.clone());
            let mut ctx = Ctx::new(&mut g, &store, &binding);
            let y = cfg.forward(&mut ctx, "blk", xid).unwrap();
            let prod = g.mul(y, wid);
            let l = g.sum_all(prod);
            g.scalar_value(l)
        };
        let mut max_err: f64 = 0.0;
        for idx in (0..xmut.len()).step_by(7) {
            let num = crate::tensor::gradcheck::central_diff_input(
                &mut input_loss,
                &mut xmut,
                idx,
                1e-5,
            );
            let ana = analytic.1.as_slice().unwrap()[idx];
            max_err = max_err.max(rel_err(ana, num));
        }
        assert!(max_err < 1e-3, "input gradients: {max_err}");
    }

    #[test]
    fn cube_embed_shapes_zero_and_rotation() {
        let cube = CubeEmbed { history: 6, in_channels: 8, out_dim: 12 };
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let mut store = ParamStore::new();
        cube.init(&mut store, "cube", &mut rng);
        assert_eq!(store.n_params(), cube.param_count());

        let frames: Vec<Array3<f64>> = (0..6).map(|i| random_map(8, 32, 64, 100 + i)).collect();
        let run = |store: &ParamStore, frames: &[Array3<f64>]| -> Array3<f64> {
            let mut g = Graph::new();
            let binding = store.bind(&mut g);
            let ids: Vec<_> = frames.iter().map(|f| g.leaf(f.clone().into_dyn(), false)).collect();
            let mut ctx = Ctx::new(&mut g, store, &binding);
            let out = cube.forward(&mut ctx, "cube", &ids).unwrap();
            g.value(out).clone().into_dimensionality().unwrap()
        };
        let out = run(&store, &frames);
        assert_eq!(out.dim(), (12, 16, 32));

        // zero history + zero bias -> zero output
        let zero_frames: Vec<Array3<f64>> = (0..6).map(|_| Array3::zeros((8, 32, 64))).collect();
        let out0 = run(&store, &zero_frames);
        assert!(out0.iter().all(|v| v.abs() < 1e-15));

        // rotating every frame by 2 longitude cells rotates the output by 1
        let rotate = |f: &Array3<f64>, cells: usize| {
            let (c, h, w) = f.dim();
            Array3::from_shape_fn((c, h, w), |(ch, j, i)| f[[ch, j, (i + cells) % w]])
        };
        let rot_frames: Vec<Array3<f64>> = frames.iter().map(|f| rotate(f, 2)).collect();
        let out_rot = run(&store, &rot_frames);
        let expected = rotate(&out, 1);
        let max = out_rot
            .iter()
            .zip(expected.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max < 1e-12, "cube embedding not longitude-equivariant: {max}");
    }

    #[test]
    fn cube_embed_rejects_bad_history() {
        let cube = CubeEmbed { history: 6, in_channels: 8, out_dim: 12 };
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let mut store = ParamStore::new();
        cube.init(&mut store, "cube", &mut rng);
        let mut g = Graph::new();
        let binding = store.bind(&mut g);
        let frames: Vec<_> = (0..5).map(|_| g.leaf(ArrayD::zeros(IxDyn(&[8, 32, 64])), false)).collect();
        let mut ctx = Ctx::new(&mut g, &store, &binding);
        assert!(cube.forward(&mut ctx, "cube", &frames).is_err());
    }

    #[test]
    fn patch_embed_unembed_shape_roundtrip() {
        let embed = PatchEmbed { in_channels: 8, dim: 12 };
        let unembed = PatchUnembed { dim: 12, out_channels: 8 };
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let mut store = ParamStore::new();
        embed.init(&mut store, "e", &mut rng);
        unembed.init(&mut store, "u", &mut rng);

        let x = random_map(8, 32, 64, 67);
        let mut g = Graph::new();
        let binding = store.bind(&mut g);
        let xid = g.leaf(x.into_dyn(), false);
        let mut ctx = Ctx::new(&mut g, &store, &binding);
        let f = embed.forward(&mut ctx, "e", xid).unwrap();
        assert_eq!(g.value(f).shape(), &[12, 16, 32]);
        let y = {
            let mut ctx = Ctx::new(&mut g, &store, &binding);
            unembed.forward(&mut ctx, "u", f).unwrap()
        };
        assert_eq!(g.value(y).shape(), &[8, 32, 64]);

        // zero input, zero bias -> zero output
        let mut store2 = store.clone();
        store2.get_mut("e.b").fill(0.0);
        let mut g = Graph::new();
        let binding = store2.bind(&mut g);
        let z = g.leaf(ArrayD::zeros(IxDyn(&[8, 32, 64])), false);
        let mut ctx = Ctx::new(&mut g, &store2, &binding);
        let f = embed.forward(&mut ctx, "e", z).unwrap();
        assert!(g.value(f).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn patch_embed_rejects_odd_dims() {
        let embed = PatchEmbed { in_channels: 2, dim: 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let mut store = ParamStore::new();
        embed.init(&mut store, "e", &mut rng);
        let mut g = Graph::new();
        let binding = store.bind(&mut g);
        let x = g.leaf(ArrayD::zeros(IxDyn(&[2, 5, 8])), false);
        let mut ctx = Ctx::new(&mut g, &store, &binding);
        assert!(embed.forward(&mut ctx, "e", x).is_err());
    }

    #[test]
    fn patch_unembed_gradient_matches_finite_differences() {
        // 4x4 grid, 2 channels, 64-bit central differences
        let unembed = PatchUnembed { dim: 3, out_channels: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let mut store = ParamStore::new();
        unembed.init(&mut store, "u", &mut rng);
        let f = random_map(3, 2, 2, 79); // unembeds to [2, 4, 4]
        let weights = randn(&mut rng, &[2, 4, 4], 1.0);

        let mut loss_of = |store: &ParamStore| -> f64 {
            let mut g = Graph::new();
            let binding = store.bind(&mut g);
            let fid = g.leaf(f.clone().into_dyn(), false);
            let wid = g.constant(weights.clone());
            let mut ctx = Ctx::new(&mut g, store, &binding);
            let y = unembed.forward(&mut ctx, "u", fid).unwrap();
            let prod = g.mul(y, wid);
            let l = g.sum_all(prod);
            g.scalar_value(l)
        };

        let mut g = Graph::new();
        let binding = store.bind(&mut g);
        let fid = g.leaf(f.clone().into_dyn(), false);
        let wid = g.constant(weights.clone());
        let analytic = {
            let mut ctx = Ctx::new(&mut g, &store, &binding);
            let y = unembed.forward(&mut ctx, "u", fid).unwrap();
            let prod = g.mul(y, wid);
            let l = g.sum_all(prod);
            let mut grads = g.backward(l);
            store.collect_grads(&binding, &mut grads)
        };
        let report = check_params(
            &mut loss_of,
            &mut store,
            &analytic,
            1e-4,
            usize::MAX,
            &mut ChaCha8Rng::seed_from_u64(83),
        );
        assert!(report.max_rel_err < 1e-3, "worst: {:?}", report.worst);
    }
}
