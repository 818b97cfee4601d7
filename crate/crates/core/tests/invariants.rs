//! Property tests for the layout, masking and attention primitives.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hiera::layout::{
    build_layout, group_by_units, restore_with_mask_tokens, sample_mask_units,
    separate_and_pad_pool, sparse_delete, ungroup_by_units, InputExtents, MaskSpec,
};
use hiera::model::{Block, Builder, ParamStore};
use hiera::tensor::Tensor;

fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect(), shape).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mask_is_a_partition(total in 2usize..200, ratio in 0.05f64..0.95, seed in any::<u64>()) {
        let m = sample_mask_units(total, ratio, seed).unwrap();
        prop_assert_eq!(m.total_units, total);
        prop_assert!(!m.kept.is_empty());
        prop_assert!(!m.masked.is_empty());
        let mut all: Vec<usize> = m.kept.iter().chain(&m.masked).cloned().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..total).collect::<Vec<_>>());
        let expect = ((total as f64) * (1.0 - ratio)).floor() as usize;
        prop_assert_eq!(m.kept.len(), expect.clamp(1, total - 1));
    }

    #[test]
    fn mask_record_roundtrip(total in 2usize..64, ratio in 0.1f64..0.9, seed in any::<u64>()) {
        let m = sample_mask_units(total, ratio, seed).unwrap();
        let back = MaskSpec::from_record(&m.to_record()).unwrap();
        prop_assert_eq!(back.total_units, m.total_units);
        prop_assert_eq!(back.kept, m.kept);
        prop_assert_eq!(back.masked, m.masked);
    }

    #[test]
    fn group_ungroup_is_identity(
        hw in prop::sample::select(vec![(32usize, 32usize), (32, 64), (64, 64), (96, 32)]),
        stage in 0usize..4,
        seed in any::<u64>(),
    ) {
        let layout = build_layout(InputExtents::image(hw.0, hw.1)).unwrap();
        let n: usize = layout.grid_at(stage).iter().product();
        let c = 3usize;
        let tokens = rand_tensor(seed, &[n, c]);
        let grouped = group_by_units(&tokens, &layout, stage).unwrap();
        let back = ungroup_by_units(&grouped, &layout, stage).unwrap();
        prop_assert_eq!(tokens.to_vec(), back.to_vec());
    }

    #[test]
    fn delete_then_restore_places_rows(
        total in 2usize..32,
        ratio in 0.1f64..0.9,
        seed in any::<u64>(),
    ) {
        let (t, c) = (4usize, 3usize);
        let mask = sample_mask_units(total, ratio, seed).unwrap();
        let grouped = rand_tensor(seed ^ 1, &[total, t, c]);
        let token = rand_tensor(seed ^ 2, &[c]);
        let visible = sparse_delete(&grouped, &mask).unwrap();
        let restored = restore_with_mask_tokens(&visible, &mask, &token).unwrap();
        let (g, r, tok) = (grouped.to_vec(), restored.to_vec(), token.to_vec());
        for &u in &mask.kept {
            prop_assert_eq!(&g[u * t * c..(u + 1) * t * c], &r[u * t * c..(u + 1) * t * c]);
        }
        for &u in &mask.masked {
            for lt in 0..t {
                prop_assert_eq!(&r[(u * t + lt) * c..(u * t + lt + 1) * c], &tok[..]);
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..6,
        cols in 1usize..12,
        shift in -20.0f64..20.0,
        seed in any::<u64>(),
    ) {
        let x = rand_tensor(seed, &[rows, cols]);
        let s = x.softmax(1).unwrap().to_vec();
        let shifted = Tensor::from_vec(
            x.to_vec().iter().map(|v| v + shift as f32).collect(),
            &[rows, cols],
        ).unwrap().softmax(1).unwrap().to_vec();
        for r in 0..rows {
            let sum: f32 = s[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-5, "row {} sums to {}", r, sum);
        }
        for (a, b) in s.iter().zip(&shifted) {
            prop_assert!((a - b).abs() < 1e-4, "not shift invariant: {} vs {}", a, b);
        }
    }

    #[test]
    fn unit_pool_takes_window_maxima(
        units in 1usize..5,
        k in prop::sample::select(vec![1usize, 2, 4]),
        seed in any::<u64>(),
    ) {
        let (uh, c) = (4usize, 2usize);
        let grouped = rand_tensor(seed, &[units, uh, uh, c]);
        let pooled = separate_and_pad_pool(&grouped, (k, k), (k, k), (0, 0)).unwrap();
        let (g, p) = (grouped.to_vec(), pooled.to_vec());
        let o = uh / k;
        prop_assert_eq!(pooled.shape(), &[units, o, o, c]);
        for u in 0..units {
            for oy in 0..o {
                for ox in 0..o {
                    for ch in 0..c {
                        let mut m = f32::NEG_INFINITY;
                        for dy in 0..k {
                            for dx in 0..k {
                                let (y, x) = (oy * k + dy, ox * k + dx);
                                m = m.max(g[((u * uh + y) * uh + x) * c + ch]);
                            }
                        }
                        prop_assert_eq!(p[((u * o + oy) * o + ox) * c + ch], m);
                    }
                }
            }
        }
    }

    #[test]
    fn unit_local_attention_is_permutation_equivariant(
        units in 2usize..5,
        seed in any::<u64>(),
        perm_seed in any::<u64>(),
    ) {
        let (t, c, heads) = (8usize, 8usize, 2usize);
        let mut store: ParamStore<f32> = ParamStore::default();
        let mut b = Builder { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed) };
        let blk = Block::plain(&mut b, "b", c, heads, 4.0, 1e-6, 0).with_local(true);
        let x = rand_tensor(seed ^ 7, &[units, t, c]);

        let mut order: Vec<usize> = (0..units).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let xd = x.to_vec();
        let mut px = Vec::with_capacity(xd.len());
        for &u in &order {
            px.extend_from_slice(&xd[u * t * c..(u + 1) * t * c]);
        }
        let xp = Tensor::from_vec(px, &[units, t, c]).unwrap();

        let (y, _) = blk.forward(&x, 1, None).unwrap();
        let (yp, _) = blk.forward(&xp, 1, None).unwrap();
        let (yd, ypd) = (y.to_vec(), yp.to_vec());
        let row = y.shape()[1] * y.shape()[2];
        for (k, &u) in order.iter().enumerate() {
            prop_assert_eq!(&ypd[k * row..(k + 1) * row], &yd[u * row..(u + 1) * row]);
        }
    }
}
