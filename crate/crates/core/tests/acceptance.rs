//! Acceptance suite: one test per release criterion, each printing a
//! criterion PASS line on success (run with --nocapture to see them all).

use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hiera::cost::cost_report;
use hiera::layout::{
    build_layout, group_by_units, sample_mask, separate_and_pad_pool, InputExtents, MaskSpec,
};
use hiera::mae::{
    hog_target, mae_loss, pixel_target, target_geometry, DecoderConfig, MaePretrainer,
};
use hiera::model::{
    AttnMode, Block, Builder, Hiera, HieraConfig, ParamStore, PoolKernel, Variant,
};
use hiera::tensor::{grad_check, Tensor};
use hiera::train::{
    pretrain_loop, pretrain_state, supervised_loop, synthetic_dataset, LoopOptions, OptimConfig,
    Sample, TrainState,
};

fn pass(n: u32, label: &str) {
    println!("criterion {n} ({label}): PASS");
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn criterion_01_analytic_size_and_flop_targets() {
    let t0 = Instant::now();
    let params_m = [28.0, 35.0, 52.0, 70.0, 214.0, 673.0];
    let flops_g = [5.0, 6.0, 9.0, 13.0, 40.0, 125.0];
    for (i, v) in Variant::ALL.iter().enumerate() {
        let report = cost_report(&v.config()).unwrap();
        let p = report.total_params as f64 / 1e6;
        let f = report.total_flops as f64 / 1e9;
        let (pt, ft) = (params_m[i], flops_g[i]);
        assert!(
            (p - pt).abs() / pt <= 0.05,
            "{}: {p:.2}M params vs target {pt}M",
            v.name()
        );
        assert!(
            (f - ft).abs() / ft <= 0.10,
            "{}: {f:.2}G flops vs target {ft}G",
            v.name()
        );
        assert_eq!(
            report.stage_resolutions,
            vec![(56, 56), (28, 28), (14, 14), (7, 7)],
            "{}: stage resolutions",
            v.name()
        );
    }
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    pass(1, "six model sizes match parameter/flop/resolution targets");
}

#[test]
fn criterion_02_unit_local_attention_equals_masked_dense() {
    // 4 units of 16 tokens, width 8, 2 heads, double precision. The unit-local
    // attention must equal one dense attention over all 64 tokens with
    // -infinity scores between tokens of different units.
    let (units, t, c, heads) = (4usize, 16usize, 8usize, 2usize);
    let hd = c / heads;
    let mut store: ParamStore<f64> = ParamStore::default();
    let mut b = Builder { store: &mut store, rng: ChaCha8Rng::seed_from_u64(9) };
    let blk = Block::plain(&mut b, "b", c, heads, 4.0, 1e-6, 0).with_local(true);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = Tensor::from_vec(rand_vec(&mut rng, units * t * c), &[units, t, c]).unwrap();

    let got = blk.attention(&x, 4).unwrap().to_vec();

    let weight = |n: &str| store.get(n).unwrap().to_vec();
    let (wq, bq) = (weight("b.q.w"), weight("b.q.b"));
    let (wk, bk) = (weight("b.k.w"), weight("b.k.b"));
    let (wv, bv) = (weight("b.v.w"), weight("b.v.b"));
    let (wp, bp) = (weight("b.proj.w"), weight("b.proj.b"));
    let xs = x.to_vec();
    let n = units * t;
    let project = |w: &[f64], bias: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for o in 0..c {
                let mut acc = bias[o];
                for cc in 0..c {
                    acc += xs[i * c + cc] * w[cc * c + o];
                }
                out[i * c + o] = acc;
            }
        }
        out
    };
    let (q, k, v) = (project(&wq, &bq), project(&wk, &bk), project(&wv, &bv));
    let mut heads_out = vec![0.0; n * c];
    for h in 0..heads {
        for i in 0..n {
            let mut scores = vec![f64::NEG_INFINITY; n];
            for j in 0..n {
                if i / t == j / t {
                    let mut s = 0.0;
                    for d in 0..hd {
                        s += q[i * c + h * hd + d] * k[j * c + h * hd + d];
                    }
                    scores[j] = s / (hd as f64).sqrt();
                }
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for d in 0..hd {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += exps[j] / z * v[j * c + h * hd + d];
                }
                heads_out[i * c + h * hd + d] = acc;
            }
        }
    }
    let mut expect = vec![0.0; n * c];
    for i in 0..n {
        for o in 0..c {
            let mut acc = bp[o];
            for cc in 0..c {
                acc += heads_out[i * c + cc] * wp[cc * c + o];
            }
            expect[i * c + o] = acc;
        }
    }
    let diff = got
        .iter()
        .zip(&expect)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(diff <= 1e-5, "max abs diff {diff}");
    pass(2, "unit-local attention equals dense attention with off-block -inf mask");
}

/// Copies whole unit rows out of [U, T, C] in the given order.
fn take_units(x: &Tensor<f32>, units: &[usize]) -> Tensor<f32> {
    let sh = x.shape().to_vec();
    let (t, c) = (sh[1], sh[2]);
    let d = x.to_vec();
    let mut out = Vec::with_capacity(units.len() * t * c);
    for &u in units {
        out.extend_from_slice(&d[u * t * c..(u + 1) * t * c]);
    }
    Tensor::from_vec(out, &[units.len(), t, c]).unwrap()
}

/// Reference forward: delete masked units up front, run unit-local stages one
/// unit at a time, global stages on the concatenated survivors.
fn oracle_sparse_forward(model: &Hiera<f32>, pixels: &Tensor<f32>, mask: &MaskSpec) -> Tensor<f32> {
    let tokens = model.embed(pixels).unwrap();
    let grouped = group_by_units(&tokens, &model.layout, 0).unwrap();
    let mut x = take_units(&grouped, &mask.kept);
    let mut uh = model.layout.unit_tokens[1];
    let mut bi = 0usize;
    for s in 0..4 {
        let local = s < 2;
        for _ in 0..model.config.blocks[s] {
            let blk = &model.blocks()[bi];
            if local {
                let k = x.shape()[0];
                let mut data = Vec::new();
                let mut out_shape = (0usize, 0usize);
                let mut new_uh = uh;
                for u in 0..k {
                    let xu = take_units(&x, &[u]);
                    let (y, oh) = blk.forward(&xu, uh, None).unwrap();
                    out_shape = (y.shape()[1], y.shape()[2]);
                    new_uh = oh;
                    data.extend(y.to_vec());
                }
                x = Tensor::from_vec(data, &[k, out_shape.0, out_shape.1]).unwrap();
                uh = new_uh;
            } else {
                let (y, oh) = blk.forward(&x, uh, None).unwrap();
                x = y;
                uh = oh;
            }
            bi += 1;
        }
    }
    x
}

fn sparse_dense_equivalence(input: InputExtents, n_masks: usize, seed: u64) {
    let mut cfg = HieraConfig::tiny(input);
    cfg.pretrain_mode = true;
    let model: Hiera<f32> = Hiera::build(cfg, seed).unwrap();
    let npx = input.frames.unwrap_or(1) * input.height * input.width * 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let pixels = Tensor::from_vec(
        (0..npx).map(|_| rng.gen_range(0.0f32..1.0)).collect(),
        &[npx],
    )
    .unwrap();

    for i in 0..n_masks {
        let ratio = [0.25, 0.5, 0.75][i % 3];
        let mask = sample_mask(&model.layout, ratio, seed.wrapping_add(i as u64)).unwrap();
        let sparse = model.forward_encoder(&pixels, Some(&mask), None).unwrap();
        let oracle = oracle_sparse_forward(&model, &pixels, &mask);
        let diff = max_abs_diff(&sparse.last().to_vec(), &oracle.to_vec());
        assert!(diff <= 1e-5, "mask {i}: max abs diff {diff}");
    }

    // With no units deleted the masked code path must be bit-identical to the
    // dense one.
    let dense = model.forward_encoder(&pixels, None, None).unwrap();
    let keep_all = MaskSpec::keep_all(model.layout.total_units());
    let trivial = model.forward_encoder(&pixels, Some(&keep_all), None).unwrap();
    let a = dense.last().to_vec();
    let b = trivial.last().to_vec();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.to_bits(), y.to_bits(), "dense vs keep-all not bitwise equal");
    }
}

#[test]
fn criterion_03_sparse_forward_matches_masked_dense_oracle() {
    sparse_dense_equivalence(InputExtents::image(128, 128), 50, 21);
    pass(3, "sparse forward equals masked-dense reference over 50 masks; dense bitwise");
}

#[test]
fn criterion_04_unit_pooling_equals_dense_pool_plus_regroup() {
    // 2x2 units of 4x4 tokens; kernel == stride pooling commutes with unit
    // separation exactly, for every subset of kept units.
    let (gu, uh, c) = (2usize, 4usize, 3usize);
    let (th, tw) = (gu * uh, gu * uh);
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let dense_raster: Vec<f32> = (0..th * tw * c).map(|_| rng.gen_range(-1.0f32..1.0)).collect();

    // Dense pool on the full raster, then regroup into units.
    let dense = Tensor::from_vec(dense_raster.clone(), &[1, th, tw, c]).unwrap();
    let pooled = dense.max_pool2d((2, 2), (2, 2), (0, 0)).unwrap();
    let pv = pooled.to_vec();
    let (ph, pw) = (th / 2, tw / 2);
    let puh = uh / 2;
    let unit_pooled_row = |u: usize| -> Vec<f32> {
        let (uy, ux) = (u / gu, u % gu);
        let mut out = Vec::new();
        for y in 0..puh {
            for x in 0..puh {
                let (gy, gx) = (uy * puh + y, ux * puh + x);
                out.extend_from_slice(&pv[(gy * pw + gx) * c..(gy * pw + gx + 1) * c]);
            }
        }
        out
    };
    let _ = ph;

    for bits in 1u32..(1 << (gu * gu)) {
        let kept: Vec<usize> = (0..gu * gu).filter(|u| bits & (1 << u) != 0).collect();
        let mut grouped = Vec::new();
        for &u in &kept {
            let (uy, ux) = (u / gu, u % gu);
            for y in 0..uh {
                for x in 0..uh {
                    let (gy, gx) = (uy * uh + y, ux * uh + x);
                    grouped.extend_from_slice(&dense_raster[(gy * tw + gx) * c..(gy * tw + gx + 1) * c]);
                }
            }
        }
        let grouped = Tensor::from_vec(grouped, &[kept.len(), uh, uh, c]).unwrap();
        let sep = separate_and_pad_pool(&grouped, (2, 2), (2, 2), (0, 0)).unwrap();
        let sv = sep.to_vec();
        let mut expect = Vec::new();
        for &u in &kept {
            expect.extend(unit_pooled_row(u));
        }
        assert_eq!(sv.len(), expect.len());
        for (a, b) in sv.iter().zip(&expect) {
            assert_eq!(a.to_bits(), b.to_bits(), "kept {kept:?} not exact");
        }
    }
    pass(4, "kernel=stride unit pooling equals dense pool plus regroup, exactly");
}

#[test]
fn criterion_05_gradient_checks() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let x = Tensor::param(rand_vec(&mut rng, 24), &[2, 3, 4]).unwrap();
    let y = Tensor::from_vec(rand_vec(&mut rng, 24), &[2, 3, 4]).unwrap();
    let m = Tensor::from_vec(rand_vec(&mut rng, 12), &[4, 3]).unwrap();
    let g = Tensor::from_vec(rand_vec(&mut rng, 4), &[4]).unwrap();
    let bias = Tensor::from_vec(rand_vec(&mut rng, 4), &[4]).unwrap();
    let img = Tensor::param(rand_vec(&mut rng, 32), &[2, 4, 4, 1]).unwrap();
    let logits = Tensor::param(rand_vec(&mut rng, 5), &[5]).unwrap();
    let gather: Rc<Vec<usize>> = Rc::new(vec![5, 0, 17, 3, 3, 9]);

    let checks: Vec<(&str, f64)> = vec![
        ("add", grad_check(|t| Ok(t.add(&y)?.sum_all()), &x, 1e-5).unwrap()),
        ("sub", grad_check(|t| Ok(t.sub(&y)?.sum_all()), &x, 1e-5).unwrap()),
        ("mul", grad_check(|t| Ok(t.mul(&y)?.sum_all()), &x, 1e-5).unwrap()),
        ("scale", grad_check(|t| Ok(t.scale(-1.7).sum_all()), &x, 1e-5).unwrap()),
        ("add_bias", grad_check(|t| Ok(t.add_bias(&bias)?.mul(&y)?.sum_all()), &x, 1e-5).unwrap()),
        ("matmul", grad_check(|t| Ok(t.matmul(&m)?.sum_all()), &x, 1e-5).unwrap()),
        ("reshape", grad_check(|t| Ok(t.reshape(&[6, 4])?.mul(&y.reshape(&[6, 4])?)?.sum_all()), &x, 1e-5).unwrap()),
        ("gather_map", grad_check(|t| Ok(t.gather_map(gather.clone(), vec![6])?.sum_all()), &x, 1e-5).unwrap()),
        ("permute", grad_check(|t| Ok(t.permute(&[2, 0, 1])?.mul(&y.reshape(&[4, 2, 3])?)?.sum_all()), &x, 1e-5).unwrap()),
        ("transpose_last2", grad_check(|t| Ok(t.transpose_last2()?.mul(&y.reshape(&[2, 4, 3])?)?.sum_all()), &x, 1e-5).unwrap()),
        ("softmax", grad_check(|t| Ok(t.softmax(2)?.mul(&y)?.sum_all()), &x, 1e-5).unwrap()),
        ("layer_norm", grad_check(|t| Ok(t.layer_norm(&g, &bias, 1e-6)?.mul(&y)?.sum_all()), &x, 1e-5).unwrap()),
        ("gelu", grad_check(|t| Ok(t.gelu().mul(&y)?.sum_all()), &x, 1e-5).unwrap()),
        ("max_pool2d", grad_check(|t| Ok(t.max_pool2d((3, 3), (2, 2), (1, 1))?.sum_all()), &img, 1e-5).unwrap()),
        ("sum_all", grad_check(|t| Ok(t.sum_all()), &x, 1e-5).unwrap()),
        ("mean_all", grad_check(|t| Ok(t.mean_all()), &x, 1e-5).unwrap()),
        ("mean_rows", grad_check(|t| Ok(t.reshape(&[6, 4])?.mean_rows()?.mul(&bias)?.sum_all()), &x, 1e-5).unwrap()),
        ("mse", grad_check(|t| t.mse(&y), &x, 1e-5).unwrap()),
        ("cross_entropy", grad_check(|t| t.cross_entropy_smoothed(2, 0.1), &logits, 1e-5).unwrap()),
    ];
    for (name, rel) in &checks {
        assert!(*rel <= 1e-4, "{name}: rel err {rel}");
    }

    // End-to-end: full pretraining loss in double precision against finite
    // differences on representative parameters.
    let cfg = HieraConfig::tiny(InputExtents::image(64, 64));
    let mae: MaePretrainer<f64> = MaePretrainer::build(cfg, DecoderConfig::tiny(), 3).unwrap();
    let npx = 64 * 64 * 3;
    let mut prng = ChaCha8Rng::seed_from_u64(51);
    let pixels = Tensor::from_vec(
        (0..npx).map(|_| prng.gen_range(0.0..1.0)).collect(),
        &[npx],
    )
    .unwrap();
    let mask = sample_mask(&mae.encoder.layout, 0.5, 52).unwrap();
    let entries = mae.param_entries();
    for name in [
        "enc.s0.b0.q.w",
        "enc.s1.b0.skip.w",
        "enc.s3.b0.fc1.b",
        "dec.mask_token",
        "dec.fuse3.w",
    ] {
        let t = entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, t, _)| t.clone())
            .unwrap_or_else(|| panic!("missing {name}"));
        let rel = grad_check(|_| mae.loss_for(&pixels, &mask, None), &t, 1e-5).unwrap();
        assert!(rel <= 1e-3, "{name}: e2e rel err {rel}");
    }
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}");
    pass(5, "per-op gradients within 1e-4, end-to-end pretraining gradients within 1e-3");
}

#[test]
fn criterion_06_masked_loss_gradient_support() {
    let mut cfg = HieraConfig::tiny(InputExtents::image(64, 64));
    cfg.pretrain_mode = true;
    let layout = build_layout(cfg.input).unwrap();
    let geom = target_geometry(&cfg, &layout).unwrap();
    let target = {
        let npx = 64 * 64 * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let pixels = Tensor::from_vec(
            (0..npx).map(|_| rng.gen_range(0.0f64..1.0)).collect(),
            &[npx],
        )
        .unwrap();
        pixel_target(&pixels, &layout, &geom).unwrap()
    };
    let sh = target.values.shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let pred = Tensor::param(rand_vec(&mut rng, sh.iter().product()), &sh).unwrap();
    let mask = sample_mask(&layout, 0.5, 62).unwrap();
    let loss = mae_loss(&pred, &target, &mask).unwrap();
    loss.backward().unwrap();
    let grad = pred.grad().unwrap();
    let row = sh[1] * sh[2];
    for &u in &mask.kept {
        assert!(
            grad[u * row..(u + 1) * row].iter().all(|&v| v == 0.0),
            "visible unit {u} has nonzero loss gradient"
        );
    }
    let masked_nonzero = mask
        .masked
        .iter()
        .any(|&u| grad[u * row..(u + 1) * row].iter().any(|&v| v != 0.0));
    assert!(masked_nonzero, "no gradient anywhere in masked slots");
    pass(6, "loss gradient exactly zero at visible slots, nonzero under the mask");
}

fn overfit_samples(n: usize, h: usize, w: usize) -> Vec<Sample> {
    let dirs: [[f32; 3]; 8] = [
        [1.0, 0.2, 0.2],
        [0.2, 1.0, 0.2],
        [0.2, 0.2, 1.0],
        [1.0, 1.0, 0.2],
        [1.0, 0.2, 1.0],
        [0.2, 1.0, 1.0],
        [0.9, 0.6, 0.3],
        [0.3, 0.6, 0.9],
    ];
    (0..n)
        .map(|i| {
            let d = dirs[i % 8];
            let mut px = Vec::with_capacity(h * w * 3);
            for y in 0..h {
                for x in 0..w {
                    let v = (std::f32::consts::TAU * (x as f32 + 2.0 * y as f32) / 16.0).sin();
                    for c in 0..3 {
                        px.push((0.5 + 0.4 * v * d[c]).clamp(0.0, 1.0));
                    }
                }
            }
            Sample {
                pixels: Tensor::from_vec(px, &[h * w * 3]).unwrap(),
                label: i % 4,
            }
        })
        .collect()
}

fn overfit_run(seed: u64) -> Vec<(usize, f64)> {
    let cfg = HieraConfig::tiny(InputExtents::image(64, 64));
    let mae: MaePretrainer<f32> =
        MaePretrainer::build(cfg, DecoderConfig::tiny(), seed).unwrap();
    let data = overfit_samples(8, 64, 64);
    let mut opt = OptimConfig::pretrain(5e-3, 50, 20000);
    opt.weight_decay = 0.0;
    let mut state = pretrain_state(&mae, opt, seed);
    let opts = LoopOptions { epochs: 250, batch: 1, ..Default::default() };
    pretrain_loop(&mae, &data, &mut state, &opts).unwrap()
}

#[test]
fn criterion_07_overfit_smoke_and_determinism() {
    let trace = overfit_run(3);
    assert_eq!(trace.len(), 2000);
    let initial = trace[0].1;
    let window = 20;
    let reached = (window..trace.len()).any(|end| {
        let m: f64 =
            trace[end - window..end].iter().map(|&(_, v)| v).sum::<f64>() / window as f64;
        m < 0.05 * initial
    });
    assert!(reached, "loss never fell below 5% of initial {initial}");

    let again = overfit_run(3);
    assert_eq!(trace.len(), again.len());
    for ((s1, v1), (s2, v2)) in trace.iter().zip(&again) {
        assert_eq!(s1, s2);
        assert!(
            v1 == v2,
            "trace differs at step {s1}: {v1} vs {v2} under the same seed"
        );
    }
    pass(7, "pretraining overfits 8 samples below 5% in 2000 steps, trace reproducible");
}

/// Independent gradient-histogram implementation: tent weights around each
/// orientation-bin center instead of floor-based interpolation.
fn brute_force_descriptor(frame: &[f64], h: usize, w: usize, token_px: usize) -> Vec<Vec<f64>> {
    let cell = 8usize;
    let bins = 9usize;
    let gray: Vec<f64> = frame.chunks(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect();
    let at = |y: i64, x: i64| {
        let yy = y.clamp(0, h as i64 - 1) as usize;
        let xx = x.clamp(0, w as i64 - 1) as usize;
        gray[yy * w + xx]
    };
    let (cy, cx) = (h / cell, w / cell);
    let mut hist = vec![0.0f64; cy * cx * bins];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let gx = at(y, x + 1) - at(y, x - 1);
            let gy = at(y + 1, x) - at(y - 1, x);
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            let ang = gy.atan2(gx).to_degrees().rem_euclid(180.0);
            let cell_idx = (y as usize / cell) * cx + x as usize / cell;
            for b in 0..bins {
                let center = 20.0 * b as f64 + 10.0;
                let mut d = (ang - center).rem_euclid(180.0);
                d = d.min(180.0 - d);
                let wgt = (1.0 - d / 20.0).max(0.0);
                hist[cell_idx * bins + b] += mag * wgt;
            }
        }
    }
    let cpt = token_px / cell;
    let (ty, tx) = (h / token_px, w / token_px);
    let mut rows = Vec::new();
    for yt in 0..ty {
        for xt in 0..tx {
            let mut row = Vec::new();
            for dy in 0..cpt {
                for dx in 0..cpt {
                    let c = (yt * cpt + dy) * cx + xt * cpt + dx;
                    row.extend_from_slice(&hist[c * bins..(c + 1) * bins]);
                }
            }
            let denom = (row.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
            for v in row.iter_mut() {
                *v /= denom;
            }
            rows.push(row);
        }
    }
    rows
}

#[test]
fn criterion_08_hog_matches_brute_force() {
    let mut cfg = HieraConfig::tiny(InputExtents::image(32, 32));
    cfg.pretrain_mode = true;
    let layout = build_layout(cfg.input).unwrap();
    let geom = target_geometry(&cfg, &layout).unwrap();
    let (h, w) = (32usize, 32usize);

    let ramp: Vec<f64> = (0..h * w * 3)
        .map(|i| ((i / 3) % w) as f64 / w as f64)
        .collect();
    let stripes: Vec<f64> = (0..h * w * 3)
        .map(|i| if ((i / 3) / w / 4) % 2 == 0 { 0.1 } else { 0.9 })
        .collect();
    let waves: Vec<f64> = (0..h * w * 3)
        .map(|i| {
            let p = i / 3;
            let (y, x) = (p / w, p % w);
            0.5 + 0.3 * ((x as f64 * 0.6 + y as f64 * 1.1).sin()) + 0.05 * (i % 3) as f64
        })
        .collect();

    for (name, img) in [("ramp", ramp), ("stripes", stripes), ("waves", waves)] {
        let pixels = Tensor::from_vec(img.clone(), &[h * w * 3]).unwrap();
        let target = hog_target::<f64>(&pixels, &layout, &geom).unwrap();
        let tv = target.values.to_vec();
        let expect = brute_force_descriptor(&img, h, w, geom.token_px);
        let map = layout.group_token_map(geom.stage);
        let p = expect[0].len();
        assert_eq!(tv.len(), map.len() * p);
        for (gi, &raster) in map.iter().enumerate() {
            for (j, &e) in expect[raster].iter().enumerate() {
                let got = tv[gi * p + j];
                assert!(
                    (got - e).abs() <= 1e-6,
                    "{name}: token {raster} component {j}: {got} vs {e}"
                );
            }
        }
    }
    pass(8, "gradient-histogram targets match an independent implementation");
}

#[test]
fn criterion_09_ladder_matrix_and_pool_kernel_direction() {
    for attn in [AttnMode::MaskUnit, AttnMode::KvPool] {
        for kernel in [PoolKernel::EqualStride, PoolKernel::Overlap3] {
            for s1 in [false, true] {
                for qres in [false, true] {
                    let mut cfg = HieraConfig::tiny(InputExtents::image(64, 64));
                    cfg.ladder.attn_mode = attn;
                    cfg.ladder.pool_kernel = kernel;
                    cfg.ladder.stride1_pools = s1;
                    cfg.ladder.q_attn_residual = qres;
                    let model: Hiera<f32> = Hiera::build(cfg, 90).unwrap();
                    let data = synthetic_dataset(model.config.input, 1, 2, 91);
                    let feats = model
                        .forward_encoder(&data[0].pixels, None, None)
                        .unwrap();
                    let logits = model.classifier_head(&feats).unwrap();
                    let loss = logits.cross_entropy_smoothed(0, 0.1).unwrap();
                    loss.backward().unwrap();
                    assert!(loss.is_finite(), "{attn:?}/{kernel:?}/{s1}/{qres}");
                }
            }
        }
    }

    // Direction only: the kernel=stride pooling configuration must not be
    // slower than the overlapping 3x3 kernel. Retried to tolerate scheduler
    // noise at this tiny scale.
    use hiera::bench::{bench_throughput, BenchMode};
    let mut ok = false;
    for attempt in 0..3 {
        let base = HieraConfig::tiny(InputExtents::image(128, 128));
        let mut overlap = base.clone();
        overlap.ladder.pool_kernel = PoolKernel::Overlap3;
        let eq = bench_throughput(&base, BenchMode::Dense, 2, 2, 7, attempt).unwrap();
        let ov = bench_throughput(&overlap, BenchMode::Dense, 2, 2, 7, attempt).unwrap();
        if eq.throughput >= ov.throughput {
            ok = true;
            break;
        }
    }
    assert!(ok, "kernel=stride never reached overlap3 throughput in 3 attempts");
    pass(9, "all 16 toggle combinations train; kernel=stride at least as fast as overlap3");
}

#[test]
fn criterion_10_video_layout_and_equivalence() {
    let l = build_layout(InputExtents::video(16, 224, 224)).unwrap();
    assert_eq!(l.total_units(), 392);
    assert_eq!(l.unit_tokens, [1, 8, 8]);

    // Per-stage attention window extents are the same as for images.
    let img_cfg = HieraConfig::tiny(InputExtents::image(64, 64));
    let vid_cfg = HieraConfig::tiny(InputExtents::video(4, 64, 64));
    for s in 0..4 {
        assert_eq!(img_cfg.unit_extent_at(s), vid_cfg.unit_extent_at(s));
    }

    sparse_dense_equivalence(InputExtents::video(4, 64, 64), 12, 101);
    pass(10, "video tokenization yields 392 units of 1x8x8; sparse forward matches reference");
}

#[test]
fn criterion_11_checkpoint_roundtrip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.ckpt");
    let cfg = HieraConfig::tiny(InputExtents::image(64, 64));
    let data = synthetic_dataset(cfg.input, 4, 4, 110);
    let opt = OptimConfig::finetune(1e-3, 2, 20, 0.9);
    let opts = LoopOptions { epochs: 1, batch: 1, ..Default::default() };

    let model_a: Hiera<f32> = Hiera::build(cfg.clone(), 111).unwrap();
    let mut state_a = hiera::train::encoder_state(&model_a, opt.clone(), 111);
    supervised_loop(&model_a, &data, &mut state_a, &opts).unwrap();
    hiera::train::save_state(&path, &state_a).unwrap();

    let model_b: Hiera<f32> = Hiera::build(cfg, 111).unwrap();
    let mut state_b = hiera::train::encoder_state(&model_b, opt, 111);
    // Scramble B so a successful restore cannot be explained by identical
    // construction.
    for (_, t, _) in model_b.params.iter() {
        t.map_data_mut(|v| *v += 0.125);
    }
    let ck = hiera::train::load_raw(&path).unwrap();
    state_b.restore(&ck).unwrap();

    let bits = |s: &TrainState<f32>| -> Vec<(String, Vec<u32>, Vec<u32>, Vec<u32>)> {
        s.entries
            .iter()
            .enumerate()
            .map(|(i, (n, t, _))| {
                (
                    n.clone(),
                    t.to_vec().iter().map(|v| v.to_bits()).collect(),
                    s.m[i].iter().map(|v| v.to_bits()).collect(),
                    s.v[i].iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect()
    };
    assert_eq!(bits(&state_a), bits(&state_b), "restored state not bitwise identical");

    // One further epoch on each side stays bitwise identical.
    supervised_loop(&model_a, &data, &mut state_a, &opts).unwrap();
    supervised_loop(&model_b, &data, &mut state_b, &opts).unwrap();
    assert_eq!(bits(&state_a), bits(&state_b), "post-restore training diverged");
    pass(11, "checkpoint round trip is bitwise identical, including optimizer moments");
}
