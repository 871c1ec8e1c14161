use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::mask::{assemble_conditioning, FrameRole, MaskSpec, Side};
use crate::video::FrameGeom;

fn live_config() -> DenoiserConfig {
    DenoiserConfig { zero_out: false, ..DenoiserConfig::default() }
}

// One norm group: with one channel per group a per-channel bias before the
// norm would be cancelled exactly and have no gradient.
fn tiny_config() -> DenoiserConfig {
    DenoiserConfig {
        frames: 3,
        size: 4,
        channels: 1,
        widths: vec![2, 4],
        token_dim: 4,
        global_frames: 2,
        norm_groups: 1,
        sin_dim: 4,
        emb_dim: 4,
        zero_out: false,
    }
}

fn random_batch<T: Scalar>(cfg: &DenoiserConfig, clips: usize, rng: &mut ChaCha8Rng) -> DenoiserBatch<T> {
    let (s, c) = (cfg.size, cfg.channels);
    DenoiserBatch {
        x: Tensor::randn([clips * cfg.frames, 2 * c + 1, s, s], 1.0, rng),
        global: Tensor::randn([clips * cfg.global_frames, c + 1, s, s], 1.0, rng),
        t: (0..clips).map(|i| 100 + 300 * i).collect(),
        fps: (0..clips).map(|i| 1 + i as u32).collect(),
    }
}

fn clip_conditioning(cfg: &DenoiserConfig, seed: u64) -> (Tensor<f32>, ClipConditioning<f32>) {
    let geom = FrameGeom { h: cfg.size, w: cfg.size, c: cfg.channels };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames: Vec<Vec<f32>> = (0..cfg.frames.max(cfg.global_frames))
        .map(|_| (0..geom.len()).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let refs: Vec<&[f32]> = frames.iter().map(Vec::as_slice).collect();
    let roles = vec![FrameRole::ContextOnly; cfg.frames];
    let mask = MaskSpec::single(Side::Left, 0.5).realize(cfg.size, cfg.size);
    let cond = assemble_conditioning(geom, &refs[..cfg.frames], &roles, &mask, &refs[..cfg.global_frames], 8).unwrap();
    let noisy = Tensor::randn([cfg.frames, cfg.channels, cfg.size, cfg.size], 1.0, &mut rng);
    (noisy, cond)
}

#[test]
fn output_shape_and_token_count() {
    let cfg = live_config();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = init_params::<f32>(&cfg, &mut rng).unwrap();
    let batch = random_batch::<f32>(&cfg, 2, &mut rng);
    let mut g = Graph::inference();
    let out = forward(&mut g, &params, &cfg, &batch).unwrap();
    assert_eq!(g.shape(out), [32, 1, 16, 16]);

    let mut g = Graph::inference();
    let global = g.input(batch.global.clone());
    let tokens = encode_prompt(&mut g, &params, &cfg, global).unwrap();
    assert_eq!(g.shape(tokens), [2, 256, 32]);
    assert_eq!(cfg.prompt_tokens(), 16 * 4 * 4);
}

#[test]
fn wrong_global_count_is_rejected() {
    let cfg = live_config();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = init_params::<f32>(&cfg, &mut rng).unwrap();
    let mut batch = random_batch::<f32>(&cfg, 1, &mut rng);
    batch.global = Tensor::zeros([15, 2, 16, 16]);
    assert!(predict_noise(&params, &cfg, &batch).is_err());
    let mut g = Graph::inference();
    let global = g.input(Tensor::<f32>::zeros([15, 2, 16, 16]));
    assert!(encode_prompt(&mut g, &params, &cfg, global).is_err());
}

#[test]
fn null_prompt_tokens_are_deterministic() {
    let cfg = live_config();
    let params = init_params::<f32>(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let run = || {
        let mut g = Graph::inference();
        let global = g.input(Tensor::<f32>::zeros([16, 2, 16, 16]));
        let t = encode_prompt(&mut g, &params, &cfg, global).unwrap();
        g.value(t).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_output_head_predicts_zero() {
    let cfg = DenoiserConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = init_params::<f32>(&cfg, &mut rng).unwrap();
    let out = predict_noise(&params, &cfg, &random_batch(&cfg, 1, &mut rng)).unwrap();
    assert!(out[0].data().iter().all(|&v| v == 0.0));
}

#[test]
fn fps_changes_the_output() {
    let cfg = live_config();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = init_params::<f32>(&cfg, &mut rng).unwrap();
    let mut batch = random_batch::<f32>(&cfg, 1, &mut rng);
    batch.fps = vec![1];
    let a = predict_noise(&params, &cfg, &batch).unwrap();
    batch.fps = vec![30];
    let b = predict_noise(&params, &cfg, &batch).unwrap();
    assert!(a[0].max_abs_diff(&b[0]) > 1e-4);
}

#[test]
fn first_frame_context_reaches_last_frame() {
    let cfg = live_config();
    let params = init_params::<f32>(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let (noisy, cond) = clip_conditioning(&cfg, 1);
    let mut moved = cond.clone();
    // a visible pixel of frame 0 (the right half is visible)
    moved.context.data_mut()[3 * 16 + 12] += 0.5;
    let plane = 16 * 16;
    let last = |c: &ClipConditioning<f32>| {
        let b = DenoiserBatch::from_clips(&cfg, &[(&noisy, c, 500)]).unwrap();
        predict_noise(&params, &cfg, &b).unwrap()[0].data()[15 * plane..].to_vec()
    };
    let (a, b) = (last(&cond), last(&moved));
    let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    assert!(diff > 1e-6, "frame 15 unchanged, max diff {diff}");
}

#[test]
fn visible_prompt_pixel_changes_the_output() {
    let cfg = live_config();
    let params = init_params::<f32>(&cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let (noisy, cond) = clip_conditioning(&cfg, 2);
    let mut moved = cond.clone();
    moved.global.data_mut()[5 * 16 + 10] += 0.5;
    let run = |c: &ClipConditioning<f32>| {
        let b = DenoiserBatch::from_clips(&cfg, &[(&noisy, c, 500)]).unwrap();
        predict_noise(&params, &cfg, &b).unwrap().remove(0)
    };
    assert!(run(&cond).max_abs_diff(&run(&moved)) > 1e-6);

    let mut g = Graph::inference();
    let a = g.input(cond.global.clone());
    let b = g.input(moved.global.clone());
    let ta = encode_prompt(&mut g, &params, &cfg, a).unwrap();
    let tb = encode_prompt(&mut g, &params, &cfg, b).unwrap();
    assert!(g.value(ta).max_abs_diff(g.value(tb)) > 0.0);
}

#[test]
fn batched_clips_match_separate_evaluation_bitwise() {
    let cfg = live_config();
    let params = init_params::<f32>(&cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let (noisy, cond) = clip_conditioning(&cfg, 3);
    let variants = [cond.without_context().without_prompt(), cond.without_prompt(), cond.clone()];
    let clips: Vec<_> = variants.iter().map(|c| (&noisy, c, 321)).collect();
    let joint = predict_noise(&params, &cfg, &DenoiserBatch::from_clips(&cfg, &clips).unwrap()).unwrap();
    for (i, clip) in clips.iter().enumerate() {
        let alone = predict_noise(&params, &cfg, &DenoiserBatch::from_clips(&cfg, &[*clip]).unwrap()).unwrap();
        assert_eq!(alone[0].data(), joint[i].data(), "clip {i}");
    }
}

#[test]
fn every_parameter_matches_finite_differences() {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = init_params::<f64>(&cfg, &mut rng).unwrap();
    let batch = random_batch::<f64>(&cfg, 2, &mut rng);
    let proj = Tensor::<f64>::randn([2 * 3, 1, 4, 4], 1.0, &mut rng);

    let objective = |p: &ParamStore<f64>| -> f64 {
        let mut g = Graph::inference();
        let out = forward(&mut g, p, &cfg, &batch).unwrap();
        g.value(out).data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
    };

    let mut g = Graph::new();
    let out = forward(&mut g, &params, &cfg, &batch).unwrap();
    let pv = g.input(proj.clone());
    let prod = g.mul(out, pv).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.backward(loss).unwrap();
    let bound: Vec<(String, Var)> = g.bound_params().map(|(n, v)| (n.to_string(), v)).collect();
    assert_eq!(bound.len(), params.len(), "every parameter is used");

    let h = 1e-5;
    let mut worst = 0.0f64;
    for (name, var) in &bound {
        let analytic = grads.get(*var);
        assert!(
            analytic.data().iter().any(|&v| v != 0.0),
            "{name} receives no gradient"
        );
        let mut num = Vec::new();
        let mut ana = Vec::new();
        for j in 0..analytic.numel() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[j] += h;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[j] -= h;
            num.push((objective(&plus) - objective(&minus)) / (2.0 * h));
            ana.push(analytic.data()[j]);
        }
        let diff: f64 = num.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = num.iter().map(|a| a * a).sum::<f64>().sqrt().max(ana.iter().map(|a| a * a).sum::<f64>().sqrt());
        let rel = diff / norm.max(1e-12);
        worst = worst.max(rel);
        assert!(rel <= 1e-4, "{name}: relative error {rel:e}");
    }
    assert!(worst.is_finite());
}

#[test]
fn header_roundtrip_and_validation() {
    let cfg = tiny_config();
    assert_eq!(DenoiserConfig::from_header(&cfg.to_header()).unwrap(), cfg);
    let with_extra = format!("steps=10\n{}", DenoiserConfig::default().to_header());
    assert_eq!(DenoiserConfig::from_header(&with_extra).unwrap(), DenoiserConfig::default());
    assert!(DenoiserConfig::from_header("frames=x").is_err());
    for bad in [
        DenoiserConfig { frames: 1, ..tiny_config() },
        DenoiserConfig { size: 6, ..tiny_config() },
        DenoiserConfig { widths: vec![3, 4], norm_groups: 2, ..tiny_config() },
        DenoiserConfig { sin_dim: 3, ..tiny_config() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}

#[test]
fn deterministic_given_seed() {
    let cfg = live_config();
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = init_params::<f32>(&cfg, &mut rng).unwrap();
        predict_noise(&params, &cfg, &random_batch(&cfg, 1, &mut rng)).unwrap()
    };
    assert_eq!(run(), run());
}
