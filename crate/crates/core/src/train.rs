//! Noise-prediction training on a video corpus.
//!
//! Each clip in a batch draws its own video, stride, start frame, mask
//! strategy, guide case, prompt dropout and diffusion step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::denoiser::{forward, init_params, DenoiserBatch, DenoiserConfig};
use crate::error::{Error, Result};
use crate::guidance::to_model;
use crate::io::Csv;
use crate::mask::{
    assemble_conditioning, global_frame_indices, planar_clip, sample_guide_case, sample_mask_strategy, ClipConditioning,
    FrameRole, Strategy,
};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::video::Video;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Frame strides are drawn uniformly from `1..=max_stride`, then clamped
    /// so the clip fits in the video.
    pub max_stride: usize,
    /// Probability of dropping the global prompt.
    pub p2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 8,
            adam: AdamConfig::default(),
            max_stride: 30,
            p2: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn to_header(&self) -> String {
        format!(
            "train.steps={}\ntrain.batch={}\ntrain.lr={}\ntrain.warmup={}\ntrain.max_stride={}\ntrain.p2={}\ntrain.seed={}\n",
            self.steps, self.batch, self.adam.lr, self.adam.warmup_steps, self.max_stride, self.p2, self.seed
        )
    }
}

/// One training example before batching.
#[derive(Clone, Debug)]
pub struct TrainClip {
    pub video: usize,
    pub start: usize,
    pub stride: usize,
    pub strategy: Strategy,
    pub x0: Tensor<f32>,
    pub cond: ClipConditioning<f32>,
    pub t: usize,
    pub eps: Tensor<f32>,
}

/// Draws one clip with its conditioning, step and noise.
pub fn sample_clip(
    corpus: &[Video],
    net: &DenoiserConfig,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<TrainClip> {
    let f = net.frames;
    let vi = rng.random_range(0..corpus.len());
    let v = &corpus[vi];
    if v.len() < f {
        return Err(Error::InvalidArgument(format!("video {vi} has {} frames, clips need {f}", v.len())));
    }
    let fit = (v.len() - 1) / (f - 1);
    let stride = rng.random_range(1..=cfg.max_stride.max(1)).min(fit);
    let start = rng.random_range(0..=v.len() - 1 - (f - 1) * stride);
    let frames: Vec<&[f32]> = (0..f).map(|j| v.frame(start + j * stride)).collect();

    let spec = sample_mask_strategy(rng);
    let mask = spec.realize(v.geom.h, v.geom.w);
    let roles = if spec.strategy == Strategy::All {
        vec![FrameRole::ContextOnly; f]
    } else {
        sample_guide_case(rng, f)?.1
    };
    let global: Vec<&[f32]> = global_frame_indices(v.len(), net.global_frames)
        .into_iter()
        .map(|i| v.frame(i))
        .collect();
    let fps = stride.clamp(1, 30) as u32;
    let mut cond = assemble_conditioning::<f32>(v.geom, &frames, &roles, &mask, &global, fps)?;
    if spec.strategy == Strategy::All || rng.random_bool(cfg.p2) {
        cond = cond.without_prompt();
    }
    let x0 = planar_clip::<f32>(&frames, v.geom)?.map(to_model);
    let t = rng.random_range(1..=schedule.steps());
    let eps = Tensor::randn(x0.shape().to_vec(), 1.0, rng);
    Ok(TrainClip {
        video: vi,
        start,
        stride,
        strategy: spec.strategy,
        x0,
        cond,
        t,
        eps,
    })
}

/// Noise-prediction MSE of one batch; gradients are accumulated into
/// `params` when `train` is set.
pub fn batch_loss(params: &mut ParamStore<f32>, net: &DenoiserConfig, schedule: &NoiseSchedule, clips: &[TrainClip], train: bool) -> Result<f64> {
    let noisy: Vec<Tensor<f32>> = clips
        .iter()
        .map(|c| schedule.forward_sample(&c.x0, c.t, &c.eps))
        .collect::<Result<_>>()?;
    let triples: Vec<_> = clips.iter().zip(&noisy).map(|(c, z)| (z, &c.cond, c.t)).collect();
    let batch = DenoiserBatch::from_clips(net, &triples)?;
    let mut target = Vec::with_capacity(clips.len() * clips[0].eps.numel());
    for c in clips {
        target.extend_from_slice(c.eps.data());
    }
    let mut g = if train { Graph::new() } else { Graph::inference() };
    let pred = forward(&mut g, params, net, &batch)?;
    let shape = g.value(pred).shape().to_vec();
    let target = g.input(Tensor::new(shape, target)?);
    let loss = g.mse(pred, target)?;
    let value = g.value(loss).data()[0] as f64;
    if train {
        let grads = g.backward(loss)?;
        params.zero_grad();
        params.accumulate_grads(&g, &grads, 1.0);
    }
    Ok(value)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

pub fn loss_csv(log: &[StepLog]) -> Csv {
    let mut csv = Csv::new(&["step", "loss", "lr"]);
    for l in log {
        csv.row(&[l.step.to_string(), format!("{:.8}", l.loss), format!("{:e}", l.lr)]);
    }
    csv
}

/// Trains a fresh model. `on_step` sees every logged step as it happens.
pub fn train(
    corpus: &[Video],
    net: &DenoiserConfig,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<(ParamStore<f32>, Vec<StepLog>)> {
    net.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty training corpus".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if let Some(v) = corpus.iter().find(|v| v.geom.h != net.size || v.geom.w != net.size || v.geom.c != net.channels) {
        return Err(Error::InvalidArgument(format!(
            "corpus frames are {}x{}x{}, model expects {}x{}x{}",
            v.geom.h, v.geom.w, v.geom.c, net.size, net.size, net.channels
        )));
    }
    let schedule = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init_params::<f32>(net, &mut rng)?;
    rng.set_stream(1);
    let mut adam = Adam::new(cfg.adam);
    let mut log = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let clips = (0..cfg.batch)
            .map(|_| sample_clip(corpus, net, &schedule, cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let loss = batch_loss(&mut params, net, &schedule, &clips, true)?;
        if !loss.is_finite() {
            return Err(Error::InvalidArgument(format!("loss diverged at step {step}")));
        }
        let lr = adam.step(&mut params, step)?;
        let entry = StepLog { step, loss, lr };
        on_step(&entry);
        log.push(entry);
    }
    Ok((params, log))
}

/// Checkpoint header holding both the network and training settings.
pub fn checkpoint_header(net: &DenoiserConfig, cfg: &TrainConfig) -> String {
    format!("{}{}", net.to_header(), cfg.to_header())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SyntheticSpec;
    use crate::video::FrameGeom;

    fn corpus() -> Vec<Video> {
        SyntheticSpec {
            frames: 12,
            geom: FrameGeom { h: 8, w: 8, c: 1 },
            size: 3,
            ..SyntheticSpec::default()
        }
        .generate(6)
        .unwrap()
    }

    fn net() -> DenoiserConfig {
        DenoiserConfig {
            frames: 4,
            size: 8,
            channels: 1,
            widths: vec![8, 16],
            token_dim: 16,
            global_frames: 4,
            norm_groups: 4,
            sin_dim: 16,
            emb_dim: 16,
            zero_out: true,
        }
    }

    fn cfg(steps: u64) -> TrainConfig {
        TrainConfig {
            steps,
            batch: 4,
            adam: AdamConfig {
                lr: 2e-3,
                warmup_steps: 20,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn first_loss_is_unit_noise_energy() {
        let (_, log) = train(&corpus(), &net(), &TrainConfig { batch: 8, ..cfg(1) }, |_| {}).unwrap();
        // zero head: loss = mean ε² over 8·4·64 = 2048 normals, sd √(2/2048)
        assert!((log[0].loss - 1.0).abs() < 4.0 * (2.0f64 / 2048.0).sqrt(), "{}", log[0].loss);
    }

    #[test]
    fn same_seed_same_curve() {
        let c = corpus();
        let (pa, la) = train(&c, &net(), &cfg(4), |_| {}).unwrap();
        let (pb, lb) = train(&c, &net(), &cfg(4), |_| {}).unwrap();
        assert_eq!(la, lb);
        assert_eq!(pa.to_checkpoint_bytes(""), pb.to_checkpoint_bytes(""));
        let (_, lc) = train(&c, &net(), &TrainConfig { seed: 1, ..cfg(4) }, |_| {}).unwrap();
        assert_ne!(la, lc);
    }

    #[test]
    fn clips_respect_stride_and_strategy_rules() {
        let c = corpus();
        let n = net();
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..300 {
            let clip = sample_clip(&c, &n, &s, &cfg(1), &mut rng).unwrap();
            assert!((1..=3).contains(&clip.stride));
            assert!(clip.start + 3 * clip.stride < 12);
            assert_eq!(clip.cond.fps as usize, clip.stride);
            assert!((1..=1000).contains(&clip.t));
            if clip.strategy == Strategy::All {
                assert!(clip.cond.mask.data().iter().all(|&m| m == 0.0));
                assert!(clip.cond.global.data().iter().all(|&m| m == 0.0));
            }
        }
    }

    #[test]
    fn rejects_short_videos_and_bad_geometry() {
        let short = SyntheticSpec {
            frames: 3,
            geom: FrameGeom { h: 8, w: 8, c: 1 },
            ..SyntheticSpec::default()
        }
        .generate(1)
        .unwrap();
        assert!(train(&short, &net(), &cfg(1), |_| {}).is_err());
        let big = SyntheticSpec { frames: 8, ..SyntheticSpec::default() }.generate(1).unwrap();
        assert!(train(&big, &net(), &cfg(1), |_| {}).is_err());
        assert!(train(&[], &net(), &cfg(1), |_| {}).is_err());
    }

    #[test]
    fn loss_halves_within_500_steps() {
        let (_, log) = train(&corpus(), &net(), &cfg(500), |_| {}).unwrap();
        let mean = |s: &[StepLog]| s.iter().map(|l| l.loss).sum::<f64>() / s.len() as f64;
        let (first, last) = (mean(&log[..50]), mean(&log[450..]));
        assert!(last <= 0.5 * first, "first {first:.4} last {last:.4}");
        assert_eq!(loss_csv(&log).as_str().lines().count(), 501);
    }
}
