//! Runs a [`CtfPlan`] against a masked video with a trained denoiser.
//!
//! Calls at the same dependency depth are independent and run in parallel;
//! each one draws its noise from its own ChaCha stream so the result does
//! not depend on the worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::guidance::ClipRunner;
use crate::io::Csv;
use crate::mask::{assemble_conditioning, global_frame_indices, FrameMask, FrameRole};
use crate::planner::{CtfPlan, InferenceCall, Slot};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::video::{FrameGeom, Video};

#[derive(Clone, Debug, PartialEq)]
pub struct CallRecord {
    pub call: usize,
    pub level: usize,
    pub stride: usize,
    pub first: usize,
    pub last: usize,
    pub generated: usize,
    pub evaluations: usize,
    /// Hidden-region MSE over this call's new frames; absent without ground
    /// truth or when nothing is hidden.
    pub hidden_mse: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Execution {
    pub video: Video,
    pub records: Vec<CallRecord>,
}

impl Execution {
    pub fn records_csv(&self) -> Csv {
        let mut csv = Csv::new(&["call", "level", "stride", "first", "last", "generated", "evaluations", "hidden_mse"]);
        for r in &self.records {
            csv.row(&[
                r.call.to_string(),
                r.level.to_string(),
                r.stride.to_string(),
                r.first.to_string(),
                r.last.to_string(),
                r.generated.to_string(),
                r.evaluations.to_string(),
                r.hidden_mse.map(|m| format!("{m:.8}")).unwrap_or_default(),
            ]);
        }
        csv
    }

    pub fn evaluations(&self) -> usize {
        self.records.iter().map(|r| r.evaluations).sum()
    }
}

/// Planar `[F, C, H, W]` tensor to interleaved frames.
fn planar_frames<T: Scalar>(t: &Tensor<T>, geom: FrameGeom) -> Vec<Vec<f32>> {
    let plane = geom.h * geom.w;
    let f = t.shape()[0];
    let d = t.data();
    (0..f)
        .map(|i| {
            let mut out = vec![0.0f32; geom.len()];
            for ch in 0..geom.c {
                let src = &d[(i * geom.c + ch) * plane..][..plane];
                for (p, v) in src.iter().enumerate() {
                    out[p * geom.c + ch] = v.to_f64_lossy() as f32;
                }
            }
            out
        })
        .collect()
}

fn hidden_mse(frames: &[(usize, &[f32])], truth: &Video, mask: &FrameMask) -> Option<f64> {
    let vis = mask.flags();
    let c = truth.geom.c;
    let (mut sum, mut n) = (0.0f64, 0usize);
    for &(t, frame) in frames {
        let gt = truth.frame(t);
        for (p, &v) in vis.iter().enumerate() {
            if v {
                continue;
            }
            for ch in 0..c {
                let d = (frame[p * c + ch] - gt[p * c + ch]) as f64;
                sum += d * d;
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Generates every frame of `input` outside `mask` following `plan`.
///
/// Only visible pixels of `input` are read. `truth`, when given, is used for
/// the per-call hidden-region MSE and nothing else.
pub fn execute_plan<T: Scalar>(
    plan: &CtfPlan,
    input: &Video,
    mask: &FrameMask,
    runner: &ClipRunner<'_, T>,
    seed: u64,
    truth: Option<&Video>,
) -> Result<Execution> {
    plan.validate()?;
    let geom = input.geom;
    if input.len() != plan.length {
        return Err(Error::InvalidArgument(format!(
            "plan covers {} frames but the video has {}",
            plan.length,
            input.len()
        )));
    }
    if plan.frames != runner.net.frames || geom.h != runner.net.size || geom.w != runner.net.size || geom.c != runner.net.channels {
        return Err(Error::InvalidArgument(format!(
            "model expects {} frames of {0}x{}x{}, got clips of {} frames of {}x{}x{}",
            runner.net.frames, runner.net.size, runner.net.channels, plan.frames, geom.h, geom.w, geom.c
        )));
    }
    if let Some(t) = truth {
        if t.geom != geom || t.len() != input.len() {
            return Err(Error::InvalidArgument("ground truth does not match the input video".into()));
        }
    }

    let global: Vec<&[f32]> = global_frame_indices(input.len(), runner.net.global_frames)
        .into_iter()
        .map(|i| input.frame(i))
        .collect();

    let mut store: Vec<Option<Vec<f32>>> = vec![None; plan.length];
    let mut records: Vec<Option<CallRecord>> = vec![None; plan.calls.len()];

    let run = |call: &InferenceCall, store: &[Option<Vec<f32>>]| -> Result<(Vec<Vec<f32>>, usize)> {
        let mut frames: Vec<&[f32]> = Vec::with_capacity(call.frames.len());
        let mut roles = Vec::with_capacity(call.frames.len());
        for (&i, slot) in call.frames.iter().zip(&call.slots) {
            match slot {
                Slot::New => {
                    frames.push(input.frame(i));
                    roles.push(FrameRole::ContextOnly);
                }
                Slot::Guide(_) => {
                    let f = store[i]
                        .as_deref()
                        .ok_or_else(|| Error::Plan(format!("call {} reads frame {i} before it exists", call.id)))?;
                    frames.push(f);
                    roles.push(FrameRole::GuideRaw);
                }
            }
        }
        let cond = assemble_conditioning::<T>(geom, &frames, &roles, mask, &global, call.fps())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(call.id as u64);
        let out = runner.outpaint(&cond, &mut rng)?;
        Ok((planar_frames(&out.frames, geom), out.evaluations))
    };

    for wave in plan.waves()? {
        let outputs: Vec<Result<(Vec<Vec<f32>>, usize)>> =
            wave.par_iter().map(|&id| run(&plan.calls[id], &store)).collect();
        for (&id, out) in wave.iter().zip(outputs) {
            let (frames, evaluations) = out?;
            let call = &plan.calls[id];
            let mut fresh = Vec::new();
            for ((&i, slot), frame) in call.frames.iter().zip(&call.slots).zip(frames) {
                if *slot == Slot::New {
                    debug_assert!(store[i].is_none());
                    store[i] = Some(frame);
                    fresh.push(i);
                }
            }
            let hidden_mse = truth.and_then(|t| {
                let pairs: Vec<(usize, &[f32])> = fresh.iter().map(|&i| (i, store[i].as_deref().unwrap())).collect();
                hidden_mse(&pairs, t, mask)
            });
            records[id] = Some(CallRecord {
                call: id,
                level: call.level,
                stride: call.stride,
                first: call.frames[0],
                last: *call.frames.last().unwrap(),
                generated: fresh.len(),
                evaluations,
                hidden_mse,
            });
        }
    }

    let frames: Vec<Vec<f32>> = store
        .into_iter()
        .enumerate()
        .map(|(i, f)| f.ok_or_else(|| Error::Plan(format!("frame {i} was never generated"))))
        .collect::<Result<_>>()?;
    Ok(Execution {
        video: Video::from_frames(geom, input.fps, frames)?,
        records: records.into_iter().map(|r| r.expect("every call runs")).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{init_params, DenoiserConfig};
    use crate::guidance::{GuidanceConfig, InitMode};
    use crate::mask::{MaskSpec, Side};
    use crate::planner::{plan_dense, plan_hybrid};
    use crate::sampler::SamplerConfig;
    use crate::schedule::NoiseSchedule;
    use crate::synth::SyntheticSpec;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            frames: 4,
            size: 8,
            channels: 1,
            widths: vec![4, 8],
            token_dim: 8,
            global_frames: 4,
            norm_groups: 2,
            sin_dim: 8,
            emb_dim: 8,
            zero_out: false,
        }
    }

    fn video(len: usize) -> Video {
        let spec = SyntheticSpec {
            frames: len,
            geom: FrameGeom { h: 8, w: 8, c: 1 },
            size: 3,
            ..SyntheticSpec::default()
        };
        spec.generate_one(0).unwrap()
    }

    fn with_runner<R>(f: impl FnOnce(&ClipRunner<'_, f32>) -> R) -> R {
        let net = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = init_params::<f32>(&net, &mut rng).unwrap();
        let schedule = NoiseSchedule::default();
        let sampler = SamplerConfig {
            num_inference_steps: 3,
            ..SamplerConfig::default()
        };
        let guidance = GuidanceConfig::default();
        let runner = ClipRunner {
            params: &params,
            net: &net,
            schedule: &schedule,
            sampler: &sampler,
            guidance: &guidance,
            init: InitMode::Pure,
        };
        f(&runner)
    }

    #[test]
    fn fully_visible_input_is_returned() {
        let v = video(10);
        let plan = plan_dense(10, 4).unwrap();
        let out = with_runner(|r| execute_plan(&plan, &v, &FrameMask::full(8, 8), r, 1, Some(&v)).unwrap());
        assert_eq!(out.video, v);
        assert!(out.records.iter().all(|r| r.hidden_mse.is_none()));
        assert_eq!(out.records.iter().map(|r| r.generated).sum::<usize>(), 10);
    }

    #[test]
    fn visible_pixels_survive_and_records_cover_plan() {
        let v = video(13);
        let mask = MaskSpec::single(Side::Right, 0.5).realize(8, 8);
        let plan = plan_hybrid(13, 4, &[3, 1]).unwrap();
        let out = with_runner(|r| execute_plan(&plan, &v, &mask, r, 7, Some(&v)).unwrap());
        for t in 0..13 {
            for y in 0..8 {
                for x in 0..8 {
                    let (a, b) = (out.video.pixel(t, y, x, 0), v.pixel(t, y, x, 0));
                    if mask.is_visible(y, x) {
                        assert_eq!(a, b);
                    } else {
                        assert!((0.0..=1.0).contains(&a));
                    }
                }
            }
        }
        assert_eq!(out.records.len(), plan.calls.len());
        assert!(out.records.iter().all(|r| r.hidden_mse.is_some()));
        assert_eq!(out.records_csv().as_str().lines().count(), plan.calls.len() + 1);
    }

    #[test]
    fn hidden_input_pixels_are_never_read() {
        let v = video(10);
        let mask = MaskSpec::single(Side::Left, 0.5).realize(8, 8);
        let mut scrambled = v.clone();
        for t in 0..10 {
            for (p, px) in scrambled.frame_mut(t).iter_mut().enumerate() {
                if !mask.is_visible(p / 8, p % 8) {
                    *px = 1.0 - *px;
                }
            }
        }
        let plan = plan_dense(10, 4).unwrap();
        let (a, b) = with_runner(|r| {
            (
                execute_plan(&plan, &v, &mask, r, 5, None).unwrap(),
                execute_plan(&plan, &scrambled, &mask, r, 5, None).unwrap(),
            )
        });
        assert_eq!(a.video, b.video);
    }

    #[test]
    fn seed_determines_output() {
        let v = video(10);
        let mask = MaskSpec::four(0.25).realize(8, 8);
        let plan = plan_hybrid(10, 4, &[3, 1]).unwrap();
        let (a, b, c) = with_runner(|r| {
            (
                execute_plan(&plan, &v, &mask, r, 11, None).unwrap(),
                execute_plan(&plan, &v, &mask, r, 11, None).unwrap(),
                execute_plan(&plan, &v, &mask, r, 12, None).unwrap(),
            )
        });
        assert_eq!(a.video, b.video);
        assert_ne!(a.video, c.video);
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let v = video(10);
        let mask = FrameMask::full(8, 8);
        with_runner(|r| {
            assert!(execute_plan(&plan_dense(12, 4).unwrap(), &v, &mask, r, 0, None).is_err());
            assert!(execute_plan(&plan_dense(10, 5).unwrap(), &v, &mask, r, 0, None).is_err());
            let mut bad = plan_dense(10, 4).unwrap();
            bad.calls[2].slots[0] = Slot::Guide(2);
            assert!(execute_plan(&bad, &v, &mask, r, 0, None).is_err());
        });
    }
}
