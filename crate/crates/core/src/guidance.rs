//! Two-condition classifier-free guidance and single-clip outpainting.

use rand::Rng;

use crate::denoiser::{predict_noise, DenoiserBatch, DenoiserConfig};
use crate::error::{Error, Result};
use crate::mask::ClipConditioning;
use crate::params::ParamStore;
use crate::sampler::{sample, SamplerConfig};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceConfig {
    /// Context guidance scale.
    pub s1: f64,
    /// Global-prompt guidance scale.
    pub s2: f64,
    /// Training-time probability of nulling the global prompt.
    pub p2: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig { s1: 2.0, s2: 4.0, p2: 0.1 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s1 >= 0.0 && self.s2 >= 0.0 && self.s1.is_finite() && self.s2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "guidance scales must be finite and non-negative, got s1={} s2={}",
                self.s1, self.s2
            )));
        }
        if !(0.0..=1.0).contains(&self.p2) {
            return Err(Error::InvalidArgument(format!("p2 {} outside [0, 1]", self.p2)));
        }
        Ok(())
    }
}

/// `ε(∅,∅) + s1·(ε(c1,∅) − ε(∅,∅)) + s2·(ε(c1,c2) − ε(c1,∅))`, evaluated as
/// `(1 − s1)·ε(∅,∅) + (s1 − s2)·ε(c1,∅) + s2·ε(c1,c2)` in 64-bit so that
/// `(0, 0)` and `(1, 1)` reproduce an input exactly.
pub fn guided_epsilon<T: Scalar>(
    e_null: &Tensor<T>,
    e_ctx: &Tensor<T>,
    e_full: &Tensor<T>,
    cfg: &GuidanceConfig,
) -> Result<Tensor<T>> {
    if e_null.shape() != e_ctx.shape() || e_ctx.shape() != e_full.shape() {
        return Err(Error::shape(
            "guided_epsilon",
            format!("{:?}, {:?}, {:?}", e_null.shape(), e_ctx.shape(), e_full.shape()),
        ));
    }
    let (a, b, c) = (1.0 - cfg.s1, cfg.s1 - cfg.s2, cfg.s2);
    let data = e_null
        .data()
        .iter()
        .zip(e_ctx.data())
        .zip(e_full.data())
        .map(|((&n, &x), &f)| {
            T::from_f64_lossy(a * n.to_f64_lossy() + b * x.to_f64_lossy() + c * f.to_f64_lossy())
        })
        .collect();
    Tensor::new(e_null.shape().to_vec(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    /// Start from standard Gaussian noise.
    Pure,
    /// Border-fill the hidden region, then noise it to the last step.
    Warm,
}

impl std::str::FromStr for InitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pure" => Ok(InitMode::Pure),
            "warm" => Ok(InitMode::Warm),
            other => Err(Error::InvalidArgument(format!("unknown init mode {other:?}"))),
        }
    }
}

/// Pixel value in `[0, 1]` to model space `[-1, 1]`.
pub fn to_model<T: Scalar>(v: T) -> T {
    v + v - T::one()
}

/// Model space back to a clamped pixel value.
pub fn from_model<T: Scalar>(v: T) -> T {
    let half = T::from_f64_lossy(0.5);
    ((v + T::one()) * half).max(T::zero()).min(T::one())
}

/// Value used where a frame has no visible pixel at all.
pub const EMPTY_FILL: f64 = 0.5;

/// Replaces every hidden pixel of `context: [F, C, H, W]` by its nearest
/// visible pixel under `mask: [F, 1, H, W]`. Visible regions are
/// rectangles, so the nearest visible pixel is the clamped coordinate.
pub fn border_fill<T: Scalar>(context: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let s = context.shape();
    if s.len() != 4 || mask.shape() != [s[0], 1, s[2], s[3]] {
        return Err(Error::shape("border_fill", format!("context {s:?}, mask {:?}", mask.shape())));
    }
    let (f, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = context.clone();
    for i in 0..f {
        let m = &mask.data()[i * h * w..(i + 1) * h * w];
        let vis: Vec<usize> = (0..h * w).filter(|&p| m[p] > T::zero()).collect();
        let frame = &mut out.data_mut()[i * c * h * w..(i + 1) * c * h * w];
        if vis.is_empty() {
            frame.fill(T::from_f64_lossy(EMPTY_FILL));
            continue;
        }
        let (y0, y1) = (vis[0] / w, vis[vis.len() - 1] / w);
        let x0 = vis.iter().map(|p| p % w).min().unwrap();
        let x1 = vis.iter().map(|p| p % w).max().unwrap();
        for y in 0..h {
            for x in 0..w {
                if m[y * w + x] > T::zero() {
                    continue;
                }
                let src = y.clamp(y0, y1) * w + x.clamp(x0, x1);
                for ch in 0..c {
                    frame[ch * h * w + y * w + x] = frame[ch * h * w + src];
                }
            }
        }
    }
    Ok(out)
}

/// `z_T` for the warm start: the border-filled clip, mapped to model space
/// and noised to the last schedule step with `eps`.
pub fn warm_start<T: Scalar>(
    cond: &ClipConditioning<T>,
    schedule: &NoiseSchedule,
    eps: &Tensor<T>,
) -> Result<Tensor<T>> {
    let filled = border_fill(&cond.context, &cond.mask)?;
    schedule.forward_sample(&filled.map(to_model), schedule.steps(), eps)
}

/// Everything fixed across the clips of one outpainting run.
#[derive(Clone, Copy, Debug)]
pub struct ClipRunner<'a, T> {
    pub params: &'a ParamStore<T>,
    pub net: &'a DenoiserConfig,
    pub schedule: &'a NoiseSchedule,
    pub sampler: &'a SamplerConfig,
    pub guidance: &'a GuidanceConfig,
    pub init: InitMode,
}

/// Result of one clip: `[F, C, H, W]` pixels in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct ClipOutput<T> {
    pub frames: Tensor<T>,
    /// Denoiser clip evaluations spent (three per guided step).
    pub evaluations: usize,
}

impl<T: Scalar> ClipRunner<'_, T> {
    /// Guided ε̂ at step `t` for noisy state `z`. The three conditions run
    /// as one batch.
    pub fn epsilon(&self, z: &Tensor<T>, cond: &ClipConditioning<T>, t: usize) -> Result<Tensor<T>> {
        let null = cond.without_context().without_prompt();
        let ctx = cond.without_prompt();
        let batch = DenoiserBatch::from_clips(self.net, &[(z, &null, t), (z, &ctx, t), (z, cond, t)])?;
        let eps = predict_noise(self.params, self.net, &batch)?;
        guided_epsilon(&eps[0], &eps[1], &eps[2], self.guidance)
    }

    /// Runs the reverse chain for one clip and composites the result:
    /// pixels whose mask is 1 come from the conditioning unchanged.
    pub fn outpaint(&self, cond: &ClipConditioning<T>, rng: &mut impl Rng) -> Result<ClipOutput<T>> {
        self.guidance.validate()?;
        let shape = cond.context.shape().to_vec();
        let eps = Tensor::randn(shape, 1.0, rng);
        let z = match self.init {
            InitMode::Pure => eps,
            InitMode::Warm => warm_start(cond, self.schedule, &eps)?,
        };
        let mut evaluations = 0;
        let x0 = sample(self.schedule, self.sampler, z, |x, t| {
            evaluations += 3;
            self.epsilon(x, cond, t)
        })?;
        Ok(ClipOutput {
            frames: composite(cond, &x0)?,
            evaluations,
        })
    }
}

/// Keeps conditioning pixels where the mask is 1 and the clamped model
/// output elsewhere.
pub fn composite<T: Scalar>(cond: &ClipConditioning<T>, x0: &Tensor<T>) -> Result<Tensor<T>> {
    let s = cond.context.shape();
    if x0.shape() != s {
        return Err(Error::shape("composite", format!("{:?} vs {s:?}", x0.shape())));
    }
    let (c, plane) = (s[1], s[2] * s[3]);
    let mut out = x0.map(from_model);
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let (f, p) = (i / (c * plane), i % plane);
        if cond.mask.data()[f * plane + p] > T::zero() {
            *v = cond.context.data()[i];
        }
    }
    Ok(out)
}
