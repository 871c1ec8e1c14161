//! Outpainting masks, guide-frame roles and per-clip conditioning assembly.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::video::FrameGeom;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    FourDir,
    SingleDir,
    BiDir,
    RandomDirCount,
    All,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::FourDir,
        Strategy::SingleDir,
        Strategy::BiDir,
        Strategy::RandomDirCount,
        Strategy::All,
    ];

    /// Training-time sampling proportions, in [`Strategy::ALL`] order.
    pub const PROPORTIONS: [f64; 5] = [0.2, 0.1, 0.35, 0.1, 0.25];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
    Top,
    Bottom,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Left, Side::Right, Side::Top, Side::Bottom];
}

/// Which frame edges are removed, and by how much.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSpec {
    pub strategy: Strategy,
    /// Fraction of each masked axis that is hidden, split evenly between
    /// the axis' active sides.
    pub ratio: f64,
    pub sides: [bool; 4],
}

pub const MIN_RATIO: f64 = 0.15;
pub const MAX_RATIO: f64 = 0.75;

fn side_flags(sides: &[Side]) -> [bool; 4] {
    let mut f = [false; 4];
    for s in sides {
        f[*s as usize] = true;
    }
    f
}

impl MaskSpec {
    pub fn single(side: Side, ratio: f64) -> Self {
        MaskSpec {
            strategy: Strategy::SingleDir,
            ratio,
            sides: side_flags(&[side]),
        }
    }

    pub fn four(ratio: f64) -> Self {
        MaskSpec {
            strategy: Strategy::FourDir,
            ratio,
            sides: [true; 4],
        }
    }

    /// Left-right (`horizontal == true`) or top-down removal.
    pub fn bi(horizontal: bool, ratio: f64) -> Self {
        let sides = if horizontal {
            [Side::Left, Side::Right]
        } else {
            [Side::Top, Side::Bottom]
        };
        MaskSpec {
            strategy: Strategy::BiDir,
            ratio,
            sides: side_flags(&sides),
        }
    }

    pub fn sides_of(sides: &[Side], ratio: f64) -> Self {
        MaskSpec {
            strategy: Strategy::RandomDirCount,
            ratio,
            sides: side_flags(sides),
        }
    }

    pub fn all() -> Self {
        MaskSpec {
            strategy: Strategy::All,
            ratio: 1.0,
            sides: [true; 4],
        }
    }

    pub fn has(&self, side: Side) -> bool {
        self.sides[side as usize]
    }

    /// Hidden pixel counts along one axis of length `len`: the first side
    /// (left/top) takes the odd remainder.
    fn axis_split(&self, len: usize, first: Side, second: Side) -> (usize, usize) {
        let hidden = ((self.ratio * len as f64).round() as usize).min(len);
        match (self.has(first), self.has(second)) {
            (true, true) => (hidden - hidden / 2, hidden / 2),
            (true, false) => (hidden, 0),
            (false, true) => (0, hidden),
            (false, false) => (0, 0),
        }
    }

    pub fn realize(&self, h: usize, w: usize) -> FrameMask {
        if self.strategy == Strategy::All {
            return FrameMask { h, w, rect: None };
        }
        let (left, right) = self.axis_split(w, Side::Left, Side::Right);
        let (top, bottom) = self.axis_split(h, Side::Top, Side::Bottom);
        let rect = (left + right < w && top + bottom < h).then_some(Rect {
            x0: left,
            x1: w - right,
            y0: top,
            y1: h - bottom,
        });
        FrameMask { h, w, rect }
    }
}

/// Half-open visible rectangle `[y0, y1) × [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

/// Realized per-frame mask: `true` means visible context.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameMask {
    pub h: usize,
    pub w: usize,
    pub rect: Option<Rect>,
}

impl FrameMask {
    pub fn full(h: usize, w: usize) -> Self {
        FrameMask {
            h,
            w,
            rect: Some(Rect { x0: 0, x1: w, y0: 0, y1: h }),
        }
    }

    pub fn is_visible(&self, y: usize, x: usize) -> bool {
        self.rect
            .is_some_and(|r| (r.y0..r.y1).contains(&y) && (r.x0..r.x1).contains(&x))
    }

    pub fn visible_count(&self) -> usize {
        self.rect.map_or(0, |r| (r.y1 - r.y0) * (r.x1 - r.x0))
    }

    pub fn hidden_count(&self) -> usize {
        self.h * self.w - self.visible_count()
    }

    /// Row-major visibility flags.
    pub fn flags(&self) -> Vec<bool> {
        (0..self.h * self.w)
            .map(|i| self.is_visible(i / self.w, i % self.w))
            .collect()
    }

    /// Copies `frame` (interleaved `H×W×C`) and replaces every hidden pixel
    /// by its nearest visible pixel. With nothing visible the frame is
    /// filled with `fallback`.
    pub fn border_fill(&self, frame: &[f32], c: usize, fallback: f32) -> Vec<f32> {
        let Some(r) = self.rect else {
            return vec![fallback; frame.len()];
        };
        let mut out = frame.to_vec();
        for y in 0..self.h {
            for x in 0..self.w {
                if self.is_visible(y, x) {
                    continue;
                }
                let (sy, sx) = (y.clamp(r.y0, r.y1 - 1), x.clamp(r.x0, r.x1 - 1));
                for ch in 0..c {
                    out[(y * self.w + x) * c + ch] = frame[(sy * self.w + sx) * c + ch];
                }
            }
        }
        out
    }

    /// Binary PGM of the mask (255 = visible).
    pub fn to_pgm(&self) -> Vec<u8> {
        let px: Vec<f32> = self.flags().iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        crate::io::encode_pnm(&px, self.h, self.w, 1).expect("mask dimensions are consistent")
    }

    /// Rebuilds a rectangular mask from a PGM (nonzero = visible).
    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let (px, h, w, c) = crate::io::decode_pnm(bytes)?;
        if c != 1 {
            return Err(Error::Format("mask image must be a PGM".into()));
        }
        let vis: Vec<usize> = (0..h * w).filter(|&i| px[i] > 0.5).collect();
        if vis.is_empty() {
            return Ok(FrameMask { h, w, rect: None });
        }
        let ys = vis.iter().map(|i| i / w);
        let xs = vis.iter().map(|i| i % w);
        let rect = Rect {
            y0: ys.clone().min().unwrap(),
            y1: ys.max().unwrap() + 1,
            x0: xs.clone().min().unwrap(),
            x1: xs.max().unwrap() + 1,
        };
        let m = FrameMask { h, w, rect: Some(rect) };
        if m.visible_count() != vis.len() {
            return Err(Error::Format("mask visible region is not a rectangle".into()));
        }
        Ok(m)
    }
}

fn pick_weighted<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Draws a training mask: strategy by [`Strategy::PROPORTIONS`] and a ratio
/// uniform on `[0.15, 0.75]`.
pub fn sample_mask_strategy<R: Rng + ?Sized>(rng: &mut R) -> MaskSpec {
    let strategy = Strategy::ALL[pick_weighted(rng, &Strategy::PROPORTIONS)];
    let ratio = rng.random_range(MIN_RATIO..=MAX_RATIO);
    match strategy {
        Strategy::FourDir => MaskSpec::four(ratio),
        Strategy::SingleDir => MaskSpec::single(Side::ALL[rng.random_range(0..4)], ratio),
        Strategy::BiDir => MaskSpec::bi(rng.random_bool(0.5), ratio),
        Strategy::RandomDirCount => {
            let k = rng.random_range(1..=4);
            let mut sides = Side::ALL.to_vec();
            // partial Fisher-Yates: first k entries are a uniform k-subset
            for i in 0..k {
                let j = rng.random_range(i..4);
                sides.swap(i, j);
            }
            MaskSpec::sides_of(&sides[..k], ratio)
        }
        Strategy::All => MaskSpec::all(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameRole {
    ContextOnly,
    /// Fully visible raw (or previously generated) frame.
    GuideRaw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuideCase {
    /// Every frame gets context only.
    ContextOnly,
    /// First frame, or first and last frames, are guides.
    Endpoints,
    /// Each frame is independently a guide.
    Random,
}

pub const GUIDE_CASE_PROPORTIONS: [f64; 3] = [0.3, 0.35, 0.35];
pub const GUIDE_FRAME_PROB: f64 = 0.5;

pub fn sample_guide_case<R: Rng + ?Sized>(rng: &mut R, frames: usize) -> Result<(GuideCase, Vec<FrameRole>)> {
    if frames < 2 {
        return Err(Error::InvalidArgument(format!("guide cases need F >= 2, got {frames}")));
    }
    let mut roles = vec![FrameRole::ContextOnly; frames];
    let case = match pick_weighted(rng, &GUIDE_CASE_PROPORTIONS) {
        0 => GuideCase::ContextOnly,
        1 => {
            roles[0] = FrameRole::GuideRaw;
            if rng.random_bool(0.5) {
                roles[frames - 1] = FrameRole::GuideRaw;
            }
            GuideCase::Endpoints
        }
        _ => {
            for r in roles.iter_mut() {
                if rng.random_bool(GUIDE_FRAME_PROB) {
                    *r = FrameRole::GuideRaw;
                }
            }
            GuideCase::Random
        }
    };
    Ok((case, roles))
}

/// Conditioning for one clip of `F` frames, in channel-planar layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipConditioning<T> {
    /// `[F, C, H, W]`: visible pixels, zero elsewhere.
    pub context: Tensor<T>,
    /// `[F, 1, H, W]`: 1 where `context` is valid.
    pub mask: Tensor<T>,
    /// `[g, C + 1, H, W]`: masked global frames followed by their mask.
    pub global: Tensor<T>,
    pub fps: u32,
}

impl<T: Scalar> ClipConditioning<T> {
    pub fn frames(&self) -> usize {
        self.context.shape()[0]
    }

    /// Copy with context and mask channels zeroed (c₁ = ∅).
    pub fn without_context(&self) -> Self {
        ClipConditioning {
            context: Tensor::zeros(self.context.shape().to_vec()),
            mask: Tensor::zeros(self.mask.shape().to_vec()),
            global: self.global.clone(),
            fps: self.fps,
        }
    }

    /// Copy with the global prompt zeroed (c₂ = ∅).
    pub fn without_prompt(&self) -> Self {
        ClipConditioning {
            global: Tensor::zeros(self.global.shape().to_vec()),
            ..self.clone()
        }
    }

    /// `[F, 2C + 1, H, W]`: `[noisy | context | mask]` per frame.
    pub fn model_input(&self, noisy: &Tensor<T>) -> Result<Tensor<T>> {
        let cs = self.context.shape();
        if noisy.shape() != cs {
            return Err(Error::shape(
                "model_input",
                format!("noisy {:?} vs context {cs:?}", noisy.shape()),
            ));
        }
        let (f, c, plane) = (cs[0], cs[1], cs[2] * cs[3]);
        let mut data = Vec::with_capacity(f * (2 * c + 1) * plane);
        for i in 0..f {
            data.extend_from_slice(&noisy.data()[i * c * plane..(i + 1) * c * plane]);
            data.extend_from_slice(&self.context.data()[i * c * plane..(i + 1) * c * plane]);
            data.extend_from_slice(&self.mask.data()[i * plane..(i + 1) * plane]);
        }
        Tensor::new([f, 2 * c + 1, cs[2], cs[3]], data)
    }

    pub fn cast<U: Scalar>(&self) -> ClipConditioning<U> {
        ClipConditioning {
            context: self.context.cast(),
            mask: self.mask.cast(),
            global: self.global.cast(),
            fps: self.fps,
        }
    }
}

/// Interleaved frames stacked as a planar `[F, C, H, W]` tensor.
pub fn planar_clip<T: Scalar>(frames: &[&[f32]], geom: FrameGeom) -> Result<Tensor<T>> {
    let all = vec![true; geom.h * geom.w];
    let mut out = Vec::with_capacity(frames.len() * geom.len());
    for f in frames {
        if f.len() != geom.len() {
            return Err(Error::shape("planar_clip", format!("frame of {} values, expected {}", f.len(), geom.len())));
        }
        planar_masked(f, geom, &all, &mut out);
    }
    Tensor::new([frames.len(), geom.c, geom.h, geom.w], out)
}

/// Interleaved `H×W×C` frame to planar `C×H×W`, zeroing pixels where
/// `visible` is false.
fn planar_masked<T: Scalar>(frame: &[f32], geom: FrameGeom, visible: &[bool], out: &mut Vec<T>) {
    for c in 0..geom.c {
        for p in 0..geom.h * geom.w {
            let v = if visible[p] { frame[p * geom.c + c] } else { 0.0 };
            out.push(T::from_f64_lossy(v as f64));
        }
    }
}

/// Builds the conditioning for one clip. ContextOnly frames keep only the
/// pixels `mask` marks visible; GuideRaw frames contribute the whole frame
/// with an all-ones mask. Global frames always use `mask`, never guides.
pub fn assemble_conditioning<T: Scalar>(
    geom: FrameGeom,
    frames: &[&[f32]],
    roles: &[FrameRole],
    mask: &FrameMask,
    global: &[&[f32]],
    fps: u32,
) -> Result<ClipConditioning<T>> {
    if frames.len() != roles.len() || frames.is_empty() || global.is_empty() {
        return Err(Error::shape(
            "assemble_conditioning",
            format!("{} frames, {} roles, {} global frames", frames.len(), roles.len(), global.len()),
        ));
    }
    if mask.h != geom.h || mask.w != geom.w {
        return Err(Error::shape(
            "assemble_conditioning",
            format!("mask {}x{} for frames {}x{}", mask.h, mask.w, geom.h, geom.w),
        ));
    }
    if let Some(bad) = frames.iter().chain(global).find(|f| f.len() != geom.len()) {
        return Err(Error::shape(
            "assemble_conditioning",
            format!("frame of {} values, expected {}", bad.len(), geom.len()),
        ));
    }
    let plane = geom.h * geom.w;
    let vis = mask.flags();
    let all = vec![true; plane];
    let (f, g) = (frames.len(), global.len());
    let mut context = Vec::with_capacity(f * geom.c * plane);
    let mut mask_ch = Vec::with_capacity(f * plane);
    for (frame, role) in frames.iter().zip(roles) {
        let v = match role {
            FrameRole::GuideRaw => &all,
            FrameRole::ContextOnly => &vis,
        };
        planar_masked(frame, geom, v, &mut context);
        mask_ch.extend(v.iter().map(|&b| if b { T::one() } else { T::zero() }));
    }
    let mut glob = Vec::with_capacity(g * (geom.c + 1) * plane);
    for frame in global {
        planar_masked(frame, geom, &vis, &mut glob);
        glob.extend(vis.iter().map(|&b| if b { T::one() } else { T::zero() }));
    }
    Ok(ClipConditioning {
        context: Tensor::new([f, geom.c, geom.h, geom.w], context)?,
        mask: Tensor::new([f, 1, geom.h, geom.w], mask_ch)?,
        global: Tensor::new([g, geom.c + 1, geom.h, geom.w], glob)?,
        fps,
    })
}

/// `g` indices spread uniformly over a video of `len` frames.
pub fn global_frame_indices(len: usize, g: usize) -> Vec<usize> {
    if g <= 1 || len <= 1 {
        return vec![0; g.max(1)];
    }
    (0..g).map(|i| (i * (len - 1) + (g - 1) / 2) / (g - 1)).collect()
}
