//! Tiny pseudo-3D UNet noise predictor and the global-prompt encoder.
//!
//! Activations are laid out `[clips·frames, channels, H, W]`. Every block is
//! a spatial 3×3 conv followed by a width-3 temporal conv, with the timestep
//! and frame-rate embedding broadcast-added per clip. The mid block runs
//! temporal self-attention and then cross-attention over the prompt tokens.

use std::fmt::Write as _;

use rand::Rng;

use crate::autodiff::{sinusoidal_embedding, Graph, Var};
use crate::error::{Error, Result};
use crate::mask::ClipConditioning;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    /// Frames per clip.
    pub frames: usize,
    /// Spatial size `H = W`.
    pub size: usize,
    /// Image channels `C`.
    pub channels: usize,
    /// Feature width per UNet level; each level after the first halves the
    /// resolution.
    pub widths: Vec<usize>,
    /// Attention token width.
    pub token_dim: usize,
    /// Global prompt frames.
    pub global_frames: usize,
    pub norm_groups: usize,
    /// Width of the sinusoidal tables for timestep and fps.
    pub sin_dim: usize,
    /// Width of the shared embedding fed to every block.
    pub emb_dim: usize,
    /// Zero-initialize the output convolution.
    pub zero_out: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            frames: 16,
            size: 16,
            channels: 1,
            widths: vec![16, 32],
            token_dim: 32,
            global_frames: 16,
            norm_groups: 4,
            sin_dim: 32,
            emb_dim: 64,
            zero_out: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.frames < 2 {
            return bad(format!("frames must be >= 2, got {}", self.frames));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad(format!("widths must be positive, got {:?}", self.widths));
        }
        if [self.channels, self.token_dim, self.global_frames, self.emb_dim].contains(&0) {
            return bad("channels, token_dim, global_frames and emb_dim must be positive".into());
        }
        if self.sin_dim < 2 || !self.sin_dim.is_multiple_of(2) {
            return bad(format!("sin_dim must be even, got {}", self.sin_dim));
        }
        let div = 1 << (self.widths.len() - 1);
        if self.size == 0 || !self.size.is_multiple_of(div) || !self.size.is_multiple_of(4) {
            return bad(format!("size {} must be divisible by {} and 4", self.size, div.max(4)));
        }
        if self.norm_groups == 0 || self.widths.iter().any(|w| w % self.norm_groups != 0) {
            return bad(format!("widths {:?} not divisible into {} groups", self.widths, self.norm_groups));
        }
        Ok(())
    }

    /// Prompt tokens per global frame after two stride-2 convolutions.
    pub fn tokens_per_frame(&self) -> usize {
        (self.size / 4) * (self.size / 4)
    }

    pub fn prompt_tokens(&self) -> usize {
        self.global_frames * self.tokens_per_frame()
    }

    fn input_channels(&self) -> usize {
        2 * self.channels + 1
    }

    /// Flat `key=value` lines, one per field.
    pub fn to_header(&self) -> String {
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        let mut s = String::new();
        let _ = writeln!(s, "frames={}", self.frames);
        let _ = writeln!(s, "size={}", self.size);
        let _ = writeln!(s, "channels={}", self.channels);
        let _ = writeln!(s, "widths={}", widths.join(","));
        let _ = writeln!(s, "token_dim={}", self.token_dim);
        let _ = writeln!(s, "global_frames={}", self.global_frames);
        let _ = writeln!(s, "norm_groups={}", self.norm_groups);
        let _ = writeln!(s, "sin_dim={}", self.sin_dim);
        let _ = writeln!(s, "emb_dim={}", self.emb_dim);
        let _ = writeln!(s, "zero_out={}", self.zero_out);
        s
    }

    /// Reads the fields written by [`DenoiserConfig::to_header`]; unknown
    /// keys are ignored so headers can carry extra run metadata.
    pub fn from_header(header: &str) -> Result<Self> {
        let mut cfg = DenoiserConfig::default();
        let num = |k: &str, v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Format(format!("header field {k}: bad value {v:?}")))
        };
        for line in header.lines().filter(|l| !l.trim().is_empty()) {
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Format(format!("header line without '=': {line:?}")));
            };
            match k {
                "frames" => cfg.frames = num(k, v)?,
                "size" => cfg.size = num(k, v)?,
                "channels" => cfg.channels = num(k, v)?,
                "widths" => {
                    cfg.widths = v.split(',').map(|w| num(k, w)).collect::<Result<_>>()?;
                }
                "token_dim" => cfg.token_dim = num(k, v)?,
                "global_frames" => cfg.global_frames = num(k, v)?,
                "norm_groups" => cfg.norm_groups = num(k, v)?,
                "sin_dim" => cfg.sin_dim = num(k, v)?,
                "emb_dim" => cfg.emb_dim = num(k, v)?,
                "zero_out" => cfg.zero_out = v == "true",
                _ => {}
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

struct Init<'a, T, R> {
    store: ParamStore<T>,
    rng: &'a mut R,
}

impl<T: Scalar, R: Rng> Init<'_, T, R> {
    fn normal(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> Result<()> {
        let t = Tensor::randn(shape, (1.0 / fan_in as f64).sqrt(), self.rng);
        self.store.insert(name, t)
    }

    fn zeros(&mut self, name: String, shape: Vec<usize>) -> Result<()> {
        self.store.insert(name, Tensor::zeros(shape))
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
        self.normal(format!("{name}.w"), vec![cout, cin, k, k], cin * k * k)?;
        self.zeros(format!("{name}.b"), vec![cout])
    }

    fn tconv(&mut self, name: &str, c: usize) -> Result<()> {
        self.normal(format!("{name}.w"), vec![c, c, 3], 3 * c)?;
        self.zeros(format!("{name}.b"), vec![c])
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Result<()> {
        self.normal(format!("{name}.w"), vec![din, dout], din)?;
        self.zeros(format!("{name}.b"), vec![dout])
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<()> {
        self.store.insert(format!("{name}.gamma"), Tensor::full([c], T::one()))?;
        self.zeros(format!("{name}.beta"), vec![c])
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, emb: usize) -> Result<()> {
        self.norm(&format!("{name}.norm1"), cin)?;
        self.conv(&format!("{name}.conv"), cin, cout, 3)?;
        self.tconv(&format!("{name}.tconv"), cout)?;
        self.linear(&format!("{name}.emb"), emb, cout)?;
        self.norm(&format!("{name}.norm2"), cout)?;
        if cin != cout {
            self.conv(&format!("{name}.skip"), cin, cout, 1)?;
        }
        Ok(())
    }

    fn attention(&mut self, name: &str, c: usize, kv_dim: usize, d: usize) -> Result<()> {
        self.norm(&format!("{name}.norm"), c)?;
        // no bias on the projections: a key bias cancels in the softmax
        self.normal(format!("{name}.q.w"), vec![c, d], c)?;
        self.normal(format!("{name}.k.w"), vec![kv_dim, d], kv_dim)?;
        self.normal(format!("{name}.v.w"), vec![kv_dim, d], kv_dim)?;
        self.linear(&format!("{name}.o"), d, c)
    }
}

/// Draws a fresh parameter set for `cfg`.
pub fn init_params<T: Scalar>(cfg: &DenoiserConfig, rng: &mut impl Rng) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut init = Init { store: ParamStore::new(), rng };
    let (e, d, w) = (cfg.emb_dim, cfg.token_dim, &cfg.widths);
    init.linear("emb.t", cfg.sin_dim, e)?;
    init.linear("emb.fps", cfg.sin_dim, e)?;
    let mid = (d / 2).max(1);
    init.conv("prompt.conv1", cfg.channels + 1, mid, 3)?;
    init.conv("prompt.conv2", mid, d, 3)?;
    init.conv("conv_in", cfg.input_channels(), w[0], 3)?;
    for i in 0..w.len() {
        if i > 0 {
            init.conv(&format!("down{i}"), w[i - 1], w[i], 3)?;
        }
        init.block(&format!("enc{i}"), w[i], w[i], e)?;
    }
    let top = *w.last().unwrap();
    init.attention("mid.tattn", top, top, d)?;
    init.attention("mid.xattn", top, d, d)?;
    init.block("mid.block", top, top, e)?;
    for i in (0..w.len()).rev() {
        init.block(&format!("dec{i}"), 2 * w[i], w[i], e)?;
        if i > 0 {
            init.conv(&format!("up{i}"), w[i], w[i - 1], 3)?;
        }
    }
    init.norm("out.norm", w[0])?;
    if cfg.zero_out {
        init.zeros("out.conv.w".into(), vec![cfg.channels, w[0], 3, 3])?;
        init.zeros("out.conv.b".into(), vec![cfg.channels])?;
    } else {
        init.conv("out.conv", w[0], cfg.channels, 3)?;
    }
    Ok(init.store)
}

/// Graph builder over a bound parameter store.
struct Net<'a, T: Scalar> {
    g: &'a mut Graph<T>,
    p: &'a ParamStore<T>,
    cfg: &'a DenoiserConfig,
}

impl<T: Scalar> Net<'_, T> {
    fn param(&mut self, name: String) -> Result<Var> {
        self.g.param(self.p, &name)
    }

    fn conv(&mut self, name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = self.param(format!("{name}.w"))?;
        let b = self.param(format!("{name}.b"))?;
        self.g.conv2d(x, w, Some(b), stride)
    }

    fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.param(format!("{name}.w"))?;
        let b = self.param(format!("{name}.b"))?;
        self.g.linear(x, w, Some(b))
    }

    fn project(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.param(format!("{name}.w"))?;
        self.g.matmul(x, w)
    }

    fn norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.param(format!("{name}.gamma"))?;
        let beta = self.param(format!("{name}.beta"))?;
        self.g.group_norm(x, gamma, beta, self.cfg.norm_groups)
    }

    fn norm_silu(&mut self, name: &str, x: Var) -> Result<Var> {
        let h = self.norm(name, x)?;
        self.g.silu(h)
    }

    fn block(&mut self, name: &str, x: Var, emb: Var) -> Result<Var> {
        let h = self.norm_silu(&format!("{name}.norm1"), x)?;
        let h = self.conv(&format!("{name}.conv"), h, 1)?;
        let tw = self.param(format!("{name}.tconv.w"))?;
        let tb = self.param(format!("{name}.tconv.b"))?;
        let h = self.g.temporal_conv(h, tw, Some(tb), self.cfg.frames)?;
        let e = self.linear(&format!("{name}.emb"), emb)?;
        let h = self.g.add_channel(h, e)?;
        let h = self.norm_silu(&format!("{name}.norm2"), h)?;
        let skip = if self.p.get(&format!("{name}.skip.w")).is_some() {
            self.conv(&format!("{name}.skip"), x, 1)?
        } else {
            x
        };
        self.g.add(h, skip)
    }

    /// `[B·F, C, h, w]` to `[B, F, h, w, C]` flattened to rows of `C`.
    fn rows_of(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.g.shape(x).to_vec();
        let f = self.cfg.frames;
        let x5 = self.g.reshape(x, &[s[0] / f, f, s[1], s[2], s[3]])?;
        let p = self.g.permute(x5, perm)?;
        let rows = s.iter().product::<usize>() / s[1];
        self.g.reshape(p, &[rows, s[1]])
    }

    /// Inverse of [`Net::rows_of`] given the permuted 5D shape and the
    /// inverse permutation.
    fn unrows(&mut self, rows: Var, permuted: &[usize], inv: &[usize], like: &[usize]) -> Result<Var> {
        let x5 = self.g.reshape(rows, permuted)?;
        let p = self.g.permute(x5, inv)?;
        self.g.reshape(p, like)
    }

    /// Self-attention across the frames of each clip, per pixel.
    fn temporal_attention(&mut self, x: Var) -> Result<Var> {
        let s = self.g.shape(x).to_vec();
        let (f, c, hw) = (self.cfg.frames, s[1], s[2] * s[3]);
        let b = s[0] / f;
        let d = self.cfg.token_dim;
        let h = self.norm("mid.tattn.norm", x)?;
        // [B, F, C, h, w] -> [B, h, w, F, C]
        let rows = self.rows_of(h, &[0, 3, 4, 1, 2])?;
        let q = self.project("mid.tattn.q", rows)?;
        let k = self.project("mid.tattn.k", rows)?;
        let v = self.project("mid.tattn.v", rows)?;
        let seq = [b * hw, f, d];
        let (q, k, v) = (self.g.reshape(q, &seq)?, self.g.reshape(k, &seq)?, self.g.reshape(v, &seq)?);
        let a = self.g.attention(q, k, v)?;
        let a = self.g.reshape(a, &[b * hw * f, d])?;
        let o = self.linear("mid.tattn.o", a)?;
        let o = self.unrows(o, &[b, s[2], s[3], f, c], &[0, 3, 4, 1, 2], &s)?;
        self.g.add(x, o)
    }

    /// Cross-attention from every clip position to that clip's prompt tokens.
    fn cross_attention(&mut self, x: Var, tokens: Var) -> Result<Var> {
        let s = self.g.shape(x).to_vec();
        let ts = self.g.shape(tokens).to_vec();
        let (f, c) = (self.cfg.frames, s[1]);
        let b = s[0] / f;
        let d = self.cfg.token_dim;
        let h = self.norm("mid.xattn.norm", x)?;
        // [B, F, C, h, w] -> [B, F, h, w, C]
        let rows = self.rows_of(h, &[0, 1, 3, 4, 2])?;
        let q = self.project("mid.xattn.q", rows)?;
        let q = self.g.reshape(q, &[b, f * s[2] * s[3], d])?;
        let trows = self.g.reshape(tokens, &[ts[0] * ts[1], ts[2]])?;
        let k = self.project("mid.xattn.k", trows)?;
        let v = self.project("mid.xattn.v", trows)?;
        let (k, v) = (self.g.reshape(k, &ts)?, self.g.reshape(v, &[ts[0], ts[1], d])?);
        let a = self.g.attention(q, k, v)?;
        let a = self.g.reshape(a, &[b * f * s[2] * s[3], d])?;
        let o = self.linear("mid.xattn.o", a)?;
        let o = self.unrows(o, &[b, f, s[2], s[3], c], &[0, 1, 4, 2, 3], &s)?;
        self.g.add(x, o)
    }

    fn embedding(&mut self, t: &[usize], fps: &[u32]) -> Result<Var> {
        let table = |g: &mut Graph<T>, pos: Vec<f64>, dim: usize| -> Result<Var> {
            let mut data = Vec::with_capacity(pos.len() * dim);
            for p in &pos {
                data.extend_from_slice(sinusoidal_embedding::<T>(*p, dim).data());
            }
            Ok(g.input(Tensor::new([pos.len(), dim], data)?))
        };
        let dim = self.cfg.sin_dim;
        let st = table(self.g, t.iter().map(|&v| v as f64).collect(), dim)?;
        let sf = table(self.g, fps.iter().map(|&v| v as f64).collect(), dim)?;
        let et = self.linear("emb.t", st)?;
        let ef = self.linear("emb.fps", sf)?;
        let e = self.g.add(et, ef)?;
        self.g.silu(e)
    }

    fn prompt(&mut self, global: Var, clips: usize) -> Result<Var> {
        let h = self.conv("prompt.conv1", global, 2)?;
        let h = self.g.silu(h)?;
        let h = self.conv("prompt.conv2", h, 2)?;
        let s = self.g.shape(h).to_vec();
        let per = s[0] / clips;
        let h = self.g.reshape(h, &[clips, per, s[1], s[2] * s[3]])?;
        let h = self.g.permute(h, &[0, 1, 3, 2])?;
        self.g.reshape(h, &[clips, per * s[2] * s[3], s[1]])
    }

    fn unet(&mut self, x: Var, emb: Var, tokens: Var) -> Result<Var> {
        let levels = self.cfg.widths.len();
        let mut h = self.conv("conv_in", x, 1)?;
        let mut skips = Vec::with_capacity(levels);
        for i in 0..levels {
            if i > 0 {
                h = self.conv(&format!("down{i}"), h, 2)?;
            }
            h = self.block(&format!("enc{i}"), h, emb)?;
            skips.push(h);
        }
        h = self.temporal_attention(h)?;
        h = self.cross_attention(h, tokens)?;
        h = self.block("mid.block", h, emb)?;
        for i in (0..levels).rev() {
            h = self.g.concat_channels(h, skips[i])?;
            h = self.block(&format!("dec{i}"), h, emb)?;
            if i > 0 {
                h = self.g.upsample2x(h)?;
                h = self.conv(&format!("up{i}"), h, 1)?;
            }
        }
        let h = self.norm_silu("out.norm", h)?;
        self.conv("out.conv", h, 1)
    }
}

/// One batch of clips ready for the network.
#[derive(Clone, Debug)]
pub struct DenoiserBatch<T> {
    /// `[B·F, 2C + 1, H, W]`.
    pub x: Tensor<T>,
    /// `[B·g, C + 1, H, W]`.
    pub global: Tensor<T>,
    /// Diffusion step per clip.
    pub t: Vec<usize>,
    /// Frame-rate condition per clip.
    pub fps: Vec<u32>,
}

impl<T: Scalar> DenoiserBatch<T> {
    /// Stacks `(noisy, conditioning, t)` triples into one batch.
    pub fn from_clips(cfg: &DenoiserConfig, clips: &[(&Tensor<T>, &ClipConditioning<T>, usize)]) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::InvalidArgument("empty denoiser batch".into()));
        }
        let mut x = Vec::new();
        let mut global = Vec::new();
        for (noisy, cond, _) in clips {
            if cond.frames() != cfg.frames || cond.global.shape()[0] != cfg.global_frames {
                return Err(Error::shape(
                    "denoiser batch",
                    format!(
                        "clip has {} frames and {} global frames, config wants {} and {}",
                        cond.frames(),
                        cond.global.shape()[0],
                        cfg.frames,
                        cfg.global_frames
                    ),
                ));
            }
            x.extend_from_slice(cond.model_input(noisy)?.data());
            global.extend_from_slice(cond.global.data());
        }
        let (b, s, c) = (clips.len(), cfg.size, cfg.channels);
        Ok(DenoiserBatch {
            x: Tensor::new([b * cfg.frames, 2 * c + 1, s, s], x)?,
            global: Tensor::new([b * cfg.global_frames, c + 1, s, s], global)?,
            t: clips.iter().map(|c| c.2).collect(),
            fps: clips.iter().map(|c| c.1.fps).collect(),
        })
    }

    pub fn clips(&self) -> usize {
        self.t.len()
    }
}

fn check_batch<T: Scalar>(cfg: &DenoiserConfig, b: &DenoiserBatch<T>) -> Result<()> {
    let n = b.clips();
    let (s, c) = (cfg.size, cfg.channels);
    let want_x = [n * cfg.frames, 2 * c + 1, s, s];
    let want_g = [n * cfg.global_frames, c + 1, s, s];
    if n == 0 || b.fps.len() != n || b.x.shape() != want_x || b.global.shape() != want_g {
        return Err(Error::shape(
            "predict_noise",
            format!(
                "x {:?} (want {want_x:?}), global {:?} (want {want_g:?}), {} steps, {} fps",
                b.x.shape(),
                b.global.shape(),
                n,
                b.fps.len()
            ),
        ));
    }
    Ok(())
}

/// Prompt tokens `[B, g·(H/4)·(W/4), d]` for masked global frames
/// `[B·g, C + 1, H, W]`.
pub fn encode_prompt<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    cfg: &DenoiserConfig,
    global: Var,
) -> Result<Var> {
    let s = g.shape(global).to_vec();
    if s.len() != 4 || !s[0].is_multiple_of(cfg.global_frames) || s[1] != cfg.channels + 1 || s[2] != cfg.size || s[3] != cfg.size {
        return Err(Error::shape("encode_prompt", format!("global {s:?} for g = {}", cfg.global_frames)));
    }
    let clips = s[0] / cfg.global_frames;
    Net { g, p: params, cfg }.prompt(global, clips)
}

/// Builds the full network on `g` and returns ε̂ as `[B·F, C, H, W]`.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    cfg: &DenoiserConfig,
    batch: &DenoiserBatch<T>,
) -> Result<Var> {
    check_batch(cfg, batch)?;
    let x = g.input(batch.x.clone());
    let global = g.input(batch.global.clone());
    let tokens = encode_prompt(g, params, cfg, global)?;
    let mut net = Net { g, p: params, cfg };
    let emb = net.embedding(&batch.t, &batch.fps)?;
    net.unet(x, emb, tokens)
}

/// Inference-only ε̂ for a batch, split back into one `[F, C, H, W]` tensor
/// per clip.
pub fn predict_noise<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &DenoiserConfig,
    batch: &DenoiserBatch<T>,
) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::inference();
    let out = forward(&mut g, params, cfg, batch)?;
    let per = cfg.frames * cfg.channels * cfg.size * cfg.size;
    g.value(out)
        .data()
        .chunks(per)
        .map(|c| Tensor::new([cfg.frames, cfg.channels, cfg.size, cfg.size], c.to_vec()))
        .collect()
}

#[cfg(test)]
mod tests;
