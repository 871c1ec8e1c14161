//! Deterministic synthetic videos used as a stand-in training corpus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::video::{FrameGeom, Video};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Motif {
    MovingSquare,
    MovingGradient,
    PanningTexture,
}

impl std::str::FromStr for Motif {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moving-square" | "square" => Ok(Motif::MovingSquare),
            "moving-gradient" | "gradient" => Ok(Motif::MovingGradient),
            "panning-texture" | "texture" => Ok(Motif::PanningTexture),
            other => Err(Error::InvalidArgument(format!("unknown motif {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub motif: Motif,
    pub frames: usize,
    pub geom: FrameGeom,
    pub fps: u32,
    /// Largest per-frame displacement in pixels; each video draws its own
    /// velocity in `1..=max_speed` per axis with a random sign.
    pub max_speed: u32,
    /// Square side (MovingSquare) or pattern amplitude scale.
    pub size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            motif: Motif::MovingSquare,
            frames: 32,
            geom: FrameGeom { h: 16, w: 16, c: 1 },
            fps: 30,
            max_speed: 1,
            size: 6,
            seed: 0,
        }
    }
}

/// Per-video motion drawn from the corpus seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Motion {
    pub start: (i64, i64),
    pub velocity: (i64, i64),
    pub background: f32,
    pub foreground: f32,
}

/// Reflects `p` into `[0, span]` (triangle wave), so motion bounces off the
/// frame borders.
pub fn bounce(p: i64, span: i64) -> i64 {
    if span <= 0 {
        return 0;
    }
    let period = 2 * span;
    let m = p.rem_euclid(period);
    if m <= span {
        m
    } else {
        period - m
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        let g = self.geom;
        if self.frames == 0 || g.h == 0 || g.w == 0 || !(g.c == 1 || g.c == 3) {
            return Err(Error::InvalidArgument(format!(
                "synthetic video needs frames > 0, H, W > 0 and C in {{1, 3}}: {self:?}"
            )));
        }
        if self.motif == Motif::MovingSquare && (self.size == 0 || self.size > g.h.min(g.w)) {
            return Err(Error::InvalidArgument(format!(
                "square size {} does not fit {}x{}",
                self.size, g.h, g.w
            )));
        }
        Ok(())
    }

    pub fn motion(&self, index: usize) -> Motion {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let g = self.geom;
        let speed = self.max_speed.max(1) as i64;
        let mut vel = || {
            let v = rng.random_range(1..=speed);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        };
        let velocity = (vel(), vel());
        let span_x = (g.w - self.size.min(g.w)) as i64;
        let span_y = (g.h - self.size.min(g.h)) as i64;
        let start = (rng.random_range(0..=span_x), rng.random_range(0..=span_y));
        let background = rng.random_range(0.05..0.35f32);
        let foreground = rng.random_range(0.65..0.95f32);
        Motion {
            start,
            velocity,
            background,
            foreground,
        }
    }

    /// Top-left corner of the square at frame `t` (MovingSquare).
    pub fn square_origin(&self, index: usize, t: usize) -> (usize, usize) {
        let m = self.motion(index);
        let g = self.geom;
        let span_x = (g.w - self.size) as i64;
        let span_y = (g.h - self.size) as i64;
        let x = bounce(m.start.0 + m.velocity.0 * t as i64, span_x);
        let y = bounce(m.start.1 + m.velocity.1 * t as i64, span_y);
        (x as usize, y as usize)
    }

    pub fn generate_one(&self, index: usize) -> Result<Video> {
        self.validate()?;
        let g = self.geom;
        let m = self.motion(index);
        let mut video = Video::zeros(g, self.fps, self.frames);
        for t in 0..self.frames {
            let frame = video.frame_mut(t);
            match self.motif {
                Motif::MovingSquare => {
                    let (sx, sy) = self.square_origin(index, t);
                    for y in 0..g.h {
                        for x in 0..g.w {
                            let inside = (sx..sx + self.size).contains(&x) && (sy..sy + self.size).contains(&y);
                            let v = if inside { m.foreground } else { m.background };
                            for c in 0..g.c {
                                // colour videos tint the square per channel
                                let tint = if g.c == 3 && inside { 1.0 - 0.2 * c as f32 } else { 1.0 };
                                frame[(y * g.w + x) * g.c + c] = v * tint;
                            }
                        }
                    }
                }
                Motif::MovingGradient => {
                    let phase = (m.start.0 + m.velocity.0 * t as i64) as f32;
                    for y in 0..g.h {
                        for x in 0..g.w {
                            let u = ((x as f32 + phase) / g.w as f32 * std::f32::consts::TAU).sin();
                            let v = 0.5 + 0.4 * u * (0.6 + 0.4 * y as f32 / g.h as f32);
                            for c in 0..g.c {
                                frame[(y * g.w + x) * g.c + c] = v;
                            }
                        }
                    }
                }
                Motif::PanningTexture => {
                    let (dx, dy) = (
                        (m.start.0 + m.velocity.0 * t as i64) as f32,
                        (m.start.1 + m.velocity.1 * t as i64) as f32,
                    );
                    for y in 0..g.h {
                        for x in 0..g.w {
                            let (u, v) = (x as f32 + dx, y as f32 + dy);
                            let tex = (u * 0.9).sin() * (v * 0.7).cos() + 0.5 * ((u + v) * 0.45).sin();
                            let val = (0.5 + 0.3 * tex).clamp(0.0, 1.0);
                            for c in 0..g.c {
                                frame[(y * g.w + x) * g.c + c] = val;
                            }
                        }
                    }
                }
            }
        }
        Ok(video)
    }

    pub fn generate(&self, count: usize) -> Result<Vec<Video>> {
        (0..count).map(|i| self.generate_one(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::{corpus_size, encode_corpus};

    #[test]
    fn square_moves_by_velocity() {
        let spec = SyntheticSpec::default();
        // find a video whose first step does not bounce
        for i in 0..16 {
            let m = spec.motion(i);
            let (x0, y0) = spec.square_origin(i, 0);
            let (x1, y1) = spec.square_origin(i, 1);
            let span = (spec.geom.w - spec.size) as i64;
            let nx = x0 as i64 + m.velocity.0;
            let ny = y0 as i64 + m.velocity.1;
            if (0..=span).contains(&nx) && (0..=span).contains(&ny) {
                assert_eq!((x1 as i64, y1 as i64), (nx, ny));
                let v = spec.generate_one(i).unwrap();
                assert_eq!(v.pixel(1, y1, x1, 0), m.foreground);
                return;
            }
        }
        panic!("no non-bouncing video in the first 16");
    }

    #[test]
    fn generation_is_deterministic_and_in_range() {
        for motif in [Motif::MovingSquare, Motif::MovingGradient, Motif::PanningTexture] {
            let spec = SyntheticSpec {
                motif,
                geom: FrameGeom { h: 8, w: 12, c: 3 },
                ..Default::default()
            };
            let a = encode_corpus(&spec.generate(3).unwrap());
            let b = encode_corpus(&spec.generate(3).unwrap());
            assert_eq!(a, b);
            for v in spec.generate(3).unwrap() {
                assert!(v.data().iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }
    }

    #[test]
    fn corpus_size_follows_header_arithmetic() {
        let spec = SyntheticSpec::default();
        let videos = spec.generate(64).unwrap();
        // 12-byte header, then 20 header bytes + 4 bytes per sample per video
        let want = 12 + 64 * (20 + 4 * 32 * 16 * 16);
        assert_eq!(corpus_size(&videos), want);
        assert_eq!(encode_corpus(&videos).len(), want);
    }

    #[test]
    fn bounce_reflects() {
        assert_eq!((0..12).map(|p| bounce(p, 4)).collect::<Vec<_>>(), [0, 1, 2, 3, 4, 3, 2, 1, 0, 1, 2, 3]);
        assert_eq!(bounce(-1, 4), 1);
    }
}
