//! In-memory videos and the `M3DV` corpus file format.
//!
//! ```text
//! "M3DV" | u32 version | u32 video_count
//!        | per video: u32 T | u32 H | u32 W | u32 C | u32 fps | T·H·W·C f32 (t, y, x, c order)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{encode_pnm, write_atomic};
use crate::params::Reader;

pub const CORPUS_MAGIC: &[u8; 4] = b"M3DV";
pub const CORPUS_VERSION: u32 = 1;

/// Spatial layout of one frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameGeom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl FrameGeom {
    pub fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `T` frames of interleaved `H × W × C` pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub geom: FrameGeom,
    pub fps: u32,
    frames: usize,
    data: Vec<f32>,
}

impl Video {
    pub fn new(geom: FrameGeom, fps: u32, frames: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || geom.is_empty() || data.len() != frames * geom.len() {
            return Err(Error::InvalidArgument(format!(
                "video {frames}x{}x{}x{} needs {} values, got {}",
                geom.h,
                geom.w,
                geom.c,
                frames * geom.len(),
                data.len()
            )));
        }
        Ok(Video {
            geom,
            fps,
            frames,
            data,
        })
    }

    pub fn from_frames(geom: FrameGeom, fps: u32, frames: Vec<Vec<f32>>) -> Result<Self> {
        let n = frames.len();
        Self::new(geom, fps, n, frames.concat())
    }

    pub fn zeros(geom: FrameGeom, fps: u32, frames: usize) -> Self {
        Video {
            geom,
            fps,
            frames,
            data: vec![0.0; frames * geom.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.frames
    }

    pub fn is_empty(&self) -> bool {
        self.frames == 0
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.geom.len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        let n = self.geom.len();
        &mut self.data[t * n..(t + 1) * n]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        let g = self.geom;
        self.data[((t * g.h + y) * g.w + x) * g.c + c]
    }

    /// One PGM (C = 1) or PPM (C = 3) image per frame.
    pub fn frame_pnm(&self, t: usize) -> Result<Vec<u8>> {
        encode_pnm(self.frame(t), self.geom.h, self.geom.w, self.geom.c)
    }
}

pub fn encode_corpus(videos: &[Video]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CORPUS_MAGIC);
    out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
    out.extend_from_slice(&(videos.len() as u32).to_le_bytes());
    for v in videos {
        for d in [v.frames, v.geom.h, v.geom.w, v.geom.c] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&v.fps.to_le_bytes());
        for x in &v.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode_corpus(bytes: &[u8]) -> Result<Vec<Video>> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != CORPUS_MAGIC {
        return Err(Error::Format("not an M3DV corpus".into()));
    }
    let version = r.u32()?;
    if version != CORPUS_VERSION {
        return Err(Error::Format(format!("unsupported corpus version {version}")));
    }
    let count = r.u32()?;
    let mut videos = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let (t, h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let fps = r.u32()?;
        let n = t
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .and_then(|v| v.checked_mul(c))
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::Format("video dimensions overflow".into()))?;
        let data = r
            .take(n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        videos.push(Video::new(FrameGeom { h, w, c }, fps, t, data)?);
    }
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after corpus".into()));
    }
    Ok(videos)
}

pub fn write_corpus(path: &Path, videos: &[Video]) -> Result<()> {
    write_atomic(path, &encode_corpus(videos))
}

pub fn read_corpus(path: &Path) -> Result<Vec<Video>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_corpus(&bytes)
}

/// Byte size of an encoded corpus.
pub fn corpus_size(videos: &[Video]) -> usize {
    12 + videos.iter().map(|v| 20 + 4 * v.data.len()).sum::<usize>()
}
