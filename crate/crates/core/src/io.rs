//! File helpers: atomic writes, binary PGM/PPM, and a small CSV writer.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_sibling(path);
    let res = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    res.map_err(|e| Error::io(path, e))
}

fn temp_sibling(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp"))
}

/// Quantizes `[0, 1]` values to 8 bits.
fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PGM (`channels == 1`) or PPM (`channels == 3`) from interleaved
/// `h × w × channels` pixels in `[0, 1]`.
pub fn encode_pnm(pixels: &[f32], h: usize, w: usize, channels: usize) -> Result<Vec<u8>> {
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::InvalidArgument(format!("PNM needs 1 or 3 channels, got {c}"))),
    };
    if pixels.len() != h * w * channels {
        return Err(Error::InvalidArgument(format!(
            "PNM: {} pixels for {h}x{w}x{channels}",
            pixels.len()
        )));
    }
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&v| quantize(v)));
    Ok(out)
}

/// Parses a binary PGM/PPM with maxval 255. Returns `(pixels, h, w, channels)`.
pub fn decode_pnm(bytes: &[u8]) -> Result<(Vec<f32>, usize, usize, usize)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PNM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Format(format!("unsupported PNM magic {m}"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PNM field {s:?}")));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Format(format!("PNM maxval {maxval} unsupported")));
    }
    let n = w * h * channels;
    let body = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::Format("truncated PNM body".into()))?;
    Ok((body.iter().map(|&b| b as f32 / 255.0).collect(), h, w, channels))
}

/// CSV text with a fixed header row.
#[derive(Clone, Debug)]
pub struct Csv {
    buf: String,
    columns: usize,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Csv {
            buf: format!("{}\n", header.join(",")),
            columns: header.len(),
        }
    }

    pub fn row(&mut self, fields: &[String]) {
        assert_eq!(fields.len(), self.columns, "CSV row width");
        self.buf.push_str(&fields.join(","));
        self.buf.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.buf
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.buf.as_bytes())
    }
}
