//! Reconstruction metrics on `[0, 1]` videos: MSE, PSNR, SSIM and a
//! frame-to-frame jitter ratio.

use crate::error::{Error, Result};
use crate::io::Csv;
use crate::mask::FrameMask;
use crate::video::Video;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    FullFrame,
    HiddenOnly,
}

impl Region {
    pub fn name(self) -> &'static str {
        match self {
            Region::FullFrame => "full-frame",
            Region::HiddenOnly => "hidden-only",
        }
    }
}

/// Metrics over one region. Fields are `None` when the region is empty or
/// the statistic is undefined.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub region: Region,
    pub mse: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub jitter_ratio: Option<f64>,
}

pub const METRICS_HEADER: [&str; 5] = ["region", "mse", "psnr", "ssim", "jitter_ratio"];

/// PSNR in dB for unit dynamic range; infinite for identical inputs.
pub fn psnr(mse: f64) -> f64 {
    if mse > 0.0 {
        -10.0 * mse.log10()
    } else {
        f64::INFINITY
    }
}

pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64
}

/// Summed-area table with a zero first row and column.
fn integral(v: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += v[y * w + x];
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

fn box_sum(s: &[f64], w: usize, y: usize, x: usize, k: usize) -> f64 {
    let w1 = w + 1;
    s[(y + k) * w1 + x + k] - s[y * w1 + x + k] - s[(y + k) * w1 + x] + s[y * w1 + x]
}

/// SSIM map of one channel plane over all fully contained `k × k` windows
/// (`k = min(11, h, w)`), indexed by window origin.
pub fn ssim_map(a: &[f32], b: &[f32], h: usize, w: usize) -> (usize, Vec<f64>) {
    let k = SSIM_WINDOW.min(h).min(w);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let fa: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let fb: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let sq = |u: &[f64], v: &[f64]| -> Vec<f64> { u.iter().zip(v).map(|(x, y)| x * y).collect() };
    let (sa, sb) = (integral(&fa, h, w), integral(&fb, h, w));
    let (saa, sbb, sab) = (
        integral(&sq(&fa, &fa), h, w),
        integral(&sq(&fb, &fb), h, w),
        integral(&sq(&fa, &fb), h, w),
    );
    let n = (k * k) as f64;
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            let ma = box_sum(&sa, w, y, x, k) / n;
            let mb = box_sum(&sb, w, y, x, k) / n;
            let va = box_sum(&saa, w, y, x, k) / n - ma * ma;
            let vb = box_sum(&sbb, w, y, x, k) / n - mb * mb;
            let cov = box_sum(&sab, w, y, x, k) / n - ma * mb;
            out.push(((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)));
        }
    }
    (k, out)
}

fn check_aligned(pred: &Video, truth: &Video, mask: &FrameMask) -> Result<()> {
    if pred.geom != truth.geom || pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "prediction {}x{:?} does not match ground truth {}x{:?}",
            pred.len(),
            pred.geom,
            truth.len(),
            truth.geom
        )));
    }
    if mask.h != truth.geom.h || mask.w != truth.geom.w {
        return Err(Error::InvalidArgument(format!(
            "mask {}x{} does not match frames {}x{}",
            mask.h, mask.w, truth.geom.h, truth.geom.w
        )));
    }
    Ok(())
}

/// Mean squared difference over the selected pixels of two frames.
fn region_mse(a: &[f32], b: &[f32], sel: &[bool], c: usize) -> Option<f64> {
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (p, &s) in sel.iter().enumerate() {
        if s {
            for ch in 0..c {
                sum += ((a[p * c + ch] - b[p * c + ch]) as f64).powi(2);
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

fn frame_jitter(v: &Video, sel: &[bool]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let mut acc = 0.0;
    for t in 0..v.len() - 1 {
        acc += region_mse(v.frame(t), v.frame(t + 1), sel, v.geom.c)?;
    }
    Some(acc / (v.len() - 1) as f64)
}

/// Frame-to-frame MSE of `pred` over the region divided by the same
/// statistic of `truth`. Static ground truth gives 1 for a static
/// prediction and `None` otherwise.
pub fn jitter_ratio(pred: &Video, truth: &Video, sel: &[bool]) -> Option<f64> {
    let (p, t) = (frame_jitter(pred, sel)?, frame_jitter(truth, sel)?);
    if t > 0.0 {
        Some(p / t)
    } else if p == 0.0 {
        Some(1.0)
    } else {
        None
    }
}

/// Per-frame, per-channel SSIM; each window is weighted by how many of its
/// pixels lie in the region.
fn region_ssim(pred: &Video, truth: &Video, sel: &[bool]) -> Option<f64> {
    let g = pred.geom;
    let plane = g.h * g.w;
    let flags: Vec<f64> = sel.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect();
    let weights = integral(&flags, g.h, g.w);
    let mut acc = 0.0;
    let mut count = 0usize;
    let (mut pa, mut pb) = (vec![0.0f32; plane], vec![0.0f32; plane]);
    for t in 0..pred.len() {
        for ch in 0..g.c {
            for p in 0..plane {
                pa[p] = pred.frame(t)[p * g.c + ch];
                pb[p] = truth.frame(t)[p * g.c + ch];
            }
            let (k, map) = ssim_map(&pa, &pb, g.h, g.w);
            let ow = g.w - k + 1;
            let (mut s, mut n) = (0.0, 0.0);
            for (i, v) in map.iter().enumerate() {
                let w = box_sum(&weights, g.w, i / ow, i % ow, k);
                s += w * v;
                n += w;
            }
            if n > 0.0 {
                acc += s / n;
                count += 1;
            }
        }
    }
    (count > 0).then(|| acc / count as f64)
}

fn record(pred: &Video, truth: &Video, sel: &[bool], region: Region) -> MetricsRecord {
    let mut sum = 0.0;
    let mut frames = 0usize;
    for t in 0..pred.len() {
        if let Some(m) = region_mse(pred.frame(t), truth.frame(t), sel, pred.geom.c) {
            sum += m;
            frames += 1;
        }
    }
    let mse = (frames > 0).then(|| sum / frames as f64);
    MetricsRecord {
        region,
        mse,
        psnr: mse.map(psnr),
        ssim: region_ssim(pred, truth, sel),
        jitter_ratio: jitter_ratio(pred, truth, sel),
    }
}

/// Full-frame and hidden-only metrics of `pred` against `truth`.
pub fn evaluate(pred: &Video, truth: &Video, mask: &FrameMask) -> Result<[MetricsRecord; 2]> {
    check_aligned(pred, truth, mask)?;
    let all = vec![true; mask.h * mask.w];
    let hidden: Vec<bool> = mask.flags().into_iter().map(|v| !v).collect();
    Ok([
        record(pred, truth, &all, Region::FullFrame),
        record(pred, truth, &hidden, Region::HiddenOnly),
    ])
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        None => String::new(),
        Some(x) if x.is_infinite() => "inf".into(),
        Some(x) => format!("{x:.8}"),
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> Csv {
    let mut csv = Csv::new(&METRICS_HEADER);
    for r in records {
        csv.row(&[
            r.region.name().to_string(),
            fmt_opt(r.mse),
            fmt_opt(r.psnr),
            fmt_opt(r.ssim),
            fmt_opt(r.jitter_ratio),
        ]);
    }
    csv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{MaskSpec, Side};
    use crate::synth::SyntheticSpec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Straight per-window SSIM from the textbook definition, one window at
    /// a time with explicit loops.
    fn ssim_direct(a: &[f32], b: &[f32], h: usize, w: usize) -> f64 {
        let k = 11.min(h).min(w);
        let n = (k * k) as f64;
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let mut total = 0.0;
        let mut windows = 0;
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let px = |v: &[f32], y: usize, x: usize| v[(y0 + y) * w + x0 + x] as f64;
                let (mut ma, mut mb) = (0.0, 0.0);
                for y in 0..k {
                    for x in 0..k {
                        ma += px(a, y, x);
                        mb += px(b, y, x);
                    }
                }
                ma /= n;
                mb /= n;
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in 0..k {
                    for x in 0..k {
                        let (da, db) = (px(a, y, x) - ma, px(b, y, x) - mb);
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                }
                va /= n;
                vb /= n;
                cov /= n;
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                windows += 1;
            }
        }
        total / windows as f64
    }

    fn noise(seed: u64, n: usize) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random::<f32>()).collect()
    }

    fn clip() -> Video {
        SyntheticSpec { frames: 6, ..SyntheticSpec::default() }.generate_one(2).unwrap()
    }

    #[test]
    fn psnr_at_one_percent() {
        assert!((psnr(0.01) - 20.0).abs() < 1e-12);
        assert_eq!(psnr(0.0), f64::INFINITY);
    }

    #[test]
    fn ssim_matches_direct_formula() {
        let a = noise(1, 256);
        let b: Vec<f32> = a.iter().zip(noise(2, 256)).map(|(x, n)| (0.7 * x + 0.3 * n).clamp(0.0, 1.0)).collect();
        let (_, map) = ssim_map(&a, &b, 16, 16);
        let fast = map.iter().sum::<f64>() / map.len() as f64;
        assert!((fast - ssim_direct(&a, &b, 16, 16)).abs() < 1e-6);
        assert_eq!(map.len(), 36);
    }

    #[test]
    fn identity_metrics() {
        let v = clip();
        let mask = MaskSpec::single(Side::Right, 0.5).realize(16, 16);
        let [full, hidden] = evaluate(&v, &v, &mask).unwrap();
        for r in [&full, &hidden] {
            assert_eq!(r.mse, Some(0.0));
            assert_eq!(r.psnr, Some(f64::INFINITY));
            assert!((r.ssim.unwrap() - 1.0).abs() < 1e-12);
            assert_eq!(r.jitter_ratio, Some(1.0));
        }
    }

    #[test]
    fn empty_hidden_region_is_absent() {
        let v = clip();
        let [full, hidden] = evaluate(&v, &v, &FrameMask::full(16, 16)).unwrap();
        assert!(full.mse.is_some());
        assert_eq!(hidden.mse, None);
        assert_eq!(hidden.psnr, None);
        assert_eq!(hidden.ssim, None);
        assert_eq!(hidden.jitter_ratio, None);
        let csv = metrics_csv(&[full, hidden]);
        assert_eq!(csv.as_str().lines().next().unwrap(), "region,mse,psnr,ssim,jitter_ratio");
        assert_eq!(csv.as_str().lines().nth(2).unwrap(), "hidden-only,,,,");
    }

    #[test]
    fn hidden_ssim_weights_windows_by_hidden_pixels() {
        let v = clip();
        let mut p = v.clone();
        // damage one visible column only: windows touching it are down-weighted
        let mask = MaskSpec::single(Side::Right, 0.25).realize(16, 16);
        for t in 0..p.len() {
            p.frame_mut(t)[0] = 1.0 - p.frame(t)[0];
        }
        let [full, hidden] = evaluate(&p, &v, &mask).unwrap();
        assert!(hidden.ssim.unwrap() > full.ssim.unwrap());
        assert_eq!(hidden.mse, Some(0.0));
        let tiny = SyntheticSpec { frames: 3, geom: crate::video::FrameGeom { h: 8, w: 8, c: 1 }, ..SyntheticSpec::default() }
            .generate_one(0)
            .unwrap();
        let [_, h] = evaluate(&tiny, &tiny, &MaskSpec::four(0.25).realize(8, 8)).unwrap();
        assert!((h.ssim.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jitter_of_frozen_prediction_is_zero() {
        let v = clip();
        let frozen = Video::from_frames(v.geom, v.fps, vec![v.frame(0).to_vec(); v.len()]).unwrap();
        let all = vec![true; 256];
        assert_eq!(jitter_ratio(&frozen, &v, &all), Some(0.0));
    }

    #[test]
    fn rejects_misaligned() {
        let v = clip();
        let short = SyntheticSpec { frames: 5, ..SyntheticSpec::default() }.generate_one(2).unwrap();
        assert!(evaluate(&v, &short, &FrameMask::full(16, 16)).is_err());
        assert!(evaluate(&v, &v, &FrameMask::full(8, 8)).is_err());
    }

    proptest! {
        #[test]
        fn ssim_symmetric_and_bounded(s1 in 0u64..1000, s2 in 0u64..1000) {
            let (a, b) = (noise(s1, 144), noise(s2, 144));
            let (_, ab) = ssim_map(&a, &b, 12, 12);
            let (_, ba) = ssim_map(&b, &a, 12, 12);
            for (x, y) in ab.iter().zip(&ba) {
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!((-1.0..=1.0 + 1e-12).contains(x));
            }
            let (_, aa) = ssim_map(&a, &a, 12, 12);
            prop_assert!(aa.iter().all(|v| (v - 1.0).abs() < 1e-9));
        }

        #[test]
        fn psnr_tracks_mse(s1 in 0u64..1000, s2 in 0u64..1000) {
            let (a, b) = (noise(s1, 64), noise(s2, 64));
            let m = mse(&a, &b);
            if s1 == s2 {
                prop_assert_eq!(psnr(m), f64::INFINITY);
            } else {
                prop_assert!((psnr(m) + 10.0 * m.log10()).abs() < 1e-12);
            }
        }
    }
}
