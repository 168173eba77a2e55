//! Image-quality metrics for erased images against their ground truth.
//!
//! Every metric works on 8-bit quantized values. PSNR, MSE and MSSIM use all
//! color channels; AGE, pEPs and pCEPs use an ITU-R 601 luma conversion.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::{is_image_file, Image};

pub const DEFAULT_ERROR_THRESHOLD: u8 = 20;

/// Canonical per-scale exponents of multi-scale SSIM.
pub const MSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const PEAK: f64 = 255.0;

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if a.height != b.height || a.width != b.width || a.channels != b.channels {
        return Err(Error::shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )));
    }
    Ok(())
}

/// Mean squared error of the 8-bit values, on the 0..255 scale.
pub fn mse_8bit(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let (qa, qb) = (a.to_u8(), b.to_u8());
    let sum: u64 = qa.iter().zip(&qb).map(|(&x, &y)| (x as i64 - y as i64).pow(2) as u64).sum();
    Ok(sum as f64 / qa.len() as f64)
}

/// Mean squared error on the [0, 1] scale.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    Ok(mse_8bit(a, b)? / (PEAK * PEAK))
}

pub fn psnr_from_mse_8bit(mse8: f64) -> f64 {
    if mse8 == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (PEAK * PEAK / mse8).log10()
    }
}

/// Peak signal-to-noise ratio in dB; `+inf` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse_8bit(mse_8bit(a, b)?))
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// A single-channel plane of f64 values.
#[derive(Clone, Debug)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn channel(img: &Image, c: usize) -> Plane {
        let q = img.to_u8();
        let v = (0..img.height * img.width).map(|i| q[i * img.channels + c] as f64).collect();
        Plane { h: img.height, w: img.width, v }
    }

    fn map2(&self, o: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane { h: self.h, w: self.w, v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect() }
    }

    /// Separable "valid" filtering.
    fn filter(&self, k: &[f64]) -> Plane {
        let n = k.len();
        let (ow, oh) = (self.w + 1 - n, self.h + 1 - n);
        let mut tmp = vec![0.0; self.h * ow];
        for y in 0..self.h {
            let row = &self.v[y * self.w..(y + 1) * self.w];
            for x in 0..ow {
                tmp[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
            }
        }
        Plane { h: oh, w: ow, v: out }
    }

    /// 2x2 average pooling; an odd trailing row/column is dropped.
    fn halve(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut v = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let at = |dy: usize, dx: usize| self.v[(2 * y + dy) * self.w + 2 * x + dx];
                v.push((at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0);
            }
        }
        Plane { h, w, v }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean luminance-contrast-structure term and mean contrast-structure term.
fn ssim_terms(a: &Plane, b: &Plane, k: &[f64]) -> (f64, f64) {
    let c1 = (K1 * PEAK).powi(2);
    let c2 = (K2 * PEAK).powi(2);
    let mu_a = a.filter(k);
    let mu_b = b.filter(k);
    let aa = a.map2(a, |x, y| x * y).filter(k);
    let bb = b.map2(b, |x, y| x * y).filter(k);
    let ab = a.map2(b, |x, y| x * y).filter(k);
    let n = mu_a.v.len();
    let mut ssim = Vec::with_capacity(n);
    let mut cs = Vec::with_capacity(n);
    for i in 0..n {
        let (ma, mb) = (mu_a.v[i], mu_b.v[i]);
        let va = aa.v[i] - ma * ma;
        let vb = bb.v[i] - mb * mb;
        let cov = ab.v[i] - ma * mb;
        let c = (2.0 * cov + c2) / (va + vb + c2);
        cs.push(c);
        ssim.push((2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1) * c);
    }
    (mean(&ssim), mean(&cs))
}

/// Number of scales usable for an image whose smaller side is `min_side`.
pub fn mssim_scales(min_side: usize) -> usize {
    let mut m = 0;
    let mut side = min_side;
    while m < MSSIM_WEIGHTS.len() && side >= SSIM_WINDOW {
        m += 1;
        side /= 2;
    }
    m
}

fn check_window(a: &Image) -> Result<()> {
    if a.height.min(a.width) < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "{}x{} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window",
            a.height, a.width
        )));
    }
    Ok(())
}

/// Single-scale SSIM, averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    check_window(a)?;
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let s: f64 = (0..a.channels).map(|c| ssim_terms(&Plane::channel(a, c), &Plane::channel(b, c), &k).0).sum();
    Ok(s / a.channels as f64)
}

/// Multi-scale SSIM, averaged over channels. Scales whose side would drop
/// below the window are skipped and the remaining exponents renormalized.
/// Negative per-scale terms are clamped to zero.
pub fn mssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    check_window(a)?;
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let m = mssim_scales(a.height.min(a.width));
    let total: f64 = MSSIM_WEIGHTS[..m].iter().sum();
    let mut acc = 0.0;
    for c in 0..a.channels {
        let mut pa = Plane::channel(a, c);
        let mut pb = Plane::channel(b, c);
        let mut v = 1.0;
        for (j, w) in MSSIM_WEIGHTS[..m].iter().enumerate() {
            let (s, cs) = ssim_terms(&pa, &pb, &k);
            let term = if j + 1 == m { s } else { cs };
            v *= term.max(0.0).powf(w / total);
            if j + 1 < m {
                pa = pa.halve();
                pb = pb.halve();
            }
        }
        acc += v;
    }
    Ok((acc / a.channels as f64).min(1.0))
}

/// ITU-R 601 luma, rounded to 8 bits.
pub fn to_gray_u8(img: &Image) -> Vec<u8> {
    let q = img.to_u8();
    match img.channels {
        1 => q,
        _ => q
            .chunks(img.channels)
            .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).round() as u8)
            .collect(),
    }
}

/// Gray-level error statistics: `(age, peps, pceps)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GrayErrors {
    pub age: f64,
    pub peps: f64,
    pub pceps: f64,
}

/// Error statistics from two gray planes of the same `h x w` size.
/// A pixel is an error when its absolute difference exceeds `threshold`; it
/// is clustered when its four neighbours are errors too, with out-of-image
/// neighbours replicating the border pixel.
pub fn gray_errors(a: &[u8], b: &[u8], h: usize, w: usize, threshold: u8) -> GrayErrors {
    let diff: Vec<u8> = a.iter().zip(b).map(|(&x, &y)| x.abs_diff(y)).collect();
    let err: Vec<bool> = diff.iter().map(|&d| d > threshold).collect();
    let at = |y: isize, x: isize| err[(y.clamp(0, h as isize - 1) as usize) * w + x.clamp(0, w as isize - 1) as usize];
    let mut clustered = 0usize;
    for y in 0..h as isize {
        for x in 0..w as isize {
            if at(y, x) && at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1) {
                clustered += 1;
            }
        }
    }
    let n = diff.len() as f64;
    GrayErrors {
        age: diff.iter().map(|&d| d as f64).sum::<f64>() / n,
        peps: err.iter().filter(|&&e| e).count() as f64 / n,
        pceps: clustered as f64 / n,
    }
}

pub fn age_peps_pceps(a: &Image, b: &Image, threshold: u8) -> Result<GrayErrors> {
    check_same(a, b)?;
    Ok(gray_errors(&to_gray_u8(a), &to_gray_u8(b), a.height, a.width, threshold))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr: f64,
    pub mssim: f64,
    pub mse: f64,
    pub age: f64,
    pub peps: f64,
    pub pceps: f64,
}

pub fn evaluate_pair(name: &str, pred: &Image, gt: &Image, threshold: u8) -> Result<ImageMetrics> {
    let mse8 = mse_8bit(pred, gt)?;
    let g = age_peps_pceps(pred, gt, threshold)?;
    Ok(ImageMetrics {
        name: name.to_string(),
        psnr: psnr_from_mse_8bit(mse8),
        mssim: mssim(pred, gt)?,
        mse: mse8 / (PEAK * PEAK),
        age: g.age,
        peps: g.peps,
        pceps: g.pceps,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricMeans {
    /// Mean over finite entries; `+inf` when every pair was identical.
    pub psnr: f64,
    pub mssim: f64,
    pub mse: f64,
    pub age: f64,
    pub peps: f64,
    pub pceps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    pub mean: MetricMeans,
    /// Pairs whose PSNR was infinite and therefore left out of its mean.
    pub psnr_excluded: usize,
}

impl MetricReport {
    pub fn from_images(images: Vec<ImageMetrics>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let n = images.len() as f64;
        let avg = |f: fn(&ImageMetrics) -> f64| images.iter().map(f).sum::<f64>() / n;
        let finite: Vec<f64> = images.iter().map(|m| m.psnr).filter(|p| p.is_finite()).collect();
        let psnr_excluded = images.len() - finite.len();
        if psnr_excluded > 0 {
            log::info!("{psnr_excluded} identical pair(s) excluded from the PSNR mean");
        }
        let psnr = if finite.is_empty() { f64::INFINITY } else { mean(&finite) };
        let mean = MetricMeans {
            psnr,
            mssim: avg(|m| m.mssim),
            mse: avg(|m| m.mse),
            age: avg(|m| m.age),
            peps: avg(|m| m.peps),
            pceps: avg(|m| m.pceps),
        };
        Ok(Self { images, mean, psnr_excluded })
    }

    /// One row per image followed by a `mean` row. MSE is on the [0, 1] scale.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,psnr,mssim,mse,age,peps,pceps\n");
        let row = |s: &mut String, name: &str, p: f64, ms: f64, m: f64, a: f64, e: f64, c: f64| {
            let _ = writeln!(s, "{name},{},{ms:.6},{m:.8},{a:.6},{e:.8},{c:.8}", fmt_psnr(p));
        };
        for m in &self.images {
            row(&mut s, &m.name, m.psnr, m.mssim, m.mse, m.age, m.peps, m.pceps);
        }
        let a = &self.mean;
        row(&mut s, "mean", a.psnr, a.mssim, a.mse, a.age, a.peps, a.pceps);
        s
    }

    /// Human-readable summary; MSSIM, MSE, pEPs and pCEPs in percent.
    pub fn summary(&self) -> String {
        let a = &self.mean;
        format!(
            "images: {}\nPSNR:  {} dB ({} identical pair(s) excluded)\nMSSIM: {:.4} %\nMSE:   {:.4} %\nAGE:   {:.4}\npEPs:  {:.4} %\npCEPs: {:.4} %\n",
            self.images.len(),
            fmt_psnr(a.psnr),
            self.psnr_excluded,
            a.mssim * 100.0,
            a.mse * 100.0,
            a.age,
            a.peps * 100.0,
            a.pceps * 100.0,
        )
    }
}

fn fmt_psnr(p: f64) -> String {
    if p.is_finite() {
        format!("{p:.4}")
    } else {
        "inf".into()
    }
}

/// Sorted image files directly inside `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_file() && is_image_file(&p) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Compares every image in `pred_dir` with the same-named file in `gt_dir`.
pub fn evaluate_corpus(pred_dir: &Path, gt_dir: &Path, threshold: u8) -> Result<MetricReport> {
    let mut images = Vec::new();
    for p in list_images(pred_dir)? {
        let name = p.file_name().expect("listed file").to_string_lossy().into_owned();
        let g = gt_dir.join(&name);
        if !g.is_file() {
            return Err(Error::MissingCounterpart(g));
        }
        let pred = Image::load(&p, false)?;
        let gt = Image::load(&g, false)?;
        images.push(evaluate_pair(&name, &pred, &gt, threshold)?);
    }
    MetricReport::from_images(images)
}
