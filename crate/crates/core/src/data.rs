//! Training samples: a procedural paired-sample generator and loaders for
//! paired and box-annotated image directories.
//!
//! Paired layout: `root/image/NAME` (with text), `root/label/NAME` (text
//! erased), `root/mask/NAME` (text boxes, white = text). Pretraining layout:
//! `root/image/NAME` plus `root/annotation/STEM.txt` with one polygon per line.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::list_images;
use crate::segmim::{parse_annotation, rasterize, Polygon};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    /// Image with text, 3 channels.
    pub input: Image,
    /// Text-free ground truth, 3 channels.
    pub gt: Image,
    /// Binary text-box mask, 1 channel.
    pub mask: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSample {
    pub input: Image,
    /// Binary text-box mask, 1 channel.
    pub seg: Image,
}

impl TrainSample {
    pub fn size(&self) -> (usize, usize) {
        (self.input.height, self.input.width)
    }

    /// The same image with its box mask as segmentation target.
    pub fn to_pretrain(&self) -> PretrainSample {
        PretrainSample { input: self.input.clone(), seg: self.mask.clone() }
    }
}

/// Seed of sample `index` in a corpus generated from `seed`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.gen()
}

fn rgb(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn lerp(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Smooth background: a linear color gradient, a few low-frequency
/// sinusoidal ripples and some flat rectangles and discs.
fn background(rng: &mut ChaCha8Rng, size: usize) -> Image {
    let s = size as f32;
    let (c0, c1) = (rgb(rng), rgb(rng));
    let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let ripples: Vec<(f32, f32, f32, f32)> = (0..rng.gen_range(1..=3))
        .map(|_| {
            let f = rng.gen_range(0.5..2.5) * std::f32::consts::TAU / s;
            let a: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
            (f * a.cos(), f * a.sin(), rng.gen_range(0.0..std::f32::consts::TAU), rng.gen_range(0.02..0.08))
        })
        .collect();
    let mut img = Image::from_fn(size, size, 3, |y, x, c| {
        let (u, v) = (x as f32 - s / 2.0, y as f32 - s / 2.0);
        let t = ((u * dx + v * dy) / s + 0.5).clamp(0.0, 1.0);
        let ripple: f32 = ripples.iter().map(|&(fx, fy, ph, amp)| amp * (fx * u + fy * v + ph).sin()).sum();
        lerp(c0, c1, t)[c] + ripple
    });
    for _ in 0..rng.gen_range(0..=3) {
        let col = rgb(rng);
        let alpha: f32 = rng.gen_range(0.2..0.6);
        let cx = rng.gen_range(0.0..s);
        let cy = rng.gen_range(0.0..s);
        let r = rng.gen_range(s / 8.0..s / 3.0);
        let disc = rng.gen_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                let inside = if disc { fx * fx + fy * fy < r * r } else { fx.abs() < r && fy.abs() < r * 0.6 };
                if inside {
                    for c in 0..3 {
                        let v = img.get(y, x, c);
                        img.set(y, x, c, v + (col[c] - v) * alpha);
                    }
                }
            }
        }
    }
    img.quantize()
}

/// Draws one glyph of random strokes into `ink` within the cell at
/// `(x0, y0)` of size `w x h`.
fn glyph(rng: &mut ChaCha8Rng, ink: &mut [bool], size: usize, x0: usize, y0: usize, w: usize, h: usize, thick: usize) {
    let strokes = rng.gen_range(2..=4);
    for _ in 0..strokes {
        let (ax, ay, bx, by) = match rng.gen_range(0..4) {
            0 => {
                let y = rng.gen_range(0..h);
                (0, y, w - 1, y)
            }
            1 => {
                let x = rng.gen_range(0..w);
                (x, 0, x, h - 1)
            }
            2 => (0, 0, w - 1, h - 1),
            _ => (w - 1, 0, 0, h - 1),
        };
        let steps = w.max(h) * 2;
        for i in 0..=steps {
            let t = i as f32 / steps as f32;
            let px = (ax as f32 + (bx as f32 - ax as f32) * t).round() as usize;
            let py = (ay as f32 + (by as f32 - ay as f32) * t).round() as usize;
            for oy in 0..thick {
                for ox in 0..thick {
                    let (x, y) = (x0 + (px + ox).min(w - 1), y0 + (py + oy).min(h - 1));
                    if x < size && y < size {
                        ink[y * size + x] = true;
                    }
                }
            }
        }
    }
}

/// Deterministic paired sample of `size x size` pixels: a smooth background
/// as ground truth, 1 to 5 runs of stroke glyphs painted over it as input,
/// and the tight bounding box of every run as mask. Input and ground truth
/// agree exactly outside the mask.
pub fn synth_sample(seed: u64, size: usize) -> Result<TrainSample> {
    if size == 0 || size % 32 != 0 {
        return Err(Error::arg(format!("synthetic sample size {size} must be a positive multiple of 32")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = background(&mut rng, size);
    let mut input = gt.clone();
    let mut mask = Image::new(size, size, 1);
    let runs = rng.gen_range(1..=5);
    for _ in 0..runs {
        let gh = rng.gen_range((size / 10).max(5)..=(size / 5).max(6));
        let gw = (gh * 3 / 5).max(3);
        let gap = (gh / 6).max(1);
        let max_glyphs = ((size - 2) / (gw + gap)).clamp(1, 6);
        let n = rng.gen_range(1..=max_glyphs.min(6));
        let run_w = n * (gw + gap) - gap;
        let x0 = rng.gen_range(0..=size - run_w);
        let y0 = rng.gen_range(0..=size - gh);
        let thick = (gh / 6).max(1);
        let mut ink = vec![false; size * size];
        for g in 0..n {
            glyph(&mut rng, &mut ink, size, x0 + g * (gw + gap), y0, gw, gh, thick);
        }
        // Ink contrasts with the mean color under the run.
        let mut mean = [0f32; 3];
        let mut count = 0f32;
        for y in y0..y0 + gh {
            for x in x0..x0 + run_w {
                for (c, m) in mean.iter_mut().enumerate() {
                    *m += gt.get(y, x, c);
                }
                count += 1.0;
            }
        }
        let luma = (0.299 * mean[0] + 0.587 * mean[1] + 0.114 * mean[2]) / count;
        let base = if luma > 0.5 { rng.gen_range(0.0..0.25) } else { rng.gen_range(0.75..1.0) };
        let tint = rgb(&mut rng);
        let color: [f32; 3] = std::array::from_fn(|c| (base + (tint[c] - 0.5) * 0.3f32).clamp(0.0, 1.0));
        let (mut bx0, mut by0, mut bx1, mut by1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..size {
            for x in 0..size {
                if ink[y * size + x] {
                    for (c, &v) in color.iter().enumerate() {
                        input.set(y, x, c, v);
                    }
                    bx0 = bx0.min(x);
                    by0 = by0.min(y);
                    bx1 = bx1.max(x);
                    by1 = by1.max(y);
                }
            }
        }
        for y in by0..=by1 {
            for x in bx0..=bx1 {
                mask.set(y, x, 0, 1.0);
            }
        }
    }
    Ok(TrainSample { input: input.quantize(), gt, mask })
}

/// Covers the mask exactly with axis-aligned boxes (greedy row-major
/// rectangles), written as 4-point polygons.
pub fn mask_boxes(mask: &Image) -> Vec<Polygon> {
    let (h, w) = (mask.height, mask.width);
    let on = |y: usize, x: usize| mask.get(y, x, 0) >= 0.5;
    let mut used = vec![false; h * w];
    let mut out = Vec::new();
    for y0 in 0..h {
        for x0 in 0..w {
            if used[y0 * w + x0] || !on(y0, x0) {
                continue;
            }
            let mut x1 = x0;
            while x1 + 1 < w && on(y0, x1 + 1) && !used[y0 * w + x1 + 1] {
                x1 += 1;
            }
            let mut y1 = y0;
            while y1 + 1 < h && (x0..=x1).all(|x| on(y1 + 1, x) && !used[(y1 + 1) * w + x]) {
                y1 += 1;
            }
            for y in y0..=y1 {
                for x in x0..=x1 {
                    used[y * w + x] = true;
                }
            }
            out.push(Polygon::from_box(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64));
        }
    }
    out
}

fn format_polygon(p: &Polygon) -> String {
    p.0.iter().map(|(x, y)| format!("{x},{y}")).collect::<Vec<_>>().join(",")
}

/// Writes `n` synthetic samples in the paired layout plus box annotations
/// for pretraining. Returns the file names written.
pub fn write_corpus(root: &Path, n: usize, size: usize, seed: u64) -> Result<Vec<String>> {
    for sub in ["image", "label", "mask", "annotation"] {
        std::fs::create_dir_all(root.join(sub))?;
    }
    let mut names = Vec::with_capacity(n);
    for i in 0..n {
        let s = synth_sample(sample_seed(seed, i as u64), size)?;
        let name = format!("{i:05}.png");
        s.input.save_png(&root.join("image").join(&name))?;
        s.gt.save_png(&root.join("label").join(&name))?;
        s.mask.save_png(&root.join("mask").join(&name))?;
        let ann: Vec<String> = mask_boxes(&s.mask).iter().map(format_polygon).collect();
        std::fs::write(root.join("annotation").join(format!("{i:05}.txt")), ann.join("\n") + "\n")?;
        names.push(name);
    }
    Ok(names)
}

/// Indexed, lazily loaded sample collection.
pub trait Dataset<T> {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<T>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T: Clone> Dataset<T> for Vec<T> {
    fn len(&self) -> usize {
        <[T]>::len(self)
    }
    fn get(&self, index: usize) -> Result<T> {
        self.as_slice().get(index).cloned().ok_or_else(|| Error::arg(format!("sample index {index} out of range")))
    }
}

/// Visiting order for one epoch: a seeded permutation of `0..n`.
pub fn shuffled_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

fn binarize(mut m: Image) -> Image {
    m.data.iter_mut().for_each(|v| *v = if *v >= 0.5 { 1.0 } else { 0.0 });
    m
}

fn image_names(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    Ok(list_images(dir)?
        .into_iter()
        .map(|p| p.file_name().expect("listed file").to_string_lossy().into_owned())
        .collect())
}

/// Paired `image/label/mask` directory, in file-name order.
#[derive(Clone, Debug)]
pub struct PairedDir {
    root: PathBuf,
    names: Vec<String>,
}

impl PairedDir {
    pub fn open(root: &Path) -> Result<Self> {
        let names = image_names(&root.join("image"))?;
        for name in &names {
            for sub in ["label", "mask"] {
                let p = root.join(sub).join(name);
                if !p.is_file() {
                    return Err(Error::MissingCounterpart(p));
                }
            }
        }
        Ok(Self { root: root.to_path_buf(), names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

impl Dataset<TrainSample> for PairedDir {
    fn len(&self) -> usize {
        self.names.len()
    }

    fn get(&self, index: usize) -> Result<TrainSample> {
        let name = self.names.as_slice().get(index).ok_or_else(|| Error::arg(format!("sample index {index} out of range")))?;
        let input = Image::load(&self.root.join("image").join(name), false)?;
        let gt = Image::load(&self.root.join("label").join(name), false)?;
        let mask = binarize(Image::load(&self.root.join("mask").join(name), true)?);
        if !input.same_size(&gt) || !input.same_size(&mask) {
            return Err(Error::shape(format!("`{name}`: image, label and mask sizes differ")));
        }
        Ok(TrainSample { input, gt, mask })
    }
}

/// `image/` plus `annotation/STEM.txt` directory, in file-name order.
#[derive(Clone, Debug)]
pub struct AnnotatedDir {
    root: PathBuf,
    names: Vec<String>,
}

impl AnnotatedDir {
    pub fn open(root: &Path) -> Result<Self> {
        let names = image_names(&root.join("image"))?;
        for name in &names {
            let p = Self::annotation_path(root, name);
            if !p.is_file() {
                return Err(Error::MissingCounterpart(p));
            }
        }
        Ok(Self { root: root.to_path_buf(), names })
    }

    fn annotation_path(root: &Path, name: &str) -> PathBuf {
        let stem = Path::new(name).file_stem().expect("file name").to_string_lossy().into_owned();
        root.join("annotation").join(format!("{stem}.txt"))
    }
}

impl Dataset<PretrainSample> for AnnotatedDir {
    fn len(&self) -> usize {
        self.names.len()
    }

    fn get(&self, index: usize) -> Result<PretrainSample> {
        let name = self.names.as_slice().get(index).ok_or_else(|| Error::arg(format!("sample index {index} out of range")))?;
        let input = Image::load(&self.root.join("image").join(name), false)?;
        let polys = parse_annotation(&std::fs::read_to_string(Self::annotation_path(&self.root, name))?)?;
        let (h, w) = (input.height, input.width);
        let seg = Image { height: h, width: w, channels: 1, data: rasterize(&polys, h, w) };
        Ok(PretrainSample { input, seg })
    }
}

/// Random horizontal flip and resize to `size x size`, applied identically
/// to every image of the sample.
pub fn augment(sample: &TrainSample, seed: u64, size: usize) -> TrainSample {
    transform(sample, flip_draw(seed), size)
}

pub fn augment_pretrain(sample: &PretrainSample, seed: u64, size: usize) -> PretrainSample {
    transform_pretrain(sample, flip_draw(seed), size)
}

/// Whether the sample seeded with `seed` is flipped.
pub fn flip_draw(seed: u64) -> bool {
    ChaCha8Rng::seed_from_u64(seed).gen_bool(0.5)
}

/// Optional flip, then bilinear resize of images and nearest resize of masks.
pub fn transform(sample: &TrainSample, flip: bool, size: usize) -> TrainSample {
    let tf = |img: &Image, nearest: bool| {
        let img = if flip { img.flip_horizontal() } else { img.clone() };
        if nearest {
            img.resize_nearest(size, size)
        } else {
            img.resize_bilinear(size, size)
        }
    };
    TrainSample { input: tf(&sample.input, false), gt: tf(&sample.gt, false), mask: tf(&sample.mask, true) }
}

pub fn transform_pretrain(sample: &PretrainSample, flip: bool, size: usize) -> PretrainSample {
    let tf = |img: &Image| if flip { img.flip_horizontal() } else { img.clone() };
    PretrainSample { input: tf(&sample.input).resize_bilinear(size, size), seg: tf(&sample.seg).resize_nearest(size, size) }
}
