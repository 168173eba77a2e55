//! Plain `H x W x C` float images in `[0, 1]`, 8-bit PNG I/O, resizing and
//! conversion to model tensors.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major, channel-interleaved.
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut img = Self::new(height, width, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.data[(y * width + x) * channels + c] = f(y, x, c);
                }
            }
        }
        img
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Rounds every value to the nearest of 256 levels after clamping.
    pub fn quantize(&self) -> Image {
        Image { data: self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect(), ..self.clone() }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.height, self.width, self.channels, |y, x, c| self.get(y, self.width - 1 - x, c))
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize_bilinear(&self, h: usize, w: usize) -> Image {
        if h == self.height && w == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / h as f64;
        let sx = self.width as f64 / w as f64;
        let coord = |o: usize, scale: f64, len: usize| {
            let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = p.floor() as usize;
            (i0, (i0 + 1).min(len - 1), (p - i0 as f64) as f32)
        };
        Image::from_fn(h, w, self.channels, |y, x, c| {
            let (y0, y1, fy) = coord(y, sy, self.height);
            let (x0, x1, fx) = coord(x, sx, self.width);
            let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
            let bot = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
            top * (1.0 - fy) + bot * fy
        })
    }

    pub fn resize_nearest(&self, h: usize, w: usize) -> Image {
        let sy = self.height as f64 / h as f64;
        let sx = self.width as f64 / w as f64;
        Image::from_fn(h, w, self.channels, |y, x, c| {
            let yy = (((y as f64 + 0.5) * sy) as usize).min(self.height - 1);
            let xx = (((x as f64 + 0.5) * sx) as usize).min(self.width - 1);
            self.get(yy, xx, c)
        })
    }

    /// `(1, C, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_vec(self.data.clone(), (self.height, self.width, self.channels), device)?;
        Ok(t.permute((2, 0, 1))?.unsqueeze(0)?.to_dtype(dtype)?.contiguous()?)
    }

    /// Sample `index` of a `(B, C, H, W)` tensor.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Image> {
        let (_, c, h, w) = t.dims4()?;
        let data = t.get(index)?.permute((1, 2, 0))?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(Image { height: h, width: w, channels: c, data })
    }

    /// Stacks same-sized images into `(B, C, H, W)`.
    pub fn batch_tensor(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
        let ts = images.iter().map(|i| i.to_tensor(dtype, device)).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&ts, 0)?)
    }

    /// Loads an 8-bit image; 3 channels unless `gray`.
    pub fn load(path: &Path, gray: bool) -> Result<Image> {
        let img = image::open(path)?;
        if gray {
            let g = img.to_luma8();
            let (w, h) = g.dimensions();
            Ok(Image {
                height: h as usize,
                width: w as usize,
                channels: 1,
                data: g.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
            })
        } else {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            Ok(Image {
                height: h as usize,
                width: w as usize,
                channels: 3,
                data: rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
            })
        }
    }

    /// Writes an 8-bit PNG (RGB for 3 channels, grayscale for 1).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => return Err(Error::arg(format!("cannot write {c}-channel image"))),
        };
        image::save_buffer_with_format(
            path,
            &self.to_u8(),
            self.width as u32,
            self.height as u32,
            color,
            image::ImageFormat::Png,
        )?;
        Ok(())
    }
}

#[inline]
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg" | "bmp")
    )
}
