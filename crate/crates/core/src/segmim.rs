//! Joint text-box segmentation / masked-image-modeling pretraining: patch
//! masks, the two pretraining heads, their losses, and box rasterization.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::unflatten_patches;
use crate::error::{Error, Result};
use crate::losses::dice_loss;
use crate::nn::{sigmoid, Conv2d, ConvSpec, ParamBuilder};

/// Random patch-aligned binary mask; 1 marks masked pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MimMask {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// Row-major over the `(height/patch) x (width/patch)` patch grid.
    pub grid: Vec<bool>,
}

impl MimMask {
    pub fn masked_patches(&self) -> usize {
        self.grid.iter().filter(|&&m| m).count()
    }

    pub fn is_masked(&self, y: usize, x: usize) -> bool {
        let gw = self.width / self.patch;
        self.grid[(y / self.patch) * gw + x / self.patch]
    }

    /// Pixel mask `(1, 1, H, W)`.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                data.push(if self.is_masked(y, x) { 1f32 } else { 0.0 });
            }
        }
        Ok(Tensor::from_vec(data, (1, 1, self.height, self.width), device)?.to_dtype(dtype)?)
    }
}

/// Masks `round(ratio * patches)` patches chosen uniformly without
/// replacement.
pub fn generate_mim_mask(h: usize, w: usize, ratio: f64, patch: usize, seed: u64) -> Result<MimMask> {
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::arg(format!("{h}x{w} image not divisible into {patch}-pixel patches")));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::arg(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let n = (h / patch) * (w / patch);
    let k = (ratio * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = vec![false; n];
    for i in rand::seq::index::sample(&mut rng, n, k.min(n)) {
        grid[i] = true;
    }
    Ok(MimMask { height: h, width: w, patch, grid })
}

/// Zeroes masked pixels. `image`: `(B, 3, H, W)`, `mask`: `(B, 1, H, W)`.
pub fn apply_mask(image: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = image.dims4()?;
    if mask.dims() != [b, 1, h, w] {
        return Err(Error::shape(format!("mask {:?} vs image {:?}", mask.dims(), image.dims())));
    }
    Ok(image.broadcast_mul(&(1.0 - mask.to_dtype(image.dtype())?)?)?)
}

/// Unflattens each token into an `r x r` single-channel patch.
fn tokens_to_patches(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if c != r * r {
        return Err(Error::shape(format!("{c} channels cannot form {r}x{r} patches")));
    }
    if r == 2 {
        return unflatten_patches(x);
    }
    Ok(x.reshape((b, r, r, 1, h, w))?
        .permute((0, 3, 4, 1, 5, 2))?
        .contiguous()?
        .reshape((b, 1, h * r, w * r))?)
}

pub const SEG_PATCH: usize = 32;

/// Text-box segmentation from the stride-32 encoder feature: a pointwise
/// projection to 1024 channels, each reshaped to a 32x32 pixel patch.
#[derive(Clone, Debug)]
pub struct SegHead {
    proj: Conv2d,
    c_in: usize,
}

impl SegHead {
    pub fn new(pb: &ParamBuilder, c_in: usize) -> Result<Self> {
        Ok(Self { proj: Conv2d::new(&pb.pp("proj"), c_in, SEG_PATCH * SEG_PATCH, ConvSpec::same(1), true)?, c_in })
    }

    pub fn forward(&self, f4: &Tensor) -> Result<Tensor> {
        let c = f4.dim(1)?;
        if c != self.c_in {
            return Err(Error::shape(format!("segmentation head expects {} channels, got {c}", self.c_in)));
        }
        sigmoid(&tokens_to_patches(&self.proj.forward(f4)?, SEG_PATCH)?)
    }
}

/// Image reconstruction from the full-resolution decoder feature.
#[derive(Clone, Debug)]
pub struct ReconHead {
    conv: Conv2d,
}

impl ReconHead {
    pub fn new(pb: &ParamBuilder, c_in: usize) -> Result<Self> {
        Ok(Self { conv: Conv2d::new(&pb.pp("conv"), c_in, 3, ConvSpec::same(3), true)? })
    }

    pub fn forward(&self, f5: &Tensor) -> Result<Tensor> {
        self.conv.forward(f5)
    }
}

/// Mean absolute error over masked pixels (all channels).
pub fn mim_loss(input: &Tensor, rec: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if input.dims() != rec.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", input.dims(), rec.dims())));
    }
    let (b, c, h, w) = input.dims4()?;
    if mask.dims() != [b, 1, h, w] {
        return Err(Error::shape(format!("mask {:?} vs image {:?}", mask.dims(), input.dims())));
    }
    let m = mask.to_dtype(input.dtype())?;
    let count = m.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if count <= 0.0 {
        return Err(Error::EmptyMask);
    }
    let err = (rec - input)?.abs()?.broadcast_mul(&m)?.sum_all()?;
    Ok((err / (count * c as f64))?)
}

/// Unweighted sum of the segmentation dice loss and the masked
/// reconstruction loss.
pub fn pretrain_loss(seg: &Tensor, seg_gt: &Tensor, input: &Tensor, rec: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let dice = dice_loss(seg, seg_gt)?;
    let mim = mim_loss(input, rec, mask)?;
    Ok(((&dice + &mim)?, dice, mim))
}

/// Closed polygon in pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Polygon(pub Vec<(f64, f64)>);

impl Polygon {
    pub fn from_box(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Polygon(vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)])
    }

    fn contains(&self, px: f64, py: f64) -> bool {
        let pts = &self.0;
        let mut inside = false;
        let mut j = pts.len() - 1;
        for i in 0..pts.len() {
            let (xi, yi) = pts[i];
            let (xj, yj) = pts[j];
            if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }
}

/// Parses one polygon per line as comma-separated `x,y` pairs. Blank lines
/// are skipped; trailing non-numeric fields (transcriptions) are ignored.
pub fn parse_annotation(text: &str) -> Result<Vec<Polygon>> {
    let mut polys = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim().trim_start_matches('\u{feff}');
        if line.is_empty() {
            continue;
        }
        let nums: Vec<f64> = line.split(',').map_while(|f| f.trim().parse::<f64>().ok()).collect();
        let pairs = nums.len() / 2;
        if pairs < 3 {
            return Err(Error::arg(format!("annotation line {}: need at least 3 points", ln + 1)));
        }
        polys.push(Polygon(nums.chunks_exact(2).map(|p| (p[0], p[1])).collect()));
    }
    Ok(polys)
}

/// Binary `h x w` mask (row-major) with pixel centers inside any polygon set
/// to 1.
pub fn rasterize(polys: &[Polygon], h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0f32; h * w];
    for poly in polys {
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for &(x, y) in &poly.0 {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        let ys = (y0.floor().max(0.0) as usize).min(h);
        let ye = ((y1.ceil() + 1.0).max(0.0) as usize).min(h);
        let xs = (x0.floor().max(0.0) as usize).min(w);
        let xe = ((x1.ceil() + 1.0).max(0.0) as usize).min(w);
        for y in ys..ye {
            for x in xs..xe {
                if poly.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    out[y * w + x] = 1.0;
                }
            }
        }
    }
    out
}
