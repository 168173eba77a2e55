//! Training objectives for text removal and the frozen feature extractor
//! used by the perceptual and style terms.

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{l1_mean, scalar_f64};
use crate::tensor_io;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha_msr: f64,
    pub alpha_per: f64,
    pub alpha_sty: f64,
    pub alpha_seg: f64,
    pub alpha_adv: f64,
    /// Text-region weights for the (quarter, half, full) scales.
    pub lambda: [f64; 3],
    /// Background weights for the (quarter, half, full) scales.
    pub beta: [f64; 3],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_msr: 1.0,
            alpha_per: 0.01,
            alpha_sty: 120.0,
            alpha_seg: 1.0,
            alpha_adv: 0.1,
            lambda: [5.0, 6.0, 10.0],
            beta: [0.8, 1.0, 2.0],
        }
    }
}

/// Predicted images at full, half and quarter resolution. Missing scales are
/// skipped by [`msr_loss`].
#[derive(Clone, Debug)]
pub struct ScaleOutputs<'a> {
    pub full: &'a Tensor,
    pub half: Option<&'a Tensor>,
    pub quarter: Option<&'a Tensor>,
}

/// Area downsampling by an integer factor.
pub fn area_downsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    Ok(x.avg_pool2d(factor)?)
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Text-aware multi-scale L1 reconstruction loss. Each masked L1 term is the
/// mean over all elements of the masked absolute residual. `gt` is
/// `(B, 3, H, W)`, `mask` is `(B, 1, H, W)` binary.
pub fn msr_loss(out: &ScaleOutputs<'_>, gt: &Tensor, mask: &Tensor, w: &LossWeights) -> Result<Tensor> {
    let (b, _, h, wd) = gt.dims4()?;
    if mask.dims() != [b, 1, h, wd] {
        return Err(Error::shape(format!("mask {:?} vs image {:?}", mask.dims(), gt.dims())));
    }
    let scales = [(out.quarter, 4usize, 0usize), (out.half, 2, 1), (Some(out.full), 1, 2)];
    let mut total: Option<Tensor> = None;
    for (pred, factor, k) in scales {
        let Some(pred) = pred else { continue };
        let g = area_downsample(gt, factor)?;
        let m = area_downsample(mask, factor)?.ge(0.5)?.to_dtype(gt.dtype())?;
        check_same(pred, &g, "msr scale")?;
        let res = (pred - &g)?.abs()?;
        let text = res.broadcast_mul(&m)?.mean_all()?;
        let bg = res.broadcast_mul(&(1.0 - &m)?)?.mean_all()?;
        let term = ((text * w.lambda[k])? + (bg * w.beta[k])?)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("full scale always present"))
}

/// Prediction inside text boxes, original input elsewhere.
pub fn composite_image(out: &Tensor, input: &Tensor, mask: &Tensor) -> Result<Tensor> {
    check_same(out, input, "composite")?;
    let inv = (1.0 - mask)?;
    Ok((out.broadcast_mul(mask)? + input.broadcast_mul(&inv)?)?)
}

/// Gram matrix of `(B, C, H, W)` activations normalized by `C*H*W`.
pub fn gram(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let f = x.reshape((b, c, h * w))?;
    Ok((f.matmul(&f.t()?)? / (c * h * w) as f64)?)
}

/// Frozen VGG-style convolutional feature extractor with taps after each of
/// its first three pooling layers. Weights are plain tensors, never
/// variables, so no gradient is ever accumulated for them.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    blocks: Vec<Vec<(Tensor, Tensor)>>,
    source: ExtractorSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ExtractorSource {
    Random { seed: u64, widths: [usize; 3] },
    File(String),
}

/// Convolutions per block of the 16-layer layout's first three blocks.
const CONVS_PER_BLOCK: [usize; 3] = [2, 2, 3];
/// Channel widths of the classification-pretrained 16-layer network.
pub const VGG16_WIDTHS: [usize; 3] = [64, 128, 256];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

impl FeatureExtractor {
    /// Random He-initialized weights with the given block widths.
    pub fn random(seed: u64, widths: [usize; 3], dtype: DType, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(3);
        let mut c_in = 3;
        for (bi, &width) in widths.iter().enumerate() {
            let mut convs = Vec::new();
            for _ in 0..CONVS_PER_BLOCK[bi] {
                let fan_in = c_in * 9;
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                let data: Vec<f64> = (0..width * fan_in).map(|_| normal.sample(&mut rng)).collect();
                let w = Tensor::from_vec(data, (width, c_in, 3, 3), device)?.to_dtype(dtype)?;
                let b = Tensor::zeros(width, dtype, device)?;
                convs.push((w, b));
                c_in = width;
            }
            blocks.push(convs);
        }
        Ok(Self { blocks, source: ExtractorSource::Random { seed, widths } })
    }

    /// Loads weights from a tensor container with entries
    /// `block{b}.conv{i}.weight` `(out, in, 3, 3)` and `.bias` `(out)` for
    /// blocks 0..3 with 2, 2 and 3 convolutions.
    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let file = tensor_io::read_file(path, device)?;
        let mut blocks = Vec::with_capacity(3);
        let mut c_in = 3;
        for (bi, &n) in CONVS_PER_BLOCK.iter().enumerate() {
            let mut convs = Vec::new();
            for ci in 0..n {
                let get = |suffix: &str| {
                    let key = format!("block{bi}.conv{ci}.{suffix}");
                    file.tensors
                        .get(&key)
                        .cloned()
                        .ok_or_else(|| Error::Corrupt(format!("extractor weights missing `{key}`")))
                };
                let w = get("weight")?.to_dtype(dtype)?;
                let b = get("bias")?.to_dtype(dtype)?;
                let (out, inp, kh, kw) = w.dims4()?;
                if inp != c_in || kh != 3 || kw != 3 || b.dims() != [out] {
                    return Err(Error::shape(format!("extractor block{bi}.conv{ci}: {:?}", w.dims())));
                }
                c_in = out;
                convs.push((w, b));
            }
            blocks.push(convs);
        }
        Ok(Self { blocks, source: ExtractorSource::File(path.display().to_string()) })
    }

    /// Writes the weights in the format read by [`load`](Self::load).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = std::collections::BTreeMap::new();
        for (bi, convs) in self.blocks.iter().enumerate() {
            for (ci, (w, b)) in convs.iter().enumerate() {
                tensors.insert(format!("block{bi}.conv{ci}.weight"), w.clone());
                tensors.insert(format!("block{bi}.conv{ci}.bias"), b.clone());
            }
        }
        tensor_io::write_file(path, &serde_json::json!({ "kind": "feature-extractor" }), &tensors)
    }

    pub fn source(&self) -> &ExtractorSource {
        &self.source
    }

    /// Smallest accepted spatial size (three 2x poolings).
    pub const MIN_SIZE: usize = 8;

    /// Activations after pooling layers 1, 2 and 3 for `(B, 3, H, W)` input
    /// in `[0, 1]`.
    pub fn taps(&self, x: &Tensor) -> Result<[Tensor; 3]> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h < Self::MIN_SIZE || w < Self::MIN_SIZE {
            return Err(Error::shape(format!(
                "feature extractor needs (B, 3, >={m}, >={m}), got {:?}",
                x.dims(),
                m = Self::MIN_SIZE
            )));
        }
        let mean = Tensor::new(&IMAGENET_MEAN, x.device())?.to_dtype(x.dtype())?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&IMAGENET_STD, x.device())?.to_dtype(x.dtype())?.reshape((1, 3, 1, 1))?;
        let mut t = x.broadcast_sub(&mean)?.broadcast_div(&std)?;
        let mut taps = Vec::with_capacity(3);
        for convs in &self.blocks {
            for (w, b) in convs {
                t = t.conv2d(w, 1, 1, 1, 1)?.broadcast_add(&b.reshape((1, (), 1, 1))?)?.relu()?;
            }
            t = max_pool2x2(&t)?;
            taps.push(t.clone());
        }
        Ok(taps.try_into().expect("three taps"))
    }
}

/// 2x2 max pooling with stride 2 (odd edges dropped), built from reductions
/// so the whole gradient reaches each window's maximum.
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (ho, wo) = (h / 2, w / 2);
    let x = x.narrow(2, 0, 2 * ho)?.narrow(3, 0, 2 * wo)?.contiguous()?;
    Ok(x.reshape((b, c, ho, 2, wo, 2))?.max(5)?.max(3)?)
}

/// Perceptual and style losses sharing one extractor pass per image.
pub fn perceptual_style_losses(
    out: &Tensor,
    out_star: &Tensor,
    gt: &Tensor,
    phi: &FeatureExtractor,
) -> Result<(Tensor, Tensor)> {
    check_same(out, gt, "perceptual")?;
    check_same(out_star, gt, "perceptual")?;
    let f_gt = phi.taps(&gt.detach())?;
    let f_out = phi.taps(out)?;
    let f_star = phi.taps(out_star)?;
    let mut per: Option<Tensor> = None;
    let mut sty: Option<Tensor> = None;
    for i in 0..3 {
        let g_gt = gram(&f_gt[i])?;
        let p = (l1_mean(&f_out[i], &f_gt[i])? + l1_mean(&f_star[i], &f_gt[i])?)?;
        let s = (l1_mean(&gram(&f_out[i])?, &g_gt)? + l1_mean(&gram(&f_star[i])?, &g_gt)?)?;
        per = Some(match per {
            Some(t) => (t + p)?,
            None => p,
        });
        sty = Some(match sty {
            Some(t) => (t + s)?,
            None => s,
        });
    }
    Ok((per.unwrap(), sty.unwrap()))
}

pub fn perceptual_loss(out: &Tensor, out_star: &Tensor, gt: &Tensor, phi: &FeatureExtractor) -> Result<Tensor> {
    Ok(perceptual_style_losses(out, out_star, gt, phi)?.0)
}

pub fn style_loss(out: &Tensor, out_star: &Tensor, gt: &Tensor, phi: &FeatureExtractor) -> Result<Tensor> {
    Ok(perceptual_style_losses(out, out_star, gt, phi)?.1)
}

pub const DICE_EPS: f64 = 1e-6;

/// Dice loss averaged over the batch. An empty prediction against an empty
/// target scores 0.
pub fn dice_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_same(pred, gt, "dice")?;
    let lo = scalar_f64(&pred.flatten_all()?.min(0)?)?;
    let hi = scalar_f64(&pred.flatten_all()?.max(0)?)?;
    if lo < 0.0 || hi > 1.0 || lo.is_nan() || hi.is_nan() {
        return Err(Error::arg(format!("dice prediction outside [0, 1]: [{lo}, {hi}]")));
    }
    let b = pred.dim(0)?;
    let p = pred.reshape((b, ()))?;
    let g = gt.reshape((b, ()))?.to_dtype(pred.dtype())?;
    let inter = (&p * &g)?.sum(D::Minus1)?;
    let denom_raw = (p.sqr()?.sum(D::Minus1)? + g.sqr()?.sum(D::Minus1)?)?;
    let dice = ((inter * 2.0)? / (&denom_raw + DICE_EPS)?)?;
    let nonempty = denom_raw.gt(0.0)?.to_dtype(pred.dtype())?;
    Ok(((1.0 - dice)? * nonempty)?.mean_all()?)
}

/// Hinge losses for the discriminator and the generator from per-sample
/// scores (batch-averaged).
pub fn adversarial_losses(d_real: &Tensor, d_fake: &Tensor) -> Result<(Tensor, Tensor)> {
    let l_d = ((1.0 - d_real)?.relu()?.mean_all()? + (d_fake + 1.0)?.relu()?.mean_all()?)?;
    let l_g = d_fake.mean_all()?.neg()?;
    Ok((l_d, l_g))
}

/// Individual loss terms of the generator objective.
#[derive(Clone, Debug)]
pub struct LossParts<T> {
    pub msr: T,
    pub per: T,
    pub sty: T,
    pub seg: T,
    pub adv: T,
}

impl<T> LossParts<T> {
    pub fn named(&self) -> [(&'static str, &T); 5] {
        [("msr", &self.msr), ("per", &self.per), ("sty", &self.sty), ("seg", &self.seg), ("adv", &self.adv)]
    }
}

impl LossWeights {
    fn alphas(&self) -> [f64; 5] {
        [self.alpha_msr, self.alpha_per, self.alpha_sty, self.alpha_seg, self.alpha_adv]
    }
}

/// Weighted sum of scalar loss terms.
pub fn total_loss_values(parts: &LossParts<f64>, w: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for ((name, v), a) in parts.named().into_iter().zip(w.alphas()) {
        if !v.is_finite() {
            return Err(Error::NonFinite(name));
        }
        total += a * v;
    }
    Ok(total)
}

/// Weighted sum of loss tensors; non-finite terms are reported by name.
pub fn total_loss(parts: &LossParts<Tensor>, w: &LossWeights) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for ((name, t), a) in parts.named().into_iter().zip(w.alphas()) {
        if !scalar_f64(t)?.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let term = (t * a)?;
        total = Some(match total {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    Ok(total.unwrap())
}
