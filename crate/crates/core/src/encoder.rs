//! Four-stage hierarchical encoder.

use candle_core::{Tensor, Var};

use crate::blocks::BlockStage;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{weight, Conv2d, ConvSpec, Init, LayerNorm, ParamBuilder};

/// Rearranges every `d x d` patch of an NCHW map into one token of
/// `d*d*C` channels. Within a token the layout is `(dy, dx, c)` row-major.
pub fn flatten_patches(x: &Tensor, d: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if d == 0 || h % d != 0 || w % d != 0 {
        return Err(Error::shape(format!("{h}x{w} map not divisible by patch size {d}")));
    }
    Ok(x.reshape((b, c, h / d, d, w / d, d))?
        .permute((0, 3, 5, 1, 2, 4))?
        .contiguous()?
        .reshape((b, d * d * c, h / d, w / d))?)
}

/// Patch flattening, pointwise projection, then layer norm over channels.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    proj: Conv2d,
    norm: LayerNorm,
    ratio: usize,
}

impl PatchEmbed {
    pub fn new(pb: &ParamBuilder, c_in: usize, c_out: usize, ratio: usize) -> Result<Self> {
        Ok(Self {
            proj: Conv2d::new(&pb.pp("proj"), ratio * ratio * c_in, c_out, ConvSpec::same(1), true)?,
            norm: LayerNorm::new(&pb.pp("norm"), c_out)?,
            ratio,
        })
    }

    pub fn projection(&self) -> &Conv2d {
        &self.proj
    }

    /// Output before the normalization.
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        self.proj.forward(&flatten_patches(x, self.ratio)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.norm.forward_nchw(&self.project(x)?)
    }
}

/// Features at strides 4, 8, 16 and 32, NCHW.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub feats: [Tensor; 4],
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: ModelConfig,
    embeds: Vec<PatchEmbed>,
    stages: Vec<BlockStage>,
    mask_token: Var,
}

impl Encoder {
    pub fn new(pb: &ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let mut embeds = Vec::with_capacity(4);
        let mut stages = Vec::with_capacity(4);
        let mut c_in = 3;
        for i in 0..4 {
            let spec = cfg.encoder_stage(i);
            let ratio = if i == 0 { 4 } else { 2 };
            embeds.push(PatchEmbed::new(&pb.pp(format!("embed{i}")), c_in, spec.dim, ratio)?);
            stages.push(BlockStage::new(&pb.pp(format!("stage{i}")), cfg.block_type, spec.depth, spec, cfg.window_size)?);
            c_in = spec.dim;
        }
        let mask_token = pb.param("mask_token", &[cfg.enc_channels[0]], Init::TruncNormal(0.02))?;
        Ok(Self { cfg: cfg.clone(), embeds, stages, mask_token })
    }

    pub fn embeds(&self) -> &[PatchEmbed] {
        &self.embeds
    }

    /// Normalized input through the first patch embedding, with masked
    /// stride-4 tokens replaced by the learned mask token.
    ///
    /// `image`: `(B, 3, H, W)` in `[0, 1]` with `H = W = input_size`.
    /// `mim_mask`: optional `(B, 1, H, W)` binary pixel mask.
    pub fn stem(&self, image: &Tensor, mim_mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, c, h, w) = image.dims4()?;
        let s = self.cfg.input_size;
        if c != 3 || h != s || w != s {
            return Err(Error::shape(format!("encoder expects (B, 3, {s}, {s}), got {:?}", image.dims())));
        }
        let x = self.embeds[0].forward(&((image - 0.5)? / 0.5)?)?;
        let Some(m) = mim_mask else { return Ok(x) };
        if m.dims() != [b, 1, h, w] {
            return Err(Error::shape(format!("mask {:?} vs image {:?}", m.dims(), image.dims())));
        }
        let tm = m.to_dtype(x.dtype())?.avg_pool2d(4)?.ge(0.5)?.to_dtype(x.dtype())?;
        let token = weight(&self.mask_token).reshape((1, (), 1, 1))?;
        let keep = (1.0 - &tm)?;
        Ok((x.broadcast_mul(&keep)? + tm.broadcast_mul(&token)?)?)
    }

    pub fn forward(&self, image: &Tensor, mim_mask: Option<&Tensor>) -> Result<EncoderOutput> {
        let mut x = self.stem(image, mim_mask)?;
        let mut feats = Vec::with_capacity(4);
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                x = self.embeds[i].forward(&x)?;
            }
            x = stage.forward(&x)?;
            feats.push(x.clone());
        }
        let feats: [Tensor; 4] = feats.try_into().expect("four stages");
        Ok(EncoderOutput { feats })
    }
}
