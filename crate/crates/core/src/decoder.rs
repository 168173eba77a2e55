//! Five-stage upsampling decoder with lateral connections and the
//! training-time auxiliary heads.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use candle_core::Tensor;

use crate::blocks::BlockStage;
use crate::config::ModelConfig;
use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Conv2d, ConvSpec, Init, Mode, ParamBuilder, SnDeconv2x};

/// Inverse of patch flattening with ratio 2: each token of `C` channels
/// becomes a 2x2 patch of `C/4`-channel tokens, `(dy, dx, c)` row-major.
pub fn unflatten_patches(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if c % 4 != 0 {
        return Err(Error::shape(format!("patch splitting needs channels divisible by 4, got {c}")));
    }
    let q = c / 4;
    Ok(x.reshape((b, 2, 2, q, h, w))?
        .permute((0, 3, 4, 1, 5, 2))?
        .contiguous()?
        .reshape((b, q, 2 * h, 2 * w))?)
}

/// Doubles the spatial size: token unflattening then a pointwise projection.
#[derive(Clone, Debug)]
pub struct PatchSplit {
    proj: Conv2d,
}

impl PatchSplit {
    pub fn new(pb: &ParamBuilder, c_in: usize, c_out: usize) -> Result<Self> {
        if c_in % 4 != 0 {
            return Err(Error::shape(format!("patch splitting needs channels divisible by 4, got {c_in}")));
        }
        Ok(Self { proj: Conv2d::new(&pb.pp("proj"), c_in / 4, c_out, ConvSpec::same(1), true)? })
    }

    pub fn projection(&self) -> &Conv2d {
        &self.proj
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.proj.forward(&unflatten_patches(x)?)
    }
}

/// Encoder-to-decoder skip: 1x1 (c) -> 3x3 (2c) -> 3x3 (2c) -> 3x3 (c), ReLU
/// after all but the last, added onto the decoder feature.
#[derive(Clone, Debug)]
pub struct LateralConnection {
    convs: [Conv2d; 4],
}

impl LateralConnection {
    pub fn new(pb: &ParamBuilder, c: usize) -> Result<Self> {
        Ok(Self {
            convs: [
                Conv2d::new(&pb.pp("conv0"), c, c, ConvSpec::same(1), true)?,
                Conv2d::new(&pb.pp("conv1"), c, 2 * c, ConvSpec::same(3), true)?,
                Conv2d::new(&pb.pp("conv2"), 2 * c, 2 * c, ConvSpec::same(3), true)?,
                Conv2d::new(&pb.pp("conv3"), 2 * c, c, ConvSpec::same(3), true)?,
            ],
        })
    }

    pub fn forward(&self, f_enc: &Tensor, f_dec: &Tensor) -> Result<Tensor> {
        if f_enc.dims() != f_dec.dims() {
            return Err(Error::shape(format!("lateral {:?} vs {:?}", f_enc.dims(), f_dec.dims())));
        }
        let mut t = f_enc.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            t = conv.forward(&t)?;
            if i < 3 {
                t = t.relu()?;
            }
        }
        Ok((f_dec + t)?)
    }
}

/// Decoder features at strides 16, 8, 4, 2, 1 plus the predictions.
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub feats: [Tensor; 5],
    pub image: Tensor,
    pub aux: Option<AuxOutputs>,
}

#[derive(Clone, Debug)]
pub struct AuxOutputs {
    pub image_half: Tensor,
    pub image_quarter: Tensor,
    /// Text-box probability map in `(0, 1)`, full resolution.
    pub mask: Tensor,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    stages: Vec<BlockStage>,
    splits: Vec<PatchSplit>,
    /// Laterals feeding the outputs of decoder stages 1, 2, 3 (strides 16, 8,
    /// 4) from encoder stages 3, 2, 1.
    laterals: Vec<LateralConnection>,
    head: Conv2d,
    head_half: Conv2d,
    head_quarter: Conv2d,
    seg_deconv: SnDeconv2x,
    seg_conv: Conv2d,
    aux_evals: Arc<AtomicUsize>,
}

/// Linear image head: small weights and a mid-gray bias, so initial
/// predictions start inside the image range.
fn image_head(pb: &ParamBuilder, c_in: usize) -> Result<Conv2d> {
    Conv2d::with_init(pb, c_in, 3, ConvSpec::same(3), Init::TruncNormal(0.02), Init::Const(0.5))
}

impl Decoder {
    pub fn new(pb: &ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let out_ch = cfg.decoder_channels();
        let mut stages = Vec::with_capacity(5);
        let mut splits = Vec::with_capacity(5);
        for i in 0..5 {
            let spec = cfg.decoder_stage(i);
            stages.push(BlockStage::new(&pb.pp(format!("stage{i}")), cfg.block_type, spec.depth, spec, cfg.window_size)?);
            splits.push(PatchSplit::new(&pb.pp(format!("split{i}")), spec.dim, out_ch[i])?);
        }
        let mut laterals = Vec::with_capacity(3);
        for j in 0..3 {
            // decoder stage j output has stride 2^(4-j); encoder stage 2-j has stride 2^(4-j)
            let enc_stage = 2 - j;
            if cfg.enc_channels[enc_stage] != out_ch[j] {
                return Err(Error::Config(format!(
                    "lateral enc{} ({}) -> dec{} ({}) channel mismatch",
                    enc_stage + 1,
                    cfg.enc_channels[enc_stage],
                    j + 1,
                    out_ch[j]
                )));
            }
            laterals.push(LateralConnection::new(&pb.pp(format!("lateral{j}")), out_ch[j])?);
        }
        Ok(Self {
            stages,
            splits,
            laterals,
            head: image_head(&pb.pp("head"), out_ch[4])?,
            head_half: image_head(&pb.pp("head_half"), out_ch[3])?,
            head_quarter: image_head(&pb.pp("head_quarter"), out_ch[2])?,
            seg_deconv: SnDeconv2x::new(&pb.pp("seg_deconv"), out_ch[3], 64)?,
            seg_conv: Conv2d::new(&pb.pp("seg_conv"), 64, 1, ConvSpec::same(3), true)?,
            aux_evals: Arc::new(AtomicUsize::new(0)),
        })
    }

    /// Number of auxiliary-head evaluations since construction.
    pub fn aux_evaluations(&self) -> usize {
        self.aux_evals.load(Ordering::Relaxed)
    }

    /// Feature chain only (no prediction heads).
    pub fn features(&self, enc: &EncoderOutput) -> Result<[Tensor; 5]> {
        let mut x = enc.feats[3].clone();
        let mut feats = Vec::with_capacity(5);
        for i in 0..5 {
            x = self.stages[i].forward(&x)?;
            x = self.splits[i].forward(&x)?;
            if i < 3 {
                x = self.laterals[i].forward(&enc.feats[2 - i], &x)?;
            }
            feats.push(x.clone());
        }
        Ok(feats.try_into().expect("five stages"))
    }

    pub fn forward(&self, enc: &EncoderOutput, mode: Mode) -> Result<DecoderOutput> {
        let feats = self.features(enc)?;
        let image = self.head.forward(&feats[4])?;
        let aux = if mode.is_train() {
            self.aux_evals.fetch_add(1, Ordering::Relaxed);
            let seg = self.seg_deconv.forward(&feats[3], mode)?.relu()?;
            Some(AuxOutputs {
                image_half: self.head_half.forward(&feats[3])?,
                image_quarter: self.head_quarter.forward(&feats[2])?,
                mask: sigmoid(&self.seg_conv.forward(&seg)?)?,
            })
        } else {
            None
        };
        Ok(DecoderOutput { feats, image, aux })
    }
}
