//! The text-removal generator: encoder, decoder, and the two pretraining
//! heads, sharing one parameter store.

use candle_core::{DType, Device, Tensor};

use crate::config::ModelConfig;
use crate::decoder::{Decoder, DecoderOutput};
use crate::encoder::{Encoder, EncoderOutput};
use crate::error::Result;
use crate::nn::{Mode, ParamBuilder, ParamStore};
use crate::segmim::{apply_mask, ReconHead, SegHead};

pub const ENCODER_PREFIX: &str = "encoder.";
pub const DECODER_PREFIX: &str = "decoder.";
pub const SEG_HEAD_PREFIX: &str = "seg_head.";
pub const RECON_HEAD_PREFIX: &str = "recon_head.";

#[derive(Clone, Debug)]
pub struct PretrainOutput {
    /// Text-box probability map `(B, 1, H, W)`.
    pub seg: Tensor,
    /// Reconstructed image `(B, 3, H, W)`.
    pub rec: Tensor,
}

#[derive(Clone)]
pub struct Generator {
    cfg: ModelConfig,
    encoder: Encoder,
    decoder: Decoder,
    seg_head: SegHead,
    recon_head: ReconHead,
    store: ParamStore,
}

impl Generator {
    pub fn new(cfg: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate().into_result()?;
        let pb = ParamBuilder::new(seed, dtype, device);
        let encoder = Encoder::new(&pb.pp("encoder"), cfg)?;
        let decoder = Decoder::new(&pb.pp("decoder"), cfg)?;
        let seg_head = SegHead::new(&pb.pp("seg_head"), cfg.enc_channels[3])?;
        let recon_head = ReconHead::new(&pb.pp("recon_head"), cfg.dec_last_out_channels)?;
        Ok(Self { cfg: cfg.clone(), encoder, decoder, seg_head, recon_head, store: pb.finish() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn encode(&self, image: &Tensor, mim_mask: Option<&Tensor>) -> Result<EncoderOutput> {
        self.encoder.forward(image, mim_mask)
    }

    /// Text removal. In training mode the decoder also emits the auxiliary
    /// half/quarter images and the text-box map.
    pub fn forward(&self, image: &Tensor, mode: Mode) -> Result<DecoderOutput> {
        let enc = self.encoder.forward(image, None)?;
        self.decoder.forward(&enc, mode)
    }

    /// Pretraining pass: masked pixels are zeroed in the input and the
    /// corresponding stage-1 tokens replaced by the mask token.
    pub fn pretrain_forward(&self, image: &Tensor, mim_mask: &Tensor) -> Result<PretrainOutput> {
        let masked = apply_mask(image, mim_mask)?;
        let enc = self.encoder.forward(&masked, Some(mim_mask))?;
        let seg = self.seg_head.forward(&enc.feats[3])?;
        let feats = self.decoder.features(&enc)?;
        let rec = self.recon_head.forward(&feats[4])?;
        Ok(PretrainOutput { seg, rec })
    }

    /// Encoder-only segmentation used when finetuning the encoder (no mask
    /// token).
    pub fn segment(&self, image: &Tensor) -> Result<Tensor> {
        let enc = self.encoder.forward(image, None)?;
        self.seg_head.forward(&enc.feats[3])
    }
}
