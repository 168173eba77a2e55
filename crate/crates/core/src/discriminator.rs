//! Mask-conditioned patch discriminator.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, sigmoid, ConvSpec, Mode, ParamBuilder, ParamStore, SnConv2d};

/// Output channels of the five hidden convolutions; a sixth maps to one score channel.
pub const DISC_WIDTHS: [usize; 5] = [64, 128, 256, 256, 256];

/// Six stride-2 5x5 spectrally normalized convolutions over the image
/// concatenated with its text-box mask. The final score map goes through a
/// sigmoid, is rescaled to (-1, 1) and averaged per sample.
#[derive(Clone, Debug)]
pub struct Discriminator {
    convs: Vec<SnConv2d>,
}

impl Discriminator {
    pub fn new(pb: &ParamBuilder, widths: [usize; 5]) -> Result<Self> {
        let spec = ConvSpec { kernel: 5, stride: 2, padding: 2 };
        let mut c_in = 4;
        let mut convs = Vec::with_capacity(6);
        for (i, &c) in widths.iter().chain(&[1]).enumerate() {
            convs.push(SnConv2d::new(&pb.pp(format!("conv{i}")), c_in, c, spec)?);
            c_in = c;
        }
        Ok(Self { convs })
    }

    /// Builds a discriminator of the default widths with its own parameter store.
    pub fn build(seed: u64, dtype: candle_core::DType, device: &candle_core::Device) -> Result<(Self, ParamStore)> {
        Self::build_with(DISC_WIDTHS, seed, dtype, device)
    }

    pub fn build_with(
        widths: [usize; 5],
        seed: u64,
        dtype: candle_core::DType,
        device: &candle_core::Device,
    ) -> Result<(Self, ParamStore)> {
        let pb = ParamBuilder::new(seed, dtype, device);
        let d = Self::new(&pb.pp("disc"), widths)?;
        Ok((d, pb.finish()))
    }

    pub fn convs(&self) -> &[SnConv2d] {
        &self.convs
    }

    /// Per-sample scores in (-1, 1), shape `(B,)`.
    pub fn forward(&self, image: &Tensor, mask: &Tensor, mode: Mode) -> Result<Tensor> {
        let (b, c, h, w) = image.dims4()?;
        if c != 3 || mask.dims() != [b, 1, h, w] {
            return Err(Error::shape(format!("image {:?} with mask {:?}", image.dims(), mask.dims())));
        }
        let x = ((image - 0.5)? / 0.5)?;
        let mut t = Tensor::cat(&[&x, &mask.to_dtype(x.dtype())?], 1)?;
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            t = conv.forward(&t, mode)?;
            if i < last {
                t = leaky_relu(&t, 0.2)?;
            }
        }
        let score = ((sigmoid(&t)? * 2.0)? - 1.0)?;
        Ok(score.flatten_from(1)?.mean(1)?)
    }
}
