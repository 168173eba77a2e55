//! Central finite-difference checks of every block type, the encoder and
//! decoder connectors, all losses, the discriminator and the pretraining
//! heads, in f64 on tiny shapes.

use candle_core::{DType, Device, Tensor, Var};
use super::{binary_mask, gradcheck, gradcheck_with, probe, uniform, var};
use text_eraser::blocks::{BlockSpec, VitBlock};
use text_eraser::config::{preset, BlockType};
use text_eraser::decoder::{LateralConnection, PatchSplit};
use text_eraser::discriminator::Discriminator;
use text_eraser::encoder::PatchEmbed;
use text_eraser::losses::{
    adversarial_losses, dice_loss, msr_loss, perceptual_loss, style_loss, FeatureExtractor, LossWeights, ScaleOutputs,
};
use text_eraser::model::Generator;
use text_eraser::nn::{Mode, ParamBuilder, ParamStore};
use text_eraser::segmim::{mim_loss, ReconHead, SegHead};

const TOL: f64 = 1e-4;
/// Desk-scale discriminator widths; the layer structure is the default one.
const DISC_WIDTHS: [usize; 5] = [16, 32, 64, 64, 64];

fn all_vars(store: &ParamStore) -> Vec<Var> {
    store.vars().map(|(_, v)| v.clone()).collect()
}

fn check_block(block_type: BlockType, dim: usize, heads: usize, window: usize, shift: usize, hw: (usize, usize)) {
    let pb = ParamBuilder::new(3, DType::F64, &Device::Cpu);
    let spec = BlockSpec { block_type, dim, heads, window_size: window, shift, ffn_expansion: 2.0, sra_reduction: 2 };
    let block = VitBlock::new(&pb, spec).unwrap();
    let store = pb.finish();
    // Random non-zero biases so every parameter path is exercised.
    for (_, v) in store.vars() {
        if v.rank() == 1 {
            v.set(&(v.as_tensor() + uniform(v.dims(), -0.1, 0.1, v.elem_count() as u64)).unwrap()).unwrap();
        }
    }
    let x = var(&[1, hw.0, hw.1, dim], -1.0, 1.0, 11);
    let mut vars = all_vars(&store);
    vars.push(x.clone());
    let f = || probe(&block.forward(x.as_tensor())?, 5);
    let r = gradcheck(&vars, &f);
    assert!(r.rel_err < TOL, "{block_type} shift {shift} {hw:?}: {r:?}");
    assert!(r.analytic_norm > 0.0);
}

pub fn swin_block_unshifted() {
    check_block(BlockType::Swin, 8, 2, 2, 0, (4, 4));
}

pub fn swin_block_shifted_with_padding() {
    check_block(BlockType::Swin, 8, 2, 2, 1, (3, 5));
}

pub fn swinv2_block_shifted() {
    check_block(BlockType::Swinv2, 8, 2, 2, 1, (4, 4));
}

pub fn swinv2_block_padded() {
    check_block(BlockType::Swinv2, 4, 1, 3, 0, (4, 5));
}

pub fn pvt_block() {
    check_block(BlockType::Pvt, 8, 2, 0, 0, (4, 4));
}

pub fn patch_embed_and_split() {
    let pb = ParamBuilder::new(1, DType::F64, &Device::Cpu);
    let embed = PatchEmbed::new(&pb.pp("e"), 3, 6, 2).unwrap();
    let split = PatchSplit::new(&pb.pp("s"), 8, 3).unwrap();
    let store = pb.finish();
    let x = var(&[2, 3, 4, 4], 0.0, 1.0, 2);
    let y = var(&[1, 8, 2, 3], -1.0, 1.0, 3);
    let mut vars = all_vars(&store);
    vars.extend([x.clone(), y.clone()]);
    let f = || Ok((probe(&embed.forward(x.as_tensor())?, 1)? + probe(&split.forward(y.as_tensor())?, 2)?)?);
    let r = gradcheck(&vars, &f);
    assert!(r.rel_err < TOL, "{r:?}");
}

pub fn lateral_connection() {
    let pb = ParamBuilder::new(4, DType::F64, &Device::Cpu);
    let lat = LateralConnection::new(&pb, 3).unwrap();
    let store = pb.finish();
    let fe = var(&[1, 3, 4, 4], -1.0, 1.0, 5);
    let fd = var(&[1, 3, 4, 4], -1.0, 1.0, 6);
    let mut vars = all_vars(&store);
    vars.extend([fe.clone(), fd.clone()]);
    let f = || probe(&lat.forward(fe.as_tensor(), fd.as_tensor())?, 7);
    let r = gradcheck(&vars, &f);
    assert!(r.rel_err < TOL, "{r:?}");
}

pub fn msr_loss_gradient() {
    let out = var(&[2, 3, 8, 8], 0.0, 1.0, 1);
    let half = var(&[2, 3, 4, 4], 0.0, 1.0, 2);
    let quarter = var(&[2, 3, 2, 2], 0.0, 1.0, 3);
    let gt = uniform(&[2, 3, 8, 8], 0.0, 1.0, 4);
    let mask = binary_mask(&[2, 1, 8, 8], 0.4, 5);
    let w = LossWeights::default();
    let f = || {
        let s = ScaleOutputs { full: out.as_tensor(), half: Some(half.as_tensor()), quarter: Some(quarter.as_tensor()) };
        msr_loss(&s, &gt, &mask, &w)
    };
    let r = gradcheck(&[out.clone(), half.clone(), quarter.clone()], &f);
    assert!(r.rel_err < TOL, "{r:?}");
}

pub fn perceptual_and_style_gradients() {
    let phi = FeatureExtractor::random(9, [4, 6, 8], DType::F64, &Device::Cpu).unwrap();
    let out = var(&[1, 3, 8, 8], 0.0, 1.0, 1);
    let star = var(&[1, 3, 8, 8], 0.0, 1.0, 2);
    let gt = uniform(&[1, 3, 8, 8], 0.0, 1.0, 3);
    let vars = [out.clone(), star.clone()];
    let f = || perceptual_loss(out.as_tensor(), star.as_tensor(), &gt, &phi);
    let r = gradcheck(&vars, &f);
    assert!(r.rel_err < TOL, "perceptual {r:?}");
    let f = || style_loss(out.as_tensor(), star.as_tensor(), &gt, &phi);
    let r = gradcheck(&vars, &f);
    assert!(r.rel_err < TOL, "style {r:?}");
}

pub fn dice_gradient() {
    let pred = var(&[2, 1, 4, 4], 0.1, 0.9, 1);
    let gt = binary_mask(&[2, 1, 4, 4], 0.5, 2);
    let f = || dice_loss(pred.as_tensor(), &gt);
    let r = gradcheck(&[pred.clone()], &f);
    assert!(r.rel_err < TOL, "{r:?}");
}

pub fn hinge_gradients() {
    // Scores chosen away from the hinge kinks at +1 and -1.
    let real = Var::from_tensor(&Tensor::new(&[0.3f64, -0.5, 0.9], &Device::Cpu).unwrap()).unwrap();
    let fake = Var::from_tensor(&Tensor::new(&[-0.2f64, 0.4, -0.8], &Device::Cpu).unwrap()).unwrap();
    let vars = [real.clone(), fake.clone()];
    let f = || Ok(adversarial_losses(real.as_tensor(), fake.as_tensor())?.0);
    assert!(gradcheck(&vars, &f).rel_err < TOL);
    let f = || Ok(adversarial_losses(real.as_tensor(), fake.as_tensor())?.1);
    assert!(gradcheck(&vars, &f).rel_err < TOL);
}

pub fn discriminator_gradient() {
    let (d, store) = Discriminator::build_with(DISC_WIDTHS, 2, DType::F64, &Device::Cpu).unwrap();
    let img = var(&[1, 3, 16, 16], 0.0, 1.0, 3);
    let mask = binary_mask(&[1, 1, 16, 16], 0.3, 4);
    let mut vars = all_vars(&store);
    vars.push(img.clone());
    // Eval mode keeps the power-iteration vector fixed between evaluations.
    let f = || Ok(d.forward(img.as_tensor(), &mask, Mode::Eval)?.sum_all()?);
    let r = gradcheck_with(&vars, &f, &|| {}, 1e-6, 0.005, 1);
    assert!(r.rel_err < TOL, "{r:?}");
}

pub fn adversarial_loss_through_discriminator() {
    let (d, _) = Discriminator::build_with(DISC_WIDTHS, 5, DType::F64, &Device::Cpu).unwrap();
    let real = uniform(&[2, 3, 16, 16], 0.0, 1.0, 1);
    let fake = var(&[2, 3, 16, 16], 0.0, 1.0, 2);
    let mask = binary_mask(&[2, 1, 16, 16], 0.3, 3);
    let losses = || {
        adversarial_losses(&d.forward(&real, &mask, Mode::Eval)?, &d.forward(fake.as_tensor(), &mask, Mode::Eval)?)
    };
    // L_D and L_G separately: inside the hinge their fake-score terms cancel in the sum.
    let r = gradcheck_with(&[fake.clone()], &|| Ok(losses()?.0), &|| {}, 1e-6, 0.25, 4);
    assert!(r.rel_err < TOL && r.analytic_norm > 0.0, "L_D {r:?}");
    let r = gradcheck_with(&[fake.clone()], &|| Ok(losses()?.1), &|| {}, 1e-6, 0.25, 5);
    assert!(r.rel_err < TOL && r.analytic_norm > 0.0, "L_G {r:?}");
}

pub fn pretraining_heads_and_mim_loss() {
    let pb = ParamBuilder::new(6, DType::F64, &Device::Cpu);
    let seg = SegHead::new(&pb.pp("seg"), 4).unwrap();
    let rec = ReconHead::new(&pb.pp("rec"), 5).unwrap();
    let store = pb.finish();
    let f4 = var(&[1, 4, 1, 1], -1.0, 1.0, 1);
    let f5 = var(&[1, 5, 32, 32], -1.0, 1.0, 2);
    let input = uniform(&[1, 3, 32, 32], 0.0, 1.0, 3);
    let mask = binary_mask(&[1, 1, 32, 32], 0.5, 4);
    let mut vars = all_vars(&store);
    vars.extend([f4.clone(), f5.clone()]);
    let f = || Ok((probe(&seg.forward(f4.as_tensor())?, 8)? + mim_loss(&input, &rec.forward(f5.as_tensor())?, &mask)?)?);
    let r = gradcheck_with(&vars, &f, &|| {}, 1e-6, 0.1, 2);
    assert!(r.rel_err < TOL, "{r:?}");
}

/// Whole generator with the full training objective except the adversarial
/// term, on a 0.05% sample of the parameters (at least one per tensor).
pub fn end_to_end_nano_probe() {
    let mut cfg = preset("nano").unwrap();
    cfg.input_size = 32;
    let g = Generator::new(&cfg, 7, DType::F64, &Device::Cpu).unwrap();
    let phi = FeatureExtractor::random(1, [4, 6, 8], DType::F64, &Device::Cpu).unwrap();
    let input = uniform(&[1, 3, 32, 32], 0.0, 1.0, 1);
    let gt = uniform(&[1, 3, 32, 32], 0.0, 1.0, 2);
    let mask = binary_mask(&[1, 1, 32, 32], 0.3, 3);
    let store = g.store();
    let buffers = store.snapshot().unwrap();
    let reset = || store.restore_filtered(&buffers, |k| store.get(k).is_none()).unwrap();
    let w = LossWeights::default();
    let f = || {
        let out = g.forward(&input, Mode::Train)?;
        let aux = out.aux.as_ref().unwrap();
        let s = ScaleOutputs { full: &out.image, half: Some(&aux.image_half), quarter: Some(&aux.image_quarter) };
        let composite = text_eraser::losses::composite_image(&out.image, &input, &mask)?;
        let parts = [
            (msr_loss(&s, &gt, &mask, &w)? * w.alpha_msr)?,
            (perceptual_loss(&out.image, &composite, &gt, &phi)? * w.alpha_per)?,
            (style_loss(&out.image, &composite, &gt, &phi)? * w.alpha_sty)?,
            (dice_loss(&aux.mask, &mask)? * w.alpha_seg)?,
        ];
        Ok(Tensor::stack(&parts, 0)?.sum_all()?)
    };
    // Skip the stage-1 mask token, which is unused without a masked input.
    let vars: Vec<Var> = store.vars().filter(|(k, _)| !k.ends_with("mask_token")).map(|(_, v)| v.clone()).collect();
    let r = gradcheck_with(&vars, &f, &reset, 1e-5, 0.0005, 3);
    assert!(r.rel_err < 1e-3, "{r:?}");
    assert!(r.checked > 100);
}

pub const CASES: &[(&str, fn())] = &[
    ("swin_block_unshifted", swin_block_unshifted),
    ("swin_block_shifted_with_padding", swin_block_shifted_with_padding),
    ("swinv2_block_shifted", swinv2_block_shifted),
    ("swinv2_block_padded", swinv2_block_padded),
    ("pvt_block", pvt_block),
    ("patch_embed_and_split", patch_embed_and_split),
    ("lateral_connection", lateral_connection),
    ("msr_loss_gradient", msr_loss_gradient),
    ("perceptual_and_style_gradients", perceptual_and_style_gradients),
    ("dice_gradient", dice_gradient),
    ("hinge_gradients", hinge_gradients),
    ("discriminator_gradient", discriminator_gradient),
    ("adversarial_loss_through_discriminator", adversarial_loss_through_discriminator),
    ("pretraining_heads_and_mim_loss", pretraining_heads_and_mim_loss),
    ("end_to_end_nano_probe", end_to_end_nano_probe),
];
