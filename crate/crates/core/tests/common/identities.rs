//! Losses at perfect predictions, compositing edge cases and fixed values.

use candle_core::{DType, Device, Tensor};
use text_eraser::data::{sample_seed, synth_sample};
use text_eraser::image::Image;
use text_eraser::losses::{
    area_downsample, composite_image, dice_loss, msr_loss, perceptual_loss, style_loss, total_loss, total_loss_values,
    FeatureExtractor, LossParts, LossWeights, ScaleOutputs,
};
use text_eraser::nn::scalar_f64;

use super::{binary_mask, max_abs_diff, uniform};

const ZERO_TOL: f64 = 1e-8;

/// Input, ground truth and mask of two synthetic samples as f64 batches.
fn synthetic_batch() -> (Tensor, Tensor, Tensor) {
    let samples: Vec<_> = (0..2).map(|i| synth_sample(sample_seed(3, i), 64).unwrap()).collect();
    let batch = |imgs: Vec<&Image>| Image::batch_tensor(&imgs, DType::F64, &Device::Cpu).unwrap();
    (
        batch(samples.iter().map(|s| &s.input).collect()),
        batch(samples.iter().map(|s| &s.gt).collect()),
        batch(samples.iter().map(|s| &s.mask).collect()),
    )
}

pub fn reconstruction_losses_vanish_on_ground_truth() {
    let (input, gt, mask) = synthetic_batch();
    let half = area_downsample(&gt, 2).unwrap();
    let quarter = area_downsample(&gt, 4).unwrap();
    let s = ScaleOutputs { full: &gt, half: Some(&half), quarter: Some(&quarter) };
    let msr = scalar_f64(&msr_loss(&s, &gt, &mask, &LossWeights::default()).unwrap()).unwrap();
    assert!(msr.abs() <= ZERO_TOL, "msr {msr}");

    // The input agrees with the ground truth outside text boxes, so the
    // composite of a perfect output is the ground truth itself.
    let composite = composite_image(&gt, &input, &mask).unwrap();
    assert_eq!(max_abs_diff(&composite, &gt), 0.0);
    let phi = FeatureExtractor::random(0, [8, 16, 32], DType::F64, &Device::Cpu).unwrap();
    let per = scalar_f64(&perceptual_loss(&gt, &composite, &gt, &phi).unwrap()).unwrap();
    let sty = scalar_f64(&style_loss(&gt, &composite, &gt, &phi).unwrap()).unwrap();
    assert!(per.abs() <= ZERO_TOL, "per {per}");
    assert!(sty.abs() <= ZERO_TOL, "sty {sty}");
}

pub fn dice_vanishes_on_perfect_mask() {
    let (_, _, mask) = synthetic_batch();
    let d = scalar_f64(&dice_loss(&mask, &mask).unwrap()).unwrap();
    assert!(d.abs() <= ZERO_TOL, "dice {d}");
    let empty = Tensor::zeros((1, 1, 8, 8), DType::F64, &Device::Cpu).unwrap();
    assert_eq!(scalar_f64(&dice_loss(&empty, &empty).unwrap()).unwrap(), 0.0);
}

pub fn dice_of_half_against_one() {
    let pred = Tensor::full(0.5f64, (1, 1, 16, 16), &Device::Cpu).unwrap();
    let gt = Tensor::ones((1, 1, 16, 16), DType::F64, &Device::Cpu).unwrap();
    let d = scalar_f64(&dice_loss(&pred, &gt).unwrap()).unwrap();
    assert!((d - 0.2).abs() < 1e-6, "dice {d}");
}

pub fn composite_boundary_masks() {
    let out = uniform(&[2, 3, 8, 8], 0.0, 1.0, 1);
    let input = uniform(&[2, 3, 8, 8], 0.0, 1.0, 2);
    let zeros = Tensor::zeros((2, 1, 8, 8), DType::F64, &Device::Cpu).unwrap();
    let ones = Tensor::ones((2, 1, 8, 8), DType::F64, &Device::Cpu).unwrap();
    assert_eq!(max_abs_diff(&composite_image(&out, &input, &zeros).unwrap(), &input), 0.0);
    assert_eq!(max_abs_diff(&composite_image(&out, &input, &ones).unwrap(), &out), 0.0);
    // Mixed mask: each pixel comes from exactly one source.
    let mask = binary_mask(&[2, 1, 8, 8], 0.5, 3);
    let c = composite_image(&out, &input, &mask).unwrap();
    let from_out = (&c - &out).unwrap().abs().unwrap().broadcast_mul(&mask).unwrap();
    let from_in = (&c - &input).unwrap().abs().unwrap().broadcast_mul(&(1.0 - &mask).unwrap()).unwrap();
    assert_eq!(scalar_f64(&(from_out.sum_all().unwrap() + from_in.sum_all().unwrap()).unwrap()).unwrap(), 0.0);
}

pub fn total_of_unit_terms() {
    let w = LossWeights::default();
    let ones = LossParts { msr: 1.0, per: 1.0, sty: 1.0, seg: 1.0, adv: 1.0 };
    assert_eq!(total_loss_values(&ones, &w).unwrap(), 122.11);
    let one = Tensor::new(1.0f64, &Device::Cpu).unwrap();
    let parts = LossParts { msr: one.clone(), per: one.clone(), sty: one.clone(), seg: one.clone(), adv: one };
    assert_eq!(scalar_f64(&total_loss(&parts, &w).unwrap()).unwrap(), 122.11);
}

pub const CASES: &[(&str, fn())] = &[
    ("reconstruction_losses_vanish_on_ground_truth", reconstruction_losses_vanish_on_ground_truth),
    ("dice_vanishes_on_perfect_mask", dice_vanishes_on_perfect_mask),
    ("dice_of_half_against_one", dice_of_half_against_one),
    ("composite_boundary_masks", composite_boundary_masks),
    ("total_of_unit_terms", total_of_unit_terms),
];
