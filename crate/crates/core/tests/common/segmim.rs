//! Masking statistics, loss locality, encoder finetuning and a pretraining
//! overfit probe.

use candle_core::{DType, Device, Tensor};
use text_eraser::data::{sample_seed, synth_sample};
use text_eraser::image::Image;
use text_eraser::model::{DECODER_PREFIX, ENCODER_PREFIX, SEG_HEAD_PREFIX};
use text_eraser::nn::scalar_f64;
use text_eraser::segmim::{generate_mim_mask, mim_loss};
use text_eraser::settings::RunConfig;
use text_eraser::trainer::{Phase, TrainState};

use super::uniform;

/// Learning rate of the overfit probe, constant over its 200 steps.
pub const OVERFIT_LR: f64 = 1e-3;
pub const OVERFIT_STEPS: usize = 200;

pub fn mask_count_at_512() {
    for seed in 0..20 {
        let m = generate_mim_mask(512, 512, 0.6, 32, seed).unwrap();
        assert_eq!(m.grid.len(), 256);
        assert_eq!(m.masked_patches(), 154, "seed {seed}");
    }
    // Masked pixels form whole patches.
    let m = generate_mim_mask(512, 512, 0.6, 32, 7).unwrap();
    let t = m.to_tensor(DType::F64, &Device::Cpu).unwrap();
    assert_eq!(scalar_f64(&t.sum_all().unwrap()).unwrap(), (154 * 32 * 32) as f64);
}

/// Replaces every unmasked pixel of `x` with fresh noise.
fn perturb_unmasked(x: &Tensor, mask: &Tensor, seed: u64) -> Tensor {
    let noise = uniform(x.dims(), -5.0, 5.0, seed);
    let keep = mask.broadcast_as(x.dims()).unwrap();
    keep.where_cond(x, &noise).unwrap()
}

pub fn mim_loss_ignores_unmasked_pixels() {
    let mask = generate_mim_mask(64, 64, 0.6, 16, 3).unwrap().to_tensor(DType::F64, &Device::Cpu).unwrap();
    let mask_u8 = mask.to_dtype(DType::U8).unwrap();
    let input = uniform(&[1, 3, 64, 64], 0.0, 1.0, 1);
    let rec = uniform(&[1, 3, 64, 64], 0.0, 1.0, 2);
    let base = scalar_f64(&mim_loss(&input, &rec, &mask).unwrap()).unwrap();
    for seed in 0..5 {
        let i2 = perturb_unmasked(&input, &mask_u8, 10 + seed);
        let r2 = perturb_unmasked(&rec, &mask_u8, 20 + seed);
        let l = scalar_f64(&mim_loss(&i2, &r2, &mask).unwrap()).unwrap();
        assert_eq!(l.to_bits(), base.to_bits(), "seed {seed}");
    }
}

pub fn finetune_leaves_decoder_untouched() {
    let cfg = RunConfig::from_sources("", &["model.input_size=64".into()]).unwrap();
    let mut st = TrainState::new(Phase::FinetuneEncoder, &cfg, DType::F32, &Device::Cpu).unwrap();
    let decoder_before: Vec<(String, Vec<f32>)> = st
        .generator
        .store()
        .select(&[DECODER_PREFIX])
        .into_iter()
        .map(|(k, v)| (k, v.as_tensor().flatten_all().unwrap().to_vec1().unwrap()))
        .collect();
    assert!(!decoder_before.is_empty());
    let s = synth_sample(sample_seed(4, 0), 64).unwrap();
    let input = s.input.to_tensor(DType::F32, &Device::Cpu).unwrap();
    let seg = s.mask.to_tensor(DType::F32, &Device::Cpu).unwrap();
    for _ in 0..2 {
        let (_, updated) = st.finetune_step_tensors(&input, &seg, 1e-3).unwrap();
        assert!(!updated.is_empty());
        assert!(updated.iter().all(|k| k.starts_with(ENCODER_PREFIX) || k.starts_with(SEG_HEAD_PREFIX)), "{updated:?}");
    }
    for (k, before) in decoder_before {
        let after: Vec<f32> = st.generator.store().get(&k).unwrap().as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()), "{k} changed");
    }
}

/// Initial and final (dice, mim) of the single-sample pretraining overfit.
pub fn overfit_losses() -> ((f64, f64), (f64, f64)) {
    let cfg = RunConfig::from_sources("", &["model.input_size=64".into()]).unwrap();
    let mut st = TrainState::new(Phase::Pretrain, &cfg, DType::F32, &Device::Cpu).unwrap();
    let s = synth_sample(sample_seed(5, 0), 64).unwrap().to_pretrain();
    let input = Image::batch_tensor(&[&s.input], DType::F32, &Device::Cpu).unwrap();
    let seg = Image::batch_tensor(&[&s.seg], DType::F32, &Device::Cpu).unwrap();
    let mask = generate_mim_mask(64, 64, 0.6, 16, 0).unwrap().to_tensor(DType::F32, &Device::Cpu).unwrap();
    let mut first = None;
    let mut last = (0.0, 0.0);
    for _ in 0..OVERFIT_STEPS {
        let l = st.pretrain_step_tensors(&input, &seg, &mask, OVERFIT_LR).unwrap();
        last = (l["dice"], l["mim"]);
        first.get_or_insert(last);
    }
    (first.unwrap(), last)
}

pub fn pretrain_overfit() {
    let ((d0, m0), (d1, m1)) = overfit_losses();
    assert!(d1 < 0.1 * d0, "dice {d0} -> {d1}");
    assert!(m1 < 0.1 * m0, "mim {m0} -> {m1}");
}

pub const CASES: &[(&str, fn())] = &[
    ("mask_count_at_512", mask_count_at_512),
    ("mim_loss_ignores_unmasked_pixels", mim_loss_ignores_unmasked_pixels),
    ("finetune_leaves_decoder_untouched", finetune_leaves_decoder_untouched),
    ("pretrain_overfit", pretrain_overfit),
];
