//! Feature-map shapes of every preset at its input size and of nano at 64.

use candle_core::{DType, Device, Tensor};
use text_eraser::config::{preset, ModelConfig, PRESET_NAMES};
use text_eraser::model::Generator;
use text_eraser::nn::{no_grad, Mode};

/// Forward passes run without an autograd graph to bound memory at 512.
fn check(name: &str, cfg: &ModelConfig, side: usize) {
    no_grad(|| check_shapes(name, cfg, side));
}

fn check_shapes(name: &str, cfg: &ModelConfig, side: usize) {
    let dev = Device::Cpu;
    let g = Generator::new(cfg, 0, DType::F32, &dev).unwrap();
    let x = Tensor::rand(0f32, 1f32, (1, 3, side, side), &dev).unwrap();

    let enc = g.encode(&x, None).unwrap();
    for (i, f) in enc.feats.iter().enumerate() {
        let s = side >> (i + 2);
        assert_eq!(f.dims(), &[1, cfg.enc_channels[i], s, s], "{name} encoder stage {}", i + 1);
    }

    let out = g.decoder().forward(&enc, Mode::Train).unwrap();
    let dc = cfg.decoder_channels();
    for (i, f) in out.feats.iter().enumerate() {
        let s = side >> (4 - i);
        assert_eq!(f.dims(), &[1, dc[i], s, s], "{name} decoder stage {}", i + 1);
    }
    assert_eq!(out.image.dims(), &[1, 3, side, side], "{name} image");
    let aux = out.aux.as_ref().expect("training mode has auxiliary outputs");
    assert_eq!(aux.image_half.dims(), &[1, 3, side / 2, side / 2]);
    assert_eq!(aux.image_quarter.dims(), &[1, 3, side / 4, side / 4]);
    assert_eq!(aux.mask.dims(), &[1, 1, side, side]);
}

pub fn every_preset_at_input_size() {
    for name in PRESET_NAMES {
        let cfg = preset(name).unwrap();
        check(name, &cfg, cfg.input_size);
    }
}

pub fn nano_at_64_and_eval_has_no_aux() {
    let mut cfg = preset("nano").unwrap();
    cfg.input_size = 64;
    check("nano", &cfg, 64);
    let g = Generator::new(&cfg, 0, DType::F32, &Device::Cpu).unwrap();
    let x = Tensor::zeros((2, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
    let out = g.forward(&x, Mode::Eval).unwrap();
    assert!(out.aux.is_none());
    assert_eq!(out.image.dims(), &[2, 3, 64, 64]);
}

pub const CASES: &[(&str, fn())] = &[
    ("every_preset_at_input_size", every_preset_at_input_size),
    ("nano_at_64_and_eval_has_no_aux", nano_at_64_and_eval_has_no_aux),
];
