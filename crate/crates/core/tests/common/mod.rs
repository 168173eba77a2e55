//! Shared helpers for integration tests: central finite differences and
//! small fixtures.
#![allow(dead_code)]

pub mod gradients;
pub mod identities;
pub mod metric_oracles;
pub mod pipeline;
pub mod segmim;
pub mod shapes;

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use text_eraser::Result;

/// Loss networks for desk-scale training runs: the perceptual extractor and
/// discriminator shrunk so an epoch fits on one CPU core. Gram entries scale
/// as 1/C, so the style weight follows the extractor's 1/8 width.
pub const DESK_OVERRIDES: &[&str] =
    &["extractor.widths=[8,16,32]", "discriminator.widths=[16,32,64,64,64]", "loss.alpha_sty=15"];

/// Model and schedule of the 30-epoch desk run: nano with doubled encoder
/// widths and a 1e-3 -> 1e-4 learning rate.
pub const DESK_RUN: &[&str] = &[
    "model.enc_channels=[32,64,128,256]",
    "model.dec_last_in_channels=16",
    "model.dec_last_out_channels=8",
    "train.lr=0.001",
    "train.final_lr=0.0001",
];

/// Outcome of comparing analytic and numerical gradients.
#[derive(Debug)]
pub struct GradCheck {
    /// ||g_analytic - g_numeric|| / max(||g_analytic|| + ||g_numeric||, 1e-12)
    pub rel_err: f64,
    pub checked: usize,
    pub analytic_norm: f64,
}

fn set_elem(var: &Var, idx: usize, value: f64) {
    let shape = var.dims().to_vec();
    let mut flat = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    flat[idx] = value;
    var.set(&Tensor::from_vec(flat, shape, var.device()).unwrap()).unwrap();
}

fn get_elem(var: &Var, idx: usize) -> f64 {
    var.as_tensor().flatten_all().unwrap().get(idx).unwrap().to_scalar::<f64>().unwrap()
}

/// Checks d f / d vars by central differences with step `h`. `fraction`
/// selects a random subset of elements per variable (at least one);
/// `reset` runs before every evaluation to restore mutable state.
pub fn gradcheck_with(
    vars: &[Var],
    f: &dyn Fn() -> Result<Tensor>,
    reset: &dyn Fn(),
    h: f64,
    fraction: f64,
    seed: u64,
) -> GradCheck {
    reset();
    let loss = f().unwrap();
    assert_eq!(loss.dtype(), DType::F64, "gradient checks run in f64");
    let grads = loss.backward().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut diff2, mut a2, mut n2, mut checked) = (0.0, 0.0, 0.0, 0);
    for var in vars {
        let n = var.elem_count();
        let g = match grads.get(var) {
            Some(g) => g.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            None => vec![0.0; n],
        };
        let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
        let idx = if k == n { (0..n).collect::<Vec<_>>() } else { sample(&mut rng, n, k).into_vec() };
        for i in idx {
            let orig = get_elem(var, i);
            set_elem(var, i, orig + h);
            reset();
            let up = f().unwrap().to_scalar::<f64>().unwrap();
            set_elem(var, i, orig - h);
            reset();
            let down = f().unwrap().to_scalar::<f64>().unwrap();
            set_elem(var, i, orig);
            let num = (up - down) / (2.0 * h);
            diff2 += (g[i] - num).powi(2);
            a2 += g[i] * g[i];
            n2 += num * num;
            checked += 1;
        }
    }
    let denom = (a2.sqrt() + n2.sqrt()).max(1e-12);
    GradCheck { rel_err: diff2.sqrt() / denom, checked, analytic_norm: a2.sqrt() }
}

pub fn gradcheck(vars: &[Var], f: &dyn Fn() -> Result<Tensor>) -> GradCheck {
    gradcheck_with(vars, f, &|| {}, 1e-6, 1.0, 0)
}

/// Uniform random f64 tensor in `[lo, hi)`.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn var(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Var {
    Var::from_tensor(&uniform(shape, lo, hi, seed)).unwrap()
}

/// Scalar probe `sum(out * r)` with a fixed random `r`, so that every
/// output element contributes a distinct weight.
pub fn probe(out: &Tensor, seed: u64) -> Result<Tensor> {
    let r = uniform(out.dims(), -1.0, 1.0, seed).to_dtype(out.dtype())?;
    Ok((out * r)?.sum_all()?)
}

pub fn binary_mask(shape: &[usize], p: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| if rng.gen_bool(p) { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}
