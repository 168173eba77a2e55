//! Image metrics against closed forms and independent reference
//! implementations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use text_eraser::image::Image;
use text_eraser::metrics::{age_peps_pceps, mse, mssim, psnr, ssim, DEFAULT_ERROR_THRESHOLD};

fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f32> = (0..h * w * c).map(|_| rng.gen_range(0..=255u8) as f32 / 255.0).collect();
    Image::from_fn(h, w, c, |y, x, ch| v[(y * w + x) * c + ch])
}

pub fn psnr_of_unit_offset() {
    let a = Image::from_fn(32, 32, 3, |y, x, c| ((y * 7 + x * 3 + c) % 200) as f32 / 255.0);
    let b = Image::from_fn(32, 32, 3, |y, x, c| ((y * 7 + x * 3 + c) % 200 + 1) as f32 / 255.0);
    let p = psnr(&a, &b).unwrap();
    assert!((p - 48.13).abs() < 0.01, "{p}");
}

pub fn psnr_matches_mse() {
    for seed in 0..20 {
        let a = random_image(17, 23, 3, seed);
        let b = random_image(17, 23, 3, seed + 100);
        let (p, m) = (psnr(&a, &b).unwrap(), mse(&a, &b).unwrap());
        assert!((p - 10.0 * (1.0 / m).log10()).abs() < 1e-9, "seed {seed}: {p} vs mse {m}");
    }
    let a = random_image(8, 8, 1, 0);
    assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    assert_eq!(mse(&a, &a).unwrap(), 0.0);
}

/// Reference error statistics of a 3x3 gray difference image. Out-of-image
/// neighbours repeat the pixel itself, which is what border replication
/// gives on a 3x3 grid.
fn reference_3x3(diff: &[[u8; 3]; 3], threshold: u8) -> (f64, f64, f64) {
    let err = |y: i32, x: i32| diff[y as usize][x as usize] > threshold;
    let (mut sum, mut errors, mut clustered) = (0u32, 0u32, 0u32);
    for y in 0..3i32 {
        for x in 0..3i32 {
            sum += diff[y as usize][x as usize] as u32;
            if !err(y, x) {
                continue;
            }
            errors += 1;
            let all = [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().all(|&(dy, dx)| {
                let (ny, nx) = (y + dy, x + dx);
                if (0..3).contains(&ny) && (0..3).contains(&nx) {
                    err(ny, nx)
                } else {
                    true
                }
            });
            if all {
                clustered += 1;
            }
        }
    }
    (sum as f64 / 9.0, errors as f64 / 9.0, clustered as f64 / 9.0)
}

pub fn exhaustive_binary_3x3() {
    let zeros = Image::new(3, 3, 3);
    let threshold = DEFAULT_ERROR_THRESHOLD;
    for level in [255u8, threshold, threshold + 1] {
        for bits in 0u32..512 {
            let on = |y: usize, x: usize| bits >> (y * 3 + x) & 1 == 1;
            let img = Image::from_fn(3, 3, 3, |y, x, _| if on(y, x) { level as f32 / 255.0 } else { 0.0 });
            let mut diff = [[0u8; 3]; 3];
            for (y, row) in diff.iter_mut().enumerate() {
                for (x, d) in row.iter_mut().enumerate() {
                    *d = if on(y, x) { level } else { 0 };
                }
            }
            let got = age_peps_pceps(&img, &zeros, threshold).unwrap();
            let want = reference_3x3(&diff, threshold);
            assert_eq!((got.age, got.peps, got.pceps), want, "level {level} pattern {bits:09b}");
        }
    }
}

/// Direct single-scale SSIM: explicit 2-D Gaussian window over every valid
/// position, central second moments.
fn reference_ssim(a: &Image, b: &Image) -> f64 {
    let (n, sigma) = (11usize, 1.5f64);
    let mut w = vec![vec![0.0; n]; n];
    let mut total = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let qa = a.to_u8();
    let qb = b.to_u8();
    let px = |q: &[u8], y: usize, x: usize, c: usize| q[(y * a.width + x) * a.channels + c] as f64;
    let mut acc = 0.0;
    for c in 0..a.channels {
        let mut sum = 0.0;
        let mut count = 0;
        for y0 in 0..=a.height - n {
            for x0 in 0..=a.width - n {
                let win = |f: &dyn Fn(usize, usize) -> f64| {
                    let mut s = 0.0;
                    for i in 0..n {
                        for j in 0..n {
                            s += w[i][j] / total * f(y0 + i, x0 + j);
                        }
                    }
                    s
                };
                let ma = win(&|y, x| px(&qa, y, x, c));
                let mb = win(&|y, x| px(&qb, y, x, c));
                let va = win(&|y, x| (px(&qa, y, x, c) - ma).powi(2));
                let vb = win(&|y, x| (px(&qb, y, x, c) - mb).powi(2));
                let cov = win(&|y, x| (px(&qa, y, x, c) - ma) * (px(&qb, y, x, c) - mb));
                sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        acc += sum / count as f64;
    }
    acc / a.channels as f64
}

pub fn ssim_against_reference() {
    for seed in 0..4 {
        let a = random_image(16, 16, 3, seed);
        // Correlated pair: a blend of `a` and noise.
        let noise = random_image(16, 16, 3, seed + 50);
        let b = Image::from_fn(16, 16, 3, |y, x, c| 0.7 * a.get(y, x, c) + 0.3 * noise.get(y, x, c));
        let want = reference_ssim(&a, &b);
        let got = ssim(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-6, "seed {seed}: {got} vs {want}");
        // 16 pixels admit a single scale, so MSSIM reduces to SSIM.
        let ms = mssim(&a, &b).unwrap();
        assert!((ms - want.clamp(0.0, 1.0)).abs() < 1e-6, "seed {seed}: mssim {ms} vs {want}");
    }
}

pub fn mssim_of_identical_images() {
    for (side, seed) in [(16, 0), (64, 1), (200, 2)] {
        let a = random_image(side, side, 3, seed);
        assert!((mssim(&a, &a).unwrap() - 1.0).abs() < 1e-12, "side {side}");
    }
}

pub const CASES: &[(&str, fn())] = &[
    ("psnr_of_unit_offset", psnr_of_unit_offset),
    ("psnr_matches_mse", psnr_matches_mse),
    ("exhaustive_binary_3x3", exhaustive_binary_3x3),
    ("ssim_against_reference", ssim_against_reference),
    ("mssim_of_identical_images", mssim_of_identical_images),
];
