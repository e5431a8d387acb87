//! Full-reference image quality: PSNR and mean local SSIM on unit-range
//! grayscale images.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// PSNR in dB for unit dynamic range, capped at 100 dB so identical images
/// stay finite and comparable.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let n = a.numel() as f64;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse <= 0.0 {
        return Ok(100.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(100.0))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[i * SSIM_WINDOW + j] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean local SSIM over all fully-interior 11x11 windows, Gaussian-weighted
/// (sigma 1.5), unit dynamic range. Inputs are rank-2 [H,W] with H,W >= 11.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.rank() != 2 {
        return Err(Error::shape("ssim", format!("expected [H,W], got {:?}", a.shape())));
    }
    let (h, w) = (a.shape()[0], a.shape()[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArg(format!(
            "ssim needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let ad = a.data();
    let bd = b.data();
    let mut total = 0.0;
    let mut count = 0usize;
    for top in 0..=(h - SSIM_WINDOW) {
        for left in 0..=(w - SSIM_WINDOW) {
            let mut mx = 0.0;
            let mut my = 0.0;
            let mut xx = 0.0;
            let mut yy = 0.0;
            let mut xy = 0.0;
            for i in 0..SSIM_WINDOW {
                let row = (top + i) * w + left;
                for j in 0..SSIM_WINDOW {
                    let g = win[i * SSIM_WINDOW + j];
                    let x = ad[row + j];
                    let y = bd[row + j];
                    mx += g * x;
                    my += g * y;
                    xx += g * x * x;
                    yy += g * y * y;
                    xy += g * x * y;
                }
            }
            let vx = xx - mx * mx;
            let vy = yy - my * my;
            let cxy = xy - mx * my;
            let s = ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        let mut data = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                data.push(f(i, j));
            }
        }
        Tensor::from_vec(&[h, w], data).unwrap()
    }

    #[test]
    fn psnr_identical_caps_at_100() {
        let a = image(16, 16, |i, j| (i * 16 + j) as f64 / 256.0);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
    }

    #[test]
    fn psnr_uniform_tenth_offset_is_20db() {
        let a = image(16, 16, |_, _| 0.4);
        let b = image(16, 16, |_, _| 0.5);
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "psnr {p}");
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = image(16, 16, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = image(8, 8, |_, _| 0.5);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn ssim_monotone_under_growing_noise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let a = image(24, 24, |i, j| 0.5 + 0.3 * ((i as f64 / 5.0).sin() * (j as f64 / 7.0).cos()));
        let noisy = |scale: f64, rng: &mut rand_chacha::ChaCha8Rng| {
            let d = a
                .data()
                .iter()
                .map(|v| (v + rng.gen_range(-scale..scale)).clamp(0.0, 1.0))
                .collect();
            Tensor::from_vec(&[24, 24], d).unwrap()
        };
        let s1 = ssim(&a, &noisy(0.05, &mut rng)).unwrap();
        let s2 = ssim(&a, &noisy(0.25, &mut rng)).unwrap();
        assert!(s1 > s2, "ssim {s1} vs {s2}");
        assert!(s1 > 0.8 && s2 < s1);
    }

    #[test]
    fn ssim_anticorrelated_image_is_strongly_negative() {
        let a = crate::degrade::synth_clean(5, 32, 32);
        let inv =
            Tensor::from_vec(&[32, 32], a.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        let s = ssim(&a, &inv).unwrap();
        assert!(s < 0.1, "inverted structure should not look similar: {s}");
        assert!((s - -0.623438938197823).abs() < 1e-9, "ssim drifted: {s}");
    }

    #[test]
    fn metrics_regression_on_frozen_blur_pair() {
        use crate::degrade::{apply_degradation, synth_clean, DegradationParams, TaskSpec};
        let clean = synth_clean(77, 32, 32);
        let spec = TaskSpec::parse("B").unwrap();
        let p = DegradationParams { sigma_b: 2.0, ..Default::default() };
        let blurred = apply_degradation(&clean, &spec, &p).unwrap();
        let s = ssim(&clean, &blurred).unwrap();
        let d = psnr(&clean, &blurred).unwrap();
        assert!((s - 0.601563734364514).abs() < 1e-9, "ssim drifted: {s}");
        assert!((d - 22.504628589529666).abs() < 1e-9, "psnr drifted: {d}");
    }
}
