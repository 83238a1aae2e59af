//! Structural similarity on luma planes: 11x11 Gaussian window (sigma 1.5),
//! constants for a dynamic range of 1, population (co)variances, mean over
//! windows that fit entirely inside the image.

use crate::data::Image;
use crate::error::{Error, Result};

pub const SIGMA: f64 = 1.5;
pub const RADIUS: usize = 5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn kernel() -> [f64; 2 * RADIUS + 1] {
    let mut k = [0.0; 2 * RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - RADIUS as f64;
        *v = (-x * x / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable valid-mode filtering: `[h, w] -> [h - 2R, w - 2R]`.
fn filter(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; oh * w];
    for i in 0..oh {
        for j in 0..w {
            rows[i * w + j] = (0..n).map(|t| k[t] * x[(i + t) * w + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|t| k[t] * rows[i * w + j + t]).sum();
        }
    }
    out
}

/// SSIM of two `[h, w]` planes with values in [0, 1].
pub fn ssim_planes(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    let win = 2 * RADIUS + 1;
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::shape("ssim", format!("planes of {} and {} values for {h}x{w}", a.len(), b.len())));
    }
    if h < win || w < win {
        return Err(Error::shape("ssim", format!("{h}x{w} image is smaller than the {win}x{win} window")));
    }
    let k = kernel();
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (ua, ub) = (filter(a, h, w, &k), filter(b, h, w, &k));
    let (uaa, ubb, uab) = (filter(&aa, h, w, &k), filter(&bb, h, w, &k), filter(&ab, h, w, &k));
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut sum = 0.0;
    for i in 0..ua.len() {
        let (va, vb) = (uaa[i] - ua[i] * ua[i], ubb[i] - ub[i] * ub[i]);
        let vab = uab[i] - ua[i] * ub[i];
        let num = (2.0 * ua[i] * ub[i] + c1) * (2.0 * vab + c2);
        let den = (ua[i] * ua[i] + ub[i] * ub[i] + c1) * (va + vb + c2);
        sum += num / den;
    }
    Ok(sum / ua.len() as f64)
}

/// SSIM between the luma planes of two equally sized images.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape("ssim", format!("{}x{} vs {}x{} images", a.height, a.width, b.height, b.width)));
    }
    ssim_planes(&a.luma(), &b.luma(), a.height, a.width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn plane(seed: u64, n: usize) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.random::<f64>()).collect()
    }

    #[test]
    fn kernel_is_normalised_and_symmetric() {
        let k = kernel();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((0..k.len()).all(|i| k[i] == k[k.len() - 1 - i]));
    }

    #[test]
    fn constant_planes() {
        let a = vec![0.25; 16 * 16];
        assert_eq!(ssim_planes(&a, &a, 16, 16).unwrap(), 1.0);
        // Means differ, no variance: luminance term only.
        let b = vec![0.75; 16 * 16];
        let c1 = K1 * K1;
        let expect = (2.0 * 0.25 * 0.75 + c1) / (0.25f64.powi(2) + 0.75f64.powi(2) + c1);
        assert!((ssim_planes(&a, &b, 16, 16).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn small_or_mismatched_images_are_rejected() {
        assert!(ssim_planes(&[0.0; 100], &[0.0; 100], 10, 10).is_err());
        let a = Image::new(12, 12, 1, vec![0.0; 144]).unwrap();
        let b = Image::new(12, 13, 1, vec![0.0; 156]).unwrap();
        assert!(ssim(&a, &b).is_err());
    }

    proptest! {
        #[test]
        fn identity_and_symmetry(s1 in 0u64..1000, s2 in 0u64..1000, h in 11usize..20, w in 11usize..20) {
            let (a, b) = (plane(s1, h * w), plane(s2, h * w));
            prop_assert_eq!(ssim_planes(&a, &a, h, w).unwrap(), 1.0);
            let (x, y) = (ssim_planes(&a, &b, h, w).unwrap(), ssim_planes(&b, &a, h, w).unwrap());
            prop_assert!((x - y).abs() <= 1e-9);
            prop_assert!((-1.0..=1.0 + 1e-12).contains(&x));
        }
    }
}
