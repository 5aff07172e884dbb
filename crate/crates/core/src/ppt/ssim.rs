//! Structural similarity with an analytic gradient.
//!
//! Mean local SSIM over an 11x11 Gaussian window (sigma 1.5), stabilizers
//! C1 = 0.01^2 and C2 = 0.03^2 for unit dynamic range, computed per channel
//! and averaged. Windows are taken where they fit entirely inside the image
//! (valid mode), so every local statistic is a plain Gaussian-weighted sum.

use ndarray::{Array2, Array3};

use crate::error::{CoreError, Result};
use crate::grid::Image;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

/// Normalized 1D Gaussian window of length [`WINDOW`].
pub fn window_weights() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let mid = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - mid;
        *v = (-x * x / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

fn check_pair(a: &Image, b: &Image) -> Result<(usize, usize, usize)> {
    if a.dim() != b.dim() {
        return Err(CoreError::Shape(format!(
            "image shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (h, w, c) = a.dim();
    if h < WINDOW || w < WINDOW {
        return Err(CoreError::Shape(format!(
            "image {h}x{w} smaller than the {WINDOW}x{WINDOW} window"
        )));
    }
    Ok((h, w, c))
}

/// Valid-mode separable Gaussian filter of one channel.
fn filter_valid(field: &Array2<f64>, kernel: &[f64; WINDOW]) -> Array2<f64> {
    let (h, w) = field.dim();
    let (oh, ow) = (h - WINDOW + 1, w - WINDOW + 1);
    let mut tmp = Array2::zeros((h, ow));
    for r in 0..h {
        for c in 0..ow {
            let mut acc = 0.0;
            for (k, &kw) in kernel.iter().enumerate() {
                acc += kw * field[[r, c + k]];
            }
            tmp[[r, c]] = acc;
        }
    }
    let mut out = Array2::zeros((oh, ow));
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for (k, &kw) in kernel.iter().enumerate() {
                acc += kw * tmp[[r + k, c]];
            }
            out[[r, c]] = acc;
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatter window-space values back to pixels.
fn scatter_valid(field: &Array2<f64>, kernel: &[f64; WINDOW], h: usize, w: usize) -> Array2<f64> {
    let (oh, ow) = field.dim();
    let mut tmp = Array2::<f64>::zeros((h, ow));
    for r in 0..oh {
        for c in 0..ow {
            let v = field[[r, c]];
            if v == 0.0 {
                continue;
            }
            for (k, &kw) in kernel.iter().enumerate() {
                tmp[[r + k, c]] += kw * v;
            }
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..ow {
            let v = tmp[[r, c]];
            if v == 0.0 {
                continue;
            }
            for (k, &kw) in kernel.iter().enumerate() {
                out[[r, c + k]] += kw * v;
            }
        }
    }
    out
}

struct ChannelStats {
    mu_a: Array2<f64>,
    mu_b: Array2<f64>,
    var_a: Array2<f64>,
    var_b: Array2<f64>,
    cov: Array2<f64>,
}

fn channel_stats(a: &Array2<f64>, b: &Array2<f64>, kernel: &[f64; WINDOW]) -> ChannelStats {
    let mu_a = filter_valid(a, kernel);
    let mu_b = filter_valid(b, kernel);
    let e_aa = filter_valid(&(a * a), kernel);
    let e_bb = filter_valid(&(b * b), kernel);
    let e_ab = filter_valid(&(a * b), kernel);
    let var_a = &e_aa - &(&mu_a * &mu_a);
    let var_b = &e_bb - &(&mu_b * &mu_b);
    let cov = &e_ab - &(&mu_a * &mu_b);
    ChannelStats { mu_a, mu_b, var_a, var_b, cov }
}

fn ssim_map(stats: &ChannelStats) -> Array2<f64> {
    let (oh, ow) = stats.mu_a.dim();
    let mut map = Array2::zeros((oh, ow));
    for r in 0..oh {
        for c in 0..ow {
            let a1 = 2.0 * stats.mu_a[[r, c]] * stats.mu_b[[r, c]] + C1;
            let a2 = 2.0 * stats.cov[[r, c]] + C2;
            let b1 = stats.mu_a[[r, c]].powi(2) + stats.mu_b[[r, c]].powi(2) + C1;
            let b2 = stats.var_a[[r, c]] + stats.var_b[[r, c]] + C2;
            map[[r, c]] = (a1 * a2) / (b1 * b2);
        }
    }
    map
}

/// Mean SSIM of two images.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    let (_, _, channels) = check_pair(a, b)?;
    let kernel = window_weights();
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..channels {
        let ac = a.index_axis(ndarray::Axis(2), ch).to_owned();
        let bc = b.index_axis(ndarray::Axis(2), ch).to_owned();
        let stats = channel_stats(&ac, &bc, &kernel);
        let map = ssim_map(&stats);
        total += map.sum();
        count += map.len();
    }
    Ok(total / count as f64)
}

/// Mean SSIM plus its gradient with respect to the second image.
///
/// The formula is symmetric, so the gradient with respect to the first image
/// is `ssim_with_gradient(b, a)`.
pub fn ssim_with_gradient(a: &Image, b: &Image) -> Result<(f64, Image)> {
    let (h, w, channels) = check_pair(a, b)?;
    let kernel = window_weights();
    let mut grad = Array3::zeros((h, w, channels));
    let mut total = 0.0;
    let mut count = 0usize;

    for ch in 0..channels {
        let ac = a.index_axis(ndarray::Axis(2), ch).to_owned();
        let bc = b.index_axis(ndarray::Axis(2), ch).to_owned();
        let stats = channel_stats(&ac, &bc, &kernel);
        let map = ssim_map(&stats);
        total += map.sum();
        count += map.len();

        let (oh, ow) = map.dim();
        let mut d_mu_b = Array2::zeros((oh, ow));
        let mut d_var_b = Array2::zeros((oh, ow));
        let mut d_cov = Array2::zeros((oh, ow));
        for r in 0..oh {
            for c in 0..ow {
                let mu_a = stats.mu_a[[r, c]];
                let mu_b = stats.mu_b[[r, c]];
                let a1 = 2.0 * mu_a * mu_b + C1;
                let a2 = 2.0 * stats.cov[[r, c]] + C2;
                let b1 = mu_a * mu_a + mu_b * mu_b + C1;
                let b2 = stats.var_a[[r, c]] + stats.var_b[[r, c]] + C2;
                let denom = b1 * b2;
                d_mu_b[[r, c]] = (2.0 * mu_a * a2) / denom - (a1 * a2) * 2.0 * mu_b / (b1 * denom);
                d_cov[[r, c]] = 2.0 * a1 / denom;
                d_var_b[[r, c]] = -(a1 * a2) / (b2 * denom);
            }
        }

        // d var_b / d b_p = 2 w (b_p - mu_b); d cov / d b_p = w (a_p - mu_a).
        let s_mu = scatter_valid(&d_mu_b, &kernel, h, w);
        let s_var = scatter_valid(&d_var_b, &kernel, h, w);
        let s_var_mu = scatter_valid(&(&d_var_b * &stats.mu_b), &kernel, h, w);
        let s_cov = scatter_valid(&d_cov, &kernel, h, w);
        let s_cov_mu = scatter_valid(&(&d_cov * &stats.mu_a), &kernel, h, w);

        for r in 0..h {
            for c in 0..w {
                grad[[r, c, ch]] = s_mu[[r, c]]
                    + 2.0 * (bc[[r, c]] * s_var[[r, c]] - s_var_mu[[r, c]])
                    + ac[[r, c]] * s_cov[[r, c]]
                    - s_cov_mu[[r, c]];
            }
        }
    }

    let scale = 1.0 / count as f64;
    grad.mapv_inplace(|g| g * scale);
    Ok((total * scale, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, n: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((n, n, 3), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn identical_images_score_one() {
        let x = random_image(1, 16);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inverted_binary_image_scores_low() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array3::from_shape_fn((16, 16, 3), |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        let inv = x.mapv(|v| 1.0 - v);
        assert!(ssim(&x, &inv).unwrap() < 0.5);
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = random_image(3, 14);
        let b = random_image(4, 14);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = random_image(5, 16);
        let b = random_image(6, 12);
        assert!(matches!(ssim(&a, &b), Err(CoreError::Shape(_))));
        let tiny = random_image(7, 8);
        assert!(matches!(ssim(&tiny, &tiny), Err(CoreError::Shape(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let a = random_image(8, 13);
        let b = random_image(9, 13);
        let (_, grad) = ssim_with_gradient(&a, &b).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let h = 1e-5;
        for _ in 0..25 {
            let r = rng.gen_range(0..13);
            let c = rng.gen_range(0..13);
            let ch = rng.gen_range(0..3);
            let mut plus = b.clone();
            plus[[r, c, ch]] += h;
            let mut minus = b.clone();
            minus[[r, c, ch]] -= h;
            let fd = (ssim(&a, &plus).unwrap() - ssim(&a, &minus).unwrap()) / (2.0 * h);
            let an = grad[[r, c, ch]];
            let rel = (an - fd).abs() / (an.abs().max(fd.abs()) + 1e-9);
            assert!(rel < 1e-4, "({r},{c},{ch}): analytic {an} vs fd {fd}");
        }
    }
}
