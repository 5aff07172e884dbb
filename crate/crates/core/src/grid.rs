//! Shared array conventions and differentiable bilinear texture sampling.
//!
//! Conventions used across the crate:
//! - `Image`: `(H, W, C)` with values in `[0, 1]`.
//! - `UvMap`: `(H, W, 2)`; channel 0 is `u` (texture row axis), channel 1 is
//!   `v` (texture column axis), both in `[0, 1]` where valid and
//!   [`UV_SENTINEL`] where not.
//! - `Mask`: `(H, W)` booleans, true where the face surface covers the pixel.
//! - `Texture`: `(U, V, C)` in UV space.
//!
//! Sampling maps `u ∈ [0,1]` to the continuous texel coordinate
//! `u * (U - 1)` (align-corners) and clamps to the texture edges, so a sample
//! is always a convex combination of four texel values.

use ndarray::{Array2, Array3};

pub type Image = Array3<f64>;
pub type Texture = Array3<f64>;
pub type UvMap = Array3<f64>;
pub type Mask = Array2<bool>;

/// UV value stored at pixels outside the face surface. Never sampled.
pub const UV_SENTINEL: f64 = -1.0;

/// The four texel corners and bilinear weights for a `(u, v)` lookup.
#[derive(Debug, Clone, Copy)]
pub struct BilinearTaps {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
    /// Weights for (r0,c0), (r0,c1), (r1,c0), (r1,c1); they sum to 1.
    pub w: [f64; 4],
}

/// Compute the corner taps for sampling a `rows x cols` grid at `(u, v)`.
pub fn bilinear_taps(u: f64, v: f64, rows: usize, cols: usize) -> BilinearTaps {
    debug_assert!(rows >= 1 && cols >= 1);
    let x = (u * (rows - 1) as f64).clamp(0.0, (rows - 1) as f64);
    let y = (v * (cols - 1) as f64).clamp(0.0, (cols - 1) as f64);
    let r0 = x.floor() as usize;
    let c0 = y.floor() as usize;
    let r1 = (r0 + 1).min(rows - 1);
    let c1 = (c0 + 1).min(cols - 1);
    let fx = x - r0 as f64;
    let fy = y - c0 as f64;
    BilinearTaps {
        r0,
        r1,
        c0,
        c1,
        w: [
            (1.0 - fx) * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * (1.0 - fy),
            fx * fy,
        ],
    }
}

/// Bilinear sample of one channel.
pub fn sample_channel(texture: &Texture, u: f64, v: f64, ch: usize) -> f64 {
    let t = bilinear_taps(u, v, texture.dim().0, texture.dim().1);
    t.w[0] * texture[[t.r0, t.c0, ch]]
        + t.w[1] * texture[[t.r0, t.c1, ch]]
        + t.w[2] * texture[[t.r1, t.c0, ch]]
        + t.w[3] * texture[[t.r1, t.c1, ch]]
}

/// Bilinear sample of all channels into `out`.
pub fn sample_all(texture: &Texture, u: f64, v: f64, out: &mut [f64]) {
    let t = bilinear_taps(u, v, texture.dim().0, texture.dim().1);
    for (ch, o) in out.iter_mut().enumerate() {
        *o = t.w[0] * texture[[t.r0, t.c0, ch]]
            + t.w[1] * texture[[t.r0, t.c1, ch]]
            + t.w[2] * texture[[t.r1, t.c0, ch]]
            + t.w[3] * texture[[t.r1, t.c1, ch]];
    }
}

/// Adjoint of [`sample_all`]: accumulate `upstream` into the four texel
/// corners of `grad` with the same bilinear weights.
pub fn scatter_all(grad: &mut Texture, u: f64, v: f64, upstream: &[f64]) {
    let t = bilinear_taps(u, v, grad.dim().0, grad.dim().1);
    for (ch, &g) in upstream.iter().enumerate() {
        grad[[t.r0, t.c0, ch]] += t.w[0] * g;
        grad[[t.r0, t.c1, ch]] += t.w[1] * g;
        grad[[t.r1, t.c0, ch]] += t.w[2] * g;
        grad[[t.r1, t.c1, ch]] += t.w[3] * g;
    }
}

/// Bilinear resize of an image to `(new_h, new_w)` using the pixel-center
/// convention (`align_corners = false`), clamped at the borders.
pub fn resize_bilinear(img: &Image, new_h: usize, new_w: usize) -> Image {
    let (h, w, c) = img.dim();
    let mut out = Array3::zeros((new_h, new_w, c));
    let sy = h as f64 / new_h as f64;
    let sx = w as f64 / new_w as f64;
    for i in 0..new_h {
        let src_y = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = src_y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = src_y - y0 as f64;
        for j in 0..new_w {
            let src_x = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = src_x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = src_x - x0 as f64;
            for ch in 0..c {
                let top = (1.0 - fx) * img[[y0, x0, ch]] + fx * img[[y0, x1, ch]];
                let bot = (1.0 - fx) * img[[y1, x0, ch]] + fx * img[[y1, x1, ch]];
                out[[i, j, ch]] = (1.0 - fy) * top + fy * bot;
            }
        }
    }
    out
}

/// Check that every element of `img` lies in `[0, 1]`.
pub fn in_unit_range(img: &Image) -> bool {
    img.iter().all(|&x| (0.0..=1.0).contains(&x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn taps_are_convex() {
        let t = bilinear_taps(0.37, 0.81, 16, 16);
        let s: f64 = t.w.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(t.w.iter().all(|&w| (0.0..=1.0).contains(&w)));
    }

    #[test]
    fn sample_constant_texture_is_constant() {
        let tex = Array3::from_elem((8, 8, 3), 0.42);
        for &(u, v) in &[(0.0, 0.0), (1.0, 1.0), (0.5, 0.123), (0.999, 0.001)] {
            let mut out = [0.0; 3];
            sample_all(&tex, u, v, &mut out);
            for o in out {
                assert!((o - 0.42).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sample_hits_texel_centers_exactly() {
        let mut tex = Array3::zeros((4, 4, 1));
        tex[[2, 1, 0]] = 0.9;
        // u = 2/3 maps to row 2, v = 1/3 maps to col 1 under align-corners.
        let got = sample_channel(&tex, 2.0 / 3.0, 1.0 / 3.0, 0);
        assert!((got - 0.9).abs() < 1e-12);
    }

    #[test]
    fn scatter_is_adjoint_of_sample() {
        // <scatter(e), T> == <e, sample(T)> for a probe texture.
        let mut tex = Array3::zeros((5, 7, 2));
        for (i, x) in tex.iter_mut().enumerate() {
            *x = (i as f64 * 0.137).sin();
        }
        let (u, v) = (0.31, 0.77);
        let mut sampled = [0.0; 2];
        sample_all(&tex, u, v, &mut sampled);

        let upstream = [1.3, -0.7];
        let mut grad = Array3::zeros((5, 7, 2));
        scatter_all(&mut grad, u, v, &upstream);
        let lhs: f64 = grad.iter().zip(tex.iter()).map(|(g, t)| g * t).sum();
        let rhs = upstream[0] * sampled[0] + upstream[1] * sampled[1];
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn resize_preserves_constants() {
        let img = Array3::from_elem((10, 10, 3), 0.6);
        let down = resize_bilinear(&img, 5, 5);
        let up = resize_bilinear(&down, 10, 10);
        assert!(up.iter().all(|&x| (x - 0.6).abs() < 1e-12));
    }
}
