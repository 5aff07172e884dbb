//! Baseline JPEG degradation as a deterministic round trip: color transform,
//! 8x8 forward DCT, quantization with the standard tables scaled by quality,
//! dequantization, inverse DCT. No chroma subsampling. The entropy-coding
//! stage is lossless and therefore omitted from the round trip.

use ndarray::Array3;

use crate::error::{CoreError, Result};
use crate::grid::Image;

/// Standard luminance quantization table (Annex K), row-major.
const Q_LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Standard chrominance quantization table (Annex K), row-major.
const Q_CHROMA: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Quality scaling as used by the reference implementation: tables are
/// linearly scaled and clamped to [1, 255].
fn scaled_table(base: &[u16; 64], quality: u32) -> [f64; 64] {
    let q = quality.clamp(1, 100);
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q } as i64;
    let mut out = [0.0; 64];
    for (i, &b) in base.iter().enumerate() {
        let v = ((b as i64 * scale + 50) / 100).clamp(1, 255);
        out[i] = v as f64;
    }
    out
}

/// Type-II DCT basis, applied to one 8x8 block.
fn fdct8x8(block: &mut [f64; 64]) {
    let mut tmp = [0.0; 64];
    for u in 0..8 {
        for v in 0..8 {
            let cu = if u == 0 { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
            let cv = if v == 0 { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
            let mut acc = 0.0;
            for y in 0..8 {
                for x in 0..8 {
                    acc += block[y * 8 + x]
                        * ((2 * y + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos()
                        * ((2 * x + 1) as f64 * v as f64 * std::f64::consts::PI / 16.0).cos();
                }
            }
            tmp[u * 8 + v] = 0.25 * cu * cv * acc;
        }
    }
    *block = tmp;
}

fn idct8x8(block: &mut [f64; 64]) {
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            let mut acc = 0.0;
            for u in 0..8 {
                for v in 0..8 {
                    let cu = if u == 0 { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
                    let cv = if v == 0 { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
                    acc += cu
                        * cv
                        * block[u * 8 + v]
                        * ((2 * y + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos()
                        * ((2 * x + 1) as f64 * v as f64 * std::f64::consts::PI / 16.0).cos();
                }
            }
            tmp[y * 8 + x] = 0.25 * acc;
        }
    }
    *block = tmp;
}

/// Quantize one channel plane (values in [0, 255], level-shifted inside).
fn roundtrip_plane(plane: &mut Vec<f64>, h: usize, w: usize, table: &[f64; 64]) {
    let bh = h.div_ceil(8) * 8;
    let bw = w.div_ceil(8) * 8;
    // Edge-replicated padding to full blocks.
    let mut padded = vec![0.0; bh * bw];
    for r in 0..bh {
        let sr = r.min(h - 1);
        for c in 0..bw {
            let sc = c.min(w - 1);
            padded[r * bw + c] = plane[sr * w + sc];
        }
    }

    let mut block = [0.0; 64];
    for br in (0..bh).step_by(8) {
        for bc in (0..bw).step_by(8) {
            for y in 0..8 {
                for x in 0..8 {
                    block[y * 8 + x] = padded[(br + y) * bw + bc + x] - 128.0;
                }
            }
            fdct8x8(&mut block);
            for i in 0..64 {
                block[i] = (block[i] / table[i]).round() * table[i];
            }
            idct8x8(&mut block);
            for y in 0..8 {
                for x in 0..8 {
                    padded[(br + y) * bw + bc + x] = block[y * 8 + x] + 128.0;
                }
            }
        }
    }
    for r in 0..h {
        for c in 0..w {
            plane[r * w + c] = padded[r * bw + c];
        }
    }
}

/// Encode/decode round trip at `quality` in [1, 100]. RGB images go through
/// the JFIF YCbCr transform; single-channel images are treated as luma.
pub fn jpeg_roundtrip(image: &Image, quality: u32) -> Result<Image> {
    if !(1..=100).contains(&quality) {
        return Err(CoreError::Config(format!("jpeg quality {quality} outside [1, 100]")));
    }
    let (h, w, c) = image.dim();
    if c != 1 && c != 3 {
        return Err(CoreError::Shape(format!("jpeg round trip supports 1 or 3 channels, got {c}")));
    }
    let luma_t = scaled_table(&Q_LUMA, quality);
    let chroma_t = scaled_table(&Q_CHROMA, quality);

    let mut planes: Vec<Vec<f64>> = if c == 3 {
        // JFIF RGB -> YCbCr on the [0, 255] scale.
        let mut y = vec![0.0; h * w];
        let mut cb = vec![0.0; h * w];
        let mut cr = vec![0.0; h * w];
        for r in 0..h {
            for col in 0..w {
                let rr = image[[r, col, 0]] * 255.0;
                let gg = image[[r, col, 1]] * 255.0;
                let bb = image[[r, col, 2]] * 255.0;
                y[r * w + col] = 0.299 * rr + 0.587 * gg + 0.114 * bb;
                cb[r * w + col] = -0.168_736 * rr - 0.331_264 * gg + 0.5 * bb + 128.0;
                cr[r * w + col] = 0.5 * rr - 0.418_688 * gg - 0.081_312 * bb + 128.0;
            }
        }
        vec![y, cb, cr]
    } else {
        let mut y = vec![0.0; h * w];
        for r in 0..h {
            for col in 0..w {
                y[r * w + col] = image[[r, col, 0]] * 255.0;
            }
        }
        vec![y]
    };

    for (i, plane) in planes.iter_mut().enumerate() {
        let table = if i == 0 { &luma_t } else { &chroma_t };
        roundtrip_plane(plane, h, w, table);
    }

    let mut out = Array3::zeros((h, w, c));
    if c == 3 {
        for r in 0..h {
            for col in 0..w {
                let y = planes[0][r * w + col];
                let cb = planes[1][r * w + col] - 128.0;
                let cr = planes[2][r * w + col] - 128.0;
                let rr = y + 1.402 * cr;
                let gg = y - 0.344_136 * cb - 0.714_136 * cr;
                let bb = y + 1.772 * cb;
                out[[r, col, 0]] = (rr / 255.0).clamp(0.0, 1.0);
                out[[r, col, 1]] = (gg / 255.0).clamp(0.0, 1.0);
                out[[r, col, 2]] = (bb / 255.0).clamp(0.0, 1.0);
            }
        }
    } else {
        for r in 0..h {
            for col in 0..w {
                out[[r, col, 0]] = (planes[0][r * w + col] / 255.0).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dct_idct_is_identity() {
        let mut block = [0.0; 64];
        for (i, b) in block.iter_mut().enumerate() {
            *b = ((i * 37) % 255) as f64 - 128.0;
        }
        let orig = block;
        fdct8x8(&mut block);
        idct8x8(&mut block);
        for i in 0..64 {
            assert!((block[i] - orig[i]).abs() < 1e-9, "coef {i}");
        }
    }

    #[test]
    fn constant_image_survives_roundtrip() {
        let img = Array3::from_elem((16, 16, 3), 0.42);
        let out = jpeg_roundtrip(&img, 75).unwrap();
        for v in out.iter() {
            assert!((v - 0.42).abs() < 1.0 / 255.0);
        }
    }

    #[test]
    fn quality_100_is_nearly_lossless_on_smooth_renders() {
        let config = crate::world::WorldConfig {
            image_size: 32,
            texture_size: 32,
            ..Default::default()
        };
        let atlas = crate::world::make_identity(3, &config).unwrap();
        let pose = crate::world::FacePose::new(0.2, 0.1, 0.0, 0.5, 0.95, 0.9).unwrap();
        let face = crate::world::render_face(&atlas, &pose, &config).unwrap();
        let out = jpeg_roundtrip(&face.image, 100).unwrap();
        let max = out
            .iter()
            .zip(face.image.iter())
            .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        assert!(max <= 2.0 / 255.0, "max deviation {max}");
    }

    #[test]
    fn bad_quality_rejected() {
        let img = Array3::zeros((8, 8, 3));
        assert!(jpeg_roundtrip(&img, 0).is_err());
        assert!(jpeg_roundtrip(&img, 101).is_err());
    }
}
