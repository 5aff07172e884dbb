//! Synthesis of per-identity base textures.
//!
//! Textures are smooth by construction: the maximum difference between
//! adjacent texels is capped, which bounds the bilinear-sample difference for
//! any two UV coordinates within one texel of each other. Identity contrast
//! comes mostly from per-channel mean offsets, which cost nothing in
//! smoothness.

use ndarray::Array3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::grid::Texture;
use crate::world::WorldConfig;

/// Maximum |adjacent texel difference| the synthesized field is scaled to.
/// Two UV lookups within one texel of each other then differ by at most
/// twice this value, which keeps the pose-correspondence tolerance of
/// 2/255 satisfied with margin.
pub const ADJACENT_DIFF_CAP: f64 = 0.8 / 255.0;

/// Range of the per-channel mean offset drawn per identity.
pub const CHANNEL_OFFSET_AMP: f64 = 0.15;

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Blur a (U, V) field: clamped along the u axis (poles), wrapped along the
/// v axis (longitude seam).
fn blur_field(field: &mut Vec<f64>, rows: usize, cols: usize, sigma: f64) {
    let k = gaussian_kernel(sigma);
    let radius = k.len() / 2;
    let mut tmp = vec![0.0; rows * cols];

    // Along u (rows), clamped.
    for c in 0..cols {
        for r in 0..rows {
            let mut acc = 0.0;
            for (t, &w) in k.iter().enumerate() {
                let rr = (r as isize + t as isize - radius as isize).clamp(0, rows as isize - 1);
                acc += w * field[rr as usize * cols + c];
            }
            tmp[r * cols + c] = acc;
        }
    }
    // Along v (cols), wrapped.
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0;
            for (t, &w) in k.iter().enumerate() {
                let cc = (c as isize + t as isize - radius as isize).rem_euclid(cols as isize);
                acc += w * tmp[r * cols + cc as usize];
            }
            field[r * cols + c] = acc;
        }
    }
}

/// Largest |difference| between grid-adjacent texels of one channel.
pub fn max_adjacent_diff(tex: &Texture, ch: usize) -> f64 {
    let (rows, cols, _) = tex.dim();
    let mut m: f64 = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            if r + 1 < rows {
                m = m.max((tex[[r + 1, c, ch]] - tex[[r, c, ch]]).abs());
            }
            if c + 1 < cols {
                m = m.max((tex[[r, c + 1, ch]] - tex[[r, c, ch]]).abs());
            }
        }
    }
    m
}

/// Deterministic smooth texture for one identity seed.
pub fn synthesize(texture_seed: u64, config: &WorldConfig) -> Texture {
    let rows = config.texture_size;
    let cols = config.texture_size;
    let channels = config.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(texture_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));

    let mut tex = Array3::zeros((rows, cols, channels));
    let sigma = rows as f64 / 10.0;

    for ch in 0..channels {
        let mut field: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        blur_field(&mut field, rows, cols, sigma);

        // Scale so the steepest adjacent-texel step hits the cap exactly.
        let mut max_step: f64 = 0.0;
        for r in 0..rows {
            for c in 0..cols {
                if r + 1 < rows {
                    max_step = max_step.max((field[(r + 1) * cols + c] - field[r * cols + c]).abs());
                }
                if c + 1 < cols {
                    max_step = max_step.max((field[r * cols + c + 1] - field[r * cols + c]).abs());
                }
            }
        }
        let scale = if max_step > 1e-12 {
            ADJACENT_DIFF_CAP / max_step
        } else {
            0.0
        };

        let offset = rng.gen_range(-CHANNEL_OFFSET_AMP..CHANNEL_OFFSET_AMP);
        for r in 0..rows {
            for c in 0..cols {
                let v = 0.5 + offset + field[r * cols + c] * scale;
                tex[[r, c, ch]] = v.clamp(0.02, 0.98);
            }
        }
    }
    tex
}
