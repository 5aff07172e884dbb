//! Head proxy geometry: an expression-deformed ellipsoid with spherical UV
//! parameterization, rendered under orthographic projection with a z-buffer.
//!
//! The UV map produced here is exact by construction: each covered pixel
//! stores the surface parameter the rasterizer interpolated, and the image is
//! later built by sampling the texture at exactly those coordinates.

use ndarray::{Array2, Array3};

use crate::grid::{Mask, UvMap, UV_SENTINEL};
use crate::world::FacePose;

/// Ellipsoid semi-axes (x right, y up, z toward the camera).
const SEMI_AXES: [f64; 3] = [0.72, 0.95, 0.82];

/// Expression bump: radial bulge around the jaw region.
const BUMP_CENTER: (f64, f64) = (0.72, 0.5);
const BUMP_WIDTH_SQ: f64 = 0.012;
const BUMP_AMP: f64 = 0.08;

const AMBIENT: f64 = 0.35;
const LIGHT_DIR: [f64; 3] = [0.25, 0.35, 0.9];

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Surface point in object space for UV parameter `(u, v)`.
///
/// `u` is the colatitude fraction (0 = top pole), `v` the longitude fraction
/// (0.5 faces the camera at identity pose).
pub fn surface_point(u: f64, v: f64, expression: f64) -> [f64; 3] {
    let theta = std::f64::consts::PI * u;
    let phi = 2.0 * std::f64::consts::PI * (v - 0.5);
    let s = [
        theta.sin() * phi.sin(),
        theta.cos(),
        theta.sin() * phi.cos(),
    ];
    let du = u - BUMP_CENTER.0;
    let dv = v - BUMP_CENTER.1;
    let rho = 1.0 + expression * BUMP_AMP * (-(du * du + dv * dv) / BUMP_WIDTH_SQ).exp();
    [
        rho * SEMI_AXES[0] * s[0],
        rho * SEMI_AXES[1] * s[1],
        rho * SEMI_AXES[2] * s[2],
    ]
}

/// Outward unit normal in object space, from central differences of the
/// surface map.
pub fn surface_normal(u: f64, v: f64, expression: f64) -> [f64; 3] {
    let h = 1e-4;
    let pu1 = surface_point(u + h, v, expression);
    let pu0 = surface_point(u - h, v, expression);
    let pv1 = surface_point(u, v + h, expression);
    let pv0 = surface_point(u, v - h, expression);
    let tu = [pu1[0] - pu0[0], pu1[1] - pu0[1], pu1[2] - pu0[2]];
    let tv = [pv1[0] - pv0[0], pv1[1] - pv0[1], pv1[2] - pv0[2]];
    let mut n = normalize3(cross3(tu, tv));
    let p = surface_point(u, v, expression);
    if dot3(n, p) < 0.0 {
        n = [-n[0], -n[1], -n[2]];
    }
    n
}

/// Rotation matrix `Rz(roll) * Rx(pitch) * Ry(yaw)`, object to camera space.
pub fn rotation(pose: &FacePose) -> [[f64; 3]; 3] {
    let (sy, cy) = pose.yaw.sin_cos();
    let (sp, cp) = pose.pitch.sin_cos();
    let (sr, cr) = pose.roll.sin_cos();
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
    let rz = [[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]];
    mat_mul(&rz, &mat_mul(&rx, &ry))
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for (k, bk) in b.iter().enumerate() {
                out[i][j] += a[i][k] * bk[j];
            }
        }
    }
    out
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [dot3(m[0], v), dot3(m[1], v), dot3(m[2], v)]
}

/// Lambertian shading factor at UV parameter `(u, v)` under `pose`.
///
/// Deterministic in `(u, v, pose)` so callers can recompute it from a stored
/// UV map.
pub fn shading_at(u: f64, v: f64, pose: &FacePose) -> f64 {
    let rot = rotation(pose);
    shading_with_rotation(u, v, pose, &rot)
}

fn shading_with_rotation(u: f64, v: f64, pose: &FacePose, rot: &[[f64; 3]; 3]) -> f64 {
    let n_obj = surface_normal(u, v, pose.expression);
    let n_cam = mat_vec(rot, n_obj);
    let l = normalize3(LIGHT_DIR);
    let lambert = dot3(n_cam, l).max(0.0);
    pose.lighting * (AMBIENT + (1.0 - AMBIENT) * lambert)
}

/// Per-pixel geometry of one render.
pub struct Geometry {
    pub uv: UvMap,
    pub mask: Mask,
    pub shading: Array2<f64>,
}

/// Rasterize the posed head proxy at `h x w`, producing the exact UV map,
/// coverage mask, and shading.
pub fn rasterize(pose: &FacePose, h: usize, w: usize) -> Geometry {
    let rot = rotation(pose);
    let n_u = (2 * h.max(w)).max(96);
    let n_v = 2 * n_u;

    // Projected vertex grid: pixel-space x/y plus camera-space depth.
    let mut verts = vec![[0.0f64; 5]; (n_u + 1) * (n_v + 1)];
    for i in 0..=n_u {
        let u = i as f64 / n_u as f64;
        for j in 0..=n_v {
            let v = j as f64 / n_v as f64;
            let p_obj = surface_point(u, v, pose.expression);
            let p = mat_vec(&rot, p_obj);
            let px = (pose.scale * p[0] + 1.0) * 0.5 * w as f64;
            let py = (1.0 - pose.scale * p[1]) * 0.5 * h as f64;
            verts[i * (n_v + 1) + j] = [px, py, pose.scale * p[2], u, v];
        }
    }

    let mut depth = Array2::from_elem((h, w), f64::NEG_INFINITY);
    let mut uv = Array3::from_elem((h, w, 2), UV_SENTINEL);
    let mut mask = Array2::from_elem((h, w), false);

    let mut raster_tri = |a: &[f64; 5], b: &[f64; 5], c: &[f64; 5]| {
        let area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
        if area.abs() < 1e-12 {
            return;
        }
        let min_x = a[0].min(b[0]).min(c[0]);
        let max_x = a[0].max(b[0]).max(c[0]);
        let min_y = a[1].min(b[1]).min(c[1]);
        let max_y = a[1].max(b[1]).max(c[1]);
        let c0 = (min_x - 0.5).ceil().max(0.0) as usize;
        let c1 = ((max_x - 0.5).floor() as isize).min(w as isize - 1);
        let r0 = (min_y - 0.5).ceil().max(0.0) as usize;
        let r1 = ((max_y - 0.5).floor() as isize).min(h as isize - 1);
        if c1 < c0 as isize || r1 < r0 as isize {
            return;
        }
        for r in r0..=(r1 as usize) {
            let py = r as f64 + 0.5;
            for col in c0..=(c1 as usize) {
                let px = col as f64 + 0.5;
                let w0 = ((b[0] - px) * (c[1] - py) - (b[1] - py) * (c[0] - px)) / area;
                let w1 = ((c[0] - px) * (a[1] - py) - (c[1] - py) * (a[0] - px)) / area;
                let w2 = 1.0 - w0 - w1;
                if w0 < -1e-9 || w1 < -1e-9 || w2 < -1e-9 {
                    continue;
                }
                let z = w0 * a[2] + w1 * b[2] + w2 * c[2];
                if z > depth[[r, col]] {
                    depth[[r, col]] = z;
                    uv[[r, col, 0]] = w0 * a[3] + w1 * b[3] + w2 * c[3];
                    uv[[r, col, 1]] = w0 * a[4] + w1 * b[4] + w2 * c[4];
                    mask[[r, col]] = true;
                }
            }
        }
    };

    for i in 0..n_u {
        for j in 0..n_v {
            let v00 = verts[i * (n_v + 1) + j];
            let v01 = verts[i * (n_v + 1) + j + 1];
            let v10 = verts[(i + 1) * (n_v + 1) + j];
            let v11 = verts[(i + 1) * (n_v + 1) + j + 1];
            raster_tri(&v00, &v01, &v11);
            raster_tri(&v00, &v11, &v10);
        }
    }

    let mut shading = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] {
                shading[[r, c]] =
                    shading_with_rotation(uv[[r, c, 0]], uv[[r, c, 1]], pose, &rot);
            }
        }
    }

    Geometry { uv, mask, shading }
}

/// Analytic coverage test for the undeformed ellipsoid (`expression = 0`):
/// does the orthographic ray through normalized screen point `(x, y)` hit the
/// posed surface? Used as an independent oracle for the rasterized mask.
pub fn ellipsoid_covers(pose: &FacePose, x: f64, y: f64) -> bool {
    let rot = rotation(pose);
    // Transpose = inverse for a rotation.
    let rt = [
        [rot[0][0], rot[1][0], rot[2][0]],
        [rot[0][1], rot[1][1], rot[2][1]],
        [rot[0][2], rot[1][2], rot[2][2]],
    ];
    let to_sphere = |q: [f64; 3]| -> [f64; 3] {
        let o = mat_vec(&rt, [q[0] / pose.scale, q[1] / pose.scale, q[2] / pose.scale]);
        [o[0] / SEMI_AXES[0], o[1] / SEMI_AXES[1], o[2] / SEMI_AXES[2]]
    };
    let p0 = to_sphere([x, y, 0.0]);
    let d = to_sphere([0.0, 0.0, 1.0]);
    let dd = dot3(d, d);
    let closest_sq = dot3(p0, p0) - dot3(p0, d) * dot3(p0, d) / dd;
    closest_sq <= 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frontal() -> FacePose {
        FacePose::new(0.0, 0.0, 0.0, 0.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn normal_points_outward_at_front() {
        let n = surface_normal(0.5, 0.5, 0.0);
        assert!(n[2] > 0.9, "front-facing normal should be ~+z, got {n:?}");
    }

    #[test]
    fn rotation_is_orthonormal() {
        let pose = FacePose::new(0.3, -0.2, 0.1, 0.5, 0.9, 0.8).unwrap();
        let r = rotation(&pose);
        for i in 0..3 {
            for j in 0..3 {
                let d = dot3(r[i], r[j]);
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn raster_mask_matches_analytic_ellipsoid() {
        let pose = FacePose::new(0.25, -0.1, 0.05, 0.0, 1.0, 0.9).unwrap();
        let (h, w) = (48, 48);
        let geo = rasterize(&pose, h, w);
        let mut mismatched = 0usize;
        for r in 0..h {
            for c in 0..w {
                let x = (c as f64 + 0.5) / w as f64 * 2.0 - 1.0;
                let y = 1.0 - (r as f64 + 0.5) / h as f64 * 2.0;
                if geo.mask[[r, c]] != ellipsoid_covers(&pose, x, y) {
                    mismatched += 1;
                }
            }
        }
        // Disagreement only along the silhouette, a 1-px band.
        let frac = mismatched as f64 / (h * w) as f64;
        assert!(frac < 0.02, "mask/analytic mismatch fraction {frac}");
    }

    #[test]
    fn frontal_mask_left_right_symmetric() {
        let geo = rasterize(&frontal(), 64, 64);
        let (h, w) = geo.mask.dim();
        for r in 0..h {
            let left = (0..w).find(|&c| geo.mask[[r, c]]);
            let right = (0..w).rev().find(|&c| geo.mask[[r, c]]);
            if let (Some(l), Some(rr)) = (left, right) {
                let mirror = w - 1 - rr;
                assert!(
                    (l as isize - mirror as isize).abs() <= 1,
                    "row {r}: left edge {l} vs mirrored right edge {mirror}"
                );
            }
        }
    }

    #[test]
    fn covered_pixels_carry_unit_range_uv() {
        let pose = FacePose::new(0.4, 0.2, -0.1, 1.0, 0.95, 0.7).unwrap();
        let geo = rasterize(&pose, 32, 32);
        for r in 0..32 {
            for c in 0..32 {
                if geo.mask[[r, c]] {
                    let u = geo.uv[[r, c, 0]];
                    let v = geo.uv[[r, c, 1]];
                    assert!((0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v));
                } else {
                    assert_eq!(geo.uv[[r, c, 0]], UV_SENTINEL);
                }
            }
        }
    }
}
