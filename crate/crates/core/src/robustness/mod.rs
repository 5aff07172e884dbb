//! The adaptive intruder: filtering/compression/resizing applied to images
//! before embedding, plus the image-quality metrics used in reports.

pub mod jpeg;

use std::collections::BTreeMap;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fr::FRModel;
use crate::grid::{resize_bilinear, Image};
use crate::ppt::PPT;
use crate::retrieval::{run_scenario_with, Scenario, ScenarioReport};
use crate::world::{RenderedFace, UserSplit};

/// One preprocessing attack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "parameter", rename_all = "snake_case")]
pub enum AttackSpec {
    /// Separable Gaussian blur with the given sigma (pixels).
    Gaussian(f64),
    /// k x k median filter, k odd.
    Median(usize),
    /// JPEG round trip at the given quality.
    Jpeg(u32),
    /// Bilinear downscale by the factor in (0, 1), then back up.
    Resize(f64),
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AttackSpec::Gaussian(sigma) => {
                if sigma <= 0.0 || sigma > 10.0 {
                    return Err(CoreError::Config(format!("gaussian sigma {sigma} outside (0, 10]")));
                }
            }
            AttackSpec::Median(k) => {
                if k == 0 || k % 2 == 0 || k > 15 {
                    return Err(CoreError::Config(format!("median window {k} must be odd in [1, 15]")));
                }
            }
            AttackSpec::Jpeg(q) => {
                if !(1..=100).contains(&q) {
                    return Err(CoreError::Config(format!("jpeg quality {q} outside [1, 100]")));
                }
            }
            AttackSpec::Resize(s) => {
                if !(s > 0.0 && s < 1.0) {
                    return Err(CoreError::Config(format!("resize scale {s} outside (0, 1)")));
                }
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match *self {
            AttackSpec::Gaussian(s) => format!("gaussian({s})"),
            AttackSpec::Median(k) => format!("median({k})"),
            AttackSpec::Jpeg(q) => format!("jpeg({q})"),
            AttackSpec::Resize(s) => format!("resize({s})"),
        }
    }

    /// The default grid used by sweeps: mild to moderate degradation.
    pub fn default_grid() -> Vec<AttackSpec> {
        vec![
            AttackSpec::Gaussian(0.5),
            AttackSpec::Gaussian(1.0),
            AttackSpec::Median(3),
            AttackSpec::Jpeg(90),
            AttackSpec::Jpeg(75),
            AttackSpec::Resize(0.75),
            AttackSpec::Resize(0.5),
        ]
    }
}

fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-(i as f64 * i as f64) / (2.0 * sigma * sigma)).exp());
    }
    let s: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= s;
    }

    let (h, w, c) = image.dim();
    let mut tmp = Array3::zeros((h, w, c));
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let cc = (col as isize + ki as isize - radius).clamp(0, w as isize - 1);
                    acc += kv * image[[r, cc as usize, ch]];
                }
                tmp[[r, col, ch]] = acc;
            }
        }
    }
    let mut out = Array3::zeros((h, w, c));
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let rr = (r as isize + ki as isize - radius).clamp(0, h as isize - 1);
                    acc += kv * tmp[[rr as usize, col, ch]];
                }
                out[[r, col, ch]] = acc;
            }
        }
    }
    out
}

fn median_filter(image: &Image, k: usize) -> Image {
    let half = (k / 2) as isize;
    let (h, w, c) = image.dim();
    let mut out = Array3::zeros((h, w, c));
    let mut window = Vec::with_capacity(k * k);
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                window.clear();
                for dr in -half..=half {
                    for dc in -half..=half {
                        let rr = (r as isize + dr).clamp(0, h as isize - 1) as usize;
                        let cc = (col as isize + dc).clamp(0, w as isize - 1) as usize;
                        window.push(image[[rr, cc, ch]]);
                    }
                }
                window.sort_by(|a, b| a.partial_cmp(b).unwrap());
                out[[r, col, ch]] = window[window.len() / 2];
            }
        }
    }
    out
}

/// Apply one attack to an image in [0, 1]; the output is clipped back.
pub fn apply_attack(image: &Image, spec: &AttackSpec) -> Result<Image> {
    spec.validate()?;
    let out = match *spec {
        AttackSpec::Gaussian(sigma) => gaussian_blur(image, sigma),
        AttackSpec::Median(1) => image.clone(),
        AttackSpec::Median(k) => median_filter(image, k),
        AttackSpec::Jpeg(q) => jpeg::jpeg_roundtrip(image, q)?,
        AttackSpec::Resize(s) => {
            let (h, w, _) = image.dim();
            let nh = ((h as f64 * s).round() as usize).max(1);
            let nw = ((w as f64 * s).round() as usize).max(1);
            let down = resize_bilinear(image, nh, nw);
            resize_bilinear(&down, h, w)
        }
    };
    Ok(out.mapv(|v| v.clamp(0.0, 1.0)))
}

/// Peak signal-to-noise ratio in dB for unit-range images;
/// `f64::INFINITY` when the images are identical.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(CoreError::Shape(format!(
            "psnr shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

/// Fraction of pixel positions where any channel differs by more than 1/255.
pub fn l0_normalized(a: &Image, b: &Image) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(CoreError::Shape(format!(
            "l0 shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (h, w, c) = a.dim();
    let mut changed = 0usize;
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                if (a[[r, col, ch]] - b[[r, col, ch]]).abs() > 1.0 / 255.0 {
                    changed += 1;
                    break;
                }
            }
        }
    }
    Ok(changed as f64 / (h * w) as f64)
}

/// Recall under one attack, for the protected hard scenario and for the
/// unprotected baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackRow {
    pub attack: Option<AttackSpec>,
    pub mean_recall: f64,
    pub per_user_recall: BTreeMap<u32, f64>,
    pub baseline_mean_recall: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackReport {
    pub model_id: String,
    pub seed: u64,
    pub rows: Vec<AttackRow>,
}

/// Sweep the attack grid over the hard scenario: every attack re-embeds the
/// attacked DB entries and queries. The first row is the unattacked value.
pub fn attack_sweep(
    users: &[UserSplit],
    noise: &[RenderedFace],
    ppts: &BTreeMap<u32, PPT>,
    intruder: &FRModel,
    attacks: &[AttackSpec],
    seed: u64,
) -> Result<AttackReport> {
    for a in attacks {
        a.validate()?;
    }
    let mut rows = Vec::with_capacity(attacks.len() + 1);

    let run = |attack: Option<&AttackSpec>, scenario: Scenario, fraction: f64| -> Result<ScenarioReport> {
        match attack {
            None => run_scenario_with(users, noise, ppts, intruder, scenario, fraction, seed, None),
            Some(spec) => {
                let spec = *spec;
                let pre = move |img: &Image| apply_attack(img, &spec);
                run_scenario_with(
                    users,
                    noise,
                    ppts,
                    intruder,
                    scenario,
                    fraction,
                    seed,
                    Some(&pre),
                )
            }
        }
    };

    let clean = run(None, Scenario::ProtQueryProtDb, 1.0)?;
    let clean_baseline = run(None, Scenario::Baseline, 0.0)?;
    rows.push(AttackRow {
        attack: None,
        mean_recall: clean.mean_recall,
        per_user_recall: clean.per_user_recall,
        baseline_mean_recall: clean_baseline.mean_recall,
    });

    for attack in attacks {
        let hard = run(Some(attack), Scenario::ProtQueryProtDb, 1.0)?;
        let base = run(Some(attack), Scenario::Baseline, 0.0)?;
        rows.push(AttackRow {
            attack: Some(*attack),
            mean_recall: hard.mean_recall,
            per_user_recall: hard.per_user_recall,
            baseline_mean_recall: base.mean_recall,
        });
    }

    Ok(AttackReport { model_id: intruder.model_id(), seed, rows })
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
    fn tiny_sigma_gaussian_is_nearly_identity() {
        let img = random_image(1, 16);
        let out = apply_attack(&img, &AttackSpec::Gaussian(0.1)).unwrap();
        let max = out
            .iter()
            .zip(img.iter())
            .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        assert!(max < 1.0 / 255.0, "max change {max}");
    }

    #[test]
    fn median_one_is_identity() {
        let img = random_image(2, 12);
        let out = apply_attack(&img, &AttackSpec::Median(1)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn constant_images_are_fixed_points() {
        let img = Array3::from_elem((16, 16, 3), 0.6);
        for spec in [
            AttackSpec::Gaussian(1.0),
            AttackSpec::Median(3),
            AttackSpec::Resize(0.5),
        ] {
            let out = apply_attack(&img, &spec).unwrap();
            for v in out.iter() {
                assert!((v - 0.6).abs() < 1e-12, "{spec:?}");
            }
        }
        let out = apply_attack(&img, &AttackSpec::Jpeg(75)).unwrap();
        for v in out.iter() {
            assert!((v - 0.6).abs() < 1.0 / 255.0, "jpeg");
        }
    }

    #[test]
    fn attack_outputs_stay_in_unit_range() {
        let img = random_image(3, 16);
        for spec in AttackSpec::default_grid() {
            let out = apply_attack(&img, &spec).unwrap();
            assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)), "{spec:?}");
        }
    }

    #[test]
    fn invalid_parameters_rejected() {
        let img = random_image(4, 8);
        assert!(apply_attack(&img, &AttackSpec::Gaussian(0.0)).is_err());
        assert!(apply_attack(&img, &AttackSpec::Median(4)).is_err());
        assert!(apply_attack(&img, &AttackSpec::Jpeg(0)).is_err());
        assert!(apply_attack(&img, &AttackSpec::Resize(1.0)).is_err());
    }

    #[test]
    fn psnr_identity_and_closed_form() {
        let img = random_image(5, 10);
        assert!(psnr(&img, &img).unwrap().is_infinite());

        let shifted = img.mapv(|v| v + 0.1);
        // Uniform |difference| of 0.1 -> MSE 0.01 -> 20 dB. Values may leave
        // [0, 1]; psnr itself has no range precondition beyond equal shape.
        let got = psnr(&img, &shifted).unwrap();
        assert!((got - 20.0).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn psnr_matches_direct_recomputation() {
        let a = random_image(6, 9);
        let b = random_image(7, 9);
        let got = psnr(&a, &b).unwrap();
        let mse: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / a.len() as f64;
        let want = 10.0 * (1.0 / mse).log10();
        assert!((got - want).abs() < 1e-9);
    }

    #[test]
    fn l0_basics() {
        let img = random_image(8, 8);
        assert_eq!(l0_normalized(&img, &img).unwrap(), 0.0);
        let off = img.mapv(|v| (v + 0.5) % 1.0);
        assert_eq!(l0_normalized(&img, &off).unwrap(), 1.0);
    }
}
