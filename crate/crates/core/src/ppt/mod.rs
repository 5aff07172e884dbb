//! The protection texture engine: a bounded per-user texture in UV space,
//! deformed per image by differentiable grid sampling, trained with signed
//! gradient steps against an embedder ensemble.

pub mod loss;
pub mod ssim;
pub mod store;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fr::Ensemble;
use crate::grid::{sample_all, Image, Mask, Texture, UvMap};
use crate::world::{UserSplit, UvProvider};

pub use loss::{gram_matrix, loss_and_grad, protection_loss, BatchSample, LossBreakdown};
pub use ssim::{ssim, ssim_with_gradient};

/// How a texture was trained; stored alongside it for audit.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainingMeta {
    pub eta: f64,
    pub omega: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub ensemble_ids: Vec<String>,
    pub seed: u64,
    pub logdet_enabled: bool,
}

/// A user's privacy protection texture, bounded in `[-epsilon, epsilon]`.
#[derive(Debug, Clone)]
pub struct PPT {
    pub texture: Texture,
    pub epsilon: f64,
    pub user_id: u32,
    pub training_meta: TrainingMeta,
}

impl PPT {
    pub fn max_abs(&self) -> f64 {
        self.texture.iter().fold(0.0f64, |a, &b| a.max(b.abs()))
    }
}

/// Result of protecting one image.
#[derive(Debug, Clone)]
pub struct ProtectionResult {
    pub protected_image: Image,
    pub delta: Image,
    pub source_ref: String,
}

/// Training-loop configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PptTrainSpec {
    pub epsilon: f64,
    pub eta: f64,
    pub omega: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub texture_size: usize,
    pub gamma: f64,
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub use_logdet: bool,
}

impl Default for PptTrainSpec {
    fn default() -> Self {
        let epsilon = 0.063;
        Self {
            epsilon,
            eta: epsilon / 10.0,
            omega: 0.025,
            batch_size: 4,
            iterations: 1000,
            seed: 0,
            texture_size: 64,
            gamma: loss::DEFAULT_GAMMA,
            lambda_init: 1.0,
            lambda_up: 1.2,
            lambda_down: 0.9,
            lambda_min: 0.1,
            lambda_max: 1e6,
            use_logdet: true,
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub protect_logdet_term: f64,
    pub protect_sim_term: f64,
    pub percept_term: f64,
    pub lambda_ssim: f64,
    pub total: f64,
    pub mean_ssim: f64,
    pub max_abs_texture: f64,
}

/// Sample a texture at every valid pixel's UV coordinate; zero elsewhere.
pub fn deform_texture(texture: &Texture, uv: &UvMap, mask: &Mask) -> Result<Image> {
    let (h, w, two) = uv.dim();
    if two != 2 {
        return Err(CoreError::Shape(format!("uv map has {two} channels, expected 2")));
    }
    if mask.dim() != (h, w) {
        return Err(CoreError::Shape(format!(
            "mask {:?} does not match uv map {}x{}",
            mask.dim(),
            h,
            w
        )));
    }
    if texture.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Numeric("texture contains non-finite values".into()));
    }
    let c = texture.dim().2;
    let mut delta = Array3::zeros((h, w, c));
    let mut sample = vec![0.0; c];
    for r in 0..h {
        for col in 0..w {
            if mask[[r, col]] {
                sample_all(texture, uv[[r, col, 0]], uv[[r, col, 1]], &mut sample);
                for (ch, &s) in sample.iter().enumerate() {
                    delta[[r, col, ch]] = s;
                }
            }
        }
    }
    Ok(delta)
}

/// Deform a PPT into an image-space perturbation.
pub fn deform(ppt: &PPT, uv: &UvMap, mask: &Mask) -> Result<Image> {
    deform_texture(&ppt.texture, uv, mask)
}

/// Apply a PPT to an image given its UV lookup:
/// `protected = clip_[0,1](image - delta)`.
pub fn protect_at(
    image: &Image,
    ppt: &PPT,
    uv: &UvMap,
    mask: &Mask,
    source_ref: &str,
) -> Result<ProtectionResult> {
    if image.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(CoreError::Config("image values must lie in [0, 1]".into()));
    }
    let (h, w, c) = image.dim();
    if uv.dim().0 != h || uv.dim().1 != w {
        return Err(CoreError::Shape(format!(
            "uv map {:?} does not match image {}x{}",
            uv.dim(),
            h,
            w
        )));
    }
    if ppt.texture.dim().2 != c {
        return Err(CoreError::Shape(format!(
            "texture has {} channels, image has {c}",
            ppt.texture.dim().2
        )));
    }
    let delta = deform_texture(&ppt.texture, uv, mask)?;
    let protected = (image - &delta).mapv(|v| v.clamp(0.0, 1.0));
    Ok(ProtectionResult {
        protected_image: protected,
        delta,
        source_ref: source_ref.to_string(),
    })
}

/// Apply a PPT to an image, resolving the UV lookup through a provider.
pub fn protect(
    image: &Image,
    ppt: &PPT,
    provider: &dyn UvProvider,
    source_ref: &str,
) -> Result<ProtectionResult> {
    let (uv, mask) = provider.uv_lookup(0, image)?;
    protect_at(image, ppt, &uv, &mask, source_ref)
}

/// Protect an ordered frame sequence. Purely per-frame: frame `k`'s result is
/// identical to protecting it alone.
pub fn protect_sequence(
    frames: &[Image],
    ppt: &PPT,
    provider: &dyn UvProvider,
) -> Result<Vec<ProtectionResult>> {
    if let Some(first) = frames.first() {
        if frames.iter().any(|f| f.dim() != first.dim()) {
            return Err(CoreError::Shape("frames have mixed shapes".into()));
        }
    }
    frames
        .iter()
        .enumerate()
        .map(|(k, frame)| {
            let (uv, mask) = provider
                .uv_lookup(k, frame)
                .map_err(|e| match e {
                    CoreError::NoFace(msg) => CoreError::NoFace(format!("frame {k}: {msg}")),
                    other => other,
                })?;
            protect_at(frame, ppt, &uv, &mask, &format!("frame{k}"))
        })
        .collect()
}

fn sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Train a user's PPT on their training DB images with signed-gradient
/// steps, clipping the texture to the epsilon box after every update.
pub fn train_ppt(
    user: &UserSplit,
    ensemble: &Ensemble,
    spec: &PptTrainSpec,
) -> Result<(PPT, Vec<TrainLogRow>)> {
    let omega_images = &user.train_db_images;
    if omega_images.len() < 2 {
        return Err(CoreError::Config(format!(
            "user {} has {} training images; need >= 2",
            user.user_id,
            omega_images.len()
        )));
    }
    if spec.batch_size < 2 {
        return Err(CoreError::Config("batch size must be >= 2".into()));
    }
    if spec.epsilon <= 0.0 || spec.eta < 0.0 {
        return Err(CoreError::Config(format!(
            "epsilon {} / eta {} out of range",
            spec.epsilon, spec.eta
        )));
    }
    let channels = omega_images[0].image.dim().2;
    let batch_size = spec.batch_size.min(omega_images.len());

    // Original features never change; compute them once per member.
    let originals_all: Vec<Vec<ndarray::Array1<f64>>> = ensemble
        .members()
        .iter()
        .map(|m| {
            omega_images
                .iter()
                .map(|f| Ok(m.embed(&f.image)?.values().clone()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut texture: Texture = Array3::zeros((spec.texture_size, spec.texture_size, channels));
    let mut lambda = spec.lambda_init;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7077_5EED);
    let mut deck: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(spec.iterations);

    for t in 0..spec.iterations {
        if deck.len() < batch_size {
            deck = (0..omega_images.len()).collect();
            deck.shuffle(&mut rng);
        }
        let batch_idx: Vec<usize> = deck.drain(..batch_size).collect();

        let batch: Vec<BatchSample<'_>> = batch_idx
            .iter()
            .map(|&i| BatchSample {
                image: &omega_images[i].image,
                uv: &omega_images[i].uv_map,
                mask: &omega_images[i].validity_mask,
            })
            .collect();
        let originals: Vec<Vec<ndarray::Array1<f64>>> = originals_all
            .iter()
            .map(|per_member| batch_idx.iter().map(|&i| per_member[i].clone()).collect())
            .collect();

        let eval = loss_and_grad(
            &batch,
            &texture,
            ensemble,
            &originals,
            lambda,
            spec.omega,
            spec.gamma,
            spec.use_logdet,
        )
        .map_err(|e| match e {
            CoreError::Numeric(msg) => CoreError::Numeric(format!("iteration {t}: {msg}")),
            other => other,
        })?;

        // T <- clip_[-eps, eps](T - eta * sign(grad)); texels pinned at the
        // boundary still take the step and are re-clipped.
        for (tx, g) in texture.iter_mut().zip(eval.texture_grad.iter()) {
            *tx = (*tx - spec.eta * sign(*g)).clamp(-spec.epsilon, spec.epsilon);
        }

        let max_abs = texture.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        log.push(TrainLogRow {
            iteration: t,
            protect_logdet_term: eval.breakdown.protect_logdet_term,
            protect_sim_term: eval.breakdown.protect_sim_term,
            percept_term: eval.breakdown.percept_term,
            lambda_ssim: eval.breakdown.lambda_ssim,
            total: eval.breakdown.total,
            mean_ssim: eval.mean_ssim,
            max_abs_texture: max_abs,
        });

        lambda = if eval.breakdown.percept_term > 0.0 {
            (lambda * spec.lambda_up).min(spec.lambda_max)
        } else {
            (lambda * spec.lambda_down).max(spec.lambda_min)
        };
    }

    let ppt = PPT {
        texture,
        epsilon: spec.epsilon,
        user_id: user.user_id,
        training_meta: TrainingMeta {
            eta: spec.eta,
            omega: spec.omega,
            batch_size: spec.batch_size,
            iterations: spec.iterations,
            ensemble_ids: ensemble.member_ids(),
            seed: spec.seed,
            logdet_enabled: spec.use_logdet,
        },
    };
    Ok((ppt, log))
}

/// Train PPTs for many users in parallel (deterministic per user).
pub fn train_ppts_parallel(
    users: &[UserSplit],
    ensemble: &Ensemble,
    spec: &PptTrainSpec,
) -> Result<std::collections::BTreeMap<u32, (PPT, Vec<TrainLogRow>)>> {
    use rayon::prelude::*;
    let results: Vec<Result<(u32, (PPT, Vec<TrainLogRow>))>> = users
        .par_iter()
        .map(|user| {
            let out = train_ppt(user, ensemble, spec)?;
            Ok((user.user_id, out))
        })
        .collect();
    results.into_iter().collect()
}

/// Perceptual loss on a batch of (clean, protected) pairs:
/// `max(sum_i (1 - ssim_i) / (2 |B|) - omega, 0)`.
pub fn perceptual_loss(pairs: &[(&Image, &Image)], omega: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(CoreError::Config("perceptual loss needs a non-empty batch".into()));
    }
    let inv_2b = 1.0 / (2.0 * pairs.len() as f64);
    let mut drop = 0.0;
    for (clean, protected) in pairs {
        drop += (1.0 - ssim(clean, protected)?) * inv_2b;
    }
    Ok((drop - omega).max(0.0))
}
