//! The protection objective: Gram log-determinant diversity plus
//! original-vs-protected similarity, with a hinged SSIM penalty.
//!
//! `loss_and_grad` evaluates the full composition (texture -> deformation ->
//! protected image -> embeddings -> loss) and backpropagates to the texture,
//! so a training step is one call.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fr::{Ensemble, FeatureVector};
use crate::grid::{scatter_all, Image, Mask, Texture, UvMap};
use crate::ppt::ssim::ssim_with_gradient;
use crate::ppt::{deform_texture, PPT};

/// Ridge added to the Gram matrix before the log-determinant.
pub const DEFAULT_GAMMA: f64 = 1e-4;

/// One evaluated loss, split into its terms.
///
/// Invariant: `total = protect_logdet_term + protect_sim_term +
/// lambda_ssim * percept_term`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub protect_logdet_term: f64,
    pub protect_sim_term: f64,
    pub percept_term: f64,
    pub lambda_ssim: f64,
    pub total: f64,
}

/// Gram matrix of pairwise inner products of unit-norm features.
pub fn gram_matrix(features: &[FeatureVector]) -> Result<Array2<f64>> {
    if features.is_empty() {
        return Err(CoreError::Shape("gram matrix needs at least one feature".into()));
    }
    let dim = features[0].dim();
    if features.iter().any(|f| f.dim() != dim) {
        return Err(CoreError::Shape("gram matrix features have mixed dims".into()));
    }
    let n = features.len();
    let mut g = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let v = features[i].values().dot(features[j].values());
            g[[i, j]] = v;
            g[[j, i]] = v;
        }
    }
    Ok(g)
}

/// Determinant of a small square matrix by LU decomposition with partial
/// pivoting. Handles singular matrices (returns 0).
pub fn det(m: &Array2<f64>) -> f64 {
    let n = m.dim().0;
    let mut a = m.clone();
    let mut sign = 1.0;
    for k in 0..n {
        let mut piv = k;
        for r in (k + 1)..n {
            if a[[r, k]].abs() > a[[piv, k]].abs() {
                piv = r;
            }
        }
        if a[[piv, k]] == 0.0 {
            return 0.0;
        }
        if piv != k {
            for c in 0..n {
                let t = a[[k, c]];
                a[[k, c]] = a[[piv, c]];
                a[[piv, c]] = t;
            }
            sign = -sign;
        }
        for r in (k + 1)..n {
            let f = a[[r, k]] / a[[k, k]];
            for c in k..n {
                a[[r, c]] -= f * a[[k, c]];
            }
        }
    }
    let mut d = sign;
    for k in 0..n {
        d *= a[[k, k]];
    }
    d
}

/// Cholesky factor of a symmetric positive-definite matrix.
fn cholesky(m: &Array2<f64>) -> Result<Array2<f64>> {
    let n = m.dim().0;
    let mut l: Array2<f64> = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = m[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(CoreError::Numeric(format!(
                        "matrix not positive definite at pivot {i} ({s})"
                    )));
                }
                l[[i, j]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// `log det` of an SPD matrix, computed in log space from the Cholesky
/// factor so near-singular matrices do not underflow.
pub fn logdet_spd(m: &Array2<f64>) -> Result<f64> {
    let l = cholesky(m)?;
    let n = m.dim().0;
    let mut acc = 0.0;
    for i in 0..n {
        acc += l[[i, i]].ln();
    }
    Ok(2.0 * acc)
}

/// Inverse of an SPD matrix via its Cholesky factor.
fn spd_inverse(m: &Array2<f64>) -> Result<Array2<f64>> {
    let l = cholesky(m)?;
    let n = m.dim().0;
    // Solve L L^T X = I column by column.
    let mut inv = Array2::zeros((n, n));
    for col in 0..n {
        // Forward: L y = e_col
        let mut y = Array1::zeros(n);
        for i in 0..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= l[[i, k]] * y[k];
            }
            y[i] = s / l[[i, i]];
        }
        // Backward: L^T x = y
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[[k, i]] * inv[[k, col]];
            }
            inv[[i, col]] = s / l[[i, i]];
        }
    }
    Ok(inv)
}

/// Per-member protection-loss terms from already computed features, with
/// gradients on the protected features.
///
/// Returns `(logdet_term, sim_term, per-feature gradients)` where the terms
/// are already divided by the ensemble size and batch size as applicable.
pub fn protection_terms(
    protected: &[Array1<f64>],
    originals: &[Array1<f64>],
    n_members: usize,
    gamma: f64,
    use_logdet: bool,
) -> Result<(f64, f64, Vec<Array1<f64>>)> {
    let b = protected.len();
    if b == 0 || originals.len() != b {
        return Err(CoreError::Shape("protected/original feature count mismatch".into()));
    }
    let dim = protected[0].len();
    let inv_f = 1.0 / n_members as f64;
    let mut grads = vec![Array1::<f64>::zeros(dim); b];

    let mut logdet_term = 0.0;
    if use_logdet {
        let mut m = Array2::zeros((b, b));
        for i in 0..b {
            for j in i..b {
                let v = protected[i].dot(&protected[j]);
                m[[i, j]] = v;
                m[[j, i]] = v;
            }
        }
        for i in 0..b {
            m[[i, i]] += gamma;
        }
        let ld = logdet_spd(&m)?;
        logdet_term = -inv_f * ld;
        let minv = spd_inverse(&m)?;
        // d(-logdet)/d f_i = -2 sum_j Minv[i,j] f_j
        for i in 0..b {
            for j in 0..b {
                let w = -inv_f * 2.0 * minv[[i, j]];
                grads[i].scaled_add(w, &protected[j]);
            }
        }
    }

    let inv_fb = inv_f / b as f64;
    let mut sim_term = 0.0;
    for i in 0..b {
        sim_term += inv_fb * originals[i].dot(&protected[i]);
        grads[i].scaled_add(inv_fb, &originals[i]);
    }

    Ok((logdet_term, sim_term, grads))
}

/// One batch element: the clean image and its UV lookup.
pub struct BatchSample<'a> {
    pub image: &'a Image,
    pub uv: &'a UvMap,
    pub mask: &'a Mask,
}

/// Result of one full loss evaluation.
pub struct LossEval {
    pub breakdown: LossBreakdown,
    pub texture_grad: Texture,
    pub mean_ssim: f64,
}

/// Evaluate the combined loss on a batch and backpropagate to the texture.
///
/// `originals[m][i]` is the pre-computed feature of clean image `i` under
/// ensemble member `m`. Members are reduced in their ensemble order so the
/// gradient is reproducible bit for bit.
pub fn loss_and_grad(
    batch: &[BatchSample<'_>],
    texture: &Texture,
    ensemble: &Ensemble,
    originals: &[Vec<Array1<f64>>],
    lambda_ssim: f64,
    omega: f64,
    gamma: f64,
    use_logdet: bool,
) -> Result<LossEval> {
    if batch.len() < 2 {
        return Err(CoreError::Config(format!(
            "protection loss needs a batch of >= 2, got {}",
            batch.len()
        )));
    }
    if originals.len() != ensemble.len() {
        return Err(CoreError::Shape("originals not aligned with ensemble".into()));
    }

    // Deform and protect each batch image once.
    let mut deltas = Vec::with_capacity(batch.len());
    let mut protected = Vec::with_capacity(batch.len());
    let mut clip_open = Vec::with_capacity(batch.len());
    for s in batch {
        let delta = deform_texture(texture, s.uv, s.mask)?;
        let pre = s.image - &delta;
        // Pixels strictly inside (0,1) pass gradient through the clip.
        let open = pre.mapv(|v| if v > 0.0 && v < 1.0 { 1.0 } else { 0.0 });
        protected.push(pre.mapv(|v| v.clamp(0.0, 1.0)));
        clip_open.push(open);
        deltas.push(delta);
    }

    let mut d_protected: Vec<Image> =
        protected.iter().map(|p| Array3::zeros(p.dim())).collect();

    let mut logdet_term = 0.0;
    let mut sim_term = 0.0;
    for (m, member) in ensemble.members().iter().enumerate() {
        let caches: Vec<_> = protected.iter().map(|p| member.net.forward(p)).collect();
        let feats: Vec<Array1<f64>> = caches.iter().map(|c| c.feat.clone()).collect();
        let (ld, sim, feat_grads) =
            protection_terms(&feats, &originals[m], ensemble.len(), gamma, use_logdet)?;
        logdet_term += ld;
        sim_term += sim;
        for (i, cache) in caches.iter().enumerate() {
            let dimg = member.net.backward(cache, &feat_grads[i], None);
            d_protected[i] += &dimg;
        }
    }

    // Perceptual hinge.
    let inv_2b = 1.0 / (2.0 * batch.len() as f64);
    let mut drop_sum = 0.0;
    let mut ssim_sum = 0.0;
    let mut ssim_grads = Vec::with_capacity(batch.len());
    for (s, p) in batch.iter().zip(protected.iter()) {
        let (value, grad) = ssim_with_gradient(s.image, p)?;
        ssim_sum += value;
        drop_sum += (1.0 - value) * inv_2b;
        ssim_grads.push(grad);
    }
    let percept_raw = drop_sum - omega;
    let percept_term = percept_raw.max(0.0);
    if percept_raw > 0.0 {
        for (i, grad) in ssim_grads.iter().enumerate() {
            // d percept / d protected_i = -inv_2b * d ssim_i
            d_protected[i].scaled_add(-lambda_ssim * inv_2b, grad);
        }
    }

    let total = logdet_term + sim_term + lambda_ssim * percept_term;
    if !total.is_finite() {
        return Err(CoreError::Numeric(format!(
            "non-finite loss: logdet {logdet_term}, sim {sim_term}, percept {percept_term}"
        )));
    }

    // Through the clip and the subtraction, then scatter into the texture.
    let mut texture_grad = Array3::zeros(texture.dim());
    for (i, s) in batch.iter().enumerate() {
        let (h, w, c) = d_protected[i].dim();
        let mut upstream = vec![0.0; c];
        for r in 0..h {
            for col in 0..w {
                if !s.mask[[r, col]] {
                    continue;
                }
                let mut any = false;
                for ch in 0..c {
                    // protected = clip(image - delta): d/d delta = -1 inside.
                    let g = -d_protected[i][[r, col, ch]] * clip_open[i][[r, col, ch]];
                    upstream[ch] = g;
                    any |= g != 0.0;
                }
                if any {
                    scatter_all(
                        &mut texture_grad,
                        s.uv[[r, col, 0]],
                        s.uv[[r, col, 1]],
                        &upstream,
                    );
                }
            }
        }
    }

    Ok(LossEval {
        breakdown: LossBreakdown {
            protect_logdet_term: logdet_term,
            protect_sim_term: sim_term,
            percept_term,
            lambda_ssim,
            total,
        },
        texture_grad,
        mean_ssim: ssim_sum / batch.len() as f64,
    })
}

/// Spec-level protection loss: Gram diversity plus protected-vs-original
/// similarity, evaluated through the full protect/embed path.
pub fn protection_loss(
    batch: &[BatchSample<'_>],
    ppt: &PPT,
    ensemble: &Ensemble,
    gamma: f64,
) -> Result<(f64, Texture)> {
    let originals: Vec<Vec<Array1<f64>>> = ensemble
        .members()
        .iter()
        .map(|m| {
            batch
                .iter()
                .map(|s| Ok(m.embed(s.image)?.values().clone()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let eval = loss_and_grad(
        batch,
        &ppt.texture,
        ensemble,
        &originals,
        0.0,
        f64::INFINITY,
        gamma,
        true,
    )?;
    Ok((
        eval.breakdown.protect_logdet_term + eval.breakdown.protect_sim_term,
        eval.texture_grad,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vec<f64>) -> FeatureVector {
        FeatureVector::normalized(Array1::from_vec(v)).unwrap()
    }

    #[test]
    fn gram_of_orthonormal_features_is_identity() {
        let feats = vec![
            unit(vec![1.0, 0.0, 0.0, 0.0]),
            unit(vec![0.0, 1.0, 0.0, 0.0]),
            unit(vec![0.0, 0.0, 1.0, 0.0]),
        ];
        let g = gram_matrix(&feats).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g[[i, j]] - want).abs() < 1e-12);
            }
        }
        assert!((det(&g) - 1.0).abs() < 1e-12);
        assert!(logdet_spd(&g).unwrap().abs() < 1e-12);
    }

    #[test]
    fn duplicate_features_make_gram_singular() {
        let f = unit(vec![0.3, -0.2, 0.9, 0.1]);
        let g = gram_matrix(&[f.clone(), f]).unwrap();
        assert!(det(&g).abs() < 1e-12);
        assert!(logdet_spd(&g).is_err());
    }

    #[test]
    fn det_matches_cofactor_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for b in 1..=5usize {
            for _ in 0..20 {
                let feats: Vec<FeatureVector> = (0..b)
                    .map(|_| {
                        FeatureVector::normalized(Array1::from_shape_fn(32, |_| {
                            rng.gen_range(-1.0..1.0)
                        }))
                        .unwrap()
                    })
                    .collect();
                let g = gram_matrix(&feats).unwrap();
                let got = det(&g);
                let want = cofactor_det(&g);
                assert!(
                    (got - want).abs() < 1e-10,
                    "B={b}: LU {got} vs cofactor {want}"
                );
            }
        }
    }

    fn cofactor_det(m: &Array2<f64>) -> f64 {
        let n = m.dim().0;
        if n == 1 {
            return m[[0, 0]];
        }
        let mut acc = 0.0;
        for j in 0..n {
            let minor = Array2::from_shape_fn((n - 1, n - 1), |(r, c)| {
                m[[r + 1, if c < j { c } else { c + 1 }]]
            });
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            acc += sign * m[[0, j]] * cofactor_det(&minor);
        }
        acc
    }

    #[test]
    fn logdet_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let b = 3;
        let dim = 8;
        let feats: Vec<Array1<f64>> = (0..b)
            .map(|_| {
                let v: Array1<f64> = Array1::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0));
                let n = v.dot(&v).sqrt();
                v / n
            })
            .collect();
        let origs: Vec<Array1<f64>> = (0..b)
            .map(|_| {
                let v: Array1<f64> = Array1::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0));
                let n = v.dot(&v).sqrt();
                v / n
            })
            .collect();
        let gamma = 1e-4;
        let (_, _, grads) = protection_terms(&feats, &origs, 1, gamma, true).unwrap();

        let value = |fs: &[Array1<f64>]| -> f64 {
            let (ld, sim, _) = protection_terms(fs, &origs, 1, gamma, true).unwrap();
            ld + sim
        };
        let h = 1e-6;
        for i in 0..b {
            for k in 0..dim {
                let mut plus = feats.clone();
                plus[i][k] += h;
                let mut minus = feats.clone();
                minus[i][k] -= h;
                let fd = (value(&plus) - value(&minus)) / (2.0 * h);
                let an = grads[i][k];
                let rel = (an - fd).abs() / (an.abs().max(fd.abs()) + 1e-8);
                assert!(rel < 1e-4, "feat {i}[{k}]: analytic {an} vs fd {fd}");
            }
        }
    }
}
