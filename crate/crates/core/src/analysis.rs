//! Feature-geometry statistics used by ablation studies: how tightly a
//! user's (protected) images cluster in an embedder's feature space.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::fr::{cosine_sim, FRModel, FeatureVector};
use crate::ppt::{protect_at, PPT};
use crate::world::UserSplit;

fn db_features(
    user: &UserSplit,
    ppt: Option<&PPT>,
    model: &FRModel,
) -> Result<Vec<FeatureVector>> {
    user.db_images()
        .map(|f| {
            let image = match ppt {
                None => f.image.clone(),
                Some(p) => {
                    protect_at(&f.image, p, &f.uv_map, &f.validity_mask, "analysis")?
                        .protected_image
                }
            };
            model.embed(&image)
        })
        .collect()
}

fn mean_pairwise(feats: &[FeatureVector]) -> Result<f64> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for i in 0..feats.len() {
        for j in (i + 1)..feats.len() {
            acc += cosine_sim(&feats[i], &feats[j])?;
            n += 1;
        }
    }
    Ok(acc / n.max(1) as f64)
}

/// Mean pairwise cosine among each user's DB-image features (protected when
/// `ppts` is given), averaged across users. Lower means more spread.
pub fn mean_pairwise_feature_cosine(
    users: &[UserSplit],
    ppts: Option<&BTreeMap<u32, PPT>>,
    model: &FRModel,
) -> Result<f64> {
    let mut acc = 0.0;
    for user in users {
        let ppt = match ppts {
            None => None,
            Some(map) => Some(map.get(&user.user_id).ok_or_else(|| {
                crate::error::CoreError::Config(format!("no PPT for user {}", user.user_id))
            })?),
        };
        let feats = db_features(user, ppt, model)?;
        acc += mean_pairwise(&feats)?;
    }
    Ok(acc / users.len().max(1) as f64)
}

/// Mean cosine between each DB image's original and protected embeddings,
/// averaged over images and users.
pub fn mean_protected_vs_original_cosine(
    users: &[UserSplit],
    ppts: &BTreeMap<u32, PPT>,
    model: &FRModel,
) -> Result<f64> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for user in users {
        let ppt = ppts.get(&user.user_id).ok_or_else(|| {
            crate::error::CoreError::Config(format!("no PPT for user {}", user.user_id))
        })?;
        for f in user.db_images() {
            let orig = model.embed(&f.image)?;
            let prot = model.embed(
                &protect_at(&f.image, ppt, &f.uv_map, &f.validity_mask, "analysis")?
                    .protected_image,
            )?;
            acc += cosine_sim(&orig, &prot)?;
            n += 1;
        }
    }
    Ok(acc / n.max(1) as f64)
}
