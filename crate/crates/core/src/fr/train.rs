//! Embedder training on identity labels.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fr::net::{ArchitectureId, ConvNet};
use crate::fr::{FRModel, LossId};
use crate::world::RenderedFace;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrTrainSpec {
    pub arch: ArchitectureId,
    pub loss: LossId,
    pub feature_dim: usize,
    pub training_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Images per identity held out for verification.
    pub holdout_per_identity: usize,
    /// Minimum verification accuracy (triple comparisons) to accept the model.
    pub accuracy_floor: f64,
    /// Angular margin (ArcMargin only).
    pub margin: f64,
    /// Logit scale (ArcMargin only).
    pub scale: f64,
}

impl Default for FrTrainSpec {
    fn default() -> Self {
        Self {
            arch: ArchitectureId::Conv3,
            loss: LossId::Softmax,
            feature_dim: 32,
            training_seed: 0,
            epochs: 40,
            batch_size: 16,
            learning_rate: 0.01,
            momentum: 0.9,
            holdout_per_identity: 2,
            accuracy_floor: 0.9,
            margin: 0.3,
            scale: 16.0,
        }
    }
}

impl FrTrainSpec {
    /// Defaults tuned per loss head: the margin head needs a much smaller
    /// step because the logit scale multiplies its gradients.
    pub fn recommended(arch: ArchitectureId, loss: LossId, training_seed: u64) -> Self {
        let learning_rate = match loss {
            LossId::Softmax => 0.01,
            LossId::ArcMargin => 0.001,
        };
        Self { arch, loss, training_seed, learning_rate, ..Self::default() }
    }
}

struct Classifier {
    w: Array2<f64>,
    b: Array1<f64>,
}

impl Classifier {
    fn init(rng: &mut ChaCha8Rng, classes: usize, dim: usize) -> Self {
        let a = (6.0 / (classes + dim) as f64).sqrt();
        Classifier {
            w: Array2::from_shape_fn((classes, dim), |_| rng.gen_range(-a..a)),
            b: Array1::zeros(classes),
        }
    }
}

fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exp = logits.mapv(|x| (x - m).exp());
    let s = exp.sum();
    exp / s
}

/// Train an embedder on identity labels and verify it on a held-out split.
///
/// Deterministic given `spec.training_seed`. Fails with
/// [`CoreError::TrainingFailure`] when the verification floor is not met.
pub fn train_fr(dataset: &[RenderedFace], spec: &FrTrainSpec) -> Result<FRModel> {
    // Group by identity in first-appearance order.
    let mut order: Vec<u32> = Vec::new();
    let mut groups: std::collections::HashMap<u32, Vec<usize>> = std::collections::HashMap::new();
    for (i, f) in dataset.iter().enumerate() {
        if !groups.contains_key(&f.identity_id) {
            order.push(f.identity_id);
        }
        groups.entry(f.identity_id).or_default().push(i);
    }
    if order.len() < 2 {
        return Err(CoreError::Config(format!(
            "training needs >= 2 identities, got {}",
            order.len()
        )));
    }
    if order.iter().any(|id| groups[id].len() < 2) {
        return Err(CoreError::Config(
            "every identity needs >= 2 images".into(),
        ));
    }

    let (h, w, c) = dataset[0].image.dim();
    if h != w {
        return Err(CoreError::Shape(format!("images must be square, got {h}x{w}")));
    }
    if dataset.iter().any(|f| f.image.dim() != (h, w, c)) {
        return Err(CoreError::Shape("dataset images have mixed shapes".into()));
    }

    // Per-identity holdout: the trailing images of each identity.
    let mut train_idx: Vec<(usize, usize)> = Vec::new(); // (dataset index, class)
    let mut holdout_idx: Vec<(usize, usize)> = Vec::new();
    for (class, id) in order.iter().enumerate() {
        let idxs = &groups[id];
        let held = spec.holdout_per_identity.min(idxs.len() - 1);
        let cut = idxs.len() - held;
        for &i in &idxs[..cut] {
            train_idx.push((i, class));
        }
        for &i in &idxs[cut..] {
            holdout_idx.push((i, class));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.training_seed);
    let mut net = ConvNet::init(spec.arch, h, c, spec.feature_dim, &mut rng);
    let mut clf = Classifier::init(&mut rng, order.len(), spec.feature_dim);

    let mut net_velocity: Vec<f64> = Vec::new();
    let mut clf_w_vel = Array2::<f64>::zeros(clf.w.dim());
    let mut clf_b_vel = Array1::<f64>::zeros(clf.b.dim());

    let (cos_m, sin_m) = (spec.margin.cos(), spec.margin.sin());

    for _epoch in 0..spec.epochs {
        let mut perm = train_idx.clone();
        perm.shuffle(&mut rng);
        for batch in perm.chunks(spec.batch_size) {
            let mut grads = net.zero_grads();
            let mut clf_w_grad = Array2::<f64>::zeros(clf.w.dim());
            let mut clf_b_grad = Array1::<f64>::zeros(clf.b.dim());
            let inv_n = 1.0 / batch.len() as f64;

            for &(i, class) in batch {
                let cache = net.forward(&dataset[i].image);
                match spec.loss {
                    LossId::Softmax => {
                        let logits = clf.w.dot(&cache.z) + &clf.b;
                        let mut dlogits = softmax(&logits);
                        dlogits[class] -= 1.0;
                        dlogits *= inv_n;
                        let dz = clf.w.t().dot(&dlogits);
                        for (j, &dl) in dlogits.iter().enumerate() {
                            clf_b_grad[j] += dl;
                            for (k, &zk) in cache.z.iter().enumerate() {
                                clf_w_grad[[j, k]] += dl * zk;
                            }
                        }
                        net.backward_from_z(&cache, &dz, Some(&mut grads));
                    }
                    LossId::ArcMargin => {
                        let feat = &cache.feat;
                        let classes = clf.w.dim().0;
                        let mut cosines = Array1::zeros(classes);
                        let mut w_norms = Array1::zeros(classes);
                        for j in 0..classes {
                            let row = clf.w.row(j);
                            let n = row.dot(&row).sqrt().max(1e-12);
                            w_norms[j] = n;
                            cosines[j] = row.dot(feat) / n;
                        }
                        let cos_y = cosines[class].clamp(-0.999_999, 0.999_999);
                        let sin_y = (1.0 - cos_y * cos_y).sqrt().max(0.05);
                        let mut logits = cosines.mapv(|x| spec.scale * x);
                        logits[class] = spec.scale * (cos_y * cos_m - sin_y * sin_m);
                        let mut dlogits = softmax(&logits);
                        dlogits[class] -= 1.0;
                        dlogits *= inv_n;

                        let mut dcos = dlogits.mapv(|x| spec.scale * x);
                        dcos[class] *= cos_m + sin_m * cos_y / sin_y;

                        let mut dfeat = Array1::<f64>::zeros(spec.feature_dim);
                        for j in 0..classes {
                            let row = clf.w.row(j);
                            let n = w_norms[j];
                            let w_hat = row.mapv(|x| x / n);
                            dfeat = dfeat + &w_hat * dcos[j];
                            // d w_j = (dcos_j * feat - (dcos_j * cos_j) w_hat) / ||w_j||
                            for k in 0..spec.feature_dim {
                                clf_w_grad[[j, k]] +=
                                    dcos[j] * (feat[k] - cosines[j] * w_hat[k]) / n;
                            }
                        }
                        net.backward(&cache, &dfeat, Some(&mut grads));
                    }
                }
            }

            net.sgd_step(&mut grads, &mut net_velocity, spec.learning_rate, spec.momentum);
            clf_w_vel = &clf_w_vel * spec.momentum - &(clf_w_grad * spec.learning_rate);
            clf.w = &clf.w + &clf_w_vel;
            clf_b_vel = &clf_b_vel * spec.momentum - &(clf_b_grad * spec.learning_rate);
            clf.b = &clf.b + &clf_b_vel;
        }
    }

    let model = FRModel {
        net,
        loss_id: spec.loss,
        training_seed: spec.training_seed,
        accuracy: 0.0,
    };
    let accuracy = verification_accuracy(&model, dataset, &holdout_idx, spec.training_seed, 200)?;
    if accuracy < spec.accuracy_floor {
        return Err(CoreError::TrainingFailure { achieved: accuracy, floor: spec.accuracy_floor });
    }
    Ok(FRModel { accuracy, ..model })
}

/// Fraction of (anchor, positive, negative) triples where the same-identity
/// cosine beats the cross-identity cosine.
pub fn verification_accuracy(
    model: &FRModel,
    dataset: &[RenderedFace],
    pool: &[(usize, usize)],
    seed: u64,
    n_triples: usize,
) -> Result<f64> {
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for &(i, class) in pool {
        by_class.entry(class).or_default().push(i);
    }
    let classes: Vec<usize> = by_class
        .iter()
        .filter(|(_, v)| v.len() >= 2)
        .map(|(k, _)| *k)
        .collect();
    if classes.len() < 2 {
        return Err(CoreError::Config(
            "verification needs >= 2 identities with >= 2 held-out images".into(),
        ));
    }

    let feats: std::collections::BTreeMap<usize, crate::fr::FeatureVector> = pool
        .iter()
        .map(|&(i, _)| Ok((i, model.embed(&dataset[i].image)?)))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xACC0_CAFE);
    let mut hits = 0usize;
    for _ in 0..n_triples {
        let ca = classes[rng.gen_range(0..classes.len())];
        let cb = loop {
            let c = classes[rng.gen_range(0..classes.len())];
            if c != ca {
                break c;
            }
        };
        let a_pool = &by_class[&ca];
        let anchor = a_pool[rng.gen_range(0..a_pool.len())];
        let pos = loop {
            let p = a_pool[rng.gen_range(0..a_pool.len())];
            if p != anchor {
                break p;
            }
        };
        let n_pool = &by_class[&cb];
        let neg = n_pool[rng.gen_range(0..n_pool.len())];
        let s_pos = crate::fr::cosine_sim(&feats[&anchor], &feats[&pos])?;
        let s_neg = crate::fr::cosine_sim(&feats[&anchor], &feats[&neg])?;
        if s_pos > s_neg {
            hits += 1;
        }
    }
    Ok(hits as f64 / n_triples as f64)
}
