//! The privacy intruder: a feature-indexed database, exact top-K cosine
//! search, the per-person recall metric, and the scenario harness.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fr::{Ensemble, FRModel, FeatureVector};
use crate::grid::Image;
use crate::ppt::{protect_at, train_ppt, PptTrainSpec, PPT};
use crate::world::{RenderedFace, UserSplit};

/// One database entry. `identity_id` is ground truth used only by the
/// evaluation metric; the search path never reads it.
#[derive(Debug, Clone)]
pub struct DbEntry {
    pub entry_id: u64,
    pub identity_id: u32,
    pub feature: FeatureVector,
    pub content_ref: String,
    pub protected: bool,
}

/// A feature-indexed database tied to the model that embedded it.
#[derive(Debug, Clone)]
pub struct Database {
    pub entries: Vec<DbEntry>,
    pub model_id: String,
}

/// An image staged for ingestion.
pub struct DbImage<'a> {
    pub image: &'a Image,
    pub identity_id: u32,
    pub content_ref: String,
    pub protected: bool,
}

/// Embed every image and assign entry ids in input order.
pub fn build_db(images: &[DbImage<'_>], model: &FRModel) -> Result<Database> {
    if images.is_empty() {
        return Err(CoreError::Config("cannot build an empty database".into()));
    }
    let mut entries = Vec::with_capacity(images.len());
    for (i, im) in images.iter().enumerate() {
        let feature = model.embed(im.image).map_err(|e| {
            CoreError::Consistency(format!("embedding entry {i} failed: {e}"))
        })?;
        entries.push(DbEntry {
            entry_id: i as u64,
            identity_id: im.identity_id,
            feature,
            content_ref: im.content_ref.clone(),
            protected: im.protected,
        });
    }
    Ok(Database { entries, model_id: model.model_id() })
}

/// Exact top-K by cosine similarity, descending; ties broken by ascending
/// entry id.
pub fn search(
    query: &Image,
    model: &FRModel,
    db: &Database,
    k: usize,
) -> Result<Vec<(u64, f64)>> {
    if model.model_id() != db.model_id {
        return Err(CoreError::Consistency(format!(
            "query model {} does not match database model {}",
            model.model_id(),
            db.model_id
        )));
    }
    let qf = model.embed(query)?;
    search_features(&qf, db, k)
}

/// Search with an already-embedded query.
pub fn search_features(
    query: &FeatureVector,
    db: &Database,
    k: usize,
) -> Result<Vec<(u64, f64)>> {
    if k == 0 {
        return Err(CoreError::Bounds("k must be >= 1".into()));
    }
    if k > db.entries.len() {
        return Err(CoreError::Bounds(format!(
            "k {} exceeds database size {}",
            k,
            db.entries.len()
        )));
    }
    let mut scored: Vec<(u64, f64)> = db
        .entries
        .iter()
        .map(|e| Ok((e.entry_id, crate::fr::cosine_sim(query, &e.feature)?)))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

/// Per-person recall: with K DB entries for the identity, the percentage of
/// the top-K retrievals that belong to it.
pub fn recall(query: &Image, query_identity: u32, model: &FRModel, db: &Database) -> Result<f64> {
    let k = db
        .entries
        .iter()
        .filter(|e| e.identity_id == query_identity)
        .count();
    if k == 0 {
        return Err(CoreError::UndefinedMetric(format!(
            "identity {query_identity} has no database entries"
        )));
    }
    let top = search(query, model, db, k)?;
    let by_id: std::collections::HashMap<u64, u32> =
        db.entries.iter().map(|e| (e.entry_id, e.identity_id)).collect();
    let hits = top
        .iter()
        .filter(|(id, _)| by_id[id] == query_identity)
        .count();
    Ok(100.0 * hits as f64 / k as f64)
}

/// Query/DB protection combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Baseline,
    UnprotQueryProtDb,
    ProtQueryUnprotDb,
    ProtQueryProtDb,
}

impl Scenario {
    pub fn protects_queries(self) -> bool {
        matches!(self, Scenario::ProtQueryUnprotDb | Scenario::ProtQueryProtDb)
    }

    pub fn protects_db(self) -> bool {
        matches!(self, Scenario::UnprotQueryProtDb | Scenario::ProtQueryProtDb)
    }

    pub fn tag(self) -> &'static str {
        match self {
            Scenario::Baseline => "baseline",
            Scenario::UnprotQueryProtDb => "unprot_query_prot_db",
            Scenario::ProtQueryUnprotDb => "prot_query_unprot_db",
            Scenario::ProtQueryProtDb => "prot_query_prot_db",
        }
    }
}

/// Recall statistics of one scenario run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: Scenario,
    pub per_user_recall: BTreeMap<u32, f64>,
    /// Mean of per-user means.
    pub mean_recall: f64,
    /// Mean over all queries pooled (recorded alongside the per-user mean).
    pub mean_recall_over_queries: f64,
    pub protected_fraction: f64,
    pub model_id: String,
    pub seed: u64,
}

/// Optional per-image preprocessing applied by an adaptive intruder after
/// protection and before embedding.
pub type Preprocess<'p> = &'p (dyn Fn(&Image) -> Result<Image> + Sync);

/// Run one scenario: assemble the DB from every user's DB images plus noise,
/// protect a seeded fraction of each user's entries (and queries, per
/// scenario), and average recall per user.
pub fn run_scenario(
    users: &[UserSplit],
    noise: &[RenderedFace],
    ppts: &BTreeMap<u32, PPT>,
    intruder: &FRModel,
    scenario: Scenario,
    protected_fraction: f64,
    seed: u64,
) -> Result<ScenarioReport> {
    run_scenario_with(users, noise, ppts, intruder, scenario, protected_fraction, seed, None)
}

#[allow(clippy::too_many_arguments)]
pub fn run_scenario_with(
    users: &[UserSplit],
    noise: &[RenderedFace],
    ppts: &BTreeMap<u32, PPT>,
    intruder: &FRModel,
    scenario: Scenario,
    protected_fraction: f64,
    seed: u64,
    preprocess: Option<Preprocess<'_>>,
) -> Result<ScenarioReport> {
    if !(0.0..=1.0).contains(&protected_fraction) {
        return Err(CoreError::Config(format!(
            "protected_fraction {protected_fraction} outside [0, 1]"
        )));
    }

    // Assemble the DB images (protected where the scenario says so).
    let mut staged: Vec<(Image, u32, String, bool)> = Vec::new();
    for user in users {
        let db_faces: Vec<&RenderedFace> = user.db_images().collect();
        let mut protect_flags = vec![false; db_faces.len()];
        if scenario.protects_db() && protected_fraction > 0.0 {
            let count = (protected_fraction * db_faces.len() as f64).round() as usize;
            let mut order: Vec<usize> = (0..db_faces.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (user.user_id as u64),
            );
            order.shuffle(&mut rng);
            for &i in order.iter().take(count) {
                protect_flags[i] = true;
            }
        }
        for (i, face) in db_faces.iter().enumerate() {
            let content_ref = format!("user{}/db{}", user.user_id, i);
            if protect_flags[i] {
                let ppt = ppts.get(&user.user_id).ok_or_else(|| {
                    CoreError::Config(format!("no PPT for user {}", user.user_id))
                })?;
                let res =
                    protect_at(&face.image, ppt, &face.uv_map, &face.validity_mask, &content_ref)?;
                staged.push((res.protected_image, face.identity_id, content_ref, true));
            } else {
                staged.push((face.image.clone(), face.identity_id, content_ref, false));
            }
        }
    }
    for (i, face) in noise.iter().enumerate() {
        staged.push((face.image.clone(), face.identity_id, format!("noise/{i}"), false));
    }

    if let Some(pre) = preprocess {
        for (img, _, _, _) in staged.iter_mut() {
            *img = pre(img)?;
        }
    }

    let db_images: Vec<DbImage<'_>> = staged
        .iter()
        .map(|(img, id, cref, prot)| DbImage {
            image: img,
            identity_id: *id,
            content_ref: cref.clone(),
            protected: *prot,
        })
        .collect();
    let db = build_db(&db_images, intruder)?;

    // Queries.
    let mut per_user_recall = BTreeMap::new();
    let mut pooled_sum = 0.0;
    let mut pooled_n = 0usize;
    for user in users {
        let mut sum = 0.0;
        for (qi, face) in user.query_images.iter().enumerate() {
            let image = if scenario.protects_queries() {
                let ppt = ppts.get(&user.user_id).ok_or_else(|| {
                    CoreError::Config(format!("no PPT for user {}", user.user_id))
                })?;
                protect_at(
                    &face.image,
                    ppt,
                    &face.uv_map,
                    &face.validity_mask,
                    &format!("user{}/query{qi}", user.user_id),
                )?
                .protected_image
            } else {
                face.image.clone()
            };
            let image = match preprocess {
                Some(pre) => pre(&image)?,
                None => image,
            };
            sum += recall(&image, user.user_id, intruder, &db)?;
        }
        let n = user.query_images.len().max(1);
        let mean = sum / n as f64;
        per_user_recall.insert(user.user_id, mean);
        pooled_sum += sum;
        pooled_n += user.query_images.len();
    }

    let mean_recall =
        per_user_recall.values().sum::<f64>() / per_user_recall.len().max(1) as f64;
    Ok(ScenarioReport {
        scenario,
        per_user_recall,
        mean_recall,
        mean_recall_over_queries: pooled_sum / pooled_n.max(1) as f64,
        protected_fraction,
        model_id: intruder.model_id(),
        seed,
    })
}

/// Train protection textures for every user against `ensemble`, in parallel.
pub fn train_all_ppts(
    users: &[UserSplit],
    ensemble: &Ensemble,
    spec: &PptTrainSpec,
) -> Result<BTreeMap<u32, PPT>> {
    let results: Vec<Result<(u32, PPT)>> = users
        .par_iter()
        .map(|user| {
            let (ppt, _) = train_ppt(user, ensemble, spec)?;
            Ok((user.user_id, ppt))
        })
        .collect();
    results.into_iter().collect()
}

/// Leave-one-out transfer: hold out each member as the intruder, train
/// against the rest, and compare baseline vs protected hard-scenario recall.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeaveOneOutResult {
    pub held_out_model_id: String,
    pub baseline_recall: f64,
    pub protected_recall: f64,
}

pub fn leave_one_out(
    users: &[UserSplit],
    noise: &[RenderedFace],
    ensemble: &Ensemble,
    spec: &PptTrainSpec,
    seed: u64,
) -> Result<Vec<LeaveOneOutResult>> {
    if ensemble.len() < 2 {
        return Err(CoreError::Config(
            "leave-one-out needs an ensemble of >= 2".into(),
        ));
    }
    let mut out = Vec::with_capacity(ensemble.len());
    for idx in 0..ensemble.len() {
        let team = ensemble.without(idx)?;
        let intruder = &ensemble.members()[idx];
        let ppts = train_all_ppts(users, &team, spec).map_err(|e| {
            CoreError::Config(format!(
                "training against held-out {}: {e}",
                intruder.model_id()
            ))
        })?;
        let baseline =
            run_scenario(users, noise, &ppts, intruder, Scenario::Baseline, 0.0, seed)?;
        let protected = run_scenario(
            users,
            noise,
            &ppts,
            intruder,
            Scenario::ProtQueryProtDb,
            1.0,
            seed,
        )?;
        out.push(LeaveOneOutResult {
            held_out_model_id: intruder.model_id(),
            baseline_recall: baseline.mean_recall,
            protected_recall: protected.mean_recall,
        });
    }
    Ok(out)
}

/// One candidate team's transfer performance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeamReport {
    pub member_ids: Vec<String>,
    pub per_holdout_recall: Vec<(String, f64)>,
    pub mean_holdout_recall: f64,
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

/// Exhaustively evaluate every `team_size`-subset of `pool` against the
/// holdout models on the hard scenario; teams are returned sorted by mean
/// holdout recall ascending (best protection first).
pub fn subset_transfer(
    users: &[UserSplit],
    noise: &[RenderedFace],
    pool: &Ensemble,
    team_size: usize,
    holdouts: &[FRModel],
    spec: &PptTrainSpec,
    seed: u64,
) -> Result<Vec<TeamReport>> {
    if pool.len() > 6 {
        return Err(CoreError::Config(format!(
            "exhaustive enumeration budget is a pool of <= 6, got {}",
            pool.len()
        )));
    }
    if team_size == 0 || team_size > pool.len() {
        return Err(CoreError::Config(format!(
            "team size {team_size} out of range for pool of {}",
            pool.len()
        )));
    }
    if holdouts.is_empty() {
        return Err(CoreError::Config("holdout set is empty".into()));
    }

    let mut reports = Vec::new();
    for combo in combinations(pool.len(), team_size) {
        let members: Vec<FRModel> =
            combo.iter().map(|&i| pool.members()[i].clone()).collect();
        let team = Ensemble::new(members)?;
        let ppts = train_all_ppts(users, &team, spec)?;
        let mut per_holdout = Vec::with_capacity(holdouts.len());
        for holdout in holdouts {
            let report = run_scenario(
                users,
                noise,
                &ppts,
                holdout,
                Scenario::ProtQueryProtDb,
                1.0,
                seed,
            )?;
            per_holdout.push((holdout.model_id(), report.mean_recall));
        }
        let mean = per_holdout.iter().map(|(_, r)| r).sum::<f64>() / per_holdout.len() as f64;
        reports.push(TeamReport {
            member_ids: team.member_ids(),
            per_holdout_recall: per_holdout,
            mean_holdout_recall: mean,
        });
    }
    reports.sort_by(|a, b| {
        a.mean_holdout_recall
            .partial_cmp(&b.mean_holdout_recall)
            .unwrap()
            .then_with(|| a.member_ids.cmp(&b.member_ids))
    });
    Ok(reports)
}

/// Database persistence: feature-matrix blob plus JSON manifest.
pub mod db_store {
    use super::*;
    use std::io::{Read, Write};
    use std::path::Path;

    const MAGIC: &[u8; 8] = b"UVCKDB\x01\x00";

    #[derive(Serialize, Deserialize)]
    struct DbManifest {
        format_version: u32,
        model_id: String,
        feature_dim: usize,
        entries: Vec<EntryMeta>,
    }

    #[derive(Serialize, Deserialize)]
    struct EntryMeta {
        entry_id: u64,
        identity_id: u32,
        content_ref: String,
        protected: bool,
    }

    pub fn save_db(db: &Database, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let dim = db.entries.first().map(|e| e.feature.dim()).unwrap_or(0);
        let mut blob = Vec::with_capacity(16 + db.entries.len() * dim * 8);
        blob.extend_from_slice(MAGIC);
        blob.extend_from_slice(&(db.entries.len() as u64).to_le_bytes());
        blob.extend_from_slice(&(dim as u64).to_le_bytes());
        for e in &db.entries {
            for v in e.feature.values() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(dir.join(format!("{stem}.bin")))?;
        f.write_all(&blob)?;

        let manifest = DbManifest {
            format_version: 1,
            model_id: db.model_id.clone(),
            feature_dim: dim,
            entries: db
                .entries
                .iter()
                .map(|e| EntryMeta {
                    entry_id: e.entry_id,
                    identity_id: e.identity_id,
                    content_ref: e.content_ref.clone(),
                    protected: e.protected,
                })
                .collect(),
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| CoreError::Format(format!("db manifest encode: {e}")))?;
        std::fs::write(dir.join(format!("{stem}.json")), json)?;
        Ok(())
    }

    pub fn load_db(dir: &Path, stem: &str) -> Result<Database> {
        let manifest: DbManifest = serde_json::from_str(&std::fs::read_to_string(
            dir.join(format!("{stem}.json")),
        )?)
        .map_err(|e| CoreError::Format(format!("db manifest decode: {e}")))?;
        if manifest.format_version != 1 {
            return Err(CoreError::Format(format!(
                "unsupported db format version {}",
                manifest.format_version
            )));
        }
        let mut f = std::fs::File::open(dir.join(format!("{stem}.bin")))?;
        let mut blob = Vec::new();
        f.read_to_end(&mut blob)?;
        if blob.len() < 24 || &blob[..8] != MAGIC {
            return Err(CoreError::Format("bad db magic".into()));
        }
        let n = u64::from_le_bytes(blob[8..16].try_into().unwrap()) as usize;
        let dim = u64::from_le_bytes(blob[16..24].try_into().unwrap()) as usize;
        if n != manifest.entries.len() || blob.len() != 24 + n * dim * 8 {
            return Err(CoreError::Format("db blob size disagrees with manifest".into()));
        }
        let mut entries = Vec::with_capacity(n);
        for (i, meta) in manifest.entries.into_iter().enumerate() {
            let start = 24 + i * dim * 8;
            let values: ndarray::Array1<f64> = blob[start..start + dim * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push(DbEntry {
                entry_id: meta.entry_id,
                identity_id: meta.identity_id,
                feature: FeatureVector::new(values)?,
                content_ref: meta.content_ref,
                protected: meta.protected,
            });
        }
        Ok(Database { entries, model_id: manifest.model_id })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn random_db(seed: u64, n: usize, dim: usize, identities: u32) -> Database {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = (0..n)
            .map(|i| DbEntry {
                entry_id: i as u64,
                identity_id: rng.gen_range(0..identities),
                feature: FeatureVector::normalized(Array1::from_shape_fn(dim, |_| {
                    rng.gen_range(-1.0..1.0)
                }))
                .unwrap(),
                content_ref: format!("e{i}"),
                protected: false,
            })
            .collect();
        Database { entries, model_id: "test".into() }
    }

    #[test]
    fn search_matches_exhaustive_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..20 {
            let db = random_db(trial, 50, 8, 5);
            let q = FeatureVector::normalized(Array1::from_shape_fn(8, |_| {
                rng.gen_range(-1.0..1.0)
            }))
            .unwrap();
            let got = search_features(&q, &db, 5).unwrap();

            let mut oracle: Vec<(u64, f64)> = db
                .entries
                .iter()
                .map(|e| (e.entry_id, crate::fr::cosine_sim(&q, &e.feature).unwrap()))
                .collect();
            oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            oracle.truncate(5);
            assert_eq!(got, oracle);
        }
    }

    #[test]
    fn search_k_bounds() {
        let db = random_db(2, 10, 8, 3);
        let q = db.entries[0].feature.clone();
        assert!(matches!(search_features(&q, &db, 0), Err(CoreError::Bounds(_))));
        assert!(matches!(search_features(&q, &db, 11), Err(CoreError::Bounds(_))));
        let all = search_features(&q, &db, 10).unwrap();
        assert_eq!(all.len(), 10);
        // Self-match ranks first with similarity 1.
        assert_eq!(all[0].0, 0);
        assert!((all[0].1 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn tie_break_is_ascending_entry_id() {
        let f = FeatureVector::normalized(Array1::from_vec(vec![1.0, 0.0])).unwrap();
        let entries = (0..4)
            .map(|i| DbEntry {
                entry_id: i as u64,
                identity_id: 0,
                feature: f.clone(),
                content_ref: format!("e{i}"),
                protected: false,
            })
            .collect();
        let db = Database { entries, model_id: "test".into() };
        let got = search_features(&f, &db, 3).unwrap();
        assert_eq!(got.iter().map(|(id, _)| *id).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn recall_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..20 {
            let db = random_db(100 + trial, 20, 8, 5);
            let identity = rng.gen_range(0..5);
            let k = db.entries.iter().filter(|e| e.identity_id == identity).count();
            if k == 0 {
                continue;
            }
            let q = FeatureVector::normalized(Array1::from_shape_fn(8, |_| {
                rng.gen_range(-1.0..1.0)
            }))
            .unwrap();

            // Hand-rolled: sort everything, count matching identities in top-k.
            let mut scored: Vec<(u64, u32, f64)> = db
                .entries
                .iter()
                .map(|e| {
                    (e.entry_id, e.identity_id, crate::fr::cosine_sim(&q, &e.feature).unwrap())
                })
                .collect();
            scored.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
            let want = 100.0
                * scored[..k].iter().filter(|(_, id, _)| *id == identity).count() as f64
                / k as f64;

            let top = search_features(&q, &db, k).unwrap();
            let by_id: std::collections::HashMap<u64, u32> =
                db.entries.iter().map(|e| (e.entry_id, e.identity_id)).collect();
            let got = 100.0
                * top.iter().filter(|(id, _)| by_id[id] == identity).count() as f64
                / k as f64;
            assert_eq!(got, want, "trial {trial}");
        }
    }

    #[test]
    fn db_roundtrip() {
        let db = random_db(7, 12, 8, 3);
        let dir = tempfile::tempdir().unwrap();
        db_store::save_db(&db, dir.path(), "db0").unwrap();
        let loaded = db_store::load_db(dir.path(), "db0").unwrap();
        assert_eq!(loaded.model_id, db.model_id);
        assert_eq!(loaded.entries.len(), db.entries.len());
        for (a, b) in loaded.entries.iter().zip(db.entries.iter()) {
            assert_eq!(a.entry_id, b.entry_id);
            assert_eq!(a.identity_id, b.identity_id);
            assert_eq!(a.feature.values(), b.feature.values());
        }
    }

    #[test]
    fn combinations_enumerate_correctly() {
        assert_eq!(combinations(4, 2).len(), 6);
        assert_eq!(combinations(5, 5).len(), 1);
        assert_eq!(combinations(3, 1), vec![vec![0], vec![1], vec![2]]);
    }
}
