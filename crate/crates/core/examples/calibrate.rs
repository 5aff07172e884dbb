//! Scratch calibration harness (not part of the deliverable pipeline).

use std::collections::BTreeMap;
use std::time::Instant;

use uvcloak_core::fr::{train_fr, ArchitectureId, Ensemble, FrTrainSpec, LossId};
use uvcloak_core::ppt::PptTrainSpec;
use uvcloak_core::retrieval::{run_scenario, train_all_ppts, Scenario};
use uvcloak_core::robustness::{attack_sweep, AttackSpec};
use uvcloak_core::world::{sample_bank, sample_world, WorldConfig};

fn main() {
    let t0 = Instant::now();
    let config = WorldConfig {
        image_size: 32,
        texture_size: 64,
        n_users: 10,
        n_noise: 20,
        per_identity: 10,
        seed: 7,
        ..WorldConfig::default()
    };
    let (users, noise) = sample_world(config.n_users, config.n_noise, config.per_identity, config.seed, &config).unwrap();
    println!("[{:?}] world built: {} users, {} noise images", t0.elapsed(), users.len(), noise.len());

    // Four disjoint identity banks for the embedders.
    let roster = [
        (ArchitectureId::Conv3, LossId::Softmax, 101u64),
        (ArchitectureId::Conv4, LossId::ArcMargin, 202),
        (ArchitectureId::Conv3, LossId::ArcMargin, 303),
        (ArchitectureId::Conv4, LossId::Softmax, 404),
    ];
    let mut models = Vec::new();
    for (i, (arch, loss, seed)) in roster.iter().enumerate() {
        let t = Instant::now();
        let bank = sample_bank(1000 + i as u64, 1000 + (i as u32) * 100, 10, 12, &config).unwrap();
        let flat: Vec<_> = bank.into_iter().flatten().collect();
        let spec = FrTrainSpec {
            accuracy_floor: 0.0,
            ..FrTrainSpec::recommended(*arch, *loss, *seed)
        };
        let model = train_fr(&flat, &spec).unwrap();
        println!(
            "[{:?}] model {} trained in {:?}, verification accuracy {:.3}",
            t0.elapsed(),
            model.model_id(),
            t.elapsed(),
            model.accuracy
        );
        models.push(model);
    }

    // Ensemble distinctness: mean pairwise cosine across the same images.
    let probe: Vec<&uvcloak_core::world::RenderedFace> =
        users.iter().flat_map(|u| u.query_images.iter()).collect();
    for i in 0..models.len() {
        for j in (i + 1)..models.len() {
            let mut acc = 0.0;
            for f in &probe {
                let a = models[i].embed(&f.image).unwrap();
                let b = models[j].embed(&f.image).unwrap();
                acc += uvcloak_core::fr::cosine_sim(&a, &b).unwrap();
            }
            println!(
                "mean cross-model cosine {} vs {}: {:.4}",
                models[i].model_id(),
                models[j].model_id(),
                acc / probe.len() as f64
            );
        }
    }

    let intruder = models.pop().unwrap();
    let ensemble = Ensemble::new(models).unwrap();

    let baseline = run_scenario(&users, &noise, &BTreeMap::new(), &intruder, Scenario::Baseline, 0.0, 7).unwrap();
    println!("[{:?}] baseline recall (intruder): {:.2}", t0.elapsed(), baseline.mean_recall);
    // Also baseline on a member (white-box sanity).
    let member_baseline = run_scenario(&users, &noise, &BTreeMap::new(), &ensemble.members()[0], Scenario::Baseline, 0.0, 7).unwrap();
    println!("baseline recall (member 0): {:.2}", member_baseline.mean_recall);

    // PPT training, full loss.
    let t = Instant::now();
    let spec = PptTrainSpec {
        iterations: 300,
        texture_size: 32,
        seed: 7,
        ..PptTrainSpec::default()
    };
    let ppts = train_all_ppts(&users, &ensemble, &spec).unwrap();
    println!("[{:?}] 10 full-loss PPTs trained in {:?}", t0.elapsed(), t.elapsed());

    let t = Instant::now();
    let ablated_spec = PptTrainSpec { use_logdet: false, ..spec.clone() };
    let ppts_ablated = train_all_ppts(&users, &ensemble, &ablated_spec).unwrap();
    println!("[{:?}] 10 ablated PPTs trained in {:?}", t0.elapsed(), t.elapsed());

    for (label, p) in [("full", &ppts), ("ablated", &ppts_ablated)] {
        let easy1 = run_scenario(&users, &noise, p, &intruder, Scenario::UnprotQueryProtDb, 1.0, 7).unwrap();
        let easy2 = run_scenario(&users, &noise, p, &intruder, Scenario::ProtQueryUnprotDb, 1.0, 7).unwrap();
        let hard = run_scenario(&users, &noise, p, &intruder, Scenario::ProtQueryProtDb, 1.0, 7).unwrap();
        println!(
            "{label}: easy1 {:.2} easy2 {:.2} hard {:.2} (baseline {:.2})",
            easy1.mean_recall, easy2.mean_recall, hard.mean_recall, baseline.mean_recall
        );
    }

    // Feature geometry: mean pairwise cosine among protected vs unprotected
    // features of each user's DB images, under the intruder.
    for (label, p) in [("none", None), ("full", Some(&ppts)), ("ablated", Some(&ppts_ablated))] {
        let mut acc = 0.0;
        let mut n = 0usize;
        for user in &users {
            let feats: Vec<_> = user
                .db_images()
                .map(|f| {
                    let img = match p {
                        None => f.image.clone(),
                        Some(pp) => uvcloak_core::ppt::protect_at(
                            &f.image,
                            &pp[&user.user_id],
                            &f.uv_map,
                            &f.validity_mask,
                            "cal",
                        )
                        .unwrap()
                        .protected_image,
                    };
                    intruder.embed(&img).unwrap()
                })
                .collect();
            for i in 0..feats.len() {
                for j in (i + 1)..feats.len() {
                    acc += uvcloak_core::fr::cosine_sim(&feats[i], &feats[j]).unwrap();
                    n += 1;
                }
            }
        }
        println!("mean pairwise protected-feature cosine ({label}): {:.4}", acc / n as f64);
    }

    // Protected-vs-original cosine per image.
    let mut acc = 0.0;
    let mut n = 0;
    for user in &users {
        for f in user.db_images() {
            let prot = uvcloak_core::ppt::protect_at(&f.image, &ppts[&user.user_id], &f.uv_map, &f.validity_mask, "cal").unwrap();
            let a = intruder.embed(&f.image).unwrap();
            let b = intruder.embed(&prot.protected_image).unwrap();
            acc += uvcloak_core::fr::cosine_sim(&a, &b).unwrap();
            n += 1;
        }
    }
    println!("mean protected-vs-original cosine (full): {:.4}", acc / n as f64);

    // Fraction sweep.
    print!("fraction sweep (hard, full): ");
    for frac in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let rep = run_scenario(&users, &noise, &ppts, &intruder, Scenario::ProtQueryProtDb, frac, 7).unwrap();
        print!("{frac}:{:.2} ", rep.mean_recall);
    }
    println!();

    // Attacks.
    let t = Instant::now();
    let report = attack_sweep(&users, &noise, &ppts, &intruder, &AttackSpec::default_grid(), 7).unwrap();
    for row in &report.rows {
        println!(
            "attack {:?}: hard {:.2}, baseline {:.2}",
            row.attack.map(|a| a.label()),
            row.mean_recall,
            row.baseline_mean_recall
        );
    }
    println!("[{:?}] attack sweep in {:?}", t0.elapsed(), t.elapsed());
    println!("total {:?}", t0.elapsed());
}
