//! Independent-oracle tests: each checks an optimized implementation against
//! a definition-literal recomputation that shares no code with it.

use ndarray::{Array1, Array3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use uvcloak_core::fr::FeatureVector;
use uvcloak_core::grid::Image;
use uvcloak_core::ppt::ssim::{window_weights, C1, C2, WINDOW};
use uvcloak_core::retrieval::{search_features, Database, DbEntry};

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Image {
    Array3::from_shape_fn((h, w, c), |_| rng.gen_range(0.0..1.0))
}

/// Definition-literal SSIM: explicit per-window weighted statistics.
fn ssim_literal(a: &Image, b: &Image) -> f64 {
    let (h, w, channels) = a.dim();
    let k1 = window_weights();
    let mut w2d = [[0.0; WINDOW]; WINDOW];
    for i in 0..WINDOW {
        for j in 0..WINDOW {
            w2d[i][j] = k1[i] * k1[j];
        }
    }

    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..channels {
        for r in 0..=(h - WINDOW) {
            for c in 0..=(w - WINDOW) {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                for i in 0..WINDOW {
                    for j in 0..WINDOW {
                        mu_a += w2d[i][j] * a[[r + i, c + j, ch]];
                        mu_b += w2d[i][j] * b[[r + i, c + j, ch]];
                    }
                }
                let mut var_a = 0.0;
                let mut var_b = 0.0;
                let mut cov = 0.0;
                for i in 0..WINDOW {
                    for j in 0..WINDOW {
                        let da = a[[r + i, c + j, ch]] - mu_a;
                        let db = b[[r + i, c + j, ch]] - mu_b;
                        var_a += w2d[i][j] * da * da;
                        var_b += w2d[i][j] * db * db;
                        cov += w2d[i][j] * da * db;
                    }
                }
                let v = ((2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2))
                    / ((mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2));
                total += v;
                count += 1;
            }
        }
    }
    total / count as f64
}

#[test]
fn ssim_matches_definition_literal_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for trial in 0..50 {
        let (h, w) = (rng.gen_range(11..20), rng.gen_range(11..20));
        let a = random_image(&mut rng, h, w, 3);
        let b = random_image(&mut rng, h, w, 3);
        let fast = uvcloak_core::ppt::ssim(&a, &b).unwrap();
        let literal = ssim_literal(&a, &b);
        assert!(
            (fast - literal).abs() < 1e-6,
            "trial {trial}: {fast} vs literal {literal}"
        );
    }
}

#[test]
fn search_matches_exhaustive_sort_at_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for trial in 0..100 {
        let n = rng.gen_range(5..=1000);
        let dim = 16;
        let entries: Vec<DbEntry> = (0..n)
            .map(|i| DbEntry {
                entry_id: i as u64,
                identity_id: rng.gen_range(0..20),
                feature: FeatureVector::normalized(Array1::from_shape_fn(dim, |_| {
                    rng.gen_range(-1.0..1.0)
                }))
                .unwrap(),
                content_ref: String::new(),
                protected: false,
            })
            .collect();
        let db = Database { entries, model_id: "oracle".into() };
        let q = FeatureVector::normalized(Array1::from_shape_fn(dim, |_| {
            rng.gen_range(-1.0..1.0)
        }))
        .unwrap();
        let k = rng.gen_range(1..=n.min(25));
        let got = search_features(&q, &db, k).unwrap();

        let mut oracle: Vec<(u64, f64)> = db
            .entries
            .iter()
            .map(|e| (e.entry_id, uvcloak_core::fr::cosine_sim(&q, &e.feature).unwrap()))
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        oracle.truncate(k);
        assert_eq!(got, oracle, "trial {trial} (n={n}, k={k})");
    }
}

#[test]
fn duplicated_features_tie_break_matches_oracle() {
    // Stress exact tie handling: many entries share identical features.
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let base: Vec<FeatureVector> = (0..4)
        .map(|_| {
            FeatureVector::normalized(Array1::from_shape_fn(8, |_| rng.gen_range(-1.0..1.0)))
                .unwrap()
        })
        .collect();
    let entries: Vec<DbEntry> = (0..40)
        .map(|i| DbEntry {
            entry_id: i as u64,
            identity_id: 0,
            feature: base[i % 4].clone(),
            content_ref: String::new(),
            protected: false,
        })
        .collect();
    let db = Database { entries, model_id: "oracle".into() };
    let q = base[1].clone();
    let got = search_features(&q, &db, 40).unwrap();
    let mut oracle: Vec<(u64, f64)> = db
        .entries
        .iter()
        .map(|e| (e.entry_id, uvcloak_core::fr::cosine_sim(&q, &e.feature).unwrap()))
        .collect();
    oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    assert_eq!(got, oracle);
}
