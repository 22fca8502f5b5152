mod common;

use common::{brute_metrics, random_instance};
use proptest::prelude::*;
use reid_adapt::eval::{cmc_curve, distance_matrix, mean_ap, DistanceMatrix, Meta, RankingProtocol};
use reid_adapt::Tensor;

fn protocol(k: usize) -> RankingProtocol {
    RankingProtocol {
        exclude_same_camera_same_id: true,
        k,
    }
}

#[test]
fn cmc_and_map_match_brute_force() {
    for seed in 0..100 {
        let inst = random_instance(seed, 20, 50, 8, 3);
        let p = protocol(50);
        let (cmc, map, excluded) = brute_metrics(&inst, 50, true).unwrap();
        let got = cmc_curve(&inst.dist, &inst.query, &inst.gallery, &p).unwrap();
        let ap = mean_ap(&inst.dist, &inst.query, &inst.gallery, &p).unwrap();
        assert_eq!(got.n_excluded, excluded);
        for (a, b) in got.cmc.iter().zip(&cmc) {
            assert!((a - b).abs() <= 1e-12, "seed {seed}: {a} vs {b}");
        }
        assert!((ap.map - map).abs() <= 1e-12, "seed {seed}: {} vs {map}", ap.map);
    }
}

#[test]
fn distance_matrix_matches_naive_loop() {
    let mut r = common::rng(5);
    let q = common::uniform(&mut r, &[20, 6], -3.0, 3.0).cast::<f32>();
    let g = common::uniform(&mut r, &[50, 6], -3.0, 3.0).cast::<f32>();
    let d = distance_matrix(&q, &g);
    for i in 0..20 {
        for j in 0..50 {
            let naive: f64 = q
                .row(i)
                .iter()
                .zip(g.row(j))
                .map(|(a, b)| f64::from(a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((d.get(i, j) - naive).abs() < 1e-5);
        }
    }
    let a = Tensor::from_rows(&[vec![0.0f32, 0.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![3.0f32, 4.0]]).unwrap();
    assert_eq!(distance_matrix(&a, &b).get(0, 0), 5.0);
    assert_eq!(distance_matrix(&b, &b).get(0, 0), 0.0);
}

#[test]
fn separated_features_give_perfect_rank1() {
    let query = vec![
        Meta {
            person_id: 0,
            camera_id: 0,
        },
        Meta {
            person_id: 1,
            camera_id: 0,
        },
    ];
    let gallery = vec![
        Meta {
            person_id: 1,
            camera_id: 1,
        },
        Meta {
            person_id: 0,
            camera_id: 1,
        },
        Meta {
            person_id: 2,
            camera_id: 1,
        },
    ];
    let dist = DistanceMatrix::from_rows(&[vec![4.0, 0.0, 3.0], vec![0.0, 5.0, 2.0]]);
    let cmc = cmc_curve(&dist, &query, &gallery, &protocol(3)).unwrap();
    assert_eq!(cmc.cmc[0], 1.0);
    assert_eq!(mean_ap(&dist, &query, &gallery, &protocol(3)).unwrap().map, 1.0);
}

fn instance() -> impl Strategy<Value = (u64, usize, usize)> {
    (any::<u64>(), 1usize..12, 2usize..30)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cmc_is_monotone_and_bounded((seed, nq, ng) in instance()) {
        let inst = random_instance(seed, nq, ng, 4, 3);
        if let Ok(c) = cmc_curve(&inst.dist, &inst.query, &inst.gallery, &protocol(ng)) {
            prop_assert!(c.cmc.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(c.cmc.iter().all(|v| (0.0..=1.0).contains(v)));
            let m = mean_ap(&inst.dist, &inst.query, &inst.gallery, &protocol(ng)).unwrap();
            prop_assert!((0.0..=1.0).contains(&m.map));
        }
    }

    #[test]
    fn metrics_depend_only_on_order((seed, nq, ng) in instance(), shift in 0.0f64..5.0) {
        let inst = random_instance(seed, nq, ng, 4, 3);
        let p = protocol(ng);
        let warped = inst.dist.map(|d| (d + shift).powi(3) + d.exp());
        let before = cmc_curve(&inst.dist, &inst.query, &inst.gallery, &p);
        let after = cmc_curve(&warped, &inst.query, &inst.gallery, &p);
        prop_assert_eq!(before.ok(), after.ok());
        let before = mean_ap(&inst.dist, &inst.query, &inst.gallery, &p);
        let after = mean_ap(&warped, &inst.query, &inst.gallery, &p);
        prop_assert_eq!(before.ok(), after.ok());
    }

    #[test]
    fn gallery_order_does_not_matter((seed, nq, ng) in instance(), perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let inst = random_instance(seed, nq, ng, 4, 3);
        let mut perm: Vec<usize> = (0..ng).collect();
        perm.shuffle(&mut common::rng(perm_seed));
        let rows: Vec<Vec<f64>> = (0..nq).map(|i| perm.iter().map(|&j| inst.dist.get(i, j)).collect()).collect();
        let gallery: Vec<Meta> = perm.iter().map(|&j| inst.gallery[j]).collect();
        let dist = DistanceMatrix::from_rows(&rows);
        let p = protocol(ng);
        let a = cmc_curve(&inst.dist, &inst.query, &inst.gallery, &p).ok().map(|c| c.cmc);
        let b = cmc_curve(&dist, &inst.query, &gallery, &p).ok().map(|c| c.cmc);
        prop_assert_eq!(a, b);
        let a = mean_ap(&inst.dist, &inst.query, &inst.gallery, &p).ok().map(|m| m.map);
        let b = mean_ap(&dist, &inst.query, &gallery, &p).ok().map(|m| m.map);
        match (a, b) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
            (x, y) => prop_assert_eq!(x, y),
        }
    }
}
