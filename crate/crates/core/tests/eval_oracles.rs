mod common;

use common::*;
use dgreid::data::{make_single_shot_split, SplitProtocol};
use dgreid::eval::*;
use proptest::prelude::*;
use rand::Rng;

fn matrix(rows: &[Vec<f64>], ids: Vec<usize>) -> EmbeddingMatrix {
    let dim = rows[0].len();
    let cams = vec![0; ids.len()];
    EmbeddingMatrix::new(dim, rows.concat(), ids, cams).unwrap()
}

#[test]
fn ranking_and_cmc_match_sorting_oracle() {
    let mut r = rng(5);
    for case in 0..60 {
        let g = r.gen_range(2..=1000);
        let ids_n = r.gen_range(1..=g.min(50));
        let gallery_rows = random_rows(&mut r, g, 4, 1.0);
        let gallery_ids: Vec<usize> = (0..g).map(|i| if i < ids_n { i } else { r.gen_range(0..ids_n) }).collect();
        let gal = matrix(&gallery_rows, gallery_ids.clone());
        let probes = random_rows(&mut r, 8, 4, 1.0);
        let probe_ids: Vec<usize> = (0..8).map(|_| r.gen_range(0..ids_n)).collect();
        let mut ranked = Vec::new();
        for p in &probes {
            let order = rank_gallery(p, &gal).unwrap();
            assert_eq!(order, rank_sorted(p, &gallery_rows), "case {case}");
            ranked.push(order.iter().map(|&i| gallery_ids[i]).collect::<Vec<_>>());
        }
        assert_eq!(compute_cmc(&ranked, &probe_ids).unwrap(), cmc_counted(&ranked, &probe_ids), "case {case}");
    }
}

#[test]
fn perfect_embeddings_give_rank1_of_one() {
    let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 * 10.0, 0.0]).collect();
    let gal = matrix(&rows, (0..10).collect());
    let ranked: Vec<Vec<usize>> = rows.iter().map(|p| rank_gallery(p, &gal).unwrap()).collect();
    let curve = compute_cmc(&ranked, &(0..10).collect::<Vec<_>>()).unwrap();
    assert_eq!(curve[0], 1.0);
}

#[test]
fn null_model_sits_at_chance() {
    let ds = counted_domain(3, 80, 4);
    let protocol = SplitProtocol::half(&ds);
    let r = evaluate_null_model(&ds, protocol, EvalOptions { n_splits: 40, cross_camera: false }, 16, 3).unwrap();
    let (mean, se) = mean_and_stderr(&r.per_split_rank1);
    let split = make_single_shot_split(&ds, protocol, r.split_seeds[0]).unwrap();
    let chance = 1.0 / gallery_identities(&split) as f64;
    assert!((mean - chance).abs() <= 3.0 * se, "{mean} vs {chance} ± {se}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn cmc_is_monotone_and_ends_at_one(seed in any::<u64>(), g in 1usize..60, p in 1usize..20) {
        let mut r = rng(seed);
        let ids_n = r.gen_range(1..=g);
        let gallery_ids: Vec<usize> = (0..g).map(|i| if i < ids_n { i } else { r.gen_range(0..ids_n) }).collect();
        let gal = matrix(&random_rows(&mut r, g, 3, 1.0), gallery_ids.clone());
        let probe_ids: Vec<usize> = (0..p).map(|_| r.gen_range(0..ids_n)).collect();
        let ranked: Vec<Vec<usize>> = random_rows(&mut r, p, 3, 1.0)
            .iter()
            .map(|q| rank_gallery(q, &gal).unwrap().into_iter().map(|i| gallery_ids[i]).collect())
            .collect();
        let c = compute_cmc(&ranked, &probe_ids).unwrap();
        prop_assert!(c.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!((c[c.len() - 1] - 1.0).abs() < 1e-12);
        prop_assert!(c.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn cmc_ignores_monotone_distance_transforms(seed in any::<u64>(), scale in 0.1f64..10.0) {
        let mut r = rng(seed);
        let rows = random_rows(&mut r, 20, 3, 1.0);
        let scaled: Vec<Vec<f64>> = rows.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect();
        let ids: Vec<usize> = (0..20).map(|i| i % 7).collect();
        let probe = random_rows(&mut r, 1, 3, 1.0).remove(0);
        let probe_scaled: Vec<f64> = probe.iter().map(|x| x * scale).collect();
        let a = rank_gallery(&probe, &matrix(&rows, ids.clone())).unwrap();
        let b = rank_gallery(&probe_scaled, &matrix(&scaled, ids)).unwrap();
        prop_assert_eq!(a, b);
    }
}
