use ndarray::{Array1, Array2, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tarot_core::attribution::{ensemble_scores, lds, neg_wfd_score, spearman, tracin_score};
use tarot_core::features::default_ids;
use tarot_core::ot::cost_matrix;
use tarot_core::{AttributionScores, FeatureMatrix, ScoreMethod, SubsetArchive, WhitenedFeatures};

fn normal(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| StandardNormal.sample(rng))
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> WhitenedFeatures {
    let mut m = normal(rng, n, d);
    for mut r in m.rows_mut() {
        let norm = r.dot(&r).sqrt();
        r /= norm;
    }
    WhitenedFeatures::from_unit_rows(m, default_ids(n), "t").unwrap()
}

fn archive_from(masks: Array2<bool>, outputs: impl Fn(&[bool], usize) -> f64, m: usize) -> SubsetArchive {
    let out = Array2::from_shape_fn((masks.nrows(), m), |(k, j)| outputs(masks.row(k).as_slice().unwrap(), j));
    SubsetArchive::new(masks, out).unwrap()
}

fn random_archive(rng: &mut ChaCha8Rng, n_masks: usize, n: usize, outputs: impl Fn(&[bool], usize) -> f64, m: usize) -> SubsetArchive {
    let mut masks = Array2::from_shape_fn((n_masks, n), |_| rng.gen_bool(0.5));
    for mut row in masks.rows_mut() {
        if !row.iter().any(|&b| b) {
            row[0] = true;
        }
    }
    archive_from(masks, outputs, m)
}

/// Masks that each keep exactly half of the `n` candidates.
fn half_masks(rng: &mut ChaCha8Rng, n_masks: usize, n: usize) -> Array2<bool> {
    use rand::seq::SliceRandom;
    let mut masks = Array2::from_elem((n_masks, n), false);
    let mut idx: Vec<usize> = (0..n).collect();
    for mut row in masks.rows_mut() {
        idx.shuffle(rng);
        for &i in &idx[..n / 2] {
            row[i] = true;
        }
    }
    masks
}

fn subset_sum(tau: &Array2<f64>, mask: &[bool], j: usize) -> f64 {
    mask.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| tau[[i, j]]).sum()
}

#[test]
fn neg_wfd_is_negated_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (c, t) = (unit_rows(&mut rng, 9, 5), unit_rows(&mut rng, 4, 5));
    let tau = neg_wfd_score(&c, &t).unwrap();
    let cost = cost_matrix(&c, &t).unwrap();
    assert_eq!(tau.scores(), cost.values().mapv(|v| -v));
    assert_eq!(tau.method(), ScoreMethod::NegWfd);
}

#[test]
fn tracin_three_checkpoints_match_compensated_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cands: Vec<FeatureMatrix> = (0..3).map(|_| FeatureMatrix::from_array(normal(&mut rng, 6, 7)).unwrap()).collect();
    let tgts: Vec<FeatureMatrix> = (0..3).map(|_| FeatureMatrix::from_array(normal(&mut rng, 4, 7)).unwrap()).collect();
    let lrs = [0.1, 0.05, 0.0125];
    let tau = tracin_score(&cands, &tgts, &lrs).unwrap();
    for i in 0..6 {
        for j in 0..4 {
            // Neumaier summation over every lr * g_c * g_t product
            let (mut sum, mut comp) = (0.0f64, 0.0f64);
            for k in 0..3 {
                for d in 0..7 {
                    let term = lrs[k] * cands[k].data()[[i, d]] * tgts[k].data()[[j, d]];
                    let t = sum + term;
                    comp += if sum.abs() >= term.abs() { (sum - t) + term } else { (term - t) + sum };
                    sum = t;
                }
            }
            assert!((tau.scores()[[i, j]] - (sum + comp)).abs() <= 1e-10);
        }
    }
}

#[test]
fn ensemble_of_five_is_the_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let runs: Vec<AttributionScores> = (0..5)
        .map(|_| AttributionScores::new(normal(&mut rng, 7, 3), ScoreMethod::NegWfd, 1).unwrap())
        .collect();
    let mean = ensemble_scores(&runs).unwrap();
    assert_eq!(mean.ensemble_size(), 5);
    for ((i, j), v) in mean.scores().indexed_iter() {
        let want: f64 = runs.iter().map(|r| r.scores()[[i, j]]).sum::<f64>() / 5.0;
        assert!((v - want).abs() <= 1e-15);
    }
}

#[test]
fn lds_of_negated_outputs_is_minus_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let tau = normal(&mut rng, 12, 3);
    let archive = random_archive(&mut rng, 40, 12, |mask, j| -subset_sum(&tau, mask, j), 3);
    let scores = AttributionScores::new(tau, ScoreMethod::Tracin, 1).unwrap();
    let r = lds(&scores, &archive, false).unwrap();
    assert!((r.mean + 1.0).abs() < 1e-12, "{}", r.mean);
}

#[test]
fn linear_datamodel_with_true_weights_scores_high() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, m) = (50, 10);
    let weights = normal(&mut rng, n, m);
    let noise: Array2<f64> = normal(&mut rng, 100, m) * 0.05;
    let archive = random_archive(&mut rng, 100, n, |mask, j| subset_sum(&weights, mask, j), m);
    let noisy = SubsetArchive::new(archive.masks().to_owned(), &archive.outputs() + &noise).unwrap();
    let scores = AttributionScores::new(weights, ScoreMethod::Tracin, 1).unwrap();
    let r = lds(&scores, &noisy, false).unwrap();
    assert!(r.mean >= 0.95, "{}", r.mean);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spearman_ignores_increasing_transforms(x in prop::collection::vec(-10.0f64..10.0, 3..30), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = x.iter().map(|v| v + rng.gen_range(-5.0..5.0)).collect();
        prop_assume!(spearman(&x, &y).is_ok());
        let base = spearman(&x, &y).unwrap();
        let fx: Vec<f64> = x.iter().map(|v| v.powi(3) + 2.0 * v).collect();
        let gy: Vec<f64> = y.iter().map(|v| (v / 4.0).exp()).collect();
        prop_assert!((spearman(&fx, &y).unwrap() - base).abs() <= 1e-12);
        prop_assert!((spearman(&x, &gy).unwrap() - base).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&base));
    }

    #[test]
    fn lds_ignores_positive_affine_rescaling_per_target(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, m) = (15, 4);
        let tau = normal(&mut rng, n, m);
        let truth = normal(&mut rng, n, m);
        let masks = half_masks(&mut rng, 30, n);
        let archive = archive_from(masks, |mask, j| subset_sum(&truth, mask, j), m);
        let base = lds(&AttributionScores::new(tau.clone(), ScoreMethod::Tracin, 1).unwrap(), &archive, false).unwrap();
        // with equal-size masks a shift moves every prediction of a target
        // by the same amount, and a positive slope keeps their order
        let slopes = Array1::from_shape_fn(m, |_| rng.gen_range(0.1..10.0));
        let shifts = Array1::from_shape_fn(m, |_| rng.gen_range(-3.0..3.0));
        let scaled = &tau * &slopes.insert_axis(Axis(0)) + &shifts.insert_axis(Axis(0));
        let moved = lds(&AttributionScores::new(scaled, ScoreMethod::Tracin, 1).unwrap(), &archive, false).unwrap();
        for (a, b) in base.per_target.iter().zip(&moved.per_target) {
            match (a, b) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-12),
                (a, b) => prop_assert_eq!(a.is_none(), b.is_none()),
            }
        }
    }

    #[test]
    fn tracin_is_linear_in_learning_rates(seed in any::<u64>(), k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cands: Vec<FeatureMatrix> = (0..k).map(|_| FeatureMatrix::from_array(normal(&mut rng, 5, 4)).unwrap()).collect();
        let tgts: Vec<FeatureMatrix> = (0..k).map(|_| FeatureMatrix::from_array(normal(&mut rng, 3, 4)).unwrap()).collect();
        let lrs: Vec<f64> = (0..k).map(|_| rng.gen_range(0.001..1.0)).collect();
        let doubled: Vec<f64> = lrs.iter().map(|v| 2.0 * v).collect();
        let a = tracin_score(&cands, &tgts, &lrs).unwrap();
        let b = tracin_score(&cands, &tgts, &doubled).unwrap();
        // doubling is exact in binary floating point
        prop_assert_eq!(b.scores().to_owned(), a.scores().mapv(|v| 2.0 * v));
    }
}
