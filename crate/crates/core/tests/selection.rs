use std::collections::HashSet;

use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tarot_core::features::default_ids;
use tarot_core::ot::{cost_matrix, ot_distance};
use tarot_core::selection::{select_fixed, select_otm, selection_ratio};
use tarot_core::{OtmOptions, SelectionResult, Solver, WhitenedFeatures};

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

fn wrap(rows: Array2<f64>, tag: &str) -> WhitenedFeatures {
    let n = rows.nrows();
    WhitenedFeatures::from_unit_rows(rows, default_ids(n), tag).unwrap()
}

/// Points around `sign * e1` with off-axis jitter of the given scale.
fn cluster(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64, sign: f64) -> Array2<f64> {
    let mut out = Array2::zeros((n, d));
    for mut row in out.rows_mut() {
        let mut v = Array1::zeros(d);
        v[0] = sign;
        for k in 1..d {
            v[k] = scale * rng.gen_range(-1.0..1.0);
        }
        row.assign(&unit(v));
    }
    out
}

fn random_unit(rng: &mut ChaCha8Rng, n: usize, d: usize) -> WhitenedFeatures {
    let rows: Array2<f64> = Array2::from_shape_fn((n, d), |_| StandardNormal.sample(rng));
    let rows = Array2::from_shape_fn((n, d), |(i, k)| rows[[i, k]] / rows.row(i).dot(&rows.row(i)).sqrt());
    wrap(rows, "random")
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0u32..1 << n)
        .filter(|mask| mask.count_ones() as usize == k)
        .map(|mask| (0..n).filter(|i| mask >> i & 1 == 1).collect())
        .collect()
}

#[test]
fn fixed_matches_exhaustive_search_on_two_clusters() {
    for seed in 0..8 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = cluster(&mut rng, 4, 6, 0.025, 1.0);
        rows.append(ndarray::Axis(0), cluster(&mut rng, 4, 6, 0.3, -1.0).view()).unwrap();
        let cands = wrap(rows, "two-cluster");
        let targets = wrap(cluster(&mut rng, 3, 6, 0.025, 1.0), "two-cluster");
        let dist = |idx: &[usize]| ot_distance(&cands.select(idx), &targets, &Solver::Exact).unwrap();
        let best = subsets(8, 4).into_iter().map(|s| dist(&s)).fold(f64::INFINITY, f64::min);
        for solver in [Solver::default(), Solver::Exact] {
            let r = select_fixed(&cands, &targets, 4, &solver).unwrap();
            assert!(dist(&r.selected) <= best + 1e-12, "seed {seed} {solver:?}: {:?}", r.selected);
        }
    }
}

/// Copies of every target plus five points near the antipode of the targets.
fn copies_and_outliers(seed: u64) -> (WhitenedFeatures, WhitenedFeatures) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets = cluster(&mut rng, 20, 8, 0.2, 1.0);
    let mut cands = targets.clone();
    cands.append(ndarray::Axis(0), cluster(&mut rng, 5, 8, 0.05, -1.0).view()).unwrap();
    (wrap(cands, "copies"), wrap(targets, "copies"))
}

fn check_trace(r: &SelectionResult, folds: usize) {
    for f in 0..folds {
        let steps: Vec<_> = r.trace.iter().filter(|t| t.fold == Some(f)).collect();
        let accepted: Vec<f64> = steps.iter().filter(|t| t.accepted).map(|t| t.ot_distance.unwrap()).collect();
        assert!(!accepted.is_empty());
        assert!(accepted.windows(2).all(|w| w[1] <= w[0] + 1e-9), "fold {f}: {accepted:?}");
        let rejected: Vec<_> = steps.iter().filter(|t| !t.accepted).collect();
        assert!(rejected.len() <= 1);
        if let Some(last) = rejected.first() {
            assert!(std::ptr::eq(**last, *steps.last().unwrap()));
            assert!(last.ot_distance.unwrap() > accepted.last().unwrap() + 1e-9);
        }
    }
}

#[test]
fn otm_takes_the_copies_and_none_of_the_outliers() {
    let (cands, targets) = copies_and_outliers(21);
    let opts = OtmOptions { k_folds: 10, seed: 4, ..Default::default() };
    let r = select_otm(&cands, &targets, &opts, &Solver::Exact).unwrap();
    let chosen: HashSet<usize> = r.selected.iter().copied().collect();
    assert_eq!(chosen, (0..20).collect::<HashSet<_>>());
    check_trace(&r, 10);
    let all = ot_distance(&cands, &targets, &Solver::Exact).unwrap();
    let sel = ot_distance(&cands.select(&r.selected), &targets, &Solver::Exact).unwrap();
    assert!(sel < all, "{sel} vs {all}");
}

#[test]
fn otm_ratio_tracks_in_distribution_fraction() {
    // half the pool sits within 0.1 of some target, half beyond 1.5 of all
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let targets = cluster(&mut rng, 20, 8, 0.2, 1.0);
    let mut cands = Array2::zeros((0, 8));
    for j in 0..20 {
        let mut v = targets.row(j).to_owned();
        v.mapv_inplace(|x| x + 0.01 * rng.gen_range(-1.0..1.0));
        cands.push_row(unit(v).view()).unwrap();
    }
    cands.append(ndarray::Axis(0), cluster(&mut rng, 20, 8, 0.3, -1.0).view()).unwrap();
    let (cands, targets) = (wrap(cands, "half"), wrap(targets, "half"));
    let c = cost_matrix(&cands, &targets).unwrap();
    for i in 0..40 {
        let nearest = (0..20).map(|j| c.get(i, j)).fold(f64::INFINITY, f64::min);
        assert!(if i < 20 { nearest < 0.1 } else { nearest > 1.5 });
    }
    let r = select_otm(&cands, &targets, &OtmOptions::default(), &Solver::Exact).unwrap();
    let ratio = selection_ratio(&r, 40);
    assert!((0.45..=0.55).contains(&ratio), "{ratio}");
}

#[test]
fn otm_repeats_exactly_and_ignores_thread_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cands = random_unit(&mut rng, 60, 5);
    let targets = random_unit(&mut rng, 15, 5);
    let opts = OtmOptions { k_folds: 5, seed: 9, ..Default::default() };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| select_otm(&cands, &targets, &opts, &Solver::default()).unwrap())
    };
    let first = run(1);
    assert_eq!(first, run(1));
    assert_eq!(first, run(4));
    let fixed = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| select_fixed(&cands, &targets, 17, &Solver::default()).unwrap())
    };
    assert_eq!(fixed(1), fixed(3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fixed_size_is_exact_and_grows_monotonically(seed in any::<u64>(), n in 2usize..40, m in 1usize..8, frac in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cands = random_unit(&mut rng, n, 4);
        let targets = random_unit(&mut rng, m, 4);
        let size = 1 + ((n - 1) as f64 * frac) as usize;
        let r = select_fixed(&cands, &targets, size, &Solver::default()).unwrap();
        prop_assert_eq!(r.selected.len(), size);
        prop_assert!(r.selected.iter().all(|&i| i < n));
        prop_assert_eq!(r.selected.iter().collect::<HashSet<_>>().len(), size);
        prop_assert!(r.trace.windows(2).all(|w| w[0].selected <= w[1].selected && w[0].iteration < w[1].iteration));
    }

    #[test]
    fn otm_trace_stops_at_first_increase(seed in any::<u64>(), n in 5usize..40, m in 2usize..12, k in 1usize..4) {
        prop_assume!(k <= m);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cands = random_unit(&mut rng, n, 3);
        let targets = random_unit(&mut rng, m, 3);
        let opts = OtmOptions { k_folds: k, seed, ..Default::default() };
        let r = select_otm(&cands, &targets, &opts, &Solver::Exact).unwrap();
        prop_assert!(!r.selected.is_empty());
        prop_assert_eq!(r.selected.iter().collect::<HashSet<_>>().len(), r.selected.len());
        prop_assert!(r.selected.iter().all(|&i| i < n));
        check_trace(&r, k);
    }
}
