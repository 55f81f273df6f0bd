use ndarray::{concatenate, Array1, Array2, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tarot_core::metric::{
    apply_whitening, build_metric, fit_whitening, make_projection, project, wfd,
};
use tarot_core::{FeatureMatrix, ProjectionFamily, ProjectionSpec, WhitenedFeatures, WhiteningMethod};

fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| StandardNormal.sample(rng))
}

// Correlated data: iid normals times a random mixing matrix plus an offset.
fn correlated(seed: u64, n: usize, d: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mix = gaussian(&mut rng, d, d);
    let offset = Array1::from_shape_fn(d, |_| rng.gen_range(-3.0..3.0));
    gaussian(&mut rng, n, d).dot(&mix) + &offset
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    let v: Array1<f64> = Array1::from_shape_fn(d, |_| StandardNormal.sample(rng));
    let n = v.dot(&v).sqrt();
    v / n
}

fn pairwise(w: &WhitenedFeatures) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..w.len() {
        for j in i + 1..w.len() {
            out.push(wfd(w.row(i), w.row(j)));
        }
    }
    out
}

#[test]
fn projection_roughly_preserves_distances() {
    let spec = ProjectionSpec {
        input_dim: 1000,
        output_dim: 256,
        seed: 5,
        family: ProjectionFamily::Gaussian,
    };
    let p = make_projection(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let raw = FeatureMatrix::from_array(gaussian(&mut rng, 400, 1000)).unwrap();
    let low = project(&raw, p.view()).unwrap();
    let mut within = 0;
    for k in 0..200 {
        let (i, j) = (2 * k, 2 * k + 1);
        let orig = (&raw.row(i) - &raw.row(j)).mapv(|v| v * v).sum();
        let proj = (&low.row(i) - &low.row(j)).mapv(|v| v * v).sum();
        if (proj / orig - 1.0).abs() <= 0.3 {
            within += 1;
        }
    }
    assert!(within >= 190, "{within}/200 pairs within 30%");
}

#[test]
fn whitened_sample_covariance_is_identity_for_both_methods() {
    let data = correlated(7, 200, 5);
    let feats = FeatureMatrix::from_array(data.clone()).unwrap();
    for method in [WhiteningMethod::Cholesky, WhiteningMethod::Zca] {
        let t = fit_whitening(&feats, method, 0.0).unwrap();
        let w = apply_whitening(&t, data.view()).unwrap();
        let cov = w.t().dot(&w) / w.nrows() as f64;
        for ((i, j), v) in cov.indexed_iter() {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-8, "{method:?} cov[{i},{j}] = {v}");
        }
    }
}

#[test]
fn build_metric_joint_covariance_is_identity() {
    let all = correlated(8, 90, 4);
    let cand = FeatureMatrix::from_array(all.slice(ndarray::s![..60, ..]).to_owned()).unwrap();
    let tgt = FeatureMatrix::from_array(all.slice(ndarray::s![60.., ..]).to_owned()).unwrap();
    let space = build_metric(&cand, &tgt, None, WhiteningMethod::Cholesky, 0.0).unwrap();
    for w in [&space.candidates, &space.targets] {
        for row in w.data().rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-12);
        }
    }
    let joint = concatenate(Axis(0), &[cand.data(), tgt.data()]).unwrap();
    let w = apply_whitening(&space.transform, joint.view()).unwrap();
    let cov = w.t().dot(&w) / w.nrows() as f64;
    for ((i, j), v) in cov.indexed_iter() {
        assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-8);
    }
}

#[test]
fn cholesky_and_zca_give_the_same_distances() {
    let all = correlated(9, 40, 6);
    let cand = FeatureMatrix::from_array(all.slice(ndarray::s![..25, ..]).to_owned()).unwrap();
    let tgt = FeatureMatrix::from_array(all.slice(ndarray::s![25.., ..]).to_owned()).unwrap();
    let chol = build_metric(&cand, &tgt, None, WhiteningMethod::Cholesky, 1e-5).unwrap();
    let zca = build_metric(&cand, &tgt, None, WhiteningMethod::Zca, 1e-5).unwrap();
    let joined = |s: &tarot_core::MetricSpace| s.candidates.concat(&s.targets).unwrap();
    for (a, b) in pairwise(&joined(&chol)).iter().zip(pairwise(&joined(&zca))) {
        assert!((a - b).abs() <= 1e-8 * b.max(1e-12), "{a} vs {b}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn distances_ignore_global_scale(seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let all = correlated(seed, 30, 4);
        let split = |m: &Array2<f64>| {
            (
                FeatureMatrix::from_array(m.slice(ndarray::s![..20, ..]).to_owned()).unwrap(),
                FeatureMatrix::from_array(m.slice(ndarray::s![20.., ..]).to_owned()).unwrap(),
            )
        };
        let (c1, t1) = split(&all);
        let (c2, t2) = split(&(&all * scale));
        let s1 = build_metric(&c1, &t1, None, WhiteningMethod::Cholesky, 1e-5).unwrap();
        let s2 = build_metric(&c2, &t2, None, WhiteningMethod::Cholesky, 1e-5).unwrap();
        let d1 = pairwise(&s1.candidates.concat(&s1.targets).unwrap());
        let d2 = pairwise(&s2.candidates.concat(&s2.targets).unwrap());
        for (a, b) in d1.iter().zip(&d2) {
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1e-12), "{} vs {}", a, b);
        }
    }

    #[test]
    fn wfd_is_a_metric(seed in any::<u64>(), d in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, c) = (unit(&mut rng, d), unit(&mut rng, d), unit(&mut rng, d));
        prop_assert_eq!(wfd(a.view(), a.view()), 0.0);
        prop_assert_eq!(wfd(a.view(), b.view()), wfd(b.view(), a.view()));
        let ab = wfd(a.view(), b.view());
        prop_assert!((0.0..=2.0).contains(&ab));
        prop_assert!(ab <= wfd(a.view(), c.view()) + wfd(c.view(), b.view()) + 1e-12);
    }

    #[test]
    fn wfd_decreases_with_cosine(t1 in 0.0..std::f64::consts::PI, t2 in 0.0..std::f64::consts::PI) {
        prop_assume!((t1 - t2).abs() > 1e-6);
        // angles from a fixed axis on the unit circle: larger angle, smaller cosine
        let x = Array1::from(vec![1.0, 0.0]);
        let at = |t: f64| Array1::from(vec![t.cos(), t.sin()]);
        let (near, far) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(wfd(x.view(), at(near).view()) < wfd(x.view(), at(far).view()));
    }
}
