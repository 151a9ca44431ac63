use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tilerobust_core::downstream::*;

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut *rng))
}

/// Mean logistic loss plus `(l2/2)‖w‖²` with the bias as the last entry.
fn objective(x: &DMatrix<f64>, y: &[f64], theta: &[f64], l2: f64) -> f64 {
    let d = x.ncols();
    let mut loss = 0.0;
    for i in 0..x.nrows() {
        let z: f64 = (0..d).map(|j| x[(i, j)] * theta[j]).sum::<f64>() + theta[d];
        loss += (1.0 + z.exp()).ln() - y[i] * z;
    }
    loss / x.nrows() as f64 + 0.5 * l2 * theta[..d].iter().map(|w| w * w).sum::<f64>()
}

/// Damped Newton iterations on the same objective.
fn newton_oracle(x: &DMatrix<f64>, y: &[f64], l2: f64) -> Vec<f64> {
    let (n, d) = x.shape();
    let mut theta = DVector::<f64>::zeros(d + 1);
    for _ in 0..100 {
        let mut grad = DVector::zeros(d + 1);
        let mut hess = DMatrix::zeros(d + 1, d + 1);
        for i in 0..n {
            let mut row = DVector::from_element(d + 1, 1.0);
            for j in 0..d {
                row[j] = x[(i, j)];
            }
            let p = 1.0 / (1.0 + (-row.dot(&theta)).exp());
            grad += &row * ((p - y[i]) / n as f64);
            hess += &row * row.transpose() * (p * (1.0 - p) / n as f64);
        }
        for j in 0..d {
            grad[j] += l2 * theta[j];
            hess[(j, j)] += l2;
        }
        let step = hess.lu().solve(&grad).unwrap();
        let mut t = 1.0;
        let f0 = objective(x, y, theta.as_slice(), l2);
        while objective(x, y, (&theta - &step * t).as_slice(), l2) > f0 && t > 1e-10 {
            t *= 0.5;
        }
        theta -= step * t;
        if grad.norm() < 1e-14 {
            break;
        }
    }
    theta.as_slice().to_vec()
}

fn separable(seed: u64, n: usize) -> (DMatrix<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = gaussian(&mut rng, n, 2);
    let labels = (0..n).map(|i| x[(i, 0)] + 0.5 * x[(i, 1)] > 0.0).collect();
    (x, labels)
}

#[test]
fn logistic_matches_newton_oracle() {
    for seed in 0..5 {
        let (x, labels) = separable(seed, 50);
        let y: Vec<f64> = labels.iter().map(|&l| l as u8 as f64).collect();
        let data = LabeledFeatures::classification(x.clone(), &labels, None).unwrap();
        let opts = LogisticOptions { l2: 1e-2, standardize: false, ..Default::default() };
        let fit = fit_logistic(&data, &opts).unwrap();
        assert!(fit.converged, "seed {seed}: {} iterations", fit.iterations);
        let mut ours = fit.model.weights.column(0).iter().copied().collect::<Vec<_>>();
        ours.push(fit.model.bias[0]);
        let oracle = newton_oracle(&x, &y, 1e-2);
        let (a, b) = (objective(&x, &y, &ours, 1e-2), objective(&x, &y, &oracle, 1e-2));
        assert!((a - b).abs() < 1e-6, "seed {seed}: {a} vs {b}");
        for (u, v) in ours.iter().zip(&oracle) {
            assert!((u - v).abs() < 1e-5, "seed {seed}: {ours:?} vs {oracle:?}");
        }
    }
}

#[test]
fn standardized_logistic_matches_oracle_on_scaled_features() {
    let (mut x, labels) = separable(11, 60);
    for i in 0..x.nrows() {
        x[(i, 0)] = 100.0 * x[(i, 0)] + 3.0;
        x[(i, 1)] *= 0.01;
    }
    let y: Vec<f64> = labels.iter().map(|&l| l as u8 as f64).collect();
    let data = LabeledFeatures::classification(x.clone(), &labels, None).unwrap();
    let fit = fit_logistic(&data, &LogisticOptions { l2: 0.05, ..Default::default() }).unwrap();
    assert!(fit.converged);

    let n = x.nrows() as f64;
    let mut z = x.clone();
    for mut col in z.column_iter_mut() {
        let m = col.sum() / n;
        let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
        col.apply(|v| *v = (*v - m) / sd);
    }
    let oracle = newton_oracle(&z, &y, 0.05);
    let ours = predict_scores(&fit.model, &x).unwrap();
    for i in 0..x.nrows() {
        let logit: f64 = oracle[0] * z[(i, 0)] + oracle[1] * z[(i, 1)] + oracle[2];
        let p = 1.0 / (1.0 + (-logit).exp());
        assert!((ours[i] - p).abs() < 1e-7);
    }
}

/// Cyclic Jacobi eigenvalues of a symmetric matrix.
fn jacobi_eigenvalues(mut a: DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)].powi(2))
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

#[test]
fn pca_variance_matches_jacobi_oracle() {
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian(&mut rng, 10, 6);
        let p = pca_fit(&x, 3).unwrap();
        assert_eq!(p.n_components(), 3);
        let mean = x.row_mean();
        let mut c = x.clone();
        for mut row in c.row_iter_mut() {
            row -= &mean;
        }
        let oracle = jacobi_eigenvalues(c.transpose() * &c / 9.0);
        let z = p.transform(&x).unwrap();
        for (k, &expected) in oracle.iter().take(3).enumerate() {
            let col = z.column(k);
            let var = col.iter().map(|v| v * v).sum::<f64>() / 9.0;
            assert!((var - expected).abs() < 1e-8, "seed {seed} component {k}: {var} vs {expected}");
            assert!((p.explained_variance[k] - oracle[k]).abs() < 1e-8);
            let lead = p.components.row(k).iter().fold(0.0f64, |m, v| if v.abs() > m.abs() { *v } else { m });
            assert!(lead > 0.0);
        }
    }
}

#[test]
fn hest_memorizes_exact_linear_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = gaussian(&mut rng, 80, 20);
    let y = &x * gaussian(&mut rng, 20, 5);
    let data = LabeledFeatures::new(x, y, None).unwrap();
    let r = run_hest_protocol(&data, &data, 256, 1e-8).unwrap();
    assert_eq!(r.n_components, 20);
    assert!(r.mean > 0.999, "{r:?}");
}

#[test]
fn hest_pure_noise_is_uncorrelated() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let train = LabeledFeatures::new(gaussian(&mut rng, 200, 64), gaussian(&mut rng, 200, 20), None).unwrap();
    let test = LabeledFeatures::new(gaussian(&mut rng, 200, 64), gaussian(&mut rng, 200, 20), None).unwrap();
    let r = run_hest_protocol(&train, &test, 256, DEFAULT_RIDGE_ALPHA).unwrap();
    assert!(r.mean.abs() < 0.15, "{}", r.mean);
}

#[test]
fn hest_synthetic_low_rank_task() {
    let (train, test) = SyntheticRegression::default().generate().unwrap();
    let r = run_hest_protocol(&train, &test, 256, DEFAULT_RIDGE_ALPHA).unwrap();
    assert_eq!(r.n_components, 256);
    assert!(r.mean >= 0.95, "{}", r.mean);
}

#[test]
fn hest_constant_target_excluded() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = gaussian(&mut rng, 40, 8);
    let mut y = &x * gaussian(&mut rng, 8, 2);
    y.column_mut(1).fill(3.0);
    let data = LabeledFeatures::new(x, y, None).unwrap();
    let r = run_hest_protocol(&data, &data, 256, 1.0).unwrap();
    assert!(r.per_target[1].is_none());
    assert_eq!(Some(r.mean), r.per_target[0]);
}

struct Cohort {
    train: LabeledFeatures,
    test_x: DMatrix<f64>,
    test_labels: Vec<bool>,
    blocks: Vec<String>,
}

fn breast_cohort(seed: u64) -> Cohort {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 16;
    let direction = gaussian(&mut rng, d, 1);
    let mut draw = |n: usize| {
        let x = gaussian(&mut rng, n, d);
        let score = &x * &direction;
        let labels: Vec<bool> = score.iter().map(|s| *s > 0.0).collect();
        (x, labels)
    };
    let (x, labels) = draw(300);
    let (test_x, test_labels) = draw(150);
    Cohort {
        train: LabeledFeatures::classification(x, &labels, None).unwrap(),
        test_x,
        test_labels,
        blocks: (0..150).map(|i| format!("block{i:03}")).collect(),
    }
}

fn subcohort(x: DMatrix<f64>, labels: &[bool], blocks: &[String]) -> LabeledFeatures {
    LabeledFeatures::classification(x, labels, Some(blocks.to_vec())).unwrap()
}

#[test]
fn breastbm_identical_subcohorts_are_concordant() {
    let c = breast_cohort(1);
    let sub = subcohort(c.test_x.clone(), &c.test_labels, &c.blocks);
    let subs = BTreeMap::from([("HE".to_string(), sub.clone()), ("HES".to_string(), sub)]);
    let r = run_breastbm_protocol(&c.train, &subs, &LogisticOptions::default()).unwrap();
    assert_eq!(r.concordance.len(), 1);
    assert!((r.concordance[0].ccc - 1.0).abs() < 1e-9);
    assert_eq!(r.concordance[0].n_shared, 150);
    assert!(r.auc["HE"] > 0.9);
}

#[test]
fn breastbm_concordance_drops_with_noise() {
    let c = breast_cohort(2);
    let base = subcohort(c.test_x.clone(), &c.test_labels, &c.blocks);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eps = gaussian(&mut rng, c.test_x.nrows(), c.test_x.ncols());
    let mut last = f64::INFINITY;
    for (i, sigma) in [0.01, 0.1, 0.3, 1.0].into_iter().enumerate() {
        let noisy = subcohort(&c.test_x + &eps * sigma, &c.test_labels, &c.blocks);
        let subs = BTreeMap::from([("a".to_string(), base.clone()), ("b".to_string(), noisy)]);
        let r = run_breastbm_protocol(&c.train, &subs, &LogisticOptions::default()).unwrap();
        let v = r.concordance[0].ccc;
        if i == 0 {
            assert!(v > 0.9, "{v}");
        }
        assert!(v < last, "sigma {sigma}: {v} not below {last}");
        last = v;
    }
}

#[test]
fn breastbm_shuffled_labels_near_chance() {
    let c = breast_cohort(3);
    let mut aucs = Vec::new();
    for seed in 0..20 {
        let mut labels = c.test_labels.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);
        let subs = BTreeMap::from([("x".to_string(), subcohort(c.test_x.clone(), &labels, &c.blocks))]);
        aucs.push(run_breastbm_protocol(&c.train, &subs, &LogisticOptions::default()).unwrap().auc["x"]);
    }
    let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    assert!((0.4..=0.6).contains(&mean), "{mean}");
}

#[test]
fn breastbm_requires_shared_blocks() {
    let c = breast_cohort(4);
    let a = subcohort(c.test_x.clone(), &c.test_labels, &c.blocks);
    let other: Vec<String> = c.blocks.iter().map(|b| format!("{b}x")).collect();
    let b = subcohort(c.test_x.clone(), &c.test_labels, &other);
    let subs = BTreeMap::from([("a".to_string(), a), ("b".to_string(), b)]);
    assert!(matches!(
        run_breastbm_protocol(&c.train, &subs, &LogisticOptions::default()),
        Err(DownstreamError::NoSharedBlocks(_, _))
    ));
}

proptest! {
    #[test]
    fn auc_invariant_under_increasing_transform(
        scores in prop::collection::vec(-5.0f64..5.0, 4..40),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<bool> = scores.iter().map(|_| rng.random()).collect();
        labels[0] = true;
        labels[1] = false;
        let a = auc(&scores, &labels).unwrap();
        let t: Vec<f64> = scores.iter().map(|s| (s / 2.0).exp() + 3.0).collect();
        prop_assert_eq!(a, auc(&t, &labels).unwrap());
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn ccc_properties(
        x in prop::collection::vec(-10.0f64..10.0, 3..30),
        noise in prop::collection::vec(-1.0f64..1.0, 30),
        shift in 0.1f64..5.0,
    ) {
        let y: Vec<f64> = x.iter().zip(&noise).map(|(a, e)| 0.7 * a + e).collect();
        prop_assume!(pearson(&x, &y).is_ok());
        let c = ccc(&x, &y).unwrap();
        prop_assert_eq!(c, ccc(&y, &x).unwrap());
        prop_assert!(c.abs() <= pearson(&x, &y).unwrap().abs() + 1e-12);
        let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
        prop_assert!(ccc(&x, &shifted).unwrap() < 1.0);
    }

    #[test]
    fn pca_components_orthonormal(seed in any::<u64>(), n in 3usize..20, d in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian(&mut rng, n, d);
        let p = pca_fit(&x, d).unwrap();
        let q = p.n_components();
        prop_assert!(q <= d.min(n - 1));
        let gram = &p.components * p.components.transpose();
        prop_assert!((gram - DMatrix::identity(q, q)).abs().max() < 1e-6);
        if q == d {
            let back = p.inverse_transform(&p.transform(&x).unwrap());
            prop_assert!((back - &x).abs().max() < 1e-6);
        }
    }
}
