mod common;

use common::{gauss_inverse, gauss_solve, max_abs_diff, ols, sparse_iv_data};
use ndarray::{array, s, Array1, Array2, Axis};
use proptest::prelude::*;
use sparseiv::first_stage::FirstStageConfig;
use sparseiv::iv::*;
use sparseiv::linalg;

fn mat_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) -> bool {
    a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn scalar_ratio_fixture() {
    let dhat = array![[1.0f64], [2.0], [3.0]];
    let d = array![[1.0], [1.0], [2.0]];
    let y = array![1.0, 2.0, 5.0];
    let a = iv_estimate(dhat.view(), d.view(), y.view()).unwrap();
    assert!((a[0] - 20.0 / 9.0).abs() < 1e-14);
}

#[test]
fn self_instrumenting_is_ols() {
    let data = sparse_iv_data(40, 3, 2, 1.0, 1);
    let a = iv_estimate(data.d(), data.d(), data.y()).unwrap();
    let b = ols(&data.d().to_owned(), &data.y().to_owned());
    assert!(max_abs_diff(&a, &b) < 1e-10);
}

#[test]
fn noiseless_outcome_is_recovered() {
    let data = sparse_iv_data(50, 8, 2, 1.0, 2);
    let truth = array![1.7, -0.4];
    let y = data.d().dot(&truth);
    let data = data.with_outcome(y).unwrap();
    let (_, est) = estimate(&data, &FirstStageConfig::default(), VcovMode::Hetero).unwrap();
    assert!(max_abs_diff(&est.alpha, &truth) < 1e-10);
    assert!(est.vcov.iter().all(|v| v.abs() < 1e-18));
}

#[test]
fn collinear_instruments_are_rejected() {
    let dhat = array![[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]];
    let d = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
    let y = array![1.0, 2.0, 3.0];
    assert!(matches!(iv_estimate(dhat.view(), d.view(), y.view()), Err(sparseiv::Error::WeakInstruments(_))));
}

fn fixture() -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let dhat = array![[1.0, 0.2], [1.0, 1.1], [1.0, 2.3]];
    let d = array![[1.0, 0.5], [1.0, 2.0], [1.0, 1.5]];
    let y = array![1.0, 2.0, 4.0];
    (dhat, d, y)
}

#[test]
fn sandwich_matches_dense_oracle() {
    let (dhat, d, y) = fixture();
    let alpha = iv_estimate(dhat.view(), d.view(), y.view()).unwrap();
    let n = 3.0;
    let q = dhat.t().dot(&dhat) / n;
    let qinv = gauss_inverse(&q);
    let mut omega = Array2::<f64>::zeros((2, 2));
    let mut s2 = 0.0;
    for i in 0..3 {
        let e = y[i] - d[[i, 0]] * alpha[0] - d[[i, 1]] * alpha[1];
        s2 += e * e / n;
        for a in 0..2 {
            for b in 0..2 {
                omega[[a, b]] += e * e * dhat[[i, a]] * dhat[[i, b]] / n;
            }
        }
    }
    let hetero = qinv.dot(&omega).dot(&qinv) / n;
    let homo = &qinv * (s2 / n);
    assert!(mat_close(&hetero_vcov(dhat.view(), d.view(), y.view(), &alpha).unwrap(), &hetero, 1e-12));
    assert!(mat_close(&homo_vcov(dhat.view(), d.view(), y.view(), &alpha).unwrap(), &homo, 1e-12));
    let oracle_alpha = gauss_solve(&(dhat.t().dot(&d)), &dhat.t().dot(&y));
    assert!(max_abs_diff(&alpha, &oracle_alpha) < 1e-12);
}

#[test]
fn zero_residuals_give_zero_variance() {
    let (dhat, d, _) = fixture();
    let alpha = array![0.3, 2.0];
    let y = d.dot(&alpha);
    assert!(hetero_vcov(dhat.view(), d.view(), y.view(), &alpha).unwrap().iter().all(|&v| v == 0.0));
    assert!(homo_vcov(dhat.view(), d.view(), y.view(), &alpha).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_gram_gives_scaled_identity() {
    let dhat = array![[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]];
    let d = dhat.clone();
    let y = array![1.0, 0.0, 2.0, -1.0];
    let alpha = array![0.0, 0.0];
    let s2 = y.mapv(|v| v * v).sum() / 4.0;
    let v = homo_vcov(dhat.view(), d.view(), y.view(), &alpha).unwrap();
    assert!(mat_close(&v, &(Array2::eye(2) * (s2 / 4.0)), 1e-15));
}

#[test]
fn spec_test_identical_instruments_gives_zero() {
    let data = sparse_iv_data(120, 20, 3, 1.0, 4);
    let (fs, est) = estimate(&data, &FirstStageConfig::default(), VcovMode::Hetero).unwrap();
    let r = Array2::eye(2);
    let res = spec_test(fs.dhat.view(), fs.dhat.view(), data.d(), data.y(), r.view(), &est.alpha).unwrap();
    assert_eq!(res.j, 0.0);
    assert_eq!(res.pvalue, 1.0);
    assert_eq!(res.df, 2);
    assert!(!res.rejects(0.05));
}

#[test]
fn spec_test_baseline_is_two_stage_least_squares() {
    let data = sparse_iv_data(120, 20, 3, 1.0, 4);
    let a = linalg::hstack(data.f().slice(s![.., ..4]), data.w());
    let (alpha_tilde, _) = baseline_iv(a.view(), data.d(), data.y()).unwrap();
    let pa = a.dot(&gauss_solve(&a.t().dot(&a), &a.t().dot(&data.d().column(0))));
    let xh = ndarray::stack![Axis(1), pa.view(), data.w().column(0)];
    let oracle = gauss_solve(&xh.t().dot(&data.d()), &xh.t().dot(&data.y()));
    assert!(max_abs_diff(&alpha_tilde, &oracle) < 1e-10);
}

#[test]
fn split_sizes_follow_ceiling_rule() {
    let (a, b) = split_halves(5, 9);
    assert_eq!((a.len(), b.len()), (3, 2));
    let mut all: Vec<usize> = a.iter().chain(b.iter()).copied().collect();
    all.sort_unstable();
    assert_eq!(all, vec![0, 1, 2, 3, 4]);
    assert!(a.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(split_halves(5, 9), (a, b));
    let (a, b) = split_halves(250, 1);
    assert_eq!((a.len(), b.len()), (125, 125));
}

#[test]
fn split_sample_combination_identity() {
    let data = sparse_iv_data(200, 30, 3, 1.0, 6);
    let est = split_sample_iv(&data, &FirstStageConfig::default(), VcovMode::Hetero, 17).unwrap();
    let total = &est.gram_a + &est.gram_b;
    let rhs = est.gram_a.dot(&est.alpha_a) + est.gram_b.dot(&est.alpha_b);
    assert!(max_abs_diff(&est.alpha, &gauss_solve(&total, &rhs)) < 1e-12);
    assert_eq!(est.half_a.len(), 100);
    let s = est.as_estimate();
    assert_eq!(s.n, 200);
    assert!(s.se.iter().all(|v| *v > 0.0));
    assert!(!est.used_fallback());
}

#[test]
fn split_sample_noiseless_halves_agree() {
    let data = sparse_iv_data(120, 10, 3, 1.0, 7);
    let truth = array![0.8, 1.5];
    let data = data.with_outcome(data.d().dot(&truth)).unwrap();
    let est = split_sample_iv(&data, &FirstStageConfig::default(), VcovMode::Homo, 3).unwrap();
    assert!(max_abs_diff(&est.alpha_a, &truth) < 1e-10);
    assert!(max_abs_diff(&est.alpha_b, &truth) < 1e-10);
    assert!(max_abs_diff(&est.alpha, &truth) < 1e-10);
}

#[test]
fn split_sample_needs_four_observations() {
    let data = sparse_iv_data(3, 2, 1, 1.0, 1);
    assert!(split_sample_iv(&data, &FirstStageConfig::default(), VcovMode::Hetero, 0).is_err());
}

fn two_endogenous(seed: u64) -> sparseiv::data::Dataset<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = 150;
    let f = common::normals(&mut rng, n, 20);
    let v = common::normals(&mut rng, n, 3);
    let mut d = Array2::zeros((n, 2));
    let mut y = Array1::zeros(n);
    for i in 0..n {
        d[[i, 0]] = f[[i, 0]] + f[[i, 1]] + f[[i, 2]] + v[[i, 0]];
        d[[i, 1]] = f[[i, 3]] - f[[i, 4]] + v[[i, 1]];
        let het = 1.0 + 0.3 * rng.random::<f64>();
        y[i] = d[[i, 0]] + 0.5 * d[[i, 1]] + het * (0.5 * v[[i, 0]] + v[[i, 2]]);
    }
    sparseiv::data::Dataset::new(y, d, Array2::zeros((n, 0)), f).unwrap()
}

#[test]
fn spec_test_flags_degenerate_contrast() {
    let data = sparse_iv_data(150, 20, 3, 1.0, 5);
    let (fs, est) = estimate(&data, &FirstStageConfig::default(), VcovMode::Hetero).unwrap();
    let a = linalg::hstack(data.f().slice(s![.., 2..6]), data.w());
    let r = Array2::eye(2);
    let res = spec_test(a.view(), fs.dhat.view(), data.d(), data.y(), r.view(), &est.alpha);
    assert_eq!(res, Err(sparseiv::Error::DegenerateContrast));
    let row = array![[1.0, 0.0]];
    let one = spec_test(a.view(), fs.dhat.view(), data.d(), data.y(), row.view(), &est.alpha).unwrap();
    assert!(one.j > 0.0 && one.df == 1);
}

fn scalar_split_data(seed: u64) -> sparseiv::data::Dataset<f64> {
    let data = sparse_iv_data(160, 20, 3, 0.8, seed);
    sparseiv::data::Dataset::new(
        data.y().to_owned(),
        data.d_endog().to_owned(),
        Array2::zeros((160, 0)),
        data.f().to_owned(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn vcov_is_symmetric_psd(seed in 0u64..1000) {
        let data = sparse_iv_data(80, 15, 3, 0.8, seed);
        let (_, est) = estimate(&data, &FirstStageConfig::default(), VcovMode::Hetero).unwrap();
        let v = &est.vcov;
        prop_assert!((v[[0, 1]] - v[[1, 0]]).abs() <= 1e-10 * v[[0, 0]].abs().max(1e-300));
        let (vals, _) = linalg::sym_eigen(v.view());
        let tr = v[[0, 0]] + v[[1, 1]];
        prop_assert!(vals.iter().all(|&e| e >= -1e-10 * tr));
    }

    #[test]
    fn constant_squared_residuals_make_sandwich_homoscedastic(seed in 0u64..1000, sigma in 0.1f64..5.0) {
        let data = sparse_iv_data(40, 5, 2, 1.0, seed);
        let alpha = array![0.7, -0.2];
        let signs = Array1::from_iter((0..40).map(|i| if (i * 7 + seed as usize) % 3 == 0 { -sigma } else { sigma }));
        let y = data.d().dot(&alpha) + &signs;
        let dhat = data.f().slice(s![.., ..2]).to_owned();
        let h = hetero_vcov(dhat.view(), data.d(), y.view(), &alpha).unwrap();
        let o = homo_vcov(dhat.view(), data.d(), y.view(), &alpha).unwrap();
        let scale = o.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(mat_close(&h, &o, 1e-12 * scale));
    }

    #[test]
    fn estimate_is_equivariant(seed in 0u64..1000, ky in 0.01f64..100.0, kd in 0.01f64..100.0) {
        let data = sparse_iv_data(60, 8, 2, 1.0, seed);
        let dhat = linalg::hstack(data.f().slice(s![.., ..1]), data.w());
        let base = iv_estimate(dhat.view(), data.d(), data.y()).unwrap();
        let ys = data.y().mapv(|v| v * ky);
        let scaled_y = iv_estimate(dhat.view(), data.d(), ys.view()).unwrap();
        prop_assert!(max_abs_diff(&scaled_y, &(&base * ky)) < 1e-9 * ky.max(1.0) * base.iter().fold(1.0f64, |m, v| m.max(v.abs())));
        let mut d2 = data.d().to_owned();
        d2.column_mut(0).mapv_inplace(|v| v * kd);
        let mut dh2 = dhat.clone();
        dh2.column_mut(0).mapv_inplace(|v| v * kd);
        let scaled_d = iv_estimate(dh2.view(), d2.view(), data.y()).unwrap();
        prop_assert!((scaled_d[0] * kd - base[0]).abs() < 1e-9 * base[0].abs().max(1.0));
        prop_assert!((scaled_d[1] - base[1]).abs() < 1e-9 * base[1].abs().max(1.0));
    }

    #[test]
    fn spec_test_invariant_to_restriction_basis(seed in 0u64..1000, g in proptest::collection::vec(-2.0f64..2.0, 4)) {
        let det = g[0] * g[3] - g[1] * g[2];
        prop_assume!(det.abs() > 0.1);
        let data = two_endogenous(seed);
        let (fs, est) = estimate(&data, &FirstStageConfig::default(), VcovMode::Hetero).unwrap();
        let a = data.f().slice(s![.., ..8]).to_owned();
        let r = Array2::eye(2);
        let gm = Array2::from_shape_vec((2, 2), g.clone()).unwrap();
        let base = spec_test(a.view(), fs.dhat.view(), data.d(), data.y(), r.view(), &est.alpha).unwrap();
        let moved = spec_test(a.view(), fs.dhat.view(), data.d(), data.y(), gm.dot(&r).view(), &est.alpha).unwrap();
        prop_assert!((base.j - moved.j).abs() < 1e-8 * base.j.max(1.0));
        prop_assert!(base.j >= 0.0 && (0.0..=1.0).contains(&base.pvalue));
        let row = array![[0.0, 1.0]];
        let one = spec_test(a.view(), fs.dhat.view(), data.d(), data.y(), row.view(), &est.alpha).unwrap();
        let one_scaled = spec_test(a.view(), fs.dhat.view(), data.d(), data.y(), (&row * g[0].abs().max(0.5)).view(), &est.alpha).unwrap();
        prop_assert_eq!(one.df, 1);
        prop_assert!((one.j - one_scaled.j).abs() < 1e-8 * one.j.max(1.0));
    }

    #[test]
    fn split_sample_ignores_observation_order(seed in 0u64..1000, shuffle in 0u64..1000) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let data = scalar_split_data(seed);
        let (ha, hb) = split_halves(160, seed);
        let base = split_sample_iv_with(&data, &FirstStageConfig::default(), VcovMode::Hetero, &ha, &hb).unwrap();
        let mut perm: Vec<usize> = (0..160).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(shuffle));
        let moved = data.subset_rows(&perm);
        let mut inv = vec![0; 160];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let ma: Vec<usize> = ha.iter().map(|&i| inv[i]).collect();
        let mb: Vec<usize> = hb.iter().map(|&i| inv[i]).collect();
        let other = split_sample_iv_with(&moved, &FirstStageConfig::default(), VcovMode::Hetero, &ma, &mb).unwrap();
        prop_assert!((base.alpha[0] - other.alpha[0]).abs() < 1e-10);
        let (lo, hi) = (base.alpha_a[0].min(base.alpha_b[0]), base.alpha_a[0].max(base.alpha_b[0]));
        prop_assert!(base.alpha[0] >= lo - 1e-12 && base.alpha[0] <= hi + 1e-12);
    }
}
