mod common;

use common::{gauss_solve, normals, ols, phi_series};
use ndarray::{array, s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparseiv::data::Dataset;
use sparseiv::montecarlo::estimators::{liml_kappa, ridge_grid, ridge_loocv, HalfFit};
use sparseiv::montecarlo::runner::{replication_seed, summarize, Outcome};
use sparseiv::montecarlo::*;

fn project(z: &Array2<f64>, v: &Array1<f64>) -> Array1<f64> {
    z.dot(&gauss_solve(&z.t().dot(z), &z.t().dot(v)))
}

/// Overidentified sample with one endogenous regressor and no controls.
fn iv_sample(n: usize, l: usize, seed: u64) -> (Dataset<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = normals(&mut rng, n, l);
    let u = normals(&mut rng, n, 2);
    let v = u.column(0).to_owned();
    let e = &v * 0.6 + &(u.column(1).to_owned() * 0.8);
    let d = z.sum_axis(Axis(1)) * 0.4 + &v;
    let y = &d * 1.5 + &e;
    let data = Dataset::new(y, d.insert_axis(Axis(1)), Array2::zeros((n, 0)), z.clone()).unwrap();
    (data, z)
}

#[test]
fn cutoff_design_constants() {
    let spec = DgpSpec::cutoff(250, 5, 180.0);
    let prm = spec.params().unwrap();
    assert!((prm.q - 11.125).abs() < 1e-12);
    let c = (180.0f64 / (11.125 * (250.0 + 180.0))).sqrt();
    assert!((prm.c - c).abs() < 1e-14);
    assert!((prm.c - 0.1940).abs() < 5e-5);
    assert!((prm.sigma2_v + prm.c * prm.c * prm.q - 1.0).abs() < 1e-14);
    assert!((prm.mu2 - 180.0).abs() < 1e-9);
    assert!((prm.sigma_ev - 0.6 * prm.sigma2_v.sqrt()).abs() < 1e-14);
}

#[test]
fn zero_concentration_means_no_signal() {
    let prm = DgpSpec::exponential(100, 0.0).params().unwrap();
    assert!(prm.pi.iter().all(|&v| v == 0.0));
    assert_eq!(prm.sigma2_v, 1.0);
    assert!(DgpSpec::cutoff(100, 5, -1.0).params().is_err());
    assert!(DgpSpec::cutoff(100, 0, 10.0).params().is_err());
}

#[test]
fn realized_moments_match_population() {
    let spec = DgpSpec::cutoff(100_000, 5, 180.0);
    let draw = gen_dgp(&spec, 17).unwrap();
    let d = draw.data.d_endog().column(0).to_owned();
    let v = &d - &draw.data.f().dot(&draw.pi);
    let n = d.len() as f64;
    let mean = |a: &Array1<f64>| a.sum() / n;
    let var_d = mean(&d.mapv(|x| x * x)) - mean(&d).powi(2);
    assert!((var_d - 1.0).abs() < 0.02, "Var(d) = {var_d}");
    let (me, mv) = (mean(&draw.e), mean(&v));
    let cov = mean(&(&draw.e * &v)) - me * mv;
    let sd_e = (mean(&draw.e.mapv(|x| x * x)) - me * me).sqrt();
    let sd_v = (mean(&v.mapv(|x| x * x)) - mv * mv).sqrt();
    let corr = cov / (sd_e * sd_v);
    assert!((corr - 0.6).abs() < 0.02, "Corr(e, v) = {corr}");
    let y_gap = draw.data.y().to_owned() - &d - &draw.e;
    assert!(y_gap.iter().all(|g| g.abs() < 1e-12));
}

#[test]
fn dgp_is_seed_deterministic() {
    let spec = DgpSpec::exponential(50, 30.0);
    let a = gen_dgp(&spec, 5).unwrap();
    let b = gen_dgp(&spec, 5).unwrap();
    let c = gen_dgp(&spec, 6).unwrap();
    assert_eq!((a.data.y(), a.data.f()), (b.data.y(), b.data.f()));
    assert_ne!(a.data.y(), c.data.y());
}

#[test]
fn tsls_recovers_exact_relation() {
    let (data, z) = iv_sample(40, 3, 1);
    let exact = data.with_outcome(data.d_endog().column(0).mapv(|v| -0.75 * v)).unwrap();
    let fit = estimator_2sls(&exact, z.view()).unwrap();
    assert!((fit.estimate.alpha[0] + 0.75).abs() < 1e-12);
    assert!(fit.estimate.se[0] < 1e-10);
}

#[test]
fn tsls_single_instrument_is_a_ratio() {
    let (data, z) = iv_sample(30, 1, 2);
    let fit = estimator_2sls(&data, z.view()).unwrap();
    let zc = z.column(0);
    let ratio = zc.dot(&data.y()) / zc.dot(&data.d_endog().column(0));
    assert!((fit.estimate.alpha[0] - ratio).abs() < 1e-12);
}

#[test]
fn tsls_matches_normal_equations() {
    let (data, z) = iv_sample(60, 4, 3);
    let fit = estimator_2sls(&data, z.view()).unwrap();
    let d = data.d_endog().column(0).to_owned();
    let y = data.y().to_owned();
    let pd = project(&z, &d);
    let alpha = pd.dot(&y) / pd.dot(&d);
    assert!((fit.estimate.alpha[0] - alpha).abs() < 1e-10);
    let eps = &y - &(&d * alpha);
    let s2 = eps.dot(&eps) / 60.0;
    assert!((fit.estimate.se[0] - (s2 / pd.dot(&d)).sqrt()).abs() < 1e-10);
    assert_eq!(fit.n_instruments, 4);
}

#[test]
fn just_identified_liml_equals_tsls() {
    let (data, z) = iv_sample(50, 1, 4);
    let k = liml_kappa(&data, z.view()).unwrap();
    assert!((k - 1.0).abs() < 1e-10);
    let liml = estimator_kclass(&data, z.view(), KClass::Liml, KClassVariance::Conventional).unwrap();
    let tsls = estimator_2sls(&data, z.view()).unwrap();
    assert!((liml.estimate.alpha[0] - tsls.estimate.alpha[0]).abs() < 1e-9);
}

#[test]
fn kappa_zero_is_ols() {
    let (data, z) = iv_sample(50, 3, 5);
    let fit = estimator_kclass(&data, z.view(), KClass::Fixed(0.0), KClassVariance::Conventional).unwrap();
    let b = ols(&data.d_endog().to_owned(), &data.y().to_owned());
    assert!((fit.estimate.alpha[0] - b[0]).abs() < 1e-12);
}

#[test]
fn liml_kappa_solves_the_determinant_equation() {
    let (data, z) = iv_sample(50, 5, 6);
    let mut w = Array2::zeros((50, 2));
    w.column_mut(0).assign(&data.y());
    w.column_mut(1).assign(&data.d_endog().column(0));
    let a = w.t().dot(&w);
    let mut mz = w.clone();
    for j in 0..2 {
        let col = w.column(j).to_owned();
        mz.column_mut(j).assign(&(&col - &project(&z, &col)));
    }
    let b = mz.t().dot(&mz);
    let det = |k: f64| {
        let m = &a - &(&b * k);
        m[[0, 0]] * m[[1, 1]] - m[[0, 1]] * m[[1, 0]]
    };
    // det(A − κB) is a quadratic in κ, positive at 0 and at −∞.
    let qa = b[[0, 0]] * b[[1, 1]] - b[[0, 1]].powi(2);
    let qb = -(a[[0, 0]] * b[[1, 1]] + a[[1, 1]] * b[[0, 0]] - 2.0 * a[[0, 1]] * b[[0, 1]]);
    let qc = a[[0, 0]] * a[[1, 1]] - a[[0, 1]].powi(2);
    let root = (-qb - (qb * qb - 4.0 * qa * qc).sqrt()) / (2.0 * qa);
    let (mut lo, mut hi) = (0.0, root * 1.0001);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if det(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let k = liml_kappa(&data, z.view()).unwrap();
    assert!(k >= 1.0);
    assert!((k - root).abs() < 1e-9 * root, "{k} vs {root}");
    assert!((k - lo).abs() < 1e-9 * root, "{k} vs bisection {lo}");

    let full = estimator_kclass(&data, z.view(), KClass::Fuller(1.0), KClassVariance::Conventional).unwrap();
    assert!((full.kappa - (k - 1.0 / 45.0)).abs() < 1e-12);
    assert_eq!(full.kappa_liml, Some(full.kappa + 1.0 / 45.0));
    let fixed = estimator_kclass(&data, z.view(), KClass::Fixed(full.kappa), KClassVariance::Conventional).unwrap();
    assert!((full.estimate.alpha[0] - fixed.estimate.alpha[0]).abs() < 1e-12);

    let d = data.d_endog().column(0).to_owned();
    let y = data.y().to_owned();
    let pd = project(&z, &d);
    let kf = full.kappa;
    let num = (1.0 - kf) * d.dot(&y) + kf * pd.dot(&y);
    let den = (1.0 - kf) * d.dot(&d) + kf * pd.dot(&d);
    assert!((full.estimate.alpha[0] - num / den).abs() < 1e-10);
}

#[test]
fn many_instrument_variance_is_positive() {
    let (data, z) = iv_sample(80, 10, 7);
    let fit = estimator_kclass(&data, z.view(), KClass::Fuller(1.0), KClassVariance::ManyInstrument).unwrap();
    assert!(fit.estimate.se[0].is_finite() && fit.estimate.se[0] > 0.0);
    let too_many = normals(&mut ChaCha8Rng::seed_from_u64(1), 80, 80);
    assert!(estimator_2sls(&data, too_many.view()).is_err());
}

fn half(estimate: f64, se: f64) -> HalfFit {
    HalfFit {
        estimate,
        se,
        selected: vec![0],
        ridge_penalty: 1.0,
    }
}

#[test]
fn combining_halves() {
    let a = half(1.2, 0.3);
    let (est, se, w) = combine_halves(Some(&a), Some(&a)).unwrap();
    assert!((w - 0.5).abs() < 1e-15 && (est - 1.2).abs() < 1e-15);
    assert!((se - 0.3 / 2f64.sqrt()).abs() < 1e-15);

    let b = half(2.0, 0.6);
    let (est, se, w) = combine_halves(Some(&a), Some(&b)).unwrap();
    assert!((w - 0.8).abs() < 1e-14);
    assert!((est - (0.8 * 1.2 + 0.2 * 2.0)).abs() < 1e-14);
    assert!((se - (0.64f64 * 0.09 + 0.04 * 0.36).sqrt()).abs() < 1e-14);

    assert_eq!(combine_halves(Some(&b), None), Some((2.0, 0.6, 1.0)));
    assert_eq!(combine_halves(None, Some(&b)), Some((2.0, 0.6, 0.0)));
    assert_eq!(combine_halves(None, None), None);
}

fn brute_loo(z: &Array2<f64>, d: &Array1<f64>, lambda: f64) -> f64 {
    let n = z.nrows();
    let zm = z.mean_axis(Axis(0)).unwrap();
    let zc = z - &zm;
    let dc = d - d.mean().unwrap();
    let mut err = 0.0;
    for i in 0..n {
        let keep: Vec<usize> = (0..n).filter(|&k| k != i).collect();
        let zt = zc.select(Axis(0), &keep);
        let dt = dc.select(Axis(0), &keep);
        let mut g = zt.t().dot(&zt);
        for j in 0..g.nrows() {
            g[[j, j]] += lambda;
        }
        let b = gauss_solve(&g, &zt.t().dot(&dt));
        let r = dc[i] - zc.row(i).dot(&b);
        err += r * r;
    }
    err / n as f64
}

#[test]
fn ridge_loocv_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z = normals(&mut rng, 20, 5) + 3.0;
    let d = z.column(0).to_owned() - &z.column(2) + &normals(&mut rng, 20, 1).column(0);
    let cv = ridge_loocv(z.view(), d.view(), 7).unwrap();
    assert_eq!(cv.penalties, ridge_grid(z.view(), 7));
    for (l, e) in cv.penalties.iter().zip(cv.errors.iter()) {
        let oracle = brute_loo(&z, &d, *l);
        assert!((e - oracle).abs() < 1e-9 * oracle.max(1.0), "λ={l}: {e} vs {oracle}");
    }
    let best = cv.errors.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(cv.errors[cv.best], best);
}

#[test]
fn ridge_prefers_heavy_shrinkage_for_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z = normals(&mut rng, 200, 10);
    let d = normals(&mut rng, 200, 1).column(0).to_owned();
    let cv = ridge_loocv(z.view(), d.view(), 25).unwrap();
    assert_eq!(cv.best, cv.penalties.len() - 1);
}

#[test]
fn zero_components_is_identity() {
    let f = normals(&mut ChaCha8Rng::seed_from_u64(10), 12, 4);
    let (out, used) = augment_principal_components(f.view(), 0).unwrap();
    assert_eq!((out, used), (f.clone(), 0));
    assert!(augment_principal_components(f.view(), 5).is_err());
}

#[test]
fn rank_one_instruments_give_one_component() {
    let u = array![1.0, -2.0, 0.5, 3.0, -2.5];
    let v = array![2.0, -1.0, 0.5];
    let f = u.clone().insert_axis(Axis(1)).dot(&v.clone().insert_axis(Axis(0)));
    let (out, used) = augment_principal_components(f.view(), 2).unwrap();
    assert_eq!(used, 1);
    assert_eq!(out.ncols(), 4);
    // The loading is ±v/‖v‖ with the largest entry positive, so the score is u‖v‖.
    let expect = &u * v.dot(&v).sqrt();
    let score = out.column(3).to_owned();
    assert!(score.iter().zip(expect.iter()).all(|(a, b)| (a - b).abs() < 1e-10));
}

#[test]
fn components_follow_variance_order() {
    let f = array![
        [1.0, 3.0, 2.0],
        [1.0, -3.0, -2.0],
        [-1.0, 3.0, -2.0],
        [-1.0, -3.0, 2.0]
    ];
    let (out, used) = augment_principal_components(f.view(), 2).unwrap();
    assert_eq!(used, 2);
    assert!(out.slice(s![.., ..3]) == f);
    for (k, j) in [(3, 1), (4, 2)] {
        assert!(out.column(k).iter().zip(f.column(j).iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

fn outcome(estimate: f64, pval: f64) -> Outcome {
    Outcome {
        estimate,
        se: 1.0,
        no_selection: false,
        failed: false,
        evidence: vec![pval],
    }
}

#[test]
fn summary_of_hand_fixture() {
    let outs = vec![outcome(0.0, 0.01), outcome(3.0, 0.2), outcome(1.5, 0.04), outcome(1.0, 0.5)];
    let row = summarize("x", &outs, 0.05, NoSelectPolicy::SupScore);
    // Errors −1, 2, 0.5, 0.
    assert_eq!(row.r, 4);
    assert!((row.med_bias - 0.25).abs() < 1e-15);
    assert!((row.mad - 0.75).abs() < 1e-15);
    assert!((row.rp05 - 0.5).abs() < 1e-15);
    assert!((row.rmse - (5.25f64 / 4.0).sqrt()).abs() < 1e-15);
    assert_eq!((row.n0, row.failures), (0, 0));
}

#[test]
fn rejection_rate_is_calibrated_for_normal_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let reps = 4000;
    let t = normals(&mut rng, reps, 1);
    let outs: Vec<Outcome> = t
        .column(0)
        .iter()
        .map(|&x| outcome(1.0 + x, 2.0 * (1.0 - phi_series(x.abs()))))
        .collect();
    let row = summarize("t", &outs, 0.05, NoSelectPolicy::SupScore);
    let se = (0.05f64 * 0.95 / reps as f64).sqrt();
    assert!((row.rp05 - 0.05).abs() < 2.0 * se, "rp = {}", row.rp05);
    assert!(row.med_bias.abs() < 0.06);
    assert!((row.rmse - 1.0).abs() < 0.05);
    assert!((row.mad - 0.6745).abs() < 0.05);
}

#[test]
fn infinite_interval_policy_drops_point_metrics() {
    let mut outs = vec![outcome(1.0, 0.5), outcome(2.0, 0.5)];
    outs.push(Outcome {
        estimate: 1e9,
        se: f64::NAN,
        no_selection: true,
        failed: false,
        evidence: vec![1.0],
    });
    outs.push(Outcome {
        estimate: f64::NAN,
        se: f64::NAN,
        no_selection: false,
        failed: true,
        evidence: vec![f64::NAN],
    });
    let inf = summarize("x", &outs, 0.05, NoSelectPolicy::InfiniteCi);
    assert_eq!((inf.r, inf.n0, inf.failures), (4, 1, 1));
    assert!((inf.rmse - 0.5f64.sqrt()).abs() < 1e-15);
    assert_eq!(inf.rp05, 0.0);
    let sup = summarize("x", &outs, 0.05, NoSelectPolicy::SupScore);
    assert!((sup.rmse - ((1.0 + 1e12) / 3.0f64).sqrt()).abs() < 1e-6 * sup.rmse);
    assert_eq!(sup.n0, 1);
}

fn small_config(estimators: Vec<EstimatorKind>) -> SimConfig {
    let mut dgp = DgpSpec::cutoff(100, 5, 60.0);
    dgp.p = 30;
    SimConfig::new(dgp, estimators)
}

#[test]
fn replications_do_not_depend_on_thread_count() {
    let cfg = small_config(vec![
        EstimatorKind::Tsls,
        EstimatorKind::Full,
        EstimatorKind::PostLasso,
        EstimatorKind::SupScore,
        EstimatorKind::SplitSample,
    ]);
    let one = run_replications(&cfg, 12, 99, 1).unwrap();
    let three = run_replications(&cfg, 12, 99, 3).unwrap();
    assert_eq!(one.to_csv(), three.to_csv());
    let bits = |t: &MetricsTable| -> Vec<u64> {
        t.rows.iter().flat_map(|r| [r.med_bias, r.mad, r.rp05, r.rmse]).map(f64::to_bits).collect()
    };
    assert_eq!(bits(&one), bits(&three));
    assert!(one.to_csv().starts_with("estimator,R,med_bias,mad,rp05,rmse,n0\n"));
    assert_eq!(one.rows.len(), 5);
}

#[test]
fn replication_seeds_are_distinct() {
    let seeds: std::collections::HashSet<u64> = (0..1000).map(|r| replication_seed(42, r)).collect();
    assert_eq!(seeds.len(), 1000);
    assert_ne!(replication_seed(1, 0), replication_seed(2, 0));
}

#[test]
fn size_adjusted_power_has_nominal_size() {
    let cfg = small_config(vec![EstimatorKind::PostLasso, EstimatorKind::SupScore]);
    let reps = 200;
    let curve = size_adjusted_power(&cfg, &[0.5, 1.0, 1.5], reps, 3, 0).unwrap();
    assert!(curve.warnings.is_empty());
    for name in ["post-lasso", "sup-score"] {
        let size = curve.power(name, 1.0).unwrap();
        assert!((size - 0.05).abs() <= 1.0 / reps as f64 + 1e-12, "{name}: size {size}");
        assert!(curve.power(name, 0.5).unwrap() > size);
        assert!(curve.power(name, 1.5).unwrap() > size);
    }
    assert!(size_adjusted_power(&cfg, &[], 10, 3, 1).is_err());
}
