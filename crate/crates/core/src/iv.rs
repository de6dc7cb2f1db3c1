//! Second-stage IV estimation, variance estimators, a specification test
//! against a baseline IV estimator, and the split-sample estimator.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dist::{chi2_quantile, chi2_sf, normal_sf};
use crate::error::{Error, Result};
use crate::first_stage::{fit_first_stage, predict_optimal_instruments, with_fallback, FirstStageConfig, FirstStageFit};
use crate::linalg::{self, PivotedQr};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VcovMode {
    #[default]
    Hetero,
    Homo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvEstimate<T> {
    pub alpha: Array1<T>,
    /// Variance of `alpha` (already divided by `n`).
    pub vcov: Array2<T>,
    pub se: Array1<T>,
    pub mode: VcovMode,
    pub n: usize,
}

impl<T: Scalar> IvEstimate<T> {
    fn new(alpha: Array1<T>, vcov: Array2<T>, mode: VcovMode, n: usize) -> Self {
        let se = vcov.diag().mapv(|v| v.max(T::zero()).sqrt());
        IvEstimate { alpha, vcov, se, mode, n }
    }

    /// t statistic for `alpha_j = value`.
    pub fn t_stat(&self, j: usize, value: T) -> T {
        (self.alpha[j] - value) / self.se[j]
    }

    /// Two-sided normal p-value for `alpha_j = value`.
    pub fn p_value(&self, j: usize, value: T) -> f64 {
        let t = self.t_stat(j, value).as_f64();
        if t.is_nan() {
            return f64::NAN;
        }
        (2.0 * normal_sf(t.abs())).min(1.0)
    }
}

fn check_rows(n: usize, parts: &[(&str, usize)]) -> Result<()> {
    for (name, rows) in parts {
        if *rows != n {
            return Err(Error::Dimension(format!("{name} has {rows} rows, expected {n}")));
        }
    }
    Ok(())
}

/// `α̂ = E_n[D̂ d']⁻¹ E_n[D̂ y]`.
pub fn iv_estimate<T: Scalar>(dhat: ArrayView2<T>, d: ArrayView2<T>, y: ArrayView1<T>) -> Result<Array1<T>> {
    let n = y.len();
    check_rows(n, &[("instrument matrix", dhat.nrows()), ("regressor matrix", d.nrows())])?;
    if dhat.ncols() != d.ncols() {
        return Err(Error::Dimension(format!(
            "{} constructed instruments for {} regressors",
            dhat.ncols(),
            d.ncols()
        )));
    }
    let a = linalg::moment(dhat, d);
    let cond = linalg::condition_number(a.view());
    if !(cond.as_f64() < T::COND_LIMIT) {
        return Err(Error::WeakInstruments(cond.as_f64()));
    }
    linalg::solve_vec(a.view(), linalg::moment_vec(dhat, y).view())
}

fn residuals<T: Scalar>(d: ArrayView2<T>, y: ArrayView1<T>, alpha: &Array1<T>) -> Array1<T> {
    &y - &d.dot(alpha)
}

/// `(1/n) Q̂⁻¹ Ω̂ Q̂⁻¹` with `Q̂ = E_n[D̂D̂']`, `Ω̂ = E_n[ε̂² D̂D̂']`.
pub fn hetero_vcov<T: Scalar>(
    dhat: ArrayView2<T>,
    d: ArrayView2<T>,
    y: ArrayView1<T>,
    alpha: &Array1<T>,
) -> Result<Array2<T>> {
    let eps = residuals(d, y, alpha);
    sandwich(dhat, eps.view())
}

fn sandwich<T: Scalar>(dhat: ArrayView2<T>, eps: ArrayView1<T>) -> Result<Array2<T>> {
    let n = T::from_usize_lossy(dhat.nrows());
    let qinv = linalg::guarded_inverse(linalg::moment(dhat, dhat).view(), "E_n[D̂D̂']")?;
    let mut weighted = dhat.to_owned();
    for (mut row, &e) in weighted.axis_iter_mut(Axis(0)).zip(eps.iter()) {
        row.mapv_inplace(|v| v * e);
    }
    let omega = linalg::moment(weighted.view(), weighted.view());
    let mut v = qinv.dot(&omega).dot(&qinv) / n;
    linalg::symmetrize(&mut v);
    Ok(v)
}

/// `σ̂² Q̂⁻¹ / n` with `σ̂² = E_n[ε̂²]`.
pub fn homo_vcov<T: Scalar>(
    dhat: ArrayView2<T>,
    d: ArrayView2<T>,
    y: ArrayView1<T>,
    alpha: &Array1<T>,
) -> Result<Array2<T>> {
    let eps = residuals(d, y, alpha);
    homo_from_residuals(dhat, eps.view())
}

fn homo_from_residuals<T: Scalar>(dhat: ArrayView2<T>, eps: ArrayView1<T>) -> Result<Array2<T>> {
    let n = T::from_usize_lossy(dhat.nrows());
    let qinv = linalg::guarded_inverse(linalg::moment(dhat, dhat).view(), "E_n[D̂D̂']")?;
    let s2 = eps.iter().map(|&e| e * e).sum::<T>() / n;
    let mut v = qinv * (s2 / n);
    linalg::symmetrize(&mut v);
    Ok(v)
}

/// Point estimate and variance in one call.
pub fn fit_iv<T: Scalar>(
    dhat: ArrayView2<T>,
    d: ArrayView2<T>,
    y: ArrayView1<T>,
    mode: VcovMode,
) -> Result<IvEstimate<T>> {
    let alpha = iv_estimate(dhat, d, y)?;
    let vcov = match mode {
        VcovMode::Hetero => hetero_vcov(dhat, d, y, &alpha)?,
        VcovMode::Homo => homo_vcov(dhat, d, y, &alpha)?,
    };
    Ok(IvEstimate::new(alpha, vcov, mode, y.len()))
}

/// Lasso first stage followed by IV; empty selections use the
/// single-instrument fallback.
pub fn estimate<T: Scalar>(
    data: &Dataset<T>,
    config: &FirstStageConfig<T>,
    mode: VcovMode,
) -> Result<(FirstStageFit<T>, IvEstimate<T>)> {
    let fs = with_fallback(fit_first_stage(data, config)?, data)?;
    let est = fit_iv(fs.dhat.view(), data.d(), data.y(), mode)?;
    Ok((fs, est))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecTestResult<T> {
    pub j: T,
    pub df: usize,
    pub pvalue: f64,
    /// Baseline IV estimate.
    pub alpha_tilde: Array1<T>,
    pub sigma: Array2<T>,
}

impl<T: Scalar> SpecTestResult<T> {
    pub fn rejects(&self, level: f64) -> bool {
        self.j.as_f64() > chi2_quantile(1.0 - level, self.df)
    }
}

/// Baseline IV estimate with instrument matrix `A`:
/// `α̃ = M̂ E_n[A y]`, `M̂ = (E_n[dA'] E_n[AA']⁻¹ E_n[Ad'])⁻¹ E_n[dA'] E_n[AA']⁻¹`.
pub fn baseline_iv<T: Scalar>(
    a: ArrayView2<T>,
    d: ArrayView2<T>,
    y: ArrayView1<T>,
) -> Result<(Array1<T>, Array2<T>)> {
    check_rows(y.len(), &[("baseline instruments", a.nrows()), ("regressor matrix", d.nrows())])?;
    if a.ncols() < d.ncols() {
        return Err(Error::InvalidArgument(format!(
            "baseline has {} instruments for {} regressors",
            a.ncols(),
            d.ncols()
        )));
    }
    let aa_inv = linalg::guarded_inverse(linalg::moment(a, a).view(), "E_n[AA']")?;
    let da = linalg::moment(d, a);
    let inner = da.dot(&aa_inv).dot(&da.t());
    let m = linalg::guarded_inverse(inner.view(), "baseline sandwich")?.dot(&da).dot(&aa_inv);
    let alpha = m.dot(&linalg::moment_vec(a, y));
    Ok((alpha, m))
}

/// Contrast of the baseline IV estimate with `α̂` along the rows of `R`.
///
/// `Σ̂ = E_n[ε̂²(M̂A_i − Q̂⁻¹D̂_i)(M̂A_i − Q̂⁻¹D̂_i)']` with `ε̂` from `α̂`, and
/// `J = n (α̃ − α̂)'R'(RΣ̂R')⁻¹R(α̃ − α̂)` is referred to `χ²(rank R)`.
pub fn spec_test<T: Scalar>(
    a: ArrayView2<T>,
    dhat: ArrayView2<T>,
    d: ArrayView2<T>,
    y: ArrayView1<T>,
    r: ArrayView2<T>,
    alpha: &Array1<T>,
) -> Result<SpecTestResult<T>> {
    let n_obs = y.len();
    check_rows(n_obs, &[("constructed instruments", dhat.nrows())])?;
    if r.ncols() != d.ncols() || r.nrows() == 0 {
        return Err(Error::Dimension(format!(
            "restriction matrix is {}x{}, expected k x {}",
            r.nrows(),
            r.ncols(),
            d.ncols()
        )));
    }
    let k = r.nrows();
    if PivotedQr::new(r.t()).rank() < k {
        return Err(Error::InvalidArgument("restriction matrix must have full row rank".into()));
    }
    let (alpha_tilde, m) = baseline_iv(a, d, y)?;
    let qinv = linalg::guarded_inverse(linalg::moment(dhat, dhat).view(), "E_n[D̂D̂']")?;
    let eps = residuals(d, y, alpha);

    let mut h = a.dot(&m.t()) - dhat.dot(&qinv.t());
    for (mut row, &e) in h.axis_iter_mut(Axis(0)).zip(eps.iter()) {
        row.mapv_inplace(|v| v * e);
    }
    let mut sigma = linalg::moment(h.view(), h.view());
    linalg::symmetrize(&mut sigma);

    let diff = &alpha_tilde - alpha;
    let rd = r.dot(&diff);
    let scale = alpha_tilde
        .iter()
        .chain(alpha.iter())
        .fold(T::one(), |m, &v| m.max(v.abs()));
    let contrast_norm = rd.iter().fold(T::zero(), |m, &v| m.max(v.abs()));
    if contrast_norm <= T::epsilon() * T::lit(64.0) * scale {
        return Ok(SpecTestResult {
            j: T::zero(),
            df: k,
            pvalue: 1.0,
            alpha_tilde,
            sigma,
        });
    }
    let rsr = r.dot(&sigma).dot(&r.t());
    let rsr_inv = linalg::guarded_inverse(rsr.view(), "contrast variance").map_err(|_| Error::DegenerateContrast)?;
    let j = T::from_usize_lossy(n_obs) * rd.dot(&rsr_inv.dot(&rd));
    let j = j.max(T::zero());
    Ok(SpecTestResult {
        j,
        df: k,
        pvalue: chi2_sf(j.as_f64(), k).clamp(0.0, 1.0),
        alpha_tilde,
        sigma,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSampleEstimate<T> {
    pub alpha_a: Array1<T>,
    pub alpha_b: Array1<T>,
    pub alpha: Array1<T>,
    /// `n_a E_{n_a}[D̂^a D̂^a']`.
    pub gram_a: Array2<T>,
    /// `n_b E_{n_b}[D̂^b D̂^b']`.
    pub gram_b: Array2<T>,
    pub half_a: Vec<usize>,
    pub half_b: Vec<usize>,
    pub vcov: Array2<T>,
    pub se: Array1<T>,
    pub mode: VcovMode,
    /// First stages fit on half a and half b respectively.
    pub first_stage_a: FirstStageFit<T>,
    pub first_stage_b: FirstStageFit<T>,
}

impl<T: Scalar> SplitSampleEstimate<T> {
    pub fn as_estimate(&self) -> IvEstimate<T> {
        IvEstimate::new(self.alpha.clone(), self.vcov.clone(), self.mode, self.half_a.len() + self.half_b.len())
    }

    pub fn used_fallback(&self) -> bool {
        self.first_stage_a.used_fallback() || self.first_stage_b.used_fallback()
    }
}

/// `n_a = ⌈n/2⌉` observations for half a, drawn by a seeded uniform permutation.
pub fn split_halves(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_a = n.div_ceil(2);
    let mut a = idx[..n_a].to_vec();
    let mut b = idx[n_a..].to_vec();
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

/// Split-sample IV with a seeded random split.
pub fn split_sample_iv<T: Scalar>(
    data: &Dataset<T>,
    config: &FirstStageConfig<T>,
    mode: VcovMode,
    seed: u64,
) -> Result<SplitSampleEstimate<T>> {
    if data.n() < 4 {
        return Err(Error::InvalidArgument(format!("split-sample IV needs n >= 4, got {}", data.n())));
    }
    let (a, b) = split_halves(data.n(), seed);
    split_sample_iv_with(data, config, mode, &a, &b)
}

/// Split-sample IV for a given assignment of observations to halves.
///
/// Instruments for each half come from the first stage fit on the other half.
pub fn split_sample_iv_with<T: Scalar>(
    data: &Dataset<T>,
    config: &FirstStageConfig<T>,
    mode: VcovMode,
    half_a: &[usize],
    half_b: &[usize],
) -> Result<SplitSampleEstimate<T>> {
    if half_a.len() < 2 || half_b.len() < 2 {
        return Err(Error::InvalidArgument("each half needs at least two observations".into()));
    }
    let da = data.subset_rows(half_a);
    let db = data.subset_rows(half_b);
    let (fs_a, fs_b) = rayon::join(
        || fit_first_stage(&da, config).and_then(|f| with_fallback(f, &da)).map_err(|e| e.in_half("a")),
        || fit_first_stage(&db, config).and_then(|f| with_fallback(f, &db)).map_err(|e| e.in_half("b")),
    );
    let (fs_a, fs_b) = (fs_a?, fs_b?);

    let dhat_a = predict_optimal_instruments(&fs_b, &da).map_err(|e| e.in_half("a"))?;
    let dhat_b = predict_optimal_instruments(&fs_a, &db).map_err(|e| e.in_half("b"))?;
    let alpha_a = iv_estimate(dhat_a.view(), da.d(), da.y()).map_err(|e| e.in_half("a"))?;
    let alpha_b = iv_estimate(dhat_b.view(), db.d(), db.y()).map_err(|e| e.in_half("b"))?;

    let gram_a = dhat_a.t().dot(&dhat_a);
    let gram_b = dhat_b.t().dot(&dhat_b);
    let total = &gram_a + &gram_b;
    let rhs = gram_a.dot(&alpha_a) + gram_b.dot(&alpha_b);
    let alpha = linalg::solve_vec(total.view(), rhs.view())?;

    let dhat = ndarray::concatenate(Axis(0), &[dhat_a.view(), dhat_b.view()])
        .map_err(|e| Error::Dimension(e.to_string()))?;
    let rows: Vec<usize> = half_a.iter().chain(half_b.iter()).copied().collect();
    let full = data.subset_rows(&rows);
    let eps = residuals(full.d(), full.y(), &alpha);
    let vcov = match mode {
        VcovMode::Hetero => sandwich(dhat.view(), eps.view())?,
        VcovMode::Homo => homo_from_residuals(dhat.view(), eps.view())?,
    };
    let se = vcov.diag().mapv(|v| v.max(T::zero()).sqrt());
    Ok(SplitSampleEstimate {
        alpha_a,
        alpha_b,
        alpha,
        gram_a,
        gram_b,
        half_a: half_a.to_vec(),
        half_b: half_b.to_vec(),
        vcov,
        se,
        mode,
        first_stage_a: fs_a,
        first_stage_b: fs_b,
    })
}
