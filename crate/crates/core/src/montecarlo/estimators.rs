//! Baseline estimators used in the simulations: 2SLS with every
//! instrument, the k-class family (LIML, Fuller), a ridge/Lasso
//! sample-splitting hybrid, and principal-component augmentation.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::first_stage::{fallback_single_instrument, fit_first_stage, FirstStageConfig};
use crate::iv::{split_halves, IvEstimate, VcovMode};
use crate::linalg::{self, PivotedQr};

/// Instruments of a k-class problem: the excluded ones plus the exogenous
/// regressors, which instrument themselves.
fn full_instruments(data: &Dataset<f64>, z: ArrayView2<f64>) -> Array2<f64> {
    linalg::hstack(z, data.w())
}

fn project_columns(qr: &PivotedQr<f64>, a: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(a.dim());
    for (j, col) in a.axis_iter(Axis(1)).enumerate() {
        out.column_mut(j).assign(&qr.project(col));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KClass {
    /// Fixed `κ`.
    Fixed(f64),
    Liml,
    /// `κ_LIML − a/(n − L)`.
    Fuller(f64),
}

/// How k-class standard errors are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KClassVariance {
    /// `σ̂²(X'(I − κM_Z)X)⁻¹` with `σ̂² = E_n[ε̂²]`.
    Conventional,
    /// Many-instrument robust sandwich `Ĥ⁻¹Σ̂Ĥ⁻¹` under homoscedasticity.
    ManyInstrument,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KClassFit {
    pub estimate: IvEstimate<f64>,
    pub kappa: f64,
    pub kappa_liml: Option<f64>,
    /// Number of instruments `L`, exogenous regressors included.
    pub n_instruments: usize,
}

/// Smallest root of `det(W'M_X W − κ W'M_Z W) = 0` with `W = [y, d_endog]`.
pub fn liml_kappa(data: &Dataset<f64>, z: ArrayView2<f64>) -> Result<f64> {
    let zf = full_instruments(data, z);
    let qz = PivotedQr::new(zf.view());
    let mut wmat = Array2::zeros((data.n(), 1 + data.k_e()));
    wmat.column_mut(0).assign(&data.y());
    wmat.slice_mut(s![.., 1..]).assign(&data.d_endog());
    let mz_w = &wmat - &project_columns(&qz, wmat.view());
    let mx_w = if data.k_w() > 0 {
        let qx = PivotedQr::new(data.w());
        &wmat - &project_columns(&qx, wmat.view())
    } else {
        wmat.clone()
    };
    let b = mz_w.t().dot(&mz_w);
    let a = mx_w.t().dot(&mx_w);
    let l = linalg::cholesky(b.view()).ok_or_else(|| Error::Singular("W'M_Z W in the LIML problem".into()))?;
    let linv = linalg::inverse(l.view())?;
    let mut c = linv.dot(&a).dot(&linv.t());
    linalg::symmetrize(&mut c);
    let (vals, _) = linalg::sym_eigen(c.view());
    Ok(vals[0])
}

/// k-class estimator `(X'(I−κM_Z)X)⁻¹X'(I−κM_Z)y` with `X = d`.
pub fn estimator_kclass(
    data: &Dataset<f64>,
    z: ArrayView2<f64>,
    kind: KClass,
    variance: KClassVariance,
) -> Result<KClassFit> {
    let n = data.n();
    if z.nrows() != n {
        return Err(Error::Dimension("instrument rows".into()));
    }
    let zf = full_instruments(data, z);
    let big_l = zf.ncols();
    if big_l >= n {
        return Err(Error::InvalidArgument(format!(
            "k-class estimators need fewer instruments ({big_l}) than observations ({n})"
        )));
    }
    if big_l < data.k_d() {
        return Err(Error::InvalidArgument("fewer instruments than regressors".into()));
    }
    let (kappa, kappa_liml) = match kind {
        KClass::Fixed(k) => (k, None),
        KClass::Liml => {
            let k = liml_kappa(data, z)?;
            (k, Some(k))
        }
        KClass::Fuller(a) => {
            let k = liml_kappa(data, z)?;
            (k - a / (n - big_l) as f64, Some(k))
        }
    };
    let qz = PivotedQr::new(zf.view());
    let x = data.d();
    let y = data.y();
    let px = project_columns(&qz, x);
    let py = qz.project(y);
    let xx = x.t().dot(&x);
    let xpx = x.t().dot(&px);
    let lhs = &xx * (1.0 - kappa) + &(&xpx * kappa);
    let rhs = x.t().dot(&y) * (1.0 - kappa) + px.t().dot(&y) * kappa;
    let cond = linalg::condition_number(lhs.view());
    if !(cond < 1e12) {
        return Err(Error::WeakInstruments(cond));
    }
    let alpha = linalg::solve_vec(lhs.view(), rhs.view())?;
    let u = &y - &x.dot(&alpha);
    let vcov = match variance {
        KClassVariance::Conventional => {
            let s2 = u.dot(&u) / n as f64;
            linalg::inverse(lhs.view())? * s2
        }
        KClassVariance::ManyInstrument => {
            let pu = &py - &px.dot(&alpha);
            many_instrument_vcov(x, &px, u.view(), pu.view(), data.k_d())?
        }
    };
    Ok(KClassFit {
        estimate: make_estimate(alpha, vcov, n),
        kappa,
        kappa_liml,
        n_instruments: big_l,
    })
}

fn make_estimate(alpha: Array1<f64>, mut vcov: Array2<f64>, n: usize) -> IvEstimate<f64> {
    linalg::symmetrize(&mut vcov);
    let se = vcov.diag().mapv(|v| v.max(0.0).sqrt());
    IvEstimate {
        alpha,
        vcov,
        se,
        mode: VcovMode::Homo,
        n,
    }
}

/// `Ĥ⁻¹Σ̂Ĥ⁻¹` with `Ĥ = X'PX − ᾱX'X`, `ᾱ = û'Pû/û'û`,
/// `Σ̂ = σ̂²[(1−ᾱ)²X̃'PX̃ + ᾱ²X̃'(I−P)X̃]`, `X̃ = X − û û'X/û'û`,
/// `σ̂² = û'û/(n − k)`. Third and fourth moment corrections are omitted.
fn many_instrument_vcov(
    x: ArrayView2<f64>,
    px: &Array2<f64>,
    u: ArrayView1<f64>,
    pu: ArrayView1<f64>,
    k: usize,
) -> Result<Array2<f64>> {
    let n = x.nrows();
    let uu = u.dot(&u);
    if !(uu > 0.0) {
        return Ok(Array2::zeros((x.ncols(), x.ncols())));
    }
    let abar = u.dot(&pu) / uu;
    let xx = x.t().dot(&x);
    let xpx = x.t().dot(px);
    let h = &xpx - &(&xx * abar);
    let ux = x.t().dot(&u);
    let mut xt = x.to_owned();
    for (j, mut col) in xt.axis_iter_mut(Axis(1)).enumerate() {
        col.scaled_add(-ux[j] / uu, &u);
    }
    let mut pxt = px.to_owned();
    for (j, mut col) in pxt.axis_iter_mut(Axis(1)).enumerate() {
        col.scaled_add(-ux[j] / uu, &pu);
    }
    let xtpxt = xt.t().dot(&pxt);
    let xtxt = xt.t().dot(&xt);
    let s2 = uu / (n - k) as f64;
    let sigma = (&xtpxt * (1.0 - abar).powi(2) + &((&xtxt - &xtpxt) * abar.powi(2))) * s2;
    let hinv = linalg::inverse(h.view())?;
    Ok(hinv.dot(&sigma).dot(&hinv.t()))
}

/// 2SLS on the given instruments with conventional homoscedastic errors.
pub fn estimator_2sls(data: &Dataset<f64>, z: ArrayView2<f64>) -> Result<KClassFit> {
    estimator_kclass(data, z, KClass::Fixed(1.0), KClassVariance::Conventional)
}

/// Leave-one-out cross-validation curve for ridge regression of `d` on `z`
/// (both centered), computed from one eigendecomposition of `zz'`.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeCv {
    pub penalties: Vec<f64>,
    pub errors: Vec<f64>,
    pub best: usize,
}

impl RidgeCv {
    pub fn penalty(&self) -> f64 {
        self.penalties[self.best]
    }
}

/// Penalties `10^{-4} … 10^{2}` times `trace(Z'Z)`, log-spaced.
pub fn ridge_grid(z: ArrayView2<f64>, points: usize) -> Vec<f64> {
    let (zc, _) = linalg::center_columns(z);
    let tr: f64 = zc.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
    (0..points)
        .map(|g| {
            let t = if points > 1 { g as f64 / (points - 1) as f64 } else { 1.0 };
            tr * 10f64.powf(-4.0 + 6.0 * t)
        })
        .collect()
}

struct DualRidge {
    zc: Array2<f64>,
    zmean: Array1<f64>,
    dmean: f64,
    dc: Array1<f64>,
    evals: Array1<f64>,
    evecs: Array2<f64>,
    /// `U'd_c`.
    ud: Array1<f64>,
}

impl DualRidge {
    fn new(z: ArrayView2<f64>, d: ArrayView1<f64>) -> Self {
        let (zc, zmean) = linalg::center_columns(z);
        let dmean = linalg::mean(d);
        let dc = d.mapv(|v| v - dmean);
        let k = zc.dot(&zc.t());
        let (evals, evecs) = linalg::sym_eigen(k.view());
        let evals = evals.mapv(|v| v.max(0.0));
        let ud = evecs.t().dot(&dc);
        DualRidge { zc, zmean, dmean, dc, evals, evecs, ud }
    }

    fn loo_error(&self, lambda: f64) -> f64 {
        let shrink = self.evals.mapv(|e| e / (e + lambda));
        let fitted = self.evecs.dot(&(&shrink * &self.ud));
        let mut err = 0.0;
        for i in 0..self.dc.len() {
            let h: f64 = self.evecs.row(i).iter().zip(shrink.iter()).map(|(u, s)| u * u * s).sum();
            let r = (self.dc[i] - fitted[i]) / (1.0 - h).max(f64::EPSILON);
            err += r * r;
        }
        err / self.dc.len() as f64
    }

    fn coefficients(&self, lambda: f64) -> Array1<f64> {
        let w = self.evecs.dot(&(&self.ud / &self.evals.mapv(|e| e + lambda)));
        self.zc.t().dot(&w)
    }

    fn predict(&self, beta: &Array1<f64>, z: ArrayView2<f64>) -> Array1<f64> {
        let mut out = z.dot(beta);
        let shift = self.zmean.dot(beta);
        out.mapv_inplace(|v| v - shift + self.dmean);
        out
    }
}

/// Leave-one-out ridge penalty choice over `points` log-spaced penalties.
pub fn ridge_loocv(z: ArrayView2<f64>, d: ArrayView1<f64>, points: usize) -> Result<RidgeCv> {
    if z.nrows() != d.len() || z.nrows() < 3 {
        return Err(Error::Dimension("ridge cross-validation needs matching rows, n >= 3".into()));
    }
    let dr = DualRidge::new(z, d);
    let penalties = ridge_grid(z, points.max(1));
    let errors: Vec<f64> = penalties.iter().map(|&l| dr.loo_error(l)).collect();
    let best = errors
        .iter()
        .enumerate()
        .fold(0, |b, (i, &e)| if e < errors[b] { i } else { b });
    Ok(RidgeCv { penalties, errors, best })
}

/// Ridge fit on `(z_train, d_train)` with the cross-validated penalty,
/// evaluated at `z_target`.
pub fn ridge_predict(
    z_train: ArrayView2<f64>,
    d_train: ArrayView1<f64>,
    z_target: ArrayView2<f64>,
    points: usize,
) -> Result<(Array1<f64>, RidgeCv)> {
    let cv = ridge_loocv(z_train, d_train, points)?;
    let dr = DualRidge::new(z_train, d_train);
    let beta = dr.coefficients(cv.penalty());
    Ok((dr.predict(&beta, z_target), cv))
}

#[derive(Debug, Clone)]
pub struct RidgeSplitConfig {
    pub first_stage: FirstStageConfig<f64>,
    /// Fuller constant for the per-half estimator; `None` gives 2SLS.
    pub fuller: Option<f64>,
    pub grid_points: usize,
}

impl Default for RidgeSplitConfig {
    fn default() -> Self {
        RidgeSplitConfig {
            first_stage: FirstStageConfig::default(),
            fuller: None,
            grid_points: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HalfFit {
    pub estimate: f64,
    pub se: f64,
    pub selected: Vec<usize>,
    pub ridge_penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RidgeSplitFit {
    pub estimate: f64,
    pub se: f64,
    pub weight_a: f64,
    pub half_a: Option<HalfFit>,
    pub half_b: Option<HalfFit>,
    /// Neither half selected an instrument; the point estimate is the
    /// single-instrument fallback and inference should use the sup-score test.
    pub fallback: bool,
}

fn ones_and(cols: ArrayView2<f64>) -> Array2<f64> {
    linalg::hstack(Array2::ones((cols.nrows(), 1)).view(), cols)
}

fn ridge_half(
    target: &Dataset<f64>,
    train: &Dataset<f64>,
    cfg: &RidgeSplitConfig,
) -> Result<Option<HalfFit>> {
    let (fit_ridge, cv) = ridge_predict(train.f(), train.d_endog().column(0), target.f(), cfg.grid_points)?;
    let aug = linalg::hstack(target.f(), fit_ridge.view().insert_axis(Axis(1)));
    let mut names = target.labels().f.clone();
    names.push("ridge_fit".into());
    let tdata = target.with_instruments(aug, names)?;
    let fs = fit_first_stage(&tdata, &cfg.first_stage)?;
    let sel = fs.equations[0].support.clone();
    if sel.is_empty() {
        return Ok(None);
    }
    let z = ones_and(linalg::select_columns(tdata.f(), &sel).view());
    let fit = match cfg.fuller {
        None => estimator_2sls(&tdata, z.view())?,
        Some(a) => estimator_kclass(&tdata, z.view(), KClass::Fuller(a), KClassVariance::ManyInstrument)?,
    };
    Ok(Some(HalfFit {
        estimate: fit.estimate.alpha[0],
        se: fit.estimate.se[0],
        selected: sel,
        ridge_penalty: cv.penalty(),
    }))
}

/// Combined `(estimate, se, weight on a)` with `w_a = s_b²/(s_a² + s_b²)`.
/// A half that selected nothing gets weight zero; `None` when neither selected.
pub fn combine_halves(a: Option<&HalfFit>, b: Option<&HalfFit>) -> Option<(f64, f64, f64)> {
    match (a, b) {
        (Some(x), Some(y)) => {
            let (va, vb) = (x.se * x.se, y.se * y.se);
            let w = if va + vb > 0.0 { vb / (va + vb) } else { 0.5 };
            let est = w * x.estimate + (1.0 - w) * y.estimate;
            let var = w * w * va + (1.0 - w) * (1.0 - w) * vb;
            Some((est, var.sqrt(), w))
        }
        (Some(x), None) => Some((x.estimate, x.se, 1.0)),
        (None, Some(y)) => Some((y.estimate, y.se, 0.0)),
        (None, None) => None,
    }
}

/// Ridge fit from one half added as an extra instrument for the other,
/// Lasso selection and 2SLS or Fuller within each half, then an
/// inverse-variance combination.
pub fn estimator_ridge_split(data: &Dataset<f64>, cfg: &RidgeSplitConfig, seed: u64) -> Result<RidgeSplitFit> {
    if data.n() < 8 {
        return Err(Error::InvalidArgument(format!("ridge split needs n >= 8, got {}", data.n())));
    }
    if data.k_e() != 1 {
        return Err(Error::InvalidArgument("ridge split supports one endogenous regressor".into()));
    }
    let (a, b) = split_halves(data.n(), seed);
    let da = data.subset_rows(&a);
    let db = data.subset_rows(&b);
    let fa = ridge_half(&da, &db, cfg).map_err(|e| e.in_half("a"))?;
    let fb = ridge_half(&db, &da, cfg).map_err(|e| e.in_half("b"))?;
    let (estimate, se, weight_a, fallback) = match combine_halves(fa.as_ref(), fb.as_ref()) {
        Some((est, se, w)) => (est, se, w, false),
        None => {
            let j = fallback_single_instrument(data, 0)?;
            let z = ones_and(data.f().slice(s![.., j..j + 1]));
            let fit = estimator_2sls(data, z.view())?;
            (fit.estimate.alpha[0], f64::NAN, f64::NAN, true)
        }
    };
    Ok(RidgeSplitFit {
        estimate,
        se,
        weight_a,
        half_a: fa,
        half_b: fb,
        fallback,
    })
}

/// Appends the first `k` principal-component scores of the centered
/// instruments. Fewer are returned when the rank is smaller.
pub fn augment_principal_components(f: ArrayView2<f64>, k: usize) -> Result<(Array2<f64>, usize)> {
    let (n, p) = f.dim();
    if k > n.min(p) {
        return Err(Error::InvalidArgument(format!("{k} components requested from a {n}x{p} matrix")));
    }
    if k == 0 {
        return Ok((f.to_owned(), 0));
    }
    let (fc, _) = linalg::center_columns(f);
    let cov = linalg::moment(fc.view(), fc.view());
    let (vals, vecs) = linalg::sym_eigen(cov.view());
    let top = vals[p - 1].max(0.0);
    let mut cols = Vec::new();
    for idx in (0..p).rev().take(k) {
        if !(vals[idx] > 1e-10 * top) {
            break;
        }
        let mut v = vecs.column(idx).to_owned();
        let big = (0..p).fold(0, |b, i| if v[i].abs() > v[b].abs() { i } else { b });
        if v[big] < 0.0 {
            v.mapv_inplace(|x| -x);
        }
        cols.push(fc.dot(&v));
    }
    let used = cols.len();
    if used < k {
        log::warn!("only {used} of {k} principal components have positive variance");
    }
    let mut out = Array2::zeros((n, p + used));
    out.slice_mut(s![.., ..p]).assign(&f);
    for (j, c) in cols.iter().enumerate() {
        out.column_mut(p + j).assign(c);
    }
    Ok((out, used))
}
