//! First-stage driver: iterated penalty loadings, one Lasso or Post-Lasso
//! fit per endogenous regressor, and assembly of the estimated optimal
//! instruments `D̂`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lasso::{
    auto_gamma, initial_loadings, post_lasso, refined_loadings, solve_weighted_lasso, LassoOptions,
    LoadingStage, PenaltyPlan, PostLassoOptions,
};
use crate::linalg;
use crate::scalar::Scalar;

/// Relative sup-norm change in loadings below which iteration stops.
pub const LOADING_STOP_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Lasso,
    #[default]
    PostLasso,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GammaRule {
    /// `0.1 / log(p ∨ n)`.
    #[default]
    Auto,
    Fixed(f64),
}

impl GammaRule {
    pub fn resolve(self, n: usize, p: usize) -> f64 {
        match self {
            GammaRule::Auto => auto_gamma(n, p),
            GammaRule::Fixed(g) => g,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FirstStageConfig<T> {
    pub c: f64,
    pub gamma: GammaRule,
    /// Total number of loading stages, the initial one included.
    pub iterations: usize,
    pub method: Method,
    pub lasso: LassoOptions<T>,
}

impl<T: Scalar> Default for FirstStageConfig<T> {
    fn default() -> Self {
        FirstStageConfig {
            c: 1.1,
            gamma: GammaRule::Auto,
            iterations: 15,
            method: Method::PostLasso,
            lasso: LassoOptions::default(),
        }
    }
}

impl<T: Scalar> FirstStageConfig<T> {
    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn with_iterations(mut self, k: usize) -> Self {
        self.iterations = k;
        self
    }
}

/// Fit of one first-stage equation.
#[derive(Debug, Clone, PartialEq)]
pub struct EquationFit<T> {
    /// Coefficients on the original instrument columns (zero for dropped ones).
    pub beta: Array1<T>,
    pub intercept: T,
    /// Lasso support at the final stage, in original column indices.
    pub support: Vec<usize>,
    pub loading_history: Vec<Array1<T>>,
    pub support_history: Vec<Vec<usize>>,
    /// Stages actually run.
    pub stages: usize,
    pub lasso_objective: T,
    /// Single instrument used when Lasso selected nothing.
    pub fallback: Option<usize>,
    pub warnings: Vec<String>,
}

impl<T: Scalar> EquationFit<T> {
    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FirstStageFit<T> {
    pub equations: Vec<EquationFit<T>>,
    /// `n × k_d`: fitted endogenous columns, then the controls verbatim.
    pub dhat: Array2<T>,
    pub method: Method,
    pub lambda: f64,
    pub gamma: f64,
    pub c: f64,
    /// Instruments removed for zero variance.
    pub dropped_instruments: Vec<usize>,
    pub p: usize,
}

impl<T: Scalar> FirstStageFit<T> {
    /// True when some equation selected no instrument.
    pub fn any_empty(&self) -> bool {
        self.equations.iter().any(|e| e.is_empty())
    }

    pub fn used_fallback(&self) -> bool {
        self.equations.iter().any(|e| e.fallback.is_some())
    }
}

/// Runs the iterated-loading Lasso first stage for every endogenous column.
///
/// Empty selections are recorded, not raised; see [`with_fallback`].
pub fn fit_first_stage<T: Scalar>(data: &Dataset<T>, config: &FirstStageConfig<T>) -> Result<FirstStageFit<T>> {
    if config.iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be at least 1".into()));
    }
    let dropped = data.zero_variance_instruments();
    let kept: Vec<usize> = (0..data.p()).filter(|j| !dropped.contains(j)).collect();
    if kept.is_empty() {
        return Err(Error::InvalidArgument("every instrument has zero variance".into()));
    }
    if !dropped.is_empty() {
        log::warn!("dropping zero-variance instruments {dropped:?}");
    }
    let f = if dropped.is_empty() {
        data.f().to_owned()
    } else {
        linalg::select_columns(data.f(), &kept)
    };
    let n = data.n();
    let gamma = config.gamma.resolve(n, kept.len());
    let lambda = crate::lasso::penalty_level(n, kept.len(), data.k_e(), config.c, gamma)?;

    let equations = (0..data.k_e())
        .into_par_iter()
        .map(|l| fit_equation(f.view(), data.d_endog().column(l), &kept, data.p(), lambda, gamma, config))
        .collect::<Result<Vec<_>>>()?;

    let mut fit = FirstStageFit {
        equations,
        dhat: Array2::zeros((n, data.k_d())),
        method: config.method,
        lambda,
        gamma,
        c: config.c,
        dropped_instruments: dropped,
        p: data.p(),
    };
    fit.dhat = predict_optimal_instruments(&fit, data)?;
    Ok(fit)
}

fn fit_equation<T: Scalar>(
    f: ArrayView2<T>,
    d: ArrayView1<T>,
    kept: &[usize],
    p_full: usize,
    lambda: f64,
    gamma: f64,
    config: &FirstStageConfig<T>,
) -> Result<EquationFit<T>> {
    let mut opts = config.lasso.clone();
    let mut warnings = Vec::new();
    let mut loadings = initial_loadings(f, d)?;
    let mut stage = LoadingStage::Initial;
    let mut loading_history = Vec::new();
    let mut support_history = Vec::new();
    let mut stages = 0;

    let (mut beta, mut intercept, mut support, mut objective);
    loop {
        let plan = PenaltyPlan::custom(T::lit(lambda), loadings.clone(), config.c, gamma, stage)?;
        let lf = solve_weighted_lasso(f, d, &plan, &opts)?;
        stages += 1;
        loading_history.push(expand(&loadings, kept, p_full));
        support_history.push(lf.support.iter().map(|&j| kept[j]).collect());
        objective = lf.objective;
        support = lf.support.clone();
        opts.warm_start = Some(lf.beta.clone());
        match config.method {
            Method::Lasso => {
                beta = lf.beta;
                intercept = lf.intercept;
            }
            Method::PostLasso => {
                let pl = post_lasso(f, d, &lf.support, &PostLassoOptions::with_intercept())?;
                warnings.extend(pl.warnings);
                beta = pl.beta;
                intercept = pl.intercept;
            }
        }
        if stages >= config.iterations {
            break;
        }
        let resid = &d - &(f.dot(&beta) + intercept);
        let next = match refined_loadings(f, resid.view()) {
            Ok(g) => g,
            Err(Error::PerfectFit) => {
                let msg = "perfect first-stage fit; loading iterations stopped".to_string();
                log::warn!("{msg}");
                warnings.push(msg);
                break;
            }
            Err(e) => return Err(e),
        };
        if next.iter().any(|&g| !(g > T::zero())) {
            let msg = "refined loadings contain zeros; loading iterations stopped".to_string();
            log::warn!("{msg}");
            warnings.push(msg);
            break;
        }
        let top = loadings.iter().fold(T::zero(), |m, &g| m.max(g.abs()));
        let change = next
            .iter()
            .zip(loadings.iter())
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()));
        if change <= T::lit(LOADING_STOP_TOL) * top {
            break;
        }
        loadings = next;
        stage = LoadingStage::Refined(stages);
    }

    Ok(EquationFit {
        beta: expand(&beta, kept, p_full),
        intercept,
        support: support.iter().map(|&j| kept[j]).collect(),
        loading_history,
        support_history,
        stages,
        lasso_objective: objective,
        fallback: None,
        warnings,
    })
}

fn expand<T: Scalar>(v: &Array1<T>, kept: &[usize], p: usize) -> Array1<T> {
    let mut out = Array1::zeros(p);
    for (k, &j) in kept.iter().enumerate() {
        out[j] = v[k];
    }
    out
}

/// Index of the instrument with the largest absolute sample correlation
/// with endogenous column `l`; ties go to the lower index.
pub fn fallback_single_instrument<T: Scalar>(data: &Dataset<T>, l: usize) -> Result<usize> {
    if l >= data.k_e() {
        return Err(Error::InvalidArgument(format!("endogenous index {l} out of range")));
    }
    let d = data.d_endog().column(l).to_owned();
    let dm = linalg::mean(d.view());
    let dc = d.mapv(|v| v - dm);
    let dss: T = dc.iter().map(|&v| v * v).sum();
    if !(dss > T::zero()) {
        return Err(Error::UndefinedCorrelation(format!("endogenous column {l} is constant")));
    }
    let mut best: Option<(usize, T)> = None;
    for (j, col) in data.f().axis_iter(Axis(1)).enumerate() {
        let m = linalg::mean(col);
        let fc = col.mapv(|v| v - m);
        let fss: T = fc.iter().map(|&v| v * v).sum();
        if !(fss > T::zero()) {
            continue;
        }
        let r = (fc.dot(&dc) / (fss * dss).sqrt()).abs();
        if best.is_none_or(|(_, b)| r > b) {
            best = Some((j, r));
        }
    }
    best.map(|(j, _)| j)
        .ok_or_else(|| Error::UndefinedCorrelation("no instrument has positive variance".into()))
}

/// Replaces every empty equation by the least-squares fit on its single
/// most correlated instrument.
pub fn with_fallback<T: Scalar>(mut fit: FirstStageFit<T>, data: &Dataset<T>) -> Result<FirstStageFit<T>> {
    let mut changed = false;
    for l in 0..fit.equations.len() {
        if !fit.equations[l].is_empty() {
            continue;
        }
        let j = fallback_single_instrument(data, l)?;
        let pl = post_lasso(data.f(), data.d_endog().column(l), &[j], &PostLassoOptions::with_intercept())?;
        let eq = &mut fit.equations[l];
        eq.beta = pl.beta;
        eq.intercept = pl.intercept;
        eq.fallback = Some(j);
        let msg = format!("no instrument selected for endogenous column {l}; using instrument {j} alone");
        log::info!("{msg}");
        eq.warnings.push(msg);
        changed = true;
    }
    if changed {
        fit.dhat = predict_optimal_instruments(&fit, data)?;
    }
    Ok(fit)
}

/// `D̂`: fitted values `f β̂_l + μ̂_l` for each endogenous column, followed by the controls.
pub fn predict_optimal_instruments<T: Scalar>(fit: &FirstStageFit<T>, data: &Dataset<T>) -> Result<Array2<T>> {
    if fit.equations.len() != data.k_e() || fit.p != data.p() {
        return Err(Error::Dimension(format!(
            "first stage has {} equations over {} instruments, data has {} and {}",
            fit.equations.len(),
            fit.p,
            data.k_e(),
            data.p()
        )));
    }
    let mut out = Array2::zeros((data.n(), data.k_d()));
    for (l, eq) in fit.equations.iter().enumerate() {
        out.column_mut(l).assign(&(data.f().dot(&eq.beta) + eq.intercept));
    }
    for (k, col) in data.w().axis_iter(Axis(1)).enumerate() {
        out.column_mut(data.k_e() + k).assign(&col);
    }
    Ok(out)
}
