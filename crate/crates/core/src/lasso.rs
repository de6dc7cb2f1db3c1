//! Weighted Lasso with data-driven penalty level and loadings, and the
//! Post-Lasso least-squares refit.
//!
//! The solver minimizes
//!
//! ```text
//! E_n[(d_i - μ - f_i'β)²] + (λ/n) Σ_j γ_j |β_j|
//! ```
//!
//! by cyclic coordinate descent with covariance updates. The intercept `μ`
//! is unpenalized and handled by centering. Gram columns are computed lazily
//! the first time a coordinate becomes active, so the cost stays
//! proportional to the active set when `p` is large.

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use serde::Serialize;

use crate::dist::normal_quantile;
use crate::error::{Error, Result};
use crate::linalg::{self, PivotedQr};
use crate::scalar::Scalar;

/// Which loading formula produced a [`PenaltyPlan`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadingStage {
    Initial,
    Refined(usize),
    Custom,
}

/// Penalty level and per-instrument loadings for one first-stage equation.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyPlan<T> {
    pub lambda: T,
    pub loadings: Array1<T>,
    pub c: f64,
    pub gamma: f64,
    pub stage: LoadingStage,
}

impl<T: Scalar> PenaltyPlan<T> {
    /// Plan with the rule-based penalty level for `(n, p, k_e, c, gamma)`.
    pub fn from_rule(
        n: usize,
        k_e: usize,
        c: f64,
        gamma: f64,
        loadings: Array1<T>,
        stage: LoadingStage,
    ) -> Result<Self> {
        let lambda = penalty_level(n, loadings.len(), k_e, c, gamma)?;
        Self::custom(T::lit(lambda), loadings, c, gamma, stage)
    }

    /// Plan with an explicit penalty level; `lambda = 0` gives least squares.
    pub fn custom(
        lambda: T,
        loadings: Array1<T>,
        c: f64,
        gamma: f64,
        stage: LoadingStage,
    ) -> Result<Self> {
        if !(lambda >= T::zero()) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("penalty level {lambda} must be finite and >= 0")));
        }
        let bad: Vec<usize> = loadings
            .iter()
            .enumerate()
            .filter(|(_, &g)| !(g > T::zero()) || !g.is_finite())
            .map(|(j, _)| j)
            .collect();
        if !bad.is_empty() {
            return Err(Error::ZeroLoadings(bad));
        }
        Ok(PenaltyPlan {
            lambda,
            loadings,
            c,
            gamma,
            stage,
        })
    }

    pub fn max_loading(&self) -> T {
        self.loadings.iter().fold(T::zero(), |m, &g| m.max(g))
    }
}

/// `γ = 0.1 / log(p ∨ n)`.
pub fn auto_gamma(n: usize, p: usize) -> f64 {
    0.1 / (n.max(p) as f64).ln()
}

/// `λ = 2c√n Φ⁻¹(1 − γ/(2 k_e p))`.
pub fn penalty_level(n: usize, p: usize, k_e: usize, c: f64, gamma: f64) -> Result<f64> {
    if n == 0 || p == 0 || k_e == 0 {
        return Err(Error::InvalidArgument("n, p and k_e must be positive".into()));
    }
    if !(c > 1.0) || !c.is_finite() {
        return Err(Error::InvalidArgument(format!("slack constant c = {c} must exceed 1")));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidArgument(format!("gamma = {gamma} must lie in (0, 1)")));
    }
    let tail = gamma / (2.0 * k_e as f64 * p as f64);
    if tail >= 0.5 {
        return Err(Error::NonPositivePenalty);
    }
    Ok(2.0 * c * (n as f64).sqrt() * normal_quantile(1.0 - tail))
}

fn loadings_from_weights<T: Scalar>(f: ArrayView2<T>, w: &Array1<T>) -> Result<Array1<T>> {
    if f.nrows() != w.len() {
        return Err(Error::Dimension(format!(
            "instruments have {} rows, response has {}",
            f.nrows(),
            w.len()
        )));
    }
    let w2 = w.mapv(|v| v * v);
    let f2 = f.mapv(|v| v * v);
    let g = linalg::moment_vec(f2.view(), w2.view()).mapv(|v| v.sqrt());
    let zero: Vec<usize> = g
        .iter()
        .enumerate()
        .filter(|(_, &v)| !(v > T::zero()))
        .map(|(j, _)| j)
        .collect();
    if !zero.is_empty() {
        return Err(Error::ZeroLoadings(zero));
    }
    Ok(g)
}

/// Initial loadings `γ_j = √E_n[f_j² (d − d̄)²]`.
pub fn initial_loadings<T: Scalar>(f: ArrayView2<T>, d: ArrayView1<T>) -> Result<Array1<T>> {
    let centered = d.mapv(|v| v - linalg::mean(d));
    loadings_from_weights(f, &centered)
}

/// Refined loadings `γ_j = √E_n[f_j² v̂²]` from first-stage residuals.
pub fn refined_loadings<T: Scalar>(f: ArrayView2<T>, residuals: ArrayView1<T>) -> Result<Array1<T>> {
    if residuals.iter().all(|&v| v == T::zero()) {
        return Err(Error::PerfectFit);
    }
    loadings_from_weights(f, &residuals.to_owned())
}

#[derive(Debug, Clone)]
pub struct LassoOptions<T> {
    /// Stop when the largest scaled coefficient change is below `tol · sd(d)`.
    pub tol: T,
    pub max_sweeps: usize,
    pub intercept: bool,
    pub warm_start: Option<Array1<T>>,
    /// Target for the KKT gap; defaults to a small multiple of `(λ/n)·max γ`.
    pub kkt_tol: Option<T>,
    pub record_objective: bool,
}

impl<T: Scalar> Default for LassoOptions<T> {
    fn default() -> Self {
        LassoOptions {
            tol: T::lit(T::SOLVER_TOL),
            max_sweeps: 100_000,
            intercept: true,
            warm_start: None,
            kkt_tol: None,
            record_objective: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit<T> {
    pub beta: Array1<T>,
    pub intercept: T,
    /// `{j : β_j ≠ 0}`, ascending.
    pub support: Vec<usize>,
    pub objective: T,
    pub sweeps: usize,
    pub kkt_gap: T,
    /// Objective after every sweep, when requested.
    pub objective_trace: Vec<T>,
}

impl<T: Scalar> LassoFit<T> {
    pub fn fitted(&self, f: ArrayView2<T>) -> Array1<T> {
        f.dot(&self.beta) + self.intercept
    }

    pub fn residuals(&self, f: ArrayView2<T>, d: ArrayView1<T>) -> Array1<T> {
        &d - &self.fitted(f)
    }
}

/// Largest violation of the Lasso subgradient conditions at `(intercept, beta)`.
///
/// Evaluated from scratch on the residuals, independent of solver state.
pub fn kkt_gap<T: Scalar>(
    f: ArrayView2<T>,
    d: ArrayView1<T>,
    beta: ArrayView1<T>,
    intercept: T,
    lambda: T,
    loadings: ArrayView1<T>,
) -> T {
    let n = T::from_usize_lossy(f.nrows());
    let r = &d - &(f.dot(&beta) + intercept);
    let grad = linalg::moment_vec(f, r.view()).mapv(|v| v * T::lit(2.0));
    let mut gap = T::zero();
    for j in 0..beta.len() {
        let thresh = lambda * loadings[j] / n;
        let v = if beta[j] != T::zero() {
            (grad[j] - beta[j].signum() * thresh).abs()
        } else {
            (grad[j].abs() - thresh).max(T::zero())
        };
        gap = gap.max(v);
    }
    gap
}

fn soft_threshold<T: Scalar>(z: T, t: T) -> T {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        T::zero()
    }
}

struct CdState<'a, T> {
    fc: ArrayView2<'a, T>,
    n: T,
    diag: Array1<T>,
    /// `E_n[f_j r]` for the current iterate.
    grad: Array1<T>,
    thresh: Array1<T>,
    beta: Array1<T>,
    gram_cols: Vec<Option<Array1<T>>>,
}

impl<T: Scalar> CdState<'_, T> {
    fn gram_col(&mut self, k: usize) -> &Array1<T> {
        if self.gram_cols[k].is_none() {
            let col = self.fc.t().dot(&self.fc.column(k)) / self.n;
            self.gram_cols[k] = Some(col);
        }
        self.gram_cols[k].as_ref().unwrap()
    }

    /// One coordinate update; returns the scaled change.
    fn update(&mut self, j: usize) -> T {
        let g = self.diag[j];
        if g == T::zero() {
            return T::zero();
        }
        let old = self.beta[j];
        let z = self.grad[j] + g * old;
        let new = soft_threshold(z, self.thresh[j]) / g;
        if new == old {
            return T::zero();
        }
        let delta = new - old;
        self.beta[j] = new;
        let col = self.gram_col(j).clone();
        self.grad.scaled_add(-delta, &col);
        delta.abs() * g.sqrt()
    }

    fn refresh_grad(&mut self, dc: ArrayView1<T>) {
        let r = &dc - &self.fc.dot(&self.beta);
        self.grad = self.fc.t().dot(&r) / self.n;
    }
}

/// Solves the weighted Lasso for one equation.
pub fn solve_weighted_lasso<T: Scalar>(
    f: ArrayView2<T>,
    d: ArrayView1<T>,
    plan: &PenaltyPlan<T>,
    opts: &LassoOptions<T>,
) -> Result<LassoFit<T>> {
    let (n_obs, p) = f.dim();
    if d.len() != n_obs {
        return Err(Error::Dimension(format!("instruments have {n_obs} rows, response has {}", d.len())));
    }
    if plan.loadings.len() != p {
        return Err(Error::Dimension(format!("{} loadings for {p} instruments", plan.loadings.len())));
    }
    if !linalg::all_finite(f.iter().copied()) || !linalg::all_finite(d.iter().copied()) {
        return Err(Error::NonFinite("lasso input".into()));
    }
    let n = T::from_usize_lossy(n_obs);
    let two = T::lit(2.0);

    let (fc, fmeans, dc, dmean) = if opts.intercept {
        let (fc, fm) = linalg::center_columns(f);
        let dm = linalg::mean(d);
        (fc, fm, d.mapv(|v| v - dm), dm)
    } else {
        (f.to_owned(), Array1::zeros(p), d.to_owned(), T::zero())
    };

    let diag = fc.map_axis(Axis(0), |c| c.iter().map(|&v| v * v).sum::<T>() / n);
    let b = fc.t().dot(&dc) / n;
    let dss = dc.iter().map(|&v| v * v).sum::<T>() / n;
    let scale = if dss > T::zero() { dss.sqrt() } else { T::one() };
    let max_sd = diag.iter().fold(T::zero(), |m, &g| m.max(g.sqrt()));

    let thresh = plan.loadings.mapv(|g| plan.lambda * g / (two * n));
    let kkt_target = opts.kkt_tol.unwrap_or_else(|| {
        let rel = T::lit(T::SOLVER_TOL * 10.0) * plan.lambda / n * plan.max_loading();
        let floor = T::lit(T::SOLVER_TOL * 1e-2) * scale * max_sd.max(T::min_positive_value());
        rel.max(floor)
    });

    let mut st = CdState {
        fc: fc.view(),
        n,
        diag,
        grad: b.clone(),
        thresh,
        beta: Array1::zeros(p),
        gram_cols: vec![None; p],
    };
    if let Some(w) = &opts.warm_start {
        if w.len() != p {
            return Err(Error::Dimension("warm start length".into()));
        }
        st.beta = w.mapv(|v| if v.is_finite() { v } else { T::zero() });
        for j in 0..p {
            if st.diag[j] == T::zero() {
                st.beta[j] = T::zero();
            }
        }
        st.refresh_grad(dc.view());
    }

    let objective = |st: &CdState<'_, T>| -> T {
        let quad = dss - st.beta.dot(&b) - st.beta.dot(&st.grad);
        let pen: T = st
            .beta
            .iter()
            .zip(plan.loadings.iter())
            .map(|(&bj, &g)| g * bj.abs())
            .sum();
        quad + plan.lambda / n * pen
    };

    let mut trace = Vec::new();
    let mut tol_abs = opts.tol * scale;
    let tol_floor = T::epsilon() * T::lit(16.0) * scale;
    let mut sweeps = 0usize;
    let last_gap = loop {
        // full sweep
        let mut max_change = T::zero();
        for j in 0..p {
            max_change = max_change.max(st.update(j));
        }
        sweeps += 1;
        if opts.record_objective {
            trace.push(objective(&st));
        }

        if max_change <= tol_abs {
            st.refresh_grad(dc.view());
            let gap = kkt_gap_centered(&st, plan, n);
            if gap <= kkt_target {
                break gap;
            }
            if tol_abs > tol_floor {
                tol_abs = (tol_abs * T::lit(0.1)).max(tol_floor);
            }
        } else {
            // active-set passes until the support stabilizes
            let active: Vec<usize> = (0..p).filter(|&j| st.beta[j] != T::zero()).collect();
            while sweeps < opts.max_sweeps {
                let mut change = T::zero();
                for &j in &active {
                    change = change.max(st.update(j));
                }
                sweeps += 1;
                if opts.record_objective {
                    trace.push(objective(&st));
                }
                if change <= tol_abs {
                    break;
                }
            }
        }

        if sweeps >= opts.max_sweeps {
            st.refresh_grad(dc.view());
            let gap = kkt_gap_centered(&st, plan, n);
            if gap <= kkt_target {
                break gap;
            }
            return Err(Error::NotConverged {
                sweeps,
                kkt_gap: gap.as_f64(),
                best: st.beta.iter().map(|v| v.as_f64()).collect(),
            });
        }
    };

    let beta = st.beta.clone();
    let intercept = if opts.intercept { dmean - fmeans.dot(&beta) } else { T::zero() };
    let support = (0..p).filter(|&j| beta[j] != T::zero()).collect();
    Ok(LassoFit {
        objective: objective(&st),
        beta,
        intercept,
        support,
        sweeps,
        kkt_gap: last_gap,
        objective_trace: trace,
    })
}

fn kkt_gap_centered<T: Scalar>(st: &CdState<'_, T>, plan: &PenaltyPlan<T>, n: T) -> T {
    let mut gap = T::zero();
    let two = T::lit(2.0);
    for j in 0..st.beta.len() {
        let g = two * st.grad[j];
        let thresh = plan.lambda * plan.loadings[j] / n;
        let v = if st.beta[j] != T::zero() {
            (g - st.beta[j].signum() * thresh).abs()
        } else {
            (g.abs() - thresh).max(T::zero())
        };
        gap = gap.max(v);
    }
    gap
}

#[derive(Debug, Clone, Default)]
pub struct PostLassoOptions {
    pub intercept: bool,
    /// Lasso support, used only to check the augmentation bound.
    pub lasso_support: Option<Vec<usize>>,
}

impl PostLassoOptions {
    pub fn with_intercept() -> Self {
        PostLassoOptions {
            intercept: true,
            lasso_support: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostLassoFit<T> {
    /// Length `p`, zero outside the included set.
    pub beta: Array1<T>,
    pub intercept: T,
    /// Columns actually used, after dropping dependent ones.
    pub included: Vec<usize>,
    pub dropped: Vec<usize>,
    /// `E_n[v̂²]`.
    pub residual_variance: T,
    pub rank: usize,
    pub warnings: Vec<String>,
}

impl<T: Scalar> PostLassoFit<T> {
    pub fn fitted(&self, f: ArrayView2<T>) -> Array1<T> {
        f.dot(&self.beta) + self.intercept
    }

    pub fn residuals(&self, f: ArrayView2<T>, d: ArrayView1<T>) -> Array1<T> {
        &d - &self.fitted(f)
    }
}

/// Least squares of `d` on the instruments in `included` (plus intercept).
pub fn post_lasso<T: Scalar>(
    f: ArrayView2<T>,
    d: ArrayView1<T>,
    included: &[usize],
    opts: &PostLassoOptions,
) -> Result<PostLassoFit<T>> {
    let (n_obs, p) = f.dim();
    if d.len() != n_obs {
        return Err(Error::Dimension(format!("instruments have {n_obs} rows, response has {}", d.len())));
    }
    let mut inc = included.to_vec();
    inc.sort_unstable();
    inc.dedup();
    if let Some(&j) = inc.iter().find(|&&j| j >= p) {
        return Err(Error::InvalidArgument(format!("instrument index {j} out of range (p = {p})")));
    }
    let width = inc.len() + usize::from(opts.intercept);
    if width >= n_obs && !inc.is_empty() {
        return Err(Error::TooManyRegressors {
            included: inc.len(),
            n: n_obs,
        });
    }

    let mut warnings = Vec::new();
    if let Some(sel) = &opts.lasso_support {
        let extra = inc.iter().filter(|j| !sel.contains(j)).count();
        if extra > sel.len().max(1) {
            let msg = format!(
                "{extra} instruments added beyond the {} selected by Lasso exceeds the augmentation bound",
                sel.len()
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }

    let n = T::from_usize_lossy(n_obs);
    let dmean = if opts.intercept { linalg::mean(d) } else { T::zero() };
    let dc = d.mapv(|v| v - dmean);
    let mut beta = Array1::zeros(p);
    let mut dropped = Vec::new();
    let mut used = Vec::new();
    let mut intercept = dmean;

    if !inc.is_empty() {
        let sub = linalg::select_columns(f, &inc);
        let (xc, means) = if opts.intercept {
            linalg::center_columns(sub.view())
        } else {
            (sub.clone(), Array1::zeros(inc.len()))
        };
        let qr = PivotedQr::new(xc.view());
        let coef = qr.solve_ls(dc.view());
        for k in qr.dependent_columns() {
            dropped.push(inc[k]);
        }
        if !dropped.is_empty() {
            let msg = format!("dropped linearly dependent instruments {dropped:?} from the refit");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        for k in qr.independent_columns() {
            used.push(inc[k]);
        }
        for (k, &j) in inc.iter().enumerate() {
            beta[j] = coef[k];
        }
        if opts.intercept {
            intercept = dmean - means.dot(&coef);
        } else {
            intercept = T::zero();
        }
    }

    let r = &d - &(f.dot(&beta) + intercept);
    let residual_variance = r.iter().map(|&v| v * v).sum::<T>() / n;
    Ok(PostLassoFit {
        beta,
        intercept,
        rank: used.len(),
        included: used,
        dropped,
        residual_variance,
        warnings,
    })
}
