//! Sup-score statistic and grid-inverted confidence regions that remain
//! valid under weak identification and with more instruments than
//! observations.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{normalize_instruments, Dataset, PartialledData};
use crate::dist::{normal_quantile, normal_sf};
use crate::error::{Error, Result};
use crate::lasso::{solve_weighted_lasso, LassoOptions, LoadingStage, PenaltyPlan};
use crate::linalg;
use crate::scalar::Scalar;

/// Relative distance to the critical value under which a grid point is
/// reported as near the region boundary.
pub const NEAR_BOUNDARY_TOL: f64 = 1e-9;

/// Partialled, normalized data for sup-score inference.
#[derive(Debug, Clone)]
pub struct SupScoreProblem<T> {
    pub y: Array1<T>,
    pub d_endog: Array2<T>,
    /// Instruments with unit second moment.
    pub f: Array2<T>,
    pub c: f64,
    pub gamma: f64,
    /// Instruments removed because nothing was left after partialling.
    pub dropped: Vec<usize>,
    /// Original indices of the columns of `f`.
    pub kept: Vec<usize>,
}

impl<T: Scalar> SupScoreProblem<T> {
    /// Partials out the controls, drops instruments left with no variation
    /// and normalizes the rest.
    pub fn from_dataset(data: &Dataset<T>, c: f64, gamma: f64) -> Result<Self> {
        let pd = PartialledData::from_dataset(data)?;
        let n = T::from_usize_lossy(data.n());
        let tiny = T::epsilon() * T::lit(1e3);
        let mut kept = Vec::new();
        let mut dropped = Vec::new();
        for j in 0..data.p() {
            let raw = data.f().column(j).iter().map(|&v| v * v).sum::<T>() / n;
            let left = pd.f.column(j).iter().map(|&v| v * v).sum::<T>() / n;
            if left > tiny * tiny * raw && left > T::zero() {
                kept.push(j);
            } else {
                dropped.push(j);
            }
        }
        if kept.is_empty() {
            return Err(Error::InvalidArgument("no instrument varies after partialling out controls".into()));
        }
        if !dropped.is_empty() {
            log::warn!("dropping instruments {dropped:?}: no variation left after partialling out controls");
        }
        let (f, _) = normalize_instruments(linalg::select_columns(pd.f.view(), &kept).view())?;
        Self::new(pd.y, pd.d_endog, f, c, gamma).map(|mut s| {
            s.dropped = dropped;
            s.kept = kept;
            s
        })
    }

    /// Problem from already partialled data; `f` is normalized here.
    pub fn new(y: Array1<T>, d_endog: Array2<T>, f: Array2<T>, c: f64, gamma: f64) -> Result<Self> {
        let n = y.len();
        if d_endog.nrows() != n || f.nrows() != n {
            return Err(Error::Dimension("sup-score inputs must share rows".into()));
        }
        if !(c > 1.0) {
            return Err(Error::InvalidArgument(format!("slack constant c = {c} must exceed 1")));
        }
        let (f, _) = normalize_instruments(f.view())?;
        let p = f.ncols();
        Ok(SupScoreProblem {
            y,
            d_endog,
            f,
            c,
            gamma,
            dropped: Vec::new(),
            kept: (0..p).collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.f.ncols()
    }

    pub fn k_e(&self) -> usize {
        self.d_endog.ncols()
    }

    pub fn critical_value(&self) -> Result<f64> {
        critical_value(self.n(), self.p(), self.gamma, self.c)
    }

    fn residual(&self, a: &[T]) -> Result<Array1<T>> {
        if a.len() != self.k_e() {
            return Err(Error::Dimension(format!("tested point has {} entries, expected {}", a.len(), self.k_e())));
        }
        let a = ArrayView1::from(a);
        let r = &self.y - &self.d_endog.dot(&a);
        if r.iter().all(|&v| v == T::zero()) {
            return Err(Error::DegenerateResidual);
        }
        Ok(r)
    }

    /// Per-instrument numerators `|Σ r f_j|` and denominators `√E_n[r² f_j²]`.
    fn score_parts(&self, r: &Array1<T>) -> (Array1<T>, Array1<T>) {
        let n = T::from_usize_lossy(self.n());
        let num = self.f.t().dot(r).mapv(|v| v.abs());
        let r2 = r.mapv(|v| v * v);
        let den = self
            .f
            .axis_iter(Axis(1))
            .map(|col| (col.iter().zip(r2.iter()).map(|(&f, &q)| f * f * q).sum::<T>() / n).sqrt())
            .collect();
        (num, den)
    }
}

/// `Λ_a = max_j |n E_n[r f_j]| / √E_n[r² f_j²]` with `r = ỹ − d̃'a`.
pub fn sup_score<T: Scalar>(problem: &SupScoreProblem<T>, a: &[T]) -> Result<T> {
    let r = problem.residual(a)?;
    let (num, den) = problem.score_parts(&r);
    let mut best = T::zero();
    let mut skipped = 0usize;
    for (&u, &l) in num.iter().zip(den.iter()) {
        if l == T::zero() {
            skipped += 1;
            continue;
        }
        best = best.max(u / l);
    }
    if skipped > 0 {
        log::warn!("{skipped} instruments have zero score and zero scale at the tested point");
    }
    Ok(best)
}

/// `Λ(1−γ) = c√n Φ⁻¹(1 − γ/(2p))`.
pub fn critical_value(n: usize, p: usize, gamma: f64, c: f64) -> Result<f64> {
    if n == 0 || p == 0 {
        return Err(Error::InvalidArgument("n and p must be positive".into()));
    }
    if !(c > 1.0) || !c.is_finite() {
        return Err(Error::InvalidArgument(format!("slack constant c = {c} must exceed 1")));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidArgument(format!("gamma = {gamma} must lie in (0, 1)")));
    }
    let tail = gamma / (2.0 * p as f64);
    if tail > 0.5 {
        return Err(Error::NonPositivePenalty);
    }
    Ok(c * (n as f64).sqrt() * normal_quantile(1.0 - tail).max(0.0))
}

/// Smallest `γ` at which `Λ_a` would be rejected: `min(1, 2p(1 − Φ(Λ_a/(c√n))))`.
pub fn sup_score_pvalue(stat: f64, n: usize, p: usize, c: f64) -> f64 {
    (2.0 * p as f64 * normal_sf(stat / (c * (n as f64).sqrt()))).min(1.0)
}

/// Finite parameter grid for region inversion; every point has the same dimension.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Grid {
    points: Vec<Vec<f64>>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Grid {
    /// Equispaced points `lo, lo + step, …` up to `hi` inclusive (within rounding).
    pub fn linspace(lo: f64, hi: f64, step: f64) -> Result<Grid> {
        Grid::product(&[axis_points(lo, hi, step)?])
    }

    /// `count` equispaced points from `lo` to `hi`.
    pub fn linspace_n(lo: f64, hi: f64, count: usize) -> Result<Grid> {
        if count == 0 || !(lo <= hi) {
            return Err(Error::EmptyGrid);
        }
        let pts = if count == 1 {
            vec![lo]
        } else {
            (0..count)
                .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
                .collect()
        };
        Grid::product(&[pts])
    }

    /// Cartesian product of per-coordinate axes, first axis varying slowest.
    pub fn product(axes: &[Vec<f64>]) -> Result<Grid> {
        if axes.is_empty() || axes.iter().any(|a| a.is_empty()) {
            return Err(Error::EmptyGrid);
        }
        if axes.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid".into()));
        }
        let mut points: Vec<Vec<f64>> = vec![Vec::new()];
        for axis in axes {
            points = points
                .into_iter()
                .flat_map(|prefix| {
                    axis.iter().map(move |&v| {
                        let mut p = prefix.clone();
                        p.push(v);
                        p
                    })
                })
                .collect();
        }
        Ok(Grid {
            points,
            lower: axes.iter().map(|a| a.iter().copied().fold(f64::INFINITY, f64::min)).collect(),
            upper: axes.iter().map(|a| a.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect(),
        })
    }

    /// Grid from explicit points.
    pub fn from_points(points: Vec<Vec<f64>>) -> Result<Grid> {
        let dim = points.first().ok_or(Error::EmptyGrid)?.len();
        if dim == 0 || points.iter().any(|p| p.len() != dim) {
            return Err(Error::Dimension("grid points must share a positive dimension".into()));
        }
        let lower = (0..dim).map(|k| points.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min)).collect();
        let upper = (0..dim).map(|k| points.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max)).collect();
        Ok(Grid { points, lower, upper })
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    fn on_edge(&self, p: &[f64]) -> bool {
        p.iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .any(|(&v, (&lo, &hi))| v == lo || v == hi)
    }
}

fn axis_points(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !lo.is_finite() || !hi.is_finite() || !step.is_finite() || lo > hi {
        return Err(Error::InvalidArgument(format!("grid {lo}:{hi}:{step} is malformed")));
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    if count > 10_000_000 {
        return Err(Error::InvalidArgument(format!("grid {lo}:{hi}:{step} has too many points")));
    }
    Ok((0..count).map(|i| lo + step * i as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfidenceRegion {
    pub points: Vec<Vec<f64>>,
    /// `Λ_a` at every grid point.
    pub stats: Vec<f64>,
    pub accepted: Vec<bool>,
    pub critical_value: f64,
    /// Coverage level `1 − γ`.
    pub level: f64,
    /// An accepted point lies on the edge of the grid; widen it.
    pub touches_boundary: bool,
    /// Grid indices with `|Λ_a − Λ(1−γ)| < 1e-9 · Λ(1−γ)`.
    pub near_boundary: Vec<usize>,
}

impl ConfidenceRegion {
    pub fn accepted_points(&self) -> Vec<Vec<f64>> {
        self.points
            .iter()
            .zip(self.accepted.iter())
            .filter(|(_, &a)| a)
            .map(|(p, _)| p.clone())
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        !self.accepted.iter().any(|&a| a)
    }

    /// Smallest and largest accepted value of coordinate `k`.
    pub fn bounds(&self, k: usize) -> Option<(f64, f64)> {
        let acc = self.accepted_points();
        if acc.is_empty() {
            return None;
        }
        Some(acc.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[k]), hi.max(p[k]))))
    }
}

fn to_point<T: Scalar>(p: &[f64]) -> Vec<T> {
    p.iter().map(|&v| T::lit(v)).collect()
}

fn assemble(grid: &Grid, stats: Vec<f64>, accepted: Vec<bool>, crit: f64, gamma: f64) -> ConfidenceRegion {
    let near_boundary = stats
        .iter()
        .enumerate()
        .filter(|(_, &s)| (s - crit).abs() < NEAR_BOUNDARY_TOL * crit)
        .map(|(i, _)| i)
        .collect();
    let touches_boundary = grid
        .points()
        .iter()
        .zip(accepted.iter())
        .any(|(p, &a)| a && grid.on_edge(p));
    ConfidenceRegion {
        points: grid.points().to_vec(),
        stats,
        accepted,
        critical_value: crit,
        level: 1.0 - gamma,
        touches_boundary,
        near_boundary,
    }
}

fn check_grid<T: Scalar>(problem: &SupScoreProblem<T>, grid: &Grid) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if grid.dim() != problem.k_e() {
        return Err(Error::Dimension(format!(
            "grid has dimension {}, model has {} endogenous regressors",
            grid.dim(),
            problem.k_e()
        )));
    }
    Ok(())
}

/// Keeps every grid point with `Λ_a ≤ Λ(1−γ)`.
pub fn invert_region<T: Scalar>(problem: &SupScoreProblem<T>, grid: &Grid) -> Result<ConfidenceRegion> {
    check_grid(problem, grid)?;
    let crit = problem.critical_value()?;
    let stats = grid
        .points()
        .par_iter()
        .map(|p| sup_score(problem, &to_point::<T>(p)).map(|s| s.as_f64()))
        .collect::<Result<Vec<f64>>>()?;
    let accepted = stats.iter().map(|&s| s <= crit).collect();
    Ok(assemble(grid, stats, accepted, crit, problem.gamma))
}

/// Keeps every grid point where the weighted Lasso of `r_a` on the
/// instruments, with `λ = 2Λ(1−γ)` and loadings `√E_n[r_a² f_j²]`, is zero.
pub fn inverse_lasso_region<T: Scalar>(problem: &SupScoreProblem<T>, grid: &Grid) -> Result<ConfidenceRegion> {
    check_grid(problem, grid)?;
    let crit = problem.critical_value()?;
    let lambda = T::lit(2.0 * crit);
    let opts = LassoOptions {
        intercept: false,
        ..LassoOptions::default()
    };
    let results = grid
        .points()
        .par_iter()
        .map(|p| -> Result<(f64, bool)> {
            let a = to_point::<T>(p);
            let stat = sup_score(problem, &a)?;
            let r = problem.residual(&a)?;
            let (_, den) = problem.score_parts(&r);
            let live: Vec<usize> = (0..problem.p()).filter(|&j| den[j] > T::zero()).collect();
            let f = linalg::select_columns(problem.f.view(), &live);
            let loadings = Array1::from_iter(live.iter().map(|&j| den[j]));
            let plan = PenaltyPlan::custom(lambda, loadings, problem.c, problem.gamma, LoadingStage::Custom)?;
            let fit = solve_weighted_lasso(f.view(), r.view(), &plan, &opts)?;
            Ok((stat.as_f64(), fit.support.is_empty()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (stats, accepted) = results.into_iter().unzip();
    Ok(assemble(grid, stats, accepted, crit, problem.gamma))
}
