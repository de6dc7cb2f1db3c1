//! Empirical moduli of a Gram matrix and first-stage strength statistics.
//!
//! These quantities are advisory; no estimator consumes them.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;

/// Sub-problem budget for exact restricted eigenvalues.
pub const RE_BUDGET: u128 = 1_000_000;
/// Submatrix budget for exact sparse eigenvalues.
pub const SPARSE_BUDGET: u128 = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EigenMode {
    Exact,
    /// Random draws; results are bounds, not exact values.
    Sampled { draws: usize, seed: u64 },
}

impl EigenMode {
    pub fn sampled(seed: u64) -> Self {
        EigenMode::Sampled { draws: 10_000, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RestrictedEigenvalue {
    /// `κ_C`.
    pub kappa: f64,
    pub kappa_sq: f64,
    /// Minimizing direction found.
    pub delta: Vec<f64>,
    pub support: Vec<usize>,
    /// False for sampled results, which bound `κ_C²` from above.
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparseEigenvalues {
    pub m: usize,
    pub phi_min: f64,
    pub phi_max: f64,
    /// False for sampled results: `phi_min` is then an upper bound and `phi_max` a lower bound.
    pub exact: bool,
}

fn binom(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    acc
}

fn check_square<T: Scalar>(m: ArrayView2<T>) -> Result<usize> {
    let (r, c) = m.dim();
    if r != c || r == 0 {
        return Err(Error::Dimension(format!("Gram matrix is {r}x{c}")));
    }
    if !linalg::all_finite(m.iter().copied()) {
        return Err(Error::NonFinite("Gram matrix".into()));
    }
    Ok(r)
}

/// Lexicographic `k`-subsets of `0..n`.
fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    if k > n {
        return out;
    }
    loop {
        out.push(cur.clone());
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if cur[i] < n - k + i {
                cur[i] += 1;
                for j in i + 1..k {
                    cur[j] = cur[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Euclidean projection onto `{u ≥ 0, Σu = z}`.
fn project_simplex(v: &mut [f64], z: f64) {
    let mut s: Vec<f64> = v.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &x) in s.iter().enumerate() {
        cum += x;
        let t = (cum - z) / (i as f64 + 1.0);
        if x - t > 0.0 {
            theta = t;
        }
    }
    for x in v.iter_mut() {
        *x = (*x - theta).max(0.0);
    }
}

/// Euclidean projection onto `{‖u‖₁ ≤ z}`.
fn project_l1_ball(v: &mut [f64], z: f64) {
    if v.iter().map(|x| x.abs()).sum::<f64>() <= z {
        return;
    }
    if z <= 0.0 {
        v.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut a: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    project_simplex(&mut a, z);
    for (x, &m) in v.iter_mut().zip(a.iter()) {
        *x = x.signum() * m;
    }
}

/// `min δ'Mδ` over `σ∘δ_T ≥ 0`, `Σ σ_jδ_j = s`, `‖δ_{T^c}‖₁ ≤ C s`, by
/// accelerated projected gradient. Returns `(value / s, δ)`.
fn orthant_subproblem(m: &Array2<f64>, lip: f64, t: &[usize], signs: &[f64], c: f64, s: f64) -> (f64, Vec<f64>) {
    let p = m.nrows();
    let rest: Vec<usize> = (0..p).filter(|j| !t.contains(j)).collect();
    let mut delta = vec![0.0; p];
    let start = s / t.len() as f64;
    for (k, &j) in t.iter().enumerate() {
        delta[j] = signs[k] * start;
    }
    let project = |x: &mut Vec<f64>| {
        let mut u: Vec<f64> = t.iter().zip(signs).map(|(&j, &sg)| sg * x[j]).collect();
        project_simplex(&mut u, s);
        for (k, &j) in t.iter().enumerate() {
            x[j] = signs[k] * u[k];
        }
        let mut w: Vec<f64> = rest.iter().map(|&j| x[j]).collect();
        project_l1_ball(&mut w, c * s);
        for (k, &j) in rest.iter().enumerate() {
            x[j] = w[k];
        }
    };
    let quad = |x: &[f64]| -> f64 {
        let xv = ArrayView1::from(x);
        xv.dot(&m.dot(&xv))
    };
    if lip <= 0.0 {
        return (0.0, delta);
    }
    let step = 1.0 / lip;
    let mut y = delta.clone();
    let mut tk = 1.0f64;
    let mut best = quad(&delta);
    let mut best_x = delta.clone();
    for _ in 0..50_000 {
        let yv = ArrayView1::from(&y[..]);
        let g = m.dot(&yv) * 2.0;
        let mut next: Vec<f64> = y.iter().zip(g.iter()).map(|(&a, &b)| a - step * b).collect();
        project(&mut next);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * tk * tk).sqrt());
        let mom = (tk - 1.0) / t_next;
        let mv: f64 = next.iter().zip(delta.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let val = quad(&next);
        if val < best {
            best = val;
            best_x = next.clone();
        }
        // restart momentum when the objective goes up
        if val > quad(&delta) {
            tk = 1.0;
            y = delta.clone();
        } else {
            y = next.iter().zip(delta.iter()).map(|(&a, &b)| a + mom * (a - b)).collect();
            tk = t_next;
        }
        delta = next;
        if mv <= 1e-12 * s {
            break;
        }
    }
    (best / s, best_x)
}

/// `κ_C² = min_{|T| ≤ s} min_{δ ∈ Δ_{C,T}} s δ'Mδ / ‖δ_T‖₁²`.
///
/// Exact mode enumerates supports of size `min(s, p)` (smaller supports
/// cannot give a smaller value) and sign patterns up to a global flip.
/// With `support` given, only that `T` is used.
pub fn restricted_eigenvalue<T: Scalar>(
    m: ArrayView2<T>,
    s: usize,
    c: f64,
    mode: EigenMode,
    support: Option<&[usize]>,
) -> Result<RestrictedEigenvalue> {
    let p = check_square(m)?;
    if s == 0 {
        return Err(Error::InvalidArgument("sparsity s must be positive".into()));
    }
    if !(c >= 0.0) || !c.is_finite() {
        return Err(Error::InvalidArgument(format!("cone constant C = {c} must be nonnegative")));
    }
    if let Some(t) = support {
        if t.is_empty() || t.len() > s || t.iter().any(|&j| j >= p) {
            return Err(Error::InvalidArgument("support must be nonempty, of size <= s, within range".into()));
        }
    }
    let mf = m.mapv(|v| v.as_f64());
    let sz = s.min(p);
    match mode {
        EigenMode::Exact => {
            let needed = match support {
                Some(t) => 1u128 << t.len().min(100),
                None => (0..=sz).fold(0u128, |acc, k| acc.saturating_add(binom(p, k).saturating_mul(1u128 << k.min(100)))),
            };
            if needed > RE_BUDGET {
                return Err(Error::BudgetExceeded { needed, budget: RE_BUDGET });
            }
            let supports = match support {
                Some(t) => {
                    let mut t = t.to_vec();
                    t.sort_unstable();
                    vec![t]
                }
                None => subsets(p, sz),
            };
            let lip = 2.0 * linalg::sym_eigen(mf.view()).0.iter().fold(0.0f64, |a, &v| a.max(v));
            let sf = s as f64;
            let best = supports
                .par_iter()
                .map(|t| {
                    let k = t.len();
                    let mut local: Option<(f64, Vec<f64>)> = None;
                    for pattern in 0..(1usize << (k - 1)) {
                        let signs: Vec<f64> = (0..k)
                            .map(|i| if i > 0 && (pattern >> (i - 1)) & 1 == 1 { -1.0 } else { 1.0 })
                            .collect();
                        let (v, d) = orthant_subproblem(&mf, lip, t, &signs, c, k as f64);
                        // value above is for normalization ‖δ_T‖₁ = |T|; rescale to s
                        let v = v * sf / k as f64;
                        if local.as_ref().is_none_or(|(b, _)| v < *b) {
                            local = Some((v, d));
                        }
                    }
                    let (v, d) = local.expect("at least one sign pattern");
                    (v, d, t.clone())
                })
                .reduce_with(|a, b| if b.0 < a.0 || (b.0 == a.0 && b.2 < a.2) { b } else { a })
                .expect("at least one support");
            let kappa_sq = best.0.max(0.0);
            Ok(RestrictedEigenvalue {
                kappa: kappa_sq.sqrt(),
                kappa_sq,
                delta: best.1,
                support: best.2,
                exact: true,
            })
        }
        EigenMode::Sampled { draws, seed } => {
            if draws == 0 {
                return Err(Error::InvalidArgument("sampled mode needs at least one draw".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut best = (f64::INFINITY, Vec::new(), Vec::new());
            for _ in 0..draws {
                let t: Vec<usize> = match support {
                    Some(t) => t.to_vec(),
                    None => {
                        let mut idx = rand::seq::index::sample(&mut rng, p, sz).into_vec();
                        idx.sort_unstable();
                        idx
                    }
                };
                let mut delta = vec![0.0; p];
                for &j in &t {
                    delta[j] = rng.sample::<f64, _>(StandardNormal);
                }
                let l1_t: f64 = t.iter().map(|&j| delta[j].abs()).sum();
                if l1_t == 0.0 {
                    continue;
                }
                let rest: Vec<usize> = (0..p).filter(|j| !t.contains(j)).collect();
                if !rest.is_empty() && rng.random_bool(0.5) {
                    let mut w: Vec<f64> = rest.iter().map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                    let l1w: f64 = w.iter().map(|x| x.abs()).sum();
                    let radius = rng.random::<f64>() * c * l1_t;
                    if l1w > 0.0 {
                        for (k, &j) in rest.iter().enumerate() {
                            w[k] *= radius / l1w;
                            delta[j] = w[k];
                        }
                    }
                }
                let dv = ArrayView1::from(&delta[..]);
                let v = s as f64 * dv.dot(&mf.dot(&dv)) / (l1_t * l1_t);
                if v < best.0 {
                    best = (v, delta, t);
                }
            }
            let kappa_sq = best.0.max(0.0);
            Ok(RestrictedEigenvalue {
                kappa: kappa_sq.sqrt(),
                kappa_sq,
                delta: best.1,
                support: best.2,
                exact: false,
            })
        }
    }
}

/// `(φ_min(m), φ_max(m))`: extreme values of `δ'Mδ` over `m`-sparse unit vectors.
pub fn sparse_eigenvalues<T: Scalar>(mat: ArrayView2<T>, m: usize, mode: EigenMode) -> Result<SparseEigenvalues> {
    let p = check_square(mat)?;
    if m == 0 || m > p {
        return Err(Error::InvalidArgument(format!("sparsity m = {m} must lie in 1..={p}")));
    }
    let mf = mat.mapv(|v| v.as_f64());
    let extremes = |t: &Vec<usize>| {
        let sub = mf.select(ndarray::Axis(0), t).select(ndarray::Axis(1), t);
        let vals = linalg::sym_eigen(sub.view()).0;
        (vals[0], vals[vals.len() - 1])
    };
    let fold = |a: (f64, f64), b: (f64, f64)| (a.0.min(b.0), a.1.max(b.1));
    let (lo, hi, exact) = match mode {
        EigenMode::Exact => {
            let needed = binom(p, m);
            if needed > SPARSE_BUDGET {
                return Err(Error::BudgetExceeded { needed, budget: SPARSE_BUDGET });
            }
            let (lo, hi) = subsets(p, m)
                .par_iter()
                .map(extremes)
                .reduce(|| (f64::INFINITY, f64::NEG_INFINITY), fold);
            (lo, hi, true)
        }
        EigenMode::Sampled { draws, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut acc = (f64::INFINITY, f64::NEG_INFINITY);
            for _ in 0..draws.max(1) {
                let mut t = rand::seq::index::sample(&mut rng, p, m).into_vec();
                t.sort_unstable();
                acc = fold(acc, extremes(&t));
            }
            (acc.0, acc.1, false)
        }
    };
    Ok(SparseEigenvalues {
        m,
        phi_min: lo.max(0.0),
        phi_max: hi.max(lo.max(0.0)),
        exact,
    })
}

/// First-stage Wald statistic `W = Π̂'(Z'Z)Π̂ / σ̂_v²` and `F = W / dim Π̂`.
pub fn first_stage_wald<T: Scalar>(pi_hat: ArrayView1<T>, z: ArrayView2<T>, sigma2_v: T) -> Result<(T, T)> {
    if z.ncols() != pi_hat.len() || z.ncols() == 0 {
        return Err(Error::Dimension(format!("{} coefficients for {} instruments", pi_hat.len(), z.ncols())));
    }
    if !(sigma2_v > T::zero()) {
        return Err(Error::InvalidArgument(format!("first-stage variance {sigma2_v} must be positive")));
    }
    let zp = z.dot(&pi_hat);
    let w = zp.dot(&zp) / sigma2_v;
    Ok((w, w / T::from_usize_lossy(z.ncols())))
}

/// `μ² = n Π'Σ_Z Π / σ_v²`.
pub fn concentration_parameter<T: Scalar>(pi: ArrayView1<T>, sigma_z: ArrayView2<T>, sigma2_v: T, n: usize) -> Result<T> {
    if sigma_z.nrows() != pi.len() || sigma_z.ncols() != pi.len() {
        return Err(Error::Dimension(format!(
            "Σ_Z is {}x{}, Π has {} entries",
            sigma_z.nrows(),
            sigma_z.ncols(),
            pi.len()
        )));
    }
    if !(sigma2_v > T::zero()) {
        return Err(Error::InvalidArgument(format!("first-stage variance {sigma2_v} must be positive")));
    }
    Ok(T::from_usize_lossy(n) * pi.dot(&sigma_z.dot(&pi)) / sigma2_v)
}

/// `E_n[f f']`.
pub fn gram<T: Scalar>(f: ArrayView2<T>) -> Array2<T> {
    linalg::moment(f, f)
}
