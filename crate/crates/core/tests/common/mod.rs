#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sparseiv::data::Dataset;

/// Φ by its Taylor series around zero (accurate for |x| < 9 in f64).
pub fn phi_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    let x2 = x * x;
    let mut k = 0.0;
    while term.abs() > 1e-18 * sum.abs().max(1e-300) {
        k += 1.0;
        term *= -x2 / (2.0 * k) * (2.0 * k - 1.0) / (2.0 * k + 1.0);
        sum += term;
        if k > 2000.0 {
            break;
        }
    }
    0.5 + sum / (2.0 * std::f64::consts::PI).sqrt()
}

/// Φ⁻¹ by bisection on the series CDF.
pub fn quantile_oracle(p: f64) -> f64 {
    let (mut lo, mut hi) = (-9.0f64, 9.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if phi_series(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Gaussian elimination with partial pivoting.
pub fn gauss_solve(a: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut r: Vec<f64> = a.row(i).to_vec();
            r.push(b[i]);
            r
        })
        .collect();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, piv);
        for r in (c + 1)..n {
            let f = m[r][c] / m[c][c];
            for k in c..=n {
                m[r][k] -= f * m[c][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = ((i + 1)..n).map(|k| m[i][k] * x[k]).sum();
        x[i] = (m[i][n] - s) / m[i][i];
    }
    Array1::from(x)
}

pub fn gauss_inverse(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut out = Array2::zeros((n, n));
    for j in 0..n {
        let mut e = Array1::zeros(n);
        e[j] = 1.0;
        out.column_mut(j).assign(&gauss_solve(a, &e));
    }
    out
}

/// Least squares by the normal equations.
pub fn ols(x: &Array2<f64>, y: &Array1<f64>) -> Array1<f64> {
    gauss_solve(&x.t().dot(x), &x.t().dot(y))
}

pub fn normals(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, p), || rng.sample(StandardNormal))
}

/// One endogenous regressor driven by the first `s` instruments, with
/// heteroscedastic errors correlated across equations.
pub fn sparse_iv_data(n: usize, p: usize, s: usize, strength: f64, seed: u64) -> Dataset<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = normals(&mut rng, n, p);
    let mut d = Array1::zeros(n);
    let mut y = Array1::zeros(n);
    for i in 0..n {
        let signal: f64 = (0..s.min(p)).map(|j| f[[i, j]]).sum::<f64>() * strength;
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        let scale = 1.0 + 0.5 * f[[i, 0]].abs();
        let v = a * scale;
        d[i] = signal + v;
        y[i] = 0.5 + d[i] + 0.6 * v + 0.8 * b;
    }
    Dataset::new(y, d.insert_axis(ndarray::Axis(1)), Array2::ones((n, 1)), f).unwrap()
}

pub fn max_abs_diff(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}
