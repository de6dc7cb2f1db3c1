//! Dense linear algebra over [`Scalar`]: empirical moments, column-pivoted
//! Householder QR, LU solves, Cholesky and a cyclic Jacobi eigensolver.
//!
//! Sizes in this crate are moderate (hundreds of columns at most), so the
//! routines favour clarity and determinism over blocking.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `E_n[a_i b_i']`, rows are observations.
pub fn moment<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>) -> Array2<T> {
    let n = T::from_usize_lossy(a.nrows());
    a.t().dot(&b) / n
}

/// `E_n[a_i v_i]`.
pub fn moment_vec<T: Scalar>(a: ArrayView2<T>, v: ArrayView1<T>) -> Array1<T> {
    let n = T::from_usize_lossy(a.nrows());
    a.t().dot(&v) / n
}

pub fn mean<T: Scalar>(v: ArrayView1<T>) -> T {
    if v.is_empty() {
        return T::zero();
    }
    v.sum() / T::from_usize_lossy(v.len())
}

pub fn column_means<T: Scalar>(a: ArrayView2<T>) -> Array1<T> {
    if a.nrows() == 0 {
        return Array1::zeros(a.ncols());
    }
    a.sum_axis(Axis(0)) / T::from_usize_lossy(a.nrows())
}

/// Returns the column-centred copy of `a` and the column means.
pub fn center_columns<T: Scalar>(a: ArrayView2<T>) -> (Array2<T>, Array1<T>) {
    let means = column_means(a);
    let centered = &a - &means.view().insert_axis(Axis(0));
    (centered, means)
}

pub fn norm2<T: Scalar>(v: ArrayView1<T>) -> T {
    // scaled accumulation avoids overflow for large entries
    let scale = v.iter().fold(T::zero(), |m, &x| m.max(x.abs()));
    if scale == T::zero() {
        return T::zero();
    }
    let ss: T = v.iter().map(|&x| (x / scale) * (x / scale)).sum();
    scale * ss.sqrt()
}

pub fn all_finite<T: Scalar>(a: impl IntoIterator<Item = T>) -> bool {
    a.into_iter().all(|x| x.is_finite())
}

/// Horizontal concatenation; either side may have zero columns.
pub fn hstack<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>) -> Array2<T> {
    assert_eq!(a.nrows(), b.nrows(), "hstack row mismatch");
    let mut out = Array2::zeros((a.nrows(), a.ncols() + b.ncols()));
    out.slice_mut(s![.., ..a.ncols()]).assign(&a);
    out.slice_mut(s![.., a.ncols()..]).assign(&b);
    out
}

/// Column subset in the given order.
pub fn select_columns<T: Scalar>(a: ArrayView2<T>, cols: &[usize]) -> Array2<T> {
    a.select(Axis(1), cols)
}

pub fn select_rows<T: Scalar>(a: ArrayView2<T>, rows: &[usize]) -> Array2<T> {
    a.select(Axis(0), rows)
}

/// Column-pivoted Householder QR, `A P = Q R`.
///
/// Columns whose remaining norm falls below `rel_tol · max_j ‖a_j‖` are
/// treated as dependent: they are pivoted to the end and excluded from the
/// basic least-squares solution.
#[derive(Debug, Clone)]
pub struct PivotedQr<T> {
    qr: Array2<T>,
    tau: Vec<T>,
    perm: Vec<usize>,
    rank: usize,
}

impl<T: Scalar> PivotedQr<T> {
    pub fn new(a: ArrayView2<T>) -> Self {
        Self::with_tol(a, T::lit(T::RANK_TOL))
    }

    pub fn with_tol(a: ArrayView2<T>, rel_tol: T) -> Self {
        let (n, m) = a.dim();
        let mut qr = a.to_owned();
        let mut perm: Vec<usize> = (0..m).collect();
        let max_norm = (0..m)
            .map(|j| norm2(a.column(j)))
            .fold(T::zero(), |acc, x| acc.max(x));
        let thresh = rel_tol * max_norm;
        let mut tau = Vec::with_capacity(n.min(m));
        let mut rank = 0;

        for k in 0..n.min(m) {
            let mut best = k;
            let mut best_norm = T::neg_infinity();
            for j in k..m {
                let nj = norm2(qr.slice(s![k.., j]));
                if nj > best_norm {
                    best = j;
                    best_norm = nj;
                }
            }
            if best_norm <= thresh || best_norm == T::zero() {
                break;
            }
            if best != k {
                for i in 0..n {
                    qr.swap([i, k], [i, best]);
                }
                perm.swap(k, best);
            }

            let x0 = qr[[k, k]];
            let beta = if x0 >= T::zero() { -best_norm } else { best_norm };
            let t = (beta - x0) / beta;
            let denom = x0 - beta;
            for i in (k + 1)..n {
                qr[[i, k]] = qr[[i, k]] / denom;
            }
            qr[[k, k]] = beta;

            for j in (k + 1)..m {
                let mut w = qr[[k, j]];
                for i in (k + 1)..n {
                    w += qr[[i, k]] * qr[[i, j]];
                }
                w *= t;
                qr[[k, j]] -= w;
                for i in (k + 1)..n {
                    let vi = qr[[i, k]];
                    qr[[i, j]] -= w * vi;
                }
            }
            tau.push(t);
            rank += 1;
        }

        PivotedQr { qr, tau, perm, rank }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn ncols(&self) -> usize {
        self.perm.len()
    }

    /// Original indices of columns excluded from the basis, ascending.
    pub fn dependent_columns(&self) -> Vec<usize> {
        let mut dep = self.perm[self.rank..].to_vec();
        dep.sort_unstable();
        dep
    }

    /// Original indices of basis columns, ascending.
    pub fn independent_columns(&self) -> Vec<usize> {
        let mut ind = self.perm[..self.rank].to_vec();
        ind.sort_unstable();
        ind
    }

    fn apply_qt(&self, b: &mut Array1<T>) {
        let n = b.len();
        for k in 0..self.rank {
            let mut w = b[k];
            for i in (k + 1)..n {
                w += self.qr[[i, k]] * b[i];
            }
            w *= self.tau[k];
            b[k] -= w;
            for i in (k + 1)..n {
                b[i] -= w * self.qr[[i, k]];
            }
        }
    }

    fn apply_q(&self, b: &mut Array1<T>) {
        let n = b.len();
        for k in (0..self.rank).rev() {
            let mut w = b[k];
            for i in (k + 1)..n {
                w += self.qr[[i, k]] * b[i];
            }
            w *= self.tau[k];
            b[k] -= w;
            for i in (k + 1)..n {
                b[i] -= w * self.qr[[i, k]];
            }
        }
    }

    /// Basic least-squares solution: zero on dependent columns.
    pub fn solve_ls(&self, b: ArrayView1<T>) -> Array1<T> {
        let mut c = b.to_owned();
        self.apply_qt(&mut c);
        let r = self.rank;
        let mut z = vec![T::zero(); r];
        for k in (0..r).rev() {
            let mut acc = c[k];
            for j in (k + 1)..r {
                acc -= self.qr[[k, j]] * z[j];
            }
            z[k] = acc / self.qr[[k, k]];
        }
        let mut x = Array1::zeros(self.perm.len());
        for k in 0..r {
            x[self.perm[k]] = z[k];
        }
        x
    }

    /// `b` minus its orthogonal projection onto the basis columns.
    pub fn residual(&self, b: ArrayView1<T>) -> Array1<T> {
        let mut c = b.to_owned();
        self.apply_qt(&mut c);
        for k in 0..self.rank {
            c[k] = T::zero();
        }
        self.apply_q(&mut c);
        c
    }

    /// Orthogonal projection of `b` onto the basis columns.
    pub fn project(&self, b: ArrayView1<T>) -> Array1<T> {
        let res = self.residual(b);
        &b - &res
    }
}

/// Solves `A X = B` by LU with partial pivoting.
pub fn lu_solve<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>) -> Result<Array2<T>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return Err(Error::Dimension(format!(
            "lu_solve: A is {}x{}, B has {} rows",
            a.nrows(),
            a.ncols(),
            b.nrows()
        )));
    }
    let mut lu = a.to_owned();
    let mut x = b.to_owned();
    let scale = lu.iter().fold(T::zero(), |m, &v| m.max(v.abs()));
    for k in 0..n {
        let mut piv = k;
        for i in (k + 1)..n {
            if lu[[i, k]].abs() > lu[[piv, k]].abs() {
                piv = i;
            }
        }
        if lu[[piv, k]].abs() <= T::epsilon() * scale * T::from_usize_lossy(n) || scale == T::zero()
        {
            return Err(Error::Singular(format!("zero pivot at column {k}")));
        }
        if piv != k {
            for j in 0..n {
                lu.swap([k, j], [piv, j]);
            }
            for j in 0..x.ncols() {
                x.swap([k, j], [piv, j]);
            }
        }
        let d = lu[[k, k]];
        for i in (k + 1)..n {
            let f = lu[[i, k]] / d;
            lu[[i, k]] = f;
            for j in (k + 1)..n {
                let v = lu[[k, j]];
                lu[[i, j]] -= f * v;
            }
            for j in 0..x.ncols() {
                let v = x[[k, j]];
                x[[i, j]] -= f * v;
            }
        }
    }
    for j in 0..x.ncols() {
        for k in (0..n).rev() {
            let mut acc = x[[k, j]];
            for i in (k + 1)..n {
                acc -= lu[[k, i]] * x[[i, j]];
            }
            x[[k, j]] = acc / lu[[k, k]];
        }
    }
    Ok(x)
}

pub fn solve_vec<T: Scalar>(a: ArrayView2<T>, b: ArrayView1<T>) -> Result<Array1<T>> {
    let bm = b.insert_axis(Axis(1));
    Ok(lu_solve(a, bm)?.column(0).to_owned())
}

pub fn inverse<T: Scalar>(a: ArrayView2<T>) -> Result<Array2<T>> {
    lu_solve(a, Array2::eye(a.nrows()).view())
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky<T: Scalar>(a: ArrayView2<T>) -> Option<Array2<T>> {
    let n = a.nrows();
    let mut l = Array2::<T>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > T::zero()) {
            return None;
        }
        let dj = d.sqrt();
        l[[j, j]] = dj;
        for i in (j + 1)..n {
            let mut v = a[[i, j]];
            for k in 0..j {
                v -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = v / dj;
        }
    }
    Some(l)
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn forward_substitute<T: Scalar>(l: ArrayView2<T>, b: ArrayView1<T>) -> Array1<T> {
    let n = l.nrows();
    let mut x = Array1::zeros(n);
    for i in 0..n {
        let mut acc = b[i];
        for k in 0..i {
            acc -= l[[i, k]] * x[k];
        }
        x[i] = acc / l[[i, i]];
    }
    x
}

pub fn symmetrize<T: Scalar>(a: &mut Array2<T>) {
    let n = a.nrows();
    let half = T::lit(0.5);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (a[[i, j]] + a[[j, i]]) * half;
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
    }
}

/// Eigen-decomposition of a symmetric matrix: Householder reduction to
/// tridiagonal form followed by the implicit QL algorithm.
///
/// Returns eigenvalues in ascending order and the matching eigenvectors as
/// columns.
pub fn sym_eigen<T: Scalar>(a: ArrayView2<T>) -> (Array1<T>, Array2<T>) {
    let n = a.nrows();
    if n == 0 {
        return (Array1::zeros(0), Array2::zeros((0, 0)));
    }
    let mut sym = a.to_owned();
    symmetrize(&mut sym);
    let mut v: Vec<Vec<T>> = sym.outer_iter().map(|r| r.to_vec()).collect();
    let mut d = vec![T::zero(); n];
    let mut e = vec![T::zero(); n];
    tridiagonalize(&mut v, &mut d, &mut e);
    tql2(&mut v, &mut d, &mut e);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].partial_cmp(&d[j]).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j)));
    let values = Array1::from_iter(order.iter().map(|&i| d[i]));
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| v[r][order[c]]);
    (values, vectors)
}

fn tridiagonalize<T: Scalar>(v: &mut [Vec<T>], d: &mut [T], e: &mut [T]) {
    let n = d.len();
    for j in 0..n {
        d[j] = v[n - 1][j];
    }
    for i in (1..n).rev() {
        let mut scale = T::zero();
        let mut h = T::zero();
        for k in 0..i {
            scale += d[k].abs();
        }
        if scale == T::zero() {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[i - 1][j];
                v[i][j] = T::zero();
                v[j][i] = T::zero();
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > T::zero() {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for item in e.iter_mut().take(i) {
                *item = T::zero();
            }
            for j in 0..i {
                f = d[j];
                v[j][i] = f;
                g = e[j] + v[j][j] * f;
                for k in (j + 1)..i {
                    g += v[k][j] * d[k];
                    e[k] += v[k][j] * f;
                }
                e[j] = g;
            }
            f = T::zero();
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    let upd = f * e[k] + g * d[k];
                    v[k][j] -= upd;
                }
                d[j] = v[i - 1][j];
                v[i][j] = T::zero();
            }
        }
        d[i] = h;
    }
    for i in 0..n - 1 {
        v[n - 1][i] = v[i][i];
        v[i][i] = T::one();
        let h = d[i + 1];
        if h != T::zero() {
            for k in 0..=i {
                d[k] = v[k][i + 1] / h;
            }
            for j in 0..=i {
                let mut g = T::zero();
                for k in 0..=i {
                    g += v[k][i + 1] * v[k][j];
                }
                for k in 0..=i {
                    let upd = g * d[k];
                    v[k][j] -= upd;
                }
            }
        }
        for k in 0..=i {
            v[k][i + 1] = T::zero();
        }
    }
    for j in 0..n {
        d[j] = v[n - 1][j];
        v[n - 1][j] = T::zero();
    }
    v[n - 1][n - 1] = T::one();
    e[0] = T::zero();
}

fn tql2<T: Scalar>(v: &mut [Vec<T>], d: &mut [T], e: &mut [T]) {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = T::zero();
    let mut f = T::zero();
    let mut tst1 = T::zero();
    let eps = T::epsilon();
    let two = T::lit(2.0);
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m == n {
            m = n - 1;
        }
        if m > l {
            for _iter in 0..200 {
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (two * e[l]);
                let mut r = p.hypot(T::one());
                if p < T::zero() {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for item in d.iter_mut().take(n).skip(l + 2) {
                    *item -= h;
                }
                f += h;
                p = d[m];
                let mut c = T::one();
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = T::zero();
                let mut s2 = T::zero();
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for row in v.iter_mut() {
                        h = row[i + 1];
                        row[i + 1] = s * row[i] + c * h;
                        row[i] = c * row[i] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = T::zero();
    }
}

/// 2-norm condition number of a square matrix; infinite when singular.
pub fn condition_number<T: Scalar>(a: ArrayView2<T>) -> T {
    let ata = a.t().dot(&a);
    let (vals, _) = sym_eigen(ata.view());
    let lo = vals[0];
    let hi = vals[vals.len() - 1];
    if !(lo > T::zero()) {
        return T::infinity();
    }
    (hi / lo).sqrt()
}

/// Inverse of a square moment matrix, refusing ill-conditioned input.
pub fn guarded_inverse<T: Scalar>(a: ArrayView2<T>, what: &str) -> Result<Array2<T>> {
    let cond = condition_number(a);
    if !(cond.as_f64() < T::COND_LIMIT) {
        return Err(Error::Singular(format!(
            "{what} (condition number {:e})",
            cond.as_f64()
        )));
    }
    inverse(a)
}
