//! Data containers, partialling-out of controls and instrument normalization.
//!
//! All moments use the `1/n` convention; there are no degrees-of-freedom
//! corrections in this module.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::linalg::{self, PivotedQr};
use crate::scalar::Scalar;

/// Column names used when reporting.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ColumnLabels {
    pub y: String,
    /// Endogenous columns first, then exogenous.
    pub d: Vec<String>,
    pub f: Vec<String>,
}

impl ColumnLabels {
    pub fn generic(k_e: usize, k_w: usize, p: usize) -> Self {
        let mut d: Vec<String> = (0..k_e).map(|i| format!("d{}", i + 1)).collect();
        d.extend((0..k_w).map(|i| format!("w{}", i + 1)));
        ColumnLabels {
            y: "y".into(),
            d,
            f: (0..p).map(|j| format!("f{}", j + 1)).collect(),
        }
    }
}

/// Outcome, regressors and instruments for one sample.
///
/// The regressor matrix `d` holds the `k_e` endogenous columns followed by
/// the exogenous controls `w`; the controls double as their own optimal
/// instruments.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    y: Array1<T>,
    d: Array2<T>,
    k_e: usize,
    f: Array2<T>,
    labels: ColumnLabels,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(y: Array1<T>, d_endog: Array2<T>, w: Array2<T>, f: Array2<T>) -> Result<Self> {
        let n = y.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!("need n >= 2 observations, got {n}")));
        }
        for (name, rows) in [("endogenous", d_endog.nrows()), ("controls", w.nrows()), ("instruments", f.nrows())] {
            if rows != n {
                return Err(Error::Dimension(format!("{name} matrix has {rows} rows, outcome has {n}")));
            }
        }
        let k_e = d_endog.ncols();
        if k_e == 0 {
            return Err(Error::InvalidArgument("at least one endogenous regressor required".into()));
        }
        if f.ncols() == 0 {
            return Err(Error::InvalidArgument("at least one instrument required".into()));
        }
        if !linalg::all_finite(y.iter().copied()) {
            return Err(Error::NonFinite("outcome".into()));
        }
        if !linalg::all_finite(d_endog.iter().copied()) || !linalg::all_finite(w.iter().copied()) {
            return Err(Error::NonFinite("regressors".into()));
        }
        if !linalg::all_finite(f.iter().copied()) {
            return Err(Error::NonFinite("instruments".into()));
        }
        let labels = ColumnLabels::generic(k_e, w.ncols(), f.ncols());
        let d = linalg::hstack(d_endog.view(), w.view());
        Ok(Dataset { y, d, k_e, f, labels })
    }

    pub fn with_labels(mut self, labels: ColumnLabels) -> Result<Self> {
        if labels.d.len() != self.k_d() || labels.f.len() != self.p() {
            return Err(Error::Dimension("label counts do not match data".into()));
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
    pub fn p(&self) -> usize {
        self.f.ncols()
    }
    pub fn k_e(&self) -> usize {
        self.k_e
    }
    pub fn k_d(&self) -> usize {
        self.d.ncols()
    }
    pub fn k_w(&self) -> usize {
        self.d.ncols() - self.k_e
    }
    pub fn y(&self) -> ArrayView1<'_, T> {
        self.y.view()
    }
    pub fn d(&self) -> ArrayView2<'_, T> {
        self.d.view()
    }
    pub fn d_endog(&self) -> ArrayView2<'_, T> {
        self.d.slice(s![.., ..self.k_e])
    }
    pub fn w(&self) -> ArrayView2<'_, T> {
        self.d.slice(s![.., self.k_e..])
    }
    pub fn f(&self) -> ArrayView2<'_, T> {
        self.f.view()
    }
    pub fn labels(&self) -> &ColumnLabels {
        &self.labels
    }

    /// Instrument columns with zero empirical variance.
    pub fn zero_variance_instruments(&self) -> Vec<usize> {
        (0..self.p())
            .filter(|&j| {
                let col = self.f.column(j);
                let first = col[0];
                col.iter().all(|&v| v == first)
            })
            .collect()
    }

    /// Row subset, preserving the order given.
    pub fn subset_rows(&self, rows: &[usize]) -> Dataset<T> {
        Dataset {
            y: self.y.select(Axis(0), rows),
            d: self.d.select(Axis(0), rows),
            k_e: self.k_e,
            f: self.f.select(Axis(0), rows),
            labels: self.labels.clone(),
        }
    }

    /// Same observations with a different instrument matrix.
    pub fn with_instruments(&self, f: Array2<T>, names: Vec<String>) -> Result<Dataset<T>> {
        if f.nrows() != self.n() || names.len() != f.ncols() {
            return Err(Error::Dimension("replacement instrument matrix".into()));
        }
        if f.ncols() == 0 {
            return Err(Error::InvalidArgument("at least one instrument required".into()));
        }
        let mut labels = self.labels.clone();
        labels.f = names;
        Ok(Dataset {
            y: self.y.clone(),
            d: self.d.clone(),
            k_e: self.k_e,
            f,
            labels,
        })
    }

    /// Keeps the listed instrument columns.
    pub fn select_instruments(&self, cols: &[usize]) -> Result<Dataset<T>> {
        let names = cols.iter().map(|&j| self.labels.f[j].clone()).collect();
        self.with_instruments(self.f.select(Axis(1), cols), names)
    }

    /// Replaces the outcome (used for invalid-instrument designs and tests).
    pub fn with_outcome(&self, y: Array1<T>) -> Result<Dataset<T>> {
        if y.len() != self.n() {
            return Err(Error::Dimension("replacement outcome".into()));
        }
        let mut out = self.clone();
        out.y = y;
        Ok(out)
    }
}

/// Residuals of `u` after least-squares projection on the columns of `w`.
///
/// `w` must have full column rank; dependent columns are reported by index.
pub fn partial_out<T: Scalar>(u: ArrayView2<T>, w: ArrayView2<T>) -> Result<Array2<T>> {
    if w.ncols() == 0 {
        return Ok(u.to_owned());
    }
    if u.nrows() != w.nrows() {
        return Err(Error::Dimension(format!(
            "partial_out: {} rows vs {} control rows",
            u.nrows(),
            w.nrows()
        )));
    }
    let qr = controls_qr(w)?;
    Ok(residualize(&qr, u))
}

fn controls_qr<T: Scalar>(w: ArrayView2<T>) -> Result<PivotedQr<T>> {
    let qr = PivotedQr::new(w);
    if qr.rank() < w.ncols() {
        return Err(Error::RankDeficient(qr.dependent_columns()));
    }
    Ok(qr)
}

fn residualize<T: Scalar>(qr: &PivotedQr<T>, u: ArrayView2<T>) -> Array2<T> {
    let mut out = Array2::zeros(u.dim());
    for (j, col) in u.axis_iter(Axis(1)).enumerate() {
        out.column_mut(j).assign(&qr.residual(col));
    }
    out
}

/// Scales every column to unit second moment `E_n[f²] = 1`.
///
/// Returns the normalized matrix and the scales `√E_n[f_j²]`, so that
/// `normalized · diag(scales)` reproduces the input.
pub fn normalize_instruments<T: Scalar>(f: ArrayView2<T>) -> Result<(Array2<T>, Array1<T>)> {
    let n = T::from_usize_lossy(f.nrows());
    let mut out = f.to_owned();
    let mut scales = Array1::zeros(f.ncols());
    for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
        let ms = col.iter().map(|&v| v * v).sum::<T>() / n;
        if !(ms > T::zero()) || !ms.is_finite() {
            return Err(Error::ZeroVariance(j));
        }
        let sc = ms.sqrt();
        col.mapv_inplace(|v| v / sc);
        scales[j] = sc;
    }
    Ok((out, scales))
}

/// Outcome, endogenous regressors and instruments with controls projected out.
#[derive(Debug, Clone)]
pub struct PartialledData<T> {
    pub y: Array1<T>,
    pub d_endog: Array2<T>,
    pub f: Array2<T>,
    /// Rank of the control matrix that was projected out.
    pub controls_rank: usize,
}

impl<T: Scalar> PartialledData<T> {
    pub fn from_dataset(data: &Dataset<T>) -> Result<Self> {
        let w = data.w();
        if w.ncols() == 0 {
            return Ok(PartialledData {
                y: data.y().to_owned(),
                d_endog: data.d_endog().to_owned(),
                f: data.f().to_owned(),
                controls_rank: 0,
            });
        }
        let qr = controls_qr(w)?;
        Ok(PartialledData {
            y: qr.residual(data.y()),
            d_endog: residualize(&qr, data.d_endog()),
            f: residualize(&qr, data.f()),
            controls_rank: qr.rank(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn empty_controls_is_identity() {
        let u = array![[1.0f64, 2.0], [3.0, 4.0], [5.0, 0.0]];
        let w = Array2::<f64>::zeros((3, 0));
        assert_eq!(partial_out(u.view(), w.view()).unwrap(), u);
    }

    #[test]
    fn basis_column_projects_to_zero() {
        let w = array![[1.0f64, 0.3], [2.0, -1.0], [0.5, 2.0], [1.0, 1.0]];
        let u = w.slice(s![.., 0..1]).to_owned();
        let r = partial_out(u.view(), w.view()).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn intercept_control_demeans() {
        // normal equations with w = 1: coefficient = mean(u) = 2
        let w = array![[1.0f64], [1.0], [1.0]];
        let u = array![[1.0f64], [2.0], [3.0]];
        let r = partial_out(u.view(), w.view()).unwrap();
        for (got, want) in r.iter().zip([-1.0, 0.0, 1.0]) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn rank_deficient_controls_are_reported() {
        let w = array![[1.0f64, 2.0], [1.0, 2.0], [1.0, 2.0]];
        let u = array![[1.0f64], [2.0], [3.0]];
        match partial_out(u.view(), w.view()) {
            Err(Error::RankDeficient(cols)) => assert_eq!(cols.len(), 1),
            other => panic!("expected rank error, got {other:?}"),
        }
    }

    #[test]
    fn normalization_edge_cases() {
        let f = array![[1.0f64, 2.0, 0.0], [-1.0, -2.0, 0.0]];
        assert_eq!(normalize_instruments(f.view()), Err(Error::ZeroVariance(2)));
        let f = array![[1.0f64, 2.0], [-1.0, -2.0]];
        let (g, sc) = normalize_instruments(f.view()).unwrap();
        assert_eq!(sc[0], 1.0);
        assert_eq!(sc[1], 2.0);
        assert_eq!(g.column(0), f.column(0));
        assert_eq!(g.column(1), f.column(0));
        assert_eq!(
            Error::ZeroVariance(4).to_string(),
            "zero variance instrument, index 4"
        );
    }

    #[test]
    fn dataset_validates_shapes() {
        let y = array![1.0f64, 2.0, 3.0];
        let d = array![[1.0f64], [2.0], [3.0]];
        let w = Array2::zeros((3, 0));
        assert!(Dataset::new(y.clone(), d.clone(), w.clone(), array![[1.0f64], [0.0]]).is_err());
        assert!(Dataset::new(y.clone(), Array2::zeros((3, 0)), w.clone(), d.clone()).is_err());
        let mut bad = d.clone();
        bad[[1, 0]] = f64::NAN;
        assert!(matches!(
            Dataset::new(y.clone(), d.clone(), w.clone(), bad),
            Err(Error::NonFinite(_))
        ));
        let ds = Dataset::new(y, d.clone(), w, array![[1.0f64, 5.0], [2.0, 5.0], [0.0, 5.0]]).unwrap();
        assert_eq!(ds.zero_variance_instruments(), vec![1]);
        assert_eq!(ds.k_d(), 1);
        assert_eq!(ds.w().ncols(), 0);
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(-3.0..3.0f64, rows * cols)
            .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
    }

    proptest! {
        #[test]
        fn partial_out_is_idempotent(u in matrix(12, 3), w in matrix(12, 2)) {
            let once = partial_out(u.view(), w.view()).unwrap();
            let twice = partial_out(once.view(), w.view()).unwrap();
            for (a, b) in once.iter().zip(twice.iter()) {
                prop_assert!((a - b).abs() <= 1e-10);
            }
            // orthogonality to every control column
            let g = w.t().dot(&once) / 12.0;
            prop_assert!(g.iter().all(|v| v.abs() <= 1e-10 * 9.0));
        }

        #[test]
        fn partial_out_invariant_to_control_basis(u in matrix(10, 2), w in matrix(10, 2), a in 0.5..2.0f64, b in -1.0..1.0f64) {
            let g = array![[a, b], [0.3, 1.0 + a]];
            let w2 = w.dot(&g);
            let r1 = partial_out(u.view(), w.view()).unwrap();
            let r2 = partial_out(u.view(), w2.view()).unwrap();
            for (x, y) in r1.iter().zip(r2.iter()) {
                prop_assert!((x - y).abs() <= 1e-10);
            }
        }

        #[test]
        fn normalization_round_trips(f in matrix(8, 3)) {
            prop_assume!(f.axis_iter(Axis(1)).all(|c| c.iter().any(|v| v.abs() > 1e-3)));
            let (g, sc) = normalize_instruments(f.view()).unwrap();
            for j in 0..3 {
                let ms = g.column(j).iter().map(|v| v * v).sum::<f64>() / 8.0;
                prop_assert!((ms - 1.0).abs() <= 1e-12);
                for i in 0..8 {
                    prop_assert!((g[[i, j]] * sc[j] - f[[i, j]]).abs() <= 1e-12 * f[[i, j]].abs().max(1.0));
                }
            }
        }
    }
}
