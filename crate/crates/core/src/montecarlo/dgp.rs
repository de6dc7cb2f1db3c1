//! Simulation designs: `y = βd + e`, `d = z'Π + v` with Toeplitz(.5)
//! instrument correlation and jointly normal `(e, v)`.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ColumnLabels, Dataset};
use crate::error::{Error, Result};
use crate::linalg;

/// True structural coefficient in every design.
pub const BETA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    /// `Π̃_h = 0.7^{h-1}`.
    Exponential,
    /// First `s` coefficients one, the rest zero.
    Cutoff { s: usize },
}

/// How the first-stage signal is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strength {
    /// Concentration parameter `nΠ'Σ_ZΠ/σ_v²`, with `Var(d) = 1`.
    Mu2(f64),
    /// `σ_v² = nΠ̃'Σ_ZΠ̃ / (F* Π̃'Π̃)` with `Π = Π̃`.
    FStar(f64),
}

fn default_p() -> usize {
    100
}
fn default_corr() -> f64 {
    0.6
}
fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpSpec {
    pub n: usize,
    #[serde(default = "default_p")]
    pub p: usize,
    pub design: Design,
    pub strength: Strength,
    #[serde(default = "default_corr")]
    pub corr_ev: f64,
    #[serde(default = "one")]
    pub sigma2_e: f64,
    #[serde(default = "one")]
    pub sigma2_z: f64,
}

impl DgpSpec {
    pub fn cutoff(n: usize, s: usize, mu2: f64) -> Self {
        DgpSpec {
            n,
            p: 100,
            design: Design::Cutoff { s },
            strength: Strength::Mu2(mu2),
            corr_ev: 0.6,
            sigma2_e: 1.0,
            sigma2_z: 1.0,
        }
    }

    pub fn exponential(n: usize, mu2: f64) -> Self {
        DgpSpec {
            design: Design::Exponential,
            ..DgpSpec::cutoff(n, 1, mu2)
        }
    }

    /// Unscaled coefficient pattern `Π̃`.
    pub fn pi_tilde(&self) -> Array1<f64> {
        match self.design {
            Design::Exponential => Array1::from_iter((0..self.p).map(|h| 0.7f64.powi(h as i32))),
            Design::Cutoff { s } => Array1::from_iter((0..self.p).map(|h| if h < s { 1.0 } else { 0.0 })),
        }
    }

    /// `σ_z² · 0.5^{|j-h|}`.
    pub fn sigma_z(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.p, self.p), |(i, j)| {
            self.sigma2_z * 0.5f64.powi((i as i32 - j as i32).abs())
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 4 {
            return Err(Error::InfeasibleDesign(format!("n = {} is too small", self.n)));
        }
        if self.p == 0 {
            return Err(Error::InfeasibleDesign("p must be positive".into()));
        }
        if let Design::Cutoff { s } = self.design {
            if s == 0 || s > self.p {
                return Err(Error::InfeasibleDesign(format!("cut-off s = {s} must lie in 1..={}", self.p)));
            }
        }
        if !(self.corr_ev > -1.0 && self.corr_ev < 1.0) {
            return Err(Error::InfeasibleDesign(format!("corr_ev = {} must lie in (-1, 1)", self.corr_ev)));
        }
        if !(self.sigma2_e > 0.0) || !(self.sigma2_z > 0.0) || !self.sigma2_e.is_finite() || !self.sigma2_z.is_finite() {
            return Err(Error::InfeasibleDesign("variances must be positive and finite".into()));
        }
        Ok(())
    }

    /// Derived population quantities.
    pub fn params(&self) -> Result<DesignParams> {
        self.validate()?;
        let pt = self.pi_tilde();
        let sz = self.sigma_z();
        let q = pt.dot(&sz.dot(&pt));
        let (c, sigma2_v) = match self.strength {
            Strength::Mu2(mu2) => {
                if !(mu2 >= 0.0) || !mu2.is_finite() {
                    return Err(Error::InfeasibleDesign(format!(
                        "concentration parameter {mu2} must be finite and nonnegative; every finite value is attainable"
                    )));
                }
                let n = self.n as f64;
                let c2 = mu2 / (q * (n + mu2));
                (c2.sqrt(), 1.0 - c2 * q)
            }
            Strength::FStar(fs) => {
                if !(fs > 0.0) || !fs.is_finite() {
                    return Err(Error::InfeasibleDesign(format!("F* = {fs} must be positive")));
                }
                (1.0, self.n as f64 * q / (fs * pt.dot(&pt)))
            }
        };
        if !(sigma2_v > 0.0) {
            return Err(Error::InfeasibleDesign(format!("first-stage error variance {sigma2_v} is not positive")));
        }
        let pi = &pt * c;
        let chol = linalg::cholesky(sz.view()).ok_or_else(|| Error::InfeasibleDesign("Σ_Z not positive definite".into()))?;
        let mu2 = self.n as f64 * pi.dot(&sz.dot(&pi)) / sigma2_v;
        Ok(DesignParams {
            c,
            q,
            pi,
            sigma_z: sz,
            chol_z: chol,
            sigma2_v,
            sigma_ev: self.corr_ev * (self.sigma2_e * sigma2_v).sqrt(),
            mu2,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignParams {
    /// Scale `C` with `Π = CΠ̃`.
    pub c: f64,
    /// `Π̃'Σ_ZΠ̃`.
    pub q: f64,
    pub pi: Array1<f64>,
    pub sigma_z: Array2<f64>,
    /// Lower Cholesky factor of `Σ_Z`.
    pub chol_z: Array2<f64>,
    pub sigma2_v: f64,
    pub sigma_ev: f64,
    /// Population concentration parameter.
    pub mu2: f64,
}

/// One simulated sample.
#[derive(Debug, Clone)]
pub struct Draw {
    pub data: Dataset<f64>,
    pub beta: f64,
    pub pi: Array1<f64>,
    /// Population concentration parameter.
    pub mu2: f64,
    /// `nΠ'E_n[zz']Π/σ_v²` in this sample.
    pub mu2_sample: f64,
    /// Structural errors, kept for invalid-instrument experiments.
    pub e: Array1<f64>,
}

/// Draws one sample using a ChaCha8 stream seeded with `seed`.
pub fn gen_dgp(spec: &DgpSpec, seed: u64) -> Result<Draw> {
    let prm = spec.params()?;
    gen_with_params(spec, &prm, seed)
}

pub fn gen_with_params(spec: &DgpSpec, prm: &DesignParams, seed: u64) -> Result<Draw> {
    let (n, p) = (spec.n, spec.p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xi = Array2::from_shape_simple_fn((n, p), || rng.sample::<f64, _>(StandardNormal));
    let z = xi.dot(&prm.chol_z.t());
    let sv = prm.sigma2_v.sqrt();
    let se = spec.sigma2_e.sqrt();
    let rho = spec.corr_ev;
    let mut v = Array1::zeros(n);
    let mut e = Array1::zeros(n);
    for i in 0..n {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        v[i] = sv * a;
        e[i] = se * (rho * a + (1.0 - rho * rho).sqrt() * b);
    }
    let d = z.dot(&prm.pi) + &v;
    let y = &d * BETA + &e;
    let zp = z.dot(&prm.pi);
    let mu2_sample = zp.dot(&zp) / prm.sigma2_v;
    let data = Dataset::new(
        y,
        d.insert_axis(ndarray::Axis(1)),
        Array2::zeros((n, 0)),
        z,
    )?
    .with_labels(ColumnLabels::generic(1, 0, p))?;
    Ok(Draw {
        data,
        beta: BETA,
        pi: prm.pi.clone(),
        mu2: prm.mu2,
        mu2_sample,
        e,
    })
}
