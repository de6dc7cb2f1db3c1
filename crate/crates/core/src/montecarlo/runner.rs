//! Replication runner, metric tables and size-adjusted power curves.
//!
//! Every replication draws from its own stream seeded by mixing the base
//! seed with the replication index, and results are folded in index order,
//! so tables do not depend on the thread count.

use ndarray::{s, Array2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dgp::{gen_with_params, DgpSpec, Draw, BETA};
use super::estimators::{
    augment_principal_components, estimator_2sls, estimator_kclass, estimator_ridge_split, KClass, KClassVariance,
    RidgeSplitConfig,
};
use crate::data::Dataset;
use crate::dist::normal_sf;
use crate::error::{Error, Result};
use crate::first_stage::{fallback_single_instrument, fit_first_stage, FirstStageConfig, Method};
use crate::iv::{fit_iv, split_sample_iv, VcovMode};
use crate::linalg;
use crate::weak_id::{sup_score, SupScoreProblem};

/// Squared errors above this are truncated in the RMSE.
pub const RMSE_TRUNCATION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "2sls")]
    Tsls,
    #[serde(rename = "liml")]
    Liml,
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "lasso")]
    Lasso,
    #[serde(rename = "post-lasso")]
    PostLasso,
    #[serde(rename = "post-lasso-f")]
    PostLassoF,
    #[serde(rename = "sup-score")]
    SupScore,
    #[serde(rename = "split-sample")]
    SplitSample,
    #[serde(rename = "post-lasso-ridge")]
    PostLassoRidge,
    #[serde(rename = "post-lasso-f-ridge")]
    PostLassoFRidge,
    #[serde(rename = "post-lasso-pc")]
    PostLassoPc,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 11] = [
        EstimatorKind::Tsls,
        EstimatorKind::Liml,
        EstimatorKind::Full,
        EstimatorKind::Lasso,
        EstimatorKind::PostLasso,
        EstimatorKind::PostLassoF,
        EstimatorKind::SupScore,
        EstimatorKind::SplitSample,
        EstimatorKind::PostLassoRidge,
        EstimatorKind::PostLassoFRidge,
        EstimatorKind::PostLassoPc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Tsls => "2sls",
            EstimatorKind::Liml => "liml",
            EstimatorKind::Full => "full",
            EstimatorKind::Lasso => "lasso",
            EstimatorKind::PostLasso => "post-lasso",
            EstimatorKind::PostLassoF => "post-lasso-f",
            EstimatorKind::SupScore => "sup-score",
            EstimatorKind::SplitSample => "split-sample",
            EstimatorKind::PostLassoRidge => "post-lasso-ridge",
            EstimatorKind::PostLassoFRidge => "post-lasso-f-ridge",
            EstimatorKind::PostLassoPc => "post-lasso-pc",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// What to do when Lasso selects no instrument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum NoSelectPolicy {
    /// Fallback point estimate, sup-score test.
    #[default]
    #[serde(rename = "supscore")]
    SupScore,
    /// Confidence interval is the whole line and the replication is left
    /// out of the point metrics.
    #[serde(rename = "infinite-ci")]
    InfiniteCi,
}

fn default_estimators() -> Vec<EstimatorKind> {
    vec![
        EstimatorKind::Tsls,
        EstimatorKind::Full,
        EstimatorKind::PostLasso,
        EstimatorKind::PostLassoF,
        EstimatorKind::SupScore,
    ]
}
fn default_c() -> f64 {
    1.1
}
fn default_iterations() -> usize {
    15
}
fn default_level() -> f64 {
    0.05
}
fn default_pcs() -> usize {
    20
}

/// Simulation configuration, as read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub dgp: DgpSpec,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorKind>,
    #[serde(default)]
    pub noselect_policy: NoSelectPolicy,
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub method: Method,
    /// Test level; also the `γ` of the sup-score test.
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_pcs")]
    pub pc_components: usize,
}

impl SimConfig {
    pub fn new(dgp: DgpSpec, estimators: Vec<EstimatorKind>) -> Self {
        SimConfig {
            dgp,
            estimators,
            noselect_policy: NoSelectPolicy::SupScore,
            c: default_c(),
            iterations: default_iterations(),
            method: Method::PostLasso,
            level: default_level(),
            pc_components: default_pcs(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dgp.params()?;
        if self.estimators.is_empty() {
            return Err(Error::InvalidArgument("no estimators requested".into()));
        }
        if !(self.c > 1.0) {
            return Err(Error::InvalidArgument(format!("c = {} must exceed 1", self.c)));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be at least 1".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidArgument(format!("level = {} must lie in (0, 1)", self.level)));
        }
        Ok(())
    }

    fn first_stage(&self, method: Method) -> FirstStageConfig<f64> {
        FirstStageConfig {
            c: self.c,
            iterations: self.iterations,
            method,
            ..FirstStageConfig::default()
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of replication `r`.
pub fn replication_seed(base: u64, r: usize) -> u64 {
    splitmix(splitmix(base) ^ (r as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

fn sub_seed(seed: u64, tag: u64) -> u64 {
    splitmix(seed ^ splitmix(tag))
}

/// Point estimate, standard error and routing for one estimator in one replication.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Fit {
    estimate: f64,
    se: f64,
    /// No instrument selected; inference follows the no-selection policy.
    no_selection: bool,
}

/// Result of one estimator in one replication, with test evidence at each
/// tested value. Evidence is an uncapped p-value: the test at level `a`
/// rejects when evidence < `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub estimate: f64,
    pub se: f64,
    pub no_selection: bool,
    pub failed: bool,
    pub evidence: Vec<f64>,
}

impl Outcome {
    fn failure(k: usize) -> Self {
        Outcome {
            estimate: f64::NAN,
            se: f64::NAN,
            no_selection: false,
            failed: true,
            evidence: vec![f64::NAN; k],
        }
    }
}

fn t_evidence(estimate: f64, se: f64, b: f64) -> f64 {
    let t = (estimate - b) / se;
    if t.is_nan() {
        return f64::NAN;
    }
    2.0 * normal_sf(t.abs())
}

fn supscore_evidence(problem: &SupScoreProblem<f64>, b: f64, c: f64) -> Result<f64> {
    let stat = sup_score(problem, &[b])?;
    Ok(2.0 * problem.p() as f64 * normal_sf(stat / (c * (problem.n() as f64).sqrt())))
}

fn ones_and(cols: ndarray::ArrayView2<f64>) -> Array2<f64> {
    linalg::hstack(Array2::ones((cols.nrows(), 1)).view(), cols)
}

/// Instruments for the all-instrument baselines: every column, or a random
/// `n − 1` of them when there are too many.
fn baseline_instruments(data: &Dataset<f64>, seed: u64) -> Array2<f64> {
    let (n, p) = (data.n(), data.p());
    if p + data.k_w() < n {
        return data.f().to_owned();
    }
    let keep = n.saturating_sub(1 + data.k_w()).max(1);
    let mut cols = sample(&mut ChaCha8Rng::seed_from_u64(seed), p, keep).into_vec();
    cols.sort_unstable();
    linalg::select_columns(data.f(), &cols)
}

struct Replication<'a> {
    cfg: &'a SimConfig,
    draw: Draw,
    seed: u64,
    problem: Option<Result<SupScoreProblem<f64>>>,
}

impl Replication<'_> {
    fn problem(&mut self) -> Result<&SupScoreProblem<f64>> {
        if self.problem.is_none() {
            self.problem = Some(SupScoreProblem::from_dataset(&self.draw.data, self.cfg.c, self.cfg.level));
        }
        match self.problem.as_ref().expect("set above") {
            Ok(p) => Ok(p),
            Err(e) => Err(e.clone()),
        }
    }

    fn post_lasso_on(&self, data: &Dataset<f64>, method: Method, fuller: bool) -> Result<Fit> {
        let fs = fit_first_stage(data, &self.cfg.first_stage(method))?;
        let sel = fs.equations[0].support.clone();
        if sel.is_empty() {
            let j = fallback_single_instrument(data, 0)?;
            let z = ones_and(data.f().slice(s![.., j..j + 1]));
            let fit = estimator_2sls(data, z.view())?;
            return Ok(Fit {
                estimate: fit.estimate.alpha[0],
                se: f64::NAN,
                no_selection: true,
            });
        }
        if fuller {
            let z = ones_and(linalg::select_columns(data.f(), &sel).view());
            let fit = estimator_kclass(data, z.view(), KClass::Fuller(1.0), KClassVariance::ManyInstrument)?;
            return Ok(Fit {
                estimate: fit.estimate.alpha[0],
                se: fit.estimate.se[0],
                no_selection: false,
            });
        }
        let est = fit_iv(fs.dhat.view(), data.d(), data.y(), VcovMode::Homo)?;
        Ok(Fit {
            estimate: est.alpha[0],
            se: est.se[0],
            no_selection: false,
        })
    }

    fn fit(&mut self, kind: EstimatorKind) -> Result<Fit> {
        let data = &self.draw.data;
        let cfg = self.cfg;
        let plain = |f: super::estimators::KClassFit| Fit {
            estimate: f.estimate.alpha[0],
            se: f.estimate.se[0],
            no_selection: false,
        };
        match kind {
            EstimatorKind::Tsls => {
                let z = baseline_instruments(data, sub_seed(self.seed, 2));
                Ok(plain(estimator_2sls(data, z.view())?))
            }
            EstimatorKind::Liml | EstimatorKind::Full => {
                let z = baseline_instruments(data, sub_seed(self.seed, 2));
                let k = if kind == EstimatorKind::Liml { KClass::Liml } else { KClass::Fuller(1.0) };
                Ok(plain(estimator_kclass(data, z.view(), k, KClassVariance::ManyInstrument)?))
            }
            EstimatorKind::Lasso => self.post_lasso_on(data, Method::Lasso, false),
            EstimatorKind::PostLasso => self.post_lasso_on(data, cfg.method, false),
            EstimatorKind::PostLassoF => self.post_lasso_on(data, cfg.method, true),
            EstimatorKind::PostLassoPc => {
                let k = cfg.pc_components.min(data.n().min(data.p()));
                let (aug, used) = augment_principal_components(data.f(), k)?;
                let mut names = data.labels().f.clone();
                names.extend((0..used).map(|j| format!("pc{}", j + 1)));
                let ad = data.with_instruments(aug, names)?;
                self.post_lasso_on(&ad, cfg.method, false)
            }
            EstimatorKind::SupScore => {
                self.problem()?;
                Ok(Fit {
                    estimate: f64::NAN,
                    se: f64::NAN,
                    no_selection: false,
                })
            }
            EstimatorKind::SplitSample => {
                let est = split_sample_iv(data, &cfg.first_stage(cfg.method), VcovMode::Hetero, sub_seed(self.seed, 1))?;
                let fallback = est.used_fallback();
                Ok(Fit {
                    estimate: est.alpha[0],
                    se: if fallback { f64::NAN } else { est.se[0] },
                    no_selection: fallback,
                })
            }
            EstimatorKind::PostLassoRidge | EstimatorKind::PostLassoFRidge => {
                let rcfg = RidgeSplitConfig {
                    first_stage: cfg.first_stage(cfg.method),
                    fuller: (kind == EstimatorKind::PostLassoFRidge).then_some(1.0),
                    grid_points: 50,
                };
                let fit = estimator_ridge_split(data, &rcfg, sub_seed(self.seed, 3))?;
                Ok(Fit {
                    estimate: fit.estimate,
                    se: fit.se,
                    no_selection: fit.fallback,
                })
            }
        }
    }

    fn outcome(&mut self, kind: EstimatorKind, betas: &[f64]) -> Outcome {
        let res = self.fit(kind).and_then(|fit| {
            let mut evidence = Vec::with_capacity(betas.len());
            for &b in betas {
                let e = if kind == EstimatorKind::SupScore
                    || (fit.no_selection && self.cfg.noselect_policy == NoSelectPolicy::SupScore)
                {
                    let c = self.cfg.c;
                    supscore_evidence(self.problem()?, b, c)?
                } else if fit.no_selection {
                    f64::INFINITY
                } else {
                    t_evidence(fit.estimate, fit.se, b)
                };
                evidence.push(e);
            }
            Ok(Outcome {
                estimate: fit.estimate,
                se: fit.se,
                no_selection: fit.no_selection,
                failed: false,
                evidence,
            })
        });
        match res {
            Ok(o) => o,
            Err(e) => {
                log::debug!("{} failed: {e}", kind.name());
                Outcome::failure(betas.len())
            }
        }
    }
}

/// Runs every estimator on replication `r` and returns one outcome per estimator.
pub fn run_replication(cfg: &SimConfig, base_seed: u64, r: usize, betas: &[f64]) -> Result<Vec<Outcome>> {
    let prm = cfg.dgp.params()?;
    replicate(cfg, &prm, base_seed, r, betas)
}

fn replicate(
    cfg: &SimConfig,
    prm: &super::dgp::DesignParams,
    base_seed: u64,
    r: usize,
    betas: &[f64],
) -> Result<Vec<Outcome>> {
    let seed = replication_seed(base_seed, r);
    let draw = gen_with_params(&cfg.dgp, prm, seed)?;
    let mut rep = Replication {
        cfg,
        draw,
        seed,
        problem: None,
    };
    Ok(cfg.estimators.iter().map(|&k| rep.outcome(k, betas)).collect())
}

fn with_pool<R: Send>(threads: usize, job: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(job))
}

/// All outcomes, indexed `[replication][estimator]`.
fn simulate(cfg: &SimConfig, reps: usize, base_seed: u64, threads: usize, betas: &[f64]) -> Result<Vec<Vec<Outcome>>> {
    cfg.validate()?;
    if reps == 0 {
        return Err(Error::InvalidArgument("at least one replication required".into()));
    }
    let prm = cfg.dgp.params()?;
    with_pool(threads, || {
        (0..reps)
            .into_par_iter()
            .map(|r| replicate(cfg, &prm, base_seed, r, betas))
            .collect::<Result<Vec<_>>>()
    })?
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub estimator: String,
    #[serde(rename = "R")]
    pub r: usize,
    pub med_bias: f64,
    pub mad: f64,
    pub rp05: f64,
    pub rmse: f64,
    pub n0: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
    pub reps: usize,
    pub seed: u64,
    pub level: f64,
    pub config: SimConfig,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else {
        format!("{x}")
    }
}

impl MetricsTable {
    pub const CSV_HEADER: &'static str = "estimator,R,med_bias,mad,rp05,rmse,n0";

    pub fn row(&self, name: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.estimator == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.estimator,
                r.r,
                fmt_num(r.med_bias),
                fmt_num(r.mad),
                fmt_num(r.rp05),
                fmt_num(r.rmse),
                r.n0
            ));
        }
        out
    }
}

/// Aggregates one estimator's outcomes (in replication order).
pub fn summarize(name: &str, outcomes: &[Outcome], level: f64, policy: NoSelectPolicy) -> MetricsRow {
    let failures = outcomes.iter().filter(|o| o.failed).count();
    let ok: Vec<&Outcome> = outcomes.iter().filter(|o| !o.failed).collect();
    let point: Vec<f64> = ok
        .iter()
        .filter(|o| !(o.no_selection && policy == NoSelectPolicy::InfiniteCi))
        .map(|o| o.estimate - BETA)
        .filter(|e| e.is_finite())
        .collect();
    let tested: Vec<f64> = ok.iter().map(|o| o.evidence[0]).filter(|e| !e.is_nan()).collect();
    let rp05 = if tested.is_empty() {
        f64::NAN
    } else {
        tested.iter().filter(|&&e| e < level).count() as f64 / tested.len() as f64
    };
    let rmse = if point.is_empty() {
        f64::NAN
    } else {
        (point.iter().map(|e| (e * e).min(RMSE_TRUNCATION)).sum::<f64>() / point.len() as f64).sqrt()
    };
    MetricsRow {
        estimator: name.to_string(),
        r: outcomes.len(),
        med_bias: median(point.clone()),
        mad: median(point.iter().map(|e| e.abs()).collect()),
        rp05,
        rmse,
        n0: ok.iter().filter(|o| o.no_selection).count(),
        failures,
    }
}

/// Runs `reps` replications and tabulates Med.Bias, MAD, rp(.05), RMSE and N(0).
///
/// `threads = 0` uses the rayon default.
pub fn run_replications(cfg: &SimConfig, reps: usize, base_seed: u64, threads: usize) -> Result<MetricsTable> {
    let all = simulate(cfg, reps, base_seed, threads, &[BETA])?;
    let rows = cfg
        .estimators
        .iter()
        .enumerate()
        .map(|(k, kind)| {
            let col: Vec<Outcome> = all.iter().map(|rep| rep[k].clone()).collect();
            summarize(kind.name(), &col, cfg.level, cfg.noselect_policy)
        })
        .collect();
    Ok(MetricsTable {
        rows,
        reps,
        seed: base_seed,
        level: cfg.level,
        config: cfg.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerPoint {
    pub estimator: String,
    pub beta: f64,
    pub power: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerCurve {
    pub points: Vec<PowerPoint>,
    /// Empirical null critical evidence per estimator.
    pub critical: Vec<(String, f64)>,
    pub reps: usize,
    pub warnings: Vec<String>,
}

impl PowerCurve {
    pub const CSV_HEADER: &'static str = "estimator,beta,power";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.estimator, fmt_num(p.beta), fmt_num(p.power)));
        }
        out
    }

    pub fn power(&self, estimator: &str, beta: f64) -> Option<f64> {
        self.points
            .iter()
            .find(|p| p.estimator == estimator && p.beta == beta)
            .map(|p| p.power)
    }
}

/// Size-adjusted power: samples are drawn once with `β = 1`, every value in
/// `betas` is tested, and each test uses the critical value that gives it
/// exact empirical size `level` at `β = 1`.
pub fn size_adjusted_power(
    cfg: &SimConfig,
    betas: &[f64],
    reps: usize,
    base_seed: u64,
    threads: usize,
) -> Result<PowerCurve> {
    if betas.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut warnings = Vec::new();
    if reps < 100 {
        let msg = format!("{reps} replications are too few for a stable empirical critical value");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let mut tested = vec![BETA];
    tested.extend_from_slice(betas);
    let all = simulate(cfg, reps, base_seed, threads, &tested)?;
    let mut points = Vec::new();
    let mut critical = Vec::new();
    for (k, kind) in cfg.estimators.iter().enumerate() {
        let mut null: Vec<f64> = all.iter().map(|rep| rep[k].evidence[0]).filter(|e| !e.is_nan()).collect();
        null.sort_by(f64::total_cmp);
        let cut = (cfg.level * null.len() as f64).floor() as usize;
        let crit = null.get(cut).copied().unwrap_or(f64::NAN);
        critical.push((kind.name().to_string(), crit));
        for (b_idx, &b) in betas.iter().enumerate() {
            let ev: Vec<f64> = all
                .iter()
                .map(|rep| rep[k].evidence[b_idx + 1])
                .filter(|e| !e.is_nan())
                .collect();
            let power = if ev.is_empty() || crit.is_nan() {
                f64::NAN
            } else {
                ev.iter().filter(|&&e| e < crit).count() as f64 / ev.len() as f64
            };
            points.push(PowerPoint {
                estimator: kind.name().to_string(),
                beta: b,
                power,
            });
        }
    }
    Ok(PowerCurve {
        points,
        critical,
        reps,
        warnings,
    })
}

/// Median Post-Lasso standard error under the null, for grids in standard-error units.
pub fn null_standard_error(cfg: &SimConfig, reps: usize, base_seed: u64, threads: usize) -> Result<f64> {
    let mut pilot = cfg.clone();
    pilot.estimators = vec![EstimatorKind::PostLasso];
    let all = simulate(&pilot, reps, base_seed, threads, &[BETA])?;
    let se: Vec<f64> = all.iter().map(|r| r[0].se).filter(|s| s.is_finite()).collect();
    if se.is_empty() {
        return Err(Error::InvalidArgument("no replication produced a standard error".into()));
    }
    Ok(median(se))
}
