use std::path::PathBuf;

use clap::{Args, ValueEnum};
use ndarray::Array2;
use serde::Serialize;
use sparseiv::data::{normalize_instruments, Dataset};
use sparseiv::diagnostics::{first_stage_wald, gram, restricted_eigenvalue, sparse_eigenvalues, EigenMode};
use sparseiv::first_stage::{fit_first_stage, with_fallback, FirstStageConfig, FirstStageFit, GammaRule, Method};
use sparseiv::iv::{fit_iv, spec_test, split_sample_iv, IvEstimate, VcovMode};
use sparseiv::linalg;
use sparseiv::Error;

use crate::error::{stage, usage, CliResult};
use crate::input::{parse_matrix, parse_range, read_csv, read_json, ResolvedRoles, RolesManifest, Table};
use crate::report::{emit, finite, region_block, to_json, GridSpec, Num, RegionBlock, FIT_SCHEMA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodArg {
    Lasso,
    PostLasso,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum VcovArg {
    Hetero,
    Homo,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// CSV file with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON file assigning columns to roles.
    #[arg(long)]
    pub roles: PathBuf,
    #[arg(long, value_enum, default_value = "post-lasso")]
    pub method: MethodArg,
    /// Slack constant in the penalty level.
    #[arg(long, default_value_t = 1.1)]
    pub c: f64,
    /// `auto` for 0.1/log(max(p, n)), or a number in (0, 1).
    #[arg(long, default_value = "auto")]
    pub gamma: String,
    /// Total number of penalty-loading stages.
    #[arg(long, default_value_t = 15)]
    pub iterations: usize,
    #[arg(long, value_enum, default_value = "hetero")]
    pub vcov: VcovArg,
    /// Estimate each half's instruments from the other half.
    #[arg(long)]
    pub split_sample: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Restricted and sparse eigenvalues of the instrument Gram matrix.
    #[arg(long)]
    pub diagnostics: bool,
    /// Contrast with a baseline IV estimate.
    #[arg(long)]
    pub spec_test: bool,
    /// Baseline instrument columns, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub baseline_cols: Vec<String>,
    /// Contrast rows, e.g. `1,0;0,1`; one entry per regressor. Defaults to the endogenous coefficients.
    #[arg(long = "R", allow_hyphen_values = true)]
    pub r: Option<String>,
    /// Sup-score grid `lo:hi:step`; always computed when given.
    #[arg(long, allow_hyphen_values = true)]
    pub grid: Option<String>,
    /// Coverage of the sup-score region.
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Settings {
    method: MethodArg,
    c: f64,
    gamma: f64,
    gamma_rule: &'static str,
    iterations: usize,
    vcov: VcovArg,
    split_sample: bool,
    seed: Option<u64>,
}

#[derive(Debug, Serialize)]
struct EquationBlock {
    regressor: String,
    selected: Vec<String>,
    stages: usize,
    fallback: Option<String>,
    wald: Num,
    f: Num,
    warnings: Vec<String>,
}

#[derive(Debug, Serialize)]
struct FirstStageBlock {
    sample: &'static str,
    n: usize,
    lambda: f64,
    gamma: f64,
    c: f64,
    iterations: usize,
    dropped_instruments: Vec<String>,
    equations: Vec<EquationBlock>,
}

#[derive(Debug, Serialize)]
struct EstimatesBlock {
    names: Vec<String>,
    alpha: Vec<Option<f64>>,
    se: Vec<Option<f64>>,
    p_values: Vec<Option<f64>>,
    vcov: Vec<Vec<Option<f64>>>,
    vcov_mode: VcovMode,
}

#[derive(Debug, Serialize)]
struct SplitBlock {
    n_a: usize,
    n_b: usize,
    alpha_a: Vec<Option<f64>>,
    alpha_b: Vec<Option<f64>>,
}

#[derive(Debug, Serialize)]
struct RestrictedBlock {
    kappa: f64,
    kappa_sq: f64,
    support: Vec<String>,
    exact: bool,
}

#[derive(Debug, Serialize)]
struct SparseBlock {
    m: usize,
    phi_min: f64,
    phi_max: f64,
    exact: bool,
}

#[derive(Debug, Serialize)]
struct DiagnosticsBlock {
    gram: &'static str,
    s: usize,
    cone_constant: f64,
    restricted_eigenvalue: RestrictedBlock,
    sparse_eigenvalues: SparseBlock,
}

#[derive(Debug, Serialize)]
struct SpecTestBlock {
    baseline: Vec<String>,
    r: Vec<Vec<f64>>,
    j: Num,
    df: usize,
    p_value: Num,
    alpha_baseline: Vec<Option<f64>>,
}

#[derive(Debug, Serialize)]
struct Routing {
    to_region: bool,
    reason: Option<&'static str>,
}

#[derive(Debug, Serialize)]
struct FitReport {
    schema: &'static str,
    n: usize,
    p: usize,
    outcome: String,
    settings: Settings,
    first_stage: Vec<FirstStageBlock>,
    estimates: Option<EstimatesBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    estimates_reason: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    split_sample: Option<SplitBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    diagnostics: Option<DiagnosticsBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    spec_test: Option<SpecTestBlock>,
    routing: Routing,
    region: Option<RegionBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    region_reason: Option<&'static str>,
}

fn parse_gamma(s: &str) -> CliResult<GammaRule> {
    if s == "auto" {
        return Ok(GammaRule::Auto);
    }
    let g: f64 = s.parse().map_err(|_| usage(format!("--gamma '{s}' must be 'auto' or a number")))?;
    if !(g > 0.0 && g < 1.0) {
        return Err(usage(format!("--gamma {g} must lie in (0, 1)")));
    }
    Ok(GammaRule::Fixed(g))
}

fn opt_vec(v: impl IntoIterator<Item = f64>) -> Vec<Option<f64>> {
    v.into_iter().map(finite).collect()
}

fn is_weak(e: &Error) -> bool {
    match e {
        Error::WeakInstruments(_) | Error::Singular(_) => true,
        Error::Half { source, .. } => is_weak(source),
        _ => false,
    }
}

fn names(data: &Dataset<f64>, idx: &[usize]) -> Vec<String> {
    idx.iter().map(|&j| data.labels().f[j].clone()).collect()
}

fn first_stage_block(sample: &'static str, fs: &FirstStageFit<f64>, data: &Dataset<f64>, k: usize) -> FirstStageBlock {
    let equations = fs
        .equations
        .iter()
        .enumerate()
        .map(|(l, eq)| {
            let (wald, f) = wald_for(fs, data, l);
            EquationBlock {
                regressor: data.labels().d[l].clone(),
                selected: names(data, &eq.support),
                stages: eq.stages,
                fallback: eq.fallback.map(|j| data.labels().f[j].clone()),
                wald,
                f,
                warnings: eq.warnings.clone(),
            }
        })
        .collect();
    FirstStageBlock {
        sample,
        n: data.n(),
        lambda: fs.lambda,
        gamma: fs.gamma,
        c: fs.c,
        iterations: k,
        dropped_instruments: names(data, &fs.dropped_instruments),
        equations,
    }
}

/// Wald statistic of the selected coefficients, centered instruments.
fn wald_for(fs: &FirstStageFit<f64>, data: &Dataset<f64>, l: usize) -> (Num, Num) {
    let eq = &fs.equations[l];
    if eq.support.is_empty() {
        return (Num::missing("no_selection"), Num::missing("no_selection"));
    }
    let d = data.d_endog().column(l).to_owned();
    let resid = &d - &fs.dhat.column(l);
    let s2 = resid.mapv(|v| v * v).mean().unwrap_or(0.0);
    if !(s2 > 0.0) {
        return (Num::missing("perfect_fit"), Num::missing("perfect_fit"));
    }
    let (z, _) = linalg::center_columns(linalg::select_columns(data.f(), &eq.support).view());
    let pi = ndarray::Array1::from_iter(eq.support.iter().map(|&j| eq.beta[j]));
    match first_stage_wald(pi.view(), z.view(), s2) {
        Ok((w, f)) => (Num::of(w, "non_finite"), Num::of(f, "non_finite")),
        Err(_) => (Num::missing("undefined"), Num::missing("undefined")),
    }
}

fn estimates_block(data: &Dataset<f64>, est: &IvEstimate<f64>) -> EstimatesBlock {
    EstimatesBlock {
        names: data.labels().d.clone(),
        alpha: opt_vec(est.alpha.iter().copied()),
        se: opt_vec(est.se.iter().copied()),
        p_values: (0..est.alpha.len()).map(|j| finite(est.p_value(j, 0.0))).collect(),
        vcov: est.vcov.outer_iter().map(|r| opt_vec(r.iter().copied())).collect(),
        vcov_mode: est.mode,
    }
}

fn diagnostics_block(data: &Dataset<f64>, s: usize, c: f64, seed: u64) -> CliResult<DiagnosticsBlock> {
    let zero = data.zero_variance_instruments();
    let kept: Vec<usize> = (0..data.p()).filter(|j| !zero.contains(j)).collect();
    let (f, _) = normalize_instruments(linalg::select_columns(data.f(), &kept).view()).map_err(stage("diagnostics"))?;
    let m = gram(f.view());
    let s = s.clamp(1, kept.len());
    let cone = (c + 1.0) / (c - 1.0);
    let re = match restricted_eigenvalue(m.view(), s, cone, EigenMode::Exact, None) {
        Err(Error::BudgetExceeded { .. }) => restricted_eigenvalue(m.view(), s, cone, EigenMode::sampled(seed), None),
        r => r,
    }
    .map_err(stage("diagnostics"))?;
    let se = match sparse_eigenvalues(m.view(), s, EigenMode::Exact) {
        Err(Error::BudgetExceeded { .. }) => sparse_eigenvalues(m.view(), s, EigenMode::sampled(seed)),
        r => r,
    }
    .map_err(stage("diagnostics"))?;
    let support: Vec<usize> = re.support.iter().map(|&j| kept[j]).collect();
    Ok(DiagnosticsBlock {
        gram: "instruments scaled to unit second moment",
        s,
        cone_constant: cone,
        restricted_eigenvalue: RestrictedBlock {
            kappa: re.kappa,
            kappa_sq: re.kappa_sq,
            support: names(data, &support),
            exact: re.exact,
        },
        sparse_eigenvalues: SparseBlock {
            m: se.m,
            phi_min: se.phi_min,
            phi_max: se.phi_max,
            exact: se.exact,
        },
    })
}

fn spec_test_block(
    args: &FitArgs,
    table: &Table,
    roles: &ResolvedRoles,
    data: &Dataset<f64>,
    fs: &FirstStageFit<f64>,
    est: &IvEstimate<f64>,
) -> CliResult<SpecTestBlock> {
    let a = roles.baseline(table, data, &args.baseline_cols)?;
    let r = match &args.r {
        Some(spec) => parse_matrix(spec, data.k_d())?,
        None => Array2::from_shape_fn((data.k_e(), data.k_d()), |(i, j)| if i == j { 1.0 } else { 0.0 }),
    };
    let r_rows = r.outer_iter().map(|row| row.to_vec()).collect();
    match spec_test(a.view(), fs.dhat.view(), data.d(), data.y(), r.view(), &est.alpha) {
        Ok(t) => Ok(SpecTestBlock {
            baseline: args.baseline_cols.clone(),
            r: r_rows,
            j: Num::of(t.j, "non_finite"),
            df: t.df,
            p_value: Num::of(t.pvalue, "non_finite"),
            alpha_baseline: opt_vec(t.alpha_tilde.iter().copied()),
        }),
        Err(Error::DegenerateContrast) => Ok(SpecTestBlock {
            baseline: args.baseline_cols.clone(),
            r: r_rows,
            j: Num::missing("degenerate_contrast"),
            df: r.nrows(),
            p_value: Num::missing("degenerate_contrast"),
            alpha_baseline: Vec::new(),
        }),
        Err(e) => Err(stage("iv")(e)),
    }
}

/// Grid centered on `center`, ten scales wide on each side, 201 points.
fn auto_grid(center: f64, scale: f64) -> GridSpec {
    let half = 10.0 * scale;
    GridSpec {
        lo: center - half,
        hi: center + half,
        step: half / 100.0,
    }
}

fn ols_slope(data: &Dataset<f64>) -> f64 {
    let qr = linalg::PivotedQr::new(data.d());
    qr.solve_ls(data.y())[0]
}

pub fn run(args: &FitArgs) -> CliResult<()> {
    if !(args.c > 1.0) {
        return Err(usage(format!("--c {} must exceed 1", args.c)));
    }
    if args.iterations == 0 {
        return Err(usage("--iterations must be at least 1"));
    }
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(usage(format!("--level {} must lie in (0, 1)", args.level)));
    }
    let gamma_rule = parse_gamma(&args.gamma)?;
    if args.spec_test && args.split_sample {
        return Err(usage("--spec-test cannot be combined with --split-sample"));
    }
    if args.spec_test && args.baseline_cols.is_empty() {
        return Err(usage("--spec-test needs --baseline-cols"));
    }
    let user_grid = args.grid.as_deref().map(parse_range).transpose()?;

    let table = read_csv(&args.data)?;
    let manifest: RolesManifest = read_json(&args.roles)?;
    let roles = manifest.resolve(&table)?;
    let data = roles.dataset(&table)?;

    let cfg = FirstStageConfig {
        c: args.c,
        gamma: gamma_rule,
        iterations: args.iterations,
        method: match args.method {
            MethodArg::Lasso => Method::Lasso,
            MethodArg::PostLasso => Method::PostLasso,
        },
        ..FirstStageConfig::default()
    };
    let mode = match args.vcov {
        VcovArg::Hetero => VcovMode::Hetero,
        VcovArg::Homo => VcovMode::Homo,
    };

    let mut first_stage = Vec::new();
    let mut estimate: Option<IvEstimate<f64>> = None;
    let mut route: Option<&'static str> = None;
    let mut split = None;
    let mut spec = None;
    let mut max_support = 1;

    if args.split_sample {
        match split_sample_iv(&data, &cfg, mode, args.seed) {
            Ok(ss) => {
                let da = data.subset_rows(&ss.half_a);
                let db = data.subset_rows(&ss.half_b);
                first_stage.push(first_stage_block("a", &ss.first_stage_a, &da, args.iterations));
                first_stage.push(first_stage_block("b", &ss.first_stage_b, &db, args.iterations));
                if ss.used_fallback() {
                    route = Some("empty_selection");
                }
                max_support = ss
                    .first_stage_a
                    .equations
                    .iter()
                    .chain(ss.first_stage_b.equations.iter())
                    .map(|e| e.support.len())
                    .max()
                    .unwrap_or(1);
                split = Some(SplitBlock {
                    n_a: ss.half_a.len(),
                    n_b: ss.half_b.len(),
                    alpha_a: opt_vec(ss.alpha_a.iter().copied()),
                    alpha_b: opt_vec(ss.alpha_b.iter().copied()),
                });
                estimate = Some(ss.as_estimate());
            }
            Err(e) if is_weak(&e) => route = Some("weak_instruments"),
            Err(e) => return Err(stage("iv")(e)),
        }
    } else {
        let raw = fit_first_stage(&data, &cfg).map_err(stage("first_stage"))?;
        if raw.any_empty() {
            route = Some("empty_selection");
        }
        let fs = with_fallback(raw, &data).map_err(stage("first_stage"))?;
        first_stage.push(first_stage_block("full", &fs, &data, args.iterations));
        max_support = fs.equations.iter().map(|e| e.support.len()).max().unwrap_or(1);
        match fit_iv(fs.dhat.view(), data.d(), data.y(), mode) {
            Ok(est) => {
                if args.spec_test {
                    spec = Some(spec_test_block(args, &table, &roles, &data, &fs, &est)?);
                }
                estimate = Some(est);
            }
            Err(e) if is_weak(&e) => route = Some("weak_instruments"),
            Err(e) => return Err(stage("iv")(e)),
        }
    }
    let estimates_reason = if estimate.is_none() { route } else { None };

    let diagnostics = if args.diagnostics {
        Some(diagnostics_block(&data, max_support, args.c, args.seed)?)
    } else {
        None
    };

    let mut region = None;
    let mut region_reason = None;
    if route.is_some() || user_grid.is_some() {
        if data.k_e() != 1 {
            region_reason = Some("grid_needs_one_endogenous_regressor");
        } else {
            let grid = match user_grid {
                Some((lo, hi, step)) => GridSpec { lo, hi, step },
                None => {
                    let (center, se) = estimate
                        .as_ref()
                        .map_or((f64::NAN, f64::NAN), |e| (e.alpha[0], e.se[0]));
                    if center.is_finite() && se.is_finite() && se > 0.0 {
                        auto_grid(center, se)
                    } else {
                        let c0 = ols_slope(&data);
                        auto_grid(c0, c0.abs() + 1.0)
                    }
                }
            };
            region = Some(region_block(&data, args.c, 1.0 - args.level, grid)?);
        }
    }

    let report = FitReport {
        schema: FIT_SCHEMA,
        n: data.n(),
        p: data.p(),
        outcome: data.labels().y.clone(),
        settings: Settings {
            method: args.method,
            c: args.c,
            gamma: gamma_rule.resolve(data.n(), data.p()),
            gamma_rule: match gamma_rule {
                GammaRule::Auto => "auto",
                GammaRule::Fixed(_) => "fixed",
            },
            iterations: args.iterations,
            vcov: args.vcov,
            split_sample: args.split_sample,
            seed: args.split_sample.then_some(args.seed),
        },
        first_stage,
        estimates: estimate.as_ref().map(|e| estimates_block(&data, e)),
        estimates_reason,
        split_sample: split,
        diagnostics,
        spec_test: spec,
        routing: Routing {
            to_region: route.is_some(),
            reason: route,
        },
        region,
        region_reason,
    };
    emit(args.out.as_deref(), &to_json(&report))
}
