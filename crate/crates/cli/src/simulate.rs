use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use sparseiv::montecarlo::runner::null_standard_error;
use sparseiv::montecarlo::{run_replications, size_adjusted_power, Design, MetricsRow, SimConfig, Strength};

use crate::error::{stage, usage, CliResult};
use crate::input::{parse_range, read_json};
use crate::report::{emit, finite, to_json, POWER_SCHEMA, SIM_SCHEMA};

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulation settings as JSON.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub reps: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    #[arg(long, env = "SPARSEIV_THREADS", default_value_t = 0)]
    pub threads: usize,
    /// Metrics table, one row per estimator.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON summary; defaults to the table path with a `.json` extension.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Size-adjusted power curve.
    #[arg(long)]
    pub power: bool,
    /// `lo:hi:step` of tested values; defaults to ±10 null standard errors.
    #[arg(long, allow_hyphen_values = true)]
    pub beta_grid: Option<String>,
    /// Power curve file; defaults to `<table stem>_power.csv`.
    #[arg(long)]
    pub power_out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct NullField {
    estimator: String,
    field: &'static str,
    reason: &'static str,
}

#[derive(Debug, Serialize)]
struct Row {
    estimator: String,
    #[serde(rename = "R")]
    r: usize,
    med_bias: Option<f64>,
    mad: Option<f64>,
    rp05: Option<f64>,
    rmse: Option<f64>,
    n0: usize,
    failures: usize,
}

#[derive(Debug, Serialize)]
struct PowerSummary {
    schema: &'static str,
    file: String,
    betas: Vec<f64>,
    critical: Vec<(String, Option<f64>)>,
    warnings: Vec<String>,
}

#[derive(Debug, Serialize)]
struct SimReport<'a> {
    schema: &'static str,
    reps: usize,
    seed: u64,
    level: f64,
    config: &'a SimConfig,
    rows: Vec<Row>,
    null_fields: Vec<NullField>,
    #[serde(skip_serializing_if = "Option::is_none")]
    power: Option<PowerSummary>,
}

/// Field-level checks so errors point at the offending JSON field.
fn check(cfg: &SimConfig, path: &Path) -> CliResult<()> {
    let bad = |ptr: &str, msg: String| Err(usage(format!("{}: invalid value at {ptr}: {msg}", path.display())));
    let d = &cfg.dgp;
    if d.n < 4 {
        return bad("/dgp/n", format!("n = {} is too small", d.n));
    }
    if d.p == 0 {
        return bad("/dgp/p", "p must be positive".into());
    }
    if let Design::Cutoff { s } = d.design {
        if s == 0 || s > d.p {
            return bad("/dgp/design/cutoff/s", format!("s = {s} must lie in 1..={}", d.p));
        }
    }
    match d.strength {
        Strength::Mu2(m) if !(m >= 0.0 && m.is_finite()) => {
            return bad("/dgp/strength/mu2", format!("{m} must be finite and nonnegative"));
        }
        Strength::FStar(f) if !(f > 0.0 && f.is_finite()) => {
            return bad("/dgp/strength/f_star", format!("{f} must be positive"));
        }
        _ => {}
    }
    if !(d.corr_ev > -1.0 && d.corr_ev < 1.0) {
        return bad("/dgp/corr_ev", format!("{} must lie in (-1, 1)", d.corr_ev));
    }
    if !(d.sigma2_e > 0.0 && d.sigma2_e.is_finite()) {
        return bad("/dgp/sigma2_e", "must be positive".into());
    }
    if !(d.sigma2_z > 0.0 && d.sigma2_z.is_finite()) {
        return bad("/dgp/sigma2_z", "must be positive".into());
    }
    if cfg.estimators.is_empty() {
        return bad("/estimators", "no estimators requested".into());
    }
    if !(cfg.c > 1.0) {
        return bad("/c", format!("{} must exceed 1", cfg.c));
    }
    if cfg.iterations == 0 {
        return bad("/iterations", "must be at least 1".into());
    }
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return bad("/level", format!("{} must lie in (0, 1)", cfg.level));
    }
    cfg.validate().map_err(stage("montecarlo"))
}

fn null_fields(rows: &[MetricsRow]) -> Vec<NullField> {
    let mut out = Vec::new();
    for r in rows {
        for (field, v, reason) in [
            ("med_bias", r.med_bias, "no_point_estimates"),
            ("mad", r.mad, "no_point_estimates"),
            ("rmse", r.rmse, "no_point_estimates"),
            ("rp05", r.rp05, "no_tests"),
        ] {
            if !v.is_finite() {
                out.push(NullField {
                    estimator: r.estimator.clone(),
                    field,
                    reason,
                });
            }
        }
    }
    out
}

fn sibling(path: &Path, suffix: &str, ext: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "table".into());
    path.with_file_name(format!("{stem}{suffix}.{ext}"))
}

pub fn run(args: &SimulateArgs) -> CliResult<()> {
    if args.reps == 0 {
        return Err(usage("--reps must be at least 1"));
    }
    let cfg: SimConfig = read_json(&args.config)?;
    check(&cfg, &args.config)?;
    let betas = match &args.beta_grid {
        Some(spec) => {
            let (lo, hi, step) = parse_range(spec)?;
            Some(sparseiv::weak_id::Grid::linspace(lo, hi, step).map_err(stage("montecarlo"))?)
        }
        None => None,
    };

    let table = run_replications(&cfg, args.reps, args.seed, args.threads).map_err(stage("montecarlo"))?;
    emit(Some(&args.out), &table.to_csv())?;

    let power = if args.power {
        let betas: Vec<f64> = match betas {
            Some(g) => g.points().iter().map(|p| p[0]).collect(),
            None => {
                let se = null_standard_error(&cfg, args.reps.min(200), args.seed, args.threads)
                    .map_err(stage("montecarlo"))?;
                (0..=40).map(|i| 1.0 + se * (-10.0 + 0.5 * i as f64)).collect()
            }
        };
        let curve = size_adjusted_power(&cfg, &betas, args.reps, args.seed, args.threads).map_err(stage("montecarlo"))?;
        let file = args.power_out.clone().unwrap_or_else(|| sibling(&args.out, "_power", "csv"));
        emit(Some(&file), &curve.to_csv())?;
        Some(PowerSummary {
            schema: POWER_SCHEMA,
            file: file.display().to_string(),
            betas,
            critical: curve.critical.iter().map(|(k, v)| (k.clone(), finite(*v))).collect(),
            warnings: curve.warnings.clone(),
        })
    } else {
        None
    };

    let report = SimReport {
        schema: SIM_SCHEMA,
        reps: table.reps,
        seed: table.seed,
        level: table.level,
        config: &table.config,
        rows: table
            .rows
            .iter()
            .map(|r| Row {
                estimator: r.estimator.clone(),
                r: r.r,
                med_bias: finite(r.med_bias),
                mad: finite(r.mad),
                rp05: finite(r.rp05),
                rmse: finite(r.rmse),
                n0: r.n0,
                failures: r.failures,
            })
            .collect(),
        null_fields: null_fields(&table.rows),
        power,
    };
    let json_path = args.json.clone().unwrap_or_else(|| args.out.with_extension("json"));
    emit(Some(&json_path), &to_json(&report))
}
