use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use sparseiv::data::Dataset;
use sparseiv::weak_id::{invert_region, ConfidenceRegion, Grid, SupScoreProblem};

use crate::error::{stage, CliError, CliResult};

pub const FIT_SCHEMA: &str = "sparseiv.fit/v1";
pub const REGION_SCHEMA: &str = "sparseiv.region/v1";
pub const SIM_SCHEMA: &str = "sparseiv.simulate/v1";
pub const POWER_SCHEMA: &str = "sparseiv.power/v1";

/// `None` for NaN and infinities, which JSON cannot carry.
pub fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// A number that may be missing, with the reason when it is.
#[derive(Debug, Clone, Serialize)]
pub struct Num {
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<&'static str>,
}

impl Num {
    pub fn of(x: f64, reason: &'static str) -> Num {
        match finite(x) {
            Some(v) => Num { value: Some(v), reason: None },
            None => Num::missing(reason),
        }
    }

    pub fn missing(reason: &'static str) -> Num {
        Num { value: None, reason: Some(reason) }
    }
}

/// Writes `text` to `path`, or to stdout when no path is given.
pub fn emit(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|source| CliError::Io {
            path: p.display().to_string(),
            source,
        }),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|source| CliError::Io { path: "stdout".into(), source })
        }
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegionBlock {
    pub level: f64,
    pub gamma: f64,
    pub c: f64,
    pub critical_value: f64,
    pub grid: GridSpec,
    pub points: Vec<f64>,
    pub stats: Vec<Option<f64>>,
    pub accepted: Vec<bool>,
    /// Smallest and largest accepted point.
    pub bounds: Option<[f64; 2]>,
    pub empty: bool,
    pub touches_boundary: bool,
    pub near_boundary: Vec<usize>,
    pub dropped_instruments: Vec<String>,
}

/// Sup-score region over `lo:hi:step` for a single endogenous regressor.
pub fn region_block(data: &Dataset<f64>, c: f64, gamma: f64, grid: GridSpec) -> CliResult<RegionBlock> {
    let problem = SupScoreProblem::from_dataset(data, c, gamma).map_err(stage("weak_id"))?;
    let g = Grid::linspace(grid.lo, grid.hi, grid.step).map_err(stage("weak_id"))?;
    let reg: ConfidenceRegion = invert_region(&problem, &g).map_err(stage("weak_id"))?;
    Ok(RegionBlock {
        level: reg.level,
        gamma,
        c,
        critical_value: reg.critical_value,
        points: reg.points.iter().map(|p| p[0]).collect(),
        stats: reg.stats.iter().map(|&s| finite(s)).collect(),
        bounds: reg.bounds(0).map(|(lo, hi)| [lo, hi]),
        empty: reg.is_empty(),
        accepted: reg.accepted,
        touches_boundary: reg.touches_boundary,
        near_boundary: reg.near_boundary,
        dropped_instruments: problem.dropped.iter().map(|&j| data.labels().f[j].clone()).collect(),
        grid,
    })
}
