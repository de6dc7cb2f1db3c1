use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use crate::error::{usage, CliResult};
use crate::input::{parse_range, read_csv, read_json, RolesManifest};
use crate::report::{emit, region_block, to_json, GridSpec, RegionBlock, REGION_SCHEMA};

#[derive(Debug, Args)]
pub struct RegionArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub roles: PathBuf,
    /// `lo:hi:step` over the endogenous coefficient.
    #[arg(long, allow_hyphen_values = true)]
    pub grid: String,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, default_value_t = 1.1)]
    pub c: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct RegionReport {
    schema: &'static str,
    n: usize,
    p: usize,
    regressor: String,
    #[serde(flatten)]
    region: RegionBlock,
}

pub fn run(args: &RegionArgs) -> CliResult<()> {
    let (lo, hi, step) = parse_range(&args.grid)?;
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(usage(format!("--level {} must lie in (0, 1)", args.level)));
    }
    if !(args.c > 1.0) {
        return Err(usage(format!("--c {} must exceed 1", args.c)));
    }
    let table = read_csv(&args.data)?;
    let manifest: RolesManifest = read_json(&args.roles)?;
    let data = manifest.resolve(&table)?.dataset(&table)?;
    if data.k_e() != 1 {
        return Err(usage(format!(
            "the region grid covers one endogenous regressor, roles list {}",
            data.k_e()
        )));
    }
    let region = region_block(&data, args.c, 1.0 - args.level, GridSpec { lo, hi, step })?;
    let report = RegionReport {
        schema: REGION_SCHEMA,
        n: data.n(),
        p: data.p(),
        regressor: data.labels().d[0].clone(),
        region,
    };
    emit(args.out.as_deref(), &to_json(&report))
}
