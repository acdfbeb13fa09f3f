//! File formats owned by the command-line tool.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use underreport::model::{AgeBand, Sex};
use underreport::reconstruction::StratumCounts;
use underreport::{ModelConfig, ModelParams, StratumKey};

use crate::InputError;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    pub alpha0: f64,
    pub alpha1: f64,
    pub beta: [f64; 7],
    pub q: f64,
    pub sigma: Option<f64>,
}

impl ParamsFile {
    pub fn into_params(self, sigma: Option<f64>) -> anyhow::Result<ModelParams> {
        let sigma = sigma.or(self.sigma).ok_or_else(|| {
            InputError::new("sigma is neither in the parameter file nor given with --sigma")
        })?;
        let p = ModelParams {
            alpha0: self.alpha0,
            alpha1: self.alpha1,
            beta: self.beta,
            q: self.q,
            sigma,
        };
        p.validate()?;
        Ok(p)
    }
}

pub fn read_params(path: &Path) -> anyhow::Result<ParamsFile> {
    let f = File::open(path)
        .with_context(|| format!("cannot open parameter file {}", path.display()))?;
    serde_json::from_reader(f).with_context(|| format!("invalid parameter file {}", path.display()))
}

/// The parts of `fit.json` needed downstream.
#[derive(Debug, Deserialize)]
struct FitFile {
    params: ModelParams,
    config: ModelConfig,
}

pub fn read_fit(path: &Path) -> anyhow::Result<(ModelParams, ModelConfig)> {
    let f = File::open(path).with_context(|| format!("cannot open fit file {}", path.display()))?;
    let fit: FitFile = serde_json::from_reader(f)
        .with_context(|| format!("invalid fit file {}", path.display()))?;
    fit.params.validate()?;
    Ok((fit.params, fit.config))
}

fn open_csv(path: &Path, what: &str) -> anyhow::Result<csv::Reader<File>> {
    let f =
        File::open(path).with_context(|| format!("cannot open {what} file {}", path.display()))?;
    Ok(csv::Reader::from_reader(f))
}

fn stratum(sex: &str, band: &str, line: u64) -> anyhow::Result<StratumKey> {
    let sex = Sex::parse(sex).ok_or_else(|| {
        InputError::new(format!("line {line}, column `sex`: unknown sex `{sex}`"))
    })?;
    let age_band = AgeBand::parse(band).ok_or_else(|| {
        InputError::new(format!(
            "line {line}, column `age_band`: unknown age band `{band}`"
        ))
    })?;
    Ok(StratumKey { sex, age_band })
}

#[derive(Deserialize)]
struct CoverageRow {
    sex: String,
    age_band: String,
    coverage: f64,
}

/// `sex,age_band,coverage`.
pub fn read_coverage(path: &Path) -> anyhow::Result<BTreeMap<StratumKey, f64>> {
    let mut rdr = open_csv(path, "coverage")?;
    let mut out = BTreeMap::new();
    for (i, row) in rdr.deserialize::<CoverageRow>().enumerate() {
        let line = i as u64 + 2;
        let row = row.with_context(|| format!("coverage file {}", path.display()))?;
        if out
            .insert(stratum(&row.sex, &row.age_band, line)?, row.coverage)
            .is_some()
        {
            return Err(InputError::new(format!(
                "line {line}: duplicate stratum in coverage file"
            ))
            .into());
        }
    }
    Ok(out)
}

#[derive(Deserialize)]
struct CountsRow {
    sex: String,
    age_band: String,
    registered: f64,
    estimated: f64,
}

/// `sex,age_band,registered,estimated`.
pub fn read_counts(path: &Path) -> anyhow::Result<BTreeMap<StratumKey, StratumCounts>> {
    let mut rdr = open_csv(path, "counts")?;
    let mut out = BTreeMap::new();
    for (i, row) in rdr.deserialize::<CountsRow>().enumerate() {
        let line = i as u64 + 2;
        let row = row.with_context(|| format!("counts file {}", path.display()))?;
        let counts = StratumCounts {
            registered: row.registered,
            estimated: row.estimated,
        };
        if out
            .insert(stratum(&row.sex, &row.age_band, line)?, counts)
            .is_some()
        {
            return Err(
                InputError::new(format!("line {line}: duplicate stratum in counts file")).into(),
            );
        }
    }
    Ok(out)
}

pub fn write_csv<S: AsRef<str>>(
    path: &Path,
    header: &[&str],
    rows: &[Vec<S>],
) -> anyhow::Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|s| s.as_ref()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}
