//! Posterior under-reporting probabilities, reconstruction of the latent
//! series, and the tables built from it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    build_design, AgeBand, DesignRow, ModelConfig, ModelParams, ObservationSeries, Sex, StratumKey,
};

/// Coverage used when no per-stratum table is given: the registry's share
/// of the target population.
pub const DEFAULT_COVERAGE: f64 = 0.74;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub p: f64,
    /// Both weighted component densities underflowed; `p` was set to 0.5.
    pub underflow: bool,
}

/// Probability that `y` came from the under-reported component.
pub fn posterior_underreport(
    y: f64,
    params: &ModelParams,
    row: &DesignRow,
    config: &ModelConfig,
) -> Result<Posterior> {
    params.validate()?;
    let c = config.components(params, row);
    let (l1, l2) = c.weighted_ln_terms(y, config.zeros);
    if l1 == f64::NEG_INFINITY && l2 == f64::NEG_INFINITY || l1.is_nan() || l2.is_nan() {
        return Ok(Posterior {
            p: 0.5,
            underflow: true,
        });
    }
    // ω·φ2 / ((1-ω)·φ1 + ω·φ2) = 1 / (1 + exp(l1 - l2))
    let p = if l2 == f64::NEG_INFINITY {
        0.0
    } else if l1 == f64::NEG_INFINITY {
        1.0
    } else {
        1.0 / (1.0 + (l1 - l2).exp())
    };
    Ok(Posterior {
        p,
        underflow: false,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconstructionRule {
    /// Most likely component: `y/q` when the posterior exceeds 0.5.
    #[default]
    Map,
    /// Posterior-weighted blend `(1-p)·y + p·y/q`.
    Expected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructedRecord {
    pub month: u32,
    pub stratum: StratumKey,
    pub registered: f64,
    pub posterior_p: f64,
    pub latent_x: f64,
    pub flagged: bool,
    pub underflow: bool,
}

/// Aligned with the records of the series it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionResult {
    pub records: Vec<ReconstructedRecord>,
    pub rule: ReconstructionRule,
}

impl ReconstructionResult {
    pub fn latent(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.latent_x).collect()
    }

    pub fn flags(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.flagged).collect()
    }
}

pub fn reconstruct(
    data: &ObservationSeries,
    params: &ModelParams,
    config: &ModelConfig,
    rule: ReconstructionRule,
) -> Result<ReconstructionResult> {
    params.validate()?;
    let rows = build_design(data)?;
    let records = data
        .records()
        .iter()
        .zip(&rows)
        .map(|(rec, row)| {
            let post = posterior_underreport(rec.rate, params, row, config)?;
            let flagged = post.p > 0.5;
            let latent_x = match rule {
                ReconstructionRule::Map if flagged => rec.rate / params.q,
                ReconstructionRule::Map => rec.rate,
                ReconstructionRule::Expected => {
                    (1.0 - post.p) * rec.rate + post.p * rec.rate / params.q
                }
            };
            Ok(ReconstructedRecord {
                month: rec.month,
                stratum: rec.stratum,
                registered: rec.rate,
                posterior_p: post.p,
                latent_x,
                flagged,
                underflow: post.underflow,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReconstructionResult { records, rule })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SummaryScope {
    Stratum(StratumKey),
    /// Population-weighted over the age bands of one sex.
    SexAverage(Sex),
    Global,
}

impl SummaryScope {
    pub fn labels(&self) -> (&'static str, &'static str) {
        match self {
            SummaryScope::Stratum(k) => (sex_label(k.sex), k.age_band.code()),
            SummaryScope::SexAverage(s) => (sex_label(*s), "Average"),
            SummaryScope::Global => ("Global", ""),
        }
    }
}

fn sex_label(s: Sex) -> &'static str {
    match s {
        Sex::Female => "Females",
        Sex::Male => "Males",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scope: SummaryScope,
    pub registered_mean: f64,
    pub estimated_mean: f64,
    pub pct_diff: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IncidenceSummary {
    pub rows: Vec<SummaryRow>,
    pub warnings: Vec<String>,
}

pub fn pct_diff(registered: f64, estimated: f64) -> f64 {
    100.0 * (estimated - registered) / registered
}

fn summary_row(scope: SummaryScope, registered_mean: f64, estimated_mean: f64) -> SummaryRow {
    SummaryRow {
        scope,
        registered_mean,
        estimated_mean,
        pct_diff: pct_diff(registered_mean, estimated_mean),
    }
}

/// Monthly mean registered and reconstructed rates per stratum, then
/// population-weighted averages per sex and overall.
///
/// `populations` weights the strata. When absent, the mean person-months
/// of each stratum in `data` are used, and equal weights if the series
/// carries no population column.
pub fn summarize_incidence(
    data: &ObservationSeries,
    recon: &ReconstructionResult,
    populations: Option<&BTreeMap<StratumKey, f64>>,
) -> Result<IncidenceSummary> {
    if recon.records.len() != data.len() {
        return Err(Error::InvalidSeries(
            "reconstruction is not aligned with the series".into(),
        ));
    }
    let mut sums: BTreeMap<StratumKey, (f64, f64, f64, usize, usize)> = BTreeMap::new();
    for (obs, rec) in data.records().iter().zip(&recon.records) {
        if obs.stratum != rec.stratum || obs.month != rec.month {
            return Err(Error::InvalidSeries(
                "reconstruction is not aligned with the series".into(),
            ));
        }
        let e = sums.entry(obs.stratum).or_default();
        e.0 += obs.rate;
        e.1 += rec.latent_x;
        if let Some(p) = obs.population {
            e.2 += p;
            e.4 += 1;
        }
        e.3 += 1;
    }

    let mut warnings = Vec::new();
    let mut strata = Vec::new();
    for k in StratumKey::all() {
        match sums.get(&k) {
            Some(&(reg, est, pop, n, n_pop)) => {
                let weight = match populations {
                    Some(p) => p.get(&k).copied(),
                    None if n_pop == n => Some(pop / n as f64),
                    None => Some(1.0),
                };
                let Some(weight) = weight else {
                    return Err(Error::InvalidParameter(format!(
                        "no population weight given for stratum {k}"
                    )));
                };
                strata.push((k, reg / n as f64, est / n as f64, weight));
            }
            None => warnings.push(format!("stratum {k} has no records; omitted")),
        }
    }

    let weighted = |items: &[&(StratumKey, f64, f64, f64)]| {
        let w: f64 = items.iter().map(|s| s.3).sum();
        let reg = items.iter().map(|s| s.1 * s.3).sum::<f64>() / w;
        let est = items.iter().map(|s| s.2 * s.3).sum::<f64>() / w;
        (reg, est)
    };

    let mut rows = Vec::new();
    for sex in [Sex::Female, Sex::Male] {
        let of_sex: Vec<_> = strata.iter().filter(|s| s.0.sex == sex).collect();
        if of_sex.is_empty() {
            continue;
        }
        for s in &of_sex {
            rows.push(summary_row(SummaryScope::Stratum(s.0), s.1, s.2));
        }
        let (reg, est) = weighted(&of_sex);
        rows.push(summary_row(SummaryScope::SexAverage(sex), reg, est));
    }
    if !strata.is_empty() {
        let all: Vec<_> = strata.iter().collect();
        let (reg, est) = weighted(&all);
        rows.push(summary_row(SummaryScope::Global, reg, est));
    }
    Ok(IncidenceSummary { rows, warnings })
}

/// Registered and reconstructed case counts per stratum, from rates and the
/// series' person-months.
pub fn case_counts(
    data: &ObservationSeries,
    recon: &ReconstructionResult,
) -> Result<BTreeMap<StratumKey, StratumCounts>> {
    let mut out: BTreeMap<StratumKey, StratumCounts> = BTreeMap::new();
    for (obs, rec) in data.records().iter().zip(&recon.records) {
        let pop = obs.population.ok_or_else(|| Error::MissingPopulation {
            stratum: obs.stratum.to_string(),
            month: obs.month,
        })?;
        let e = out.entry(obs.stratum).or_default();
        e.registered += obs.rate * pop / 100_000.0;
        e.estimated += rec.latent_x * pop / 100_000.0;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StratumCounts {
    pub registered: f64,
    pub estimated: f64,
}

pub fn round_half_up(x: f64) -> u64 {
    (x + 0.5).floor().max(0.0) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRow {
    pub scope: SummaryScope,
    pub registered_count: u64,
    pub estimated_count: u64,
    pub projected_registered: u64,
    pub projected_estimated: u64,
    /// Unrounded `count / coverage`; for total rows, the sum over strata.
    pub projected_registered_exact: f64,
    pub projected_estimated_exact: f64,
    /// Stratum coverage; `None` on total rows.
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionReport {
    pub rows: Vec<ProjectionRow>,
}

impl ProjectionReport {
    pub fn row(&self, scope: SummaryScope) -> Option<&ProjectionRow> {
        self.rows.iter().find(|r| r.scope == scope)
    }

    pub fn global(&self) -> &ProjectionRow {
        self.rows
            .last()
            .expect("projection report always has a global row")
    }
}

/// Scales registry counts to the full population, stratum by stratum,
/// assuming the same incidence outside the registry. Sex and global totals
/// are sums of the rounded stratum projections.
pub fn project_population(
    counts: &BTreeMap<StratumKey, StratumCounts>,
    coverage: &BTreeMap<StratumKey, f64>,
) -> Result<ProjectionReport> {
    if counts.is_empty() {
        return Err(Error::EmptyInput("no stratum counts to project".into()));
    }
    let mut strata = Vec::new();
    for (&k, c) in counts {
        let cov = *coverage.get(&k).ok_or_else(|| Error::InvalidCoverage {
            stratum: k.to_string(),
            value: f64::NAN,
        })?;
        if !(cov > 0.0 && cov <= 1.0) {
            return Err(Error::InvalidCoverage {
                stratum: k.to_string(),
                value: cov,
            });
        }
        if c.registered < 0.0 || c.estimated < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "negative case count for stratum {k}"
            )));
        }
        let pr = c.registered / cov;
        let pe = c.estimated / cov;
        strata.push(ProjectionRow {
            scope: SummaryScope::Stratum(k),
            registered_count: round_half_up(c.registered),
            estimated_count: round_half_up(c.estimated),
            projected_registered: round_half_up(pr),
            projected_estimated: round_half_up(pe),
            projected_registered_exact: pr,
            projected_estimated_exact: pe,
            coverage: Some(cov),
        });
    }

    let total = |scope, items: &[&ProjectionRow]| ProjectionRow {
        scope,
        registered_count: items.iter().map(|r| r.registered_count).sum(),
        estimated_count: items.iter().map(|r| r.estimated_count).sum(),
        projected_registered: items.iter().map(|r| r.projected_registered).sum(),
        projected_estimated: items.iter().map(|r| r.projected_estimated).sum(),
        projected_registered_exact: items.iter().map(|r| r.projected_registered_exact).sum(),
        projected_estimated_exact: items.iter().map(|r| r.projected_estimated_exact).sum(),
        coverage: None,
    };

    let mut rows = Vec::new();
    for sex in [Sex::Female, Sex::Male] {
        let of_sex: Vec<&ProjectionRow> = strata
            .iter()
            .filter(|r| matches!(r.scope, SummaryScope::Stratum(k) if k.sex == sex))
            .collect();
        if of_sex.is_empty() {
            continue;
        }
        rows.extend(of_sex.iter().map(|r| **r));
        rows.push(total(SummaryScope::SexAverage(sex), &of_sex));
    }
    let all: Vec<&ProjectionRow> = strata.iter().collect();
    rows.push(total(SummaryScope::Global, &all));
    Ok(ProjectionReport { rows })
}

pub fn uniform_coverage(value: f64) -> BTreeMap<StratumKey, f64> {
    StratumKey::all().into_iter().map(|k| (k, value)).collect()
}

/// Cost of the cases missing from the registry. Negative when the
/// reconstruction is below the registered count.
pub fn cost_impact(projected_estimated: f64, projected_registered: f64, unit_cost: f64) -> f64 {
    (projected_estimated - projected_registered) * unit_cost
}

/// Reference registry case counts per stratum, used by tests and the
/// CLI's reference report.
pub fn reference_counts() -> BTreeMap<StratumKey, StratumCounts> {
    let mk = |sex, age, registered, estimated| {
        (
            StratumKey::new(sex, age),
            StratumCounts {
                registered,
                estimated,
            },
        )
    };
    BTreeMap::from([
        mk(Sex::Female, AgeBand::Young, 8051.0, 9769.0),
        mk(Sex::Female, AgeBand::Older, 7625.0, 9520.0),
        mk(Sex::Male, AgeBand::Young, 7967.0, 9097.0),
        mk(Sex::Male, AgeBand::Older, 10774.0, 13842.0),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{logit, Observation};
    use proptest::prelude::*;

    fn pdf(x: f64, m: f64, s: f64) -> f64 {
        (-(x - m) * (x - m) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
    }

    fn params(alpha0: f64, q: f64, sigma: f64) -> ModelParams {
        ModelParams {
            alpha0,
            alpha1: 0.0,
            beta: [10.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            q,
            sigma,
        }
    }

    fn row() -> DesignRow {
        DesignRow::new(3, 12, StratumKey::new(Sex::Female, AgeBand::Young))
    }

    #[test]
    fn posterior_extremes() {
        let cfg = ModelConfig::default();
        for y in [0.5, 5.0, 10.0, 30.0] {
            let p0 = posterior_underreport(y, &params(-800.0, 0.5, 1.0), &row(), &cfg).unwrap();
            assert_eq!(p0.p, 0.0);
            let p1 = posterior_underreport(y, &params(800.0, 0.5, 1.0), &row(), &cfg).unwrap();
            assert_eq!(p1.p, 1.0);
        }
    }

    #[test]
    fn posterior_matches_bayes_ratio() {
        let cfg = ModelConfig::default();
        let p = posterior_underreport(5.0, &params(0.0, 0.5, 1.0), &row(), &cfg).unwrap();
        let a = 0.5 * pdf(5.0, 10.0, 1.0);
        let b = 0.5 * pdf(5.0, 5.0, 0.5);
        assert!((p.p - b / (a + b)).abs() < 1e-12);
        assert!(p.p > 0.99);
    }

    proptest! {
        #[test]
        fn posterior_is_bayes_ratio(
            y in 0.0..30.0f64, w in 0.01..0.99f64, q in 0.2..1.0f64, sigma in 1.0..5.0f64,
        ) {
            let cfg = ModelConfig::default();
            let p = posterior_underreport(y, &params(logit(w), q, sigma), &row(), &cfg).unwrap();
            let a = (1.0 - w) * pdf(y, 10.0, sigma);
            let b = w * pdf(y, 10.0 * q, q * sigma);
            prop_assert!((0.0..=1.0).contains(&p.p));
            prop_assert!((p.p - b / (a + b)).abs() < 1e-12);
        }
    }

    fn series(rates: &[f64]) -> ObservationSeries {
        ObservationSeries::new(
            rates
                .iter()
                .enumerate()
                .map(|(i, &rate)| Observation {
                    month: i as u32 + 1,
                    stratum: StratumKey::new(Sex::Female, AgeBand::Young),
                    rate,
                    population: None,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn map_rule_inverts_shrinkage() {
        let data = series(&[15.0, 20.0, 7.5, 10.0]);
        let p = ModelParams {
            alpha0: 0.0,
            alpha1: 0.0,
            beta: [20.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            q: 0.75,
            sigma: 1.0,
        };
        let r = reconstruct(&data, &p, &ModelConfig::default(), ReconstructionRule::Map).unwrap();
        assert!(r.records[0].posterior_p > 0.5);
        assert_eq!(r.records[0].latent_x, 20.0);
        assert!(!r.records[1].flagged);
        assert_eq!(r.records[1].latent_x, 20.0);
        for rec in &r.records {
            assert!(rec.latent_x >= rec.registered);
            let want = if rec.flagged {
                rec.registered / 0.75
            } else {
                rec.registered
            };
            assert_eq!(rec.latent_x, want);
        }
    }

    #[test]
    fn q_one_reconstruction_is_identity() {
        let data = series(&[3.0, 9.0, 12.0, 1.0]);
        let p = params(0.5, 1.0, 2.0);
        for rule in [ReconstructionRule::Map, ReconstructionRule::Expected] {
            let r = reconstruct(&data, &p, &ModelConfig::default(), rule).unwrap();
            assert_eq!(r.latent(), data.rates());
        }
    }

    #[test]
    fn expected_rule_blends() {
        let data = series(&[7.0, 9.0, 12.0, 8.0]);
        let p = params(0.0, 0.8, 2.0);
        let r = reconstruct(
            &data,
            &p,
            &ModelConfig::default(),
            ReconstructionRule::Expected,
        )
        .unwrap();
        for rec in &r.records {
            let want =
                (1.0 - rec.posterior_p) * rec.registered + rec.posterior_p * rec.registered / 0.8;
            assert!((rec.latent_x - want).abs() < 1e-12);
        }
    }

    #[test]
    fn pct_diff_examples() {
        assert!((pct_diff(19.0, 23.0) - 21.0).abs() < 0.5);
        // Rounded inputs give 20.3; the unrounded rates behind them give 21.8.
        assert!((pct_diff(5.9, 7.1) - 20.34).abs() < 0.01);
        assert_eq!(pct_diff(4.0, 4.0), 0.0);
    }

    #[test]
    fn summary_of_unchanged_reconstruction_is_zero() {
        let data = series(&[3.0, 9.0, 12.0, 1.0]);
        let r = reconstruct(
            &data,
            &params(0.0, 1.0, 2.0),
            &ModelConfig::default(),
            ReconstructionRule::Map,
        )
        .unwrap();
        let s = summarize_incidence(&data, &r, None).unwrap();
        assert!(s.rows.iter().all(|row| row.pct_diff == 0.0));
        // Only one stratum present; the other three are reported.
        assert_eq!(s.warnings.len(), 3);
        assert_eq!(s.rows.len(), 3);
    }

    #[test]
    fn summary_is_scale_invariant() {
        let data = series(&[15.0, 20.0, 7.5, 10.0]);
        let p = params(0.0, 0.75, 1.0);
        let cfg = ModelConfig::default();
        let r = reconstruct(&data, &p, &cfg, ReconstructionRule::Map).unwrap();
        let s = summarize_incidence(&data, &r, None).unwrap();

        let scaled: Vec<f64> = data.rates().iter().map(|v| v * 3.0).collect();
        let data3 = data.with_rates(&scaled).unwrap();
        let mut r3 = r.clone();
        for rec in &mut r3.records {
            rec.registered *= 3.0;
            rec.latent_x *= 3.0;
        }
        let s3 = summarize_incidence(&data3, &r3, None).unwrap();
        for (a, b) in s.rows.iter().zip(&s3.rows) {
            assert!((a.pct_diff - b.pct_diff).abs() < 1e-10);
        }
    }

    fn reference_coverage() -> BTreeMap<StratumKey, f64> {
        let reg = reference_counts();
        let proj = [10280.0, 9062.0, 10166.0, 12914.0];
        reg.iter()
            .zip(proj)
            .map(|((k, c), p)| (*k, c.registered / p))
            .collect()
    }

    #[test]
    fn projection_reproduces_registered_cells() {
        let rep = project_population(&reference_counts(), &reference_coverage()).unwrap();
        let f_young = rep
            .row(SummaryScope::Stratum(StratumKey::new(
                Sex::Female,
                AgeBand::Young,
            )))
            .unwrap();
        assert_eq!(f_young.projected_registered, 10280);
        assert_eq!(rep.global().projected_registered, 42422);
        assert_eq!(rep.global().registered_count, 34417);
        assert_eq!(rep.global().estimated_count, 42228);
    }

    #[test]
    fn full_coverage_is_identity() {
        let rep = project_population(&reference_counts(), &uniform_coverage(1.0)).unwrap();
        assert_eq!(rep.global().projected_registered, 34417);
        assert_eq!(rep.global().projected_estimated, 42228);
    }

    #[test]
    fn invalid_coverage_is_rejected() {
        for bad in [0.0, -0.2, 1.5] {
            assert!(matches!(
                project_population(&reference_counts(), &uniform_coverage(bad)),
                Err(Error::InvalidCoverage { .. })
            ));
        }
    }

    proptest! {
        #[test]
        fn projection_linear_and_homogeneous(k in 0.1..10.0f64, c in 0.1..1.0f64) {
            let base = project_population(&reference_counts(), &uniform_coverage(c)).unwrap();
            let scaled: BTreeMap<_, _> = reference_counts()
                .into_iter()
                .map(|(s, v)| (s, StratumCounts { registered: k * v.registered, estimated: k * v.estimated }))
                .collect();
            let lin = project_population(&scaled, &uniform_coverage(c)).unwrap();
            let half = project_population(&reference_counts(), &uniform_coverage(c / 2.0)).unwrap();
            for ((a, b), h) in base.rows.iter().zip(&lin.rows).zip(&half.rows) {
                let tol = 1e-9 * b.projected_estimated_exact.max(1.0);
                prop_assert!((b.projected_estimated_exact - k * a.projected_estimated_exact).abs() < tol);
                prop_assert!((h.projected_registered_exact - 2.0 * a.projected_registered_exact).abs()
                    < 1e-9 * h.projected_registered_exact.max(1.0));
            }
        }
    }

    #[test]
    fn cost_examples() {
        assert_eq!(cost_impact(51979.0, 42422.0, 1000.0), 9_557_000.0);
        assert_eq!(cost_impact(100.0, 100.0, 1000.0), 0.0);
        assert_eq!(cost_impact(90.0, 100.0, 10.0), -100.0);
        assert!((100.0 * 9557.0 / 42422.0_f64 - 22.5).abs() < 0.05);
    }
}
