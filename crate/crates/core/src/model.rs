//! Observation model for an under-reported continuous incidence series.
//!
//! The registered value `y` at month `m` in stratum `(a, s)` is drawn from
//!
//! ```text
//! (1 - ω) · N(μ1, σ²) + ω · N(q·μ1, (q·σ)²)
//! ```
//!
//! where `ω` is the probability that the observation was under-reported,
//! `q ∈ (0, 1]` is the shrinkage applied when it was, and `μ1` is the mean
//! of the true process:
//!
//! ```text
//! μ1 = β0 + β1·τ + β2·a + β3·s + β4·a·s + β5·sin(2πm/3) + β6·cos(2πm/3)
//! ```
//!
//! `τ = (m - 1)/(T - 1)` is month rescaled to `[0, 1]` and drives both the
//! trend and the under-reporting link. The harmonic uses the raw month so the
//! period is three months.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const CLAMP_EPS: f64 = 1e-12;

pub const N_PARAMS: usize = 11;

/// Names of the entries of [`ModelParams::to_array`], in order.
pub const PARAM_NAMES: [&str; N_PARAMS] = [
    "alpha0", "alpha1", "beta0", "beta1", "beta2", "beta3", "beta4", "beta5", "beta6", "q", "sigma",
];

pub const IDX_ALPHA0: usize = 0;
pub const IDX_ALPHA1: usize = 1;
pub const IDX_BETA0: usize = 2;
pub const IDX_Q: usize = 9;
pub const IDX_SIGMA: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sex {
    #[serde(rename = "F")]
    Female,
    #[serde(rename = "M")]
    Male,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AgeBand {
    #[serde(rename = "15-29")]
    Young,
    #[serde(rename = "30-94")]
    Older,
}

impl Sex {
    pub fn indicator(self) -> f64 {
        match self {
            Sex::Female => 0.0,
            Sex::Male => 1.0,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Sex::Female => "F",
            Sex::Male => "M",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "F" | "f" => Some(Sex::Female),
            "M" | "m" => Some(Sex::Male),
            _ => None,
        }
    }
}

impl AgeBand {
    pub fn indicator(self) -> f64 {
        match self {
            AgeBand::Young => 0.0,
            AgeBand::Older => 1.0,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            AgeBand::Young => "15-29",
            AgeBand::Older => "30-94",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "15-29" => Some(AgeBand::Young),
            "30-94" => Some(AgeBand::Older),
            _ => None,
        }
    }
}

/// A (sex, age band) sub-population. Coded `s = 1` for men and `a = 1` for
/// the 30–94 band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StratumKey {
    pub sex: Sex,
    pub age_band: AgeBand,
}

impl StratumKey {
    pub const fn new(sex: Sex, age_band: AgeBand) -> Self {
        Self { sex, age_band }
    }

    /// The four strata in the order females 15–29, females 30–94, males
    /// 15–29, males 30–94.
    pub fn all() -> [StratumKey; 4] {
        [
            StratumKey::new(Sex::Female, AgeBand::Young),
            StratumKey::new(Sex::Female, AgeBand::Older),
            StratumKey::new(Sex::Male, AgeBand::Young),
            StratumKey::new(Sex::Male, AgeBand::Older),
        ]
    }
}

impl fmt::Display for StratumKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.sex.code(), self.age_band.code())
    }
}

/// One registered value: incidence rate per 100,000 person-months.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub month: u32,
    pub stratum: StratumKey,
    pub rate: f64,
    /// Person-months at risk, when known.
    pub population: Option<f64>,
}

/// Stratified monthly series. Every stratum covers months `1..=t_max`
/// contiguously; records are stored sorted by (stratum, month).
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSeries {
    records: Vec<Observation>,
    t_max: u32,
}

impl ObservationSeries {
    pub fn new(mut records: Vec<Observation>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyInput("series has no records".into()));
        }
        for r in &records {
            if r.month == 0 {
                return Err(Error::InvalidSeries(format!(
                    "stratum {} has month index 0; months start at 1",
                    r.stratum
                )));
            }
            if !r.rate.is_finite() || r.rate < 0.0 {
                return Err(Error::InvalidSeries(format!(
                    "stratum {} month {}: rate {} is not a finite non-negative number",
                    r.stratum, r.month, r.rate
                )));
            }
            if let Some(p) = r.population {
                if !(p.is_finite() && p > 0.0) {
                    return Err(Error::InvalidSeries(format!(
                        "stratum {} month {}: population {} must be positive",
                        r.stratum, r.month, p
                    )));
                }
            }
        }
        records.sort_by_key(|r| (r.stratum, r.month));

        let mut by_stratum: BTreeMap<StratumKey, Vec<u32>> = BTreeMap::new();
        for r in &records {
            by_stratum.entry(r.stratum).or_default().push(r.month);
        }
        let t_max = records.iter().map(|r| r.month).max().unwrap_or(0);
        for (stratum, months) in &by_stratum {
            for w in months.windows(2) {
                if w[0] == w[1] {
                    return Err(Error::DuplicateKey {
                        stratum: stratum.to_string(),
                        month: w[0],
                    });
                }
            }
            let mut expected = 1;
            for &m in months {
                if m != expected {
                    return Err(Error::MissingMonth {
                        stratum: stratum.to_string(),
                        month: expected,
                    });
                }
                expected += 1;
            }
            if expected - 1 != t_max {
                return Err(Error::MissingMonth {
                    stratum: stratum.to_string(),
                    month: expected,
                });
            }
        }
        Ok(Self { records, t_max })
    }

    pub fn records(&self) -> &[Observation] {
        &self.records
    }

    pub fn t_max(&self) -> u32 {
        self.t_max
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn rates(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.rate).collect()
    }

    pub fn strata(&self) -> Vec<StratumKey> {
        let mut s: Vec<StratumKey> = self.records.iter().map(|r| r.stratum).collect();
        s.dedup();
        s
    }

    /// Same design, new rates. `rates` must align with [`Self::records`].
    pub fn with_rates(&self, rates: &[f64]) -> Result<Self> {
        if rates.len() != self.records.len() {
            return Err(Error::InvalidSeries(format!(
                "expected {} rates, got {}",
                self.records.len(),
                rates.len()
            )));
        }
        let records = self
            .records
            .iter()
            .zip(rates)
            .map(|(r, &rate)| Observation { rate, ..*r })
            .collect();
        Self::new(records)
    }
}

/// Full parameter vector of the mixture model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub alpha0: f64,
    pub alpha1: f64,
    pub beta: [f64; 7],
    pub q: f64,
    pub sigma: f64,
}

impl ModelParams {
    pub fn to_array(&self) -> [f64; N_PARAMS] {
        let b = &self.beta;
        [
            self.alpha0,
            self.alpha1,
            b[0],
            b[1],
            b[2],
            b[3],
            b[4],
            b[5],
            b[6],
            self.q,
            self.sigma,
        ]
    }

    pub fn from_array(v: &[f64; N_PARAMS]) -> Self {
        Self {
            alpha0: v[0],
            alpha1: v[1],
            beta: [v[2], v[3], v[4], v[5], v[6], v[7], v[8]],
            q: v[9],
            sigma: v[10],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_array().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite parameter in {self:?}"
            )));
        }
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "q = {} must lie in (0, 1]",
                self.q
            )));
        }
        if self.sigma <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "sigma = {} must be positive",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Link between normalized time and the under-reporting probability ω.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Link {
    /// `ω = expit(α0 + α1·τ)`.
    #[default]
    Logit,
    /// `ω = exp(α0 + α1·τ)` clamped into the open unit interval.
    ClampedLog,
}

/// Scale of the under-reported component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMode {
    /// `sd = q·σ`, the distribution of `q·X` for `X ~ N(μ1, σ²)`.
    #[default]
    Scaled,
    /// `sd = σ` for both components.
    Shared,
}

/// Likelihood contribution of a registered value of exactly zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZeroHandling {
    /// Zero is a left-censored value: it contributes `P(Y <= 0)`. Without
    /// this, the scaled component puts unbounded density on zeros as
    /// `q -> 0`.
    #[default]
    Censored,
    /// Zero is an ordinary point evaluated with the mixture density.
    Density,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub link: Link,
    pub variance: VarianceMode,
    pub zeros: ZeroHandling,
}

/// Covariates for one record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesignRow {
    pub tau: f64,
    pub month: u32,
    pub a: f64,
    pub s: f64,
    pub axs: f64,
    pub sin3: f64,
    pub cos3: f64,
}

impl DesignRow {
    pub fn new(month: u32, t_max: u32, stratum: StratumKey) -> Self {
        let tau = if t_max > 1 {
            (month as f64 - 1.0) / (t_max as f64 - 1.0)
        } else {
            0.0
        };
        let a = stratum.age_band.indicator();
        let s = stratum.sex.indicator();
        let angle = 2.0 * PI * month as f64 / 3.0;
        Self {
            tau,
            month,
            a,
            s,
            axs: a * s,
            sin3: angle.sin(),
            cos3: angle.cos(),
        }
    }

    /// Covariate vector multiplying `β0..β6`.
    pub fn covariates(&self) -> [f64; 7] {
        [
            1.0, self.tau, self.a, self.s, self.axs, self.sin3, self.cos3,
        ]
    }
}

pub fn build_design(data: &ObservationSeries) -> Result<Vec<DesignRow>> {
    if data.t_max() == 0 || data.is_empty() {
        return Err(Error::EmptyInput("series horizon is zero".into()));
    }
    Ok(data
        .records()
        .iter()
        .map(|r| DesignRow::new(r.month, data.t_max(), r.stratum))
        .collect())
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Under-reporting probability under the logit link.
pub fn omega_at(alpha0: f64, alpha1: f64, tau: f64) -> Result<f64> {
    Link::Logit.omega(alpha0, alpha1, tau)
}

impl Link {
    pub fn omega(self, alpha0: f64, alpha1: f64, tau: f64) -> Result<f64> {
        if !(alpha0.is_finite() && alpha1.is_finite() && tau.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite link input (alpha0={alpha0}, alpha1={alpha1}, tau={tau})"
            )));
        }
        Ok(self.omega_unchecked(alpha0, alpha1, tau))
    }

    pub(crate) fn omega_unchecked(self, alpha0: f64, alpha1: f64, tau: f64) -> f64 {
        let eta = alpha0 + alpha1 * tau;
        match self {
            Link::Logit => expit(eta),
            Link::ClampedLog => eta.exp().clamp(CLAMP_EPS, 1.0 - CLAMP_EPS),
        }
    }
}

pub fn mean_mu1(params: &ModelParams, row: &DesignRow) -> f64 {
    params
        .beta
        .iter()
        .zip(row.covariates())
        .map(|(b, x)| b * x)
        .sum()
}

pub fn normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    normal_ln_pdf(x, mean, sd).exp()
}

pub fn normal_ln_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - LN_SQRT_2PI
}

/// `ln Φ(z)` for the standard normal distribution function.
pub fn normal_ln_cdf(z: f64) -> f64 {
    if z > -30.0 {
        (0.5 * erfc(-z / std::f64::consts::SQRT_2)).ln()
    } else {
        // Mills-ratio expansion; erfc underflows below about -37.
        let z2 = z * z;
        -0.5 * z2 - (-z).ln() - LN_SQRT_2PI + (1.0 - 1.0 / z2 + 3.0 / (z2 * z2)).ln()
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let hi = a.max(b);
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + ((a - hi).exp() + (b - hi).exp()).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureEval {
    pub mu1: f64,
    pub mu2: f64,
    pub omega: f64,
    pub density: f64,
}

/// Per-record quantities shared by the density, the posterior and the
/// residuals.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Components {
    pub mu1: f64,
    pub mu2: f64,
    pub sd1: f64,
    pub sd2: f64,
    pub omega: f64,
}

impl Components {
    /// Log weights plus log densities of the true and under-reported
    /// components at `y`.
    pub fn weighted_ln(&self, y: f64) -> (f64, f64) {
        let l1 = (1.0 - self.omega).ln() + normal_ln_pdf(y, self.mu1, self.sd1);
        let l2 = self.omega.ln() + normal_ln_pdf(y, self.mu2, self.sd2);
        (l1, l2)
    }

    /// Log weights plus log probabilities of `Y <= 0` under each component.
    pub fn weighted_ln_censored(&self) -> (f64, f64) {
        let l1 = (1.0 - self.omega).ln() + normal_ln_cdf(-self.mu1 / self.sd1);
        let l2 = self.omega.ln() + normal_ln_cdf(-self.mu2 / self.sd2);
        (l1, l2)
    }

    pub fn ln_density(&self, y: f64) -> f64 {
        let (l1, l2) = self.weighted_ln(y);
        log_add_exp(l1, l2)
    }

    /// Per-component log terms entering the likelihood of `y`.
    pub fn weighted_ln_terms(&self, y: f64, zeros: ZeroHandling) -> (f64, f64) {
        match zeros {
            ZeroHandling::Censored if y <= 0.0 => self.weighted_ln_censored(),
            _ => self.weighted_ln(y),
        }
    }

    pub fn ln_contribution(&self, y: f64, zeros: ZeroHandling) -> f64 {
        let (l1, l2) = self.weighted_ln_terms(y, zeros);
        log_add_exp(l1, l2)
    }
}

impl ModelConfig {
    pub(crate) fn components(&self, params: &ModelParams, row: &DesignRow) -> Components {
        let mu1 = mean_mu1(params, row);
        let sd2 = match self.variance {
            VarianceMode::Scaled => params.q * params.sigma,
            VarianceMode::Shared => params.sigma,
        };
        Components {
            mu1,
            mu2: params.q * mu1,
            sd1: params.sigma,
            sd2,
            omega: self
                .link
                .omega_unchecked(params.alpha0, params.alpha1, row.tau),
        }
    }

    pub fn omega(&self, params: &ModelParams, row: &DesignRow) -> f64 {
        self.link
            .omega_unchecked(params.alpha0, params.alpha1, row.tau)
    }

    pub fn mixture_density(
        &self,
        y: f64,
        params: &ModelParams,
        row: &DesignRow,
    ) -> Result<MixtureEval> {
        params.validate()?;
        let c = self.components(params, row);
        Ok(MixtureEval {
            mu1: c.mu1,
            mu2: c.mu2,
            omega: c.omega,
            density: c.ln_density(y).exp(),
        })
    }

    /// Total log-likelihood. Evaluated in log space, so a record whose
    /// density underflows in linear scale still contributes a finite term;
    /// `-inf` is returned only if some record has no support at all. Zero
    /// rates are treated according to [`ZeroHandling`].
    pub fn log_likelihood(&self, params: &ModelParams, data: &ObservationSeries) -> Result<f64> {
        params.validate()?;
        let rows = build_design(data)?;
        Ok(self.log_likelihood_rows(params, &rows, data.records()))
    }

    pub(crate) fn log_likelihood_rows(
        &self,
        params: &ModelParams,
        rows: &[DesignRow],
        records: &[Observation],
    ) -> f64 {
        let mut total = 0.0;
        for (row, rec) in rows.iter().zip(records) {
            let ld = self
                .components(params, row)
                .ln_contribution(rec.rate, self.zeros);
            if !ld.is_finite() {
                return f64::NEG_INFINITY;
            }
            total += ld;
        }
        total
    }

    /// Expected registered value `(1 - ω(1 - q))·μ1`.
    pub fn mixture_mean(&self, params: &ModelParams, row: &DesignRow) -> f64 {
        let c = self.components(params, row);
        (1.0 - c.omega) * c.mu1 + c.omega * c.mu2
    }
}

/// Density under the default configuration (logit link, scaled variance).
pub fn mixture_density(y: f64, params: &ModelParams, row: &DesignRow) -> Result<MixtureEval> {
    ModelConfig::default().mixture_density(y, params, row)
}

/// Log-likelihood under the default configuration.
pub fn log_likelihood(params: &ModelParams, data: &ObservationSeries) -> Result<f64> {
    ModelConfig::default().log_likelihood(params, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn params_with_beta(beta: [f64; 7]) -> ModelParams {
        ModelParams {
            alpha0: 0.0,
            alpha1: 0.0,
            beta,
            q: 0.5,
            sigma: 2.0,
        }
    }

    // Textbook pdf written independently of normal_ln_pdf.
    fn pdf_oracle(x: f64, m: f64, s: f64) -> f64 {
        (-(x - m) * (x - m) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
    }

    fn fa() -> StratumKey {
        StratumKey::new(Sex::Female, AgeBand::Young)
    }

    #[test]
    fn omega_reproduces_endpoint_values() {
        assert_abs_diff_eq!(omega_at(2.99, -4.31, 0.0).unwrap(), 0.9521, epsilon = 1e-4);
        assert_abs_diff_eq!(omega_at(2.99, -4.31, 1.0).unwrap(), 0.2108, epsilon = 1e-4);
        assert_eq!(omega_at(0.0, 0.0, 0.5).unwrap(), 0.5);
    }

    #[test]
    fn omega_rejects_non_finite() {
        assert!(omega_at(f64::NAN, 0.0, 0.0).is_err());
        assert!(omega_at(0.0, f64::INFINITY, 0.0).is_err());
    }

    #[test]
    fn clamped_log_link_stays_inside_unit_interval() {
        let w = Link::ClampedLog.omega(2.99, -4.31, 0.0).unwrap();
        assert!(w < 1.0 && w > 0.99);
        let w = Link::ClampedLog.omega(-800.0, 0.0, 0.0).unwrap();
        assert!(w > 0.0);
    }

    #[test]
    fn mean_examples() {
        let row = DesignRow::new(5, 96, StratumKey::new(Sex::Male, AgeBand::Older));
        let p = params_with_beta([13.76, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(mean_mu1(&p, &row), 13.76);

        let row = DesignRow::new(3, 96, fa());
        let p = params_with_beta([1.0, 0.0, 0.0, 0.0, 0.0, 4.16, 0.0]);
        assert_abs_diff_eq!(mean_mu1(&p, &row), 1.0, epsilon = 1e-12);

        let row = DesignRow::new(7, 96, StratumKey::new(Sex::Female, AgeBand::Older));
        let p = params_with_beta([2.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(mean_mu1(&p, &row), 1.0);
    }

    #[test]
    fn design_row_invariants() {
        assert_eq!(DesignRow::new(1, 96, fa()).tau, 0.0);
        assert_eq!(DesignRow::new(96, 96, fa()).tau, 1.0);
        assert_eq!(DesignRow::new(1, 1, fa()).tau, 0.0);
        let r = DesignRow::new(2, 96, fa());
        assert_abs_diff_eq!(r.sin3, -0.866_025_403_784_438_6, epsilon = 1e-12);
        for m in 1..=200 {
            let r = DesignRow::new(m, 200, StratumKey::new(Sex::Male, AgeBand::Older));
            assert_abs_diff_eq!(r.sin3 * r.sin3 + r.cos3 * r.cos3, 1.0, epsilon = 1e-12);
            assert_eq!(r.axs, r.a * r.s);
        }
    }

    #[test]
    fn density_with_q_one_is_single_normal() {
        let row = DesignRow::new(4, 12, fa());
        let mut p = params_with_beta([10.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        p.q = 1.0;
        for (a0, y) in [(-2.0, 9.0), (0.0, 10.5), (3.0, 14.0)] {
            p.alpha0 = a0;
            let e = mixture_density(y, &p, &row).unwrap();
            assert_abs_diff_eq!(e.density, pdf_oracle(y, 10.0, 2.0), epsilon = 1e-15);
        }
    }

    #[test]
    fn density_matches_weighted_pdf_oracle() {
        // ω = 0.3 through α0 = logit(0.3), α1 = 0.
        let row = DesignRow::new(3, 12, fa());
        let p = ModelParams {
            alpha0: logit(0.3),
            alpha1: 0.0,
            beta: [10.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            q: 0.5,
            sigma: 2.0,
        };
        let e = mixture_density(5.0, &p, &row).unwrap();
        let expected = 0.7 * pdf_oracle(5.0, 10.0, 2.0) + 0.3 * pdf_oracle(5.0, 5.0, 1.0);
        assert_abs_diff_eq!(e.density, expected, epsilon = 1e-14);
        assert_abs_diff_eq!(e.mu2, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn density_all_underreported_peaks_at_shrunk_mean() {
        let row = DesignRow::new(3, 12, fa());
        let p = ModelParams {
            alpha0: 60.0,
            alpha1: 0.0,
            beta: [10.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            q: 0.5,
            sigma: 2.0,
        };
        let e = mixture_density(5.0, &p, &row).unwrap();
        assert_abs_diff_eq!(e.density, 0.398_942_280_401_432_7, epsilon = 1e-12);
    }

    #[test]
    fn shared_variance_uses_sigma_for_both_components() {
        let cfg = ModelConfig {
            link: Link::Logit,
            variance: VarianceMode::Shared,
            ..Default::default()
        };
        let row = DesignRow::new(3, 12, fa());
        let p = ModelParams {
            alpha0: 0.0,
            alpha1: 0.0,
            beta: [10.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            q: 0.5,
            sigma: 2.0,
        };
        let d = cfg.mixture_density(6.0, &p, &row).unwrap().density;
        let expected = 0.5 * pdf_oracle(6.0, 10.0, 2.0) + 0.5 * pdf_oracle(6.0, 5.0, 2.0);
        assert_abs_diff_eq!(d, expected, epsilon = 1e-14);
    }

    #[test]
    fn zero_q_is_rejected() {
        let row = DesignRow::new(1, 12, fa());
        let mut p = params_with_beta([10.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        p.q = 0.0;
        assert!(matches!(
            mixture_density(1.0, &p, &row),
            Err(Error::InvalidParameter(_))
        ));
    }

    fn one_stratum(rates: &[f64]) -> ObservationSeries {
        ObservationSeries::new(
            rates
                .iter()
                .enumerate()
                .map(|(i, &rate)| Observation {
                    month: i as u32 + 1,
                    stratum: fa(),
                    rate,
                    population: None,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_record_loglik_closed_form() {
        let data = one_stratum(&[10.0]);
        let mut p = params_with_beta([10.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        p.q = 1.0;
        let ll = log_likelihood(&p, &data).unwrap();
        let expected = -(2.0 * (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert_abs_diff_eq!(ll, expected, epsilon = 1e-14);
    }

    #[test]
    fn loglik_is_additive_over_identical_records() {
        let p = ModelParams {
            alpha0: 0.4,
            alpha1: -1.0,
            beta: [10.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            q: 0.7,
            sigma: 1.5,
        };
        // tau = 0 for T = 1, so a second stratum with identical covariates
        // gives an identical record.
        let rec = |stratum| Observation {
            month: 1,
            stratum,
            rate: 8.0,
            population: None,
        };
        let one = ObservationSeries::new(vec![rec(fa())]).unwrap();
        let two = ObservationSeries::new(vec![
            rec(fa()),
            rec(StratumKey::new(Sex::Male, AgeBand::Young)),
        ])
        .unwrap();
        let ll1 = log_likelihood(&p, &one).unwrap();
        let ll2 = log_likelihood(&p, &two).unwrap();
        assert_eq!(ll2, 2.0 * ll1);
    }

    #[test]
    fn series_validation() {
        let ok = one_stratum(&[1.0, 2.0, 3.0]);
        assert_eq!(ok.t_max(), 3);

        let rec = |month, rate| Observation {
            month,
            stratum: fa(),
            rate,
            population: None,
        };
        assert!(matches!(
            ObservationSeries::new(vec![rec(1, 1.0), rec(1, 2.0)]),
            Err(Error::DuplicateKey { month: 1, .. })
        ));
        assert!(matches!(
            ObservationSeries::new(vec![rec(1, 1.0), rec(3, 2.0)]),
            Err(Error::MissingMonth { month: 2, .. })
        ));
        assert!(ObservationSeries::new(vec![rec(1, -1.0)]).is_err());
        assert!(ObservationSeries::new(vec![rec(1, f64::NAN)]).is_err());
        assert!(ObservationSeries::new(vec![]).is_err());

        // Strata of unequal length.
        let mut recs = vec![rec(1, 1.0), rec(2, 1.0)];
        recs.push(Observation {
            month: 1,
            stratum: StratumKey::new(Sex::Male, AgeBand::Young),
            rate: 1.0,
            population: None,
        });
        assert!(matches!(
            ObservationSeries::new(recs),
            Err(Error::MissingMonth { month: 2, .. })
        ));
    }

    #[test]
    fn param_array_round_trip() {
        let p = ModelParams {
            alpha0: 2.99,
            alpha1: -4.31,
            beta: [13.76, 0.36, -13.53, -1.6, 3.25, 4.16, 0.52],
            q: 0.75,
            sigma: 2.0,
        };
        assert_eq!(ModelParams::from_array(&p.to_array()), p);
    }
}
