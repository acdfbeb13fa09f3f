//! Residual checks: residuals against the mixture mean, sample ACF/PACF and
//! the Ljung–Box portmanteau test.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::model::{
    build_design, mean_mu1, normal_ln_cdf, normal_pdf, ModelConfig, ModelParams, ObservationSeries,
    StratumKey, VarianceMode, ZeroHandling,
};

/// Half-width multiplier of the white-noise band.
pub const BAND_Z: f64 = 1.96;

/// `y − μ1·(1 − ω(1 − q))`.
pub fn residual_value(y: f64, mu1: f64, omega: f64, q: f64) -> f64 {
    y - residual_mean(mu1, omega, q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSeries {
    pub months: Vec<u32>,
    pub observed: Vec<f64>,
    pub expected: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Model standard deviation of each observed value.
    pub sd: Vec<f64>,
}

impl ResidualSeries {
    pub fn standardized(&self) -> Vec<f64> {
        self.residuals
            .iter()
            .zip(&self.sd)
            .map(|(r, s)| r / s)
            .collect()
    }
}

struct Moments {
    mean: f64,
    var: f64,
}

/// First two moments of `max(Z, 0)` for `Z ~ N(mean, sd²)`.
pub fn censored_moments(mean: f64, sd: f64) -> (f64, f64) {
    let z = mean / sd;
    let cdf = normal_ln_cdf(z).exp();
    let pdf = normal_pdf(z, 0.0, 1.0);
    let m1 = mean * cdf + sd * pdf;
    let m2 = (mean * mean + sd * sd) * cdf + mean * sd * pdf;
    (m1, m2)
}

/// Mean and variance of one registered value. Under censored zeros each
/// component is `max(·, 0)` of its normal; otherwise the plain normals.
fn record_moments(config: &ModelConfig, params: &ModelParams, mu1: f64, omega: f64) -> Moments {
    let sd2 = match config.variance {
        VarianceMode::Scaled => params.q * params.sigma,
        VarianceMode::Shared => params.sigma,
    };
    let mu2 = params.q * mu1;
    let plain = |m: f64, s: f64| (m, m * m + s * s);
    let moments = |m: f64, s: f64| match config.zeros {
        ZeroHandling::Censored => censored_moments(m, s),
        ZeroHandling::Density => plain(m, s),
    };
    let (a1, a2) = moments(mu1, params.sigma);
    let (b1, b2) = moments(mu2, sd2);
    let mean = match config.zeros {
        ZeroHandling::Density => residual_mean(mu1, omega, params.q),
        ZeroHandling::Censored => (1.0 - omega) * a1 + omega * b1,
    };
    let second = (1.0 - omega) * a2 + omega * b2;
    Moments {
        mean,
        var: (second - mean * mean).max(0.0),
    }
}

fn residual_mean(mu1: f64, omega: f64, q: f64) -> f64 {
    mu1 * (1.0 - omega * (1.0 - q))
}

fn collect(
    data: &ObservationSeries,
    params: &ModelParams,
    config: &ModelConfig,
    only: Option<StratumKey>,
) -> Result<ResidualSeries> {
    params.validate()?;
    let rows = build_design(data)?;
    let t_max = data.t_max() as usize;
    let mut observed = vec![0.0; t_max];
    let mut expected = vec![0.0; t_max];
    let mut var = vec![0.0; t_max];
    let mut seen = vec![false; t_max];
    for (row, rec) in rows.iter().zip(data.records()) {
        if only.is_some_and(|k| k != rec.stratum) {
            continue;
        }
        let t = rec.month as usize - 1;
        let mu1 = mean_mu1(params, row);
        let m = record_moments(config, params, mu1, config.omega(params, row));
        observed[t] += rec.rate;
        expected[t] += m.mean;
        var[t] += m.var;
        seen[t] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::InvalidSeries(
            "no records for the requested stratum".into(),
        ));
    }
    let residuals = observed.iter().zip(&expected).map(|(y, e)| y - e).collect();
    Ok(ResidualSeries {
        months: (1..=t_max as u32).collect(),
        observed,
        expected,
        residuals,
        sd: var.iter().map(|v| v.sqrt()).collect(),
    })
}

/// Residuals of the total series: registered rates summed over strata at
/// each month, minus the summed expected values. The expected value of each
/// record uses the full fitted linear predictor. With
/// [`ZeroHandling::Density`] it is `(1 − ω(1 − q))·μ1`; with censored zeros
/// each component mean is that of its normal censored at 0, which tends to
/// the same value once `μ1` is a few `σ` above 0.
pub fn total_residuals(
    data: &ObservationSeries,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<ResidualSeries> {
    collect(data, params, config, None)
}

pub fn stratum_residuals(
    data: &ObservationSeries,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<BTreeMap<StratumKey, ResidualSeries>> {
    data.strata()
        .into_iter()
        .map(|k| Ok((k, collect(data, params, config, Some(k))?)))
        .collect()
}

fn check_lags(n: usize, max_lag: usize) -> Result<()> {
    if max_lag == 0 || max_lag >= n {
        return Err(Error::InvalidLag(format!(
            "need 1 <= max_lag < n, got max_lag = {max_lag}, n = {n}"
        )));
    }
    Ok(())
}

/// Sample autocorrelations at lags `1..=max_lag`.
pub fn acf(series: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let n = series.len();
    check_lags(n, max_lag)?;
    let mean = series.iter().sum::<f64>() / n as f64;
    let dev: Vec<f64> = series.iter().map(|y| y - mean).collect();
    let denom: f64 = dev.iter().map(|d| d * d).sum();
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(Error::UndefinedAcf);
    }
    Ok((1..=max_lag)
        .map(|k| {
            dev[..n - k]
                .iter()
                .zip(&dev[k..])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / denom
        })
        .collect())
}

/// Partial autocorrelations at lags `1..=max_lag`, Durbin–Levinson on the
/// sample ACF.
pub fn pacf(series: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let rho = acf(series, max_lag)?;
    Ok(durbin_levinson(&rho))
}

/// PACF from autocorrelations `rho[0] = ρ(1), …`.
pub fn durbin_levinson(rho: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rho.len());
    let mut phi: Vec<f64> = Vec::with_capacity(rho.len());
    for k in 0..rho.len() {
        let (num, den) = phi
            .iter()
            .enumerate()
            .fold((rho[k], 1.0), |(num, den), (j, p)| {
                (num - p * rho[k - 1 - j], den - p * rho[j])
            });
        let pkk = if den.abs() > 0.0 { num / den } else { 0.0 };
        let prev = phi.clone();
        for j in 0..k {
            phi[j] = prev[j] - pkk * prev[k - 1 - j];
        }
        phi.push(pkk);
        out.push(pkk);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Portmanteau {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Ljung–Box test on `acf_values` (lags `1..=L`) of a series of length `n`.
pub fn portmanteau(acf_values: &[f64], n: usize, dof_adjust: usize) -> Result<Portmanteau> {
    let lags = acf_values.len();
    if lags <= dof_adjust {
        return Err(Error::InvalidDof {
            lags,
            adjust: dof_adjust,
        });
    }
    if n <= lags {
        return Err(Error::InvalidLag(format!(
            "{lags} lags for a series of length {n}"
        )));
    }
    let nf = n as f64;
    let statistic = nf
        * (nf + 2.0)
        * acf_values
            .iter()
            .enumerate()
            .map(|(i, r)| r * r / (nf - (i + 1) as f64))
            .sum::<f64>();
    let dof = lags - dof_adjust;
    let chi = ChiSquared::new(dof as f64).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(Portmanteau {
        statistic,
        dof,
        p_value: chi.sf(statistic).clamp(0.0, 1.0),
    })
}

pub fn band_half_width(n: usize) -> f64 {
    BAND_Z / (n as f64).sqrt()
}

pub fn default_max_lag(n: usize) -> usize {
    20.min(n / 4)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsOptions {
    /// Defaults to `min(20, n/4)`.
    pub max_lag: Option<usize>,
    pub dof_adjust: usize,
    /// Divide residuals by the model standard deviation first.
    pub standardized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub residuals: Vec<f64>,
    pub acf: Vec<f64>,
    pub pacf: Vec<f64>,
    pub band: f64,
    pub portmanteau: Portmanteau,
    /// ACF lags with `|ρ̂(k)|` above the band.
    pub lags_outside_band: usize,
    pub pacf_lags_outside_band: usize,
}

pub fn diagnose_series(series: &[f64], options: &DiagnosticsOptions) -> Result<DiagnosticsReport> {
    let n = series.len();
    let max_lag = options.max_lag.unwrap_or_else(|| default_max_lag(n));
    let acf_values = acf(series, max_lag)?;
    let pacf_values = durbin_levinson(&acf_values);
    let band = band_half_width(n);
    let outside = |v: &[f64]| v.iter().filter(|r| r.abs() > band).count();
    Ok(DiagnosticsReport {
        residuals: series.to_vec(),
        portmanteau: portmanteau(&acf_values, n, options.dof_adjust)?,
        lags_outside_band: outside(&acf_values),
        pacf_lags_outside_band: outside(&pacf_values),
        acf: acf_values,
        pacf: pacf_values,
        band,
    })
}

/// Diagnostics of the total-series residuals.
pub fn diagnose(
    data: &ObservationSeries,
    params: &ModelParams,
    config: &ModelConfig,
    options: &DiagnosticsOptions,
) -> Result<DiagnosticsReport> {
    let res = total_residuals(data, params, config)?;
    let series = if options.standardized {
        res.standardized()
    } else {
        res.residuals
    };
    diagnose_series(&series, options)
}
